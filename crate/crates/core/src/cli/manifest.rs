use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one artifact-producing run, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; replaying them reproduces the outputs.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub master_seed: Option<u64>,
    /// Input path as given on the command line -> SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output file name -> SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("{}: {e}", path.display()),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Fail if any recorded input changed on disk.
    pub fn check_inputs(&self) -> Result<()> {
        for (path, digest) in &self.inputs {
            let now = file_digest(Path::new(path))?;
            if &now != digest {
                return Err(Error::Mismatch(format!("input {path} changed since the run was recorded")));
            }
        }
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(sha256_hex(&bytes))
}

/// Replace the value of `--out` in a recorded argument list.
pub fn redirect_out(argv: &[String], out: &Path) -> Result<Vec<String>> {
    let out = out.to_string_lossy().into_owned();
    let mut res = Vec::with_capacity(argv.len());
    let mut found = false;
    let mut iter = argv.iter();
    while let Some(a) = iter.next() {
        if a == "--out" {
            iter.next();
            res.push(a.clone());
            res.push(out.clone());
            found = true;
        } else if a.starts_with("--out=") {
            res.push(format!("--out={out}"));
            found = true;
        } else {
            res.push(a.clone());
        }
    }
    if !found {
        return Err(Error::Validation("recorded command has no --out argument".into()));
    }
    Ok(res)
}
