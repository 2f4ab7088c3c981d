fn main() {
    std::process::exit(isem_core::cli::run_command(std::env::args_os()));
}
