use rand::Rng;

use super::scenario::{AgentKind, ScenarioConfig};
use super::world::{AgentState, WorldState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SiteKnowledge {
    /// Last reported status: 0 no victims, 1 victims, 2 a critical victim.
    pub status: u8,
    /// Step at which the report was made by whichever agent made it.
    pub observed_at: Option<u64>,
    /// Step at which this agent received the report.
    pub updated_at: Option<u64>,
}

/// What one agent believes about the sites.
#[derive(Clone, Debug, PartialEq)]
pub struct Knowledge {
    /// Indexed by site id - 1.
    pub sites: Vec<SiteKnowledge>,
    /// Last site the agent stood in.
    pub last_site: usize,
    pub last_decision_step: Option<u64>,
}

impl Knowledge {
    pub fn new(num_sites: usize) -> Self {
        Self {
            sites: vec![SiteKnowledge::default(); num_sites],
            last_site: 1,
            last_decision_step: None,
        }
    }

    pub fn site(&self, id: usize) -> &SiteKnowledge {
        &self.sites[id - 1]
    }
}

/// Draw a sensor report: the true value, or with probability `noise` a
/// uniformly chosen different legal value. Returns the report and whether it was corrupted.
pub fn sensor_report<R: Rng + ?Sized>(truth: u8, levels: u8, noise: f64, rng: &mut R) -> (u8, bool) {
    let u: f64 = rng.random();
    if levels < 2 || u >= noise {
        return (truth, false);
    }
    let k = rng.random_range(0..levels - 1);
    (if k >= truth { k + 1 } else { k }, true)
}

fn sensed_status(world: &WorldState, scenario: &ScenarioConfig, kind: AgentKind, site: usize) -> (u8, u8) {
    let truth = world.site_status(scenario, site);
    match kind {
        AgentKind::Ugv => (truth, 3),
        AgentKind::Uav => (truth.min(1), 2),
    }
}

/// Local sensing followed by one round of pairwise exchange.
///
/// Every agent inside a site records a (possibly corrupted) report of it. Then
/// each pair within range swaps the knowledge both held before the exchange;
/// each direction fails independently. A report replaces the receiver's entry
/// when it was observed later.
pub fn observe_and_communicate<R: Rng + ?Sized>(
    world: &WorldState,
    scenario: &ScenarioConfig,
    knowledge: &mut [Knowledge],
    rng: &mut R,
) {
    let now = world.clock;
    for (a, k) in world.agents.iter().zip(knowledge.iter_mut()) {
        if let Some(site) = scenario.site_of(a.pos) {
            let (truth, levels) = sensed_status(world, scenario, a.kind, site);
            let (status, _) = sensor_report(truth, levels, scenario.obs_noise_prob, rng);
            k.sites[site - 1] = SiteKnowledge {
                status,
                observed_at: Some(now),
                updated_at: Some(now),
            };
            k.last_site = site;
        }
    }

    let snapshot: Vec<Vec<SiteKnowledge>> = knowledge.iter().map(|k| k.sites.clone()).collect();
    let n = world.agents.len();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&world.agents[i], &world.agents[j]);
            if a.pos.chebyshev(b.pos) > scenario.comm_range(a.kind, b.kind) {
                continue;
            }
            let to_j = rng.random::<f64>() >= scenario.comm_fail_prob;
            let to_i = rng.random::<f64>() >= scenario.comm_fail_prob;
            if to_j {
                merge(&mut knowledge[j], &snapshot[i], now);
            }
            if to_i {
                merge(&mut knowledge[i], &snapshot[j], now);
            }
        }
    }
}

fn merge(receiver: &mut Knowledge, sent: &[SiteKnowledge], now: u64) {
    for (mine, theirs) in receiver.sites.iter_mut().zip(sent) {
        if theirs.observed_at > mine.observed_at {
            mine.status = theirs.status;
            mine.observed_at = theirs.observed_at;
            mine.updated_at = Some(now);
        }
    }
}

/// The five-field macro-observation. Site fields are 1-based ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObservationVector {
    pub self_state: u8,
    pub self_location: usize,
    pub location_state: u8,
    pub second_location: usize,
    pub second_location_state: u8,
}

impl ObservationVector {
    /// Mixed-radix index over `(2, s, 3, s, 3)`, first field most significant.
    pub fn encode(&self, s: usize) -> Result<usize> {
        let ok = self.self_state < 2
            && (1..=s).contains(&self.self_location)
            && self.location_state < 3
            && (1..=s).contains(&self.second_location)
            && self.second_location_state < 3;
        if !ok {
            return Err(Error::Domain(format!("observation {self:?} out of range for {s} sites")));
        }
        let mut idx = self.self_state as usize;
        idx = idx * s + (self.self_location - 1);
        idx = idx * 3 + self.location_state as usize;
        idx = idx * s + (self.second_location - 1);
        idx = idx * 3 + self.second_location_state as usize;
        Ok(idx)
    }

    pub fn decode(index: usize, s: usize) -> Result<Self> {
        if s == 0 || index >= 18 * s * s {
            return Err(Error::Domain(format!("observation index {index} out of range for {s} sites")));
        }
        let mut r = index;
        let second_location_state = (r % 3) as u8;
        r /= 3;
        let second_location = r % s + 1;
        r /= s;
        let location_state = (r % 3) as u8;
        r /= 3;
        let self_location = r % s + 1;
        r /= s;
        Ok(Self {
            self_state: r as u8,
            self_location,
            location_state,
            second_location,
            second_location_state,
        })
    }
}

/// Summarize an agent's knowledge at a decision point.
///
/// The second site is the most urgent one heard about since the last decision
/// (status, then newest report, then lowest id), excluding the agent's own
/// site; with nothing new it repeats the self fields.
pub fn build_observation(knowledge: &Knowledge, agent: &AgentState, scenario: &ScenarioConfig) -> ObservationVector {
    let here = scenario.site_of(agent.pos).unwrap_or(knowledge.last_site);
    let self_status = knowledge.site(here).status;
    let fresh = |k: &SiteKnowledge| match (k.updated_at, knowledge.last_decision_step) {
        (Some(u), Some(d)) => u > d,
        (Some(_), None) => true,
        (None, _) => false,
    };
    let second = (1..=scenario.num_sites())
        .filter(|&id| id != here && fresh(knowledge.site(id)))
        .max_by(|&a, &b| {
            let (ka, kb) = (knowledge.site(a), knowledge.site(b));
            ka.status
                .cmp(&kb.status)
                .then(ka.observed_at.cmp(&kb.observed_at))
                .then(b.cmp(&a))
        });
    let (second_location, second_location_state) = match second {
        Some(id) => (id, knowledge.site(id).status),
        None => (here, self_status),
    };
    ObservationVector {
        self_state: u8::from(agent.carrying.is_some()),
        self_location: here,
        location_state: self_status,
        second_location,
        second_location_state,
    }
}
