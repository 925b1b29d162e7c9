//! Episode runner, metrics, experiment suites, trajectory logs and replay.

mod episode;
mod metrics;
mod suite;
mod trajectory;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use episode::{run_episode, run_episode_full, EpisodeRun};
pub use metrics::{ces, compute_metrics, render_table, to_csv, Metrics, MetricsReport, Slice, SliceSuc};
pub use suite::{episode_seed, run_suite, SuiteConfig, SuiteReport, SuiteRow, TaskSet, BASELINE_NAME};
pub use trajectory::{replay, Replay, RoundLog, TrajectoryFooter, TrajectoryHeader, TrajectoryLog};

use crate::comm::{CommConfig, Protocol};
use crate::error::{Error, Result};
use crate::perception::DetectorNoise;
use crate::taskgen::TaskLabel;
use crate::world::{Action, CapabilityVector, Outcome, Scene};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_STEPS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Roster {
    /// Three agents: (1,0,0), (1,0,1), (1,1,1).
    SettingI,
    /// Setting I plus a second (1,1,1).
    SettingII,
    /// One (1,1,1) agent.
    SingleAgent,
}

impl Roster {
    pub fn capabilities(self) -> Vec<CapabilityVector> {
        let scout = CapabilityVector::new(true, false, false);
        let tall_scout = CapabilityVector::new(true, false, true);
        let full = CapabilityVector::new(true, true, true);
        match self {
            Roster::SettingI => vec![scout, tall_scout, full],
            Roster::SettingII => vec![scout, tall_scout, full, full],
            Roster::SingleAgent => vec![full],
        }
    }
}

impl FromStr for Roster {
    type Err = Error;

    fn from_str(s: &str) -> Result<Roster> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" | "setting1" | "settingi" => Ok(Roster::SettingI),
            "ii" | "2" | "setting2" | "settingii" => Ok(Roster::SettingII),
            "sa" | "single" => Ok(Roster::SingleAgent),
            _ => Err(Error::Lookup {
                kind: "roster",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Policy {
    #[default]
    Heuristic,
    /// Heuristic sub-task allocation, sub-goals from the trained heads.
    Learned,
    /// Uniform random legal actions other than Stop, one per round.
    Random,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Heuristic => "heuristic",
            Policy::Learned => "learned",
            Policy::Random => "random",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Policy> {
        match s.to_ascii_lowercase().as_str() {
            "heuristic" => Ok(Policy::Heuristic),
            "learned" => Ok(Policy::Learned),
            "random" => Ok(Policy::Random),
            _ => Err(Error::Lookup {
                kind: "policy",
                name: s.to_string(),
            }),
        }
    }
}

/// What the agents know before they look around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Knowledge {
    /// Only the floor plan.
    #[default]
    Perceived,
    /// The full current scene and every misplacement, refreshed each round.
    Oracle,
    /// Where the misplaced objects are, granted once at the start.
    Misplacements,
}

/// Module switches for ablations; all off by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Ablations {
    /// Detector verdicts are fair coin flips.
    pub no_knowledge: bool,
    /// Detections are never shared.
    pub no_detector: bool,
    /// Targets are random known receptacle instances.
    pub no_predictor: bool,
    /// Only the first low-level action of each learned sub-goal is executed.
    pub flat: bool,
}

impl Ablations {
    pub fn parse_list(s: &str) -> Result<Ablations> {
        let mut a = Ablations::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "know" | "knowledge" | "no-knowledge" => a.no_knowledge = true,
                "det" | "detector" | "no-detector" => a.no_detector = true,
                "pred" | "predictor" | "no-predictor" => a.no_predictor = true,
                "flat" | "hier" | "no-hier" => a.flat = true,
                "none" => {}
                _ => {
                    return Err(Error::Lookup {
                        kind: "ablation",
                        name: part.to_string(),
                    })
                }
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_knowledge {
            parts.push("no-knowledge");
        }
        if self.no_detector {
            parts.push("no-detector");
        }
        if self.no_predictor {
            parts.push("no-predictor");
        }
        if self.flat {
            parts.push("flat");
        }
        parts.join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub roster: Vec<CapabilityVector>,
    pub protocol: Protocol,
    pub policy: Policy,
    pub knowledge: Knowledge,
    pub ablations: Ablations,
    pub noise: DetectorNoise,
    pub comm: CommConfig,
    pub max_steps: usize,
}

impl EpisodeConfig {
    pub fn new(roster: Vec<CapabilityVector>, protocol: Protocol) -> EpisodeConfig {
        EpisodeConfig {
            roster,
            protocol,
            policy: Policy::Heuristic,
            knowledge: Knowledge::Perceived,
            ablations: Ablations::default(),
            noise: DetectorNoise::default(),
            comm: CommConfig::default(),
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    /// The demonstrator: oracle knowledge, full communication, heuristic policy.
    pub fn expert(roster: Vec<CapabilityVector>) -> EpisodeConfig {
        EpisodeConfig {
            knowledge: Knowledge::Oracle,
            ..EpisodeConfig::new(roster, Protocol::BroadComm)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.roster.is_empty() {
            return Err(Error::Config("empty roster".into()));
        }
        if self.roster.iter().any(|c| !c.nav) {
            return Err(Error::Config("every agent must be able to navigate".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if self.ablations.flat && self.policy != Policy::Learned {
            return Err(Error::Config("the flat ablation needs the learned policy".into()));
        }
        self.noise.validate()?;
        self.comm.validate()
    }
}

/// Per-object result of an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectOutcome {
    pub object: String,
    /// Some agent picked it up at least once.
    pub picked: bool,
    /// It ends the episode in a reasonable place.
    pub replaced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema_version: u32,
    pub scene_name: String,
    pub scene_ref: String,
    pub task_seed: u64,
    pub start: usize,
    pub label: TaskLabel,
    pub k: usize,
    pub config: EpisodeConfig,
    pub seed: u64,
    pub success: bool,
    /// Low-level steps, synchronised across agents.
    pub len: usize,
    pub rounds: usize,
    /// Rounds in which the protocol ran.
    pub comm_rounds: usize,
    pub n_agents: usize,
    pub total_dims: u64,
    pub outcomes: Vec<ObjectOutcome>,
    pub final_hash: String,
    #[serde(skip)]
    pub wall_ms: f64,
}

impl EpisodeRecord {
    pub fn replaced(&self) -> usize {
        self.outcomes.iter().filter(|o| o.replaced).count()
    }

    pub fn found(&self) -> usize {
        self.outcomes.iter().filter(|o| o.picked).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

/// What one lock-step burst execution did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstOutcome {
    pub steps: usize,
    /// Per agent (in index order), the actions attempted and their outcomes.
    pub executed: Vec<(usize, Vec<(Action, Outcome)>)>,
}

/// Runs action bursts in lock-step: one step per agent in index order, for
/// `max(1, longest burst)` steps, capped at `budget`. An agent whose action
/// is blocked or invalid drops the rest of its burst.
pub fn execute_bursts(world: &mut Scene, bursts: &[(usize, &[Action])], budget: usize) -> Result<BurstOutcome> {
    let mut order: Vec<(usize, &[Action])> = bursts.to_vec();
    order.sort_by_key(|(a, _)| *a);
    let longest = order.iter().map(|(_, b)| b.len()).max().unwrap_or(0);
    let steps = longest.max(1).min(budget);
    let mut executed: Vec<(usize, Vec<(Action, Outcome)>)> = order.iter().map(|(a, _)| (*a, Vec::new())).collect();
    let mut aborted = vec![false; order.len()];
    for s in 0..steps {
        for (k, (agent, burst)) in order.iter().enumerate() {
            if aborted[k] {
                continue;
            }
            let Some(action) = burst.get(s) else { continue };
            let result = world.step(*agent, action)?;
            executed[k].1.push((action.clone(), result.outcome));
            if result.outcome != Outcome::Success {
                aborted[k] = true;
            }
        }
    }
    Ok(BurstOutcome { steps, executed })
}
