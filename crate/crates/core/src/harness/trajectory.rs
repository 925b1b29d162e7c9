//! JSON-lines trajectory logs: a header, one line per round, a footer.

use serde::{Deserialize, Serialize};

use super::{execute_bursts, EpisodeConfig};
use crate::error::{Error, Result};
use crate::knowledge::Ontology;
use crate::taskgen::TaskSpec;
use crate::world::{render_ascii, Action, Scene};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub schema_version: u32,
    pub scene_name: String,
    /// Hash of the tidy scene the task was generated from.
    pub scene_ref: String,
    pub task: TaskSpec,
    pub config: EpisodeConfig,
    pub start: usize,
    pub seed: u64,
}

impl TrajectoryHeader {
    pub(crate) fn new(task: &TaskSpec, config: &EpisodeConfig, start: usize, seed: u64) -> TrajectoryHeader {
        TrajectoryHeader {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            scene_name: task.scene_name.clone(),
            scene_ref: task.scene_ref.clone(),
            task: task.clone(),
            config: config.clone(),
            start,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub index: usize,
    /// Intended burst of every agent that acted, by agent index.
    pub bursts: Vec<(usize, Vec<Action>)>,
    pub steps: usize,
    pub dims: u64,
    /// Scene hash after the round.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFooter {
    pub rounds: usize,
    pub len: usize,
    pub final_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub header: TrajectoryHeader,
    pub rounds: Vec<RoundLog>,
    pub footer: TrajectoryFooter,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(Box<TrajectoryHeader>),
    Round(RoundLog),
    Footer(TrajectoryFooter),
}

impl TrajectoryLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &Line| {
            out.push_str(&serde_json::to_string(line).unwrap_or_default());
            out.push('\n');
        };
        push(&Line::Header(Box::new(self.header.clone())));
        for r in &self.rounds {
            push(&Line::Round(r.clone()));
        }
        push(&Line::Footer(self.footer.clone()));
        out
    }

    /// Parses a log; any malformed, out-of-order or missing record is
    /// reported with its zero-based line index.
    pub fn from_jsonl(text: &str) -> Result<TrajectoryLog> {
        let corrupt = |index: usize, reason: &str| Error::Corrupt {
            index,
            reason: reason.to_string(),
        };
        let lines: Vec<&str> = text.lines().collect();
        let mut header = None;
        let mut rounds = Vec::new();
        for (index, raw) in lines.iter().enumerate() {
            let line: Line = serde_json::from_str(raw).map_err(|e| corrupt(index, &e.to_string()))?;
            match (index, line) {
                (0, Line::Header(h)) => {
                    if h.schema_version != TRAJECTORY_SCHEMA_VERSION {
                        return Err(corrupt(0, "unsupported schema version"));
                    }
                    header = Some(*h);
                }
                (0, _) => return Err(corrupt(0, "first record is not a header")),
                (_, Line::Header(_)) => return Err(corrupt(index, "second header")),
                (_, Line::Round(r)) => {
                    if r.index != rounds.len() {
                        return Err(corrupt(index, "round out of sequence"));
                    }
                    rounds.push(r);
                }
                (_, Line::Footer(footer)) => {
                    if index + 1 != lines.len() {
                        return Err(corrupt(index + 1, "records after the footer"));
                    }
                    if footer.rounds != rounds.len() {
                        return Err(corrupt(index, "footer round count disagrees"));
                    }
                    return Ok(TrajectoryLog {
                        header: header.ok_or_else(|| corrupt(0, "missing header"))?,
                        rounds,
                        footer,
                    });
                }
            }
        }
        Err(corrupt(lines.len(), "missing footer"))
    }
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub final_scene: Scene,
    /// One ASCII frame per round, when requested.
    pub frames: Vec<String>,
    pub len: usize,
}

/// Re-executes a logged episode on `scene` (the tidy source scene), checking
/// every round's state hash.
pub fn replay(log: &TrajectoryLog, scene: &Scene, kb: &Ontology, frames: bool) -> Result<Replay> {
    let mut tidy = scene.clone();
    tidy.set_agents(Vec::new())?;
    let found = tidy.hash();
    if found != log.header.scene_ref {
        return Err(Error::HashMismatch {
            expected: log.header.scene_ref.clone(),
            found,
        });
    }
    let cfg = &log.header.config;
    let mut world = log.header.task.instantiate(scene, &cfg.roster, log.header.start)?;
    let mut out = Vec::new();
    let mut len = 0;
    for r in &log.rounds {
        let line = r.index + 1;
        let bursts: Vec<(usize, &[Action])> = r.bursts.iter().map(|(a, b)| (*a, b.as_slice())).collect();
        let done =
            execute_bursts(&mut world, &bursts, cfg.max_steps.saturating_sub(len)).map_err(|e| Error::Corrupt {
                index: line,
                reason: e.to_string(),
            })?;
        len += done.steps;
        if done.steps != r.steps || world.hash() != r.hash {
            return Err(Error::Corrupt {
                index: line,
                reason: "replayed state differs from the recorded one".into(),
            });
        }
        if frames {
            out.push(render_ascii(&world, kb));
        }
    }
    if world.hash() != log.footer.final_hash || len != log.footer.len {
        return Err(Error::Corrupt {
            index: log.rounds.len() + 1,
            reason: "final state differs from the footer".into(),
        });
    }
    Ok(Replay {
        final_scene: world,
        frames: out,
        len,
    })
}
