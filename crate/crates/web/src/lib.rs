//! Browser bindings: pick a scene and task, run a team under a protocol,
//! scrub through the ASCII frames, and compare protocols side by side.

use serde_json::json;
use wasm_bindgen::prelude::*;

use tidy_core::comm::Protocol;
use tidy_core::harness::{replay, run_episode_full, EpisodeConfig, EpisodeRecord, Roster};
use tidy_core::knowledge::Ontology;
use tidy_core::taskgen::{generate_meta_task, TaskSpec, START_SETS};
use tidy_core::world::{builtin_scene, builtin_scene_names, render_ascii, Scene};

/// JSON array of the shipped scene names.
#[wasm_bindgen]
pub fn scene_names() -> String {
    json!(builtin_scene_names()).to_string()
}

/// JSON array of protocol names, ours first.
#[wasm_bindgen]
pub fn protocol_names() -> String {
    json!(Protocol::ALL.iter().map(|p| p.name()).collect::<Vec<_>>()).to_string()
}

#[wasm_bindgen]
pub struct Session {
    kb: Ontology,
    scene: Scene,
    task: TaskSpec,
    frames: Vec<String>,
}

#[wasm_bindgen]
impl Session {
    /// A messy-room task drawn with `task_seed` on the named shipped scene.
    #[wasm_bindgen(constructor)]
    pub fn new(scene: &str, task_seed: u32) -> Result<Session, String> {
        let kb = Ontology::builtin();
        let scene = builtin_scene(scene, &kb).map_err(|e| e.to_string())?;
        let task = generate_meta_task(&scene, &kb, task_seed as u64).map_err(|e| e.to_string())?;
        Ok(Session {
            kb,
            scene,
            task,
            frames: Vec::new(),
        })
    }

    /// The task as JSON: label, k and every moved object with its old and new place.
    pub fn task_json(&self) -> String {
        let moved: Vec<_> = self
            .task
            .misplacements
            .iter()
            .map(|m| json!({ "object": m.object, "from": m.original, "to": m.new }))
            .collect();
        json!({ "scene": self.task.scene_name, "label": format!("{:?}", self.task.label), "k": self.task.k, "moved": moved })
            .to_string()
    }

    /// ASCII view of the messy scene with the chosen team at start set `start`.
    pub fn preview(&self, setting: &str, start: usize) -> Result<String, String> {
        let world = self
            .task
            .instantiate(&self.scene, &roster(setting)?.capabilities(), start)
            .map_err(|e| e.to_string())?;
        Ok(render_ascii(&world, &self.kb))
    }

    /// Runs one episode and keeps its frames; returns the record summary as JSON.
    pub fn run(&mut self, setting: &str, protocol: &str, start: usize) -> Result<String, String> {
        let first = self.preview(setting, start)?;
        let (record, frames) = self.episode(setting, protocol, start, true)?;
        self.frames = std::iter::once(first).chain(frames).collect();
        Ok(summary(&record).to_string())
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Frame `i`; frame 0 is the scene before the first round.
    pub fn frame(&self, i: usize) -> String {
        self.frames.get(i).cloned().unwrap_or_default()
    }

    /// Every protocol on the same task, start and seed; JSON array of summaries.
    pub fn compare(&self, setting: &str, start: usize) -> Result<String, String> {
        let mut rows = Vec::new();
        for p in Protocol::ALL {
            let (record, _) = self.episode(setting, p.name(), start, false)?;
            rows.push(summary(&record));
        }
        Ok(json!(rows).to_string())
    }
}

impl Session {
    fn episode(
        &self,
        setting: &str,
        protocol: &str,
        start: usize,
        frames: bool,
    ) -> Result<(EpisodeRecord, Vec<String>), String> {
        if start >= START_SETS {
            return Err(format!("start set {start} out of range 0..{START_SETS}"));
        }
        let protocol: Protocol = protocol.parse().map_err(|e: tidy_core::Error| e.to_string())?;
        let cfg = EpisodeConfig::new(roster(setting)?.capabilities(), protocol);
        let seed = tidy_core::derive_seed(self.task.seed, start as u64);
        let run = run_episode_full(&self.scene, &self.task, &cfg, &self.kb, start, seed, None, frames)
            .map_err(|e| e.to_string())?;
        let frames = match (&run.log, frames) {
            (Some(log), true) => {
                replay(log, &self.scene, &self.kb, true)
                    .map_err(|e| e.to_string())?
                    .frames
            }
            _ => Vec::new(),
        };
        Ok((run.record, frames))
    }
}

fn roster(setting: &str) -> Result<Roster, String> {
    setting.parse().map_err(|e: tidy_core::Error| e.to_string())
}

fn summary(r: &EpisodeRecord) -> serde_json::Value {
    let acm = if r.comm_rounds == 0 {
        0.0
    } else {
        r.total_dims as f64 / (r.comm_rounds * r.n_agents) as f64
    };
    json!({
        "protocol": r.config.protocol.name(),
        "success": r.success,
        "steps": r.len,
        "rounds": r.rounds,
        "replaced": r.replaced(),
        "picked": r.found(),
        "k": r.k,
        "total_dims": r.total_dims,
        "acm": acm,
    })
}
