//! Meta-task generation, Single/Cross labelling and expert demonstrations.
//!
//! A meta-task takes a tidy scene, moves `k ∈ {1..5}` pickupable objects to
//! unreasonable places (onto a wrong receptacle instance or onto a random
//! floor cell, half and half), and samples five sets of agent start poses.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comm::StateFeature;
use crate::decision::{RouteHint, SubGoal, SubTask};
use crate::error::{Error, Result};
use crate::harness::{EpisodeConfig, Knowledge};
use crate::knowledge::Ontology;
use crate::world::{is_task_complete, Action, AgentState, CapabilityVector, Cell, Heading, Placement, Pose, Scene};

pub const TASK_SCHEMA_VERSION: u32 = 1;
/// Number of start-pose sets per task.
pub const START_SETS: usize = 5;
/// Poses per start set; covers the largest roster.
pub const STARTS_PER_SET: usize = 4;
const MAX_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskLabel {
    Single,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Misplacement {
    pub object: String,
    pub original: Placement,
    pub new: Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub schema_version: u32,
    /// Hash of the tidy source scene.
    pub scene_ref: String,
    pub scene_name: String,
    pub misplacements: Vec<Misplacement>,
    pub k: usize,
    pub label: TaskLabel,
    pub agent_starts: Vec<Vec<Pose>>,
    pub seed: u64,
}

/// Generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Probability a misplacement uses a wrong receptacle rather than the floor.
    pub receptacle_share: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { receptacle_share: 0.5 }
    }
}

pub fn generate_meta_task(scene: &Scene, kb: &Ontology, rng_seed: u64) -> Result<TaskSpec> {
    generate_meta_task_with(scene, kb, rng_seed, GenConfig::default())
}

pub fn generate_meta_task_with(scene: &Scene, kb: &Ontology, rng_seed: u64, cfg: GenConfig) -> Result<TaskSpec> {
    let mut pristine = scene.clone();
    pristine.set_agents(Vec::new())?;
    if !pristine.is_tidy(kb) {
        return Err(Error::Generation(format!("scene `{}` is not tidy", scene.name)));
    }
    let pickupable: Vec<usize> = pristine
        .objects()
        .iter()
        .enumerate()
        .filter(|(_, o)| pristine.is_pickupable(o))
        .map(|(i, _)| i)
        .collect();
    if pickupable.len() < MAX_K {
        return Err(Error::Generation(format!(
            "scene `{}` has {} pickupable objects, need at least {MAX_K}",
            scene.name,
            pickupable.len()
        )));
    }

    let mut rng = crate::rng_from_seed(rng_seed);
    let k = rng.gen_range(1..=MAX_K);
    let mut order = pickupable.clone();
    order.shuffle(&mut rng);
    let walkable = pristine.walkable_cells();

    let mut mutated = pristine.clone();
    let mut misplacements = Vec::with_capacity(k);
    for &oi in &order {
        if misplacements.len() == k {
            break;
        }
        let obj = pristine.objects()[oi].clone();
        let to_receptacle = rng.gen_bool(cfg.receptacle_share);
        let new = if to_receptacle {
            let options: Vec<&str> = pristine
                .receptacles()
                .iter()
                .filter(|r| Placement::On(r.id.clone()) != obj.placement)
                .filter(|r| {
                    let room = pristine.rooms()[r.room].room_type;
                    !kb.is_reasonable(&obj.kind, &r.kind, room).unwrap_or(true)
                })
                .map(|r| r.id.as_str())
                .collect();
            match options.choose(&mut rng) {
                Some(id) => Placement::On(id.to_string()),
                // no unreasonable receptacle for this object: draw another object
                None => continue,
            }
        } else {
            Placement::Floor(
                *walkable
                    .choose(&mut rng)
                    .ok_or_else(|| Error::Generation("scene has no walkable cell".into()))?,
            )
        };
        mutated.relocate(&obj.id, new.clone())?;
        if mutated.discriminate(&obj.id, kb)? {
            return Err(Error::Generation(format!(
                "misplacement of `{}` is still reasonable",
                obj.id
            )));
        }
        misplacements.push(Misplacement {
            object: obj.id.clone(),
            original: obj.placement.clone(),
            new,
        });
    }
    if misplacements.len() < k {
        return Err(Error::Generation(format!(
            "only {} of {k} objects could be misplaced",
            misplacements.len()
        )));
    }

    let mut agent_starts = Vec::with_capacity(START_SETS);
    for _ in 0..START_SETS {
        let cells: Vec<Cell> = walkable.choose_multiple(&mut rng, STARTS_PER_SET).copied().collect();
        if cells.len() < STARTS_PER_SET {
            return Err(Error::Generation("not enough walkable cells for starts".into()));
        }
        agent_starts.push(
            cells
                .into_iter()
                .map(|c| Pose::new(c.x, c.y, Heading::from_quarter(rng.gen_range(0..4))))
                .collect(),
        );
    }

    let mut task = TaskSpec {
        schema_version: TASK_SCHEMA_VERSION,
        scene_ref: pristine.hash(),
        scene_name: scene.name.clone(),
        misplacements,
        k,
        label: TaskLabel::Single,
        agent_starts,
        seed: rng_seed,
    };
    task.label = classify_task(&task, &pristine)?;
    Ok(task)
}

/// Cross iff some misplaced object ends up in a different room than it started in.
pub fn classify_task(task: &TaskSpec, scene: &Scene) -> Result<TaskLabel> {
    for m in &task.misplacements {
        let from = scene.placement_room(&m.original);
        let to = scene.placement_room(&m.new);
        if from.is_none() || to.is_none() {
            return Err(Error::Domain(format!(
                "misplacement of `{}` does not resolve in scene `{}`",
                m.object, scene.name
            )));
        }
        if from != to {
            return Ok(TaskLabel::Cross);
        }
    }
    Ok(TaskLabel::Single)
}

impl TaskSpec {
    /// The messy scene: misplacements applied, agents placed from start set `start`.
    pub fn instantiate(&self, scene: &Scene, roster: &[CapabilityVector], start: usize) -> Result<Scene> {
        let mut out = scene.clone();
        out.set_agents(Vec::new())?;
        if out.hash() != self.scene_ref {
            return Err(Error::HashMismatch {
                expected: self.scene_ref.clone(),
                found: out.hash(),
            });
        }
        for m in &self.misplacements {
            out.relocate(&m.object, m.new.clone())?;
        }
        let poses = self
            .agent_starts
            .get(start)
            .ok_or_else(|| Error::Domain(format!("no start set {start}")))?;
        if roster.len() > poses.len() {
            return Err(Error::Config(format!(
                "roster of {} agents exceeds {} start poses",
                roster.len(),
                poses.len()
            )));
        }
        out.set_agents(
            roster
                .iter()
                .zip(poses)
                .map(|(cap, pose)| AgentState::new(*cap, *pose))
                .collect(),
        )?;
        Ok(out)
    }
}

/// One agent's share of a demonstration round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub agent: usize,
    pub feature: StateFeature,
    pub subtask: SubTask,
    pub subgoal: SubGoal,
    pub hint: RouteHint,
    pub burst: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRound {
    pub agents: Vec<DemoStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task_seed: u64,
    pub scene_name: String,
    pub start: usize,
    pub roster: Vec<CapabilityVector>,
    pub rounds: Vec<DemoRound>,
    pub terminal: bool,
    pub steps: usize,
}

/// Oracle demonstration: every misplacement is known from the start and
/// allocated greedily to the nearest free manipulating agent.
pub fn generate_expert_demo(
    scene: &Scene,
    task: &TaskSpec,
    agents: &[CapabilityVector],
    kb: &Ontology,
    start: usize,
) -> Result<Demonstration> {
    if !agents.iter().any(|a| a.mani) {
        return Err(Error::Demonstration("no agent can manipulate".into()));
    }
    let mut cfg = EpisodeConfig::expert(agents.to_vec());
    cfg.knowledge = Knowledge::Oracle;
    let run = crate::harness::run_episode_full(scene, task, &cfg, kb, start, task.seed, None, false)?;
    if !run.record.success {
        let stuck = run
            .record
            .outcomes
            .iter()
            .find(|o| !o.replaced)
            .map(|o| o.object.clone())
            .unwrap_or_default();
        return Err(Error::Demonstration(format!(
            "task {} on `{}` start {start}: object `{stuck}` not re-placed within {} steps",
            task.seed, task.scene_name, run.record.len
        )));
    }
    Ok(Demonstration {
        task_seed: task.seed,
        scene_name: task.scene_name.clone(),
        start,
        roster: agents.to_vec(),
        rounds: run.demo_rounds,
        terminal: true,
        steps: run.record.len,
    })
}

/// Replays a demonstration's action bursts in lock-step and reports the final scene.
///
/// Bursts follow the episode rules: agents act in index order each step and
/// an agent whose action is blocked or invalid drops the rest of its burst.
pub fn replay_demo(scene: &Scene, task: &TaskSpec, demo: &Demonstration, max_steps: usize) -> Result<(Scene, usize)> {
    let mut world = task.instantiate(scene, &demo.roster, demo.start)?;
    let mut steps = 0;
    for round in &demo.rounds {
        if steps >= max_steps {
            break;
        }
        let bursts: Vec<(usize, &[Action])> = round.agents.iter().map(|a| (a.agent, a.burst.as_slice())).collect();
        steps += crate::harness::execute_bursts(&mut world, &bursts, max_steps - steps)?.steps;
    }
    Ok((world, steps))
}

/// True when the replayed demonstration tidies the scene within `max_steps`.
pub fn demo_is_valid(
    scene: &Scene,
    task: &TaskSpec,
    demo: &Demonstration,
    kb: &Ontology,
    max_steps: usize,
) -> Result<bool> {
    let (world, steps) = replay_demo(scene, task, demo, max_steps)?;
    Ok(steps <= max_steps && is_task_complete(&world, task, kb))
}

/// Task file: the scenes referenced by hash plus the generated tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub schema_version: u32,
    pub scenes: Vec<SceneRef>,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRef {
    pub name: String,
    pub hash: String,
    /// File path, or `builtin:<name>` for shipped scenes.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoBatch {
    pub schema_version: u32,
    pub demos: Vec<Demonstration>,
}

/// Generates `per_scene` tasks for every scene with seeds derived from `seed`.
pub fn generate_batch(scenes: &[(Scene, String)], kb: &Ontology, per_scene: usize, seed: u64) -> Result<TaskBatch> {
    let mut batch = TaskBatch {
        schema_version: TASK_SCHEMA_VERSION,
        scenes: Vec::new(),
        tasks: Vec::new(),
    };
    for (si, (scene, source)) in scenes.iter().enumerate() {
        let mut tidy = scene.clone();
        tidy.set_agents(Vec::new())?;
        batch.scenes.push(SceneRef {
            name: scene.name.clone(),
            hash: tidy.hash(),
            source: source.clone(),
        });
        for t in 0..per_scene {
            let task_seed = crate::derive_seed(seed, ((si as u64) << 32) | t as u64);
            batch.tasks.push(generate_meta_task(scene, kb, task_seed)?);
        }
    }
    Ok(batch)
}
