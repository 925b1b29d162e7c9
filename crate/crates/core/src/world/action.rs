use std::fmt;

use serde::{Deserialize, Serialize};

use super::geom::{Cell, Pose};
use super::scene::{Placement, Scene};
use super::visibility::occluded;
use crate::error::{Error, Result};
use crate::knowledge::Ontology;
use crate::taskgen::TaskSpec;

/// Low-level actions. The first eight form the navigation set; the rest need manipulation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveAhead,
    MoveRight,
    MoveLeft,
    RotateRight,
    RotateLeft,
    LookUp,
    LookDown,
    Stop,
    PickUp(String),
    PutDown(String),
    Drop,
}

impl Action {
    pub fn is_manipulation(&self) -> bool {
        matches!(self, Action::PickUp(_) | Action::PutDown(_) | Action::Drop)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Action::MoveAhead => "MoveAhead",
            Action::MoveRight => "MoveRight",
            Action::MoveLeft => "MoveLeft",
            Action::RotateRight => "RotateRight",
            Action::RotateLeft => "RotateLeft",
            Action::LookUp => "LookUp",
            Action::LookDown => "LookDown",
            Action::Stop => "Stop",
            Action::PickUp(_) => "PickUp",
            Action::PutDown(_) => "PutDown",
            Action::Drop => "Drop",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::PickUp(id) | Action::PutDown(id) => write!(f, "{}({id})", self.name()),
            _ => f.write_str(self.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    /// Movement into a wall, furniture, the grid edge or another agent.
    Blocked,
    /// A legal action whose preconditions did not hold; nothing changed.
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Delta {
    Pose { agent: usize, from: Pose, to: Pose },
    Object { id: String, from: Placement, to: Placement },
    Stopped { agent: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub outcome: Outcome,
    pub delta: Vec<Delta>,
}

impl StepResult {
    fn blocked() -> Self {
        StepResult {
            outcome: Outcome::Blocked,
            delta: Vec::new(),
        }
    }

    fn invalid() -> Self {
        StepResult {
            outcome: Outcome::Invalid,
            delta: Vec::new(),
        }
    }

    fn ok(delta: Vec<Delta>) -> Self {
        StepResult {
            outcome: Outcome::Success,
            delta,
        }
    }
}

impl Scene {
    /// Applies one action of one agent.
    ///
    /// Actions outside the agent's action space are errors; failed
    /// preconditions produce [`Outcome::Blocked`] or [`Outcome::Invalid`].
    pub fn step(&mut self, agent_id: usize, action: &Action) -> Result<StepResult> {
        let agent = self.agent(agent_id)?.clone();
        if action.is_manipulation() && !agent.capability.mani {
            return Err(Error::Capability {
                agent: agent_id,
                action: action.to_string(),
            });
        }
        if agent.stopped {
            return Ok(StepResult::invalid());
        }
        let pose = agent.pose;
        match action {
            Action::MoveAhead | Action::MoveRight | Action::MoveLeft => {
                let dir = match action {
                    Action::MoveAhead => pose.rot,
                    Action::MoveRight => pose.rot.right(),
                    _ => pose.rot.left(),
                };
                let (dx, dy) = dir.vector();
                let target = pose.cell().offset(dx, dy);
                if !self.is_walkable(target) || self.agent_at(target).is_some() {
                    return Ok(StepResult::blocked());
                }
                let to = Pose {
                    x: target.x,
                    y: target.y,
                    ..pose
                };
                self.agent_mut(agent_id)?.pose = to;
                Ok(StepResult::ok(vec![Delta::Pose {
                    agent: agent_id,
                    from: pose,
                    to,
                }]))
            }
            Action::RotateRight | Action::RotateLeft | Action::LookUp | Action::LookDown => {
                let mut to = pose;
                match action {
                    Action::RotateRight => to.rot = pose.rot.right(),
                    Action::RotateLeft => to.rot = pose.rot.left(),
                    Action::LookUp => to.pitch = pose.pitch.raised(),
                    _ => to.pitch = pose.pitch.lowered(),
                }
                if to == pose {
                    return Ok(StepResult::ok(Vec::new()));
                }
                self.agent_mut(agent_id)?.pose = to;
                Ok(StepResult::ok(vec![Delta::Pose {
                    agent: agent_id,
                    from: pose,
                    to,
                }]))
            }
            Action::Stop => {
                self.agent_mut(agent_id)?.stopped = true;
                Ok(StepResult::ok(vec![Delta::Stopped { agent: agent_id }]))
            }
            Action::PickUp(id) => {
                if agent.held.is_some() {
                    return Ok(StepResult::invalid());
                }
                let Ok(obj) = self.object(id) else {
                    return Ok(StepResult::invalid());
                };
                if matches!(obj.placement, Placement::Held(_)) || !self.is_pickupable(obj) {
                    return Ok(StepResult::invalid());
                }
                let range = self.config.interaction_range;
                let near = self
                    .object_footprint(obj)
                    .iter()
                    .any(|c| c.dist(pose.cell()) <= range + 1e-9);
                let viewer = self.viewer(agent_id)?;
                if !near || !self.sees_object(&viewer, id) {
                    return Ok(StepResult::invalid());
                }
                let from = obj.placement.clone();
                let to = Placement::Held(agent_id);
                self.object_mut(id)?.placement = to.clone();
                self.agent_mut(agent_id)?.held = Some(id.clone());
                Ok(StepResult::ok(vec![Delta::Object {
                    id: id.clone(),
                    from,
                    to,
                }]))
            }
            Action::PutDown(rid) => {
                let Some(held) = agent.held.clone() else {
                    return Ok(StepResult::invalid());
                };
                let Ok(rec) = self.receptacle(rid) else {
                    return Ok(StepResult::invalid());
                };
                if !self.can_reach_receptacle(pose.cell(), &rec.interaction_cells) {
                    return Ok(StepResult::invalid());
                }
                let to = Placement::On(rid.clone());
                self.object_mut(&held)?.placement = to.clone();
                self.agent_mut(agent_id)?.held = None;
                Ok(StepResult::ok(vec![Delta::Object {
                    id: held,
                    from: Placement::Held(agent_id),
                    to,
                }]))
            }
            Action::Drop => {
                let Some(held) = agent.held.clone() else {
                    return Ok(StepResult::invalid());
                };
                let to = Placement::Floor(pose.cell());
                self.object_mut(&held)?.placement = to.clone();
                self.agent_mut(agent_id)?.held = None;
                Ok(StepResult::ok(vec![Delta::Object {
                    id: held,
                    from: Placement::Held(agent_id),
                    to,
                }]))
            }
        }
    }

    /// PutDown reach: some interaction cell within range and not behind a wall.
    pub fn can_reach_receptacle(&self, from: Cell, interaction_cells: &[Cell]) -> bool {
        let range = self.config.interaction_range;
        interaction_cells
            .iter()
            .any(|&ic| ic.dist(from) <= range + 1e-9 && !occluded(from, ic, |c| self.is_wall(c)))
    }

    /// Ground-truth discriminator for one object instance; held objects are never reasonable.
    pub fn discriminate(&self, object_id: &str, kb: &Ontology) -> Result<bool> {
        let obj = self.object(object_id)?;
        match self.object_triple(obj) {
            Some((o, p, r)) => kb.is_reasonable(&o, &p, r),
            None => Ok(false),
        }
    }

    /// Every object reasonably placed and no agent holding anything.
    pub fn is_tidy(&self, kb: &Ontology) -> bool {
        self.agents().iter().all(|a| a.held.is_none())
            && self
                .objects()
                .iter()
                .all(|o| self.discriminate(&o.id, kb).unwrap_or(false))
    }
}

/// True iff every object in the scene (not only the misplaced ones) passes the
/// discriminator and no agent holds an object.
pub fn is_task_complete(scene: &Scene, task: &TaskSpec, kb: &Ontology) -> bool {
    debug_assert!(task.misplacements.iter().all(|m| scene.object(&m.object).is_ok()));
    scene.is_tidy(kb)
}
