//! Hierarchical decisions: sub-task allocation, sub-goal selection and the
//! shortest-path executor.
//!
//! A sub-task is Explore or Place; a sub-goal is a short hop of at most four
//! cells per axis plus a final rotation, an optional operation and a stop bit.

mod path;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use path::{
    apply_move, nearest_frontier, plan_moves, select_viewpoint, shortest_path_actions, InteractionSite, MOVE_ORDER,
};

use crate::error::{Error, Result};
use crate::knowledge::RoomType;
use crate::perception::{Detection, PlacementTarget, SemanticMap};
use crate::world::{CapabilityVector, Cell, Heading, NavGrid, Pose};

/// Sub-goal box half-width in cells (1 m).
pub const SUBGOAL_RADIUS: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Ope {
    #[default]
    NoAction,
    PickUp,
    PutDown,
    Drop,
}

impl Ope {
    /// Class order used by the learned heads.
    pub const ALL: [Ope; 4] = [Ope::NoAction, Ope::PickUp, Ope::PutDown, Ope::Drop];

    pub fn index(self) -> usize {
        Ope::ALL.iter().position(|&o| o == self).unwrap_or(0)
    }

    pub fn from_index(i: usize) -> Option<Ope> {
        Ope::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubGoal {
    pub dx: i32,
    pub dy: i32,
    /// Clockwise rotation in degrees, one of 0, 90, 180, 270.
    pub drot: u16,
    pub ope: Ope,
    pub stop: bool,
}

impl SubGoal {
    pub fn idle() -> SubGoal {
        SubGoal {
            dx: 0,
            dy: 0,
            drot: 0,
            ope: Ope::NoAction,
            stop: false,
        }
    }

    pub fn stop() -> SubGoal {
        SubGoal {
            stop: true,
            ..SubGoal::idle()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = SUBGOAL_RADIUS;
        if !(-r..=r).contains(&self.dx) || !(-r..=r).contains(&self.dy) {
            return Err(Error::Domain(format!(
                "sub-goal offset ({}, {}) outside ±{r}",
                self.dx, self.dy
            )));
        }
        if ![0, 90, 180, 270].contains(&self.drot) {
            return Err(Error::Domain(format!("sub-goal rotation {}", self.drot)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceParams {
    pub object: String,
    pub object_type: String,
    pub receptacle_type: String,
    pub room_type: RoomType,
    /// Target receptacle instance, once one is known.
    pub instance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SubTask {
    #[default]
    Explore,
    Place(PlaceParams),
}

impl SubTask {
    pub fn place(&self) -> Option<&PlaceParams> {
        match self {
            SubTask::Place(p) => Some(p),
            SubTask::Explore => None,
        }
    }

    pub fn is_place(&self) -> bool {
        matches!(self, SubTask::Place(_))
    }

    fn placing(object: &str, object_type: &str, target: PlacementTarget) -> SubTask {
        SubTask::Place(PlaceParams {
            object: object.to_string(),
            object_type: object_type.to_string(),
            receptacle_type: target.receptacle_type,
            room_type: target.room_type,
            instance: target.instance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldObject {
    pub id: String,
    pub kind: String,
}

/// The parts of an agent's state the planners read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentView {
    pub index: usize,
    pub capability: CapabilityVector,
    pub pose: Pose,
    pub holding: Option<HeldObject>,
    pub stopped: bool,
}

/// The route planner's next waypoint, handed to the learned sub-goal heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RouteHint {
    /// Offset to the next waypoint on the route.
    pub dx: i32,
    pub dy: i32,
    /// Clockwise rotation the route asks for at the waypoint.
    pub bearing: u16,
    /// The target can be acted on from the current cell.
    pub in_range: bool,
    /// The waypoint is the interaction viewpoint.
    pub arrives: bool,
    pub holding: bool,
    pub no_frontier: bool,
    pub place: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalPlan {
    pub subgoal: SubGoal,
    /// Object or receptacle id the operation acts on.
    pub target: Option<String>,
    /// Where the agent is ultimately heading.
    pub destination: Option<Cell>,
    pub hint: RouteHint,
}

fn occupied_grid(map: &SemanticMap, here: Cell, occupied: &[Cell]) -> NavGrid {
    let mut g = map.nav().clone();
    for &c in occupied {
        if c != here {
            g.set(c, false);
        }
    }
    g
}

/// Walkable cells 4-adjacent to a footprint.
pub fn interaction_cells(map: &SemanticMap, footprint: &crate::world::Rect) -> Vec<Cell> {
    let mut out = BTreeSet::new();
    for c in footprint.cells() {
        for n in c.neighbors4() {
            if !footprint.contains(n) && map.is_walkable(n) {
                out.insert((n.y, n.x));
            }
        }
    }
    out.into_iter().map(|(y, x)| Cell::new(x, y)).collect()
}

fn route(grid: &NavGrid, fallback: &NavGrid, from: Cell, to: Cell) -> Result<Vec<Cell>> {
    grid.path(from, to)
        .or_else(|| fallback.path(from, to))
        .ok_or(Error::Path { x: to.x, y: to.y })
}

/// Index of the last cell of the path prefix that stays inside the sub-goal box.
fn box_prefix(path: &[Cell], here: Cell) -> usize {
    let inside = |c: &Cell| (c.x - here.x).abs() <= SUBGOAL_RADIUS && (c.y - here.y).abs() <= SUBGOAL_RADIUS;
    path.iter().take_while(|c| inside(c)).count().saturating_sub(1)
}

/// A hop along `path`, facing the direction of travel into the hop's end.
fn hop(agent: &AgentView, path: &[Cell]) -> (SubGoal, Cell) {
    let here = agent.pose.cell();
    let k = box_prefix(path, here);
    let end = path[k];
    let facing = if k == 0 {
        agent.pose.rot
    } else {
        let prev = path[k - 1];
        Heading::facing(end.x - prev.x, end.y - prev.y)
    };
    (
        SubGoal {
            dx: end.x - here.x,
            dy: end.y - here.y,
            drot: agent.pose.rot.delta_to(facing),
            ope: Ope::NoAction,
            stop: false,
        },
        end,
    )
}

/// Picks the sub-goal for one agent under its current sub-task.
///
/// Errors with [`Error::Replan`] when the sub-task can no longer be pursued
/// (its object vanished, or no receptacle is known and nothing is left to explore).
pub fn next_subgoal(
    agent: &AgentView,
    subtask: &SubTask,
    map: &SemanticMap,
    occupied: &[Cell],
    range: f64,
) -> Result<SubgoalPlan> {
    if agent.stopped {
        return Err(Error::Domain(format!("agent {} has stopped", agent.index)));
    }
    let holding = agent.holding.is_some();
    match subtask {
        SubTask::Explore => explore(agent, map, occupied, false),
        SubTask::Place(p) => match &agent.holding {
            Some(h) if h.id == p.object => match &p.instance {
                None => explore(agent, map, occupied, true),
                Some(rid) => {
                    let rec = map
                        .receptacle(rid)
                        .ok_or_else(|| Error::Replan(format!("receptacle `{rid}` unknown")))?;
                    let face: Vec<Cell> = rec.footprint.cells().collect();
                    let reach = interaction_cells(map, &rec.footprint);
                    let site = InteractionSite {
                        reach: &reach,
                        face: &face,
                        exclude_reach: false,
                    };
                    interact(agent, map, &site, occupied, range, Ope::PutDown, rid)
                }
            },
            Some(h) => Err(Error::Replan(format!(
                "holding `{}` while assigned `{}`",
                h.id, p.object
            ))),
            None => {
                let inst = map
                    .instance(&p.object)
                    .ok_or_else(|| Error::Replan(format!("`{}` is no longer where it was", p.object)))?;
                let cells: Vec<Cell> = inst.footprint.cells().collect();
                let site = InteractionSite {
                    reach: &cells,
                    face: &cells,
                    exclude_reach: true,
                };
                let mut plan = interact(agent, map, &site, occupied, range, Ope::PickUp, &p.object)?;
                plan.hint.holding = holding;
                Ok(plan)
            }
        },
    }
}

fn explore(agent: &AgentView, map: &SemanticMap, occupied: &[Cell], place: bool) -> Result<SubgoalPlan> {
    let here = agent.pose.cell();
    let grid = occupied_grid(map, here, occupied);
    let frontier = map.frontier_cells();
    let target = nearest_frontier(&grid, &frontier, here).or_else(|| nearest_frontier(map.nav(), &frontier, here));
    let hint = RouteHint {
        holding: agent.holding.is_some(),
        place,
        ..RouteHint::default()
    };
    let Some((f, _)) = target else {
        if let Some(plan) = survey(agent, map, &grid, hint) {
            return Ok(plan);
        }
        if place {
            return Err(Error::Replan("no receptacle known and nothing left to explore".into()));
        }
        // a stopped agent is a permanent obstacle: clear chokepoints first
        let nav = map.nav();
        let avoid = |c: Cell| nav.is_cut(c) || grid.is_cut(c);
        if avoid(here) {
            if let Some(plan) = nearest_free(agent, map, &grid, avoid) {
                return Ok(SubgoalPlan {
                    hint: RouteHint {
                        no_frontier: true,
                        ..plan.hint
                    },
                    ..plan
                });
            }
        }
        return Ok(SubgoalPlan {
            subgoal: SubGoal::stop(),
            target: None,
            destination: None,
            hint: RouteHint {
                no_frontier: true,
                ..hint
            },
        });
    };
    let path = route(&grid, map.nav(), here, f)?;
    let (subgoal, _) = hop(agent, &path);
    Ok(SubgoalPlan {
        subgoal,
        target: None,
        destination: Some(f),
        hint: RouteHint {
            dx: subgoal.dx,
            dy: subgoal.dy,
            bearing: subgoal.drot,
            ..hint
        },
    })
}

/// Furniture is surveyed from at most this far; well inside half of any
/// sensible `r_vis`, so the height rule admits every surface class.
const SURVEY_RANGE: f64 = 2.0;

/// With the floor explored, heads for the nearest cell (by path length, then
/// `x`, then `y`) that has an unexplored furniture cell in survey range and
/// sight, and turns toward it on arrival.
fn survey(agent: &AgentView, map: &SemanticMap, grid: &NavGrid, hint: RouteHint) -> Option<SubgoalPlan> {
    let unseen = map.unexplored_furniture();
    if unseen.is_empty() {
        return None;
    }
    let here = agent.pose.cell();
    let is_wall = |c: Cell| map.is_wall(c);
    let site = InteractionSite {
        reach: &unseen,
        face: &unseen,
        exclude_reach: false,
    };
    let pick = |g: &NavGrid| {
        let dist = g.distances_from(here);
        g.free_cells()
            .filter_map(|c| {
                let d = dist[g.index(c)]?;
                site.reach_distance(c, SURVEY_RANGE, &is_wall)?;
                Some((d, c.x, c.y))
            })
            .min()
    };
    let (_, x, y) = pick(grid).or_else(|| pick(map.nav()))?;
    let stand = Cell::new(x, y);
    let facing = site.facing_from(stand, SURVEY_RANGE, &is_wall);
    if stand == here {
        let drot = agent.pose.rot.delta_to(facing);
        // already looking at it from here: the height rule must be what hides it
        if drot == 0 {
            return None;
        }
        return Some(SubgoalPlan {
            subgoal: SubGoal {
                drot,
                ..SubGoal::idle()
            },
            target: None,
            destination: Some(here),
            hint: RouteHint { bearing: drot, ..hint },
        });
    }
    let path = route(grid, map.nav(), here, stand).ok()?;
    let (mut subgoal, end) = hop(agent, &path);
    if end == stand {
        subgoal.drot = agent.pose.rot.delta_to(facing);
    }
    Some(SubgoalPlan {
        subgoal,
        target: None,
        destination: Some(stand),
        hint: RouteHint {
            dx: subgoal.dx,
            dy: subgoal.dy,
            bearing: subgoal.drot,
            ..hint
        },
    })
}

/// A hop toward the nearest reachable cell (by path length, then `x`, then `y`)
/// other than the current one that `avoid` does not exclude.
fn nearest_free(
    agent: &AgentView,
    map: &SemanticMap,
    grid: &NavGrid,
    avoid: impl Fn(Cell) -> bool,
) -> Option<SubgoalPlan> {
    let here = agent.pose.cell();
    let dist = grid.distances_from(here);
    let (_, x, y) = grid
        .free_cells()
        .filter(|&c| c != here && !avoid(c))
        .filter_map(|c| dist[grid.index(c)].map(|d| (d, c.x, c.y)))
        .min()?;
    let dest = Cell::new(x, y);
    let path = route(grid, map.nav(), here, dest).ok()?;
    let (subgoal, _) = hop(agent, &path);
    Some(SubgoalPlan {
        subgoal,
        target: None,
        destination: Some(dest),
        hint: RouteHint {
            dx: subgoal.dx,
            dy: subgoal.dy,
            bearing: subgoal.drot,
            holding: agent.holding.is_some(),
            ..RouteHint::default()
        },
    })
}

/// Steps aside for another agent: a hop to the nearest cell off `route`.
pub fn clear_way(agent: &AgentView, map: &SemanticMap, occupied: &[Cell], route: &[Cell]) -> Option<SubgoalPlan> {
    let grid = occupied_grid(map, agent.pose.cell(), occupied);
    nearest_free(agent, map, &grid, |c| route.contains(&c))
}

fn interact(
    agent: &AgentView,
    map: &SemanticMap,
    site: &InteractionSite<'_>,
    occupied: &[Cell],
    range: f64,
    ope: Ope,
    target: &str,
) -> Result<SubgoalPlan> {
    let here = agent.pose.cell();
    let is_wall = |c: Cell| map.is_wall(c);
    let hint = RouteHint {
        holding: agent.holding.is_some(),
        place: true,
        ..RouteHint::default()
    };
    if site.reach_distance(here, range, &is_wall).is_some() {
        let drot = agent.pose.rot.delta_to(site.facing_from(here, range, &is_wall));
        return Ok(SubgoalPlan {
            subgoal: SubGoal {
                drot,
                ope,
                ..SubGoal::idle()
            },
            target: Some(target.to_string()),
            destination: Some(here),
            hint: RouteHint {
                bearing: drot,
                in_range: true,
                ..hint
            },
        });
    }
    let vp = select_viewpoint(map.nav(), is_wall, site, here, occupied, range)
        .or_else(|_| select_viewpoint(map.nav(), is_wall, site, here, &[], range))?;
    let grid = occupied_grid(map, here, occupied);
    let path = route(&grid, map.nav(), here, vp.cell())?;
    let (mut subgoal, end) = hop(agent, &path);
    if end == vp.cell() {
        subgoal.drot = agent.pose.rot.delta_to(vp.rot);
        subgoal.ope = ope;
    }
    Ok(SubgoalPlan {
        subgoal,
        target: (subgoal.ope != Ope::NoAction).then(|| target.to_string()),
        destination: Some(vp.cell()),
        hint: RouteHint {
            dx: subgoal.dx,
            dy: subgoal.dy,
            bearing: subgoal.drot,
            arrives: end == vp.cell(),
            ..hint
        },
    })
}

/// One agent as seen by whoever is allocating sub-tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamMember {
    pub view: AgentView,
    pub current: SubTask,
    /// Objects this member is known to know about; `None` means everything the planner knows.
    pub known: Option<BTreeSet<String>>,
}

/// Greedy nearest-pair matching over `(distance, agent, object)` entries.
pub fn greedy_pairs(mut entries: Vec<(u32, usize, String)>) -> Vec<(usize, String)> {
    entries.sort();
    let mut used_agents = BTreeSet::new();
    let mut used_objects = BTreeSet::new();
    let mut out = Vec::new();
    for (_, a, o) in entries {
        if used_agents.contains(&a) || used_objects.contains(&o) {
            continue;
        }
        used_agents.insert(a);
        used_objects.insert(o.clone());
        out.push((a, o));
    }
    out
}

/// Allocates sub-tasks for a team.
///
/// Members holding an object, or pursuing a still-valid Place, keep it.
/// Every other detected misplaced object goes to the nearest free
/// manipulating member by path length to its viewpoint (ties by agent index,
/// then object id); everyone left explores. `params(member, object, type)`
/// supplies the placement target for an assignment.
pub fn plan_subtasks(
    team: &[TeamMember],
    detections: &[Detection],
    map: &SemanticMap,
    range: f64,
    mut params: impl FnMut(usize, &str, &str) -> Result<PlacementTarget>,
) -> Result<Vec<SubTask>> {
    let mut out: Vec<Option<SubTask>> = vec![None; team.len()];
    let held: BTreeSet<&str> = team
        .iter()
        .filter_map(|m| m.view.holding.as_ref().map(|h| h.id.as_str()))
        .collect();
    let pending: Vec<&Detection> = detections.iter().filter(|d| d.det).collect();
    let mut taken: BTreeSet<String> = BTreeSet::new();

    for (m, member) in team.iter().enumerate() {
        if member.view.stopped {
            out[m] = Some(SubTask::Explore);
            continue;
        }
        if let Some(h) = &member.view.holding {
            let kind = match &member.current {
                SubTask::Place(p) if p.object == h.id => p.object_type.clone(),
                _ => h.kind.clone(),
            };
            out[m] = Some(SubTask::placing(&h.id, &kind, params(m, &h.id, &kind)?));
            taken.insert(h.id.clone());
            continue;
        }
        if let SubTask::Place(p) = &member.current {
            let still_valid = member.view.capability.mani
                && pending.iter().any(|d| d.object == p.object)
                && map.instance(&p.object).is_some()
                && !held.contains(p.object.as_str())
                && !taken.contains(&p.object);
            if still_valid {
                out[m] = Some(member.current.clone());
                taken.insert(p.object.clone());
            }
        }
    }

    let occupied: Vec<Cell> = team.iter().map(|m| m.view.pose.cell()).collect();
    let is_wall = |c: Cell| map.is_wall(c);
    let mut entries = Vec::new();
    for (m, member) in team.iter().enumerate() {
        if out[m].is_some() || !member.view.capability.mani {
            continue;
        }
        let here = member.view.pose.cell();
        let grid = occupied_grid(map, here, &occupied);
        let dist = grid.distances_from(here);
        for d in &pending {
            if taken.contains(&d.object) || held.contains(d.object.as_str()) {
                continue;
            }
            if member.known.as_ref().is_some_and(|k| !k.contains(&d.object)) {
                continue;
            }
            let footprint = map.instance(&d.object).map_or(d.footprint, |i| i.footprint);
            let cells: Vec<Cell> = footprint.cells().collect();
            let site = InteractionSite {
                reach: &cells,
                face: &cells,
                exclude_reach: true,
            };
            let cost = if site.reach_distance(here, range, &is_wall).is_some() {
                Some(0)
            } else {
                select_viewpoint(map.nav(), is_wall, &site, here, &occupied, range)
                    .ok()
                    .and_then(|vp| dist[grid.index(vp.cell())])
            };
            if let Some(cost) = cost {
                entries.push((cost, member.view.index, d.object.clone()));
            }
        }
    }
    for (agent, object) in greedy_pairs(entries) {
        let m = team
            .iter()
            .position(|t| t.view.index == agent)
            .ok_or(Error::AgentIndex {
                index: agent,
                count: team.len(),
            })?;
        let kind = pending
            .iter()
            .find(|d| d.object == object)
            .map(|d| d.kind.clone())
            .unwrap_or_default();
        out[m] = Some(SubTask::placing(&object, &kind, params(m, &object, &kind)?));
    }
    Ok(out.into_iter().map(Option::unwrap_or_default).collect())
}

/// Predicted sub-goal of each peer from its broadcast state, under the
/// inferring agent's own map. `None` where the peer's sub-task cannot be
/// continued on that map.
pub fn infer_intentions(
    peers: &[(AgentView, SubTask)],
    map: &SemanticMap,
    occupied: &[Cell],
    range: f64,
) -> Vec<Option<SubgoalPlan>> {
    peers
        .iter()
        .map(|(view, task)| {
            if view.stopped {
                return Some(SubgoalPlan {
                    subgoal: SubGoal::stop(),
                    target: None,
                    destination: None,
                    hint: RouteHint::default(),
                });
            }
            next_subgoal(view, task, map, occupied, range).ok()
        })
        .collect()
}
