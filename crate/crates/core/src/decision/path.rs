use std::collections::VecDeque;

use super::{Ope, SubGoal};
use crate::error::{Error, Result};
use crate::world::{occluded, Action, Cell, Heading, NavGrid, Pose};

/// Movement actions in tie-break order.
pub const MOVE_ORDER: [Action; 5] = [
    Action::MoveAhead,
    Action::MoveRight,
    Action::MoveLeft,
    Action::RotateRight,
    Action::RotateLeft,
];

fn state(grid: &NavGrid, c: Cell, h: Heading) -> usize {
    grid.index(c) * 4 + h.quarter() as usize
}

/// Pose reached by a movement action on a free grid, or `None` if blocked.
pub fn apply_move(grid: &NavGrid, pose: Pose, action: &Action) -> Option<Pose> {
    let mut next = pose;
    match action {
        Action::RotateRight => next.rot = pose.rot.right(),
        Action::RotateLeft => next.rot = pose.rot.left(),
        Action::MoveAhead | Action::MoveRight | Action::MoveLeft => {
            let dir = match action {
                Action::MoveAhead => pose.rot,
                Action::MoveRight => pose.rot.right(),
                _ => pose.rot.left(),
            };
            let (dx, dy) = dir.vector();
            let c = pose.cell().offset(dx, dy);
            if !grid.is_free(c) {
                return None;
            }
            next.x = c.x;
            next.y = c.y;
        }
        _ => return None,
    }
    Some(next)
}

/// Steps-to-go from every `(cell, heading)` state to `goal`.
fn distances_to(grid: &NavGrid, goal: Cell, goal_rot: Heading) -> Vec<Option<u32>> {
    let n = (grid.width() * grid.height()) as usize * 4;
    let mut dist = vec![None; n];
    let mut queue = VecDeque::new();
    dist[state(grid, goal, goal_rot)] = Some(0);
    queue.push_back((goal, goal_rot));
    while let Some((c, r)) = queue.pop_front() {
        let d = dist[state(grid, c, r)].unwrap_or(0);
        let mut preds: Vec<(Cell, Heading)> = Vec::with_capacity(5);
        for dir in [r, r.right(), r.left()] {
            let (dx, dy) = dir.vector();
            let p = c.offset(-dx, -dy);
            if grid.is_free(p) {
                preds.push((p, r));
            }
        }
        preds.push((c, r.left()));
        preds.push((c, r.right()));
        for (pc, pr) in preds {
            let s = state(grid, pc, pr);
            if dist[s].is_none() {
                dist[s] = Some(d + 1);
                queue.push_back((pc, pr));
            }
        }
    }
    dist
}

/// Minimal movement plan to a cell and heading; among minimal plans the
/// lexicographically smallest under [`MOVE_ORDER`].
pub fn plan_moves(grid: &NavGrid, start: Pose, goal: Cell, goal_rot: Heading) -> Result<Vec<Action>> {
    if !grid.is_free(goal) {
        return Err(Error::Path { x: goal.x, y: goal.y });
    }
    if !grid.is_free(start.cell()) {
        return Err(Error::Path { x: start.x, y: start.y });
    }
    let dist = distances_to(grid, goal, goal_rot);
    let Some(mut left) = dist[state(grid, start.cell(), start.rot)] else {
        return Err(Error::Path { x: goal.x, y: goal.y });
    };
    let mut pose = start;
    let mut plan = Vec::with_capacity(left as usize);
    while left > 0 {
        let (action, next) = MOVE_ORDER
            .iter()
            .filter_map(|a| apply_move(grid, pose, a).map(|p| (a, p)))
            .find(|(_, p)| dist[state(grid, p.cell(), p.rot)] == Some(left - 1))
            .ok_or(Error::Path { x: goal.x, y: goal.y })?;
        plan.push(action.clone());
        pose = next;
        left -= 1;
    }
    Ok(plan)
}

/// Low-level actions realising a sub-goal from `pose`: the movement plan,
/// then the operation (with `target` as its object or receptacle), then Stop.
pub fn shortest_path_actions(
    grid: &NavGrid,
    pose: Pose,
    subgoal: &SubGoal,
    target: Option<&str>,
) -> Result<Vec<Action>> {
    subgoal.validate()?;
    let goal = pose.cell().offset(subgoal.dx, subgoal.dy);
    let goal_rot = pose.rot.rotated(subgoal.drot);
    let mut actions = if subgoal.dx == 0 && subgoal.dy == 0 && subgoal.drot == 0 {
        Vec::new()
    } else {
        plan_moves(grid, pose, goal, goal_rot)?
    };
    let need_target = || {
        target
            .map(str::to_string)
            .ok_or_else(|| Error::Domain(format!("{:?} needs a target id", subgoal.ope)))
    };
    match subgoal.ope {
        Ope::NoAction => {}
        Ope::PickUp => actions.push(Action::PickUp(need_target()?)),
        Ope::PutDown => actions.push(Action::PutDown(need_target()?)),
        Ope::Drop => actions.push(Action::Drop),
    }
    if subgoal.stop {
        actions.push(Action::Stop);
    }
    Ok(actions)
}

/// Where to stand for an interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSite<'a> {
    /// Cells that must be within range and not behind a wall.
    pub reach: &'a [Cell],
    /// Cells the agent turns toward.
    pub face: &'a [Cell],
    /// Whether standing on a reach cell is disallowed.
    pub exclude_reach: bool,
}

impl InteractionSite<'_> {
    /// Distance from `c` to the nearest reachable-by-sight reach cell, if within `range`.
    pub fn reach_distance(&self, c: Cell, range: f64, is_wall: &impl Fn(Cell) -> bool) -> Option<f64> {
        if self.exclude_reach && self.reach.contains(&c) {
            return None;
        }
        self.reach
            .iter()
            .filter(|&&t| t.dist(c) <= range + 1e-9 && !occluded(c, t, is_wall))
            .map(|&t| t.dist(c))
            .min_by(|a, b| a.total_cmp(b))
    }

    /// Heading from `c` toward the nearest face cell in range and in sight,
    /// else the nearest face cell (ties by lower `(x, y)`).
    pub fn facing_from(&self, c: Cell, range: f64, is_wall: &impl Fn(Cell) -> bool) -> Heading {
        let hidden = |t: &Cell| t.dist(c) > range + 1e-9 || occluded(c, *t, is_wall);
        let target = self
            .face
            .iter()
            .min_by_key(|t| (hidden(t), t.dist_sq(c), t.x, t.y))
            .copied()
            .unwrap_or(c);
        if target == c {
            return Heading::North;
        }
        Heading::facing(target.x - c.x, target.y - c.y)
    }
}

/// The nearest walkable cell (by distance to the site, then `x`, then `y`)
/// reachable from `from` without crossing `occupied`, facing the site.
pub fn select_viewpoint(
    grid: &NavGrid,
    is_wall: impl Fn(Cell) -> bool,
    site: &InteractionSite<'_>,
    from: Cell,
    occupied: &[Cell],
    range: f64,
) -> Result<Pose> {
    let mut blocked = grid.clone();
    for &c in occupied {
        if c != from {
            blocked.set(c, false);
        }
    }
    let reach = blocked.distances_from(from);
    let best = blocked
        .free_cells()
        .filter(|&c| reach[blocked.index(c)].is_some())
        .filter_map(|c| site.reach_distance(c, range, &is_wall).map(|d| (d, c)))
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then(a.x.cmp(&b.x)).then(a.y.cmp(&b.y)));
    match best {
        Some((_, c)) => Ok(Pose::new(c.x, c.y, site.facing_from(c, range, &is_wall))),
        None => Err(Error::UnreachableTarget(
            site.reach.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
        )),
    }
}

/// Nearest frontier by path length (ties by lower `(x, y)`).
pub fn nearest_frontier(grid: &NavGrid, frontier: &[Cell], from: Cell) -> Option<(Cell, u32)> {
    let dist = grid.distances_from(from);
    frontier
        .iter()
        .filter_map(|&c| grid.in_bounds(c).then(|| dist[grid.index(c)]).flatten().map(|d| (c, d)))
        .min_by_key(|&(c, d)| (d, c.x, c.y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_op_subgoal_is_empty() {
        let grid = NavGrid::from_ascii(&["...", "...", "..."]);
        let pose = Pose::new(1, 1, Heading::North);
        let plan = shortest_path_actions(&grid, pose, &SubGoal::idle(), None).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn one_cell_ahead_is_one_move() {
        let grid = NavGrid::from_ascii(&["...", "...", "..."]);
        let pose = Pose::new(1, 1, Heading::North);
        let sg = SubGoal {
            dx: 0,
            dy: -1,
            ..SubGoal::idle()
        };
        assert_eq!(
            shortest_path_actions(&grid, pose, &sg, None).unwrap(),
            vec![Action::MoveAhead]
        );
    }

    #[test]
    fn strafing_beats_rotation() {
        let grid = NavGrid::from_ascii(&["...", "...", "..."]);
        let pose = Pose::new(1, 1, Heading::North);
        let sg = SubGoal {
            dx: 1,
            dy: 0,
            ..SubGoal::idle()
        };
        assert_eq!(
            shortest_path_actions(&grid, pose, &sg, None).unwrap(),
            vec![Action::MoveRight]
        );
    }

    #[test]
    fn wall_fixture_matches_bfs_length() {
        let grid = NavGrid::from_ascii(&[".....", ".###.", "...#.", ".#...", "....."]);
        let start = Pose::new(0, 0, Heading::East);
        let plan = plan_moves(&grid, start, Cell::new(2, 2), Heading::East).unwrap();
        // (0,0)→(0,1)→(0,2)→(1,2)→(2,2) by strafing right then moving ahead
        assert_eq!(plan.len(), 4);
        let mut pose = start;
        for a in &plan {
            pose = apply_move(&grid, pose, a).unwrap();
        }
        assert_eq!((pose.cell(), pose.rot), (Cell::new(2, 2), Heading::East));
    }

    #[test]
    fn unreachable_goal_is_a_path_error() {
        let grid = NavGrid::from_ascii(&["..#..", "..#..", "..#.."]);
        let r = plan_moves(&grid, Pose::new(0, 0, Heading::East), Cell::new(4, 0), Heading::East);
        assert!(matches!(r, Err(Error::Path { .. })));
    }

    #[test]
    fn viewpoint_on_open_floor_is_adjacent_and_facing() {
        let grid = NavGrid::from_ascii(&[".....", ".....", ".....", ".....", "....."]);
        let target = [Cell::new(2, 2)];
        let site = InteractionSite {
            reach: &target,
            face: &target,
            exclude_reach: true,
        };
        let vp = select_viewpoint(&grid, |_| false, &site, Cell::new(0, 0), &[], 6.0).unwrap();
        // four cells at distance 1; the lowest (x, y) is (1, 2)
        assert_eq!((vp.x, vp.y, vp.rot), (1, 2, Heading::East));
    }

    #[test]
    fn enclosed_target_has_no_viewpoint() {
        let grid = NavGrid::from_ascii(&["..#..", "..#..", "..#.."]);
        let target = [Cell::new(4, 1)];
        let site = InteractionSite {
            reach: &target,
            face: &target,
            exclude_reach: true,
        };
        let wall = |c: Cell| c.x == 2;
        let r = select_viewpoint(&grid, wall, &site, Cell::new(0, 0), &[], 6.0);
        assert!(matches!(r, Err(Error::UnreachableTarget(_))));
    }

    #[test]
    fn equidistant_viewpoints_tie_to_lower_xy() {
        let grid = NavGrid::from_ascii(&["#.#", "#.#", "#.#"]);
        let target = [Cell::new(1, 1)];
        let site = InteractionSite {
            reach: &target,
            face: &target,
            exclude_reach: true,
        };
        let vp = select_viewpoint(&grid, |_| false, &site, Cell::new(1, 2), &[], 6.0).unwrap();
        assert_eq!(vp.cell(), Cell::new(1, 0));
        let mut best = None;
        for c in grid.free_cells().filter(|&c| c != target[0]) {
            let key = (c.dist_sq(target[0]), c.x, c.y);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        assert_eq!(best.map(|b| (b.1, b.2)), Some((1, 0)));
    }
}
