//! Height-aware line-of-sight model.
//!
//! An entity is visible iff it is within `r_vis`, inside the 90° frustum
//! around the heading, not wall-occluded along the grid ray, and allowed by
//! the height rule: short agents see floor and low surfaces fully and high
//! surfaces only within `r_vis / 2`; tall agents see low and high surfaces
//! fully and the floor only within `r_vis / 2`. Looking down (tall agents)
//! or up (short agents) extends the restricted band by one cell.

use serde::{Deserialize, Serialize};

use super::geom::{Cell, Pitch, Pose};
use super::scene::{CellKind, Placement, Scene};
use crate::error::Result;
use crate::knowledge::{HeightClass, RoomType, FLOOR};

/// Parameters the observer sees with; echoed into every [`Observation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewer {
    pub pose: Pose,
    pub hei: bool,
    pub r_vis: f64,
}

impl Viewer {
    /// Range, frustum and occlusion, ignoring height.
    pub fn sees_cell(&self, target: Cell, is_wall: impl Fn(Cell) -> bool) -> bool {
        let from = self.pose.cell();
        if target == from {
            return true;
        }
        if from.dist(target) > self.r_vis + 1e-9 {
            return false;
        }
        in_frustum(self.pose, target) && !occluded(from, target, is_wall)
    }

    /// Height rule for an entity of class `class` at `target`.
    pub fn height_permits(&self, class: HeightClass, target: Cell) -> bool {
        let d = self.pose.cell().dist(target);
        let half = self.r_vis / 2.0;
        match (self.hei, class) {
            (false, HeightClass::Floor | HeightClass::Low) => true,
            (false, HeightClass::High) => {
                let bonus = if self.pose.pitch == Pitch::Up { 1.0 } else { 0.0 };
                d <= half + bonus + 1e-9
            }
            (true, HeightClass::Low | HeightClass::High) => true,
            (true, HeightClass::Floor) => {
                let bonus = if self.pose.pitch == Pitch::Down { 1.0 } else { 0.0 };
                d <= half + bonus + 1e-9
            }
        }
    }

    pub fn sees(&self, class: HeightClass, target: Cell, is_wall: impl Fn(Cell) -> bool) -> bool {
        self.height_permits(class, target) && self.sees_cell(target, is_wall)
    }
}

/// Inside the 90° cone centred on the heading (boundary inclusive).
pub fn in_frustum(pose: Pose, target: Cell) -> bool {
    let (hx, hy) = pose.rot.vector();
    let vx = target.x - pose.x;
    let vy = target.y - pose.y;
    let along = hx * vx + hy * vy;
    let perp = (hx * vy - hy * vx).abs();
    along > 0 && perp <= along
}

/// Cells strictly between `from` and `to` on the Bresenham line.
pub fn ray_cells(from: Cell, to: Cell) -> Vec<Cell> {
    let mut out = Vec::new();
    let (mut x, mut y) = (from.x, from.y);
    let dx = (to.x - from.x).abs();
    let dy = -(to.y - from.y).abs();
    let sx = if from.x < to.x { 1 } else { -1 };
    let sy = if from.y < to.y { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x == to.x && y == to.y {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        if x == to.x && y == to.y {
            break;
        }
        out.push(Cell::new(x, y));
    }
    out
}

pub fn occluded(from: Cell, to: Cell, is_wall: impl Fn(Cell) -> bool) -> bool {
    ray_cells(from, to).into_iter().any(is_wall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleCell {
    pub cell: Cell,
    pub wall: bool,
    pub walkable: bool,
    /// Room partition index the cell belongs to (observable structure, not its type).
    pub region: Option<usize>,
    /// The height rule admits whatever can rest here (floor items on floor
    /// cells, the receptacle's class on furniture), so nothing on it went unseen.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenObject {
    pub id: String,
    pub kind: String,
    /// Receptacle type, or [`FLOOR`].
    pub receptacle_type: String,
    pub receptacle_id: Option<String>,
    pub room_type: RoomType,
    pub cell: Cell,
    /// Cells an interaction can target: the receptacle footprint, or the floor cell.
    pub footprint: super::geom::Rect,
    pub height: HeightClass,
    pub region: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenReceptacle {
    pub id: String,
    pub kind: String,
    pub room_type: RoomType,
    /// Anchor cell of the footprint.
    pub cell: Cell,
    pub footprint: super::geom::Rect,
    pub height: HeightClass,
    pub region: usize,
}

/// What one agent perceives at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: usize,
    pub viewer: Viewer,
    pub visible_cells: Vec<VisibleCell>,
    pub visible_objects: Vec<SeenObject>,
    pub visible_receptacles: Vec<SeenReceptacle>,
}

impl Scene {
    pub fn viewer(&self, agent: usize) -> Result<Viewer> {
        let a = self.agent(agent)?;
        Ok(Viewer {
            pose: a.pose,
            hei: a.capability.hei,
            r_vis: self.config.r_vis,
        })
    }

    /// Whether `agent` currently sees a receptacle (any footprint cell).
    pub fn sees_receptacle(&self, viewer: &Viewer, id: &str) -> bool {
        let Ok(r) = self.receptacle(id) else {
            return false;
        };
        r.footprint().any(|c| viewer.sees(r.height, c, |w| self.is_wall(w)))
    }

    pub fn sees_object(&self, viewer: &Viewer, id: &str) -> bool {
        let Ok(obj) = self.object(id) else {
            return false;
        };
        let class = self.object_height(obj);
        self.object_footprint(obj)
            .into_iter()
            .any(|c| viewer.sees(class, c, |w| self.is_wall(w)))
    }

    pub fn observe(&self, agent: usize) -> Result<Observation> {
        let viewer = self.viewer(agent)?;
        let is_wall = |c: Cell| self.is_wall(c);
        let r = viewer.r_vis.ceil() as i32;
        let me = viewer.pose.cell();

        let mut visible_cells = Vec::new();
        for y in (me.y - r).max(0)..=(me.y + r).min(self.height() - 1) {
            for x in (me.x - r).max(0)..=(me.x + r).min(self.width() - 1) {
                let c = Cell::new(x, y);
                if viewer.sees_cell(c, is_wall) {
                    let kind = self.cell_kind(c);
                    let complete = match kind {
                        CellKind::Wall => true,
                        CellKind::Floor => viewer.height_permits(HeightClass::Floor, c),
                        CellKind::Furniture => self.receptacle_at(c).is_none_or(|r| viewer.height_permits(r.height, c)),
                    };
                    visible_cells.push(VisibleCell {
                        cell: c,
                        wall: kind == CellKind::Wall,
                        walkable: kind == CellKind::Floor,
                        region: self.room_of(c),
                        complete,
                    });
                }
            }
        }

        let mut visible_receptacles = Vec::new();
        for rec in self.receptacles() {
            if self.sees_receptacle(&viewer, &rec.id) {
                visible_receptacles.push(SeenReceptacle {
                    id: rec.id.clone(),
                    kind: rec.kind.clone(),
                    room_type: self.rooms()[rec.room].room_type,
                    cell: rec.anchor(),
                    footprint: rec.rect,
                    height: rec.height,
                    region: rec.room,
                });
            }
        }

        let mut visible_objects = Vec::new();
        for obj in self.objects() {
            if matches!(obj.placement, Placement::Held(_)) || !self.sees_object(&viewer, &obj.id) {
                continue;
            }
            let Some((_, p_type, room_type)) = self.object_triple(obj) else {
                continue;
            };
            let receptacle_id = match &obj.placement {
                Placement::On(r) => Some(r.clone()),
                _ => None,
            };
            let cell = self.object_cell(obj);
            let footprint = match &receptacle_id {
                Some(r) => self.receptacle(r)?.rect,
                None => super::geom::Rect::point(cell),
            };
            visible_objects.push(SeenObject {
                id: obj.id.clone(),
                kind: obj.kind.clone(),
                receptacle_type: p_type,
                receptacle_id,
                room_type,
                cell,
                footprint,
                height: self.object_height(obj),
                region: self.placement_room(&obj.placement).unwrap_or(0),
            });
        }
        debug_assert!(visible_objects
            .iter()
            .all(|o| o.receptacle_type == FLOOR || o.receptacle_id.is_some()));

        Ok(Observation {
            agent,
            viewer,
            visible_cells,
            visible_objects,
            visible_receptacles,
        })
    }
}
