//! Per-agent semantic mapping, misplaced-object detection, room
//! classification and receptacle prediction.
//!
//! Perception is symbolic: observations carry exact types and placements,
//! and a [`DetectorNoise`] model flips detector outputs.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{HeightClass, Ontology, RoomType};
use crate::world::{Cell, NavGrid, Observation, Pose, Rect, Scene, Viewer};

/// Local window edge in cells (5 m).
pub const DEFAULT_WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: String,
    pub kind: String,
    pub receptacle_type: String,
    pub receptacle_id: Option<String>,
    pub cell: Cell,
    pub footprint: Rect,
    pub height: HeightClass,
    pub region: usize,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptacleEntry {
    pub id: String,
    pub kind: String,
    pub cell: Cell,
    pub footprint: Rect,
    pub height: HeightClass,
    pub region: usize,
    pub round: usize,
}

/// Which parts of a peer's map a merge copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeScope {
    /// Explored cells and all instance knowledge.
    Full,
    /// Instance knowledge only (compressed maps).
    Instances,
}

/// One agent's accumulated knowledge of the house.
///
/// The static floor plan (walls, walkable cells, room partition) is known
/// up front; what is learned is which cells have been seen and which
/// objects and receptacles were where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMap {
    width: i32,
    height: i32,
    window: usize,
    type_names: Vec<String>,
    walkable: NavGrid,
    walls: Vec<bool>,
    regions: Vec<Option<usize>>,
    explored: Vec<bool>,
    instances: BTreeMap<String, InstanceEntry>,
    /// Instances seen to be gone, with the round they were missed.
    gone: BTreeMap<String, usize>,
    receptacles: BTreeMap<String, ReceptacleEntry>,
    region_labels: BTreeMap<usize, RoomType>,
}

impl SemanticMap {
    pub fn new(scene: &Scene, kb: &Ontology) -> SemanticMap {
        let n = (scene.width() * scene.height()) as usize;
        let mut walls = vec![false; n];
        let mut regions = vec![None; n];
        for y in 0..scene.height() {
            for x in 0..scene.width() {
                let c = Cell::new(x, y);
                let i = (y * scene.width() + x) as usize;
                walls[i] = scene.is_wall(c);
                regions[i] = scene.room_of(c);
            }
        }
        SemanticMap {
            width: scene.width(),
            height: scene.height(),
            window: DEFAULT_WINDOW,
            type_names: kb.object_types().iter().map(|t| t.name.clone()).collect(),
            walkable: scene.nav_grid(),
            walls,
            regions,
            explored: vec![false; n],
            instances: BTreeMap::new(),
            gone: BTreeMap::new(),
            receptacles: BTreeMap::new(),
            region_labels: BTreeMap::new(),
        }
    }

    /// A map that has seen everything, with true room labels.
    pub fn omniscient(scene: &Scene, kb: &Ontology) -> SemanticMap {
        let mut map = SemanticMap::new(scene, kb);
        map.explored.iter_mut().for_each(|e| *e = true);
        map.label_regions(scene);
        for r in scene.receptacles() {
            map.receptacles.insert(
                r.id.clone(),
                ReceptacleEntry {
                    id: r.id.clone(),
                    kind: r.kind.clone(),
                    cell: r.anchor(),
                    footprint: r.rect,
                    height: r.height,
                    region: r.room,
                    round: 0,
                },
            );
        }
        for o in scene.objects() {
            map.insert_true_instance(scene, &o.id, 0);
        }
        map
    }

    /// Uses the scene's true room types instead of anchor votes.
    pub fn label_regions(&mut self, scene: &Scene) {
        for (i, room) in scene.rooms().iter().enumerate() {
            self.region_labels.insert(i, room.room_type);
        }
    }

    /// Records an object's current true placement (oracle knowledge).
    pub fn insert_true_instance(&mut self, scene: &Scene, id: &str, round: usize) {
        let Ok(obj) = scene.object(id) else { return };
        let Some((_, p_type, _)) = scene.object_triple(obj) else {
            return;
        };
        let cell = scene.object_cell(obj);
        let receptacle_id = match &obj.placement {
            crate::world::Placement::On(r) => Some(r.clone()),
            _ => None,
        };
        let footprint = receptacle_id
            .as_ref()
            .and_then(|r| scene.receptacle(r).ok())
            .map(|r| r.rect)
            .unwrap_or(Rect::point(cell));
        self.gone.remove(id);
        self.instances.insert(
            id.to_string(),
            InstanceEntry {
                id: id.to_string(),
                kind: obj.kind.clone(),
                receptacle_type: p_type,
                receptacle_id,
                cell,
                footprint,
                height: scene.object_height(obj),
                region: scene.placement_room(&obj.placement).unwrap_or(0),
                round,
            },
        );
    }

    pub fn with_window(mut self, g: usize) -> SemanticMap {
        self.window = g.max(1);
        self
    }

    pub fn width(&self) -> i32 {
        self.width
    }

    pub fn height(&self) -> i32 {
        self.height
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Channel count of the local tensor: one per object type, plus obstacle and explored.
    pub fn channels(&self) -> usize {
        self.type_names.len() + 2
    }

    fn idx(&self, c: Cell) -> Option<usize> {
        (c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height).then(|| (c.y * self.width + c.x) as usize)
    }

    pub fn nav(&self) -> &NavGrid {
        &self.walkable
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        self.idx(c).is_none_or(|i| self.walls[i])
    }

    pub fn is_walkable(&self, c: Cell) -> bool {
        self.walkable.is_free(c)
    }

    pub fn region_of(&self, c: Cell) -> Option<usize> {
        self.idx(c).and_then(|i| self.regions[i])
    }

    pub fn is_explored(&self, c: Cell) -> bool {
        self.idx(c).is_some_and(|i| self.explored[i])
    }

    pub fn explored_count(&self) -> usize {
        self.explored.iter().filter(|&&e| e).count()
    }

    pub fn explored_cells(&self) -> Vec<Cell> {
        self.walkable.cells().filter(|&c| self.is_explored(c)).collect()
    }

    pub fn instances(&self) -> &BTreeMap<String, InstanceEntry> {
        &self.instances
    }

    pub fn instance(&self, id: &str) -> Option<&InstanceEntry> {
        self.instances.get(id)
    }

    pub fn receptacles(&self) -> &BTreeMap<String, ReceptacleEntry> {
        &self.receptacles
    }

    pub fn receptacle(&self, id: &str) -> Option<&ReceptacleEntry> {
        self.receptacles.get(id)
    }

    /// Walkable cells not yet explored that touch an explored cell.
    pub fn frontier_cells(&self) -> Vec<Cell> {
        self.walkable
            .free_cells()
            .filter(|&c| !self.is_explored(c) && c.neighbors4().iter().any(|&n| self.is_explored(n)))
            .collect()
    }

    /// Furniture cells (neither wall nor walkable) not yet explored.
    pub fn unexplored_furniture(&self) -> Vec<Cell> {
        self.walkable
            .cells()
            .filter(|&c| !self.is_wall(c) && !self.is_walkable(c) && !self.is_explored(c))
            .collect()
    }

    /// Fraction of walkable cells not yet explored.
    pub fn unexplored_fraction(&self) -> f64 {
        let (mut total, mut open) = (0usize, 0usize);
        for c in self.walkable.free_cells() {
            total += 1;
            if !self.is_explored(c) {
                open += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            open as f64 / total as f64
        }
    }

    /// Forgets an instance (it was taken or re-placed by the owner).
    pub fn forget(&mut self, id: &str, round: usize) {
        if self.instances.remove(id).is_some() {
            self.gone.insert(id.to_string(), round);
        }
    }

    /// `G × G × (K_total + 2)` tensor centred on `center`, laid out `[row][col][channel]`.
    pub fn local_window(&self, center: Cell) -> Vec<f32> {
        let g = self.window as i32;
        let ch = self.channels();
        let k = self.type_names.len();
        let x0 = center.x - g / 2;
        let y0 = center.y - g / 2;
        let mut out = vec![0f32; (g * g) as usize * ch];
        let stamp = |c: Cell, channel: usize, out: &mut Vec<f32>| {
            let (col, row) = (c.x - x0, c.y - y0);
            if (0..g).contains(&col) && (0..g).contains(&row) {
                out[((row * g + col) as usize) * ch + channel] = 1.0;
            }
        };
        for row in 0..g {
            for col in 0..g {
                let c = Cell::new(x0 + col, y0 + row);
                if self.is_explored(c) {
                    stamp(c, k + 1, &mut out);
                    if !self.is_walkable(c) {
                        stamp(c, k, &mut out);
                    }
                }
            }
        }
        let type_of = |name: &str| self.type_names.iter().position(|n| n == name);
        for r in self.receptacles.values() {
            if let Some(t) = type_of(&r.kind) {
                for c in r.footprint.cells() {
                    stamp(c, t, &mut out);
                }
            }
        }
        for inst in self.instances.values() {
            if let Some(t) = type_of(&inst.kind) {
                stamp(inst.cell, t, &mut out);
            }
        }
        out
    }

    /// Copies a peer's knowledge in; newer rounds win, observations beat
    /// tombstones of the same round.
    pub fn merge_from(&mut self, other: &SemanticMap, scope: MergeScope) {
        if scope == MergeScope::Full {
            for (mine, theirs) in self.explored.iter_mut().zip(&other.explored) {
                *mine |= *theirs;
            }
        }
        for (id, r) in &other.receptacles {
            match self.receptacles.get(id) {
                Some(mine) if mine.round >= r.round => {}
                _ => {
                    self.receptacles.insert(id.clone(), r.clone());
                }
            }
        }
        let ids: BTreeSet<&String> = other.instances.keys().chain(other.gone.keys()).collect();
        for id in ids {
            let mine = self.knowledge_round(id);
            let theirs = other.knowledge_round(id);
            let take = match (mine, theirs) {
                (_, None) => false,
                (None, Some(_)) => true,
                (Some((mr, mseen)), Some((tr, tseen))) => tr > mr || (tr == mr && tseen && !mseen),
            };
            if !take {
                continue;
            }
            match other.instances.get(id) {
                Some(entry) => {
                    self.gone.remove(id);
                    self.instances.insert(id.clone(), entry.clone());
                }
                None => {
                    self.instances.remove(id);
                    self.gone.insert(id.clone(), other.gone[id]);
                }
            }
        }
    }

    /// Copies a peer's entries for the listed objects only, under the same recency rule.
    pub fn merge_selected(&mut self, other: &SemanticMap, ids: &BTreeSet<String>) {
        for id in ids {
            let Some(entry) = other.instances.get(id) else { continue };
            let newer = match self.knowledge_round(id) {
                None => true,
                Some((r, seen)) => entry.round > r || (entry.round == r && !seen),
            };
            if newer {
                self.gone.remove(id);
                self.instances.insert(id.clone(), entry.clone());
            }
        }
    }

    /// Latest round this map knows anything about `id`, and whether that is a sighting.
    fn knowledge_round(&self, id: &str) -> Option<(usize, bool)> {
        match (self.instances.get(id), self.gone.get(id)) {
            (Some(e), _) => Some((e.round, true)),
            (None, Some(&r)) => Some((r, false)),
            (None, None) => None,
        }
    }

    /// Whether every instance entry names a real object of the same type.
    pub fn consistent_with(&self, scene: &Scene) -> bool {
        self.instances
            .values()
            .all(|e| scene.object(&e.id).is_ok_and(|o| o.kind == e.kind))
    }
}

/// Folds one observation into the owner's map.
///
/// Visible cells whose contents the height rule admits become explored; seen objects and receptacles are upserted;
/// remembered objects whose location is in plain view but which were not
/// seen are dropped.
pub fn update_semantic_map(map: &mut SemanticMap, obs: &Observation, round: usize) {
    for vc in obs.visible_cells.iter().filter(|vc| vc.complete) {
        if let Some(i) = map.idx(vc.cell) {
            map.explored[i] = true;
        }
    }
    for r in &obs.visible_receptacles {
        map.receptacles.insert(
            r.id.clone(),
            ReceptacleEntry {
                id: r.id.clone(),
                kind: r.kind.clone(),
                cell: r.cell,
                footprint: r.footprint,
                height: r.height,
                region: r.region,
                round,
            },
        );
    }
    let seen: BTreeSet<&str> = obs.visible_objects.iter().map(|o| o.id.as_str()).collect();
    let missing: Vec<String> = map
        .instances
        .values()
        .filter(|e| !seen.contains(e.id.as_str()) && in_plain_view(map, &obs.viewer, e))
        .map(|e| e.id.clone())
        .collect();
    for id in missing {
        map.forget(&id, round);
    }
    for o in &obs.visible_objects {
        map.gone.remove(&o.id);
        map.instances.insert(
            o.id.clone(),
            InstanceEntry {
                id: o.id.clone(),
                kind: o.kind.clone(),
                receptacle_type: o.receptacle_type.clone(),
                receptacle_id: o.receptacle_id.clone(),
                cell: o.cell,
                footprint: o.footprint,
                height: o.height,
                region: o.region,
                round,
            },
        );
    }
}

fn in_plain_view(map: &SemanticMap, viewer: &Viewer, e: &InstanceEntry) -> bool {
    e.footprint
        .cells()
        .any(|c| viewer.sees(e.height, c, |w| map.is_wall(w)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomGuess {
    pub room: RoomType,
    /// No anchors were observed; the default was returned.
    pub low_confidence: bool,
}

/// Room type of the region enclosing `cell` by anchor-type votes.
pub fn classify_room(map: &SemanticMap, cell: Cell, kb: &Ontology) -> Result<RoomGuess> {
    if !map.is_explored(cell) {
        return Err(Error::Domain(format!("cell {cell} has not been explored")));
    }
    let region = map
        .region_of(cell)
        .ok_or_else(|| Error::Domain(format!("cell {cell} is not inside a room")))?;
    Ok(classify_region(map, region, kb))
}

pub fn classify_region(map: &SemanticMap, region: usize, kb: &Ontology) -> RoomGuess {
    if let Some(&room) = map.region_labels.get(&region) {
        return RoomGuess {
            room,
            low_confidence: false,
        };
    }
    let anchor_types: BTreeSet<&str> = map
        .receptacles
        .values()
        .filter(|r| r.region == region)
        .map(|r| r.kind.as_str())
        .collect();
    let votes = room_votes(anchor_types.iter().copied(), kb);
    let mut best: Option<(RoomType, f64)> = None;
    for room in RoomType::ALL {
        let v = votes[room.index()];
        if v > 0.0 && best.is_none_or(|(_, b)| v > b + 1e-12) {
            best = Some((room, v));
        }
    }
    match best {
        Some((room, _)) => RoomGuess {
            room,
            low_confidence: false,
        },
        None => RoomGuess {
            room: RoomType::LivingRoom,
            low_confidence: true,
        },
    }
}

/// Each anchor type splits one vote evenly over the rooms it appears with in the triples.
pub fn room_votes<'a>(anchor_types: impl IntoIterator<Item = &'a str>, kb: &Ontology) -> [f64; 4] {
    let mut votes = [0.0; 4];
    for t in anchor_types {
        let rooms = kb.rooms_for_receptacle(t);
        if rooms.is_empty() {
            continue;
        }
        let w = 1.0 / rooms.len() as f64;
        for r in rooms {
            votes[r.index()] += w;
        }
    }
    votes
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectorNoise {
    /// Probability a reasonable object is reported misplaced.
    pub fp: f64,
    /// Probability a misplaced object is reported reasonable.
    #[serde(rename = "fn")]
    pub fn_: f64,
}

impl DetectorNoise {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("fp", self.fp), ("fn", self.fn_)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("detector noise {name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.fp == 0.0 && self.fn_ == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub object: String,
    pub kind: String,
    /// `true` when the object was judged misplaced.
    pub det: bool,
    pub receptacle_type: String,
    pub receptacle_id: Option<String>,
    pub room_type: RoomType,
    pub cell: Cell,
    pub footprint: Rect,
    pub round: usize,
}

pub fn detect_misplaced<R: Rng>(
    obs: &Observation,
    kb: &Ontology,
    noise: DetectorNoise,
    rng: &mut R,
    round: usize,
) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(obs.visible_objects.len());
    for o in &obs.visible_objects {
        let truth = !kb.is_reasonable(&o.kind, &o.receptacle_type, o.room_type)?;
        let flip = if truth { noise.fn_ } else { noise.fp };
        let det = if flip > 0.0 && rng.gen_bool(flip) {
            !truth
        } else {
            truth
        };
        out.push(detection_from(o, det, round));
    }
    Ok(out)
}

/// Detector without commonsense knowledge: every verdict is a fair coin.
pub fn detect_coin_flip<R: Rng>(obs: &Observation, rng: &mut R, round: usize) -> Vec<Detection> {
    obs.visible_objects
        .iter()
        .map(|o| detection_from(o, rng.gen_bool(0.5), round))
        .collect()
}

fn detection_from(o: &crate::world::SeenObject, det: bool, round: usize) -> Detection {
    Detection {
        object: o.id.clone(),
        kind: o.kind.clone(),
        det,
        receptacle_type: o.receptacle_type.clone(),
        receptacle_id: o.receptacle_id.clone(),
        room_type: o.room_type,
        cell: o.cell,
        footprint: o.footprint,
        round,
    }
}

/// Where a misplaced object should go.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementTarget {
    pub receptacle_type: String,
    pub room_type: RoomType,
    /// A known instance, or `None` when the agent still has to find one.
    pub instance: Option<String>,
}

pub fn predict_receptacle(o_type: &str, map: &SemanticMap, kb: &Ontology, agent_pose: Pose) -> Result<PlacementTarget> {
    let candidates = kb.candidate_locations(o_type)?;
    let here = agent_pose.cell();
    for (p_type, room) in &candidates {
        let best = map
            .receptacles
            .values()
            .filter(|r| &r.kind == p_type && classify_region(map, r.region, kb).room == *room)
            .map(|r| {
                let d = r.footprint.cells().map(|c| c.dist_sq(here)).min().unwrap_or(i64::MAX);
                (d, r.id.as_str())
            })
            .min();
        if let Some((_, id)) = best {
            return Ok(PlacementTarget {
                receptacle_type: p_type.clone(),
                room_type: *room,
                instance: Some(id.to_string()),
            });
        }
    }
    let (p_type, room) = candidates
        .first()
        .ok_or_else(|| Error::Domain(format!("`{o_type}` has no candidate location")))?;
    Ok(PlacementTarget {
        receptacle_type: p_type.clone(),
        room_type: *room,
        instance: None,
    })
}
