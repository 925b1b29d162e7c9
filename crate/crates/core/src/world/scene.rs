use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::geom::{CapabilityVector, Cell, Heading, Pitch, Pose, Rect};
use super::nav::NavGrid;
use crate::error::{Error, Result};
use crate::knowledge::{HeightClass, Ontology, RoomType, FLOOR};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

/// Tunable physical constants of the world, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub r_vis: f64,
    pub interaction_range: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            r_vis: 20.0,
            interaction_range: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub id: String,
    #[serde(rename = "type")]
    pub room_type: RoomType,
    pub rects: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receptacle {
    pub id: String,
    pub kind: String,
    pub rect: Rect,
    pub room: usize,
    pub height: HeightClass,
    pub interaction_cells: Vec<Cell>,
}

impl Receptacle {
    /// Cell used to locate objects resting on this receptacle.
    pub fn anchor(&self) -> Cell {
        Cell::new(self.rect.x0, self.rect.y0)
    }

    pub fn footprint(&self) -> impl Iterator<Item = Cell> + '_ {
        self.rect.cells()
    }
}

/// Where an object currently is.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Resting on the receptacle instance with this id.
    On(String),
    Floor(Cell),
    /// In the hand of the agent with this index.
    Held(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectInstance {
    pub id: String,
    pub kind: String,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub capability: CapabilityVector,
    pub pose: Pose,
    pub held: Option<String>,
    pub stopped: bool,
}

impl AgentState {
    pub fn new(capability: CapabilityVector, pose: Pose) -> AgentState {
        AgentState {
            capability,
            pose,
            held: None,
            stopped: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Wall,
    /// Receptacle footprint: inside a room but not walkable.
    Furniture,
    Floor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CellInfo {
    room: Option<u16>,
    receptacle: Option<u16>,
}

/// On-disk scene document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub schema_version: u32,
    pub name: String,
    pub width: i32,
    pub height: i32,
    pub rooms: Vec<Room>,
    #[serde(default)]
    pub receptacles: Vec<ReceptacleEntry>,
    #[serde(default)]
    pub objects: Vec<ObjectEntry>,
    #[serde(default)]
    pub agents: Vec<AgentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceptacleEntry {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_by: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEntry {
    pub nav: bool,
    pub mani: bool,
    pub hei: bool,
    pub x: i32,
    pub y: i32,
    pub rot: Heading,
    #[serde(default = "level")]
    pub pitch: Pitch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stopped: bool,
}

fn level() -> Pitch {
    Pitch::Level
}

/// The multi-room world: static layout, object placements and agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    width: i32,
    height: i32,
    rooms: Vec<Room>,
    receptacles: Vec<Receptacle>,
    objects: Vec<ObjectInstance>,
    agents: Vec<AgentState>,
    pub config: WorldConfig,
    cells: Vec<CellInfo>,
    object_index: HashMap<String, usize>,
    receptacle_index: HashMap<String, usize>,
    heights: HashMap<String, HeightClass>,
    pickupable: BTreeSet<String>,
}

impl Scene {
    pub fn from_toml_str(text: &str, kb: &Ontology) -> Result<Scene> {
        let file: SceneFile = toml::from_str(text).map_err(|e| Error::load("scene", e))?;
        Scene::from_file(file, kb)
    }

    pub fn from_file(file: SceneFile, kb: &Ontology) -> Result<Scene> {
        let mut failures = Vec::new();
        macro_rules! bail {
            () => {
                if !failures.is_empty() {
                    return Err(Error::Validation {
                        what: format!("scene `{}`", file.name),
                        failures,
                    });
                }
            };
        }
        if file.schema_version != SCENE_SCHEMA_VERSION {
            failures.push(format!("unsupported schema_version {}", file.schema_version));
        }
        if file.width <= 0 || file.height <= 0 || file.width > 512 || file.height > 512 {
            failures.push(format!("bad dimensions {}x{}", file.width, file.height));
        }
        bail!();

        let (w, h) = (file.width, file.height);
        let in_bounds = |r: &Rect| r.x0 >= 0 && r.y0 >= 0 && r.x1 < w && r.y1 < h;
        let mut cells = vec![
            CellInfo {
                room: None,
                receptacle: None
            };
            (w * h) as usize
        ];
        let mut room_ids = BTreeSet::new();
        for (ri, room) in file.rooms.iter().enumerate() {
            if !room_ids.insert(room.id.clone()) {
                failures.push(format!("duplicate room id `{}`", room.id));
            }
            if room.rects.is_empty() {
                failures.push(format!("room `{}` has no rectangles", room.id));
            }
            for rect in &room.rects {
                if !rect.is_valid() || !in_bounds(rect) {
                    failures.push(format!("room `{}`: rectangle {:?} out of bounds", room.id, rect));
                    continue;
                }
                for c in rect.cells() {
                    let info = &mut cells[(c.y * w + c.x) as usize];
                    if info.room.is_some_and(|other| other as usize != ri) {
                        failures.push(format!("room `{}` overlaps another room at {c}", room.id));
                    }
                    info.room = Some(ri as u16);
                }
            }
        }
        bail!();

        let mut receptacles = Vec::with_capacity(file.receptacles.len());
        let mut receptacle_index = HashMap::new();
        let mut heights = HashMap::new();
        for (i, entry) in file.receptacles.iter().enumerate() {
            match kb.object_type(&entry.kind) {
                Ok(t) if t.receptacle => {
                    heights.insert(entry.kind.clone(), t.height_class);
                }
                Ok(_) => failures.push(format!("`{}`: type `{}` is not a receptacle", entry.id, entry.kind)),
                Err(_) => failures.push(format!("`{}`: unknown type `{}`", entry.id, entry.kind)),
            }
            if receptacle_index.insert(entry.id.clone(), i).is_some() {
                failures.push(format!("duplicate receptacle id `{}`", entry.id));
            }
            if !entry.rect.is_valid() || !in_bounds(&entry.rect) {
                failures.push(format!("receptacle `{}` out of bounds", entry.id));
                continue;
            }
            let rooms: BTreeSet<Option<u16>> = entry
                .rect
                .cells()
                .map(|c| cells[(c.y * w + c.x) as usize].room)
                .collect();
            let room = match rooms.into_iter().collect::<Vec<_>>().as_slice() {
                [Some(r)] => *r as usize,
                _ => {
                    failures.push(format!("receptacle `{}` must lie inside exactly one room", entry.id));
                    continue;
                }
            };
            for c in entry.rect.cells() {
                let info = &mut cells[(c.y * w + c.x) as usize];
                if info.receptacle.is_some() {
                    failures.push(format!("receptacle `{}` overlaps another at {c}", entry.id));
                }
                info.receptacle = Some(i as u16);
            }
            receptacles.push(Receptacle {
                id: entry.id.clone(),
                kind: entry.kind.clone(),
                rect: entry.rect,
                room,
                height: heights.get(&entry.kind).copied().unwrap_or(HeightClass::Low),
                interaction_cells: Vec::new(),
            });
        }
        bail!();

        let kind_at = |c: Cell| -> CellKind {
            if c.x < 0 || c.y < 0 || c.x >= w || c.y >= h {
                return CellKind::Wall;
            }
            let info = cells[(c.y * w + c.x) as usize];
            match (info.room, info.receptacle) {
                (None, _) => CellKind::Wall,
                (Some(_), Some(_)) => CellKind::Furniture,
                (Some(_), None) => CellKind::Floor,
            }
        };
        for r in &mut receptacles {
            let mut ic = BTreeSet::new();
            for c in r.rect.cells() {
                for n in c.neighbors4() {
                    if kind_at(n) == CellKind::Floor {
                        ic.insert((n.y, n.x));
                    }
                }
            }
            r.interaction_cells = ic.into_iter().map(|(y, x)| Cell::new(x, y)).collect();
            if r.interaction_cells.is_empty() {
                failures.push(format!("receptacle `{}` has no interaction cell", r.id));
            }
        }

        // all floor must form one 4-connected component
        let floor: Vec<Cell> = (0..h)
            .flat_map(|y| (0..w).map(move |x| Cell::new(x, y)))
            .filter(|&c| kind_at(c) == CellKind::Floor)
            .collect();
        if let Some(&first) = floor.first() {
            let mut seen = BTreeSet::from([(first.x, first.y)]);
            let mut queue = std::collections::VecDeque::from([first]);
            while let Some(c) = queue.pop_front() {
                for n in c.neighbors4() {
                    if kind_at(n) == CellKind::Floor && seen.insert((n.x, n.y)) {
                        queue.push_back(n);
                    }
                }
            }
            if let Some(cut) = floor.iter().find(|c| !seen.contains(&(c.x, c.y))) {
                failures.push(format!("floor cell {cut} is not reachable from {first}"));
            }
        }

        let mut agents = Vec::with_capacity(file.agents.len());
        let mut occupied = BTreeSet::new();
        for (i, a) in file.agents.iter().enumerate() {
            let cell = Cell::new(a.x, a.y);
            if kind_at(cell) != CellKind::Floor {
                failures.push(format!("agent {i} on non-walkable cell {cell}"));
            }
            if !occupied.insert(cell) {
                failures.push(format!("agent {i} shares cell {cell} with another agent"));
            }
            if !a.nav {
                failures.push(format!("agent {i} must be able to navigate"));
            }
            if a.held.is_some() && !a.mani {
                failures.push(format!("agent {i} holds an object without manipulation ability"));
            }
            agents.push(AgentState {
                capability: CapabilityVector::new(a.nav, a.mani, a.hei),
                pose: Pose {
                    x: a.x,
                    y: a.y,
                    rot: a.rot,
                    pitch: a.pitch,
                },
                held: a.held.clone(),
                stopped: a.stopped,
            });
        }

        let mut objects = Vec::with_capacity(file.objects.len());
        let mut object_index = HashMap::new();
        let mut pickupable = BTreeSet::new();
        for (i, o) in file.objects.iter().enumerate() {
            match kb.object_type(&o.kind) {
                Ok(t) => {
                    heights.insert(o.kind.clone(), t.height_class);
                    if t.pickupable {
                        pickupable.insert(o.kind.clone());
                    }
                }
                Err(_) => failures.push(format!("object `{}`: unknown type `{}`", o.id, o.kind)),
            }
            if object_index.insert(o.id.clone(), i).is_some() {
                failures.push(format!("duplicate object id `{}`", o.id));
            }
            let placement = match (&o.on, o.floor, o.held_by) {
                (Some(r), None, None) => {
                    if !receptacle_index.contains_key(r) {
                        failures.push(format!("object `{}` rests on unknown receptacle `{r}`", o.id));
                    }
                    Placement::On(r.clone())
                }
                (None, Some(c), None) => {
                    if kind_at(c) != CellKind::Floor {
                        failures.push(format!("object `{}` on non-walkable floor cell {c}", o.id));
                    }
                    Placement::Floor(c)
                }
                (None, None, Some(a)) => {
                    if agents.get(a).and_then(|s: &AgentState| s.held.as_ref()) != Some(&o.id) {
                        failures.push(format!("object `{}` held by agent {a} which does not hold it", o.id));
                    }
                    Placement::Held(a)
                }
                _ => {
                    failures.push(format!(
                        "object `{}` needs exactly one of `on`, `floor`, `held_by`",
                        o.id
                    ));
                    continue;
                }
            };
            objects.push(ObjectInstance {
                id: o.id.clone(),
                kind: o.kind.clone(),
                placement,
            });
        }
        for (i, a) in agents.iter().enumerate() {
            if let Some(held) = &a.held {
                let ok = object_index
                    .get(held)
                    .and_then(|&j| objects.get(j))
                    .is_some_and(|o| o.placement == Placement::Held(i));
                if !ok {
                    failures.push(format!("agent {i} holds `{held}` which is not marked held_by {i}"));
                }
            }
        }
        bail!();

        Ok(Scene {
            name: file.name,
            width: w,
            height: h,
            rooms: file.rooms,
            receptacles,
            objects,
            agents,
            config: WorldConfig::default(),
            cells,
            object_index,
            receptacle_index,
            heights,
            pickupable,
        })
    }

    pub fn to_file(&self) -> SceneFile {
        SceneFile {
            schema_version: SCENE_SCHEMA_VERSION,
            name: self.name.clone(),
            width: self.width,
            height: self.height,
            rooms: self.rooms.clone(),
            receptacles: self
                .receptacles
                .iter()
                .map(|r| ReceptacleEntry {
                    id: r.id.clone(),
                    kind: r.kind.clone(),
                    rect: r.rect,
                })
                .collect(),
            objects: self
                .objects
                .iter()
                .map(|o| {
                    let mut e = ObjectEntry {
                        id: o.id.clone(),
                        kind: o.kind.clone(),
                        on: None,
                        floor: None,
                        held_by: None,
                    };
                    match &o.placement {
                        Placement::On(r) => e.on = Some(r.clone()),
                        Placement::Floor(c) => e.floor = Some(*c),
                        Placement::Held(a) => e.held_by = Some(*a),
                    }
                    e
                })
                .collect(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentEntry {
                    nav: a.capability.nav,
                    mani: a.capability.mani,
                    hei: a.capability.hei,
                    x: a.pose.x,
                    y: a.pose.y,
                    rot: a.pose.rot,
                    pitch: a.pose.pitch,
                    held: a.held.clone(),
                    stopped: a.stopped,
                })
                .collect(),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_file()).expect("scene serializes")
    }

    /// SHA-256 over the canonical JSON form of the full scene state.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.to_file()).expect("scene serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn width(&self) -> i32 {
        self.width
    }

    pub fn height(&self) -> i32 {
        self.height
    }

    pub fn rooms(&self) -> &[Room] {
        &self.rooms
    }

    pub fn receptacles(&self) -> &[Receptacle] {
        &self.receptacles
    }

    pub fn objects(&self) -> &[ObjectInstance] {
        &self.objects
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn agent(&self, index: usize) -> Result<&AgentState> {
        self.agents.get(index).ok_or(Error::AgentIndex {
            index,
            count: self.agents.len(),
        })
    }

    pub(crate) fn agent_mut(&mut self, index: usize) -> Result<&mut AgentState> {
        let count = self.agents.len();
        self.agents.get_mut(index).ok_or(Error::AgentIndex { index, count })
    }

    /// Replaces the agent roster. Poses must be on distinct walkable cells.
    pub fn set_agents(&mut self, agents: Vec<AgentState>) -> Result<()> {
        for o in &mut self.objects {
            if matches!(o.placement, Placement::Held(_)) {
                return Err(Error::Domain(format!(
                    "object `{}` is held; cannot replace agents",
                    o.id
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, a) in agents.iter().enumerate() {
            if !self.is_walkable(a.pose.cell()) || !seen.insert(a.pose.cell()) {
                return Err(Error::Domain(format!("agent {i} start {} is invalid", a.pose.cell())));
            }
            if a.held.is_some() {
                return Err(Error::Domain(format!("agent {i} cannot start holding an object")));
            }
        }
        self.agents = agents;
        Ok(())
    }

    pub fn object(&self, id: &str) -> Result<&ObjectInstance> {
        self.object_index
            .get(id)
            .map(|&i| &self.objects[i])
            .ok_or_else(|| Error::Lookup {
                kind: "object",
                name: id.to_string(),
            })
    }

    pub(crate) fn object_mut(&mut self, id: &str) -> Result<&mut ObjectInstance> {
        match self.object_index.get(id) {
            Some(&i) => Ok(&mut self.objects[i]),
            None => Err(Error::Lookup {
                kind: "object",
                name: id.to_string(),
            }),
        }
    }

    pub fn receptacle(&self, id: &str) -> Result<&Receptacle> {
        self.receptacle_index
            .get(id)
            .map(|&i| &self.receptacles[i])
            .ok_or_else(|| Error::Lookup {
                kind: "receptacle",
                name: id.to_string(),
            })
    }

    pub fn cell_kind(&self, c: Cell) -> CellKind {
        if c.x < 0 || c.y < 0 || c.x >= self.width || c.y >= self.height {
            return CellKind::Wall;
        }
        let info = self.cells[(c.y * self.width + c.x) as usize];
        match (info.room, info.receptacle) {
            (None, _) => CellKind::Wall,
            (Some(_), Some(_)) => CellKind::Furniture,
            (Some(_), None) => CellKind::Floor,
        }
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        self.cell_kind(c) == CellKind::Wall
    }

    pub fn is_walkable(&self, c: Cell) -> bool {
        self.cell_kind(c) == CellKind::Floor
    }

    pub fn room_of(&self, c: Cell) -> Option<usize> {
        if c.x < 0 || c.y < 0 || c.x >= self.width || c.y >= self.height {
            return None;
        }
        self.cells[(c.y * self.width + c.x) as usize].room.map(|r| r as usize)
    }

    pub fn receptacle_at(&self, c: Cell) -> Option<&Receptacle> {
        if c.x < 0 || c.y < 0 || c.x >= self.width || c.y >= self.height {
            return None;
        }
        self.cells[(c.y * self.width + c.x) as usize]
            .receptacle
            .map(|r| &self.receptacles[r as usize])
    }

    pub fn agent_at(&self, c: Cell) -> Option<usize> {
        self.agents.iter().position(|a| a.pose.cell() == c)
    }

    pub fn walkable_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| Cell::new(x, y)))
            .filter(|&c| self.is_walkable(c))
            .collect()
    }

    /// Static walkability grid (walls and furniture blocked, agents ignored).
    pub fn nav_grid(&self) -> NavGrid {
        let mut grid = NavGrid::new(self.width, self.height);
        for c in self.walkable_cells() {
            grid.set(c, true);
        }
        grid
    }

    /// Cell an object is located at; held objects report their holder's cell.
    pub fn object_cell(&self, obj: &ObjectInstance) -> Cell {
        match &obj.placement {
            Placement::On(r) => self.receptacle(r).map(|r| r.anchor()).unwrap_or(Cell::new(0, 0)),
            Placement::Floor(c) => *c,
            Placement::Held(a) => self.agents[*a].pose.cell(),
        }
    }

    /// Cells an agent may look at to see the object (receptacle footprint or floor cell).
    pub fn object_footprint(&self, obj: &ObjectInstance) -> Vec<Cell> {
        match &obj.placement {
            Placement::On(r) => self.receptacle(r).map(|r| r.footprint().collect()).unwrap_or_default(),
            Placement::Floor(c) => vec![*c],
            Placement::Held(_) => Vec::new(),
        }
    }

    pub fn object_height(&self, obj: &ObjectInstance) -> HeightClass {
        match &obj.placement {
            Placement::On(r) => self.receptacle(r).map(|r| r.height).unwrap_or(HeightClass::Low),
            _ => HeightClass::Floor,
        }
    }

    pub fn placement_room(&self, placement: &Placement) -> Option<usize> {
        match placement {
            Placement::On(r) => self.receptacle(r).ok().map(|r| r.room),
            Placement::Floor(c) => self.room_of(*c),
            Placement::Held(_) => None,
        }
    }

    /// Type-level `(object type, receptacle type or Floor, room)`; `None` while held.
    pub fn object_triple(&self, obj: &ObjectInstance) -> Option<(String, String, RoomType)> {
        let room = self.placement_room(&obj.placement)?;
        let p = match &obj.placement {
            Placement::On(r) => self.receptacle(r).ok()?.kind.clone(),
            Placement::Floor(_) => FLOOR.to_string(),
            Placement::Held(_) => return None,
        };
        Some((obj.kind.clone(), p, self.rooms[room].room_type))
    }

    pub fn is_pickupable(&self, obj: &ObjectInstance) -> bool {
        self.pickupable.contains(&obj.kind)
    }

    pub fn type_height(&self, kind: &str) -> HeightClass {
        self.heights.get(kind).copied().unwrap_or(HeightClass::Low)
    }

    /// Applies a placement directly (task generation and replays), bypassing agents.
    pub fn relocate(&mut self, object_id: &str, placement: Placement) -> Result<()> {
        match &placement {
            Placement::On(r) => {
                self.receptacle(r)?;
            }
            Placement::Floor(c) => {
                if !self.is_walkable(*c) {
                    return Err(Error::Domain(format!("floor cell {c} is not walkable")));
                }
            }
            Placement::Held(_) => return Err(Error::Domain("relocation cannot put an object in a hand".into())),
        }
        let obj = self.object_mut(object_id)?;
        if matches!(obj.placement, Placement::Held(_)) {
            return Err(Error::Domain(format!("object `{object_id}` is held")));
        }
        obj.placement = placement;
        Ok(())
    }
}

pub fn load_scene(path: impl AsRef<Path>, kb: &Ontology) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scene::from_toml_str(&text, kb)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scene.to_toml_string()).map_err(|e| Error::io(path, e))
}
