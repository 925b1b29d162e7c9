//! The multi-room gridworld: layout, agents, actions and observation.

mod action;
mod geom;
mod nav;
mod scene;
mod visibility;

pub use action::{is_task_complete, Action, Delta, Outcome, StepResult};
pub use geom::{CapabilityVector, Cell, Heading, Pitch, Pose, Rect};
pub use nav::NavGrid;
pub use scene::{
    load_scene, save_scene, AgentEntry, AgentState, CellKind, ObjectEntry, ObjectInstance, Placement, Receptacle,
    ReceptacleEntry, Room, Scene, SceneFile, WorldConfig, SCENE_SCHEMA_VERSION,
};
pub use visibility::{in_frustum, occluded, ray_cells, Observation, SeenObject, SeenReceptacle, Viewer, VisibleCell};

use crate::knowledge::Ontology;

/// Top-down ASCII frame: `#` wall, `=` furniture, `o` tidy object on the
/// floor, `!` misplaced object (on the floor or on furniture), digits for agents.
pub fn render_ascii(scene: &Scene, kb: &Ontology) -> String {
    let mut rows: Vec<Vec<char>> = (0..scene.height())
        .map(|y| {
            (0..scene.width())
                .map(|x| match scene.cell_kind(Cell::new(x, y)) {
                    CellKind::Wall => '#',
                    CellKind::Furniture => '=',
                    CellKind::Floor => '.',
                })
                .collect()
        })
        .collect();
    for obj in scene.objects() {
        if matches!(obj.placement, Placement::Held(_)) {
            continue;
        }
        let c = scene.object_cell(obj);
        let misplaced = !scene.discriminate(&obj.id, kb).unwrap_or(false);
        let glyph = &mut rows[c.y as usize][c.x as usize];
        if misplaced {
            *glyph = '!';
        } else if *glyph == '.' {
            *glyph = 'o';
        }
    }
    for (i, a) in scene.agents().iter().enumerate() {
        let c = a.pose.cell();
        rows[c.y as usize][c.x as usize] = char::from_digit((i % 10) as u32, 10).unwrap_or('@');
    }
    let mut out = String::with_capacity(((scene.width() + 1) * scene.height()) as usize);
    for row in rows {
        out.extend(row);
        out.push('\n');
    }
    out
}

const BUILTIN_SCENES: [(&str, &str); 6] = [
    ("demo2", include_str!("../../data/scenes/demo2.toml")),
    ("apartment3", include_str!("../../data/scenes/apartment3.toml")),
    ("house4", include_str!("../../data/scenes/house4.toml")),
    ("row4", include_str!("../../data/scenes/row4.toml")),
    ("suite2", include_str!("../../data/scenes/suite2.toml")),
    ("studio3", include_str!("../../data/scenes/studio3.toml")),
];

/// Names of the hand-built scenes shipped with the crate.
pub fn builtin_scene_names() -> Vec<&'static str> {
    BUILTIN_SCENES.iter().map(|(n, _)| *n).collect()
}

pub fn builtin_scene(name: &str, kb: &Ontology) -> crate::Result<Scene> {
    let (_, text) = BUILTIN_SCENES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| crate::Error::Lookup {
            kind: "builtin scene",
            name: name.to_string(),
        })?;
    Scene::from_toml_str(text, kb)
}
