//! Placement ontology and the reasonable-placement discriminator.
//!
//! An [`Ontology`] lists every object type (with its pickupable/receptacle
//! flags and height class), the four room types, and the set of sanctioned
//! `(object, receptacle, room)` triples. A placement is reasonable iff its
//! type-level triple is in that set. The floor is modelled as the
//! pseudo-receptacle [`FLOOR`], which never appears in a triple.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pseudo-receptacle type for objects resting on the floor.
pub const FLOOR: &str = "Floor";

/// Current version of the ontology file format.
pub const ONTOLOGY_SCHEMA_VERSION: u32 = 1;

const DEFAULT_ONTOLOGY: &str = include_str!("../data/ontology.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RoomType {
    Kitchen,
    LivingRoom,
    Bedroom,
    Bathroom,
}

impl RoomType {
    /// Fixed order, also used for tie-breaking.
    pub const ALL: [RoomType; 4] = [
        RoomType::Kitchen,
        RoomType::LivingRoom,
        RoomType::Bedroom,
        RoomType::Bathroom,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<RoomType> {
        RoomType::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RoomType::Kitchen => "Kitchen",
            RoomType::LivingRoom => "LivingRoom",
            RoomType::Bedroom => "Bedroom",
            RoomType::Bathroom => "Bathroom",
        }
    }
}

impl fmt::Display for RoomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoomType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoomType::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "room type",
                name: s.to_string(),
            })
    }
}

/// Vertical band an entity occupies; drives the height-aware visibility rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeightClass {
    #[serde(rename = "floor-level")]
    Floor,
    #[serde(rename = "low-surface")]
    Low,
    #[serde(rename = "high-surface")]
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectType {
    pub name: String,
    pub pickupable: bool,
    pub receptacle: bool,
    pub height_class: HeightClass,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlacementTriple {
    pub object_type: String,
    pub receptacle_type: String,
    pub room_type: String,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct OntologyFile {
    schema_version: u32,
    room_types: Vec<String>,
    triples: Vec<[String; 3]>,
    object_types: Vec<ObjectType>,
}

/// Immutable placement knowledge base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    object_types: Vec<ObjectType>,
    index: HashMap<String, usize>,
    triples: BTreeSet<(String, String, RoomType)>,
    pickupable: Vec<String>,
    receptacles: Vec<String>,
}

impl Ontology {
    /// The ontology shipped with the crate.
    pub fn builtin() -> Ontology {
        Ontology::from_toml_str(DEFAULT_ONTOLOGY).expect("shipped ontology is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Ontology> {
        let file: OntologyFile = toml::from_str(text).map_err(|e| Error::load("ontology", e))?;
        Ontology::from_file(file)
    }

    fn from_file(file: OntologyFile) -> Result<Ontology> {
        let mut failures = Vec::new();
        if file.schema_version != ONTOLOGY_SCHEMA_VERSION {
            failures.push(format!(
                "unsupported schema_version {} (expected {ONTOLOGY_SCHEMA_VERSION})",
                file.schema_version
            ));
        }
        let expected: Vec<&str> = RoomType::ALL.iter().map(|r| r.name()).collect();
        let mut rooms: Vec<&str> = file.room_types.iter().map(String::as_str).collect();
        rooms.sort_unstable();
        let mut sorted_expected = expected.clone();
        sorted_expected.sort_unstable();
        if rooms != sorted_expected {
            failures.push(format!(
                "room_types must be exactly {expected:?}, found {:?}",
                file.room_types
            ));
        }

        let mut index = HashMap::new();
        for (i, ty) in file.object_types.iter().enumerate() {
            if ty.name == FLOOR {
                failures.push(format!("object type name `{FLOOR}` is reserved"));
            }
            if index.insert(ty.name.clone(), i).is_some() {
                failures.push(format!("duplicate object type `{}`", ty.name));
            }
        }

        let mut triples = BTreeSet::new();
        for [o, p, r] in &file.triples {
            let label = format!("triple ({o}, {p}, {r})");
            let before = failures.len();
            match index.get(o).map(|&i| &file.object_types[i]) {
                None => failures.push(format!("{label}: unknown object type `{o}`")),
                Some(t) if !t.pickupable => failures.push(format!("{label}: `{o}` is not pickupable")),
                Some(_) => {}
            }
            match index.get(p).map(|&i| &file.object_types[i]) {
                None => failures.push(format!("{label}: unknown receptacle type `{p}`")),
                Some(t) if !t.receptacle => failures.push(format!("{label}: `{p}` is not a receptacle")),
                Some(_) => {}
            }
            match r.parse::<RoomType>() {
                Ok(room) if failures.len() == before => {
                    triples.insert((o.clone(), p.clone(), room));
                }
                Ok(_) => {}
                Err(_) => failures.push(format!("{label}: unknown room type `{r}`")),
            }
        }

        for ty in file.object_types.iter().filter(|t| t.pickupable) {
            if !triples.iter().any(|(o, _, _)| *o == ty.name) {
                failures.push(format!("pickupable type `{}` appears in no triple", ty.name));
            }
        }

        if !failures.is_empty() {
            return Err(Error::Validation {
                what: "ontology".into(),
                failures,
            });
        }

        let pickupable = file
            .object_types
            .iter()
            .filter(|t| t.pickupable)
            .map(|t| t.name.clone())
            .collect();
        let receptacles = file
            .object_types
            .iter()
            .filter(|t| t.receptacle)
            .map(|t| t.name.clone())
            .collect();
        Ok(Ontology {
            object_types: file.object_types,
            index,
            triples,
            pickupable,
            receptacles,
        })
    }

    pub fn to_toml_string(&self) -> String {
        let file = OntologyFile {
            schema_version: ONTOLOGY_SCHEMA_VERSION,
            room_types: RoomType::ALL.iter().map(|r| r.name().to_string()).collect(),
            triples: self
                .triples
                .iter()
                .map(|(o, p, r)| [o.clone(), p.clone(), r.name().to_string()])
                .collect(),
            object_types: self.object_types.clone(),
        };
        toml::to_string(&file).expect("ontology serializes")
    }

    pub fn object_types(&self) -> &[ObjectType] {
        &self.object_types
    }

    pub fn object_type(&self, name: &str) -> Result<&ObjectType> {
        self.index
            .get(name)
            .map(|&i| &self.object_types[i])
            .ok_or_else(|| Error::Lookup {
                kind: "object type",
                name: name.to_string(),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Pickupable types in file order; position is the class index used by learned heads.
    pub fn pickupable_types(&self) -> &[String] {
        &self.pickupable
    }

    /// Receptacle types in file order.
    pub fn receptacle_types(&self) -> &[String] {
        &self.receptacles
    }

    pub fn pickupable_index(&self, name: &str) -> Option<usize> {
        self.pickupable.iter().position(|t| t == name)
    }

    pub fn receptacle_index(&self, name: &str) -> Option<usize> {
        self.receptacles.iter().position(|t| t == name)
    }

    /// Index into [`Ontology::object_types`]; the channel of that type in semantic maps.
    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Number of object types (`K_total`).
    pub fn k_total(&self) -> usize {
        self.object_types.len()
    }

    pub fn triples(&self) -> impl Iterator<Item = PlacementTriple> + '_ {
        self.triples.iter().map(|(o, p, r)| PlacementTriple {
            object_type: o.clone(),
            receptacle_type: p.clone(),
            room_type: r.name().to_string(),
        })
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    /// Room types a receptacle type appears with in any triple.
    pub fn rooms_for_receptacle(&self, receptacle_type: &str) -> BTreeSet<RoomType> {
        self.triples
            .iter()
            .filter(|(_, p, _)| p == receptacle_type)
            .map(|(_, _, r)| *r)
            .collect()
    }

    pub fn height_class(&self, name: &str) -> Result<HeightClass> {
        Ok(self.object_type(name)?.height_class)
    }

    /// The discriminator: true iff `(o, p, r)` is a sanctioned triple.
    ///
    /// `p` may be [`FLOOR`], which is known but never reasonable.
    pub fn is_reasonable(&self, o_type: &str, p_type: &str, room: RoomType) -> Result<bool> {
        self.object_type(o_type)?;
        if p_type != FLOOR {
            self.object_type(p_type)?;
        }
        Ok(self.triples.contains(&(o_type.to_string(), p_type.to_string(), room)))
    }

    /// All `(receptacle, room)` pairs sanctioned for `o_type`, sorted by receptacle then room name.
    pub fn candidate_locations(&self, o_type: &str) -> Result<Vec<(String, RoomType)>> {
        let ty = self.object_type(o_type)?;
        if !ty.pickupable {
            return Err(Error::Domain(format!("`{o_type}` is not pickupable")));
        }
        let mut out: Vec<(String, RoomType)> = self
            .triples
            .iter()
            .filter(|(o, _, _)| o == o_type)
            .map(|(_, p, r)| (p.clone(), *r))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.name().cmp(b.1.name())));
        Ok(out)
    }
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ontology::from_toml_str(&text)
}
