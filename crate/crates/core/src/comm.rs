//! Handshake-based group communication and the baseline protocols.
//!
//! Each agent turns its runtime state into a fixed-layout [`StateFeature`],
//! projects it into query/key/value/inter vectors, and the team's
//! query/key products form a row-stochastic attention matrix `T`. Strong
//! entries of `T` define implicit groups; group members exchange weighted
//! values and each group receives one inter-group vector.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::Detection;
use crate::world::{CapabilityVector, Pose};

/// Default message vector width.
pub const DEFAULT_D: usize = 16;
/// Default state feature width.
pub const DEFAULT_D_SF: usize = 24;
pub const DEFAULT_MU: f64 = 0.2;
pub const DEFAULT_DELTA: f64 = 0.8;
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

/// Positions in the state feature vector.
pub mod layout {
    pub const NAV: usize = 0;
    pub const MANI: usize = 1;
    pub const HEI: usize = 2;
    pub const X: usize = 3;
    pub const Y: usize = 4;
    pub const ROT: usize = 5;
    pub const NEW_DETECTION: usize = 6;
    /// Newest detection's object type index + 1 (0 = none).
    pub const DET_TYPE: usize = 7;
    pub const DET_FLAG: usize = 8;
    pub const STALENESS: usize = 9;
    /// Target receptacle type index + 1 (0 = none).
    pub const TARGET_RECEPTACLE: usize = 10;
    /// Target room index + 1 (0 = none).
    pub const TARGET_ROOM: usize = 11;
    pub const TARGET_KNOWN: usize = 12;
    /// BFS distance to the nearest frontier, or -1 when none is left.
    pub const FRONTIER_DISTANCE: usize = 13;
    pub const UNEXPLORED: usize = 14;
    pub const HOLDING: usize = 15;
    /// Pitch in units of 30°.
    pub const PITCH: usize = 16;
    pub const STOPPED: usize = 17;
    pub const PENDING: usize = 18;
    /// 0 = Explore, 1 = Place.
    pub const SUBTASK_KIND: usize = 19;
    /// Place object's type index + 1 (0 = none).
    pub const SUBTASK_OBJECT: usize = 20;
    pub const LAST_SUCCESS: usize = 21;
    pub const ROUND: usize = 22;
    pub const BIAS: usize = 23;
    /// Minimum `d_sf` that holds the layout.
    pub const WIDTH: usize = 24;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateFeature {
    pub values: Vec<f64>,
}

impl StateFeature {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values.get(i).copied().unwrap_or(0.0)
    }
}

/// Everything [`featurize_state`] reads about one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInput {
    pub capability: CapabilityVector,
    pub pose: Pose,
    pub tracker: DetectionTracker,
    /// `(receptacle type index, room index, instance known)`.
    pub target: Option<(usize, usize, bool)>,
    pub frontier_distance: Option<u32>,
    pub unexplored_fraction: f64,
    pub holding: bool,
    pub stopped: bool,
    pub pending: usize,
    pub place_object_type: Option<usize>,
    pub last_success: bool,
    pub round: usize,
}

/// Detector summary carried between rounds: newest detection and staleness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DetectionTracker {
    pub fresh: bool,
    /// `(object type index, det)` of the newest detection.
    pub newest: Option<(usize, bool)>,
    /// Rounds since the last new detection.
    pub staleness: u32,
}

impl DetectionTracker {
    /// Advances one round. `new` holds this round's newly detected misplaced objects.
    pub fn advance(&mut self, new: &[(usize, bool)]) {
        match new.last() {
            Some(&latest) => {
                self.fresh = true;
                self.newest = Some(latest);
                self.staleness = 0;
            }
            None => {
                if self.fresh || self.newest.is_some() {
                    self.staleness += 1;
                }
                self.fresh = false;
            }
        }
    }
}

pub fn featurize_state(input: &FeatureInput, d_sf: usize) -> Result<StateFeature> {
    use layout::*;
    if d_sf < WIDTH {
        return Err(Error::Shape(format!(
            "d_sf = {d_sf} is smaller than the {WIDTH}-entry layout"
        )));
    }
    let mut v = vec![0.0; d_sf];
    let [nav, mani, hei] = input.capability.as_bits();
    v[NAV] = nav;
    v[MANI] = mani;
    v[HEI] = hei;
    v[X] = input.pose.x as f64;
    v[Y] = input.pose.y as f64;
    v[ROT] = input.pose.rot.quarter() as f64;
    v[NEW_DETECTION] = input.tracker.fresh as u8 as f64;
    if let Some((t, det)) = input.tracker.newest {
        v[DET_TYPE] = (t + 1) as f64;
        v[DET_FLAG] = det as u8 as f64;
    }
    v[STALENESS] = input.tracker.staleness as f64;
    if let Some((rec, room, known)) = input.target {
        v[TARGET_RECEPTACLE] = (rec + 1) as f64;
        v[TARGET_ROOM] = (room + 1) as f64;
        v[TARGET_KNOWN] = known as u8 as f64;
    }
    v[FRONTIER_DISTANCE] = input.frontier_distance.map_or(-1.0, |d| d as f64);
    v[UNEXPLORED] = input.unexplored_fraction;
    v[HOLDING] = input.holding as u8 as f64;
    v[PITCH] = (input.pose.pitch.degrees() / 30) as f64;
    v[STOPPED] = input.stopped as u8 as f64;
    v[PENDING] = input.pending as f64;
    if let Some(t) = input.place_object_type {
        v[SUBTASK_KIND] = 1.0;
        v[SUBTASK_OBJECT] = (t + 1) as f64;
    }
    v[LAST_SUCCESS] = input.last_success as u8 as f64;
    v[ROUND] = input.round as f64;
    v[BIAS] = 1.0;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("state feature"));
    }
    Ok(StateFeature { values: v })
}

/// The four linear maps `θ^q, θ^k, θ^v, θ^e`, each `d × d_sf`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generators {
    pub d: usize,
    pub d_sf: usize,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub inter: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GeneratorPreset {
    /// Hand-set weights: fresh detectors are useful senders to manipulators,
    /// explorers attend to each other, manipulators attend to themselves.
    Semantic,
    Random {
        seed: u64,
    },
}

/// Explorer-to-explorer query/key weight.
const EXPLORER_AFFINITY: f64 = 2.0;
/// Manipulator self weight; `a² / 4` is the raw self score at `d = 16`.
const MANIPULATOR_AFFINITY: f64 = 2.5;
/// Query weight on the fresh-detection flag.
const FRESH_WEIGHT: f64 = 8.0;

impl Generators {
    pub fn zeros(d: usize, d_sf: usize) -> Generators {
        Generators {
            d,
            d_sf,
            query: vec![0.0; d * d_sf],
            key: vec![0.0; d * d_sf],
            value: vec![0.0; d * d_sf],
            inter: vec![0.0; d * d_sf],
        }
    }

    pub fn from_preset(preset: GeneratorPreset, d: usize, d_sf: usize) -> Result<Generators> {
        match preset {
            GeneratorPreset::Semantic => Generators::semantic(d, d_sf),
            GeneratorPreset::Random { seed } => Ok(Generators::random(d, d_sf, seed)),
        }
    }

    pub fn semantic(d: usize, d_sf: usize) -> Result<Generators> {
        use layout::*;
        if d < 4 || d_sf < WIDTH {
            return Err(Error::Shape(format!(
                "semantic generators need d ≥ 4 and d_sf ≥ {WIDTH}, got {d} × {d_sf}"
            )));
        }
        let mut g = Generators::zeros(d, d_sf);
        let at = |row: usize, col: usize| row * d_sf + col;
        g.query[at(0, NEW_DETECTION)] = FRESH_WEIGHT;
        g.key[at(0, MANI)] = 1.0;
        for m in [&mut g.query, &mut g.key] {
            m[at(2, BIAS)] = EXPLORER_AFFINITY;
            m[at(2, MANI)] = -EXPLORER_AFFINITY;
            m[at(3, MANI)] = MANIPULATOR_AFFINITY;
        }
        // values and inter vectors carry the detector and predictor summaries
        for (row, col) in [
            NEW_DETECTION,
            DET_TYPE,
            DET_FLAG,
            STALENESS,
            TARGET_RECEPTACLE,
            TARGET_ROOM,
            TARGET_KNOWN,
            X,
            Y,
        ]
        .into_iter()
        .enumerate()
        {
            if row < d {
                g.value[at(row, col)] = 1.0;
                g.inter[at(row, col)] = 1.0;
            }
        }
        Ok(g)
    }

    pub fn random(d: usize, d_sf: usize, seed: u64) -> Generators {
        let mut rng = crate::rng_from_seed(seed);
        let scale = 1.0 / (d_sf as f64).sqrt();
        let mut fill = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect() };
        let n = d * d_sf;
        Generators {
            d,
            d_sf,
            query: fill(n),
            key: fill(n),
            value: fill(n),
            inter: fill(n),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.d * self.d_sf;
        if [&self.query, &self.key, &self.value, &self.inter]
            .iter()
            .any(|m| m.len() != n)
        {
            return Err(Error::Shape(format!(
                "generator matrices must have {} × {} entries",
                self.d, self.d_sf
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommVectors {
    pub qry: Vec<f64>,
    pub key: Vec<f64>,
    pub val: Vec<f64>,
    pub inv: Vec<f64>,
}

fn mat_vec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn make_vectors(sf: &StateFeature, gens: &Generators) -> Result<CommVectors> {
    gens.check()?;
    if sf.dim() != gens.d_sf {
        return Err(Error::Shape(format!(
            "state feature has {} entries, generators expect {}",
            sf.dim(),
            gens.d_sf
        )));
    }
    let (d, n) = (gens.d, gens.d_sf);
    Ok(CommVectors {
        qry: mat_vec(&gens.query, d, n, &sf.values),
        key: mat_vec(&gens.key, d, n, &sf.values),
        val: mat_vec(&gens.value, d, n, &sf.values),
        inv: mat_vec(&gens.inter, d, n, &sf.values),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommMatrix {
    /// `raw[i][j] = qry_j · key_i / √d`: how useful `j`'s message is to `i`.
    pub raw: Vec<Vec<f64>>,
    /// Row-wise softmax of `raw`.
    pub t: Vec<Vec<f64>>,
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn attention_matrix(vectors: &[CommVectors]) -> Result<CommMatrix> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::Shape("attention over an empty team".into()));
    }
    let d = vectors[0].qry.len();
    if vectors.iter().any(|v| v.qry.len() != d || v.key.len() != d) {
        return Err(Error::Shape("query/key widths differ across agents".into()));
    }
    if vectors
        .iter()
        .flat_map(|v| v.qry.iter().chain(&v.key))
        .any(|x| !x.is_finite())
    {
        return Err(Error::NonFinite("query/key vectors"));
    }
    let scale = (d.max(1) as f64).sqrt();
    let raw: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    vectors[j]
                        .qry
                        .iter()
                        .zip(&vectors[i].key)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / scale
                })
                .collect()
        })
        .collect();
    if raw.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention scores"));
    }
    let t = raw.iter().map(|r| softmax_row(r)).collect();
    Ok(CommMatrix { raw, t })
}

/// Whether agent `i` takes messages this round.
pub fn is_receptive(t: &[Vec<f64>], i: usize, delta: f64) -> bool {
    t[i][i] < delta
}

/// Implicit groups: connected components of the graph with an edge `{i, j}`
/// whenever a receptive agent attends to the other above `mu`. Groups are
/// sorted by their smallest member.
pub fn partition_groups(t: &[Vec<f64>], delta: f64, mu: f64) -> Result<Vec<Vec<usize>>> {
    if !(0.0 < mu && mu < delta && delta < 1.0) {
        return Err(Error::Threshold(format!(
            "need 0 < μ < δ < 1, got μ = {mu}, δ = {delta}"
        )));
    }
    let n = t.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let edge = (t[i][j] > mu && is_receptive(t, i, delta)) || (t[j][i] > mu && is_receptive(t, j, delta));
            if edge {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(i);
    }
    Ok(groups)
}

/// `Σ_{j ≠ i, T[i][j] > μ} T[i][j] · val_j`, plus the contributing senders.
pub fn aggregate_intra(t: &[Vec<f64>], vals: &[Vec<f64>], mu: f64, i: usize) -> (Vec<f64>, Vec<usize>) {
    let d = vals.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    let mut from = Vec::new();
    for (j, val) in vals.iter().enumerate() {
        if j == i || t[i][j] <= mu {
            continue;
        }
        from.push(j);
        for (o, v) in out.iter_mut().zip(val) {
            *o += t[i][j] * v;
        }
    }
    (out, from)
}

/// The inter-group vector: `inv_j` of the outside agent `j` that `i`'s group
/// attends to most on average (ties to the lowest index), or `None` when
/// there is no other group.
pub fn aggregate_inter(
    t: &[Vec<f64>],
    invs: &[Vec<f64>],
    groups: &[Vec<usize>],
    i: usize,
) -> Option<(usize, Vec<f64>)> {
    let group = groups.iter().find(|g| g.contains(&i))?;
    let mut best: Option<(usize, f64)> = None;
    for j in (0..t.len()).filter(|j| !group.contains(j)) {
        let score = group.iter().map(|&g| t[g][j]).sum::<f64>() / group.len() as f64;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((j, score));
        }
    }
    best.map(|(j, _)| (j, invs[j].clone()))
}

/// Training-mode dense aggregation over all agents, including `i` itself:
/// `inn = Σ_j T[i][j] val_j`, `int = Σ_j (1 − T[i][j]) inv_j`.
pub fn soft_aggregate(t: &[Vec<f64>], vals: &[Vec<f64>], invs: &[Vec<f64>], i: usize) -> (Vec<f64>, Vec<f64>) {
    let d = vals.first().map_or(0, Vec::len);
    let mut inn = vec![0.0; d];
    let mut int = vec![0.0; d];
    for j in 0..t.len() {
        for k in 0..d {
            inn[k] += t[i][j] * vals[j][k];
            int[k] += (1.0 - t[i][j]) * invs[j][k];
        }
    }
    (inn, int)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    HanGrCom,
    CondComm,
    CmprComm,
    IntenComm,
    BroadComm,
    CentralComm,
    NoComm,
}

impl Protocol {
    pub const ALL: [Protocol; 7] = [
        Protocol::HanGrCom,
        Protocol::CondComm,
        Protocol::CmprComm,
        Protocol::IntenComm,
        Protocol::BroadComm,
        Protocol::CentralComm,
        Protocol::NoComm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::HanGrCom => "HanGrCom",
            Protocol::CondComm => "CondComm",
            Protocol::CmprComm => "CmprComm",
            Protocol::IntenComm => "IntenComm",
            Protocol::BroadComm => "BroadComm",
            Protocol::CentralComm => "CentralComm",
            Protocol::NoComm => "NoComm",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Protocol> {
        let key = s.to_ascii_lowercase().replace(['-', '_', '.'], "");
        let key = key.strip_suffix("comm").unwrap_or(&key);
        Ok(match key {
            "hangr" | "hangrcom" | "ours" => Protocol::HanGrCom,
            "cond" => Protocol::CondComm,
            "cmpr" => Protocol::CmprComm,
            "inten" => Protocol::IntenComm,
            "broad" => Protocol::BroadComm,
            "central" => Protocol::CentralComm,
            "no" | "none" => Protocol::NoComm,
            _ => {
                return Err(Error::Lookup {
                    kind: "protocol",
                    name: s.to_string(),
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadSizes {
    pub state: u64,
    pub map: u64,
    pub compressed_map: u64,
}

impl Default for PayloadSizes {
    fn default() -> Self {
        PayloadSizes {
            state: 10,
            map: 400,
            compressed_map: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommConfig {
    pub d: usize,
    pub d_sf: usize,
    pub mu: f64,
    pub delta: f64,
    pub generators: GeneratorPreset,
    pub payload: PayloadSizes,
}

impl Default for CommConfig {
    fn default() -> Self {
        CommConfig {
            d: DEFAULT_D,
            d_sf: DEFAULT_D_SF,
            mu: DEFAULT_MU,
            delta: DEFAULT_DELTA,
            generators: GeneratorPreset::Semantic,
            payload: PayloadSizes::default(),
        }
    }
}

impl CommConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.mu && self.mu < self.delta && self.delta < 1.0) {
            return Err(Error::Threshold(format!(
                "need 0 < μ < δ < 1, got μ = {}, δ = {}",
                self.mu, self.delta
            )));
        }
        if self.d == 0 || self.d_sf < layout::WIDTH {
            return Err(Error::Config(format!(
                "d = {} must be positive and d_sf = {} at least {}",
                self.d,
                self.d_sf,
                layout::WIDTH
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadKind {
    Query,
    State,
    Map,
    CompressedMap,
    Value,
    InterGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Receiver {
    Agent(usize),
    /// Relayed through the virtual central node.
    ViaCenter(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommMessage {
    pub protocol: Protocol,
    pub sender: usize,
    pub receiver: Receiver,
    pub kind: PayloadKind,
    pub dims: u64,
}

/// What one agent received in a round.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Inbox {
    /// Senders whose state and full map arrived.
    pub full: Vec<usize>,
    /// Senders whose state and compressed map arrived.
    pub compressed: Vec<usize>,
    /// Senders whose state alone arrived.
    pub state: Vec<usize>,
    /// Inter-group sender.
    pub inter: Option<usize>,
    pub inn: Option<Vec<f64>>,
    pub int: Option<Vec<f64>>,
    /// Sub-tasks come from the central node this round.
    pub central: bool,
    pub dims: u64,
}

impl Inbox {
    /// Every sender whose state is known to the receiver.
    pub fn peers(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self
            .full
            .iter()
            .chain(&self.compressed)
            .chain(&self.state)
            .copied()
            .collect();
        p.sort_unstable();
        p.dedup();
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundComm {
    pub inboxes: Vec<Inbox>,
    pub messages: Vec<CommMessage>,
    pub matrix: Option<CommMatrix>,
    pub groups: Option<Vec<Vec<usize>>>,
    pub total: u64,
}

/// One communication round for the whole team.
///
/// `fresh[i]` tells whether agent `i` detected a new misplaced object this round.
pub fn run_protocol(
    protocol: Protocol,
    features: &[StateFeature],
    fresh: &[bool],
    gens: &Generators,
    cfg: &CommConfig,
) -> Result<RoundComm> {
    let n = features.len();
    if fresh.len() != n {
        return Err(Error::Shape("one fresh flag per agent required".into()));
    }
    let mut out = RoundComm {
        inboxes: vec![Inbox::default(); n],
        messages: Vec::new(),
        matrix: None,
        groups: None,
        total: 0,
    };
    let p = cfg.payload;
    let send = |out: &mut RoundComm, sender: usize, receiver: Receiver, kind: PayloadKind| {
        let dims = match kind {
            PayloadKind::State => p.state,
            PayloadKind::Map => p.map,
            PayloadKind::CompressedMap => p.compressed_map,
            PayloadKind::Query | PayloadKind::Value | PayloadKind::InterGroup => gens.d as u64,
        };
        let to = match receiver {
            Receiver::Agent(j) | Receiver::ViaCenter(j) => j,
        };
        out.inboxes[to].dims += dims;
        out.total += dims;
        out.messages.push(CommMessage {
            protocol,
            sender,
            receiver,
            kind,
            dims,
        });
    };
    let others = |i: usize| (0..n).filter(move |&j| j != i);

    match protocol {
        Protocol::NoComm => {}
        Protocol::BroadComm | Protocol::CentralComm => {
            let central = protocol == Protocol::CentralComm;
            for i in 0..n {
                for j in others(i) {
                    let to = if central {
                        Receiver::ViaCenter(j)
                    } else {
                        Receiver::Agent(j)
                    };
                    send(&mut out, i, to, PayloadKind::State);
                    send(&mut out, i, to, PayloadKind::Map);
                    out.inboxes[j].full.push(i);
                    out.inboxes[j].central = central;
                }
            }
        }
        Protocol::CondComm => {
            for i in (0..n).filter(|&i| fresh[i]) {
                for j in others(i) {
                    send(&mut out, i, Receiver::Agent(j), PayloadKind::State);
                    send(&mut out, i, Receiver::Agent(j), PayloadKind::Map);
                    out.inboxes[j].full.push(i);
                }
            }
        }
        Protocol::CmprComm => {
            for i in 0..n {
                for j in others(i) {
                    send(&mut out, i, Receiver::Agent(j), PayloadKind::State);
                    send(&mut out, i, Receiver::Agent(j), PayloadKind::CompressedMap);
                    out.inboxes[j].compressed.push(i);
                }
            }
        }
        Protocol::IntenComm => {
            for i in 0..n {
                for j in others(i) {
                    send(&mut out, i, Receiver::Agent(j), PayloadKind::State);
                    out.inboxes[j].state.push(i);
                }
            }
        }
        Protocol::HanGrCom => {
            cfg.validate()?;
            let vectors = features
                .iter()
                .map(|sf| make_vectors(sf, gens))
                .collect::<Result<Vec<_>>>()?;
            for i in 0..n {
                for j in others(i) {
                    send(&mut out, i, Receiver::Agent(j), PayloadKind::Query);
                }
            }
            let matrix = attention_matrix(&vectors)?;
            let groups = partition_groups(&matrix.t, cfg.delta, cfg.mu)?;
            let vals: Vec<Vec<f64>> = vectors.iter().map(|v| v.val.clone()).collect();
            let invs: Vec<Vec<f64>> = vectors.iter().map(|v| v.inv.clone()).collect();
            for i in 0..n {
                if !is_receptive(&matrix.t, i, cfg.delta) {
                    continue;
                }
                let (inn, from) = aggregate_intra(&matrix.t, &vals, cfg.mu, i);
                for &j in &from {
                    send(&mut out, j, Receiver::Agent(i), PayloadKind::Value);
                }
                out.inboxes[i].full = from;
                out.inboxes[i].inn = Some(inn);
                if let Some((j, inv)) = aggregate_inter(&matrix.t, &invs, &groups, i) {
                    send(&mut out, j, Receiver::Agent(i), PayloadKind::InterGroup);
                    out.inboxes[i].inter = Some(j);
                    out.inboxes[i].int = Some(inv);
                }
            }
            out.matrix = Some(matrix);
            out.groups = Some(groups);
        }
    }
    Ok(out)
}

/// Per-agent, per-round dimensions of the fixed-payload protocols.
pub fn closed_form_dims(protocol: Protocol, n: usize, p: PayloadSizes) -> Option<u64> {
    let peers = n.saturating_sub(1) as u64;
    match protocol {
        Protocol::BroadComm | Protocol::CentralComm => Some(peers * (p.state + p.map)),
        Protocol::CmprComm => Some(peers * (p.state + p.compressed_map)),
        Protocol::IntenComm => Some(peers * p.state),
        Protocol::NoComm => Some(0),
        Protocol::HanGrCom | Protocol::CondComm => None,
    }
}

/// Detections a sender shares through an inter-group vector: its misplaced ones.
pub fn inter_group_payload(detections: &[Detection]) -> Vec<Detection> {
    detections.iter().filter(|d| d.det).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Heading;

    fn feature(mani: bool, fresh: bool) -> StateFeature {
        let input = FeatureInput {
            capability: CapabilityVector::new(true, mani, true),
            pose: Pose::new(3, 4, Heading::South),
            tracker: DetectionTracker {
                fresh,
                newest: fresh.then_some((2, true)),
                staleness: 0,
            },
            target: None,
            frontier_distance: Some(5),
            unexplored_fraction: 0.5,
            holding: false,
            stopped: false,
            pending: 0,
            place_object_type: None,
            last_success: true,
            round: 0,
        };
        featurize_state(&input, DEFAULT_D_SF).unwrap()
    }

    #[test]
    fn fresh_agent_has_no_detection_summary() {
        let sf = feature(true, false);
        assert_eq!(sf.get(layout::NEW_DETECTION), 0.0);
        assert_eq!(sf.get(layout::STALENESS), 0.0);
        assert_eq!(sf, feature(true, false));
    }

    #[test]
    fn detection_is_read_back_from_layout() {
        let mut tracker = DetectionTracker::default();
        tracker.advance(&[(7, true)]);
        assert_eq!(tracker.newest, Some((7, true)));
        assert!(tracker.fresh);
        tracker.advance(&[]);
        tracker.advance(&[]);
        assert_eq!(tracker.staleness, 2);
        assert!(!tracker.fresh);
        let sf = feature(false, true);
        assert_eq!(sf.get(layout::NEW_DETECTION), 1.0);
        assert_eq!(sf.get(layout::DET_TYPE), 3.0);
    }

    #[test]
    fn unit_feature_picks_generator_column() {
        let mut g = Generators::zeros(4, 24);
        for r in 0..4 {
            g.query[r * 24 + r] = 1.0;
        }
        let mut sf = StateFeature { values: vec![0.0; 24] };
        sf.values[2] = 1.0;
        let v = make_vectors(&sf, &g).unwrap();
        assert_eq!(v.qry, vec![0.0, 0.0, 1.0, 0.0]);
        let zero = make_vectors(&StateFeature { values: vec![0.0; 24] }, &Generators::random(4, 24, 1)).unwrap();
        assert!(zero.qry.iter().chain(&zero.inv).all(|&x| x == 0.0));
        assert!(make_vectors(&StateFeature { values: vec![0.0; 5] }, &g).is_err());
    }

    #[test]
    fn zero_vectors_give_uniform_rows() {
        let v = CommVectors {
            qry: vec![0.0; 4],
            key: vec![0.0; 4],
            val: vec![0.0; 4],
            inv: vec![0.0; 4],
        };
        let m = attention_matrix(&[v.clone(), v.clone(), v]).unwrap();
        for row in &m.t {
            for &x in row {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let single = attention_matrix(&[CommVectors {
            qry: vec![1.0; 4],
            key: vec![2.0; 4],
            val: vec![0.0; 4],
            inv: vec![0.0; 4],
        }])
        .unwrap();
        assert_eq!(single.t, vec![vec![1.0]]);
    }

    #[test]
    fn two_agent_fixture_matches_hand_softmax() {
        let a = CommVectors {
            qry: vec![1.0, 0.0, 2.0, 0.0],
            key: vec![0.0, 1.0, 1.0, 0.0],
            val: vec![0.0; 4],
            inv: vec![0.0; 4],
        };
        let b = CommVectors {
            qry: vec![0.0, 3.0, 0.0, 1.0],
            key: vec![1.0, 0.0, 0.0, 2.0],
            val: vec![0.0; 4],
            inv: vec![0.0; 4],
        };
        let m = attention_matrix(&[a, b]).unwrap();
        // raw[0] = [q0·k0, q1·k0] / 2 = [2, 3] / 2 ; raw[1] = [q0·k1, q1·k1] / 2 = [1, 2] / 2
        let e = |x: f64| x.exp();
        let t00 = e(1.0) / (e(1.0) + e(1.5));
        let t10 = e(0.5) / (e(0.5) + e(1.0));
        assert!((m.t[0][0] - t00).abs() < 1e-9);
        assert!((m.t[1][0] - t10).abs() < 1e-9);
        assert!((m.t[0][1] - (1.0 - t00)).abs() < 1e-9);
    }

    #[test]
    fn grouping_examples() {
        let t = vec![
            vec![0.5, 0.4, 0.05, 0.05],
            vec![0.4, 0.5, 0.05, 0.05],
            vec![0.05, 0.05, 0.5, 0.4],
            vec![0.05, 0.05, 0.4, 0.5],
        ];
        assert_eq!(partition_groups(&t, 0.8, 0.2).unwrap(), vec![vec![0, 1], vec![2, 3]]);
        let uniform = vec![vec![1.0 / 3.0; 3]; 3];
        assert_eq!(partition_groups(&uniform, 0.8, 0.2).unwrap(), vec![vec![0, 1, 2]]);
        let ident = vec![vec![0.9, 0.05, 0.05], vec![0.05, 0.9, 0.05], vec![0.05, 0.05, 0.9]];
        assert_eq!(
            partition_groups(&ident, 0.8, 0.2).unwrap(),
            vec![vec![0], vec![1], vec![2]]
        );
        assert!(partition_groups(&ident, 0.2, 0.8).is_err());
    }

    #[test]
    fn intra_and_inter_examples() {
        let t = vec![
            vec![0.5, 0.3, 0.15, 0.05],
            vec![0.3, 0.5, 0.15, 0.05],
            vec![0.05, 0.05, 0.5, 0.4],
            vec![0.05, 0.05, 0.4, 0.5],
        ];
        let vals: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 + 1.0, 1.0]).collect();
        let (inn, from) = aggregate_intra(&t, &vals, 0.2, 0);
        assert_eq!(from, vec![1]);
        assert_eq!(inn, vec![0.3 * 2.0, 0.3]);
        let groups = partition_groups(&t, 0.8, 0.2).unwrap();
        let (j, inv) = aggregate_inter(&t, &vals, &groups, 0).unwrap();
        assert_eq!((j, inv), (2, vals[2].clone()));
        let tie = vec![
            vec![0.5, 0.3, 0.1, 0.1],
            vec![0.3, 0.5, 0.1, 0.1],
            vec![0.05, 0.05, 0.5, 0.4],
            vec![0.05, 0.05, 0.4, 0.5],
        ];
        assert_eq!(aggregate_inter(&tie, &vals, &groups, 0).unwrap().0, 2);
        let all = vec![vec![0, 1, 2, 3]];
        assert!(aggregate_inter(&t, &vals, &all, 0).is_none());
        let none = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        assert_eq!(aggregate_intra(&none, &vals[..2], 0.2, 0).0, vec![0.0, 0.0]);
    }

    #[test]
    fn soft_aggregate_examples() {
        let v = vec![vec![2.0, -1.0]; 3];
        let t = vec![vec![1.0 / 3.0; 3]; 3];
        let (inn, _) = soft_aggregate(&t, &v, &v, 1);
        assert!((inn[0] - 2.0).abs() < 1e-12 && (inn[1] + 1.0).abs() < 1e-12);
        let (inn, int) = soft_aggregate(&[vec![1.0]], &[vec![4.0]], &[vec![5.0]], 0);
        assert_eq!((inn, int), (vec![4.0], vec![0.0]));
    }

    #[test]
    fn fixed_payload_ledgers_match_closed_forms() {
        let gens = Generators::semantic(DEFAULT_D, DEFAULT_D_SF).unwrap();
        let cfg = CommConfig::default();
        for n in [3usize, 4] {
            let feats: Vec<StateFeature> = (0..n).map(|i| feature(i == n - 1, false)).collect();
            let fresh = vec![false; n];
            for p in [
                Protocol::BroadComm,
                Protocol::CentralComm,
                Protocol::CmprComm,
                Protocol::IntenComm,
                Protocol::NoComm,
            ] {
                let round = run_protocol(p, &feats, &fresh, &gens, &cfg).unwrap();
                let per_agent = closed_form_dims(p, n, cfg.payload).unwrap();
                assert_eq!(round.total, per_agent * n as u64, "{p} N={n}");
                assert!(round.inboxes.iter().all(|b| b.dims == per_agent));
            }
        }
        assert_eq!(
            closed_form_dims(Protocol::BroadComm, 3, PayloadSizes::default()),
            Some(820)
        );
        assert_eq!(
            closed_form_dims(Protocol::CmprComm, 4, PayloadSizes::default()),
            Some(330)
        );
        assert_eq!(
            closed_form_dims(Protocol::IntenComm, 4, PayloadSizes::default()),
            Some(30)
        );
    }

    #[test]
    fn cond_comm_only_sends_on_fresh_detections() {
        let gens = Generators::semantic(DEFAULT_D, DEFAULT_D_SF).unwrap();
        let feats: Vec<StateFeature> = (0..3).map(|i| feature(i == 2, i == 0)).collect();
        let r = run_protocol(
            Protocol::CondComm,
            &feats,
            &[true, false, false],
            &gens,
            &CommConfig::default(),
        )
        .unwrap();
        assert_eq!(r.total, 2 * 410);
        assert_eq!(r.inboxes[1].full, vec![0]);
        assert!(r.inboxes[0].full.is_empty());
    }

    #[test]
    fn semantic_preset_groups_explorers_and_routes_fresh_detections() {
        let gens = Generators::semantic(DEFAULT_D, DEFAULT_D_SF).unwrap();
        let cfg = CommConfig::default();
        let quiet = vec![feature(false, false), feature(false, false), feature(true, false)];
        let r = run_protocol(Protocol::HanGrCom, &quiet, &[false; 3], &gens, &cfg).unwrap();
        assert_eq!(r.groups.unwrap(), vec![vec![0, 1], vec![2]]);
        let busy = vec![feature(false, true), feature(false, false), feature(true, false)];
        let r = run_protocol(Protocol::HanGrCom, &busy, &[true, false, false], &gens, &cfg).unwrap();
        assert!(r.inboxes[2].full.contains(&0));
    }

    #[test]
    fn protocol_names_parse() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
        }
        assert_eq!("broad".parse::<Protocol>().unwrap(), Protocol::BroadComm);
        assert!("carrier-pigeon".parse::<Protocol>().is_err());
    }
}
