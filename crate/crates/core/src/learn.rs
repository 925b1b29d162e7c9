//! Imitation learning with linear multi-head classifiers.
//!
//! Two feature blocks feed the heads: a sub-task block built from the state
//! feature alone, and a sub-goal block that adds the current sub-task and the
//! route planner's next waypoint. Heads are trained per agent slot with plain
//! mini-batch SGD on the composite cross-entropy losses.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::comm::{layout, StateFeature, FEATURE_LAYOUT_VERSION};
use crate::decision::{Ope, RouteHint, SubGoal, SubTask, SUBGOAL_RADIUS};
use crate::error::{Error, Result};
use crate::knowledge::{Ontology, RoomType};
use crate::taskgen::{DemoStep, Demonstration};
use crate::world::CapabilityVector;

pub const MODEL_SCHEMA_VERSION: u32 = 1;
/// Bumped whenever [`subgoal_features`] or [`subtask_features`] change.
pub const POLICY_FEATURE_VERSION: u32 = 1;

const OFFSET_CLASSES: usize = (2 * SUBGOAL_RADIUS + 1) as usize;
pub const SUBGOAL_ARITIES: [usize; 5] = [OFFSET_CLASSES, OFFSET_CLASSES, 4, 4, 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
            delta1: 1.0,
            delta2: 1.0,
            theta1: 1.0,
            theta2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("theta1", self.theta1),
            ("theta2", self.theta2),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.2,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln p[label]`.
pub fn cross_entropy(p: &[f64], label: usize) -> Result<f64> {
    let q = p.get(label).ok_or(Error::Label { label, arity: p.len() })?;
    Ok(-q.ln())
}

/// `-(y ln p + (1 - y) ln(1 - p))`, with `0 ln 0 = 0`.
pub fn binary_cross_entropy(p: f64, y: bool) -> f64 {
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One output vector per sub-goal head: Δx, Δy, Δrot, ope, stop.
/// Holds probabilities, logits or gradients depending on context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalOutputs {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub rot: Vec<f64>,
    pub ope: Vec<f64>,
    pub stop: Vec<f64>,
}

impl SubgoalOutputs {
    pub fn uniform() -> SubgoalOutputs {
        let u = |n: usize| vec![1.0 / n as f64; n];
        let [a, b, c, d, e] = SUBGOAL_ARITIES;
        SubgoalOutputs {
            dx: u(a),
            dy: u(b),
            rot: u(c),
            ope: u(d),
            stop: u(e),
        }
    }

    pub fn heads(&self) -> [&Vec<f64>; 5] {
        [&self.dx, &self.dy, &self.rot, &self.ope, &self.stop]
    }

    fn heads_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.dx, &mut self.dy, &mut self.rot, &mut self.ope, &mut self.stop]
    }

    pub fn softmax(&self) -> SubgoalOutputs {
        SubgoalOutputs {
            dx: softmax(&self.dx),
            dy: softmax(&self.dy),
            rot: softmax(&self.rot),
            ope: softmax(&self.ope),
            stop: softmax(&self.stop),
        }
    }
}

/// Class indices of a sub-goal: Δx + 4, Δy + 4, Δrot / 90, ope, stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalLabel {
    pub dx: usize,
    pub dy: usize,
    pub rot: usize,
    pub ope: usize,
    pub stop: usize,
}

impl SubgoalLabel {
    pub fn from_subgoal(g: &SubGoal) -> Result<SubgoalLabel> {
        g.validate()?;
        Ok(SubgoalLabel {
            dx: (g.dx + SUBGOAL_RADIUS) as usize,
            dy: (g.dy + SUBGOAL_RADIUS) as usize,
            rot: (g.drot / 90) as usize,
            ope: g.ope.index(),
            stop: g.stop as usize,
        })
    }

    pub fn to_subgoal(&self) -> Result<SubGoal> {
        let classes = self.classes();
        for (label, arity) in classes.into_iter().zip(SUBGOAL_ARITIES) {
            if label >= arity {
                return Err(Error::Label { label, arity });
            }
        }
        Ok(SubGoal {
            dx: self.dx as i32 - SUBGOAL_RADIUS,
            dy: self.dy as i32 - SUBGOAL_RADIUS,
            drot: (self.rot * 90) as u16,
            ope: Ope::from_index(self.ope).unwrap_or_default(),
            stop: self.stop == 1,
        })
    }

    pub fn classes(&self) -> [usize; 5] {
        [self.dx, self.dy, self.rot, self.ope, self.stop]
    }
}

fn subgoal_head_weights(w: &LossWeights) -> [f64; 5] {
    [1.0, 1.0, w.gamma2, w.delta2, w.theta2]
}

/// `CE(Δx) + CE(Δy) + γ2 CE(Δrot) + δ2 CE(ope) + θ2 BCE(stop)` over
/// normalised distributions. The stop head is a two-class softmax, so its
/// cross-entropy is the binary cross-entropy of `p[1]`.
pub fn composite_subgoal_loss(pred: &SubgoalOutputs, label: &SubgoalLabel, w: &LossWeights) -> Result<f64> {
    check_subgoal_shapes(pred)?;
    let ws = subgoal_head_weights(w);
    let mut total = 0.0;
    for ((p, l), wt) in pred.heads().into_iter().zip(label.classes()).zip(ws) {
        total += wt * cross_entropy(p, l)?;
    }
    Ok(total)
}

fn check_subgoal_shapes(out: &SubgoalOutputs) -> Result<()> {
    for (head, arity) in out.heads().into_iter().zip(SUBGOAL_ARITIES) {
        if head.len() != arity {
            return Err(Error::Shape(format!(
                "sub-goal head has {} outputs, expected {arity}",
                head.len()
            )));
        }
    }
    Ok(())
}

/// Sub-goal loss from logits and its gradient with respect to the logits.
pub fn subgoal_loss_grad(
    logits: &SubgoalOutputs,
    label: &SubgoalLabel,
    w: &LossWeights,
) -> Result<(f64, SubgoalOutputs)> {
    check_subgoal_shapes(logits)?;
    let ws = subgoal_head_weights(w);
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (((z, g), l), wt) in logits
        .heads()
        .into_iter()
        .zip(grad.heads_mut())
        .zip(label.classes())
        .zip(ws)
    {
        let (loss, gz) = ce_logit_grad(z, l, wt)?;
        total += loss;
        *g = gz;
    }
    Ok((total, grad))
}

/// `w · CE(softmax(z), label)` and its gradient `w (p - e_label)`.
fn ce_logit_grad(z: &[f64], label: usize, w: f64) -> Result<(f64, Vec<f64>)> {
    if label >= z.len() {
        return Err(Error::Label { label, arity: z.len() });
    }
    let lp = log_softmax(z);
    let mut g: Vec<f64> = lp.iter().map(|l| w * l.exp()).collect();
    g[label] -= w;
    Ok((-w * lp[label], g))
}

/// One output vector per sub-task head: kind (Explore, Place), object type,
/// receptacle type, room type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskOutputs {
    pub task: Vec<f64>,
    pub object: Vec<f64>,
    pub receptacle: Vec<f64>,
    pub room: Vec<f64>,
}

impl SubtaskOutputs {
    pub fn uniform(k_pick: usize, k_recep: usize) -> SubtaskOutputs {
        let u = |n: usize| vec![1.0 / n as f64; n];
        SubtaskOutputs {
            task: u(2),
            object: u(k_pick),
            receptacle: u(k_recep),
            room: u(RoomType::ALL.len()),
        }
    }

    pub fn heads(&self) -> [&Vec<f64>; 4] {
        [&self.task, &self.object, &self.receptacle, &self.room]
    }

    fn heads_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.task, &mut self.object, &mut self.receptacle, &mut self.room]
    }

    pub fn softmax(&self) -> SubtaskOutputs {
        SubtaskOutputs {
            task: softmax(&self.task),
            object: softmax(&self.object),
            receptacle: softmax(&self.receptacle),
            room: softmax(&self.room),
        }
    }
}

/// Sub-task class indices; the three parameter labels are ignored for Explore.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskLabel {
    pub place: bool,
    pub object: usize,
    pub receptacle: usize,
    pub room: usize,
}

impl SubtaskLabel {
    pub fn from_subtask(t: &SubTask, kb: &Ontology) -> Result<SubtaskLabel> {
        match t {
            SubTask::Explore => Ok(SubtaskLabel {
                place: false,
                object: 0,
                receptacle: 0,
                room: 0,
            }),
            SubTask::Place(p) => Ok(SubtaskLabel {
                place: true,
                object: kb.pickupable_index(&p.object_type).ok_or_else(|| Error::Lookup {
                    kind: "pickupable type",
                    name: p.object_type.clone(),
                })?,
                receptacle: kb.receptacle_index(&p.receptacle_type).ok_or_else(|| Error::Lookup {
                    kind: "receptacle type",
                    name: p.receptacle_type.clone(),
                })?,
                room: p.room_type.index(),
            }),
        }
    }
}

fn subtask_head_weights(w: &LossWeights) -> [f64; 4] {
    [1.0, w.gamma1, w.delta1, w.theta1]
}

/// `BCE(kind) + γ1 CE(object) + δ1 CE(receptacle) + θ1 CE(room)`; the last
/// three terms are zero for Explore labels.
pub fn composite_subtask_loss(pred: &SubtaskOutputs, label: &SubtaskLabel, w: &LossWeights) -> Result<f64> {
    check_subtask_shapes(pred)?;
    let ws = subtask_head_weights(w);
    let classes = [label.place as usize, label.object, label.receptacle, label.room];
    let mut total = 0.0;
    for (h, ((p, l), wt)) in pred.heads().into_iter().zip(classes).zip(ws).enumerate() {
        if h > 0 && !label.place {
            break;
        }
        total += wt * cross_entropy(p, l)?;
    }
    Ok(total)
}

fn check_subtask_shapes(out: &SubtaskOutputs) -> Result<()> {
    if out.task.len() != 2 || out.room.len() != RoomType::ALL.len() {
        return Err(Error::Shape(format!(
            "sub-task heads have {} kind and {} room outputs",
            out.task.len(),
            out.room.len()
        )));
    }
    if out.object.is_empty() || out.receptacle.is_empty() {
        return Err(Error::Shape("empty sub-task parameter head".into()));
    }
    Ok(())
}

/// Sub-task loss from logits and its gradient with respect to the logits.
pub fn subtask_loss_grad(
    logits: &SubtaskOutputs,
    label: &SubtaskLabel,
    w: &LossWeights,
) -> Result<(f64, SubtaskOutputs)> {
    check_subtask_shapes(logits)?;
    let ws = subtask_head_weights(w);
    let classes = [label.place as usize, label.object, label.receptacle, label.room];
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (h, (((z, g), l), wt)) in logits
        .heads()
        .into_iter()
        .zip(grad.heads_mut())
        .zip(classes)
        .zip(ws)
        .enumerate()
    {
        if h > 0 && !label.place {
            g.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let (loss, gz) = ce_logit_grad(z, l, wt)?;
        total += loss;
        *g = gz;
    }
    Ok((total, grad))
}

/// Misplacement probability plus per-class receptacle and room probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutputs {
    pub mis: f64,
    pub rec: Vec<f64>,
    pub room: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorLabel {
    pub mis: bool,
    /// Candidate receptacle types (multi-label).
    pub rec: Vec<bool>,
    /// Candidate room types (multi-label).
    pub room: Vec<bool>,
}

fn check_detector_shapes(out: &DetectorOutputs, label: &DetectorLabel) -> Result<()> {
    if out.rec.len() != label.rec.len() || out.room.len() != label.room.len() {
        return Err(Error::Shape(format!(
            "detector outputs {}+{} vs labels {}+{}",
            out.rec.len(),
            out.room.len(),
            label.rec.len(),
            label.room.len()
        )));
    }
    Ok(())
}

/// `α BCE(mis) + β Σ BCE(rec_c) + λ Σ BCE(room_c)` over probabilities.
pub fn detector_loss(pred: &DetectorOutputs, label: &DetectorLabel, w: &LossWeights) -> Result<f64> {
    check_detector_shapes(pred, label)?;
    let multi = |p: &[f64], y: &[bool]| -> f64 { p.iter().zip(y).map(|(&p, &y)| binary_cross_entropy(p, y)).sum() };
    Ok(w.alpha * binary_cross_entropy(pred.mis, label.mis)
        + w.beta * multi(&pred.rec, &label.rec)
        + w.lambda * multi(&pred.room, &label.room))
}

/// Detector loss from logits (sigmoid per output) and its logit gradient.
pub fn detector_loss_grad(
    logits: &DetectorOutputs,
    label: &DetectorLabel,
    w: &LossWeights,
) -> Result<(f64, DetectorOutputs)> {
    check_detector_shapes(logits, label)?;
    // ln σ(z) = -softplus(-z), ln(1 - σ(z)) = -softplus(z)
    let softplus = |z: f64| {
        if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        }
    };
    let term = |z: f64, y: bool, wt: f64| -> (f64, f64) {
        let loss = if y { softplus(-z) } else { softplus(z) };
        (wt * loss, wt * (sigmoid(z) - y as u8 as f64))
    };
    let (mut total, gm) = term(logits.mis, label.mis, w.alpha);
    let mut multi = |z: &[f64], y: &[bool], wt: f64| -> Vec<f64> {
        z.iter()
            .zip(y)
            .map(|(&z, &y)| {
                let (l, g) = term(z, y, wt);
                total += l;
                g
            })
            .collect()
    };
    let rec = multi(&logits.rec, &label.rec, w.beta);
    let room = multi(&logits.room, &label.room, w.lambda);
    Ok((total, DetectorOutputs { mis: gm, rec, room }))
}

/// A dense layer `W x + b`, `W` row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub outputs: usize,
    pub inputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(outputs: usize, inputs: usize) -> Linear {
        Linear {
            outputs,
            inputs,
            weights: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Adds `scale · g xᵀ` to the weights and `scale · g` to the bias.
    fn add_outer(&mut self, g: &[f64], x: &[f64], scale: f64) {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &mut self.weights[o * self.inputs..(o + 1) * self.inputs];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += scale * go * xi;
            }
            self.bias[o] += scale * go;
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// The nine heads of one agent: sub-task heads read the sub-task block,
/// sub-goal heads read the sub-goal block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHeads {
    pub d_task: usize,
    pub d_goal: usize,
    pub task: Linear,
    pub object: Linear,
    pub receptacle: Linear,
    pub room: Linear,
    pub dx: Linear,
    pub dy: Linear,
    pub rot: Linear,
    pub ope: Linear,
    pub stop: Linear,
}

impl LinearHeads {
    pub fn zeros(d_task: usize, d_goal: usize, k_pick: usize, k_recep: usize) -> LinearHeads {
        let [ax, ay, ar, ao, as_] = SUBGOAL_ARITIES;
        LinearHeads {
            d_task,
            d_goal,
            task: Linear::zeros(2, d_task),
            object: Linear::zeros(k_pick, d_task),
            receptacle: Linear::zeros(k_recep, d_task),
            room: Linear::zeros(RoomType::ALL.len(), d_task),
            dx: Linear::zeros(ax, d_goal),
            dy: Linear::zeros(ay, d_goal),
            rot: Linear::zeros(ar, d_goal),
            ope: Linear::zeros(ao, d_goal),
            stop: Linear::zeros(as_, d_goal),
        }
    }

    fn subgoal_layers(&self) -> [&Linear; 5] {
        [&self.dx, &self.dy, &self.rot, &self.ope, &self.stop]
    }

    fn subgoal_layers_mut(&mut self) -> [&mut Linear; 5] {
        [&mut self.dx, &mut self.dy, &mut self.rot, &mut self.ope, &mut self.stop]
    }

    fn subtask_layers_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.task, &mut self.object, &mut self.receptacle, &mut self.room]
    }

    pub fn subgoal_logits(&self, goal_x: &[f64]) -> Result<SubgoalOutputs> {
        check_dim(goal_x, self.d_goal, "sub-goal")?;
        let [dx, dy, rot, ope, stop] = self.subgoal_layers().map(|l| l.forward(goal_x));
        Ok(SubgoalOutputs { dx, dy, rot, ope, stop })
    }

    pub fn subtask_logits(&self, task_x: &[f64]) -> Result<SubtaskOutputs> {
        check_dim(task_x, self.d_task, "sub-task")?;
        Ok(SubtaskOutputs {
            task: self.task.forward(task_x),
            object: self.object.forward(task_x),
            receptacle: self.receptacle.forward(task_x),
            room: self.room.forward(task_x),
        })
    }

    /// Loss of one sample and its gradient with respect to every parameter,
    /// returned as a `LinearHeads` of the same shape.
    pub fn sample_loss_grad(&self, sample: &Sample, w: &LossWeights) -> Result<(f64, LinearHeads)> {
        let mut grad = LinearHeads::zeros(self.d_task, self.d_goal, self.object.outputs, self.receptacle.outputs);
        let loss = self.accumulate(sample, w, &mut grad, 1.0)?;
        Ok((loss, grad))
    }

    fn accumulate(&self, sample: &Sample, w: &LossWeights, grad: &mut LinearHeads, scale: f64) -> Result<f64> {
        let (lg, gg) = subgoal_loss_grad(&self.subgoal_logits(&sample.goal_x)?, &sample.subgoal, w)?;
        for (layer, g) in grad.subgoal_layers_mut().into_iter().zip(gg.heads()) {
            layer.add_outer(g, &sample.goal_x, scale);
        }
        let (lt, gt) = subtask_loss_grad(&self.subtask_logits(&sample.task_x)?, &sample.subtask, w)?;
        for (layer, g) in grad.subtask_layers_mut().into_iter().zip(gt.heads()) {
            layer.add_outer(g, &sample.task_x, scale);
        }
        Ok(lg + lt)
    }

    /// `self += scale · other`, head by head.
    fn axpy(&mut self, other: &LinearHeads, scale: f64) {
        let mine = self.layers_mut();
        let theirs = other.layers();
        for (a, b) in mine.into_iter().zip(theirs) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn layers(&self) -> [&Linear; 9] {
        [
            &self.task,
            &self.object,
            &self.receptacle,
            &self.room,
            &self.dx,
            &self.dy,
            &self.rot,
            &self.ope,
            &self.stop,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut Linear; 9] {
        [
            &mut self.task,
            &mut self.object,
            &mut self.receptacle,
            &mut self.room,
            &mut self.dx,
            &mut self.dy,
            &mut self.rot,
            &mut self.ope,
            &mut self.stop,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.is_finite())
    }
}

fn check_dim(x: &[f64], d: usize, what: &str) -> Result<()> {
    if x.len() != d {
        return Err(Error::Shape(format!(
            "{what} feature has {} entries, heads expect {d}",
            x.len()
        )));
    }
    Ok(())
}

/// Decoded head outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPrediction {
    pub subgoal: SubGoal,
    pub place: bool,
    pub object: usize,
    pub receptacle: usize,
    pub room: RoomType,
    pub subgoal_dist: SubgoalOutputs,
    pub subtask_dist: SubtaskOutputs,
}

/// Per-head argmax (ties to the lowest class) decoded into a valid sub-goal
/// and sub-task parameters.
pub fn predict_heads(heads: &LinearHeads, task_x: &[f64], goal_x: &[f64]) -> Result<HeadPrediction> {
    let subgoal_dist = heads.subgoal_logits(goal_x)?.softmax();
    let subtask_dist = heads.subtask_logits(task_x)?.softmax();
    let [dx, dy, rot, ope, stop] = subgoal_dist.heads().map(|h| argmax(h));
    let subgoal = SubgoalLabel { dx, dy, rot, ope, stop }.to_subgoal()?;
    Ok(HeadPrediction {
        subgoal,
        place: argmax(&subtask_dist.task) == 1,
        object: argmax(&subtask_dist.object),
        receptacle: argmax(&subtask_dist.receptacle),
        room: RoomType::from_index(argmax(&subtask_dist.room)).unwrap_or(RoomType::LivingRoom),
        subgoal_dist,
        subtask_dist,
    })
}

fn one_hot(out: &mut Vec<f64>, n: usize, i: Option<usize>) {
    let start = out.len();
    out.resize(start + n, 0.0);
    if let Some(i) = i.filter(|&i| i < n) {
        out[start + i] = 1.0;
    }
}

fn flag(out: &mut Vec<f64>, b: bool) {
    out.push(b as u8 as f64);
}

/// Layout index stored as `index + 1` (0 = none).
fn shifted(sf: &StateFeature, i: usize) -> Option<usize> {
    let v = sf.get(i).round();
    (v >= 1.0).then(|| v as usize - 1)
}

pub fn subgoal_feature_dim() -> usize {
    2 * OFFSET_CLASSES + 4 + 5 + 3 + 2 + 3 + 1
}

/// Sub-goal block: the planner's waypoint (one-hot offsets and bearing),
/// route flags and their conjunctions, the sub-task kind, a few state bits
/// and a bias.
pub fn subgoal_features(sf: &StateFeature, subtask: &SubTask, hint: &RouteHint) -> Vec<f64> {
    let r = SUBGOAL_RADIUS;
    let mut x = Vec::with_capacity(subgoal_feature_dim());
    one_hot(&mut x, OFFSET_CLASSES, Some((hint.dx.clamp(-r, r) + r) as usize));
    one_hot(&mut x, OFFSET_CLASSES, Some((hint.dy.clamp(-r, r) + r) as usize));
    one_hot(&mut x, 4, Some((hint.bearing / 90) as usize));
    flag(&mut x, hint.in_range);
    flag(&mut x, hint.arrives);
    flag(&mut x, hint.holding);
    flag(&mut x, hint.no_frontier);
    flag(&mut x, hint.place);
    let at_target = hint.in_range || hint.arrives;
    flag(&mut x, at_target && hint.holding);
    flag(&mut x, at_target && !hint.holding);
    flag(&mut x, hint.no_frontier && !hint.place);
    one_hot(&mut x, 2, Some(subtask.is_place() as usize));
    flag(&mut x, sf.get(layout::NEW_DETECTION) > 0.5);
    flag(&mut x, sf.get(layout::HOLDING) > 0.5);
    flag(&mut x, sf.get(layout::PENDING) > 0.5);
    x.push(1.0);
    x
}

pub fn subtask_feature_dim(k_pick: usize, k_recep: usize) -> usize {
    2 * (k_pick + 1) + (k_recep + 1) + (RoomType::ALL.len() + 1) + 8
}

/// Sub-task block: the newest detection, the previous sub-task's target and
/// status bits, all read from the state feature.
pub fn subtask_features(sf: &StateFeature, k_pick: usize, k_recep: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(subtask_feature_dim(k_pick, k_recep));
    let or_none = |i: Option<usize>, n: usize| Some(i.map_or(n, |i| i.min(n)));
    one_hot(&mut x, k_pick + 1, or_none(shifted(sf, layout::DET_TYPE), k_pick));
    one_hot(&mut x, k_pick + 1, or_none(shifted(sf, layout::SUBTASK_OBJECT), k_pick));
    one_hot(
        &mut x,
        k_recep + 1,
        or_none(shifted(sf, layout::TARGET_RECEPTACLE), k_recep),
    );
    let rooms = RoomType::ALL.len();
    one_hot(&mut x, rooms + 1, or_none(shifted(sf, layout::TARGET_ROOM), rooms));
    for i in [
        layout::DET_FLAG,
        layout::NEW_DETECTION,
        layout::HOLDING,
        layout::TARGET_KNOWN,
        layout::MANI,
        layout::HEI,
    ] {
        flag(&mut x, sf.get(i) > 0.5);
    }
    flag(&mut x, sf.get(layout::PENDING) > 0.5);
    x.push(1.0);
    x
}

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub task_x: Vec<f64>,
    pub goal_x: Vec<f64>,
    pub subtask: SubtaskLabel,
    pub subgoal: SubgoalLabel,
}

impl Sample {
    pub fn from_step(step: &DemoStep, kb: &Ontology) -> Result<Sample> {
        let k_pick = kb.pickupable_types().len();
        let k_recep = kb.receptacle_types().len();
        Ok(Sample {
            task_x: subtask_features(&step.feature, k_pick, k_recep),
            goal_x: subgoal_features(&step.feature, &step.subtask, &step.hint),
            subtask: SubtaskLabel::from_subtask(&step.subtask, kb)?,
            subgoal: SubgoalLabel::from_subgoal(&step.subgoal)?,
        })
    }
}

/// Trained heads of one roster slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHeads {
    pub slot: usize,
    pub capability: Option<CapabilityVector>,
    pub samples: usize,
    pub heads: LinearHeads,
    /// Mean per-sample training loss after each epoch.
    pub loss_trace: Vec<f64>,
}

/// The model file: per-slot heads plus the type vocabularies they index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub schema_version: u32,
    pub feature_version: u32,
    pub state_layout_version: u32,
    pub pickupable_types: Vec<String>,
    pub receptacle_types: Vec<String>,
    pub config: TrainConfig,
    pub agents: Vec<AgentHeads>,
}

impl PolicyModel {
    pub fn heads_for(&self, slot: usize) -> Option<&LinearHeads> {
        self.agents.iter().find(|a| a.slot == slot).map(|a| &a.heads)
    }

    pub fn check_vocabulary(&self, kb: &Ontology) -> Result<()> {
        if self.pickupable_types != kb.pickupable_types() || self.receptacle_types != kb.receptacle_types() {
            return Err(Error::Config("model was trained against a different ontology".into()));
        }
        Ok(())
    }

    pub fn predict(&self, slot: usize, step: &DemoStep) -> Result<HeadPrediction> {
        let heads = self.heads_for(slot).ok_or(Error::AgentIndex {
            index: slot,
            count: self.agents.len(),
        })?;
        let task_x = subtask_features(&step.feature, self.pickupable_types.len(), self.receptacle_types.len());
        let goal_x = subgoal_features(&step.feature, &step.subtask, &step.hint);
        predict_heads(heads, &task_x, &goal_x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    pub fn from_json(text: &str) -> Result<PolicyModel> {
        let m: PolicyModel = serde_json::from_str(text).map_err(|e| Error::load("policy model", e))?;
        if m.schema_version != MODEL_SCHEMA_VERSION
            || m.feature_version != POLICY_FEATURE_VERSION
            || m.state_layout_version != FEATURE_LAYOUT_VERSION
        {
            return Err(Error::Load {
                what: "policy model".into(),
                message: format!(
                    "versions {}/{}/{} do not match {MODEL_SCHEMA_VERSION}/{POLICY_FEATURE_VERSION}/{FEATURE_LAYOUT_VERSION}",
                    m.schema_version, m.feature_version, m.state_layout_version
                ),
            });
        }
        if !m.agents.iter().all(|a| a.heads.is_finite()) {
            return Err(Error::NonFinite("policy model weights"));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PolicyModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PolicyModel::from_json(&text)
    }
}

/// Mean per-sample loss of `heads` over `samples`.
pub fn dataset_loss(heads: &LinearHeads, samples: &[Sample], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (lg, _) = subgoal_loss_grad(&heads.subgoal_logits(&s.goal_x)?, &s.subgoal, w)?;
        let (lt, _) = subtask_loss_grad(&heads.subtask_logits(&s.task_x)?, &s.subtask, w)?;
        total += lg + lt;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Mini-batch SGD from zero weights; returns the heads and the per-epoch loss trace.
pub fn train_heads(
    samples: &[Sample],
    d_task: usize,
    d_goal: usize,
    k_pick: usize,
    k_recep: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LinearHeads, Vec<f64>)> {
    cfg.validate()?;
    let mut heads = LinearHeads::zeros(d_task, d_goal, k_pick, k_recep);
    let mut trace = Vec::with_capacity(cfg.epochs);
    if samples.is_empty() {
        return Ok((heads, trace));
    }
    let mut rng = crate::rng_from_seed(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = LinearHeads::zeros(d_task, d_goal, k_pick, k_recep);
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                loss += heads.accumulate(&samples[i], &cfg.weights, &mut grad, scale)?;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            heads.axpy(&grad, -cfg.learning_rate);
            step += 1;
        }
        let epoch_loss = dataset_loss(&heads, samples, &cfg.weights)?;
        if !epoch_loss.is_finite() || !heads.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.push(epoch_loss);
    }
    Ok((heads, trace))
}

/// Behaviour cloning over demonstrations: one set of heads per roster slot,
/// trained independently (and in parallel) on that slot's steps.
pub fn train_imitation(demos: &[Demonstration], cfg: &TrainConfig, kb: &Ontology) -> Result<PolicyModel> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::Config("no demonstrations to train on".into()));
    }
    let k_pick = kb.pickupable_types().len();
    let k_recep = kb.receptacle_types().len();
    let slots = demos.iter().map(|d| d.roster.len()).max().unwrap_or(0);
    let mut per_slot: Vec<Vec<Sample>> = vec![Vec::new(); slots];
    let mut caps: Vec<Option<CapabilityVector>> = vec![None; slots];
    for demo in demos {
        for round in &demo.rounds {
            for step in &round.agents {
                let slot = step.agent;
                if slot >= slots {
                    return Err(Error::AgentIndex {
                        index: slot,
                        count: slots,
                    });
                }
                per_slot[slot].push(Sample::from_step(step, kb)?);
                let cap = demo.roster.get(slot).copied();
                caps[slot] = match caps[slot] {
                    Some(c) if Some(c) != cap => None,
                    None if per_slot[slot].len() == 1 => cap,
                    other => other,
                };
            }
        }
    }
    let d_task = subtask_feature_dim(k_pick, k_recep);
    let d_goal = subgoal_feature_dim();
    let trained: Vec<Result<(LinearHeads, Vec<f64>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = per_slot
            .iter()
            .enumerate()
            .map(|(slot, samples)| {
                let seed = crate::derive_seed(cfg.seed, slot as u64);
                s.spawn(move || train_heads(samples, d_task, d_goal, k_pick, k_recep, cfg, seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Config("training thread panicked".into())))
            })
            .collect()
    });
    let mut agents = Vec::with_capacity(slots);
    for (slot, result) in trained.into_iter().enumerate() {
        let (heads, loss_trace) = result?;
        agents.push(AgentHeads {
            slot,
            capability: caps[slot],
            samples: per_slot[slot].len(),
            heads,
            loss_trace,
        });
    }
    Ok(PolicyModel {
        schema_version: MODEL_SCHEMA_VERSION,
        feature_version: POLICY_FEATURE_VERSION,
        state_layout_version: FEATURE_LAYOUT_VERSION,
        pickupable_types: kb.pickupable_types().to_vec(),
        receptacle_types: kb.receptacle_types().to_vec(),
        config: *cfg,
        agents,
    })
}

/// Fraction of demonstration steps whose predicted sub-goal tuple equals the expert's.
pub fn accuracy(model: &PolicyModel, demos: &[Demonstration]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for demo in demos {
        for round in &demo.rounds {
            for step in &round.agents {
                let p = model.predict(step.agent, step)?;
                hits += (p.subgoal == step.subgoal) as usize;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Config("no demonstration steps to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// True when each full 5-epoch window's mean loss is no larger than the previous window's.
pub fn windows_non_increasing(trace: &[f64], window: usize) -> bool {
    let means: Vec<f64> = trace
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.windows(2).all(|w| w[1] <= w[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb() -> Ontology {
        Ontology::builtin()
    }

    #[test]
    fn uniform_subgoal_loss_is_sum_of_log_arities() {
        let label = SubgoalLabel {
            dx: 3,
            dy: 8,
            rot: 1,
            ope: 2,
            stop: 0,
        };
        let l = composite_subgoal_loss(&SubgoalOutputs::uniform(), &label, &LossWeights::default()).unwrap();
        let oracle = 9f64.ln() + 9f64.ln() + 4f64.ln() + 4f64.ln() + 2f64.ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 7.86).abs() < 0.01);
    }

    #[test]
    fn doubling_gamma2_adds_the_rotation_term() {
        let mut p = SubgoalOutputs::uniform();
        p.rot = vec![0.1, 0.6, 0.2, 0.1];
        let label = SubgoalLabel {
            dx: 0,
            dy: 0,
            rot: 2,
            ope: 0,
            stop: 1,
        };
        let w = LossWeights::default();
        let w2 = LossWeights { gamma2: 2.0, ..w };
        let a = composite_subgoal_loss(&p, &label, &w).unwrap();
        let b = composite_subgoal_loss(&p, &label, &w2).unwrap();
        assert!((b - a - (-(0.2f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let label = SubgoalLabel {
            dx: 4,
            dy: 4,
            rot: 0,
            ope: 1,
            stop: 0,
        };
        let hot = |n: usize, i: usize| (0..n).map(|j| (j == i) as u8 as f64).collect::<Vec<_>>();
        let p = SubgoalOutputs {
            dx: hot(9, 4),
            dy: hot(9, 4),
            rot: hot(4, 0),
            ope: hot(4, 1),
            stop: hot(2, 0),
        };
        assert_eq!(
            composite_subgoal_loss(&p, &label, &LossWeights::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn subtask_explore_masks_parameter_heads() {
        let p = SubtaskOutputs::uniform(10, 7);
        let explore = SubtaskLabel {
            place: false,
            object: 99,
            receptacle: 99,
            room: 99,
        };
        let l = composite_subtask_loss(&p, &explore, &LossWeights::default()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let place = SubtaskLabel {
            place: true,
            object: 3,
            receptacle: 2,
            room: 1,
        };
        let l = composite_subtask_loss(&p, &place, &LossWeights::default()).unwrap();
        let oracle = 2f64.ln() + 10f64.ln() + 7f64.ln() + 4f64.ln();
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let label = SubgoalLabel {
            dx: 9,
            dy: 0,
            rot: 0,
            ope: 0,
            stop: 0,
        };
        let err = composite_subgoal_loss(&SubgoalOutputs::uniform(), &label, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Label { label: 9, arity: 9 }));
    }

    #[test]
    fn detector_loss_matches_naive_sum_and_is_linear_in_alpha() {
        let pred = DetectorOutputs {
            mis: 0.7,
            rec: vec![0.2, 0.9, 0.5],
            room: vec![0.1, 0.4, 0.8, 0.3],
        };
        let label = DetectorLabel {
            mis: true,
            rec: vec![false, true, false],
            room: vec![false, false, true, true],
        };
        let w = LossWeights::default();
        let l = detector_loss(&pred, &label, &w).unwrap();
        let mut naive = -(0.7f64).ln();
        for (p, y) in [(0.2, false), (0.9, true), (0.5, false)] {
            naive += if y { -f64::ln(p) } else { -f64::ln(1.0 - p) };
        }
        for (p, y) in [(0.1, false), (0.4, false), (0.8, true), (0.3, true)] {
            naive += if y { -f64::ln(p) } else { -f64::ln(1.0 - p) };
        }
        assert!((l - naive).abs() < 1e-12);
        let l2 = detector_loss(&pred, &label, &LossWeights { alpha: 2.0, ..w }).unwrap();
        assert!((l2 - l + (0.7f64).ln()).abs() < 1e-12);
        let short = DetectorLabel {
            rec: vec![true],
            ..label
        };
        assert!(matches!(detector_loss(&pred, &short, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_heads_decode_to_class_zero() {
        let heads = LinearHeads::zeros(3, 4, 5, 6);
        let p = predict_heads(&heads, &[0.0; 3], &[0.0; 4]).unwrap();
        assert_eq!(
            p.subgoal,
            SubGoal {
                dx: -SUBGOAL_RADIUS,
                dy: -SUBGOAL_RADIUS,
                drot: 0,
                ope: Ope::NoAction,
                stop: false
            }
        );
        assert!(!p.place);
        assert_eq!((p.object, p.receptacle, p.room), (0, 0, RoomType::ALL[0]));
    }

    #[test]
    fn feature_dimensions_match_their_declarations() {
        let kb = kb();
        let sf = StateFeature {
            values: vec![1.0; layout::WIDTH],
        };
        let (kp, kr) = (kb.pickupable_types().len(), kb.receptacle_types().len());
        assert_eq!(subtask_features(&sf, kp, kr).len(), subtask_feature_dim(kp, kr));
        let hint = RouteHint::default();
        assert_eq!(
            subgoal_features(&sf, &SubTask::Explore, &hint).len(),
            subgoal_feature_dim()
        );
    }

    #[test]
    fn single_sample_is_memorised() {
        let sample = Sample {
            task_x: vec![1.0, 0.0, 1.0],
            goal_x: vec![0.0, 1.0, 1.0, 0.5],
            subtask: SubtaskLabel {
                place: true,
                object: 2,
                receptacle: 1,
                room: 3,
            },
            subgoal: SubgoalLabel {
                dx: 6,
                dy: 1,
                rot: 3,
                ope: 2,
                stop: 1,
            },
        };
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let (heads, trace) = train_heads(std::slice::from_ref(&sample), 3, 4, 3, 2, &cfg, 1).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);
        let p = predict_heads(&heads, &sample.task_x, &sample.goal_x).unwrap();
        assert_eq!(p.subgoal, sample.subgoal.to_subgoal().unwrap());
        assert!(p.place);
        assert_eq!((p.object, p.receptacle, p.room.index()), (2, 1, 3));
    }

    #[test]
    fn divergence_is_reported_with_its_step() {
        let sample = Sample {
            task_x: vec![1e300],
            goal_x: vec![1e300],
            subtask: SubtaskLabel {
                place: false,
                object: 0,
                receptacle: 0,
                room: 0,
            },
            subgoal: SubgoalLabel {
                dx: 0,
                dy: 1,
                rot: 0,
                ope: 0,
                stop: 0,
            },
        };
        let cfg = TrainConfig {
            learning_rate: 1e10,
            ..TrainConfig::default()
        };
        let err = train_heads(&[sample], 1, 1, 2, 2, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            weights: LossWeights {
                theta2: 0.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn window_check_reads_means() {
        assert!(windows_non_increasing(
            &[5.0, 6.0, 4.0, 4.0, 4.0, 3.0, 4.0, 4.0, 4.0, 4.0],
            5
        ));
        assert!(!windows_non_increasing(
            &[1.0; 5].iter().chain(&[2.0; 5]).copied().collect::<Vec<_>>(),
            5
        ));
    }
}
