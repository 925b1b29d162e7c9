//! Experiment grids over a task set, run on a bounded worker pool.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, MetricsReport, SliceSuc};
use super::{run_episode, EpisodeConfig, EpisodeRecord, Roster};
use crate::comm::Protocol;
use crate::error::{Error, Result};
use crate::knowledge::Ontology;
use crate::learn::PolicyModel;
use crate::taskgen::TaskSpec;
use crate::world::Scene;

/// Name of the single-agent baseline row every suite reports first.
pub const BASELINE_NAME: &str = "SA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub name: String,
    pub episode: EpisodeConfig,
}

impl SuiteConfig {
    pub fn new(name: impl Into<String>, episode: EpisodeConfig) -> SuiteConfig {
        SuiteConfig {
            name: name.into(),
            episode,
        }
    }

    pub fn baseline(max_steps: usize) -> SuiteConfig {
        let mut episode = EpisodeConfig::new(Roster::SingleAgent.capabilities(), Protocol::NoComm);
        episode.max_steps = max_steps;
        SuiteConfig::new(BASELINE_NAME, episode)
    }
}

/// Tasks to evaluate, the scenes they reference and the start sets to use.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub scenes: Vec<Scene>,
    pub tasks: Vec<TaskSpec>,
    pub starts: Vec<usize>,
}

impl TaskSet {
    fn scene_for(&self, task: &TaskSpec) -> Result<&Scene> {
        self.scenes
            .iter()
            .find(|s| s.name == task.scene_name)
            .ok_or_else(|| Error::Lookup {
                kind: "scene",
                name: task.scene_name.clone(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    /// Baseline first, then the configurations in order. Configurations
    /// whose every episode failed are absent here and listed in `errors`.
    pub rows: Vec<SuiteRow>,
    pub records: Vec<(String, EpisodeRecord)>,
    /// `(configuration, task seed, start, error)` for episodes that failed to run.
    pub errors: Vec<(String, u64, usize, String)>,
}

impl SuiteReport {
    pub fn table_rows(&self) -> Vec<(String, MetricsReport)> {
        self.rows.iter().map(|r| (r.name.clone(), r.report)).collect()
    }

    pub fn row(&self, name: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.name == name).map(|r| &r.report)
    }
}

/// Seed of one episode: shared by every configuration so rows are paired.
pub fn episode_seed(base: u64, task: &TaskSpec, start: usize) -> u64 {
    crate::derive_seed(crate::derive_seed(base, task.seed), start as u64)
}

/// Runs every configuration (plus the single-agent baseline) on every
/// task and start. Episode errors are collected, not fatal; results do not
/// depend on the number of workers.
pub fn run_suite(
    set: &TaskSet,
    configs: &[SuiteConfig],
    kb: &Ontology,
    seed: u64,
    model: Option<&PolicyModel>,
    workers: usize,
) -> Result<SuiteReport> {
    if set.tasks.is_empty() || set.starts.is_empty() {
        return Err(Error::Config("the task set is empty".into()));
    }
    let max_steps = configs
        .first()
        .map_or(super::DEFAULT_MAX_STEPS, |c| c.episode.max_steps);
    let mut all = vec![SuiteConfig::baseline(max_steps)];
    all.extend(configs.iter().filter(|c| c.name != BASELINE_NAME).cloned());
    for c in &all {
        c.episode.validate()?;
    }

    let jobs: Vec<(usize, usize, usize)> = (0..all.len())
        .flat_map(|c| (0..set.tasks.len()).flat_map(move |t| set.starts.iter().map(move |&s| (c, t, s))))
        .collect();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(jobs.len()) {
            let tx = tx.clone();
            let (jobs, next, all) = (&jobs, &next, &all);
            scope.spawn(move || loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, t, s)) = jobs.get(j) else { break };
                let task = &set.tasks[t];
                let result = set.scene_for(task).and_then(|scene| {
                    run_episode(scene, task, &all[c].episode, kb, s, episode_seed(seed, task, s), model)
                });
                if tx.send((j, result)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut results: Vec<(usize, Result<EpisodeRecord>)> = rx.into_iter().collect();
    results.sort_by_key(|(j, _)| *j);

    let mut per_config: Vec<Vec<EpisodeRecord>> = vec![Vec::new(); all.len()];
    let mut errors = Vec::new();
    for (j, result) in results {
        let (c, t, s) = jobs[j];
        match result {
            Ok(r) => per_config[c].push(r),
            Err(e) => errors.push((all[c].name.clone(), set.tasks[t].seed, s, e.to_string())),
        }
    }
    let baseline = if per_config[0].is_empty() {
        SliceSuc::default()
    } else {
        SliceSuc::from_report(&compute_metrics(&per_config[0], &SliceSuc::default())?)
    };
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (c, recs) in per_config.into_iter().enumerate() {
        if recs.is_empty() {
            continue;
        }
        rows.push(SuiteRow {
            name: all[c].name.clone(),
            report: compute_metrics(&recs, &baseline)?,
        });
        records.extend(recs.into_iter().map(|r| (all[c].name.clone(), r)));
    }
    Ok(SuiteReport { rows, records, errors })
}
