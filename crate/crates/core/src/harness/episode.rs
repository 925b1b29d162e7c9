use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::trajectory::{RoundLog, TrajectoryFooter, TrajectoryHeader, TrajectoryLog};
use super::{execute_bursts, EpisodeConfig, EpisodeRecord, Knowledge, ObjectOutcome, Policy, RECORD_SCHEMA_VERSION};
use crate::comm::{featurize_state, inter_group_payload, run_protocol, DetectionTracker, FeatureInput, Generators};
use crate::decision::{
    clear_way, infer_intentions, next_subgoal, plan_subtasks, shortest_path_actions, AgentView, HeldObject, Ope,
    SubGoal, SubTask, SubgoalPlan, TeamMember,
};
use crate::error::{Error, Result};
use crate::knowledge::Ontology;
use crate::learn::{predict_heads, subgoal_features, subtask_features, PolicyModel};
use crate::perception::{
    classify_region, detect_coin_flip, detect_misplaced, predict_receptacle, update_semantic_map, Detection,
    MergeScope, PlacementTarget, SemanticMap,
};
use crate::taskgen::{DemoRound, DemoStep, TaskSpec};
use crate::world::{is_task_complete, Action, Cell, NavGrid, Outcome, Placement, Rect, Scene};

/// Wall clock for records; the browser build has no monotonic clock in std, so it reports 0.
struct Clock(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Clock {
    fn start() -> Clock {
        Clock(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64() * 1e3;
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

/// Everything one episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub record: EpisodeRecord,
    /// Per-round decisions of every active agent, usable as demonstrations.
    pub demo_rounds: Vec<DemoRound>,
    pub log: Option<TrajectoryLog>,
}

/// One agent's private state between rounds.
#[derive(Debug, Clone)]
struct Mind {
    map: SemanticMap,
    detections: BTreeMap<String, Detection>,
    tracker: DetectionTracker,
    subtask: SubTask,
    last_success: bool,
}

impl Mind {
    fn pending(&self) -> Vec<Detection> {
        self.detections
            .values()
            .filter(|d| d.det && self.map.instance(&d.object).is_some())
            .cloned()
            .collect()
    }

    fn known_misplaced(&self) -> BTreeSet<String> {
        self.detections
            .values()
            .filter(|d| d.det)
            .map(|d| d.object.clone())
            .collect()
    }
}

fn merge_detections(mine: &mut BTreeMap<String, Detection>, theirs: impl IntoIterator<Item = Detection>) {
    for d in theirs {
        match mine.get(&d.object) {
            Some(m) if m.round >= d.round => {}
            _ => {
                mine.insert(d.object.clone(), d);
            }
        }
    }
}

/// Ground-truth detection of an object that is not held.
fn true_detection(world: &Scene, kb: &Ontology, id: &str, round: usize) -> Option<Detection> {
    let obj = world.object(id).ok()?;
    let (kind, receptacle_type, room_type) = world.object_triple(obj)?;
    let det = !kb.is_reasonable(&kind, &receptacle_type, room_type).ok()?;
    let receptacle_id = match &obj.placement {
        Placement::On(r) => Some(r.clone()),
        _ => None,
    };
    let cell = world.object_cell(obj);
    let footprint = match &receptacle_id {
        Some(r) => world.receptacle(r).ok()?.rect,
        None => Rect::point(cell),
    };
    Some(Detection {
        object: id.to_string(),
        kind,
        det,
        receptacle_type,
        receptacle_id,
        room_type,
        cell,
        footprint,
        round,
    })
}

fn agent_view(world: &Scene, i: usize) -> Result<AgentView> {
    let a = world.agent(i)?;
    let holding = match &a.held {
        Some(id) => Some(HeldObject {
            id: id.clone(),
            kind: world.object(id)?.kind.clone(),
        }),
        None => None,
    };
    Ok(AgentView {
        index: i,
        capability: a.capability,
        pose: a.pose,
        holding,
        stopped: a.stopped,
    })
}

fn blocked_grid(map: &SemanticMap, occupied: &[Cell]) -> NavGrid {
    let mut g = map.nav().clone();
    for &c in occupied {
        g.set(c, false);
    }
    g
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Without the receptacle predictor: a known receptacle instance chosen per
/// object from a seed, so the choice is stable while the map is unchanged.
fn random_target(map: &SemanticMap, kb: &Ontology, seed: u64, object: &str) -> Option<PlacementTarget> {
    let recs: Vec<_> = map.receptacles().values().collect();
    if recs.is_empty() {
        return None;
    }
    let r = recs[(crate::derive_seed(seed, fnv1a(object)) % recs.len() as u64) as usize];
    Some(PlacementTarget {
        receptacle_type: r.kind.clone(),
        room_type: classify_region(map, r.region, kb).room,
        instance: Some(r.id.clone()),
    })
}

pub fn run_episode(
    scene: &Scene,
    task: &TaskSpec,
    cfg: &EpisodeConfig,
    kb: &Ontology,
    start: usize,
    seed: u64,
    model: Option<&PolicyModel>,
) -> Result<EpisodeRecord> {
    Ok(run_episode_full(scene, task, cfg, kb, start, seed, model, false)?.record)
}

/// Runs one episode; with `trace` set, also returns the trajectory log.
#[allow(clippy::too_many_arguments)]
pub fn run_episode_full(
    scene: &Scene,
    task: &TaskSpec,
    cfg: &EpisodeConfig,
    kb: &Ontology,
    start: usize,
    seed: u64,
    model: Option<&PolicyModel>,
    trace: bool,
) -> Result<EpisodeRun> {
    cfg.validate()?;
    let clock = Clock::start();
    let model = match cfg.policy {
        Policy::Learned => {
            let m = model.ok_or_else(|| Error::Config("the learned policy needs a model".into()))?;
            m.check_vocabulary(kb)?;
            for slot in 0..cfg.roster.len() {
                if m.heads_for(slot).is_none() {
                    return Err(Error::AgentIndex {
                        index: slot,
                        count: m.agents.len(),
                    });
                }
            }
            Some(m)
        }
        _ => None,
    };
    let mut world = task.instantiate(scene, &cfg.roster, start)?;
    let n = cfg.roster.len();
    let range = world.config.interaction_range;
    let gens = Generators::from_preset(cfg.comm.generators, cfg.comm.d, cfg.comm.d_sf)?;
    let mut rng = crate::rng_from_seed(crate::derive_seed(seed, 1));
    let target_seed = crate::derive_seed(seed, 2);
    let k_pick = kb.pickupable_types().len();
    let k_recep = kb.receptacle_types().len();

    let mut minds: Vec<Mind> = (0..n)
        .map(|_| Mind {
            map: SemanticMap::new(&world, kb),
            detections: BTreeMap::new(),
            tracker: DetectionTracker::default(),
            subtask: SubTask::Explore,
            last_success: true,
        })
        .collect();
    if cfg.knowledge == Knowledge::Misplacements {
        for mind in &mut minds {
            for m in &task.misplacements {
                mind.map.insert_true_instance(&world, &m.object, 0);
                if let Some(d) = true_detection(&world, kb, &m.object, 0) {
                    mind.detections.insert(d.object.clone(), d);
                }
            }
        }
    }

    let header = TrajectoryHeader::new(task, cfg, start, seed);
    let mut round_logs = Vec::new();
    let mut demo_rounds = Vec::new();
    let mut picked: BTreeSet<String> = BTreeSet::new();
    // cells at the start of the previous two rounds, oldest first
    let mut trail: Vec<[Option<Cell>; 2]> = vec![[None; 2]; n];
    let (mut len, mut rounds, mut comm_rounds, mut total) = (0usize, 0usize, 0usize, 0u64);

    while len < cfg.max_steps {
        if is_task_complete(&world, task, kb) || world.agents().iter().all(|a| a.stopped) {
            break;
        }
        let round = rounds;
        let mut bursts: Vec<(usize, Vec<Action>)> = Vec::with_capacity(n);
        let mut dims = 0;

        if cfg.policy == Policy::Random {
            let object_ids: Vec<String> = world.objects().iter().map(|o| o.id.clone()).collect();
            let receptacle_ids: Vec<String> = world.receptacles().iter().map(|r| r.id.clone()).collect();
            for i in 0..n {
                let a = world.agent(i)?;
                if a.stopped {
                    continue;
                }
                let mut options = vec![
                    Action::MoveAhead,
                    Action::MoveRight,
                    Action::MoveLeft,
                    Action::RotateRight,
                    Action::RotateLeft,
                    Action::LookUp,
                    Action::LookDown,
                ];
                if a.capability.mani {
                    if let Some(id) = object_ids.choose(&mut rng) {
                        options.push(Action::PickUp(id.clone()));
                    }
                    if let Some(id) = receptacle_ids.choose(&mut rng) {
                        options.push(Action::PutDown(id.clone()));
                    }
                    options.push(Action::Drop);
                }
                let action = options.choose(&mut rng).cloned().unwrap_or(Action::RotateRight);
                bursts.push((i, vec![action]));
            }
            comm_rounds += 1;
        } else {
            if cfg.knowledge == Knowledge::Oracle {
                for mind in &mut minds {
                    mind.map = SemanticMap::omniscient(&world, kb);
                    mind.detections = task
                        .misplacements
                        .iter()
                        .filter_map(|m| true_detection(&world, kb, &m.object, round))
                        .map(|d| (d.object.clone(), d))
                        .collect();
                }
            }

            let mut fresh = vec![false; n];
            for (i, mind) in minds.iter_mut().enumerate() {
                let obs = world.observe(i)?;
                update_semantic_map(&mut mind.map, &obs, round);
                let seen = if cfg.ablations.no_knowledge {
                    detect_coin_flip(&obs, &mut rng, round)
                } else {
                    detect_misplaced(&obs, kb, cfg.noise, &mut rng, round)?
                };
                let mut new = Vec::new();
                for d in seen {
                    let known = mind.detections.get(&d.object).is_some_and(|p| p.det);
                    if d.det && !known {
                        new.push((kb.pickupable_index(&d.kind).unwrap_or(0), true));
                    }
                    mind.detections.insert(d.object.clone(), d);
                }
                mind.tracker.advance(&new);
                fresh[i] = mind.tracker.fresh;
            }

            let mut features = Vec::with_capacity(n);
            for (i, mind) in minds.iter().enumerate() {
                let a = world.agent(i)?;
                let place = mind.subtask.place();
                let input = FeatureInput {
                    capability: a.capability,
                    pose: a.pose,
                    tracker: mind.tracker,
                    target: place.and_then(|p| {
                        kb.receptacle_index(&p.receptacle_type)
                            .map(|r| (r, p.room_type.index(), p.instance.is_some()))
                    }),
                    frontier_distance: crate::decision::nearest_frontier(
                        mind.map.nav(),
                        &mind.map.frontier_cells(),
                        a.pose.cell(),
                    )
                    .map(|(_, d)| d),
                    unexplored_fraction: mind.map.unexplored_fraction(),
                    holding: a.held.is_some(),
                    stopped: a.stopped,
                    pending: mind.pending().len(),
                    place_object_type: place.and_then(|p| kb.pickupable_index(&p.object_type)),
                    last_success: mind.last_success,
                    round,
                };
                features.push(featurize_state(&input, cfg.comm.d_sf)?);
            }

            let comm = run_protocol(cfg.protocol, &features, &fresh, &gens, &cfg.comm)?;
            total += comm.total;
            dims = comm.total;
            comm_rounds += 1;

            let snapshot = minds.clone();
            for (i, mind) in minds.iter_mut().enumerate() {
                let inbox = &comm.inboxes[i];
                for (senders, scope) in [
                    (&inbox.full, MergeScope::Full),
                    (&inbox.compressed, MergeScope::Instances),
                ] {
                    for &j in senders {
                        mind.map.merge_from(&snapshot[j].map, scope);
                        if !cfg.ablations.no_detector {
                            merge_detections(&mut mind.detections, snapshot[j].detections.values().cloned());
                        }
                    }
                }
                if let (Some(j), false) = (inbox.inter, cfg.ablations.no_detector) {
                    let payload = inter_group_payload(&snapshot[j].detections.values().cloned().collect::<Vec<_>>());
                    let ids: BTreeSet<String> = payload.iter().map(|d| d.object.clone()).collect();
                    mind.map.merge_selected(&snapshot[j].map, &ids);
                    merge_detections(&mut mind.detections, payload);
                }
            }

            let views = (0..n).map(|i| agent_view(&world, i)).collect::<Result<Vec<_>>>()?;
            let cells: Vec<Cell> = views.iter().map(|v| v.pose.cell()).collect();
            let mut subtasks = Vec::with_capacity(n);
            for i in 0..n {
                if views[i].stopped {
                    subtasks.push(minds[i].subtask.clone());
                    continue;
                }
                let inbox = &comm.inboxes[i];
                let mut members: Vec<usize> = inbox.peers();
                members.push(i);
                members.sort_unstable();
                members.dedup();
                let state_only: Vec<usize> = inbox.state.clone();
                let intentions = if state_only.is_empty() {
                    Vec::new()
                } else {
                    let peers: Vec<(AgentView, SubTask)> = state_only
                        .iter()
                        .map(|&j| (views[j].clone(), minds[j].subtask.clone()))
                        .collect();
                    let others: Vec<Cell> = cells.iter().copied().filter(|&c| c != cells[i]).collect();
                    infer_intentions(&peers, &minds[i].map, &others, range)
                };
                let team: Vec<TeamMember> = members
                    .iter()
                    .map(|&j| {
                        let mut current = minds[j].subtask.clone();
                        let known = if j == i {
                            None
                        } else if let Some(k) = state_only.iter().position(|&s| s == j) {
                            if intentions[k].is_none() {
                                current = SubTask::Explore;
                            }
                            Some(BTreeSet::new())
                        } else {
                            Some(minds[j].known_misplaced())
                        };
                        TeamMember {
                            view: views[j].clone(),
                            current,
                            known,
                        }
                    })
                    .collect();
                let me = &minds[i];
                let pending = me.pending();
                let plan = plan_subtasks(&team, &pending, &me.map, range, |m, object, kind| {
                    if cfg.ablations.no_predictor {
                        if let Some(t) = random_target(&me.map, kb, target_seed, object) {
                            return Ok(t);
                        }
                    }
                    predict_receptacle(kind, &me.map, kb, team[m].view.pose)
                })?;
                let pos = members.iter().position(|&j| j == i).unwrap_or(0);
                subtasks.push(plan[pos].clone());
            }
            for (mind, t) in minds.iter_mut().zip(subtasks) {
                mind.subtask = t;
            }

            // head-on livelock: an agent back where it was two rounds ago
            // waits while a lower-indexed agent nearby goes first
            let yields: Vec<bool> = (0..n)
                .map(|i| {
                    let [old, prev] = trail[i];
                    old == Some(cells[i])
                        && prev != Some(cells[i])
                        && (0..i).any(|j| {
                            !views[j].stopped
                                && (cells[j].x - cells[i].x).abs().max((cells[j].y - cells[i].y).abs())
                                    <= 2 * crate::decision::SUBGOAL_RADIUS
                        })
                })
                .collect();

            let mut demo = DemoRound { agents: Vec::new() };
            // (next cell, full route) of agents whose way is blocked by another agent
            let mut intents: Vec<Option<(Cell, Vec<Cell>)>> = vec![None; n];
            for i in 0..n {
                if views[i].stopped {
                    continue;
                }
                if yields[i] {
                    bursts.push((i, Vec::new()));
                    continue;
                }
                let occupied: Vec<Cell> = cells.iter().copied().filter(|&c| c != cells[i]).collect();
                let mind = &mut minds[i];
                let plan = match next_subgoal(&views[i], &mind.subtask, &mind.map, &occupied, range) {
                    Ok(p) => Some(p),
                    Err(_) if mind.subtask.is_place() => {
                        mind.subtask = SubTask::Explore;
                        next_subgoal(&views[i], &mind.subtask, &mind.map, &occupied, range)
                            .ok()
                            .map(|mut p: SubgoalPlan| {
                                if p.subgoal.stop {
                                    p.subgoal = SubGoal::idle();
                                }
                                p
                            })
                    }
                    Err(_) => None,
                };
                let Some(plan) = plan else {
                    bursts.push((i, Vec::new()));
                    continue;
                };
                let (subgoal, target) = match model {
                    Some(model) => {
                        let heads = model.heads_for(i).ok_or(Error::AgentIndex {
                            index: i,
                            count: model.agents.len(),
                        })?;
                        let task_x = subtask_features(&features[i], k_pick, k_recep);
                        let goal_x = subgoal_features(&features[i], &mind.subtask, &plan.hint);
                        let mut g = predict_heads(heads, &task_x, &goal_x)?.subgoal;
                        let place = mind.subtask.place();
                        let target = match g.ope {
                            Ope::PickUp => place.map(|p| p.object.clone()),
                            Ope::PutDown => place.and_then(|p| p.instance.clone()),
                            _ => None,
                        };
                        let manipulates = matches!(g.ope, Ope::PickUp | Ope::PutDown | Ope::Drop);
                        if manipulates && (!views[i].capability.mani || (target.is_none() && g.ope != Ope::Drop)) {
                            g.ope = Ope::NoAction;
                        }
                        (g, target)
                    }
                    None => (plan.subgoal, plan.target.clone()),
                };
                let pose = views[i].pose;
                let grid = blocked_grid(&mind.map, &occupied);
                let mut burst = shortest_path_actions(&grid, pose, &subgoal, target.as_deref())
                    .or_else(|_| shortest_path_actions(mind.map.nav(), pose, &subgoal, target.as_deref()))
                    .unwrap_or_default();
                if cfg.ablations.flat {
                    burst.truncate(1);
                }
                if let Some(dest) = plan.destination.filter(|&d| d != cells[i]) {
                    if grid.path(cells[i], dest).is_none() {
                        if let Some(path) = mind.map.nav().path(cells[i], dest) {
                            intents[i] = Some((path[1], path));
                        }
                    }
                }
                demo.agents.push(DemoStep {
                    agent: i,
                    feature: features[i].clone(),
                    subtask: mind.subtask.clone(),
                    subgoal: plan.subgoal,
                    hint: plan.hint,
                    burst: burst.clone(),
                });
                bursts.push((i, burst));
            }

            // head-on in a corridor, or blocked by an idle agent: step aside
            let mut moved_aside = BTreeSet::new();
            for i in 0..n {
                let Some((want, _)) = &intents[i] else { continue };
                let Some(j) = (0..n).find(|&j| cells[j] == *want && !views[j].stopped) else {
                    continue;
                };
                let swap = intents[j].as_ref().is_some_and(|(w, _)| *w == cells[i]);
                let idle = bursts.iter().any(|(a, b)| *a == j && b.is_empty()) && !yields[j];
                let (aside, keep) = match (swap, idle) {
                    (true, _) => (i.max(j), i.min(j)),
                    (false, true) => (j, i),
                    _ => continue,
                };
                if !moved_aside.insert(aside) {
                    continue;
                }
                let Some((_, route)) = &intents[keep] else { continue };
                let occupied: Vec<Cell> = cells.iter().copied().filter(|&c| c != cells[aside]).collect();
                let Some(plan) = clear_way(&views[aside], &minds[aside].map, &occupied, route) else {
                    continue;
                };
                let grid = blocked_grid(&minds[aside].map, &occupied);
                let burst = shortest_path_actions(&grid, views[aside].pose, &plan.subgoal, None).unwrap_or_default();
                match demo.agents.iter_mut().find(|s| s.agent == aside) {
                    Some(step) => {
                        step.subgoal = plan.subgoal;
                        step.hint = plan.hint;
                        step.burst = burst.clone();
                    }
                    None => demo.agents.push(DemoStep {
                        agent: aside,
                        feature: features[aside].clone(),
                        subtask: minds[aside].subtask.clone(),
                        subgoal: plan.subgoal,
                        hint: plan.hint,
                        burst: burst.clone(),
                    }),
                }
                demo.agents.sort_by_key(|s| s.agent);
                match bursts.iter_mut().find(|(a, _)| *a == aside) {
                    Some(b) => b.1 = burst,
                    None => bursts.push((aside, burst)),
                }
            }
            demo_rounds.push(demo);
        }

        for (t, a) in trail.iter_mut().zip(world.agents()) {
            *t = [t[1], Some(a.pose.cell())];
        }
        let held_before: Vec<Option<String>> = world.agents().iter().map(|a| a.held.clone()).collect();
        let slices: Vec<(usize, &[Action])> = bursts.iter().map(|(i, b)| (*i, b.as_slice())).collect();
        let outcome = execute_bursts(&mut world, &slices, cfg.max_steps - len)?;
        len += outcome.steps;
        for (i, done) in &outcome.executed {
            let mind = &mut minds[*i];
            mind.last_success = done.iter().all(|(_, o)| *o == Outcome::Success);
            let mut holding = held_before[*i].clone();
            for (action, o) in done {
                if *o != Outcome::Success {
                    continue;
                }
                match action {
                    Action::PickUp(id) => {
                        picked.insert(id.clone());
                        mind.map.forget(id, round);
                        if let Some(d) = mind.detections.get_mut(id) {
                            d.det = false;
                            d.round = round;
                        }
                        holding = Some(id.clone());
                    }
                    Action::PutDown(_) | Action::Drop => {
                        if let Some(id) = holding.take() {
                            mind.map.insert_true_instance(&world, &id, round);
                            if let Some(d) = mind.detections.get_mut(&id) {
                                d.det = false;
                                d.round = round;
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        if trace {
            round_logs.push(RoundLog {
                index: round,
                bursts: bursts.clone(),
                steps: outcome.steps,
                dims,
                hash: world.hash(),
            });
        }
        rounds += 1;
    }

    let outcomes: Vec<ObjectOutcome> = task
        .misplacements
        .iter()
        .map(|m| ObjectOutcome {
            object: m.object.clone(),
            picked: picked.contains(&m.object),
            replaced: world.discriminate(&m.object, kb).unwrap_or(false),
        })
        .collect();
    let record = EpisodeRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        scene_name: task.scene_name.clone(),
        scene_ref: task.scene_ref.clone(),
        task_seed: task.seed,
        start,
        label: task.label,
        k: task.k,
        config: cfg.clone(),
        seed,
        success: is_task_complete(&world, task, kb),
        len,
        rounds,
        comm_rounds,
        n_agents: n,
        total_dims: total,
        outcomes,
        final_hash: world.hash(),
        wall_ms: clock.elapsed_ms(),
    };
    let log = trace.then(|| TrajectoryLog {
        header,
        rounds: round_logs,
        footer: TrajectoryFooter {
            rounds: record.rounds,
            len: record.len,
            final_hash: record.final_hash.clone(),
        },
    });
    Ok(EpisodeRun {
        record,
        demo_rounds,
        log,
    })
}
