//! Acceptance gate. Every test prints one PASS/FAIL line for its criterion
//! straight to stdout (bypassing the test harness capture), then asserts.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tidy_core::comm::{
    aggregate_intra, attention_matrix, partition_groups, soft_aggregate, softmax_row, CommVectors, Protocol,
};
use tidy_core::decision::{plan_moves, shortest_path_actions, Ope, SubGoal, SUBGOAL_RADIUS};
use tidy_core::harness::{
    ces, compute_metrics, render_table, run_episode, run_suite, to_csv, EpisodeConfig, EpisodeRecord, Policy, Roster,
    Slice, SliceSuc, SuiteConfig, SuiteReport, TaskSet,
};
use tidy_core::knowledge::Ontology;
use tidy_core::learn::{
    accuracy, composite_subgoal_loss, composite_subtask_loss, detector_loss, detector_loss_grad, sigmoid,
    subgoal_loss_grad, subtask_loss_grad, train_imitation, windows_non_increasing, DetectorLabel, DetectorOutputs,
    LinearHeads, LossWeights, Sample, SubgoalLabel, SubgoalOutputs, SubtaskLabel, SubtaskOutputs, TrainConfig,
    SUBGOAL_ARITIES,
};
use tidy_core::taskgen::{
    demo_is_valid, generate_batch, generate_expert_demo, generate_meta_task, Demonstration, TaskLabel, TaskSpec,
};
use tidy_core::world::{builtin_scene, builtin_scene_names, Action, Cell, Heading, NavGrid, Pose, Scene};

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {name}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "criterion {n} {name} failed: {detail}");
}

fn kb() -> &'static Ontology {
    static KB: OnceLock<Ontology> = OnceLock::new();
    KB.get_or_init(Ontology::builtin)
}

fn scenes() -> &'static Vec<Scene> {
    static SCENES: OnceLock<Vec<Scene>> = OnceLock::new();
    SCENES.get_or_init(|| {
        builtin_scene_names()
            .into_iter()
            .map(|n| builtin_scene(n, kb()).unwrap())
            .collect()
    })
}

/// Ten meta-tasks per shipped scene.
fn desk_tasks(seed: u64, per_scene: usize) -> Vec<TaskSpec> {
    let named: Vec<(Scene, String)> = scenes()
        .iter()
        .map(|s| (s.clone(), format!("builtin:{}", s.name)))
        .collect();
    generate_batch(&named, kb(), per_scene, seed).unwrap().tasks
}

fn scene_of(task: &TaskSpec) -> &'static Scene {
    scenes().iter().find(|s| s.name == task.scene_name).unwrap()
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get())
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_acm_matches_closed_forms() {
    let tasks = desk_tasks(7, 2);
    let mut failures = Vec::new();
    let mut seen = Vec::new();
    for (roster, expect) in [
        (Roster::SettingI, [820.0, 820.0, 220.0, 20.0]),
        (Roster::SettingII, [1230.0, 1230.0, 330.0, 30.0]),
    ] {
        let protocols = [
            Protocol::BroadComm,
            Protocol::CentralComm,
            Protocol::CmprComm,
            Protocol::IntenComm,
        ];
        for (protocol, want) in protocols.into_iter().zip(expect) {
            let cfg = EpisodeConfig::new(roster.capabilities(), protocol);
            let records: Vec<EpisodeRecord> = tasks
                .iter()
                .map(|t| run_episode(scene_of(t), t, &cfg, kb(), 0, t.seed, None).unwrap())
                .collect();
            let acm = compute_metrics(&records, &SliceSuc::default())
                .unwrap()
                .all
                .unwrap()
                .acm;
            seen.push(format!("{roster:?}/{}={acm}", protocol.name()));
            if acm != want {
                failures.push(format!("{roster:?} {} gave {acm}, want {want}", protocol.name()));
            }
        }
    }
    let detail = if failures.is_empty() {
        seen.join(" ")
    } else {
        failures.join("; ")
    };
    verdict(1, "ACm exactness", failures.is_empty(), &detail);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_ces_arithmetic() {
    let v = ces(0.103, 0.038, 364.6).unwrap();
    let shown = format!("{v:.1}");
    let ok = shown == "1.8" && (v - 1.8).abs() <= 0.05;
    verdict(2, "CES arithmetic", ok, &format!("CES = {v:.4}, shown {shown}"));
}

// ---------------------------------------------------------------- 3

fn random_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<CommVectors> {
    let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
    (0..n)
        .map(|_| CommVectors {
            qry: v(rng),
            key: v(rng),
            val: v(rng),
            inv: v(rng),
        })
        .collect()
}

/// Every group of `fine` lies inside one group of `coarse`.
fn refines(fine: &[Vec<usize>], coarse: &[Vec<usize>]) -> bool {
    fine.iter()
        .all(|g| coarse.iter().any(|c| g.iter().all(|m| c.contains(m))))
}

#[test]
fn criterion_03_attention_and_grouping() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut rows_ok, mut shift_ok, mut refine_ok) = (true, true, true);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=16);
        let m = attention_matrix(&random_vectors(&mut rng, n, d)).unwrap();
        for (raw, row) in m.raw.iter().zip(&m.t) {
            rows_ok &= (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
            let c = rng.gen_range(-50.0..50.0);
            let shifted: Vec<f64> = raw.iter().map(|x| x + c).collect();
            shift_ok &= softmax_row(&shifted)
                .iter()
                .zip(row)
                .all(|(a, b)| (a - b).abs() <= 1e-9);
        }
        let delta = rng.gen_range(0.3..0.99);
        let mut mus: Vec<f64> = (0..4).map(|_| rng.gen_range(0.001..delta)).collect();
        mus.sort_by(f64::total_cmp);
        let parts: Vec<Vec<Vec<usize>>> = mus
            .iter()
            .map(|&mu| partition_groups(&m.t, delta, mu).unwrap())
            .collect();
        refine_ok &= parts.windows(2).all(|w| refines(&w[1], &w[0]));
    }
    let pairs = vec![
        vec![0.5, 0.4, 0.05, 0.05],
        vec![0.4, 0.5, 0.05, 0.05],
        vec![0.05, 0.05, 0.5, 0.4],
        vec![0.05, 0.05, 0.4, 0.5],
    ];
    let groups = partition_groups(&pairs, 0.8, 0.2).unwrap();
    let pairs_ok = groups == vec![vec![0, 1], vec![2, 3]];
    verdict(
        3,
        "attention rows, shift invariance, grouping",
        rows_ok && shift_ok && refine_ok && pairs_ok,
        &format!("rows {rows_ok}, shift {shift_ok}, refinement {refine_ok}, two-pair fixture {groups:?}"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_soft_hard_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mu, delta) = (1e-300, 1.0 - 1e-12);
    let mut worst: f64 = 0.0;
    let mut all_receptive = true;
    for _ in 0..100 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=16);
        let vs = random_vectors(&mut rng, n, d);
        let t = attention_matrix(&vs).unwrap().t;
        let vals: Vec<Vec<f64>> = vs.iter().map(|v| v.val.clone()).collect();
        let invs: Vec<Vec<f64>> = vs.iter().map(|v| v.inv.clone()).collect();
        for i in 0..n {
            all_receptive &= t[i][i] < delta;
            let (hard, _) = aggregate_intra(&t, &vals, mu, i);
            let (soft, _) = soft_aggregate(&t, &vals, &invs, i);
            for k in 0..d {
                let expect = soft[k] - t[i][i] * vals[i][k];
                worst = worst.max((hard[k] - expect).abs());
            }
        }
    }
    verdict(
        4,
        "soft/hard aggregation consistency",
        worst <= 1e-9 && all_receptive,
        &format!("max deviation {worst:.2e}"),
    );
}

// ---------------------------------------------------------------- 5

/// Independent breadth-first search over (x, y, quarter-turn) states with
/// the five movement actions: forward, strafe right, strafe left, turn right,
/// turn left. North is -y and quarter turns go clockwise.
fn oracle_distance(free: &[Vec<bool>], start: (i32, i32, usize), goal: (i32, i32, usize)) -> Option<usize> {
    const DIRS: [(i32, i32); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
    let h = free.len() as i32;
    let w = free[0].len() as i32;
    let open = |x: i32, y: i32| x >= 0 && y >= 0 && x < w && y < h && free[y as usize][x as usize];
    let mut dist: BTreeMap<(i32, i32, usize), usize> = BTreeMap::new();
    let mut queue = VecDeque::from([start]);
    dist.insert(start, 0);
    while let Some(s @ (x, y, q)) = queue.pop_front() {
        let d = dist[&s];
        if s == goal {
            return Some(d);
        }
        let mut next = vec![(x, y, (q + 1) % 4), (x, y, (q + 3) % 4)];
        for turn in [0, 1, 3] {
            let (dx, dy) = DIRS[(q + turn) % 4];
            if open(x + dx, y + dy) {
                next.push((x + dx, y + dy, q));
            }
        }
        for n in next {
            dist.entry(n).or_insert_with(|| {
                queue.push_back(n);
                d + 1
            });
        }
    }
    None
}

fn replay_moves(grid: &NavGrid, mut pose: Pose, actions: &[Action]) -> Option<Pose> {
    for a in actions {
        pose = tidy_core::decision::apply_move(grid, pose, a)?;
    }
    Some(pose)
}

#[test]
fn criterion_05_planner_matches_bfs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    let (mut reachable, mut box_cases) = (0, 0);
    for case in 0..1000 {
        let w = rng.gen_range(2..=12);
        let h = rng.gen_range(2..=12);
        let density = rng.gen_range(0.0..0.4);
        let free: Vec<Vec<bool>> = (0..h)
            .map(|_| (0..w).map(|_| !rng.gen_bool(density)).collect())
            .collect();
        let rows: Vec<String> = free
            .iter()
            .map(|r| r.iter().map(|&f| if f { '.' } else { '#' }).collect())
            .collect();
        let grid = NavGrid::from_ascii(&rows.iter().map(String::as_str).collect::<Vec<_>>());
        let cells: Vec<Cell> = grid.free_cells().collect();
        if cells.is_empty() {
            continue;
        }
        let s = cells[rng.gen_range(0..cells.len())];
        let g = cells[rng.gen_range(0..cells.len())];
        let (sq, gq) = (rng.gen_range(0..4usize), rng.gen_range(0..4usize));
        let start = Pose::new(s.x, s.y, Heading::from_quarter(sq as i32));
        let goal_rot = Heading::from_quarter(gq as i32);
        let oracle = oracle_distance(&free, (s.x, s.y, sq), (g.x, g.y, gq));
        let (dx, dy) = (g.x - s.x, g.y - s.y);
        let in_box = dx.abs() <= SUBGOAL_RADIUS && dy.abs() <= SUBGOAL_RADIUS;
        let plan = if in_box {
            box_cases += 1;
            let sub = SubGoal {
                dx,
                dy,
                drot: start.rot.delta_to(goal_rot),
                ope: Ope::NoAction,
                stop: false,
            };
            shortest_path_actions(&grid, start, &sub, None)
        } else {
            plan_moves(&grid, start, g, goal_rot)
        };
        match (plan, oracle) {
            (Ok(p), Some(d)) => {
                reachable += 1;
                let end = replay_moves(&grid, start, &p);
                if p.len() != d || end.map(|e| (e.cell(), e.rot)) != Some((g, goal_rot)) {
                    mismatches.push(format!("case {case}: plan {} vs oracle {d}", p.len()));
                }
            }
            (Err(_), None) => {}
            (p, o) => mismatches.push(format!("case {case}: plan {:?} vs oracle {o:?}", p.map(|p| p.len()))),
        }
    }
    verdict(
        5,
        "planner optimality",
        mismatches.is_empty(),
        &format!(
            "{reachable} reachable of 1000, {box_cases} via sub-goals, {} mismatches {:?}",
            mismatches.len(),
            mismatches.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_task_generator_soundness() {
    let roster = Roster::SettingI.capabilities();
    let mut problems = Vec::new();
    let mut counts = [0usize; 6];
    for seed in 0..10_000u64 {
        let scene = &scenes()[(seed % scenes().len() as u64) as usize];
        let task = generate_meta_task(scene, kb(), seed).unwrap();
        counts[task.k] += 1;
        if seed >= 1000 {
            continue;
        }
        if task.misplacements.len() != task.k {
            problems.push(format!(
                "seed {seed}: {} entries for k={}",
                task.misplacements.len(),
                task.k
            ));
        }
        let messy = task.instantiate(scene, &roster, 0).unwrap();
        let mut tidy = scene.clone();
        tidy.set_agents(Vec::new()).unwrap();
        let mut crosses = false;
        for m in &task.misplacements {
            let now = messy.object(&m.object).unwrap();
            let (o, p, r) = messy.object_triple(now).unwrap();
            if kb().is_reasonable(&o, &p, r).unwrap() {
                problems.push(format!("seed {seed}: `{}` is reasonably placed", m.object));
            }
            let before = tidy.room_of(tidy.object_cell(tidy.object(&m.object).unwrap()));
            let after = messy.room_of(messy.object_cell(now));
            crosses |= before != after;
        }
        let want = if crosses { TaskLabel::Cross } else { TaskLabel::Single };
        if task.label != want {
            problems.push(format!("seed {seed}: label {:?}, rooms say {want:?}", task.label));
        }
    }
    let fractions: Vec<f64> = counts[1..].iter().map(|&c| c as f64 / 10_000.0).collect();
    let uniform = fractions.iter().all(|f| (f - 0.2).abs() <= 0.02);
    verdict(
        6,
        "task generator soundness",
        problems.is_empty() && uniform,
        &format!(
            "k shares {fractions:?}, {} problems {:?}",
            problems.len(),
            problems.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_expert_demos_replay_to_completion() {
    let tasks = desk_tasks(2024, 10);
    let mut failures = Vec::new();
    let mut checked = 0;
    for roster in [Roster::SettingI, Roster::SettingII] {
        let caps = roster.capabilities();
        for task in &tasks {
            let scene = scene_of(task);
            for start in 0..5 {
                checked += 1;
                let ok = generate_expert_demo(scene, task, &caps, kb(), start)
                    .and_then(|demo| demo_is_valid(scene, task, &demo, kb(), 300));
                match ok {
                    Ok(true) => {}
                    Ok(false) => failures.push(format!(
                        "{roster:?} {} task {} start {start}",
                        task.scene_name, task.seed
                    )),
                    Err(e) => failures.push(format!("{roster:?}: {e}")),
                }
            }
        }
    }
    verdict(
        7,
        "expert demonstration validity",
        failures.is_empty() && checked == 2 * 6 * 10 * 5,
        &format!(
            "{} of {checked} failed {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------- 8

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

fn random_weights(rng: &mut ChaCha8Rng) -> LossWeights {
    let mut w = || rng.gen_range(0.5..2.0);
    LossWeights {
        alpha: w(),
        beta: w(),
        lambda: w(),
        gamma1: w(),
        gamma2: w(),
        delta1: w(),
        delta2: w(),
        theta1: w(),
        theta2: w(),
    }
}

/// Worst relative error between `grad` and central differences of `f` over `x`.
fn fd_check(x: &mut [f64], grad: &[f64], f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + h;
        let up = f(x);
        x[i] = keep - h;
        let down = f(x);
        x[i] = keep;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * h)));
    }
    worst
}

fn flat_subgoal(o: &SubgoalOutputs) -> Vec<f64> {
    o.heads().into_iter().flatten().copied().collect()
}

fn unflat_subgoal(x: &[f64]) -> SubgoalOutputs {
    let mut it = x.iter().copied();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<f64>>();
    let [a, b, c, d, e] = SUBGOAL_ARITIES;
    SubgoalOutputs {
        dx: take(a),
        dy: take(b),
        rot: take(c),
        ope: take(d),
        stop: take(e),
    }
}

#[test]
fn criterion_08_losses_and_gradients() {
    let w = LossWeights::default();
    let k_pick = kb().pickupable_types().len();
    let k_recep = kb().receptacle_types().len();
    let log_sum: f64 = SUBGOAL_ARITIES.iter().map(|&a| (a as f64).ln()).sum();
    let label = SubgoalLabel {
        dx: 2,
        dy: 7,
        rot: 1,
        ope: 3,
        stop: 0,
    };
    let uniform_goal = composite_subgoal_loss(&SubgoalOutputs::uniform(), &label, &w).unwrap();
    let task_label = SubtaskLabel {
        place: true,
        object: 1,
        receptacle: 2,
        room: 3,
    };
    let uniform_task = composite_subtask_loss(&SubtaskOutputs::uniform(k_pick, k_recep), &task_label, &w).unwrap();
    let task_sum = 2f64.ln() + (k_pick as f64).ln() + (k_recep as f64).ln() + 4f64.ln();
    let uniform_ok = (uniform_goal - log_sum).abs() <= 1e-9 && (uniform_task - task_sum).abs() <= 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let w = random_weights(&mut rng);

        let label = SubgoalLabel {
            dx: rng.gen_range(0..SUBGOAL_ARITIES[0]),
            dy: rng.gen_range(0..SUBGOAL_ARITIES[1]),
            rot: rng.gen_range(0..4),
            ope: rng.gen_range(0..4),
            stop: rng.gen_range(0..2),
        };
        let mut x: Vec<f64> = random_logits(&mut rng, SUBGOAL_ARITIES.iter().sum());
        let (_, g) = subgoal_loss_grad(&unflat_subgoal(&x), &label, &w).unwrap();
        let f = |x: &[f64]| composite_subgoal_loss(&unflat_subgoal(x).softmax(), &label, &w).unwrap();
        worst = worst.max(fd_check(&mut x, &flat_subgoal(&g), &f));

        let label = SubtaskLabel {
            place: rng.gen_bool(0.5),
            object: rng.gen_range(0..k_pick),
            receptacle: rng.gen_range(0..k_recep),
            room: rng.gen_range(0..4),
        };
        let sizes = [2, k_pick, k_recep, 4];
        let unflat = |x: &[f64]| {
            let mut it = x.iter().copied();
            let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<f64>>();
            SubtaskOutputs {
                task: take(sizes[0]),
                object: take(sizes[1]),
                receptacle: take(sizes[2]),
                room: take(sizes[3]),
            }
        };
        let mut x = random_logits(&mut rng, sizes.iter().sum());
        let (_, g) = subtask_loss_grad(&unflat(&x), &label, &w).unwrap();
        let flat: Vec<f64> = g.heads().into_iter().flatten().copied().collect();
        let f = |x: &[f64]| composite_subtask_loss(&unflat(x).softmax(), &label, &w).unwrap();
        worst = worst.max(fd_check(&mut x, &flat, &f));

        let (nr, nm) = (rng.gen_range(1..6), rng.gen_range(1..5));
        let label = DetectorLabel {
            mis: rng.gen_bool(0.5),
            rec: (0..nr).map(|_| rng.gen_bool(0.5)).collect(),
            room: (0..nm).map(|_| rng.gen_bool(0.5)).collect(),
        };
        let unflat = |x: &[f64]| DetectorOutputs {
            mis: x[0],
            rec: x[1..1 + nr].to_vec(),
            room: x[1 + nr..].to_vec(),
        };
        let mut x = random_logits(&mut rng, 1 + nr + nm);
        let (_, g) = detector_loss_grad(&unflat(&x), &label, &w).unwrap();
        let flat: Vec<f64> = std::iter::once(g.mis).chain(g.rec).chain(g.room).collect();
        let f = |x: &[f64]| {
            let z = unflat(x);
            let p = DetectorOutputs {
                mis: sigmoid(z.mis),
                rec: z.rec.iter().map(|&v| sigmoid(v)).collect(),
                room: z.room.iter().map(|&v| sigmoid(v)).collect(),
            };
            detector_loss(&p, &label, &w).unwrap()
        };
        worst = worst.max(fd_check(&mut x, &flat, &f));

        // Through the linear heads: parameters, not logits.
        let (d_task, d_goal) = (5, 6);
        let sample = Sample {
            task_x: random_logits(&mut rng, d_task),
            goal_x: random_logits(&mut rng, d_goal),
            subtask: SubtaskLabel {
                place: rng.gen_bool(0.5),
                object: rng.gen_range(0..3),
                receptacle: rng.gen_range(0..2),
                room: rng.gen_range(0..4),
            },
            subgoal: SubgoalLabel {
                dx: rng.gen_range(0..SUBGOAL_ARITIES[0]),
                dy: rng.gen_range(0..SUBGOAL_ARITIES[1]),
                rot: rng.gen_range(0..4),
                ope: rng.gen_range(0..4),
                stop: rng.gen_range(0..2),
            },
        };
        let mut heads = LinearHeads::zeros(d_task, d_goal, 3, 2);
        for layer in heads.layers_mut() {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let (_, grad) = heads.sample_loss_grad(&sample, &w).unwrap();
        let params = |hs: &LinearHeads| -> Vec<f64> {
            hs.layers()
                .into_iter()
                .flat_map(|l| l.weights.iter().chain(&l.bias).copied().collect::<Vec<_>>())
                .collect()
        };
        let shape = heads.clone();
        let rebuild = |x: &[f64]| -> LinearHeads {
            let mut hs = shape.clone();
            let mut it = x.iter().copied();
            for layer in hs.layers_mut() {
                for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                    *v = it.next().unwrap();
                }
            }
            hs
        };
        let mut x = params(&heads);
        let f = |x: &[f64]| rebuild(x).sample_loss_grad(&sample, &w).unwrap().0;
        worst = worst.max(fd_check(&mut x, &params(&grad), &f));
    }
    verdict(
        8,
        "loss values and gradients",
        uniform_ok && worst <= 1e-5,
        &format!(
            "uniform sub-goal {uniform_goal:.12} vs {log_sum:.12}, sub-task {uniform_task:.12} vs {task_sum:.12}, worst gradient rel. error {worst:.2e}"
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_imitation_regression() {
    let caps = Roster::SettingI.capabilities();
    let mut demos: Vec<Demonstration> = Vec::new();
    'outer: for task in desk_tasks(9, 8) {
        for start in 0..5 {
            if let Ok(d) = generate_expert_demo(scene_of(&task), &task, &caps, kb(), start) {
                demos.push(d);
            }
            if demos.len() == 200 {
                break 'outer;
            }
        }
    }
    let model = train_imitation(&demos, &TrainConfig::default(), kb()).unwrap();
    let acc = accuracy(&model, &demos).unwrap();
    let traces_ok = model.agents.iter().all(|a| windows_non_increasing(&a.loss_trace, 5));
    let ends: Vec<String> = model
        .agents
        .iter()
        .map(|a| format!("{:.3}->{:.3}", a.loss_trace[0], a.loss_trace[a.loss_trace.len() - 1]))
        .collect();
    verdict(
        9,
        "imitation regression",
        demos.len() == 200 && acc >= 0.70 && traces_ok,
        &format!(
            "{} demos, sub-goal accuracy {:.3}, loss {}",
            demos.len(),
            acc,
            ends.join(" ")
        ),
    );
}

// ---------------------------------------------------------------- 10, 11

struct DeskSuite {
    report: SuiteReport,
    elapsed: Duration,
    episodes: usize,
}

const DESK_CONFIGS: [(&str, Roster, Protocol, Policy); 12] = [
    ("I-HanGrCom", Roster::SettingI, Protocol::HanGrCom, Policy::Heuristic),
    ("II-HanGrCom", Roster::SettingII, Protocol::HanGrCom, Policy::Heuristic),
    ("I-BroadComm", Roster::SettingI, Protocol::BroadComm, Policy::Heuristic),
    (
        "I-CentralComm",
        Roster::SettingI,
        Protocol::CentralComm,
        Policy::Heuristic,
    ),
    ("I-NoComm", Roster::SettingI, Protocol::NoComm, Policy::Heuristic),
    (
        "II-BroadComm",
        Roster::SettingII,
        Protocol::BroadComm,
        Policy::Heuristic,
    ),
    (
        "II-CentralComm",
        Roster::SettingII,
        Protocol::CentralComm,
        Policy::Heuristic,
    ),
    ("II-NoComm", Roster::SettingII, Protocol::NoComm, Policy::Heuristic),
    ("I-CmprComm", Roster::SettingI, Protocol::CmprComm, Policy::Heuristic),
    ("I-IntenComm", Roster::SettingI, Protocol::IntenComm, Policy::Heuristic),
    ("I-CondComm", Roster::SettingI, Protocol::CondComm, Policy::Heuristic),
    ("I-Random", Roster::SettingI, Protocol::NoComm, Policy::Random),
];

fn desk_suite() -> &'static DeskSuite {
    static SUITE: OnceLock<DeskSuite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let set = TaskSet {
            scenes: scenes().clone(),
            tasks: desk_tasks(11, 10),
            starts: vec![0],
        };
        let configs: Vec<SuiteConfig> = DESK_CONFIGS
            .iter()
            .map(|&(name, roster, protocol, policy)| {
                let mut cfg = EpisodeConfig::new(roster.capabilities(), protocol);
                cfg.policy = policy;
                SuiteConfig::new(name, cfg)
            })
            .collect();
        let clock = Instant::now();
        let report = run_suite(&set, &configs, kb(), 11, None, workers()).unwrap();
        DeskSuite {
            episodes: (configs.len() + 1) * set.tasks.len() * set.starts.len(),
            elapsed: clock.elapsed(),
            report,
        }
    })
}

#[test]
fn criterion_10_metric_orderings() {
    let suite = desk_suite();
    let r = &suite.report;
    let mut problems: Vec<String> = r
        .errors
        .iter()
        .map(|e| format!("{} task {}: {}", e.0, e.1, e.3))
        .collect();
    for row in &r.rows {
        for s in Slice::ALL {
            if let Some(m) = row.report.get(s) {
                if !(m.suc <= m.ps + 1e-12 && m.ps <= m.fm + 1e-12) {
                    problems.push(format!(
                        "{} {}: Suc {} %PS {} %FM {}",
                        row.name,
                        s.name(),
                        m.suc,
                        m.ps,
                        m.fm
                    ));
                }
            }
        }
    }
    for (name, rec) in &r.records {
        if rec.replaced() > rec.found() {
            problems.push(format!(
                "{name} task {}: replaced {} > found {}",
                rec.task_seed,
                rec.replaced(),
                rec.found()
            ));
        }
    }
    let random = r.row("I-Random").and_then(|m| m.all).unwrap();
    let random_ok = random.suc == 0.0 && random.pl == 300.0;
    let mut nocomm_ok = true;
    for name in ["I-NoComm", "II-NoComm", "I-Random"] {
        let rep = r.row(name).unwrap();
        for m in Slice::ALL.iter().filter_map(|&s| rep.get(s)) {
            nocomm_ok &= m.acm == 0.0 && m.ces.is_none();
        }
    }
    verdict(
        10,
        "metric orderings",
        problems.is_empty() && random_ok && nocomm_ok,
        &format!(
            "Random Suc {} #PL {}, NoComm ACm 0 and CES n/a: {nocomm_ok}, {} ordering problems {:?}",
            random.suc,
            random.pl,
            problems.len(),
            problems.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_11_heterogeneity_effect() {
    let suite = desk_suite();
    let r = &suite.report;
    let lens = |name: &str| -> BTreeMap<(u64, usize), usize> {
        r.records
            .iter()
            .filter(|(n, _)| n == name)
            .map(|(_, rec)| ((rec.task_seed, rec.start), rec.len))
            .collect()
    };
    let (one, two) = (lens("I-HanGrCom"), lens("II-HanGrCom"));
    let paired: Vec<bool> = one.iter().filter_map(|(k, l1)| two.get(k).map(|l2| l2 <= l1)).collect();
    let share = paired.iter().filter(|&&b| b).count() as f64 / paired.len().max(1) as f64;

    let all = |name: &str| r.row(name).and_then(|m| m.all).unwrap();
    let mut dominance = Vec::new();
    let mut dominates = true;
    for (roster, full) in [
        ("I", ["BroadComm", "CentralComm"]),
        ("II", ["BroadComm", "CentralComm"]),
    ] {
        let base = all(&format!("{roster}-NoComm"));
        for p in full {
            let m = all(&format!("{roster}-{p}"));
            let ok = m.suc >= base.suc && m.ps >= base.ps && m.fm >= base.fm;
            dominates &= ok;
            dominance.push(format!(
                "{roster}-{p} Suc {:.3}/%PS {:.3}/%FM {:.3} vs NoComm {:.3}/{:.3}/{:.3}",
                m.suc, m.ps, m.fm, base.suc, base.ps, base.fm
            ));
        }
    }
    let per_500 = suite.elapsed.as_secs_f64() * 500.0 / suite.episodes as f64;
    verdict(
        11,
        "heterogeneity effect",
        share >= 0.6 && dominates && per_500 < 600.0,
        &format!(
            "II #PL <= I #PL on {:.1}% of {} tasks; {}; {:.1}s per 500 episodes",
            share * 100.0,
            paired.len(),
            dominance.join("; "),
            per_500
        ),
    );
}

// ---------------------------------------------------------------- 12

#[test]
fn criterion_12_determinism() {
    let set = TaskSet {
        scenes: scenes().clone(),
        tasks: desk_tasks(12, 1),
        starts: vec![0, 3],
    };
    let configs: Vec<SuiteConfig> = [
        ("I-HanGrCom", Roster::SettingI, Protocol::HanGrCom, Policy::Heuristic),
        ("II-CmprComm", Roster::SettingII, Protocol::CmprComm, Policy::Heuristic),
        ("I-Random", Roster::SettingI, Protocol::NoComm, Policy::Random),
    ]
    .iter()
    .map(|&(name, roster, protocol, policy)| {
        let mut cfg = EpisodeConfig::new(roster.capabilities(), protocol);
        cfg.policy = policy;
        SuiteConfig::new(name, cfg)
    })
    .collect();
    let a = run_suite(&set, &configs, kb(), 12, None, 1).unwrap();
    let b = run_suite(&set, &configs, kb(), 12, None, workers().max(2)).unwrap();
    let dump = |r: &SuiteReport| -> String {
        r.records
            .iter()
            .map(|(n, rec)| format!("{n}\t{}\n", rec.to_json()))
            .collect()
    };
    let records_same = dump(&a) == dump(&b);
    let tables_same = to_csv(&a.table_rows()).unwrap() == to_csv(&b.table_rows()).unwrap()
        && render_table(&a.table_rows()) == render_table(&b.table_rows());
    let task = &set.tasks[0];
    let cfg = &configs[0].episode;
    let once = run_episode(scene_of(task), task, cfg, kb(), 0, 77, None)
        .unwrap()
        .to_json();
    let again = run_episode(scene_of(task), task, cfg, kb(), 0, 77, None)
        .unwrap()
        .to_json();
    verdict(
        12,
        "determinism",
        records_same && tables_same && once == again && !a.records.is_empty(),
        &format!(
            "{} records identical across worker counts: {records_same}, tables identical: {tables_same}",
            a.records.len()
        ),
    );
}
