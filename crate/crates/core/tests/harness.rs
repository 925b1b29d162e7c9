use tidy_core::comm::Protocol;
use tidy_core::harness::{
    execute_bursts, replay, run_episode, run_episode_full, EpisodeConfig, Knowledge, Roster, TrajectoryLog,
};
use tidy_core::knowledge::Ontology;
use tidy_core::taskgen::generate_meta_task;
use tidy_core::taskgen::{classify_task, Misplacement, TaskSpec, TASK_SCHEMA_VERSION};
use tidy_core::world::{builtin_scene, is_task_complete, Action, Cell, Heading, Placement, Pose, Scene};
use tidy_core::Error;

/// A 5×3 kitchen: the apple belongs on the counter at the west wall and
/// lies on the floor right in front of the agent.
const KITCHENETTE: &str = r#"
schema_version = 1
name = "kitchenette"
width = 7
height = 5

[[rooms]]
id = "kitchen"
type = "Kitchen"
rects = [[1, 1, 5, 3]]

[[receptacles]]
id = "counter"
type = "CounterTop"
rect = [1, 2, 1, 2]

[[objects]]
id = "apple"
type = "Apple"
on = "counter"
"#;

fn kitchenette() -> (Scene, TaskSpec, Ontology) {
    let kb = Ontology::builtin();
    let scene = Scene::from_toml_str(KITCHENETTE, &kb).unwrap();
    let mut task = TaskSpec {
        schema_version: TASK_SCHEMA_VERSION,
        scene_ref: scene.hash(),
        scene_name: scene.name.clone(),
        misplacements: vec![Misplacement {
            object: "apple".into(),
            original: Placement::On("counter".into()),
            new: Placement::Floor(Cell::new(3, 2)),
        }],
        k: 1,
        label: tidy_core::taskgen::TaskLabel::Single,
        agent_starts: vec![vec![Pose::new(4, 2, Heading::West)]],
        seed: 1,
    };
    task.label = classify_task(&task, &scene).unwrap();
    (scene, task, kb)
}

fn oracle_single() -> EpisodeConfig {
    let mut cfg = EpisodeConfig::new(Roster::SingleAgent.capabilities(), Protocol::NoComm);
    cfg.knowledge = Knowledge::Misplacements;
    cfg
}

#[test]
fn adjacent_object_takes_two_steps() {
    // Facing the apple one cell away: PickUp, then PutDown on the counter
    // two cells further west, still in range and in view.
    let (scene, task, kb) = kitchenette();
    let r = run_episode(&scene, &task, &oracle_single(), &kb, 0, 0, None).unwrap();
    assert!(r.success);
    assert_eq!(r.len, 2);
    assert_eq!(r.rounds, 2);
    assert_eq!(r.total_dims, 0);
}

#[test]
fn all_stop_round_costs_one_step() {
    let (scene, task, _) = kitchenette();
    let mut world = task
        .instantiate(&scene, &Roster::SingleAgent.capabilities(), 0)
        .unwrap();
    let stop = [Action::Stop];
    let done = execute_bursts(&mut world, &[(0, &stop)], 300).unwrap();
    assert_eq!(done.steps, 1);
    assert!(world.agents()[0].stopped);
}

fn traced() -> (Scene, TaskSpec, Ontology, TrajectoryLog) {
    let kb = Ontology::builtin();
    let scene = builtin_scene("demo2", &kb).unwrap();
    let task = generate_meta_task(&scene, &kb, 5).unwrap();
    let cfg = EpisodeConfig::new(Roster::SettingI.capabilities(), Protocol::HanGrCom);
    let run = run_episode_full(&scene, &task, &cfg, &kb, 1, 9, None, true).unwrap();
    let log = run.log.unwrap();
    assert_eq!(log.footer.final_hash, run.record.final_hash);
    assert_eq!(log.rounds.len(), run.record.rounds);
    (scene, task, kb, log)
}

#[test]
fn replay_reproduces_the_final_scene() {
    let (scene, task, kb, log) = traced();
    let parsed = TrajectoryLog::from_jsonl(&log.to_jsonl()).unwrap();
    assert_eq!(parsed, log);
    let out = replay(&parsed, &scene, &kb, true).unwrap();
    assert_eq!(out.final_scene.hash(), log.footer.final_hash);
    assert_eq!(out.len, log.footer.len);
    assert_eq!(out.frames.len(), log.rounds.len());
    let first = task
        .instantiate(&scene, &log.header.config.roster, log.header.start)
        .unwrap();
    assert!(!is_task_complete(&first, &task, &kb));
}

#[test]
fn truncated_log_reports_the_missing_line() {
    let (_, _, _, log) = traced();
    let text = log.to_jsonl();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() > 3);
    for keep in [1, 2, lines.len() - 1] {
        let cut = lines[..keep].join("\n");
        match TrajectoryLog::from_jsonl(&cut) {
            Err(Error::Corrupt { index, .. }) => assert_eq!(index, keep),
            other => panic!("expected corruption at {keep}, got {other:?}"),
        }
    }
    // A line cut in half is malformed at its own index.
    let mut cut = lines[..2].join("\n");
    cut.push('\n');
    cut.push_str(&lines[2][..lines[2].len() / 2]);
    match TrajectoryLog::from_jsonl(&cut) {
        Err(Error::Corrupt { index, .. }) => assert_eq!(index, 2),
        other => panic!("expected corruption at 2, got {other:?}"),
    }
}

#[test]
fn tampered_round_fails_replay_at_that_round() {
    let (scene, _, kb, mut log) = traced();
    let k = log.rounds.len() / 2;
    log.rounds[k].hash = "0".repeat(64);
    match replay(&log, &scene, &kb, false) {
        Err(Error::Corrupt { index, .. }) => assert_eq!(index, k + 1),
        other => panic!("expected corruption at {}, got {other:?}", k + 1),
    }
}

#[test]
fn replay_on_another_scene_is_a_hash_mismatch() {
    let (_, _, kb, log) = traced();
    let other = builtin_scene("studio3", &kb).unwrap();
    assert!(matches!(
        replay(&log, &other, &kb, false),
        Err(Error::HashMismatch { .. })
    ));
}
