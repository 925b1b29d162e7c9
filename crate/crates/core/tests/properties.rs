use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tidy_core::comm::{
    attention_matrix, closed_form_dims, run_protocol, CommConfig, CommVectors, Generators, Protocol, StateFeature,
    DEFAULT_D, DEFAULT_D_SF,
};
use tidy_core::decision::Ope;
use tidy_core::harness::{ces, compute_metrics, run_episode_full, EpisodeConfig, Roster, SliceSuc};
use tidy_core::knowledge::Ontology;
use tidy_core::learn::{
    composite_subgoal_loss, composite_subtask_loss, predict_heads, softmax, LinearHeads, LossWeights, SubgoalLabel,
    SubgoalOutputs, SubtaskLabel, SubtaskOutputs, SUBGOAL_ARITIES,
};
use tidy_core::perception::{detect_misplaced, predict_receptacle, update_semantic_map, DetectorNoise, SemanticMap};
use tidy_core::taskgen::{generate_meta_task, TaskLabel};
use tidy_core::world::{builtin_scene, builtin_scene_names, Action, Heading, Outcome, Placement, Pose, Scene};

fn kb() -> &'static Ontology {
    static KB: OnceLock<Ontology> = OnceLock::new();
    KB.get_or_init(Ontology::builtin)
}

fn scene(i: usize) -> Scene {
    let names = builtin_scene_names();
    builtin_scene(names[i % names.len()], kb()).unwrap()
}

/// A messy Setting II scene for task `seed` on shipped scene `i`.
fn messy(i: usize, seed: u64, start: usize) -> Scene {
    let s = scene(i);
    let task = generate_meta_task(&s, kb(), seed).unwrap();
    task.instantiate(&s, &Roster::SettingII.capabilities(), start).unwrap()
}

fn action_for(world: &Scene, code: u8, pick: usize) -> Action {
    let objects = world.objects();
    let recs = world.receptacles();
    match code % 11 {
        0 => Action::MoveAhead,
        1 => Action::MoveRight,
        2 => Action::MoveLeft,
        3 => Action::RotateRight,
        4 => Action::RotateLeft,
        5 => Action::LookUp,
        6 => Action::LookDown,
        7 => Action::PickUp(objects[pick % objects.len()].id.clone()),
        8 => Action::PutDown(recs[pick % recs.len()].id.clone()),
        9 => Action::Drop,
        // Stop is rare so sequences keep moving
        _ => Action::MoveAhead,
    }
}

fn object_ids(world: &Scene) -> Vec<String> {
    let mut ids: Vec<String> = world.objects().iter().map(|o| o.id.clone()).collect();
    ids.sort();
    ids
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn actions_conserve_objects_and_keep_hands_exclusive(
        scene_i in 0usize..6,
        task_seed in 0u64..500,
        steps in prop::collection::vec((0usize..4, any::<u8>(), any::<usize>()), 1..120),
    ) {
        let mut world = messy(scene_i, task_seed, 0);
        let ids = object_ids(&world);
        for (agent, code, pick) in steps {
            let action = action_for(&world, code, pick);
            let before = world.to_toml_string();
            match world.step(agent, &action) {
                Ok(r) if r.outcome != Outcome::Success => {
                    prop_assert_eq!(&before, &world.to_toml_string(), "failed {} changed the scene", action);
                }
                Ok(_) => {}
                Err(_) => {
                    prop_assert!(action.is_manipulation() && !world.agents()[agent].capability.mani);
                    prop_assert_eq!(&before, &world.to_toml_string());
                }
            }
            prop_assert_eq!(&object_ids(&world), &ids);
            for (a, st) in world.agents().iter().enumerate() {
                if let Some(h) = &st.held {
                    prop_assert_eq!(&world.object(h).unwrap().placement, &Placement::Held(a));
                }
            }
            for o in world.objects() {
                if let Placement::Held(a) = o.placement {
                    prop_assert_eq!(world.agents()[a].held.as_deref(), Some(o.id.as_str()));
                }
            }
        }
    }

    #[test]
    fn same_actions_give_the_same_scene(
        scene_i in 0usize..6,
        task_seed in 0u64..500,
        steps in prop::collection::vec((0usize..4, any::<u8>(), any::<usize>()), 1..60),
    ) {
        let start = messy(scene_i, task_seed, 1);
        let run = || {
            let mut w = start.clone();
            for &(agent, code, pick) in &steps {
                let action = action_for(&w, code, pick);
                let _ = w.step(agent, &action);
            }
            w.to_toml_string()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn rotation_then_inverse_is_identity(scene_i in 0usize..6, task_seed in 0u64..500, agent in 0usize..4, right in any::<bool>()) {
        let mut world = messy(scene_i, task_seed, 2);
        let pose = world.agents()[agent].pose;
        let (there, back) = if right {
            (Action::RotateRight, Action::RotateLeft)
        } else {
            (Action::RotateLeft, Action::RotateRight)
        };
        world.step(agent, &there).unwrap();
        world.step(agent, &back).unwrap();
        prop_assert_eq!(world.agents()[agent].pose, pose);
        for h in Heading::ALL {
            prop_assert_eq!(h.right().left(), h);
        }
    }

    #[test]
    fn noiseless_detection_is_sound_and_complete(
        scene_i in 0usize..6,
        task_seed in 0u64..500,
        cell_pick in any::<usize>(),
        q in 0i32..4,
        agent in 0usize..4,
    ) {
        let mut world = messy(scene_i, task_seed, 0);
        let free: Vec<_> = world
            .walkable_cells()
            .into_iter()
            .filter(|&c| world.agent_at(c).is_none_or(|a| a == agent))
            .collect();
        let c = free[cell_pick % free.len()];
        let mut agents = world.agents().to_vec();
        agents[agent].pose = Pose::new(c.x, c.y, Heading::from_quarter(q));
        world.set_agents(agents).unwrap();
        let obs = world.observe(agent).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dets = detect_misplaced(&obs, kb(), DetectorNoise::default(), &mut rng, 0).unwrap();
        let viewer = world.viewer(agent).unwrap();
        for o in world.objects() {
            let Some((kind, p, room)) = world.object_triple(o) else { continue };
            let misplaced = !kb().is_reasonable(&kind, &p, room).unwrap();
            let seen = world.sees_object(&viewer, &o.id);
            let flagged = dets.iter().any(|d| d.object == o.id && d.det);
            prop_assert_eq!(flagged, seen && misplaced, "object {}", o.id);
        }
        let mut map = SemanticMap::new(&world, kb());
        update_semantic_map(&mut map, &obs, 0);
        let ids: BTreeSet<String> = world.objects().iter().map(|o| o.id.clone()).collect();
        prop_assert!(map.instances().keys().all(|k| ids.contains(k)));
    }

    #[test]
    fn predicted_receptacle_satisfies_the_discriminator(scene_i in 0usize..6, type_pick in any::<usize>(), x in 0i32..30, y in 0i32..30) {
        let s = scene(scene_i);
        let map = SemanticMap::omniscient(&s, kb());
        let types = kb().pickupable_types();
        let o = &types[type_pick % types.len()];
        let target = predict_receptacle(o, &map, kb(), Pose::new(x, y, Heading::North)).unwrap();
        let pair = (target.receptacle_type.clone(), target.room_type);
        prop_assert!(kb().candidate_locations(o).unwrap().contains(&pair));
        prop_assert!(kb().is_reasonable(o, &target.receptacle_type, target.room_type).unwrap());
        if let Some(id) = &target.instance {
            prop_assert_eq!(&s.receptacle(id).unwrap().kind, &target.receptacle_type);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_for_any_finite_input(
        rows in prop::collection::vec(prop::collection::vec(-40.0f64..40.0, 8), 1..7),
    ) {
        let vs: Vec<CommVectors> = rows
            .iter()
            .map(|r| CommVectors {
                qry: r[..4].to_vec(),
                key: r[4..].to_vec(),
                val: vec![0.0; 4],
                inv: vec![0.0; 4],
            })
            .collect();
        let m = attention_matrix(&vs).unwrap();
        for row in &m.t {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn ledgers_match_closed_forms(n in 2usize..7, rounds in 1usize..6, fresh_bits in any::<u64>()) {
        let gens = Generators::semantic(DEFAULT_D, DEFAULT_D_SF).unwrap();
        let cfg = CommConfig::default();
        let feats: Vec<StateFeature> = (0..n)
            .map(|i| StateFeature { values: (0..DEFAULT_D_SF).map(|k| ((i * 7 + k) % 5) as f64 * 0.1).collect() })
            .collect();
        for p in [Protocol::BroadComm, Protocol::CentralComm, Protocol::CmprComm, Protocol::IntenComm, Protocol::NoComm, Protocol::CondComm] {
            let mut total = 0u64;
            let mut expect = 0u64;
            for r in 0..rounds {
                let fresh: Vec<bool> = (0..n).map(|i| fresh_bits >> ((r * n + i) % 64) & 1 == 1).collect();
                total += run_protocol(p, &feats, &fresh, &gens, &cfg).unwrap().total;
                expect += match closed_form_dims(p, n, cfg.payload) {
                    Some(per_agent) => per_agent * n as u64,
                    None => {
                        let senders = fresh.iter().filter(|&&f| f).count() as u64;
                        senders * (n as u64 - 1) * (cfg.payload.state + cfg.payload.map)
                    }
                };
            }
            prop_assert_eq!(total, expect, "{:?}", p);
        }
    }

    #[test]
    fn losses_are_nonnegative_zero_at_one_hot_and_affine_in_weights(
        logits in prop::collection::vec(-5.0f64..5.0, 64),
        labels in (0usize..64, 0usize..64, 0usize..4, 0usize..4, 0usize..2),
        w in 0.1f64..4.0,
    ) {
        let [a, b, c, d, e] = SUBGOAL_ARITIES;
        let labels = (labels.0 % a, labels.1 % b, labels.2, labels.3, labels.4);
        let out = SubgoalOutputs {
            dx: softmax(&logits[..a]),
            dy: softmax(&logits[a..a + b]),
            rot: softmax(&logits[a + b..a + b + c]),
            ope: softmax(&logits[a + b + c..a + b + c + d]),
            stop: softmax(&logits[a + b + c + d..a + b + c + d + e]),
        };
        let label = SubgoalLabel { dx: labels.0, dy: labels.1, rot: labels.2, ope: labels.3, stop: labels.4 };
        let base = LossWeights::default();
        let loss = composite_subgoal_loss(&out, &label, &base).unwrap();
        prop_assert!(loss >= 0.0);

        let one_hot = |n: usize, k: usize| (0..n).map(|i| (i == k) as u8 as f64).collect::<Vec<f64>>();
        let exact = SubgoalOutputs {
            dx: one_hot(a, label.dx),
            dy: one_hot(b, label.dy),
            rot: one_hot(c, label.rot),
            ope: one_hot(d, label.ope),
            stop: one_hot(2, label.stop),
        };
        prop_assert!(composite_subgoal_loss(&exact, &label, &base).unwrap().abs() <= 1e-12);

        // L(w) = L(0-ish) + w * term: check affinity from three points.
        let at = |g: f64| composite_subgoal_loss(&out, &label, &LossWeights { gamma2: g, ..base }).unwrap();
        let (l1, l2, lw) = (at(1.0), at(2.0), at(w));
        prop_assert!((lw - (l1 + (w - 1.0) * (l2 - l1))).abs() <= 1e-9 * (1.0 + lw.abs()));

        let k_pick = kb().pickupable_types().len();
        let k_recep = kb().receptacle_types().len();
        let st = SubtaskOutputs::uniform(k_pick, k_recep);
        let tl = SubtaskLabel { place: labels.4 == 1, object: labels.0 % k_pick, receptacle: labels.1 % k_recep, room: labels.2 };
        let at = |g: f64| composite_subtask_loss(&st, &tl, &LossWeights { delta1: g, ..base }).unwrap();
        let (l1, l2, lw) = (at(1.0), at(2.0), at(w));
        prop_assert!(l1 >= 0.0);
        prop_assert!((lw - (l1 + (w - 1.0) * (l2 - l1))).abs() <= 1e-9 * (1.0 + lw.abs()));
    }

    #[test]
    fn decoded_predictions_are_valid_subgoals(
        task_x in prop::collection::vec(-3.0f64..3.0, 6),
        goal_x in prop::collection::vec(-3.0f64..3.0, 5),
        weights in prop::collection::vec(-2.0f64..2.0, 400),
    ) {
        let mut heads = LinearHeads::zeros(6, 5, 4, 3);
        let mut it = weights.iter().cycle();
        for layer in heads.layers_mut() {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
        let p = predict_heads(&heads, &task_x, &goal_x).unwrap();
        prop_assert!(p.subgoal.validate().is_ok());
        prop_assert!(p.object < 4 && p.receptacle < 3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn episodes_respect_capabilities_and_metric_bounds(
        scene_i in 0usize..6,
        task_seed in 0u64..1000,
        start in 0usize..5,
        protocol in prop::sample::select(Protocol::ALL.to_vec()),
        two in any::<bool>(),
    ) {
        let s = scene(scene_i);
        let task = generate_meta_task(&s, kb(), task_seed).unwrap();
        prop_assert!(matches!(task.label, TaskLabel::Single | TaskLabel::Cross));
        let roster = if two { Roster::SettingII } else { Roster::SettingI }.capabilities();
        let cfg = EpisodeConfig::new(roster.clone(), protocol);
        let run = run_episode_full(&s, &task, &cfg, kb(), start, task_seed ^ 0x5eed, None, false).unwrap();
        for round in &run.demo_rounds {
            for step in &round.agents {
                let cap = roster[step.agent];
                prop_assert!(step.subgoal.validate().is_ok());
                if !cap.mani {
                    prop_assert!(!step.subtask.is_place());
                    prop_assert_eq!(step.subgoal.ope, Ope::NoAction);
                    prop_assert!(step.burst.iter().all(|a| !a.is_manipulation()));
                }
            }
        }
        let r = &run.record;
        prop_assert!(r.len <= 300);
        prop_assert!(r.replaced() <= r.found());
        let m = compute_metrics(std::slice::from_ref(r), &SliceSuc::default()).unwrap().all.unwrap();
        prop_assert!(0.0 <= m.suc && m.suc <= m.ps && m.ps <= 1.0);
        prop_assert!((0.0..=1.0).contains(&m.fm) && m.pl <= 300.0 && m.acm >= 0.0);
        // the baseline against itself scores zero
        if let Some(v) = ces(m.suc, m.suc, m.acm) {
            prop_assert_eq!(v, 0.0);
        }
    }
}
