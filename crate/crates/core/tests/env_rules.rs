mod common;

use common::{ref_grid, to_action, to_ref, to_ref_targets, BfsAgent};
use goalplay_core::env::{
    sample_initial_state, transition, Action, GridConfig, GridEnv, GripperState, ObjectState, Orientation, WorldState,
};
use goalplay_core::goal::{goal_achieved, Goal, GoalSource, GoalTarget, MatchTolerance};
use goalplay_oracles::grid::{all_actions, bfs_solve, ref_step, BfsOutcome};
use goalplay_oracles::stats::{chi_square_critical_999, chi_square_uniform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_config() -> impl Strategy<Value = GridConfig> {
    (3usize..=6, 1usize..=3, 1usize..=3).prop_map(|(n, objs, stack)| {
        let mut c = GridConfig::square(n);
        c.max_objects = objs;
        c.max_stack_height = stack;
        c
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_action_sequences_stay_valid(config in arb_config(), seed in any::<u64>(), n in 1usize..=3) {
        let n = n.min(config.max_objects);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = sample_initial_state(&config, &mut rng, n).unwrap();
        for _ in 0..500 {
            let a = Action::from_flat(rng.gen_range(0..60)).unwrap();
            s = transition(&config, &s, a);
            prop_assert!(s.validate(&config).is_ok(), "{:?}", s.validate(&config));
        }
        prop_assert_eq!(s.step_count, 500);
    }

    #[test]
    fn matches_reference_rules(config in arb_config(), seed in any::<u64>()) {
        let grid = ref_grid(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=config.max_objects);
        let mut s = sample_initial_state(&config, &mut rng, n).unwrap();
        for _ in 0..300 {
            let a = all_actions()[rng.gen_range(0..60)];
            let expected = ref_step(&grid, &to_ref(&s), a);
            s = transition(&config, &s, to_action(a));
            prop_assert_eq!(to_ref(&s), expected);
        }
    }

    #[test]
    fn canonical_form_round_trips(seed in any::<u64>()) {
        let config = GridConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = sample_initial_state(&config, &mut rng, 2).unwrap();
        for _ in 0..rng.gen_range(0..50) {
            s = transition(&config, &s, Action::from_flat(rng.gen_range(0..60)).unwrap());
        }
        prop_assert_eq!(WorldState::from_canonical(&s.to_canonical()).unwrap(), s);
    }

    #[test]
    fn transition_is_pure(seed in any::<u64>(), a in 0usize..60) {
        let config = GridConfig::default();
        let s = sample_initial_state(&config, &mut ChaCha8Rng::seed_from_u64(seed), 2).unwrap();
        let a = Action::from_flat(a).unwrap();
        prop_assert_eq!(transition(&config, &s, a), transition(&config, &s, a));
    }
}

#[test]
fn reset_places_objects_uniformly() {
    let config = GridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = vec![0u64; 25];
    let mut orient = vec![0u64; 4];
    for _ in 0..50_000 {
        let s = sample_initial_state(&config, &mut rng, 1).unwrap();
        counts[s.objects[0].y * 5 + s.objects[0].x] += 1;
        orient[s.objects[0].orientation.quarters() as usize] += 1;
        assert_eq!(s.objects[0].level, 0);
        assert!(s.gripper.raised() && s.gripper.holding.is_none());
    }
    assert!(chi_square_uniform(&counts) < chi_square_critical_999(24));
    assert!(chi_square_uniform(&orient) < chi_square_critical_999(3));
}

#[test]
fn two_object_resets_never_collide() {
    let config = GridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5_000 {
        let s = sample_initial_state(&config, &mut rng, 2).unwrap();
        assert_ne!((s.objects[0].x, s.objects[0].y), (s.objects[1].x, s.objects[1].y));
    }
}

#[test]
fn stack_two_on_small_grid_is_solvable_and_replays() {
    let config = GridConfig::square(3);
    let tol = MatchTolerance::default();
    let start = WorldState {
        gripper: GripperState { x: 1, y: 1, z: 1, holding: None },
        objects: vec![
            ObjectState { x: 0, y: 0, level: 0, orientation: Orientation::from_quarters(0) },
            ObjectState { x: 2, y: 2, level: 0, orientation: Orientation::from_quarters(1) },
        ],
        step_count: 0,
    };
    let goal = Goal {
        targets: vec![
            GoalTarget { x: 2, y: 0, level: 0, orientation: Orientation::from_quarters(0), in_air: false },
            GoalTarget { x: 2, y: 0, level: 1, orientation: Orientation::from_quarters(1), in_air: false },
        ],
        source: GoalSource::Holdout,
        rotation_weight: 1.0,
    };
    let BfsOutcome::Found(script) = bfs_solve(&ref_grid(&config), &to_ref(&start), &to_ref_targets(&goal), 1_000_000)
    else {
        panic!("stack-2 should be solvable on 3x3");
    };
    let mut env = GridEnv::new(config.clone()).unwrap();
    env.reset_to(&start).unwrap();
    for a in &script {
        env.step(to_action(*a));
    }
    assert!(goal_achieved(&config, env.state(), &goal, &tol).unwrap());

    // the swapped order is a different, unsatisfied goal
    let mut swapped = goal.clone();
    swapped.targets[0].level = 1;
    swapped.targets[1].level = 0;
    assert!(!goal_achieved(&config, env.state(), &swapped, &tol).unwrap());
}

#[test]
fn bfs_agent_is_an_agent() {
    // compile-time check that the oracle adapter satisfies the agent interface
    fn takes(_: &dyn goalplay_core::selfplay::Agent<f64>) {}
    takes(&BfsAgent::new(&GridConfig::default()));
}
