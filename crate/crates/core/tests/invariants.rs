mod common;

use abms_core::dsl::{format, parse};
use abms_core::engine::{self, build_world, format_g, tick, RunConfig};
use abms_core::metamodel::{validate, QLearningSpec};
use abms_core::traffic::{discretize_state, q_update, stopped_vehicles, QTable};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_disease_model, random_model_source};

fn total_created(world: &engine::World) -> u64 {
    world.counters.created.values().sum()
}

fn total_dead(world: &engine::World) -> u64 {
    world.counters.dead.values().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn compartments_plus_dead_equal_population(model_seed in any::<u64>(), run_seed in any::<u64>()) {
        let src = random_disease_model(&mut ChaCha8Rng::seed_from_u64(model_seed), 0);
        let model = parse(&src).unwrap();
        prop_assert!(!validate(&model).has_errors(), "{:?}\n{}", validate(&model).diagnostics, src);
        let mut world = build_world(&model, &RunConfig::new(run_seed, 0)).unwrap();
        for _ in 0..60 {
            tick(&mut world).unwrap();
            let alive: usize = world.compartment_counts("flu").iter().map(|(_, n)| n).sum();
            prop_assert_eq!(alive as u64 + total_dead(&world), total_created(&world), "{}", src);
            prop_assert_eq!(alive, world.agents.len());
        }
    }

    #[test]
    fn agents_stay_in_bounds(model_seed in any::<u64>(), run_seed in any::<u64>()) {
        let src = random_disease_model(&mut ChaCha8Rng::seed_from_u64(model_seed), 0);
        let model = parse(&src).unwrap();
        let mut world = build_world(&model, &RunConfig::new(run_seed, 0)).unwrap();
        for _ in 0..40 {
            tick(&mut world).unwrap();
            for a in &world.agents {
                prop_assert!(world.space.contains(a.pos), "{:?}", a.pos);
            }
        }
    }

    #[test]
    fn ever_infected_never_decreases(model_seed in any::<u64>(), run_seed in any::<u64>()) {
        let src = random_disease_model(&mut ChaCha8Rng::seed_from_u64(model_seed), 0);
        let model = parse(&src).unwrap();
        let mut world = build_world(&model, &RunConfig::new(run_seed, 0)).unwrap();
        let mut last = world.counters.ever_infected["flu"];
        for _ in 0..40 {
            tick(&mut world).unwrap();
            let now = world.counters.ever_infected["flu"];
            prop_assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn runs_are_reproducible(model_seed in any::<u64>(), run_seed in any::<u64>()) {
        let src = random_disease_model(&mut ChaCha8Rng::seed_from_u64(model_seed), 0);
        let model = parse(&src).unwrap();
        let a = engine::run(&model, &RunConfig::new(run_seed, 25)).unwrap();
        let b = engine::run(&model, &RunConfig::new(run_seed, 25)).unwrap();
        prop_assert_eq!(a.digests, b.digests);
    }

    #[test]
    fn no_dynamics_without_transmission_or_introduction(width in 2i64..20, n in 1usize..60, seed in any::<u64>()) {
        let src = format!(
            "model z {{\n  environment grid width {width} height {width}\n  agent a {{\n    create {n} random\n    capability mobility random_walk step 1\n    capability disease flu\n  }}\n  disease flu model SEIR {{\n    transmission proximity 3 probability 1\n    duration E probabilistic rate 0.5\n    duration I probabilistic rate 0.5\n  }}\n}}\n"
        );
        let model = parse(&src).unwrap();
        let mut world = build_world(&model, &RunConfig::new(seed, 0)).unwrap();
        for _ in 0..30 {
            tick(&mut world).unwrap();
        }
        let counts = world.compartment_counts("flu");
        prop_assert_eq!(counts[0].clone(), ("S".to_string(), n));
        prop_assert_eq!(world.counters.ever_infected["flu"], 0);
    }

    #[test]
    fn generated_sources_round_trip(seed in any::<u64>()) {
        let src = random_model_source(&mut ChaCha8Rng::seed_from_u64(seed));
        let model = parse(&src).unwrap();
        prop_assert_eq!(parse(&format(&model)).unwrap(), model);
    }
}

proptest! {
    #[test]
    fn parser_total_on_arbitrary_strings(s in "\\PC{0,300}") {
        let _ = parse(&s);
    }

    #[test]
    fn stopped_never_exceeds_queued(queues in prop::collection::vec(0usize..50, 0..6), mask in any::<u8>()) {
        let green: Vec<bool> = (0..queues.len()).map(|i| mask & (1 << i) != 0).collect();
        let stopped = stopped_vehicles(&queues, &green);
        prop_assert!(stopped <= queues.iter().sum());
        let all_red = vec![false; queues.len()];
        prop_assert_eq!(stopped_vehicles(&queues, &all_red), queues.iter().sum::<usize>());
    }

    #[test]
    fn discretization_is_monotone(a in 0usize..40, b in 0usize..40, bins in prop::collection::btree_set(0i64..30, 0..5)) {
        let bins: Vec<i64> = bins.into_iter().collect();
        let (lo, hi) = (a.min(b), a.max(b));
        let s = discretize_state(&[lo, hi], &bins);
        prop_assert!(s[0] <= s[1]);
        prop_assert!(s[1] <= bins.len());
    }

    #[test]
    fn q_update_moves_toward_target(old in -100.0f64..100.0, reward in -50.0f64..50.0, alpha in 0.0f64..=1.0) {
        let spec = QLearningSpec { alpha, gamma: 0.0, epsilon: 0.0, plans: vec!["a".into()], bins: vec![], reward: None };
        let mut t = QTable::new();
        t.set(&[0], 0, old);
        q_update(&mut t, &[0], 0, reward, &[1], &spec);
        let new = t.get(&[0], 0);
        prop_assert!((new - (old + alpha * (reward - old))).abs() < 1e-9);
        prop_assert!((new - reward).abs() <= (old - reward).abs() + 1e-9);
    }

    #[test]
    fn format_g_keeps_six_significant_digits(v in -1e12f64..1e12) {
        let text = format_g(v);
        let back: f64 = text.parse().unwrap();
        let tolerance = v.abs() * 5e-6 + 1e-300;
        prop_assert!((back - v).abs() <= tolerance, "{} -> {}", v, text);
    }
}
