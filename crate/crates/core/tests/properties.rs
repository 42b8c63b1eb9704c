mod common;

use heapsieve::alloc::profiles;
use heapsieve::driver::{execute, DriverProgram, Markers};
use heapsieve::harness::protocol_output;
use heapsieve::rng::SplitMix64;
use proptest::prelude::*;

#[test]
fn heap_structure_holds_for_every_profile() {
    for config in common::invariant_profiles() {
        for seed in 0..2 {
            common::invariant_run(&config, seed, 2_000).unwrap();
        }
    }
}

#[test]
fn best_fit_matches_exhaustive_scan() {
    for name in ["ideal", "dlmalloc-like"] {
        let config = profiles::builtin(name).unwrap();
        let mut compared = 0;
        for seed in 0..100 {
            let t = common::best_fit_trace(&config, seed, 200).unwrap();
            assert_eq!(t.mismatches, 0, "{name} seed {seed}");
            compared += t.compared;
        }
        assert!(
            compared > 5_000,
            "{name}: only {compared} placements compared"
        );
    }
}

#[test]
fn oracles_reject_wrong_behaviour() {
    let first_fit = heapsieve::alloc::AllocatorConfig {
        fit_policy: heapsieve::alloc::FitPolicy::FirstFit,
        ..heapsieve::alloc::AllocatorConfig::ideal()
    };
    let wrong: u64 = (0..20)
        .map(|seed| {
            common::best_fit_trace(&first_fit, seed, 200)
                .unwrap()
                .mismatches
        })
        .sum();
    assert!(wrong > 0);

    let config = heapsieve::alloc::AllocatorConfig::ideal();
    let mut s = heapsieve::alloc::ArenaState::new(&config);
    let a = s.alloc(&config, 64).unwrap();
    let b = s.alloc(&config, 64).unwrap();
    let live = |v: &[(u64, u64)]| {
        v.iter()
            .map(|&(addr, size)| common::Live { addr, size })
            .collect::<Vec<_>>()
    };
    assert!(common::check_structure(&s, &config, &live(&[(a, 64), (b, 64)])).is_ok());
    assert!(common::check_structure(&s, &config, &live(&[(a, 72), (b, 64)])).is_err());
    assert!(common::check_structure(&s, &config, &live(&[(a, 64)])).is_err());
    s.dealloc(&config, a).unwrap();
    assert!(common::check_structure(&s, &config, &live(&[(a, 64), (b, 64)])).is_err());
}

#[test]
fn long_programs_round_trip() {
    let mut rng = SplitMix64::new(3);
    let text = common::random_program(&mut rng, 10_000);
    let p = DriverProgram::parse_with(&text, Markers::Optional).unwrap();
    assert_eq!(p.len(), 10_000);
    assert_eq!(p.serialize(), text);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn serialize_then_parse_is_identity(seed in any::<u64>(), len in 0usize..300) {
        let text = common::random_program(&mut SplitMix64::new(seed), len);
        let p = DriverProgram::parse_with(&text, Markers::Optional).unwrap();
        let again = DriverProgram::parse_with(&p.serialize(), Markers::Optional).unwrap();
        prop_assert_eq!(&again, &p);
        prop_assert_eq!(again.serialize(), p.serialize());
    }

    #[test]
    fn execution_is_a_pure_function(seed in any::<u64>(), len in 1usize..200) {
        let text = common::random_program(&mut SplitMix64::new(seed), len);
        let p = DriverProgram::parse_with(&text, Markers::Optional).unwrap();
        for name in profiles::NAMES {
            let config = profiles::builtin(name).unwrap();
            let a = execute(&p, &config).map(|e| protocol_output(&e)).map_err(|e| e.to_string());
            let b = execute(&p, &config).map(|e| protocol_output(&e)).map_err(|e| e.to_string());
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn invariants_hold_on_short_random_runs(seed in any::<u64>()) {
        for config in common::invariant_profiles() {
            common::invariant_run(&config, seed, 300).map_err(TestCaseError::fail)?;
        }
    }
}
