use super::*;
use crate::alloc::profiles;
use crate::rng::SplitMix64;

fn marker_pool(prefix: DriverProgram, src: u64, dst: u64) -> SequencePool {
    SequencePool::new(
        Arc::new(prefix),
        &[src, dst],
        InteractionSequence::marker(SequenceKind::Fst, src, 0, src),
        InteractionSequence::marker(SequenceKind::Snd, dst, 0, src),
    )
    .unwrap()
}

fn small_prefix() -> DriverProgram {
    DriverProgram::parse_trace(
        "<malloc 64 a>\n<malloc 16 b>\n<malloc 64 c>\n<malloc 32 d>\n<free a>\n<free c>\n",
    )
    .unwrap()
}

#[test]
fn single_slot_candidates_are_just_the_markers() {
    let pool = marker_pool(small_prefix(), 64, 16);
    let params = SearchParams {
        max_len: 1,
        ..SearchParams::new(0, 3)
    };
    for i in 0..20 {
        let c = construct_candidate(&pool, &params, i);
        assert_eq!(c.len, 1);
        assert_eq!(c.fst_index, 0);
        assert_eq!(
            c.ops,
            vec![CandOp::Fst { size: 64 }, CandOp::Snd { size: 16 }]
        );
    }
}

#[test]
fn full_alloc_ratio_never_frees() {
    let pool = marker_pool(DriverProgram::default(), 64, 16);
    let params = SearchParams {
        alloc_ratio: 100,
        max_len: 50,
        ..SearchParams::new(0, 11)
    };
    for i in 0..200 {
        let c = construct_candidate(&pool, &params, i);
        assert!(!c.ops.iter().any(|op| matches!(op, CandOp::Free { .. })));
    }
}

#[test]
fn candidates_are_valid_programs_with_bounded_length() {
    let pool = marker_pool(small_prefix(), 64, 16);
    let params = SearchParams {
        max_len: 40,
        alloc_ratio: 60,
        ..SearchParams::new(0, 5)
    };
    for i in 0..300 {
        let c = construct_candidate(&pool, &params, i);
        assert!((2..=41).contains(&c.sequence_count()));
        assert!(c.fst_index < c.len);
        let text = c.to_program().serialize();
        let parsed = DriverProgram::parse(&text).unwrap();
        assert_eq!(parsed.serialize(), text);
    }
}

#[test]
fn candidate_ids_avoid_starting_state_ids() {
    let prefix = DriverProgram::parse_trace("<malloc 8 c1>\n<malloc 8 c_x>\n").unwrap();
    let pool = marker_pool(prefix, 8, 8);
    assert_eq!(pool.id_prefix(), "c__");
}

#[test]
fn candidate_stream_is_reproducible() {
    let pool = marker_pool(small_prefix(), 64, 16);
    let params = SearchParams {
        max_len: 30,
        ..SearchParams::new(0, 77)
    };
    let a: Vec<String> = (0..50)
        .map(|i| {
            construct_candidate(&pool, &params, i)
                .to_program()
                .serialize()
        })
        .collect();
    let b: Vec<String> = (0..50)
        .map(|i| {
            construct_candidate(&pool, &params, i)
                .to_program()
                .serialize()
        })
        .collect();
    assert_eq!(a, b);
    let other = SearchParams { seed: 78, ..params };
    assert_ne!(
        a[0],
        construct_candidate(&pool, &other, 0)
            .to_program()
            .serialize()
    );
}

#[test]
fn free_fallback_redirects_when_nothing_is_live() {
    let pool = marker_pool(DriverProgram::default(), 64, 16);
    let mut rng = SplitMix64::new(3);
    let mut live = LiveSet::default();
    assert_eq!(
        free_fallback(&pool, &mut live, 16, &mut rng),
        FreeChoice::Alloc(1)
    );
    live.push(16, 4);
    assert_eq!(
        free_fallback(&pool, &mut live, 16, &mut rng),
        FreeChoice::Free(4)
    );
    assert_eq!(live.count(16), 0);
    live.push(64, 6);
    assert_eq!(
        free_fallback(&pool, &mut live, 16, &mut rng),
        FreeChoice::Alloc(1)
    );
    assert_eq!(live.count(64), 1);
}

#[test]
fn free_fallback_picks_uniformly() {
    let pool = marker_pool(DriverProgram::default(), 64, 16);
    let mut rng = SplitMix64::new(5);
    let mut hits = [0u32; 3];
    for _ in 0..3000 {
        let mut live = LiveSet::default();
        for slot in 0..3 {
            live.push(16, slot);
        }
        match free_fallback(&pool, &mut live, 16, &mut rng) {
            FreeChoice::Free(s) => hits[s as usize] += 1,
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(live.count(16), 2);
    }
    assert!(hits.iter().all(|&h| (850..1150).contains(&h)), "{hits:?}");
}

#[test]
fn fast_path_matches_full_execution() {
    let config = profiles::builtin("dlmalloc-like").unwrap();
    let prefix = Arc::new(small_prefix());
    let pool = SequencePool::new(
        Arc::clone(&prefix),
        &[64, 16],
        InteractionSequence::marker(SequenceKind::Fst, 64, 3, 64),
        InteractionSequence::marker(SequenceKind::Snd, 16, 3, 64),
    )
    .unwrap();
    let exec = SimExecutor::new(config.clone(), prefix).unwrap();
    let params = SearchParams {
        max_len: 60,
        alloc_ratio: 70,
        ..SearchParams::new(0, 8)
    };
    for i in 0..200 {
        let c = construct_candidate(&pool, &params, i);
        let fast = exec.distance(&c).unwrap();
        let full = execute(&c.to_program(), &config)
            .unwrap()
            .result
            .distance
            .unwrap();
        assert_eq!(fast, full);
        let mut detached = c.clone();
        detached.prefix = Arc::new((*c.prefix).clone());
        assert_eq!(exec.distance(&detached).unwrap(), fast);
    }
}

#[test]
fn noise_appears_around_the_markers() {
    let seq = InteractionSequence::marker(SequenceKind::Fst, 64, 3, 8);
    assert_eq!(
        seq.steps,
        vec![
            Step::Alloc(8),
            Step::Alloc(8),
            Step::Fst(64),
            Step::Alloc(8)
        ]
    );
    assert_eq!(seq.noise_count, 3);
}

#[test]
fn adjacency_with_equal_sizes_is_found() {
    let config = AllocatorConfig::ideal();
    let pool = marker_pool(small_prefix(), 64, 64);
    let exec = SimExecutor::new(config, Arc::clone(&pool.starting_state)).unwrap();
    let params = SearchParams::new(-64, 1);
    let out = search(&pool, &params, &exec, Strategy::Serial);
    assert!(out.solved);
    assert_eq!(out.best_distance(), Some(-64));
    assert!(out.candidates_tried <= params.budget);
}

#[test]
fn odd_distances_are_unreachable() {
    let config = AllocatorConfig::ideal();
    let pool = marker_pool(DriverProgram::default(), 64, 64);
    let exec = SimExecutor::new(config, Arc::clone(&pool.starting_state)).unwrap();
    let params = SearchParams {
        budget: 300,
        max_len: 20,
        ..SearchParams::new(1, 1)
    };
    let out = search(&pool, &params, &exec, Strategy::Serial);
    assert!(!out.solved);
    assert_eq!(out.candidates_tried, 300);
    assert!(out.best_distance().unwrap() % 8 == 0);
    assert!(out.best.unwrap().error >= 7);
}

#[test]
fn serial_and_parallel_search_agree() {
    let config = profiles::builtin("tcmalloc-like").unwrap();
    let pool = marker_pool(small_prefix(), 512, 64);
    let exec = SimExecutor::new(config, Arc::clone(&pool.starting_state)).unwrap();
    let params = SearchParams {
        budget: 2000,
        max_len: 100,
        ..SearchParams::new(-512, 21)
    };
    let a = search(&pool, &params, &exec, Strategy::Serial);
    let b = search(&pool, &params, &exec, Strategy::Parallel { workers: 4 });
    assert_eq!(a.solved, b.solved);
    assert_eq!(a.solution_index, b.solution_index);
    assert_eq!(a.candidates_tried, b.candidates_tried);
    assert_eq!(
        a.best.map(|b| b.candidate.to_program().serialize()),
        b.best.map(|b| b.candidate.to_program().serialize())
    );
}

#[test]
fn relationships() {
    assert_eq!(
        classify_relationship(Order::SrcFirst, Direction::Overflow),
        Relationship::Natural
    );
    assert_eq!(
        classify_relationship(Order::DstFirst, Direction::Overflow),
        Relationship::Reversed
    );
    assert_eq!(
        classify_relationship(Order::DstFirst, Direction::Underflow),
        Relationship::Natural
    );
    assert_eq!(
        classify_relationship(Order::SrcFirst, Direction::Underflow),
        Relationship::Reversed
    );
}
