use super::*;

const KEEP: u32 = 1;

fn exhaustive(config: SimConfig) -> SimConfig {
    config.with_mode(SchedulerMode::Exhaustive { depth_bound: 64 })
}

#[test]
fn solo_run_is_enqueue_grant_release() {
    for lock in [SimLock::Cna, SimLock::Mcs] {
        let config = SimConfig::new(lock, &[0], 1);
        let steps = 5; // swap, cs enter, cs exit, load next, cas
        let trace = run_schedule(&config, &vec![0; steps]).unwrap();
        let kinds: Vec<_> = trace.events.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, [EventKind::Enqueue, EventKind::Grant, EventKind::Release]);
        assert_eq!(trace.stats.cas_attempts, 1);
    }
}

#[test]
fn schedule_naming_a_blocked_thread_is_rejected() {
    let config = SimConfig::new(SimLock::Mcs, &[0, 0], 1);
    // Thread 0 takes the lock, thread 1 swaps and links, then must wait.
    let err = run_schedule(&config, &[0, 1, 1, 1]).unwrap_err();
    assert!(matches!(err, SimError::NotEnabled { thread: 1, .. }));
}

#[test]
fn two_socket_example_grant_order() {
    let (config, script) = two_socket_example();
    let trace = run_scripted(&config, &script).unwrap();
    assert_eq!(trace.grant_order(), vec![0, 3, 4, 0, 1, 2, 5, 6]);
    assert_eq!(oracle_order_for(&config, &trace), trace.grant_order());
    let through_t2 = trace.through_grant(5);
    assert_eq!(intra_socket_handover_ratio(through_t2).unwrap(), 0.75);
    let moved: Vec<_> = trace
        .events
        .iter()
        .filter(|e| e.kind == EventKind::MoveToSecondary)
        .map(|e| e.thread)
        .collect();
    assert_eq!(moved, vec![1, 2, 5]);
}

#[test]
fn random_schedule_replays_identically() {
    let config = SimConfig::new(SimLock::Cna, &[0, 1, 0, 1], 3);
    let a = run_random(&config, 42).unwrap();
    let b = run_schedule(&config, &a.schedule).unwrap();
    assert_eq!(a.to_lines(), b.to_lines());
    assert_eq!(run_random(&config, 42).unwrap().to_lines(), a.to_lines());
}

#[test]
fn trace_lines_round_trip() {
    let config = SimConfig::new(SimLock::Cna, &[0, 1], 2);
    let trace = run_random(&config, 7).unwrap();
    let text = trace.to_lines();
    assert!(text.lines().next().unwrap().contains("\"event\":\"enqueue\""));
    assert_eq!(SimTrace::from_lines(&text).unwrap(), trace.events);
}

#[test]
fn schedule_text_round_trip() {
    let s = parse_schedule(" 0 1\n2\t0 ").unwrap();
    assert_eq!(s, vec![0, 1, 2, 0]);
    assert_eq!(format_schedule(&s), "0 1 2 0");
    assert!(matches!(parse_schedule("0 x"), Err(SimError::Parse(_))));
}

#[test]
fn exhaustive_mcs_two_threads() {
    let config = exhaustive(SimConfig::new(SimLock::Mcs, &[0, 1], 1));
    let traces = enumerate_schedules(&config).unwrap();
    assert!(traces.len() > 1);
    for t in &traces {
        let mut order = t.grant_order();
        order.sort_unstable();
        assert_eq!(order, vec![0, 1]);
    }
}

#[test]
fn exhaustive_cna_two_threads_grant_both() {
    let config = exhaustive(SimConfig::new(SimLock::Cna, &[0, 1], 1).with_draw_script(vec![KEEP]));
    let stats = for_each_schedule(&config, |t| {
        let mut order = t.grant_order();
        order.sort_unstable();
        assert_eq!(order, vec![0, 1]);
        Ok(())
    })
    .unwrap();
    assert!(stats.schedules > 1);
}

#[test]
fn exhaustive_cna_prefers_holder_socket() {
    // Sockets {0, 1, 0}: whenever both others queue behind thread 0 with the
    // remote thread first, the local thread must be served first.
    let config =
        exhaustive(SimConfig::new(SimLock::Cna, &[0, 1, 0], 1).with_draw_script(vec![KEEP]));
    let mut checked = 0;
    for_each_schedule(&config, |t| {
        let queued_behind_0 = t.serialized.starts_with(&[
            OracleEvent::Arrive { thread: 0, socket: SocketId::new(0) },
            OracleEvent::Arrive { thread: 1, socket: SocketId::new(1) },
            OracleEvent::Arrive { thread: 2, socket: SocketId::new(0) },
        ]);
        if queued_behind_0 {
            checked += 1;
            assert_eq!(t.grant_order(), vec![0, 2, 1]);
        }
        Ok(())
    })
    .unwrap();
    assert!(checked > 0);
}

#[test]
fn exhaustive_mode_bounds_are_enforced() {
    let config = exhaustive(SimConfig::new(SimLock::Mcs, &[0, 1, 0, 1], 1));
    assert!(matches!(config.validate(), Err(SimError::InvalidConfig(_))));
    let tight =
        SimConfig::new(SimLock::Mcs, &[0, 1], 1).with_mode(SchedulerMode::Exhaustive { depth_bound: 4 });
    assert!(matches!(
        for_each_schedule(&tight, |_| Ok(())),
        Err(SimError::BoundExceeded { bound: 4, .. })
    ));
}

#[test]
fn zero_threshold_bounds_waiting() {
    let threads = 6;
    let config = SimConfig::new(SimLock::Cna, &[0, 1, 0, 1, 0, 1], 20)
        .with_policy(CnaConfig::default().with_threshold(0));
    for seed in 0..20 {
        let trace = run_random(&config, seed).unwrap();
        assert!(trace.stats.max_grant_wait <= 2 * threads as u64);
        assert!(!trace.events.iter().any(|e| e.kind == EventKind::MoveToSecondary));
    }
}

#[test]
fn random_runs_match_oracle_with_generator_draws() {
    let config = SimConfig::new(SimLock::Cna, &[0, 1, 1, 0, 2], 4)
        .with_policy(CnaConfig::default().with_threshold(0x3).with_seed(9))
        .with_mode(SchedulerMode::Random { seed: 100, schedules: 50 });
    let stats = sample_schedules(&config, |_| Ok(())).unwrap();
    assert_eq!(stats.schedules, 50);
}

#[test]
fn shuffle_reduction_runs_match_oracle() {
    let policy = CnaConfig {
        shuffle_reduction: true,
        shuffle_threshold: 0x1,
        threshold: 0x7,
        seed: 3,
    };
    let config = SimConfig::new(SimLock::Cna, &[0, 1, 0, 1], 5)
        .with_policy(policy)
        .with_mode(SchedulerMode::Random { seed: 1, schedules: 50 });
    sample_schedules(&config, |t| {
        assert!(t.stats.shuffle_skips <= t.stats.decisions);
        Ok(())
    })
    .unwrap();
}

#[test]
fn mcs_alternating_arrivals_never_stay_local() {
    let config = SimConfig::new(SimLock::Mcs, &[0, 1, 0, 1, 0, 1], 1);
    let mut script = vec![Action::Acquire(0)];
    script.extend((1..6).map(Action::Enqueue));
    script.push(Action::Drain);
    let trace = run_scripted(&config, &script).unwrap();
    assert_eq!(trace.grant_order(), (0..6).collect::<Vec<_>>());
    assert_eq!(intra_socket_handover_ratio(&trace.events).unwrap(), 0.0);
}

#[test]
fn saturated_runs_respect_atomic_budget() {
    for lock in [SimLock::Cna, SimLock::Mcs] {
        let config = SimConfig::new(lock, &[0, 1, 0, 1], 1);
        let sim = run_saturated(&config, 5, 2_000).unwrap();
        assert_eq!(sim.stats().max_swaps_per_acquire, 1);
        assert!(sim.stats().max_cas_per_release <= 1);
    }
}

#[test]
fn saturated_cna_is_mostly_local() {
    let config = SimConfig::new(SimLock::Cna, &[0, 1, 0, 1, 0, 1, 0, 1], 1).counts_only();
    let sim = run_saturated(&config, 1, 20_000).unwrap();
    assert!(sim.stats().handover_ratio().unwrap() > 0.9);
}
