use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use dbos_core::executor::policy::{coefficient_of_variation, RUNTIME_METRIC};
use dbos_core::executor::sim::{simulate, Placement, SimTask};
use dbos_core::executor::{
    choose_policy, claim_for, complete, detect_stragglers_at, noop_body, place_accelerated, poll_and_claim, reap_expired,
    register_worker, Executor, ExecutorConfig, SchedulerPolicy, UdfRegistry, WorkerSpec,
};
use dbos_core::os::clock::ManualClock;
use dbos_core::os::schema::col;
use dbos_core::syscall::{Kernel, SyscallContext, TaskStatus};
use dbos_core::{Engine, EngineConfig, Row};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn root() -> SyscallContext {
    SyscallContext::root()
}

fn manual(start: i64) -> (Kernel, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(start));
    (Kernel::boot(Engine::in_memory(), clock.clone()).unwrap(), clock)
}

fn with_fn(k: &Kernel, name: &str, accel: Option<&str>) {
    k.register_function(&root(), name, accel, true).unwrap();
}

fn spawn(k: &Kernel, f: &str) -> u64 {
    k.task_spawn(&root(), f, &[], 1, None).unwrap()
}

fn task(k: &Kernel, id: u64) -> Row {
    k.tasks(&root(), None).unwrap().into_iter().find(|r| r.get(col::tasks::TASK_ID).as_u64() == Some(id)).unwrap()
}

fn status(r: &Row) -> TaskStatus {
    r.get(col::tasks::STATUS).as_str().unwrap().parse().unwrap()
}

#[test]
fn empty_queue_claims_nothing() {
    let (k, _) = manual(1);
    let w = WorkerSpec::cpu(1, 1);
    register_worker(&k, &w).unwrap();
    assert_eq!(poll_and_claim(&k, SchedulerPolicy::Fifo, &w, None).unwrap(), None);
}

#[test]
fn concurrent_pollers_claim_a_task_once() {
    for _ in 0..20 {
        let k = Kernel::in_memory().unwrap();
        with_fn(&k, "f", None);
        let id = spawn(&k, "f");
        let barrier = Arc::new(Barrier::new(8));
        let handles: Vec<_> = (1..=8u64)
            .map(|i| {
                let (k, b) = (k.clone(), barrier.clone());
                thread::spawn(move || {
                    let w = WorkerSpec::cpu(i, 1);
                    register_worker(&k, &w).unwrap();
                    b.wait();
                    poll_and_claim(&k, SchedulerPolicy::Fifo, &w, None).unwrap()
                })
            })
            .collect();
        let got: Vec<u64> = handles.into_iter().filter_map(|h| h.join().unwrap()).collect();
        assert_eq!(got, vec![id]);
        assert_eq!(status(&task(&k, id)), TaskStatus::Running);
    }
}

#[test]
fn fifo_claims_in_submit_order() {
    let (k, clock) = manual(10);
    with_fn(&k, "f", None);
    let ids: Vec<u64> = (0..6)
        .map(|_| {
            clock.advance(5);
            spawn(&k, "f")
        })
        .collect();
    let w = WorkerSpec::cpu(1, 1);
    register_worker(&k, &w).unwrap();
    let mut order = Vec::new();
    while let Some(id) = poll_and_claim(&k, SchedulerPolicy::Fifo, &w, None).unwrap() {
        order.push(id);
        assert_eq!(complete(&k, 1, id, true).unwrap(), TaskStatus::Done);
    }
    assert_eq!(order, ids);
}

#[test]
fn claims_respect_cpu_and_accelerator_demands() {
    let (k, _) = manual(10);
    with_fn(&k, "f", None);
    let big = k.task_spawn(&root(), "f", &[], 4, None).unwrap();
    let gpu = k.task_spawn(&root(), "f", &[], 1, Some("gpu")).unwrap();
    let small = WorkerSpec::cpu(1, 1);
    register_worker(&k, &small).unwrap();
    assert_eq!(poll_and_claim(&k, SchedulerPolicy::Fifo, &small, None).unwrap(), None);
    let wide = WorkerSpec::cpu(2, 8);
    register_worker(&k, &wide).unwrap();
    assert_eq!(poll_and_claim(&k, SchedulerPolicy::Fifo, &wide, None).unwrap(), Some(big));
    let g = WorkerSpec::cpu(3, 1).with_accel("gpu");
    register_worker(&k, &g).unwrap();
    assert_eq!(poll_and_claim(&k, SchedulerPolicy::Fifo, &g, None).unwrap(), Some(gpu));
}

#[test]
fn sjf_prefers_functions_with_short_history() {
    let (k, _) = manual(10);
    with_fn(&k, "slow", None);
    with_fn(&k, "fast", None);
    for _ in 0..4 {
        k.emit_metric("slow", RUNTIME_METRIC, 1000.0).unwrap();
        k.emit_metric("fast", RUNTIME_METRIC, 10.0).unwrap();
    }
    let s = spawn(&k, "slow");
    let f = spawn(&k, "fast");
    let w = WorkerSpec::cpu(1, 1);
    register_worker(&k, &w).unwrap();
    assert_eq!(poll_and_claim(&k, SchedulerPolicy::SjfEstimated, &w, None).unwrap(), Some(f));
    complete(&k, 1, f, true).unwrap();
    assert_eq!(poll_and_claim(&k, SchedulerPolicy::SjfEstimated, &w, None).unwrap(), Some(s));
}

#[test]
fn locality_prefers_the_last_function() {
    let (k, _) = manual(10);
    with_fn(&k, "a", None);
    with_fn(&k, "b", None);
    let _a = spawn(&k, "a");
    let b = spawn(&k, "b");
    let w = WorkerSpec::cpu(1, 1);
    register_worker(&k, &w).unwrap();
    assert_eq!(poll_and_claim(&k, SchedulerPolicy::Locality, &w, Some("b")).unwrap(), Some(b));
}

#[test]
fn thousand_noop_tasks_complete_once() {
    let k = Kernel::in_memory().unwrap();
    let reg = UdfRegistry::new();
    reg.register(&k, &root(), "noop", None, true, noop_body()).unwrap();
    let ids: Vec<u64> = (0..1000).map(|_| spawn(&k, "noop")).collect();
    let ex = Executor::start(&k, &reg, ExecutorConfig::cpu_workers(4)).unwrap();
    assert!(ex.wait_idle(Duration::from_secs(60)).unwrap());
    assert_eq!(ex.claims(), 1000);
    ex.shutdown();
    let rows = k.tasks(&root(), None).unwrap();
    assert_eq!(rows.len(), 1000);
    for r in &rows {
        assert_eq!(status(r), TaskStatus::Done);
        assert_eq!(r.get(col::tasks::ATTEMPT).as_i64(), Some(1));
        assert!(r.get(col::tasks::END_TS).as_i64() >= r.get(col::tasks::START_TS).as_i64());
    }
    let seen: HashSet<u64> = rows.iter().filter_map(|r| r.get(col::tasks::TASK_ID).as_u64()).collect();
    assert_eq!(seen, ids.into_iter().collect());
}

#[test]
fn panicking_body_is_retried() {
    let k = Kernel::in_memory().unwrap();
    let reg = UdfRegistry::new();
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    reg.register(
        &k,
        &root(),
        "flaky",
        None,
        false,
        Arc::new(move |input| {
            c.fetch_add(1, Ordering::SeqCst);
            if input.attempt == 1 {
                panic!("first attempt blows up");
            }
            Ok(())
        }),
    )
    .unwrap();
    let id = spawn(&k, "flaky");
    let ex = Executor::start(&k, &reg, ExecutorConfig::cpu_workers(1)).unwrap();
    assert!(ex.wait_idle(Duration::from_secs(10)).unwrap());
    ex.shutdown();
    let r = task(&k, id);
    assert_eq!(status(&r), TaskStatus::Done);
    assert_eq!(r.get(col::tasks::ATTEMPT).as_i64(), Some(2));
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn attempts_are_bounded() {
    let k = Kernel::in_memory().unwrap();
    let reg = UdfRegistry::new();
    reg.register(&k, &root(), "bad", None, false, Arc::new(|_| Err("no".into()))).unwrap();
    let id = spawn(&k, "bad");
    let ex = Executor::start(&k, &reg, ExecutorConfig::cpu_workers(2)).unwrap();
    assert!(ex.wait_idle(Duration::from_secs(10)).unwrap());
    ex.shutdown();
    let r = task(&k, id);
    assert_eq!(status(&r), TaskStatus::Failed);
    assert_eq!(r.get(col::tasks::ATTEMPT).as_f64(), Some(k.knob("max_attempts")));
}

#[test]
fn registry_rejects_duplicate_bodies() {
    let k = Kernel::in_memory().unwrap();
    let reg = UdfRegistry::new();
    reg.register(&k, &root(), "f", None, true, noop_body()).unwrap();
    let err = reg.register(&k, &root(), "f", None, true, noop_body()).unwrap_err();
    assert_eq!(err.code(), "AlreadyExists");
    // A fresh registry may bind a body to a row left by an earlier run.
    UdfRegistry::new().register(&k, &root(), "f", None, true, noop_body()).unwrap();
}

#[test]
fn expired_lease_is_reaped_and_stale_exit_is_fenced() {
    let (k, clock) = manual(1_000);
    with_fn(&k, "f", None);
    let id = spawn(&k, "f");
    let (w1, w2) = (WorkerSpec::cpu(1, 1), WorkerSpec::cpu(2, 1));
    register_worker(&k, &w1).unwrap();
    register_worker(&k, &w2).unwrap();
    assert_eq!(poll_and_claim(&k, SchedulerPolicy::Fifo, &w1, None).unwrap(), Some(id));

    let lease_us = (k.knob("lease_ms") * 1000.0) as i64;
    clock.advance(lease_us / 2);
    assert!(reap_expired(&k, &HashSet::new()).unwrap().is_empty());
    clock.advance(lease_us);
    assert!(reap_expired(&k, &HashSet::from([1])).unwrap().is_empty(), "live workers keep their claims");
    assert_eq!(reap_expired(&k, &HashSet::new()).unwrap(), vec![id]);
    let r = task(&k, id);
    assert_eq!(status(&r), TaskStatus::Runnable);
    assert_eq!(r.get(col::tasks::ATTEMPT).as_i64(), Some(2));

    assert_eq!(poll_and_claim(&k, SchedulerPolicy::Fifo, &w2, None).unwrap(), Some(id));
    assert_eq!(complete(&k, 2, id, true).unwrap(), TaskStatus::Done);
    assert_eq!(complete(&k, 1, id, true).unwrap_err().code(), "InvalidTransition");
    let done = k.tasks(&root(), Some(TaskStatus::Done)).unwrap();
    assert_eq!(done.len(), 1);
    assert_eq!(done[0].get(col::tasks::WORKER_ID).as_u64(), Some(2));
}

#[test]
fn restart_requeues_claims_of_a_crashed_executor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = EngineConfig::at(dir.path(), dbos_core::Durability::Full);
    let ids: Vec<u64> = {
        let e = Engine::open(cfg.clone()).unwrap();
        let k = Kernel::boot(e.clone(), Arc::new(ManualClock::new(1_000))).unwrap();
        with_fn(&k, "f", None);
        let ids: Vec<u64> = (0..5).map(|_| spawn(&k, "f")).collect();
        let w = WorkerSpec::cpu(1, 1);
        register_worker(&k, &w).unwrap();
        // Claimed, then the process dies mid-task.
        assert_eq!(poll_and_claim(&k, SchedulerPolicy::Fifo, &w, None).unwrap(), Some(ids[0]));
        assert_eq!(complete(&k, 1, ids[0], false).unwrap(), TaskStatus::Runnable);
        assert!(claim_for(&k, &w, ids[0]).unwrap());
        e.close().unwrap();
        ids
    };
    let e = Engine::open(cfg).unwrap();
    let k = Kernel::boot(e, Arc::new(ManualClock::new(2_000))).unwrap();
    let reg = UdfRegistry::new();
    reg.register(&k, &root(), "f", None, true, noop_body()).unwrap();
    let ex = Executor::start(&k, &reg, ExecutorConfig::cpu_workers(2)).unwrap();
    assert!(ex.wait_idle(Duration::from_secs(10)).unwrap());
    ex.shutdown();
    for id in &ids {
        assert_eq!(status(&task(&k, *id)), TaskStatus::Done);
    }
    assert_eq!(task(&k, ids[0]).get(col::tasks::ATTEMPT).as_i64(), Some(3));
    assert_eq!(k.tasks(&root(), Some(TaskStatus::Done)).unwrap().len(), 5);
}

/// Starts `n` tasks of `f` on fresh workers at time `t0`.
fn start_batch(k: &Kernel, clock: &ManualClock, f: &str, n: u64, first_worker: u64, t0: i64) -> Vec<u64> {
    clock.set(t0);
    (0..n)
        .map(|i| {
            let id = spawn(k, f);
            let w = WorkerSpec::cpu(first_worker + i, 1);
            register_worker(k, &w).unwrap();
            assert!(claim_for(k, &w, id).unwrap());
            id
        })
        .collect()
}

#[test]
fn stragglers_exceed_k_times_the_median() {
    let (k, clock) = manual(0);
    with_fn(&k, "f", None);
    let t0 = 1_000_000;
    let ids = start_batch(&k, &clock, "f", 10, 1, t0);
    clock.set(t0 + 10_000);
    for (i, id) in ids.iter().take(9).enumerate() {
        complete(&k, 1 + i as u64, *id, true).unwrap();
    }
    assert!(detect_stragglers_at(&k, 3.0, t0 + 25_000).unwrap().is_empty());
    assert!(detect_stragglers_at(&k, 3.0, t0 + 30_000).unwrap().is_empty());
    assert_eq!(detect_stragglers_at(&k, 3.0, t0 + 30_001).unwrap(), vec![ids[9]]);
    assert_eq!(detect_stragglers_at(&k, 3.0, t0 + 200_000).unwrap(), vec![ids[9]]);
    assert!(detect_stragglers_at(&k, 25.0, t0 + 200_000).unwrap().is_empty());
    for bad in [1.0, 0.5, -2.0, f64::NAN] {
        assert_eq!(detect_stragglers_at(&k, bad, t0).unwrap_err().code(), "InvalidArgument");
    }
}

#[test]
fn stragglers_need_three_completions_of_the_same_function() {
    let (k, clock) = manual(0);
    with_fn(&k, "f", None);
    with_fn(&k, "g", None);
    let t0 = 1_000_000;
    let f = start_batch(&k, &clock, "f", 3, 1, t0);
    let g = start_batch(&k, &clock, "g", 4, 10, t0);
    clock.set(t0 + 10_000);
    for (i, id) in f.iter().take(2).enumerate() {
        complete(&k, 1 + i as u64, *id, true).unwrap();
    }
    for (i, id) in g.iter().take(3).enumerate() {
        complete(&k, 10 + i as u64, *id, true).unwrap();
    }
    // f has two completions only; g has three.
    assert_eq!(detect_stragglers_at(&k, 2.0, t0 + 1_000_000).unwrap(), vec![g[3]]);
}

#[test]
fn straggler_detection_matches_a_median_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let (k, clock) = manual(0);
        with_fn(&k, "f", None);
        let n = rng.gen_range(3..12);
        let t0 = 1_000_000;
        let ids = start_batch(&k, &clock, "f", n + 3, 1, t0);
        let mut runtimes: Vec<i64> = (0..n).map(|_| rng.gen_range(1_000..50_000)).collect();
        let mut order: Vec<usize> = (0..n as usize).collect();
        order.sort_by_key(|&i| runtimes[i]);
        for &i in &order {
            clock.set(t0 + runtimes[i]);
            complete(&k, 1 + i as u64, ids[i], true).unwrap();
        }
        runtimes.sort();
        let m = runtimes.len();
        let median = if m % 2 == 1 { runtimes[m / 2] as f64 } else { (runtimes[m / 2 - 1] + runtimes[m / 2]) as f64 / 2.0 };
        let now = t0 + rng.gen_range(0..200_000);
        let kf = rng.gen_range(1.5..6.0);
        let expected: Vec<u64> = if (now - t0) as f64 > kf * median { ids[n as usize..].to_vec() } else { vec![] };
        assert_eq!(detect_stragglers_at(&k, kf, now).unwrap(), expected);
    }
}

#[test]
fn accelerated_placement_picks_an_idle_worker_of_the_class() {
    let (k, _) = manual(10);
    with_fn(&k, "train", Some("gpu"));
    with_fn(&k, "plain", None);
    for w in [WorkerSpec::cpu(1, 4), WorkerSpec::cpu(2, 4).with_accel("gpu"), WorkerSpec::cpu(3, 4).with_accel("gpu")] {
        register_worker(&k, &w).unwrap();
    }
    let a = spawn(&k, "train");
    assert_eq!(place_accelerated(&k, a).unwrap(), Some(2));
    assert!(claim_for(&k, &WorkerSpec::cpu(2, 4).with_accel("gpu"), a).unwrap());
    let b = spawn(&k, "train");
    assert_eq!(place_accelerated(&k, b).unwrap(), Some(3));
    assert!(claim_for(&k, &WorkerSpec::cpu(3, 4).with_accel("gpu"), b).unwrap());
    let c = spawn(&k, "train");
    assert_eq!(place_accelerated(&k, c).unwrap(), None);
    assert_eq!(status(&task(&k, c)), TaskStatus::Runnable);

    let tpu = k.task_spawn(&root(), "plain", &[], 1, Some("tpu")).unwrap();
    assert_eq!(place_accelerated(&k, tpu).unwrap_err().code(), "NoSuchAcceleratorClass");
    let p = spawn(&k, "plain");
    assert_eq!(place_accelerated(&k, p).unwrap_err().code(), "InvalidArgument");
}

fn mixed_workload() -> (Vec<WorkerSpec>, Vec<SimTask>) {
    let mut workers: Vec<WorkerSpec> = (1..=4).map(|i| WorkerSpec::cpu(i, 1)).collect();
    workers.extend((5..=8).map(|i| WorkerSpec::cpu(i, 1).with_accel("gpu")));
    let mut tasks = Vec::new();
    for i in 0..200 {
        if i % 2 == 0 {
            tasks.push(SimTask { function: "cpu_job".into(), base_us: 1_000, accel: None });
        } else {
            tasks.push(SimTask { function: "gpu_job".into(), base_us: 10_000, accel: Some("gpu".into()) });
        }
    }
    (workers, tasks)
}

#[test]
fn accelerated_placement_beats_random_placement() {
    let (workers, tasks) = mixed_workload();
    let acc = simulate(&workers, &tasks, Placement::Accelerated).unwrap();
    assert_eq!(acc.completed, 200);
    assert_eq!(acc.accel_on_cpu, 0);
    for seed in 0..5 {
        let rnd = simulate(&workers, &tasks, Placement::Random(seed)).unwrap();
        assert_eq!(rnd.completed, 200);
        assert!(rnd.accel_on_cpu > 0);
        assert!(acc.makespan_us <= rnd.makespan_us, "seed {seed}: {} > {}", acc.makespan_us, rnd.makespan_us);
    }
}

#[test]
fn policy_switch_follows_runtime_variance() {
    let (k, clock) = manual(1_000_000);
    assert_eq!(choose_policy(&k, 1_000_000, SchedulerPolicy::Locality).unwrap(), SchedulerPolicy::Locality);

    for _ in 0..100 {
        k.emit_metric("f", RUNTIME_METRIC, 500.0).unwrap();
    }
    assert_eq!(choose_policy(&k, 1_000_000, SchedulerPolicy::SjfEstimated).unwrap(), SchedulerPolicy::Fifo);

    clock.advance(10_000_000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sample = Vec::new();
    for _ in 0..200 {
        let v = if rng.gen_bool(0.2) { 100_000.0 } else { 1_000.0 };
        sample.push(v);
        k.emit_metric("g", RUNTIME_METRIC, v).unwrap();
    }
    let cv = coefficient_of_variation(&sample).unwrap();
    assert!(cv > k.knob("cv_threshold"), "cv {cv}");
    assert_eq!(choose_policy(&k, 1_000_000, SchedulerPolicy::Fifo).unwrap(), SchedulerPolicy::SjfEstimated);
}

#[test]
fn executor_emits_runtime_and_queue_metrics() {
    let k = Kernel::in_memory().unwrap();
    let reg = UdfRegistry::new();
    reg.register(&k, &root(), "noop", None, true, noop_body()).unwrap();
    for _ in 0..50 {
        spawn(&k, "noop");
    }
    let ex = Executor::start(&k, &reg, ExecutorConfig::cpu_workers(2)).unwrap();
    assert!(ex.wait_idle(Duration::from_secs(10)).unwrap());
    thread::sleep(Duration::from_millis(300));
    ex.shutdown();
    let txn = k.engine().begin().unwrap();
    let metrics = txn.scan("metrics", &dbos_core::ScanOptions::new()).unwrap().rows;
    let count = |name: &str| metrics.iter().filter(|r| r.get(2).as_str() == Some(name)).count();
    assert_eq!(count(RUNTIME_METRIC), 50);
    assert_eq!(count("task_latency_us"), 50);
    assert!(count("queue_depth") >= 1);
    assert!(count("claims_per_sec") >= 1);
}
