//! Discrete-event runs of the executor over real tables and a manual clock.
//! Task bodies are replaced by a fixed runtime, divided by the
//! `accel_speedup` knob when a task lands on a worker of its accelerator
//! class.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Engine;
use crate::error::Result;
use crate::os::schema::{col, TASKS};
use crate::os::ManualClock;
use crate::syscall::{Kernel, SyscallContext};

use super::{claim_for, complete, poll_and_claim, register_worker, SchedulerPolicy, WorkerSpec};

#[derive(Clone, Debug)]
pub struct SimTask {
    pub function: String,
    pub base_us: i64,
    pub accel: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Tasks are claimed through the scheduler query, so accelerator
    /// demands are honoured.
    Accelerated,
    /// Each task is pinned to a uniformly random worker up front.
    Random(u64),
}

#[derive(Clone, Debug, Default)]
pub struct SimReport {
    pub makespan_us: i64,
    /// Accelerator-demanding tasks that ran on a worker without that class.
    pub accel_on_cpu: usize,
    pub completed: usize,
    /// Per-task runtime in spawn order.
    pub runtimes: Vec<i64>,
}

pub fn simulate(workers: &[WorkerSpec], tasks: &[SimTask], placement: Placement) -> Result<SimReport> {
    const START: i64 = 1_000_000;
    let clock = Arc::new(ManualClock::new(START));
    let kernel = Kernel::boot(Engine::in_memory(), clock.clone())?;
    let root = SyscallContext::root();
    let speedup = kernel.knob("accel_speedup").max(1.0);
    for w in workers {
        register_worker(&kernel, w)?;
    }
    let mut ids = Vec::with_capacity(tasks.len());
    for t in tasks {
        if kernel.function_id(&t.function).is_err() {
            kernel.register_function(&root, &t.function, t.accel.as_deref(), true)?;
        }
        ids.push(kernel.task_spawn(&root, &t.function, &[], 1, t.accel.as_deref())?);
    }
    let index_of = |id: u64| ids.iter().position(|&x| x == id).expect("spawned task");

    let mut queues: Vec<VecDeque<u64>> = vec![VecDeque::new(); workers.len()];
    if let Placement::Random(seed) = placement {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &id in &ids {
            queues[rng.gen_range(0..workers.len())].push_back(id);
        }
    }

    let mut report = SimReport { runtimes: vec![0; tasks.len()], ..Default::default() };
    // (finish time, worker index, task id)
    let mut running: BinaryHeap<Reverse<(i64, usize, u64)>> = BinaryHeap::new();
    let mut idle: Vec<usize> = (0..workers.len()).collect();
    let mut now = START;
    loop {
        clock.set(now);
        idle.sort_unstable();
        let mut still_idle = Vec::new();
        for wi in idle.drain(..) {
            let w = &workers[wi];
            let claimed = match placement {
                Placement::Accelerated => poll_and_claim(&kernel, SchedulerPolicy::Fifo, w, None)?,
                Placement::Random(_) => match queues[wi].pop_front() {
                    Some(id) if claim_for(&kernel, w, id)? => Some(id),
                    _ => None,
                },
            };
            match claimed {
                Some(id) => {
                    let t = &tasks[index_of(id)];
                    let on_accel = t.accel.is_some() && t.accel == w.accel;
                    if t.accel.is_some() && !on_accel {
                        report.accel_on_cpu += 1;
                    }
                    let runtime = if on_accel { ((t.base_us as f64) / speedup).round() as i64 } else { t.base_us };
                    running.push(Reverse((now + runtime.max(1), wi, id)));
                }
                None => still_idle.push(wi),
            }
        }
        idle = still_idle;
        let Some(Reverse((t, wi, id))) = running.pop() else { break };
        now = t;
        clock.set(now);
        complete(&kernel, workers[wi].worker_id, id, true)?;
        report.completed += 1;
        idle.push(wi);
        // Drain every completion at the same instant before claiming again.
        while let Some(Reverse((t2, _, _))) = running.peek() {
            if *t2 != now {
                break;
            }
            let Reverse((_, wj, id2)) = running.pop().expect("peeked");
            complete(&kernel, workers[wj].worker_id, id2, true)?;
            report.completed += 1;
            idle.push(wj);
        }
    }

    let txn = kernel.engine().begin()?;
    for (i, &id) in ids.iter().enumerate() {
        if let Some(r) = txn.get(TASKS, &[id.into()])? {
            let s = r.get(col::tasks::START_TS).as_i64().unwrap_or(0);
            let e = r.get(col::tasks::END_TS).as_i64().unwrap_or(s);
            report.runtimes[i] = e - s;
            report.makespan_us = report.makespan_us.max(e - START);
        }
    }
    Ok(report)
}
