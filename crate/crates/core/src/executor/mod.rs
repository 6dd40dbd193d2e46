//! Serverless task runtime. Workers coordinate only through transactions
//! on the `tasks` and `workers` tables: a claim is an update of a runnable
//! row chosen by a query, and a dead worker's claims expire through leases.

pub mod policy;
pub mod sim;

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::RwLock;

use crate::engine::{ScanOptions, Transaction};
use crate::error::{Error, Result};
use crate::os::schema::{col, TASKS, WORKERS};
use crate::predicate::Predicate;
use crate::syscall::{Kernel, SyscallContext, TaskStatus};
use crate::value::{Row, Value};

pub use policy::{choose_policy, SchedulerPolicy};

/// What a task body gets to work with.
pub struct TaskInput<'a> {
    pub kernel: &'a Kernel,
    /// Context of the task's owner, tagged with the task id.
    pub ctx: SyscallContext,
    pub task_id: u64,
    pub args: &'a [u8],
    pub attempt: u32,
}

pub type TaskBody = Arc<dyn Fn(&TaskInput<'_>) -> std::result::Result<(), String> + Send + Sync>;

#[derive(Clone)]
pub struct Udf {
    pub body: TaskBody,
    pub accel: Option<String>,
    pub is_pure: bool,
}

/// Executable bodies for function names, shared by every worker.
#[derive(Clone, Default)]
pub struct UdfRegistry {
    map: Arc<RwLock<HashMap<String, Udf>>>,
}

impl UdfRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds `name` to `body` and makes sure the `functions` row exists
    /// (one left by an earlier run is reused).
    pub fn register(
        &self,
        kernel: &Kernel,
        ctx: &SyscallContext,
        name: &str,
        accel: Option<&str>,
        is_pure: bool,
        body: TaskBody,
    ) -> Result<()> {
        let mut map = self.map.write();
        if map.contains_key(name) {
            return Err(Error::AlreadyExists(format!("function {name}")));
        }
        match kernel.register_function(ctx, name, accel, is_pure) {
            Ok(_) | Err(Error::AlreadyExists(_)) => {}
            Err(e) => return Err(e),
        }
        map.insert(name.to_string(), Udf { body, accel: accel.map(str::to_string), is_pure });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Udf> {
        self.map.read().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.map.read().keys().cloned().collect();
        v.sort();
        v
    }
}

/// A body that does nothing and succeeds.
pub fn noop_body() -> TaskBody {
    Arc::new(|_| Ok(()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerSpec {
    pub worker_id: u64,
    pub node_id: u64,
    pub cores: u32,
    pub accel: Option<String>,
}

impl WorkerSpec {
    pub fn cpu(worker_id: u64, cores: u32) -> Self {
        WorkerSpec { worker_id, node_id: 0, cores, accel: None }
    }

    pub fn with_accel(mut self, accel: &str) -> Self {
        self.accel = Some(accel.to_string());
        self
    }

    fn can_run(&self, task: &Row) -> bool {
        let cpu = task.get(col::tasks::DEMAND_CPU).as_i64().unwrap_or(1);
        let accel = task.get(col::tasks::DEMAND_ACCEL).as_str();
        cpu <= i64::from(self.cores) && (accel.is_none() || accel == self.accel.as_deref())
    }
}

/// Inserts or refreshes a worker row as idle.
pub fn register_worker(kernel: &Kernel, spec: &WorkerSpec) -> Result<()> {
    kernel.syscall(|txn| {
        txn.upsert(
            WORKERS,
            Row::new(vec![
                spec.worker_id.into(),
                spec.node_id.into(),
                i64::from(spec.cores).into(),
                spec.accel.clone().into(),
                false.into(),
                Value::Null,
                Value::Timestamp(kernel.now_us()),
            ]),
        )
    })
}

/// Worker rows in id order.
pub fn workers(kernel: &Kernel) -> Result<Vec<(WorkerSpec, bool)>> {
    let txn = kernel.engine().begin()?;
    Ok(txn.scan(WORKERS, &ScanOptions::new())?.rows.iter().map(worker_from_row).collect())
}

fn worker_from_row(r: &Row) -> (WorkerSpec, bool) {
    use col::workers::*;
    (
        WorkerSpec {
            worker_id: r.get(WORKER_ID).as_u64().unwrap_or(0),
            node_id: r.get(NODE_ID).as_u64().unwrap_or(0),
            cores: r.get(CORES).as_i64().unwrap_or(0) as u32,
            accel: r.get(ACCEL).as_str().map(str::to_string),
        },
        r.get(BUSY).as_bool().unwrap_or(false),
    )
}

fn mark_running(kernel: &Kernel, txn: &mut Transaction, worker: &WorkerSpec, mut task: Row) -> Result<u64> {
    use col::tasks::*;
    let id = task.get(TASK_ID).as_u64().unwrap_or(0);
    let now = kernel.now_us();
    let lease = now + (kernel.knob("lease_ms") * 1000.0) as i64;
    task.0[STATUS] = TaskStatus::Running.as_str().into();
    task.0[WORKER_ID] = worker.worker_id.into();
    task.0[START_TS] = Value::Timestamp(now);
    task.0[LEASE_TS] = Value::Timestamp(lease);
    txn.update(TASKS, &[id.into()], task)?;
    let mut w = txn
        .get(WORKERS, &[worker.worker_id.into()])?
        .ok_or_else(|| Error::NotFound(format!("worker {}", worker.worker_id)))?;
    w.0[col::workers::BUSY] = true.into();
    w.0[col::workers::CURRENT_TASK] = id.into();
    w.0[col::workers::HEARTBEAT_TS] = Value::Timestamp(now);
    txn.update(WORKERS, &[worker.worker_id.into()], w)?;
    Ok(id)
}

/// Claims one runnable task the worker can run, chosen by `policy` among
/// the first `sched_window` runnable tasks. Losing a race to another worker
/// moves on to the next candidate, preferring this worker's shard
/// (task_id mod `shards`).
pub fn poll_and_claim(kernel: &Kernel, policy: SchedulerPolicy, worker: &WorkerSpec, last_function: Option<&str>) -> Result<Option<u64>> {
    let window = kernel.knob("sched_window").max(1.0) as usize;
    let shards = kernel.knob("shards").max(1.0) as u64;
    let mut lost: HashSet<u64> = HashSet::new();
    let mut attempt = 0;
    loop {
        let mut txn = kernel.engine().begin()?;
        let opts = ScanOptions::new().filter(Predicate::eq("status", TaskStatus::Runnable.as_str())).limit(window + lost.len());
        let mut candidates: Vec<Row> = txn
            .scan(TASKS, &opts)?
            .rows
            .into_iter()
            .filter(|r| worker.can_run(r) && !lost.contains(&r.get(col::tasks::TASK_ID).as_u64().unwrap_or(0)))
            .collect();
        if candidates.is_empty() {
            return Ok(None);
        }
        // Accelerator workers serve their own class first.
        if worker.accel.is_some() && candidates.iter().any(|r| !r.get(col::tasks::DEMAND_ACCEL).is_null()) {
            candidates.retain(|r| !r.get(col::tasks::DEMAND_ACCEL).is_null());
        }
        policy.rank(&txn, &mut candidates, last_function)?;
        let pick = if lost.is_empty() {
            0
        } else {
            let shard = worker.worker_id % shards;
            candidates
                .iter()
                .position(|r| r.get(col::tasks::TASK_ID).as_u64().unwrap_or(0) % shards == shard)
                .unwrap_or(0)
        };
        let task = candidates.swap_remove(pick);
        let id = task.get(col::tasks::TASK_ID).as_u64().unwrap_or(0);
        let res = mark_running(kernel, &mut txn, worker, task).and_then(|_| txn.commit());
        match res {
            Ok(_) => return Ok(Some(id)),
            Err(e) if e.is_write_conflict() => {
                lost.insert(id);
                attempt += 1;
                crate::engine::backoff(attempt.min(3));
            }
            Err(e) => return Err(e),
        }
    }
}

/// Claims a specific runnable task for a specific worker. Returns false if
/// the task is no longer runnable.
pub fn claim_for(kernel: &Kernel, worker: &WorkerSpec, task_id: u64) -> Result<bool> {
    kernel.syscall(|txn| {
        let Some(task) = txn.get(TASKS, &[task_id.into()])? else {
            return Ok(false);
        };
        if task.get(col::tasks::STATUS).as_str() != Some(TaskStatus::Runnable.as_str()) {
            return Ok(false);
        }
        mark_running(kernel, txn, worker, task)?;
        Ok(true)
    })
}

/// Records the end of a task run by `worker`: done, or failed and requeued
/// while attempts remain. Emits runtime and latency metrics. Fails with
/// `InvalidTransition` if the claim was reaped in the meantime.
pub fn complete(kernel: &Kernel, worker: u64, task_id: u64, ok: bool) -> Result<TaskStatus> {
    let max_attempts = kernel.knob("max_attempts").max(1.0) as i64;
    kernel.syscall(|txn| {
        let row = txn.get(TASKS, &[task_id.into()])?.ok_or_else(|| Error::NotFound(format!("task {task_id}")))?;
        let outcome = if ok { TaskStatus::Done } else { TaskStatus::Failed };
        let row = kernel.finish_in(txn, row, outcome, Some(worker))?;
        record_run_metrics(kernel, txn, &row)?;
        let attempt = row.get(col::tasks::ATTEMPT).as_i64().unwrap_or(1);
        if !ok && attempt < max_attempts {
            kernel.requeue_in(txn, row)?;
            return Ok(TaskStatus::Runnable);
        }
        Ok(outcome)
    })
}

fn record_run_metrics(kernel: &Kernel, txn: &mut Transaction, row: &Row) -> Result<()> {
    use col::tasks::*;
    let f = row.get(FUNCTION_NAME).as_str().unwrap_or_default();
    let end = row.get(END_TS).as_i64().unwrap_or(0);
    let start = row.get(START_TS).as_i64().unwrap_or(end);
    let submit = row.get(SUBMIT_TS).as_i64().unwrap_or(start);
    kernel.put_metric(txn, f, policy::RUNTIME_METRIC, (end - start) as f64)?;
    kernel.put_metric(txn, f, "task_latency_us", (end - submit) as f64)
}

/// Fails running tasks whose lease has expired and whose worker is not in
/// `live`, requeueing them while attempts remain. Returns the reaped ids.
pub fn reap_expired(kernel: &Kernel, live: &HashSet<u64>) -> Result<Vec<u64>> {
    let now = kernel.now_us();
    let max_attempts = kernel.knob("max_attempts").max(1.0) as i64;
    let expired: Vec<u64> = {
        let txn = kernel.engine().begin()?;
        let opts = ScanOptions::new().filter(Predicate::eq("status", TaskStatus::Running.as_str()));
        txn.scan(TASKS, &opts)?
            .rows
            .iter()
            .filter(|r| {
                let lease = r.get(col::tasks::LEASE_TS).as_i64().unwrap_or(i64::MAX);
                let w = r.get(col::tasks::WORKER_ID).as_u64();
                lease < now && !w.is_some_and(|w| live.contains(&w))
            })
            .filter_map(|r| r.get(col::tasks::TASK_ID).as_u64())
            .collect()
    };
    let mut reaped = Vec::new();
    for id in expired {
        let done = kernel.syscall(|txn| {
            let Some(row) = txn.get(TASKS, &[id.into()])? else { return Ok(false) };
            if row.get(col::tasks::STATUS).as_str() != Some(TaskStatus::Running.as_str())
                || row.get(col::tasks::LEASE_TS).as_i64().unwrap_or(i64::MAX) >= now
            {
                return Ok(false);
            }
            let row = kernel.finish_in(txn, row, TaskStatus::Failed, None)?;
            if row.get(col::tasks::ATTEMPT).as_i64().unwrap_or(1) < max_attempts {
                kernel.requeue_in(txn, row)?;
            }
            Ok(true)
        })?;
        if done {
            reaped.push(id);
        }
    }
    Ok(reaped)
}

/// Fails and requeues running tasks still held by `workers` from before a
/// restart, whatever their lease says.
pub fn release_stale_claims(kernel: &Kernel, workers: &HashSet<u64>) -> Result<Vec<u64>> {
    let max_attempts = kernel.knob("max_attempts").max(1.0) as i64;
    kernel.syscall(|txn| {
        let opts = ScanOptions::new().filter(Predicate::eq("status", TaskStatus::Running.as_str()));
        let held: Vec<Row> = txn
            .scan(TASKS, &opts)?
            .rows
            .into_iter()
            .filter(|r| r.get(col::tasks::WORKER_ID).as_u64().is_some_and(|w| workers.contains(&w)))
            .collect();
        let mut ids = Vec::new();
        for row in held {
            ids.extend(row.get(col::tasks::TASK_ID).as_u64());
            let row = kernel.finish_in(txn, row, TaskStatus::Failed, None)?;
            if row.get(col::tasks::ATTEMPT).as_i64().unwrap_or(1) < max_attempts {
                kernel.requeue_in(txn, row)?;
            }
        }
        Ok(ids)
    })
}

/// Running tasks whose elapsed time at `now` exceeds `k` times the median
/// runtime of completed tasks of the same function. Functions with fewer
/// than three completions are never flagged.
pub fn detect_stragglers_at(kernel: &Kernel, k: f64, now: i64) -> Result<Vec<u64>> {
    if k.is_nan() || k <= 1.0 {
        return Err(Error::InvalidArgument(format!("straggler factor must exceed 1, got {k}")));
    }
    use col::tasks::*;
    let txn = kernel.engine().begin()?;
    let by_status = |s: TaskStatus| txn.scan(TASKS, &ScanOptions::new().filter(Predicate::eq("status", s.as_str())));
    let mut done: HashMap<String, Vec<f64>> = HashMap::new();
    for r in by_status(TaskStatus::Done)?.rows {
        if let (Some(s), Some(e)) = (r.get(START_TS).as_i64(), r.get(END_TS).as_i64()) {
            done.entry(r.get(FUNCTION_NAME).as_str().unwrap_or_default().to_string()).or_default().push((e - s) as f64);
        }
    }
    let medians: HashMap<String, f64> = done
        .into_iter()
        .filter(|(_, v)| v.len() >= 3)
        .filter_map(|(f, mut v)| crate::engine::median(&mut v).map(|m| (f, m)))
        .collect();
    Ok(by_status(TaskStatus::Running)?
        .rows
        .iter()
        .filter(|r| {
            let Some(m) = medians.get(r.get(FUNCTION_NAME).as_str().unwrap_or_default()) else { return false };
            let elapsed = (now - r.get(START_TS).as_i64().unwrap_or(now)) as f64;
            elapsed > k * m
        })
        .filter_map(|r| r.get(TASK_ID).as_u64())
        .collect())
}

pub fn detect_stragglers(kernel: &Kernel, k: f64) -> Result<Vec<u64>> {
    detect_stragglers_at(kernel, k, kernel.now_us())
}

/// Picks an idle worker of the task's accelerator class. `None` means every
/// such worker is busy and the task stays runnable.
pub fn place_accelerated(kernel: &Kernel, task_id: u64) -> Result<Option<u64>> {
    let txn = kernel.engine().begin()?;
    let task = txn.get(TASKS, &[task_id.into()])?.ok_or_else(|| Error::NotFound(format!("task {task_id}")))?;
    let class = task
        .get(col::tasks::DEMAND_ACCEL)
        .as_str()
        .ok_or_else(|| Error::InvalidArgument(format!("task {task_id} demands no accelerator")))?
        .to_string();
    let all: Vec<(WorkerSpec, bool)> = txn.scan(WORKERS, &ScanOptions::new())?.rows.iter().map(worker_from_row).collect();
    let matching: Vec<&(WorkerSpec, bool)> = all.iter().filter(|(w, _)| w.accel.as_deref() == Some(class.as_str())).collect();
    if matching.is_empty() {
        return Err(Error::NoSuchAcceleratorClass(class));
    }
    // Idle workers have zero queue wait; among those take the lowest id.
    Ok(matching.iter().filter(|(w, busy)| !busy && w.can_run(&task)).map(|(w, _)| w.worker_id).min())
}

#[derive(Clone, Debug)]
pub struct ExecutorConfig {
    pub workers: Vec<WorkerSpec>,
    pub policy: SchedulerPolicy,
    /// When set, the policy is re-chosen from this trailing window of
    /// runtimes on every monitor tick.
    pub adapt_window_us: Option<i64>,
}

impl ExecutorConfig {
    pub fn cpu_workers(n: usize) -> Self {
        ExecutorConfig {
            workers: (1..=n as u64).map(|i| WorkerSpec::cpu(i, 1)).collect(),
            policy: SchedulerPolicy::Fifo,
            adapt_window_us: None,
        }
    }
}

/// A running worker pool plus a monitor thread that reaps expired leases,
/// refreshes heartbeats and samples queue metrics.
pub struct Executor {
    kernel: Kernel,
    stop: Arc<AtomicBool>,
    policy: Arc<RwLock<SchedulerPolicy>>,
    claims: Arc<AtomicU64>,
    threads: Vec<JoinHandle<()>>,
}

impl Executor {
    pub fn start(kernel: &Kernel, registry: &UdfRegistry, config: ExecutorConfig) -> Result<Executor> {
        for w in &config.workers {
            register_worker(kernel, w)?;
        }
        let ids: HashSet<u64> = config.workers.iter().map(|w| w.worker_id).collect();
        release_stale_claims(kernel, &ids)?;
        let stop = Arc::new(AtomicBool::new(false));
        let policy = Arc::new(RwLock::new(config.policy));
        let claims = Arc::new(AtomicU64::new(0));
        let mut threads = Vec::new();
        for w in config.workers.clone() {
            let (k, reg, stop, policy, claims) = (kernel.clone(), registry.clone(), stop.clone(), policy.clone(), claims.clone());
            threads.push(
                thread::Builder::new()
                    .name(format!("worker-{}", w.worker_id))
                    .spawn(move || worker_loop(&k, &reg, &w, &stop, &policy, &claims))?,
            );
        }
        let live: HashSet<u64> = config.workers.iter().map(|w| w.worker_id).collect();
        let (k, stop2, policy2, claims2) = (kernel.clone(), stop.clone(), policy.clone(), claims.clone());
        let adapt = config.adapt_window_us;
        threads.push(
            thread::Builder::new()
                .name("executor-monitor".into())
                .spawn(move || monitor_loop(&k, &live, &stop2, &policy2, &claims2, adapt))?,
        );
        Ok(Executor { kernel: kernel.clone(), stop, policy, claims, threads })
    }

    pub fn policy(&self) -> SchedulerPolicy {
        *self.policy.read()
    }

    pub fn set_policy(&self, p: SchedulerPolicy) {
        *self.policy.write() = p;
    }

    /// Total successful claims by this executor's workers.
    pub fn claims(&self) -> u64 {
        self.claims.load(Ordering::Relaxed)
    }

    /// Blocks until no task is runnable or running, or `timeout` passes.
    pub fn wait_idle(&self, timeout: Duration) -> Result<bool> {
        let deadline = Instant::now() + timeout;
        loop {
            let txn = self.kernel.engine().begin()?;
            let busy = [TaskStatus::Runnable, TaskStatus::Running].iter().try_fold(false, |acc, s| {
                let opts = ScanOptions::new().filter(Predicate::eq("status", s.as_str())).limit(1);
                Ok::<_, Error>(acc || !txn.scan(TASKS, &opts)?.rows.is_empty())
            })?;
            drop(txn);
            if !busy {
                return Ok(true);
            }
            if Instant::now() >= deadline {
                return Ok(false);
            }
            thread::sleep(Duration::from_millis(1));
        }
    }

    /// Stops all threads after their current task and joins them.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

fn worker_loop(
    kernel: &Kernel,
    registry: &UdfRegistry,
    worker: &WorkerSpec,
    stop: &AtomicBool,
    policy: &RwLock<SchedulerPolicy>,
    claims: &AtomicU64,
) {
    let mut last_function: Option<String> = None;
    while !stop.load(Ordering::Relaxed) {
        let p = *policy.read();
        match poll_and_claim(kernel, p, worker, last_function.as_deref()) {
            Ok(Some(task_id)) => {
                claims.fetch_add(1, Ordering::Relaxed);
                last_function = run_claimed(kernel, registry, worker, task_id).ok().flatten();
            }
            Ok(None) => thread::sleep(Duration::from_micros((kernel.knob("poll_interval_ms") * 1000.0) as u64)),
            Err(e) => {
                log::warn!("worker {} poll failed: {e}", worker.worker_id);
                thread::sleep(Duration::from_millis(1));
            }
        }
    }
}

/// Runs one claimed task's body and records the outcome. Returns the
/// function name that ran.
fn run_claimed(kernel: &Kernel, registry: &UdfRegistry, worker: &WorkerSpec, task_id: u64) -> Result<Option<String>> {
    use col::tasks::*;
    let row = kernel.engine().begin()?.get(TASKS, &[task_id.into()])?;
    let Some(row) = row else { return Ok(None) };
    let function = row.get(FUNCTION_NAME).as_str().unwrap_or_default().to_string();
    let ctx = SyscallContext::new(
        row.get(OWNER).as_str().unwrap_or("root"),
        row.get(CONTAINER_ID).as_u64().unwrap_or(0),
        "task",
    )
    .with_task(task_id);
    let ok = match registry.get(&function) {
        Some(udf) => {
            let input = TaskInput {
                kernel,
                ctx,
                task_id,
                args: row.get(ARGS).as_bytes().unwrap_or_default(),
                attempt: row.get(ATTEMPT).as_i64().unwrap_or(1) as u32,
            };
            matches!(catch_unwind(AssertUnwindSafe(|| (udf.body)(&input))), Ok(Ok(())))
        }
        None => false,
    };
    match complete(kernel, worker.worker_id, task_id, ok) {
        Ok(_) | Err(Error::InvalidTransition { .. }) => Ok(Some(function)),
        Err(e) => Err(e),
    }
}

fn monitor_loop(
    kernel: &Kernel,
    live: &HashSet<u64>,
    stop: &AtomicBool,
    policy: &RwLock<SchedulerPolicy>,
    claims: &AtomicU64,
    adapt: Option<i64>,
) {
    let mut last_sample = Instant::now();
    let mut last_claims = 0;
    while !stop.load(Ordering::Relaxed) {
        let tick = Duration::from_micros((kernel.knob("lease_ms") * 250.0).clamp(1000.0, 50_000.0) as u64);
        thread::sleep(tick);
        if let Err(e) = reap_expired(kernel, live) {
            log::warn!("lease reaper failed: {e}");
        }
        let elapsed = last_sample.elapsed();
        if elapsed >= Duration::from_millis(200) {
            let n = claims.load(Ordering::Relaxed);
            let rate = (n - last_claims) as f64 / elapsed.as_secs_f64();
            let res = (|| -> Result<()> {
                let txn = kernel.engine().begin()?;
                let depth = txn
                    .aggregate(TASKS, &[], &[crate::engine::AggSpec::count_all()], Some(&Predicate::eq("status", "runnable")))?
                    .rows[0]
                    .get(0)
                    .as_f64()
                    .unwrap_or(0.0);
                drop(txn);
                kernel.emit_metric("scheduler", "queue_depth", depth)?;
                kernel.emit_metric("scheduler", "claims_per_sec", rate)?;
                if let Some(w) = adapt {
                    let current = *policy.read();
                    *policy.write() = choose_policy(kernel, w, current)?;
                }
                Ok(())
            })();
            if let Err(e) = res {
                log::warn!("scheduler sampling failed: {e}");
            }
            last_sample = Instant::now();
            last_claims = n;
        }
    }
}
