//! Throughput benchmarks. Every suite runs on a scratch kernel so the
//! measured system is never polluted; results are returned, and can be
//! written to a kernel's `metrics` table with [`record`].

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::engine::{Durability, Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::executor::{noop_body, Executor, ExecutorConfig, UdfRegistry};
use crate::os::schema::col;
use crate::os::SystemClock;
use crate::schema::Schema;
use crate::syscall::{Kernel, SyscallContext, TaskStatus};
use crate::value::{Row, ValueKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Txn,
    Launch,
    Ipc,
    Fs,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Txn, Suite::Launch, Suite::Ipc, Suite::Fs];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Txn => "txn",
            Suite::Launch => "launch",
            Suite::Ipc => "ipc",
            Suite::Fs => "fs",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown bench suite {s:?} (txn, launch, ipc, fs)")))
    }
}

/// Workload sizes. `Default` is the documented full-size shape.
#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub durability: Durability,
    pub txn_rows: usize,
    pub txn_reads: usize,
    pub txn_writes: usize,
    pub launch_tasks: usize,
    pub workers: usize,
    pub ipc_pairs: usize,
    pub ipc_messages: usize,
    pub fs_files: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            durability: Durability::Off,
            txn_rows: 10_000,
            txn_reads: 200_000,
            txn_writes: 50_000,
            launch_tasks: 10_000,
            workers: 4,
            ipc_pairs: 8,
            ipc_messages: 2_000,
            fs_files: 2_000,
            seed: 42,
        }
    }
}

impl BenchConfig {
    /// Shrinks every workload by `factor` (at least one op each).
    pub fn scaled(mut self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor) as usize).max(1);
        self.txn_rows = s(self.txn_rows);
        self.txn_reads = s(self.txn_reads);
        self.txn_writes = s(self.txn_writes);
        self.launch_tasks = s(self.launch_tasks);
        self.ipc_messages = s(self.ipc_messages);
        self.fs_files = s(self.fs_files);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub suite: String,
    pub metric: String,
    pub ops: usize,
    pub seconds: f64,
    pub ops_per_sec: f64,
    pub p50_us: f64,
    pub p99_us: f64,
}

impl BenchResult {
    fn new(suite: Suite, metric: &str, elapsed: Duration, mut lat_us: Vec<f64>) -> Self {
        lat_us.sort_by(f64::total_cmp);
        let secs = elapsed.as_secs_f64().max(1e-9);
        BenchResult {
            suite: suite.as_str().into(),
            metric: metric.into(),
            ops: lat_us.len(),
            seconds: secs,
            ops_per_sec: lat_us.len() as f64 / secs,
            p50_us: percentile(&lat_us, 50.0),
            p99_us: percentile(&lat_us, 99.0),
        }
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }
}

/// Fixed-column text header matching [`BenchResult`]'s `Display`.
pub const TEXT_HEADER: &str = "suite   metric        ops        ops/sec     p50_us     p99_us";

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<7} {:<13} {:>9} {:>12.0} {:>10.1} {:>10.1}",
            self.suite, self.metric, self.ops, self.ops_per_sec, self.p50_us, self.p99_us
        )
    }
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn scratch(durability: Durability) -> Result<(Kernel, Option<tempfile::TempDir>)> {
    let (engine, dir) = match durability {
        Durability::Off => (Engine::in_memory(), None),
        d => {
            let dir = tempfile::TempDir::new()?;
            (Engine::open(EngineConfig::at(dir.path(), d))?, Some(dir))
        }
    };
    Ok((Kernel::boot(engine, Arc::new(SystemClock::new()))?, dir))
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64() * 1e6))
}

pub fn run(suite: Suite, cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    match suite {
        Suite::Txn => bench_txn(cfg),
        Suite::Launch => bench_launch(cfg),
        Suite::Ipc => bench_ipc(cfg),
        Suite::Fs => bench_fs(cfg),
    }
}

/// Writes each result as `bench` metrics (`<suite>.<metric>.ops_per_sec`,
/// `.p50_us`, `.p99_us`).
pub fn record(kernel: &Kernel, results: &[BenchResult]) -> Result<()> {
    for r in results {
        let base = format!("{}.{}", r.suite, r.metric);
        kernel.emit_metric("bench", &format!("{base}.ops_per_sec"), r.ops_per_sec)?;
        kernel.emit_metric("bench", &format!("{base}.p50_us"), r.p50_us)?;
        kernel.emit_metric("bench", &format!("{base}.p99_us"), r.p99_us)?;
    }
    Ok(())
}

const KV: &str = "bench_kv";

/// Single-row read and single-row write transactions on one thread.
fn bench_txn(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    use rand::{Rng, SeedableRng};
    let (k, _dir) = scratch(cfg.durability)?;
    let e = k.engine();
    e.create_table(Schema::new(KV).column("k", ValueKind::Int64).column("v", ValueKind::Int64).primary_key(&["k"]))?;
    let n = cfg.txn_rows.max(1) as i64;
    for chunk in (0..n).collect::<Vec<_>>().chunks(10_000) {
        e.run(0, |t| chunk.iter().try_for_each(|&i| t.insert(KV, Row::new(vec![i.into(), 0i64.into()]))))?;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let keys: Vec<i64> = (0..cfg.txn_reads.max(cfg.txn_writes)).map(|_| rng.gen_range(0..n)).collect();

    let mut lat = Vec::with_capacity(cfg.txn_reads);
    let start = Instant::now();
    for &key in &keys[..cfg.txn_reads] {
        let (_, us) = timed(|| {
            let mut t = e.begin()?;
            let row = t.get(KV, &[key.into()])?;
            t.commit()?;
            row.ok_or_else(|| Error::NotFound(format!("bench key {key}")))
        })?;
        lat.push(us);
    }
    let reads = BenchResult::new(Suite::Txn, "read", start.elapsed(), lat);

    let mut lat = Vec::with_capacity(cfg.txn_writes);
    let start = Instant::now();
    for (i, &key) in keys[..cfg.txn_writes].iter().enumerate() {
        let (_, us) = timed(|| {
            let mut t = e.begin()?;
            t.update(KV, &[key.into()], Row::new(vec![key.into(), (i as i64).into()]))?;
            t.commit()
        })?;
        lat.push(us);
    }
    let writes = BenchResult::new(Suite::Txn, "write", start.elapsed(), lat);
    Ok(vec![reads, writes])
}

/// No-op tasks submitted while the executor runs; latency is submit to end.
fn bench_launch(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    let (k, _dir) = scratch(cfg.durability)?;
    let root = SyscallContext::root();
    let reg = UdfRegistry::new();
    reg.register(&k, &root, "noop", None, true, noop_body())?;
    let ex = Executor::start(&k, &reg, ExecutorConfig::cpu_workers(cfg.workers.max(1)))?;
    let start = Instant::now();
    for _ in 0..cfg.launch_tasks {
        k.task_spawn(&root, "noop", &[], 1, None)?;
    }
    let idle = ex.wait_idle(Duration::from_secs(600))?;
    let elapsed = start.elapsed();
    ex.shutdown();
    if !idle {
        return Err(Error::Timeout);
    }
    let rows = k.tasks(&root, None)?;
    let done: Vec<&Row> = rows
        .iter()
        .filter(|r| r.get(col::tasks::STATUS).as_str() == Some(TaskStatus::Done.as_str()))
        .collect();
    if done.len() != cfg.launch_tasks || rows.len() != cfg.launch_tasks {
        return Err(Error::InvalidArgument(format!(
            "launch census: {} of {} tasks done",
            done.len(),
            cfg.launch_tasks
        )));
    }
    let lat = done
        .iter()
        .map(|r| (r.get(col::tasks::END_TS).as_i64().unwrap_or(0) - r.get(col::tasks::SUBMIT_TS).as_i64().unwrap_or(0)) as f64)
        .collect();
    Ok(vec![BenchResult::new(Suite::Launch, "launch", elapsed, lat)])
}

/// `ipc_pairs` producers and as many consumers on one channel; checks that
/// every message is received exactly once before reporting.
fn bench_ipc(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    let (k, _dir) = scratch(cfg.durability)?;
    let root = SyscallContext::root();
    k.channel_create(&root, "bench")?;
    let pairs = cfg.ipc_pairs.max(1);
    let per = cfg.ipc_messages.max(1);
    let total = pairs * per;
    let barrier = Arc::new(Barrier::new(pairs * 2 + 1));
    let mut producers = Vec::new();
    for p in 0..pairs {
        let (k, b, ctx) = (k.clone(), barrier.clone(), root.clone());
        producers.push(thread::spawn(move || -> Result<Vec<f64>> {
            b.wait();
            (0..per)
                .map(|i| timed(|| k.msg_send(&ctx, "bench", format!("{p}:{i}").as_bytes())).map(|(_, us)| us))
                .collect()
        }));
    }
    let received = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let mut consumers = Vec::new();
    for _ in 0..pairs {
        let (k, b, ctx, got) = (k.clone(), barrier.clone(), root.clone(), received.clone());
        consumers.push(thread::spawn(move || -> Result<(Vec<Vec<u8>>, Vec<f64>)> {
            b.wait();
            let (mut msgs, mut lat) = (Vec::new(), Vec::new());
            while got.load(std::sync::atomic::Ordering::SeqCst) < total {
                let t = Instant::now();
                match k.msg_recv(&ctx, "bench", true, 20) {
                    Ok(Some((_, payload))) => {
                        lat.push(t.elapsed().as_secs_f64() * 1e6);
                        got.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        msgs.push(payload);
                    }
                    Ok(None) | Err(Error::Timeout) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok((msgs, lat))
        }));
    }
    barrier.wait();
    let start = Instant::now();
    let mut send_lat = Vec::new();
    for p in producers {
        send_lat.extend(p.join().map_err(|_| Error::InvalidArgument("producer panicked".into()))??);
    }
    let mut recv_lat = Vec::new();
    let mut seen = HashSet::new();
    let mut dup = 0;
    for c in consumers {
        let (msgs, lat) = c.join().map_err(|_| Error::InvalidArgument("consumer panicked".into()))??;
        recv_lat.extend(lat);
        for m in msgs {
            if !seen.insert(m) {
                dup += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    if dup > 0 || seen.len() != total {
        return Err(Error::InvalidArgument(format!(
            "exactly-once check failed: {} distinct of {total}, {dup} duplicates",
            seen.len()
        )));
    }
    Ok(vec![
        BenchResult::new(Suite::Ipc, "send", elapsed, send_lat),
        BenchResult::new(Suite::Ipc, "recv", elapsed, recv_lat),
    ])
}

/// Create, 4 KiB write, full read and stat of `fs_files` files in one
/// directory.
fn bench_fs(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    let (k, _dir) = scratch(cfg.durability)?;
    let root = SyscallContext::root();
    k.file_mkdir(&root, "/bench")?;
    let data = vec![0xabu8; 4096];
    let mut out = Vec::new();
    let paths: Vec<String> = (0..cfg.fs_files).map(|i| format!("/bench/f{i}")).collect();
    let phase = |metric: &str, f: &dyn Fn(&str) -> Result<()>| -> Result<BenchResult> {
        let start = Instant::now();
        let lat = paths.iter().map(|p| timed(|| f(p)).map(|(_, us)| us)).collect::<Result<Vec<f64>>>()?;
        Ok(BenchResult::new(Suite::Fs, metric, start.elapsed(), lat))
    };
    out.push(phase("create", &|p| k.file_create(&root, p).map(|_| ()))?);
    out.push(phase("write", &|p| k.file_write(&root, p, 0, &data).map(|_| ()))?);
    out.push(phase("read", &|p| {
        let got = k.file_read(&root, p, 0, data.len() as u64)?;
        if got != data {
            return Err(Error::InvalidArgument(format!("{p} read back {} bytes", got.len())));
        }
        Ok(())
    })?);
    out.push(phase("stat", &|p| k.file_stat(&root, p).map(|_| ()))?);
    Ok(out)
}
