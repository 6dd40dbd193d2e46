//! Line-oriented operator shell over a [`Kernel`].
//!
//! Each command maps onto one kernel, executor, log or bench operation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use dbos_core::bench::{self, BenchConfig, Suite};
use dbos_core::engine::RowSet;
use dbos_core::executor::{detect_stragglers, noop_body, Executor, ExecutorConfig, TaskBody, UdfRegistry};
use dbos_core::logs::{self, LogFormat};
use dbos_core::os::clock::SystemClock;
use dbos_core::os::schema::col;
use dbos_core::provenance::ObjectRef;
use dbos_core::query::{render_table, Query};
use dbos_core::syscall::{Kernel, SyscallContext, TaskStatus};
use dbos_core::{Durability, Engine, EngineConfig, Row};

pub const HELP: &str = "\
commands:
  query <select>          run a query (SELECT cols FROM t [WHERE p] [GROUP BY c] [ORDER BY k [DESC]] [LIMIT n])
  spawn <fn> [json-args]  submit a task (built-ins: noop, sleep {\"ms\": n}, fail)
  tasks [status]          list tasks visible to the caller
  stragglers <k>          running tasks slower than k times their function's median
  ingest <path> [jsonl|csv]
                          load a log file into log_events
  lineage <kind:id>       ancestors and descendants of an object
  erase <subject>         erase a data subject's PII and everything derived from it
  bench <suite|all> [scale]
                          run a benchmark suite (txn, launch, ipc, fs) on a scratch kernel
  wait [seconds]          block until no task is runnable or running
  help                    this text
  quit                    leave the shell
";

#[derive(Debug, thiserror::Error)]
pub enum ShellError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Engine(#[from] dbos_core::Error),
}

impl ShellError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ShellError::Usage(_) => 1,
            ShellError::Engine(_) => 2,
        }
    }

    /// Text for the operator. Parse errors point at the offending byte of
    /// `source` when it is known.
    pub fn render(&self, source: Option<&str>) -> String {
        match (self, source) {
            (ShellError::Engine(e @ dbos_core::Error::Parse { offset, .. }), Some(src)) => {
                let col = src.get(..*offset).map_or(*offset, |s| s.chars().count());
                format!("error: {e}\n  {src}\n  {}^", " ".repeat(col))
            }
            (ShellError::Usage(m), _) => format!("usage: {m}"),
            (e, _) => format!("error: {e}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> ShellError {
    ShellError::Usage(msg.into())
}

pub type ShellResult<T> = std::result::Result<T, ShellError>;

#[derive(Clone, Debug)]
pub struct ShellConfig {
    pub data_dir: Option<PathBuf>,
    pub workers: usize,
    pub durability: Durability,
    pub seed: u64,
    pub principal: String,
    pub container: u64,
    pub purpose: String,
    pub knobs: Vec<(String, f64)>,
}

impl Default for ShellConfig {
    fn default() -> Self {
        ShellConfig {
            data_dir: None,
            workers: 2,
            durability: Durability::Full,
            seed: 42,
            principal: "root".into(),
            container: 0,
            purpose: "admin".into(),
            knobs: Vec::new(),
        }
    }
}

/// Parses `key = value` knob lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> ShellResult<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| usage(format!("config line {}: expected key=value", i + 1)))?;
        let v: f64 = v.trim().parse().map_err(|_| usage(format!("config line {}: {:?} is not a number", i + 1, v.trim())))?;
        out.push((k.trim().to_string(), v));
    }
    Ok(out)
}

/// What a command produced.
#[derive(Debug, PartialEq)]
pub enum Outcome {
    Output(String),
    Quit,
}

pub struct Shell {
    kernel: Kernel,
    executor: Option<Executor>,
    ctx: SyscallContext,
    seed: u64,
}

fn sleep_body() -> TaskBody {
    Arc::new(|input| {
        let v: serde_json::Value = serde_json::from_slice(input.args).map_err(|e| e.to_string())?;
        let ms = v.get("ms").and_then(serde_json::Value::as_u64).ok_or("sleep needs {\"ms\": n}")?;
        std::thread::sleep(Duration::from_millis(ms));
        Ok(())
    })
}

fn fail_body() -> TaskBody {
    Arc::new(|_| Err("fail always fails".to_string()))
}

impl Shell {
    pub fn open(config: &ShellConfig) -> ShellResult<Shell> {
        let engine = match &config.data_dir {
            Some(dir) => Engine::open(EngineConfig::at(dir, config.durability))?,
            None => Engine::in_memory(),
        };
        let kernel = Kernel::boot(engine, Arc::new(SystemClock::new()))?;
        let root = SyscallContext::root();
        for (name, value) in &config.knobs {
            kernel.set_knob(&root, name, *value)?;
        }
        let registry = UdfRegistry::new();
        registry.register(&kernel, &root, "noop", None, true, noop_body())?;
        registry.register(&kernel, &root, "sleep", None, true, sleep_body())?;
        registry.register(&kernel, &root, "fail", None, true, fail_body())?;
        let executor = match config.workers {
            0 => None,
            n => Some(Executor::start(&kernel, &registry, ExecutorConfig::cpu_workers(n))?),
        };
        let ctx = SyscallContext::new(&config.principal, config.container, &config.purpose);
        Ok(Shell { kernel, executor, ctx, seed: config.seed })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Runs one command line. Blank lines and `#` comments produce no output.
    pub fn execute(&mut self, line: &str) -> ShellResult<Outcome> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(Outcome::Output(String::new()));
        }
        let (cmd, rest) = line.split_once(char::is_whitespace).map_or((line, ""), |(c, r)| (c, r.trim()));
        let words: Vec<&str> = rest.split_whitespace().collect();
        let out = match cmd {
            "query" => self.query(rest)?,
            "spawn" => self.spawn(rest)?,
            "tasks" => self.tasks(&words)?,
            "stragglers" => self.stragglers(&words)?,
            "ingest" => self.ingest(&words)?,
            "lineage" => self.lineage(&words)?,
            "erase" => self.erase(&words)?,
            "bench" => self.bench(&words)?,
            "wait" => self.wait(&words)?,
            "help" => HELP.to_string(),
            "quit" | "exit" => return Ok(Outcome::Quit),
            other => return Err(usage(format!("unknown command {other:?}; try help"))),
        };
        Ok(Outcome::Output(out))
    }

    fn query(&self, text: &str) -> ShellResult<String> {
        if text.is_empty() {
            return Err(usage("query <select>"));
        }
        let q = Query::parse_checked(text, self.kernel.engine())?;
        let txn = self.kernel.engine().begin()?;
        let scope = match self.ctx.container_id {
            0 => None,
            _ => Some(self.kernel.view_for(&txn, &self.ctx, &q.from)?),
        };
        Ok(render_table(&q.execute(&txn, scope.as_ref())?))
    }

    fn spawn(&self, rest: &str) -> ShellResult<String> {
        let (f, args) = rest.split_once(char::is_whitespace).map_or((rest, "{}"), |(f, a)| (f, a.trim()));
        if f.is_empty() {
            return Err(usage("spawn <fn> [json-args]"));
        }
        serde_json::from_str::<serde_json::Value>(args).map_err(|e| usage(format!("task args must be JSON: {e}")))?;
        let id = self.kernel.task_spawn(&self.ctx, f, args.as_bytes(), 1, None)?;
        Ok(format!("task {id}\n"))
    }

    fn tasks(&self, words: &[&str]) -> ShellResult<String> {
        let status: Option<TaskStatus> = match words {
            [] => None,
            [s] => Some(s.parse()?),
            _ => return Err(usage("tasks [runnable|running|done|failed]")),
        };
        let picked = [
            ("task_id", col::tasks::TASK_ID),
            ("function", col::tasks::FUNCTION_NAME),
            ("status", col::tasks::STATUS),
            ("attempt", col::tasks::ATTEMPT),
            ("worker_id", col::tasks::WORKER_ID),
            ("submit_ts", col::tasks::SUBMIT_TS),
            ("start_ts", col::tasks::START_TS),
            ("end_ts", col::tasks::END_TS),
        ];
        let rows = self.kernel.tasks(&self.ctx, status)?;
        let rs = RowSet {
            columns: picked.iter().map(|(n, _)| n.to_string()).collect(),
            rows: rows.iter().map(|r| Row::new(picked.iter().map(|(_, i)| r.get(*i).clone()).collect())).collect(),
        };
        Ok(render_table(&rs))
    }

    fn stragglers(&self, words: &[&str]) -> ShellResult<String> {
        let [k] = words else { return Err(usage("stragglers <k>")) };
        let k: f64 = k.parse().map_err(|_| usage(format!("{k:?} is not a number")))?;
        let ids = detect_stragglers(&self.kernel, k)?;
        let mut out: String = ids.iter().map(|id| format!("{id}\n")).collect();
        let _ = writeln!(out, "({} straggler{})", ids.len(), if ids.len() == 1 { "" } else { "s" });
        Ok(out)
    }

    fn ingest(&self, words: &[&str]) -> ShellResult<String> {
        let (path, format) = match words {
            [p] => (Path::new(p), LogFormat::from_path(Path::new(p))),
            [p, f] => (Path::new(p), f.parse()?),
            _ => return Err(usage("ingest <path> [jsonl|csv]")),
        };
        Ok(format!("{}\n", logs::ingest(&self.kernel, path, format)?))
    }

    fn lineage(&self, words: &[&str]) -> ShellResult<String> {
        let [obj] = words else { return Err(usage("lineage <kind:id>")) };
        let obj: ObjectRef = obj.parse()?;
        let join = |set: std::collections::BTreeSet<ObjectRef>| set.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        Ok(format!(
            "ancestors: {}\ndescendants: {}\n",
            join(self.kernel.lineage_ancestors(obj)?),
            join(self.kernel.lineage_descendants(obj)?)
        ))
    }

    fn erase(&self, words: &[&str]) -> ShellResult<String> {
        let [subject] = words else { return Err(usage("erase <subject>")) };
        Ok(self.kernel.erase_subject(&self.ctx, subject)?.to_string())
    }

    fn bench(&self, words: &[&str]) -> ShellResult<String> {
        let (suites, scale) = match words {
            [s] => (*s, 1.0),
            [s, f] => (*s, f.parse::<f64>().ok().filter(|f| *f > 0.0).ok_or_else(|| usage(format!("bad scale {f:?}")))?),
            _ => return Err(usage("bench <txn|launch|ipc|fs|all> [scale]")),
        };
        let suites: Vec<Suite> = match suites {
            "all" => Suite::ALL.to_vec(),
            s => vec![s.parse().map_err(|e: dbos_core::Error| usage(e.to_string()))?],
        };
        let cfg = BenchConfig { seed: self.seed, ..BenchConfig::default() }.scaled(scale);
        let mut results = Vec::new();
        for s in suites {
            results.extend(bench::run(s, &cfg)?);
        }
        bench::record(&self.kernel, &results)?;
        let mut out = format!("{}\n", bench::TEXT_HEADER);
        for r in &results {
            let _ = writeln!(out, "{r}");
        }
        for r in &results {
            let _ = writeln!(out, "{}", r.json_line());
        }
        Ok(out)
    }

    fn wait(&self, words: &[&str]) -> ShellResult<String> {
        let secs: f64 = match words {
            [] => 30.0,
            [s] => s.parse().ok().filter(|s: &f64| *s >= 0.0).ok_or_else(|| usage(format!("bad timeout {s:?}")))?,
            _ => return Err(usage("wait [seconds]")),
        };
        let ex = self.executor.as_ref().ok_or_else(|| usage("no workers are running (start with --workers N)"))?;
        if ex.wait_idle(Duration::from_secs_f64(secs))? {
            Ok("idle\n".into())
        } else {
            Err(dbos_core::Error::Timeout.into())
        }
    }

    /// Stops the workers and closes the engine.
    pub fn close(mut self) -> ShellResult<()> {
        if let Some(ex) = self.executor.take() {
            ex.shutdown();
        }
        self.kernel.engine().close()?;
        Ok(())
    }
}
