//! Python module `dbos`: a kernel handle, its syscalls, queries and the
//! benchmark suites.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use dbos_core::bench::{self, BenchConfig, Suite};
use dbos_core::executor::{self, noop_body, Executor, ExecutorConfig, TaskBody, UdfRegistry};
use dbos_core::logs::{self, LogFormat};
use dbos_core::os::clock::SystemClock;
use dbos_core::provenance::ObjectRef;
use dbos_core::query::Query;
use dbos_core::syscall::{self, SyscallContext, TaskStatus};
use dbos_core::{Durability, Engine, EngineConfig, Row, Value};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

create_exception!(dbos, DbosError, PyException, "An engine or kernel error; `code` names the kind.");

fn to_py(e: dbos_core::Error) -> PyErr {
    let err = DbosError::new_err(format!("{}: {e}", e.code()));
    Python::attach(|py| {
        let _ = err.value(py).setattr("code", e.code());
    });
    err
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for dbos_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn value_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Int64(i) | Value::Timestamp(i) => i.into_pyobject(py)?.into_any(),
        Value::Float64(f) => f.into_pyobject(py)?.into_any(),
        Value::Text(s) => s.into_pyobject(py)?.into_any(),
        Value::Bytes(b) => PyBytes::new(py, b).into_any(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
    })
}

fn row_dict<'py>(py: Python<'py>, columns: &[String], row: &Row) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (c, v) in columns.iter().zip(row.values()) {
        d.set_item(c, value_to_py(py, v)?)?;
    }
    Ok(d)
}

fn sleep_body() -> TaskBody {
    Arc::new(|input| {
        let ms: u64 = std::str::from_utf8(input.args).ok().and_then(|s| s.trim().parse().ok()).unwrap_or(0);
        std::thread::sleep(Duration::from_millis(ms));
        Ok(())
    })
}

fn parse_obj(s: &str) -> PyResult<ObjectRef> {
    s.parse().py()
}

/// A kernel over an in-memory or on-disk engine, acting as one principal.
#[pyclass(module = "dbos")]
struct Kernel {
    kernel: syscall::Kernel,
    ctx: SyscallContext,
    registry: UdfRegistry,
    executor: Mutex<Option<Executor>>,
}

#[pymethods]
impl Kernel {
    /// `durability` is one of "full", "buffered", "off"; ignored in memory.
    #[new]
    #[pyo3(signature = (data_dir=None, durability="full", principal="root", container=0, purpose="admin"))]
    fn new(data_dir: Option<PathBuf>, durability: &str, principal: &str, container: u64, purpose: &str) -> PyResult<Self> {
        let durability = match durability {
            "full" => Durability::Full,
            "buffered" => Durability::Buffered,
            "off" => Durability::Off,
            other => return Err(PyValueError::new_err(format!("unknown durability {other:?}"))),
        };
        let engine = match data_dir {
            Some(d) => Engine::open(EngineConfig::at(d, durability)).py()?,
            None => Engine::in_memory(),
        };
        let kernel = syscall::Kernel::boot(engine, Arc::new(SystemClock::new())).py()?;
        let registry = UdfRegistry::new();
        let root = SyscallContext::root();
        registry.register(&kernel, &root, "noop", None, true, noop_body()).py()?;
        registry.register(&kernel, &root, "sleep", None, true, sleep_body()).py()?;
        Ok(Kernel {
            kernel,
            ctx: SyscallContext::new(principal, container, purpose),
            registry,
            executor: Mutex::new(None),
        })
    }

    /// Runs a SELECT and returns one dict per row. Outside the root
    /// container only the caller's own rows are visible.
    fn query<'py>(&self, py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyList>> {
        let q = Query::parse_checked(text, self.kernel.engine()).py()?;
        let txn = self.kernel.engine().begin().py()?;
        let scope = match self.ctx.container_id {
            0 => None,
            _ => Some(self.kernel.view_for(&txn, &self.ctx, &q.from).py()?),
        };
        let rs = q.execute(&txn, scope.as_ref()).py()?;
        let rows = rs.rows.iter().map(|r| row_dict(py, &rs.columns, r)).collect::<PyResult<Vec<_>>>()?;
        PyList::new(py, rows)
    }

    fn table_names(&self) -> Vec<String> {
        self.kernel.engine().table_names()
    }

    fn knob(&self, name: &str) -> f64 {
        self.kernel.knob(name)
    }

    fn set_knob(&self, name: &str, value: f64) -> PyResult<()> {
        self.kernel.set_knob(&self.ctx, name, value).py()
    }

    fn file_create(&self, path: &str) -> PyResult<u64> {
        self.kernel.file_create(&self.ctx, path).py()
    }

    fn file_mkdir(&self, path: &str) -> PyResult<u64> {
        self.kernel.file_mkdir(&self.ctx, path).py()
    }

    fn file_write(&self, path: &str, offset: u64, data: &[u8]) -> PyResult<usize> {
        self.kernel.file_write(&self.ctx, path, offset, data).py()
    }

    fn file_read<'py>(&self, py: Python<'py>, path: &str, offset: u64, length: u64) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.kernel.file_read(&self.ctx, path, offset, length).py()?))
    }

    fn file_list(&self, path: &str) -> PyResult<Vec<String>> {
        Ok(self.kernel.file_list(&self.ctx, path).py()?.into_iter().map(|e| e.name).collect())
    }

    fn file_unlink(&self, path: &str) -> PyResult<()> {
        self.kernel.file_unlink(&self.ctx, path).py()
    }

    fn file_copy(&self, src: &str, dst: &str) -> PyResult<u64> {
        self.kernel.file_copy(&self.ctx, src, dst).py()
    }

    fn channel_create(&self, name: &str) -> PyResult<u64> {
        self.kernel.channel_create(&self.ctx, name).py()
    }

    fn msg_send(&self, channel: &str, payload: &[u8]) -> PyResult<u64> {
        self.kernel.msg_send(&self.ctx, channel, payload).py()
    }

    /// Claims the oldest unconsumed message, or returns None.
    #[pyo3(signature = (channel, timeout_ms=0))]
    fn msg_recv<'py>(&self, py: Python<'py>, channel: &str, timeout_ms: u64) -> PyResult<Option<(u64, Bound<'py, PyBytes>)>> {
        let got = py.detach(|| match self.kernel.msg_recv(&self.ctx, channel, timeout_ms > 0, timeout_ms) {
            Err(dbos_core::Error::Timeout) => Ok(None),
            other => other,
        });
        Ok(got.py()?.map(|(id, p)| (id, PyBytes::new(py, &p))))
    }

    #[pyo3(signature = (function, args=b"".as_slice()))]
    fn spawn(&self, function: &str, args: &[u8]) -> PyResult<u64> {
        self.kernel.task_spawn(&self.ctx, function, args, 1, None).py()
    }

    #[pyo3(signature = (status=None))]
    fn tasks<'py>(&self, py: Python<'py>, status: Option<&str>) -> PyResult<Bound<'py, PyList>> {
        let status: Option<TaskStatus> = status.map(str::parse).transpose().py()?;
        let cols = self.kernel.engine().source_columns(dbos_core::os::schema::TASKS).py()?;
        let rows = self.kernel.tasks(&self.ctx, status).py()?;
        PyList::new(py, rows.iter().map(|r| row_dict(py, &cols, r)).collect::<PyResult<Vec<_>>>()?)
    }

    /// Starts `n` worker threads running the built-in `noop` and `sleep`
    /// functions (sleep takes milliseconds as its text argument).
    fn start_workers(&self, n: usize) -> PyResult<()> {
        let mut slot = self.executor.lock().expect("executor lock");
        if slot.is_some() {
            return Err(PyValueError::new_err("workers already running"));
        }
        *slot = Some(Executor::start(&self.kernel, &self.registry, ExecutorConfig::cpu_workers(n)).py()?);
        Ok(())
    }

    /// Waits until no task is runnable or running; False on timeout.
    fn wait_idle(&self, py: Python<'_>, timeout_s: f64) -> PyResult<bool> {
        let slot = self.executor.lock().expect("executor lock");
        let ex = slot.as_ref().ok_or_else(|| PyValueError::new_err("no workers running"))?;
        py.detach(|| ex.wait_idle(Duration::from_secs_f64(timeout_s))).py()
    }

    fn stop_workers(&self, py: Python<'_>) {
        if let Some(ex) = self.executor.lock().expect("executor lock").take() {
            py.detach(|| ex.shutdown());
        }
    }

    fn stragglers(&self, k: f64) -> PyResult<Vec<u64>> {
        executor::detect_stragglers(&self.kernel, k).py()
    }

    fn tag_pii(&self, obj: &str, subject: &str) -> PyResult<()> {
        self.kernel.tag_pii(&self.ctx, parse_obj(obj)?, subject).py()
    }

    fn set_purpose_grant(&self, subject: &str, purpose: &str, allowed: bool) -> PyResult<()> {
        self.kernel.set_purpose_grant(&self.ctx, subject, purpose, allowed).py()
    }

    /// Erases a subject; returns `(object, reason)` pairs.
    fn erase(&self, subject: &str) -> PyResult<Vec<(String, String)>> {
        let report = self.kernel.erase_subject(&self.ctx, subject).py()?;
        Ok(report.erased.iter().map(|(o, why)| (o.to_string(), why.as_str().to_string())).collect())
    }

    fn lineage_ancestors(&self, obj: &str) -> PyResult<Vec<String>> {
        Ok(self.kernel.lineage_ancestors(parse_obj(obj)?).py()?.iter().map(ToString::to_string).collect())
    }

    fn lineage_descendants(&self, obj: &str) -> PyResult<Vec<String>> {
        Ok(self.kernel.lineage_descendants(parse_obj(obj)?).py()?.iter().map(ToString::to_string).collect())
    }

    /// Loads a log file; `format` is "jsonl" or "csv" (default: by extension).
    #[pyo3(signature = (path, format=None))]
    fn ingest<'py>(&self, py: Python<'py>, path: PathBuf, format: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
        let format: LogFormat = match format {
            Some(f) => f.parse().py()?,
            None => LogFormat::from_path(&path),
        };
        let r = py.detach(|| logs::ingest(&self.kernel, &path, format)).py()?;
        let d = PyDict::new(py);
        d.set_item("lines", r.lines)?;
        d.set_item("ingested", r.ingested)?;
        d.set_item("duplicates", r.duplicates)?;
        d.set_item("malformed", r.malformed)?;
        Ok(d)
    }

    fn checkpoint(&self) -> PyResult<String> {
        Ok(self.kernel.engine().checkpoint().py()?.path.display().to_string())
    }

    fn close(&self, py: Python<'_>) -> PyResult<()> {
        self.stop_workers(py);
        self.kernel.engine().close().py()
    }
}

/// Runs one benchmark suite on a scratch kernel; one dict per metric.
#[pyfunction]
#[pyo3(signature = (suite, scale=1.0, seed=42))]
fn run_bench<'py>(py: Python<'py>, suite: &str, scale: f64, seed: u64) -> PyResult<Bound<'py, PyList>> {
    let suite: Suite = suite.parse().py()?;
    let cfg = BenchConfig { seed, ..BenchConfig::default() }.scaled(scale);
    let results = py.detach(|| bench::run(suite, &cfg)).py()?;
    let dicts = results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("suite", &r.suite)?;
            d.set_item("metric", &r.metric)?;
            d.set_item("ops", r.ops)?;
            d.set_item("ops_per_sec", r.ops_per_sec)?;
            d.set_item("p50_us", r.p50_us)?;
            d.set_item("p99_us", r.p99_us)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    PyList::new(py, dicts)
}

/// Markdown reference of every OS table.
#[pyfunction]
fn schema_reference() -> String {
    dbos_core::os::schema::schema_reference()
}

#[pymodule]
fn dbos(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Kernel>()?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_function(wrap_pyfunction!(schema_reference, m)?)?;
    m.add("DbosError", m.py().get_type::<DbosError>())?;
    Ok(())
}
