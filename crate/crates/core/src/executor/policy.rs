use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::engine::{ScanOptions, Transaction};
use crate::error::{Error, Result};
use crate::os::schema::{col, METRICS};
use crate::predicate::{CmpOp, Predicate};
use crate::syscall::Kernel;
use crate::value::{Row, Value};

/// Metric written for every finished task, keyed by function name.
pub const RUNTIME_METRIC: &str = "task_runtime_us";
const ESTIMATE_SAMPLES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SchedulerPolicy {
    #[default]
    Fifo,
    SjfEstimated,
    Locality,
}

impl SchedulerPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerPolicy::Fifo => "fifo",
            SchedulerPolicy::SjfEstimated => "sjf_estimated",
            SchedulerPolicy::Locality => "locality",
        }
    }

    /// Numeric code logged as the `policy_active` metric.
    pub fn code(self) -> f64 {
        match self {
            SchedulerPolicy::Fifo => 0.0,
            SchedulerPolicy::SjfEstimated => 1.0,
            SchedulerPolicy::Locality => 2.0,
        }
    }

    /// Orders claim candidates (already in task id order) best first. Ties
    /// always fall back to the lowest task id.
    pub(crate) fn rank(self, txn: &Transaction, candidates: &mut [Row], last_function: Option<&str>) -> Result<()> {
        use col::tasks::*;
        match self {
            SchedulerPolicy::Fifo => {
                candidates.sort_by_key(|r| (r.get(SUBMIT_TS).as_i64().unwrap_or(0), r.get(TASK_ID).as_u64().unwrap_or(0)));
            }
            SchedulerPolicy::SjfEstimated => {
                let mut est: HashMap<String, f64> = HashMap::new();
                for r in candidates.iter() {
                    let f = r.get(FUNCTION_NAME).as_str().unwrap_or_default();
                    if !est.contains_key(f) {
                        est.insert(f.to_string(), estimate_runtime(txn, f)?);
                    }
                }
                candidates.sort_by(|a, b| {
                    let ea = est[a.get(FUNCTION_NAME).as_str().unwrap_or_default()];
                    let eb = est[b.get(FUNCTION_NAME).as_str().unwrap_or_default()];
                    ea.total_cmp(&eb).then(a.get(TASK_ID).cmp(b.get(TASK_ID)))
                });
            }
            SchedulerPolicy::Locality => {
                candidates.sort_by_key(|r| (r.get(FUNCTION_NAME).as_str() != last_function, r.get(TASK_ID).as_u64().unwrap_or(0)));
            }
        }
        Ok(())
    }
}

impl fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fifo" => Ok(SchedulerPolicy::Fifo),
            "sjf" | "sjf_estimated" => Ok(SchedulerPolicy::SjfEstimated),
            "locality" => Ok(SchedulerPolicy::Locality),
            _ => Err(Error::InvalidArgument(format!("unknown policy {s:?}"))),
        }
    }
}

/// Trailing mean runtime of a function over its most recent completions;
/// zero for functions never seen, so they get sampled early.
pub fn estimate_runtime(txn: &Transaction, function: &str) -> Result<f64> {
    let pred = Predicate::eq("source", function).and(Predicate::eq("name", RUNTIME_METRIC));
    let rows = txn.scan(METRICS, &ScanOptions::new().filter(pred))?.rows;
    let recent = &rows[rows.len().saturating_sub(ESTIMATE_SAMPLES)..];
    if recent.is_empty() {
        return Ok(0.0);
    }
    Ok(recent.iter().filter_map(|r| r.get(3).as_f64()).sum::<f64>() / recent.len() as f64)
}

/// Population coefficient of variation; `None` for an empty sample or a
/// zero mean.
pub fn coefficient_of_variation(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

/// Picks sjf_estimated when completed-task runtimes over the last
/// `window_us` vary more than the `cv_threshold` knob, fifo otherwise, and
/// keeps `current` when the window holds no data. The decision is logged as
/// a `policy_active` metric.
pub fn choose_policy(kernel: &Kernel, window_us: i64, current: SchedulerPolicy) -> Result<SchedulerPolicy> {
    let now = kernel.now_us();
    let runtimes: Vec<f64> = {
        let txn = kernel.engine().begin()?;
        let pred = Predicate::eq("name", RUNTIME_METRIC).and(Predicate::cmp("ts", CmpOp::Ge, Value::Timestamp(now - window_us)));
        txn.scan(METRICS, &ScanOptions::new().filter(pred))?.rows.iter().filter_map(|r| r.get(3).as_f64()).collect()
    };
    let chosen = match coefficient_of_variation(&runtimes) {
        None => current,
        Some(cv) if cv > kernel.knob("cv_threshold") => SchedulerPolicy::SjfEstimated,
        Some(_) => SchedulerPolicy::Fifo,
    };
    kernel.emit_metric("scheduler", "policy_active", chosen.code())?;
    Ok(chosen)
}
