//! Log analytics: external logs ingested into `log_events` and the usual
//! monitoring questions answered as queries over it.

pub mod corpus;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{AggFunc, AggSpec, Engine};
use crate::error::{Error, Result};
use crate::os::schema::LOG_EVENTS;
use crate::predicate::{CmpOp, Predicate};
use crate::syscall::Kernel;
use crate::value::{Row, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// `value` is the file size in bytes at the time of access.
    FileTouch,
    /// `value` is the folder size in bytes; the latest sample wins.
    FolderSize,
    /// `value` is CPU cycles consumed since the previous sample.
    CpuSample,
    /// `value` is bytes transferred since the previous sample.
    NetSample,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [EventKind::FileTouch, EventKind::FolderSize, EventKind::CpuSample, EventKind::NetSample];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::FileTouch => "file_touch",
            EventKind::FolderSize => "folder_size",
            EventKind::CpuSample => "cpu_sample",
            EventKind::NetSample => "net_sample",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::FormatError(format!("unknown event kind {s:?}")))
    }
}

/// One log line. `ts` is in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEvent {
    pub ts: i64,
    pub host: String,
    pub user: String,
    pub app: String,
    pub kind: EventKind,
    pub object: String,
    pub value: f64,
}

impl LogEvent {
    pub fn to_row(&self) -> Row {
        Row::new(vec![
            Value::Timestamp(self.ts),
            self.host.as_str().into(),
            self.user.as_str().into(),
            self.app.as_str().into(),
            self.kind.as_str().into(),
            self.object.as_str().into(),
            self.value.into(),
        ])
    }

    pub fn from_row(row: &Row) -> Result<LogEvent> {
        let text = |i: usize| {
            row.get(i).as_str().map(str::to_string).ok_or_else(|| Error::FormatError(format!("column {i} is not text")))
        };
        Ok(LogEvent {
            ts: row.get(0).as_i64().ok_or_else(|| Error::FormatError("ts".into()))?,
            host: text(1)?,
            user: text(2)?,
            app: text(3)?,
            kind: text(4)?.parse()?,
            object: text(5)?,
            value: row.get(6).as_f64().ok_or_else(|| Error::FormatError("value".into()))?,
        })
    }

    fn check(self) -> std::result::Result<LogEvent, String> {
        if !self.value.is_finite() {
            return Err("value is not finite".into());
        }
        Ok(self)
    }

    pub fn to_csv_line(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
        w.serialize(self).expect("in-memory csv");
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("serializable");
        s.push('\n');
        s
    }
}

/// Column order of the comma-separated format. A first line equal to this
/// header is skipped.
pub const CSV_HEADER: &str = "ts,host,user,app,kind,object,value";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    Jsonl,
    Csv,
}

impl LogFormat {
    /// `.csv` means csv; anything else is read as JSON lines.
    pub fn from_path(path: &Path) -> LogFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => LogFormat::Csv,
            _ => LogFormat::Jsonl,
        }
    }
}

impl FromStr for LogFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json" => Ok(LogFormat::Jsonl),
            "csv" => Ok(LogFormat::Csv),
            _ => Err(Error::InvalidArgument(format!("unknown log format {s:?}"))),
        }
    }
}

pub fn parse_line(line: &str, format: LogFormat) -> std::result::Result<LogEvent, String> {
    let ev: LogEvent = match format {
        LogFormat::Jsonl => serde_json::from_str(line).map_err(|e| e.to_string())?,
        LogFormat::Csv => {
            let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(line.as_bytes());
            let rec = r.records().next().ok_or("empty line")?.map_err(|e| e.to_string())?;
            if rec.len() != 7 {
                return Err(format!("expected 7 fields, got {}", rec.len()));
            }
            rec.deserialize(None).map_err(|e| e.to_string())?
        }
    };
    ev.check()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    /// Non-blank lines read, header excluded.
    pub lines: usize,
    pub ingested: usize,
    /// Well-formed lines whose natural key was already present.
    pub duplicates: usize,
    pub malformed: usize,
    /// 1-based line numbers of the first few malformed lines.
    pub bad_lines: Vec<usize>,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ingested {} of {} lines ({} duplicate, {} malformed)",
            self.ingested, self.lines, self.duplicates, self.malformed
        )
    }
}

/// Parses every line of `text`, then inserts the good ones in batches of the
/// `ingest_batch` knob, one transaction per batch. Events whose natural key
/// (ts, host, app, object, kind) is already stored are skipped, so re-running
/// an interrupted ingest is safe. Nothing is inserted when more than the
/// `max_bad_frac` knob of lines are malformed.
pub fn ingest_str(kernel: &Kernel, text: &str, format: LogFormat) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (i == 0 && format == LogFormat::Csv && line == CSV_HEADER) {
            continue;
        }
        report.lines += 1;
        match parse_line(line, format) {
            Ok(ev) => events.push(ev),
            Err(e) => {
                report.malformed += 1;
                if report.bad_lines.len() < 10 {
                    report.bad_lines.push(i + 1);
                }
                log::debug!("line {}: {e}", i + 1);
            }
        }
    }
    let max_bad = kernel.knob("max_bad_frac");
    if report.lines > 0 && report.malformed as f64 > max_bad * report.lines as f64 {
        return Err(Error::FormatError(format!(
            "{} of {} lines malformed (first at line {}), more than {max_bad}",
            report.malformed,
            report.lines,
            report.bad_lines[0]
        )));
    }
    let batch = (kernel.knob("ingest_batch") as usize).max(1);
    for chunk in events.chunks(batch) {
        let (added, dup) = kernel.engine().run(kernel.max_retries(), |txn| {
            let (mut added, mut dup) = (0, 0);
            for ev in chunk {
                match txn.insert(LOG_EVENTS, ev.to_row()) {
                    Ok(()) => added += 1,
                    Err(Error::DuplicateKey { .. }) => dup += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((added, dup))
        })?;
        report.ingested += added;
        report.duplicates += dup;
    }
    Ok(report)
}

pub fn ingest(kernel: &Kernel, path: &Path, format: LogFormat) -> Result<IngestReport> {
    let text = fs::read_to_string(path)?;
    ingest_str(kernel, &text, format)
}

fn check_window(t0: i64, t1: i64) -> Result<()> {
    if t0 > t1 {
        return Err(Error::InvalidArgument(format!("empty time window {t0}..{t1}")));
    }
    Ok(())
}

fn window(t0: i64, t1: i64) -> Predicate {
    Predicate::cmp("ts", CmpOp::Ge, Value::Timestamp(t0)).and(Predicate::cmp("ts", CmpOp::Le, Value::Timestamp(t1)))
}

fn events(engine: &Engine, pred: Predicate) -> Result<Vec<Row>> {
    let txn = engine.begin()?;
    Ok(txn.scan(LOG_EVENTS, &crate::engine::ScanOptions::new().filter(pred))?.rows)
}

/// Distinct files touched by `user` with `t0 <= ts <= t1`, in name order.
pub fn files_touched_by(engine: &Engine, user: &str, t0: i64, t1: i64) -> Result<Vec<String>> {
    check_window(t0, t1)?;
    let pred = Predicate::eq("user", user).and(Predicate::eq("kind", EventKind::FileTouch.as_str())).and(window(t0, t1));
    let set: BTreeSet<String> = events(engine, pred)?.iter().filter_map(|r| r.get(5).as_str().map(str::to_string)).collect();
    Ok(set.into_iter().collect())
}

/// The `n` largest folders of `user` by their latest size sample, largest
/// first, ties by name.
pub fn largest_folders(engine: &Engine, user: &str, n: usize) -> Result<Vec<(String, f64)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let pred = Predicate::eq("user", user).and(Predicate::eq("kind", EventKind::FolderSize.as_str()));
    let mut latest: BTreeMap<String, (i64, f64)> = BTreeMap::new();
    for r in events(engine, pred)? {
        let (ts, obj, v) = (r.get(0).as_i64().unwrap_or(0), r.get(5).as_str().unwrap_or_default(), r.get(6).as_f64().unwrap_or(0.0));
        let e = latest.entry(obj.to_string()).or_insert((ts, v));
        if ts >= e.0 {
            *e = (ts, v);
        }
    }
    Ok(top_by_value(latest.into_iter().map(|(k, (_, v))| (k, v)), n))
}

fn top_by_value(items: impl Iterator<Item = (String, f64)>, n: usize) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = items.collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(n);
    v
}

fn sum_for_app(engine: &Engine, app: &str, kind: EventKind, t0: i64, t1: i64) -> Result<f64> {
    check_window(t0, t1)?;
    let pred = Predicate::eq("app", app).and(Predicate::eq("kind", kind.as_str())).and(window(t0, t1));
    let txn = engine.begin()?;
    let rs = txn.aggregate(LOG_EVENTS, &[], &[AggSpec::new(AggFunc::Sum, "value")], Some(&pred))?;
    Ok(rs.rows.first().and_then(|r| r.get(0).as_f64()).unwrap_or(0.0))
}

/// Sum of CPU cycles sampled for `app` with `t0 <= ts <= t1`.
pub fn cycles_consumed(engine: &Engine, app: &str, t0: i64, t1: i64) -> Result<f64> {
    sum_for_app(engine, app, EventKind::CpuSample, t0, t1)
}

/// Sum of bytes transferred by `app` with `t0 <= ts <= t1`.
pub fn net_traffic(engine: &Engine, app: &str, t0: i64, t1: i64) -> Result<f64> {
    sum_for_app(engine, app, EventKind::NetSample, t0, t1)
}

/// Files accessed in `[now - window_us, now]` whose size at access exceeded
/// `min_bytes`, with their largest observed size, largest first.
pub fn large_recent_files(engine: &Engine, now: i64, window_us: i64, min_bytes: f64) -> Result<Vec<(String, f64)>> {
    let t0 = now.saturating_sub(window_us);
    check_window(t0, now)?;
    let pred = Predicate::eq("kind", EventKind::FileTouch.as_str())
        .and(window(t0, now))
        .and(Predicate::cmp("value", CmpOp::Gt, min_bytes));
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for r in events(engine, pred)? {
        let v = r.get(6).as_f64().unwrap_or(0.0);
        let e = best.entry(r.get(5).as_str().unwrap_or_default().to_string()).or_insert(v);
        *e = e.max(v);
    }
    Ok(top_by_value(best.into_iter(), usize::MAX))
}

pub const DAY_US: i64 = 24 * 3600 * 1_000_000;
pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

#[cfg(test)]
mod tests {
    use super::*;

    fn ev() -> LogEvent {
        LogEvent {
            ts: 5,
            host: "h,1".into(),
            user: "u".into(),
            app: "a".into(),
            kind: EventKind::CpuSample,
            object: "/x \"y\"".into(),
            value: 1.5,
        }
    }

    #[test]
    fn lines_round_trip_in_both_formats() {
        let e = ev();
        assert_eq!(parse_line(e.to_json_line().trim_end(), LogFormat::Jsonl).unwrap(), e);
        assert_eq!(parse_line(e.to_csv_line().trim_end(), LogFormat::Csv).unwrap(), e);
        assert_eq!(LogEvent::from_row(&e.to_row()).unwrap(), e);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        for (line, f) in [
            ("{\"ts\":1}", LogFormat::Jsonl),
            ("not json", LogFormat::Jsonl),
            ("1,h,u,a,cpu_sample,o", LogFormat::Csv),
            ("1,h,u,a,disk_sample,o,3", LogFormat::Csv),
            ("x,h,u,a,cpu_sample,o,3", LogFormat::Csv),
            ("1,h,u,a,cpu_sample,o,NaN", LogFormat::Csv),
        ] {
            assert!(parse_line(line, f).is_err(), "{line}");
        }
    }

    #[test]
    fn ties_sort_by_name() {
        let v = top_by_value([("b".to_string(), 1.0), ("a".to_string(), 1.0), ("c".to_string(), 2.0)].into_iter(), 10);
        assert_eq!(v.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["c", "a", "b"]);
    }
}
