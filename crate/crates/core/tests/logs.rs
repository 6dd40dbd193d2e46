use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use dbos_core::logs::corpus::{generate, render, CorpusSpec};
use dbos_core::logs::{
    cycles_consumed, files_touched_by, ingest, ingest_str, large_recent_files, largest_folders, net_traffic, EventKind,
    LogEvent, LogFormat, DAY_US, GIB,
};
use dbos_core::syscall::{Kernel, SyscallContext};
use dbos_core::ScanOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stored(k: &Kernel) -> Vec<LogEvent> {
    let txn = k.engine().begin().unwrap();
    txn.scan("log_events", &ScanOptions::new()).unwrap().rows.iter().map(|r| LogEvent::from_row(r).unwrap()).collect()
}

mod oracle {
    use super::*;

    pub fn touched(all: &[LogEvent], user: &str, t0: i64, t1: i64) -> Vec<String> {
        let s: BTreeSet<String> = all
            .iter()
            .filter(|e| e.user == user && e.kind == EventKind::FileTouch && e.ts >= t0 && e.ts <= t1)
            .map(|e| e.object.clone())
            .collect();
        s.into_iter().collect()
    }

    pub fn folders(all: &[LogEvent], user: &str, n: usize) -> Vec<(String, f64)> {
        let mut latest: BTreeMap<&str, &LogEvent> = BTreeMap::new();
        for e in all.iter().filter(|e| e.user == user && e.kind == EventKind::FolderSize) {
            if latest.get(e.object.as_str()).is_none_or(|p| p.ts <= e.ts) {
                latest.insert(&e.object, e);
            }
        }
        let mut v: Vec<(String, f64)> = latest.into_iter().map(|(k, e)| (k.to_string(), e.value)).collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        v.into_iter().take(n).collect()
    }

    pub fn sum(all: &[LogEvent], app: &str, kind: EventKind, t0: i64, t1: i64) -> f64 {
        all.iter().filter(|e| e.app == app && e.kind == kind && e.ts >= t0 && e.ts <= t1).map(|e| e.value).sum()
    }

    pub fn large_recent(all: &[LogEvent], now: i64, window: i64, min: f64) -> Vec<(String, f64)> {
        let mut best: BTreeMap<String, f64> = BTreeMap::new();
        for e in all.iter().filter(|e| e.kind == EventKind::FileTouch && e.ts >= now - window && e.ts <= now && e.value > min) {
            let b = best.entry(e.object.clone()).or_insert(e.value);
            if e.value > *b {
                *b = e.value;
            }
        }
        let mut v: Vec<(String, f64)> = best.into_iter().collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        v
    }
}

#[test]
fn empty_input_and_empty_table() {
    let k = Kernel::in_memory().unwrap();
    let r = ingest_str(&k, "", LogFormat::Jsonl).unwrap();
    assert_eq!((r.lines, r.ingested), (0, 0));
    let e = k.engine();
    assert!(files_touched_by(e, "u", 0, 10).unwrap().is_empty());
    assert!(largest_folders(e, "u", 3).unwrap().is_empty());
    assert_eq!(cycles_consumed(e, "a", 0, 10).unwrap(), 0.0);
    assert_eq!(net_traffic(e, "a", 0, 10).unwrap(), 0.0);
    assert!(large_recent_files(e, DAY_US, DAY_US, GIB).unwrap().is_empty());
    assert_eq!(files_touched_by(e, "u", 10, 0).unwrap_err().code(), "InvalidArgument");
    assert_eq!(largest_folders(e, "u", 0).unwrap_err().code(), "InvalidArgument");
}

#[test]
fn corpus_ingests_in_both_formats() {
    let events = generate(&CorpusSpec { events: 100_000, ..Default::default() });
    for format in [LogFormat::Jsonl, LogFormat::Csv] {
        let k = Kernel::in_memory().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if format == LogFormat::Csv { "logs.csv" } else { "logs.jsonl" });
        std::fs::write(&path, render(&events, format)).unwrap();
        assert_eq!(LogFormat::from_path(&path), format);
        let r = ingest(&k, &path, format).unwrap();
        assert_eq!((r.lines, r.ingested, r.duplicates, r.malformed), (100_000, 100_000, 0, 0));
        assert_eq!(stored(&k), events);
    }
}

#[test]
fn malformed_lines_are_skipped_up_to_the_threshold() {
    let events = generate(&CorpusSpec { events: 10_000, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut text = String::new();
    let mut bad = 0;
    for e in &events {
        text.push_str(&e.to_json_line());
        if rng.gen_bool(0.005) {
            text.push_str("{\"ts\": oops\n");
            bad += 1;
        }
    }
    let k = Kernel::in_memory().unwrap();
    let r = ingest_str(&k, &text, LogFormat::Jsonl).unwrap();
    assert_eq!(r.lines, events.len() + bad);
    assert_eq!(r.malformed, bad);
    assert_eq!(r.ingested, events.len());
    assert_eq!(r.ingested, r.lines - r.malformed);

    let mut worse = text.clone();
    for _ in 0..200 {
        worse.push_str("garbage\n");
    }
    let k2 = Kernel::in_memory().unwrap();
    assert_eq!(ingest_str(&k2, &worse, LogFormat::Jsonl).unwrap_err().code(), "FormatError");
    assert!(stored(&k2).is_empty());
}

#[test]
fn interrupted_ingest_is_idempotent_on_rerun() {
    let events = generate(&CorpusSpec { events: 25_000, ..Default::default() });
    let text = render(&events, LogFormat::Csv);
    let k = Kernel::in_memory().unwrap();
    k.set_knob(&SyscallContext::root(), "ingest_batch", 1000.0).unwrap();
    // A crash after some batches leaves a committed prefix behind.
    let prefix = render(&events[..7_000], LogFormat::Csv);
    assert_eq!(ingest_str(&k, &prefix, LogFormat::Csv).unwrap().ingested, 7_000);
    let r = ingest_str(&k, &text, LogFormat::Csv).unwrap();
    assert_eq!((r.ingested, r.duplicates), (18_000, 7_000));
    let again = ingest_str(&k, &text, LogFormat::Csv).unwrap();
    assert_eq!((again.ingested, again.duplicates), (0, 25_000));
    assert_eq!(stored(&k), events);
}

#[test]
fn canned_queries_match_full_scan_oracle() {
    let spec = CorpusSpec { events: 100_000, ..Default::default() };
    let events = generate(&spec);
    let k = Kernel::in_memory().unwrap();
    ingest_str(&k, &render(&events, LogFormat::Jsonl), LogFormat::Jsonl).unwrap();
    let all = stored(&k);
    let e = k.engine();
    let (lo, hi) = (events[0].ts, events.last().unwrap().ts);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..40 {
        let user = format!("u{:03}", rng.gen_range(0..spec.users + 2));
        let app = format!("app{:02}", rng.gen_range(0..spec.apps + 2));
        let t0 = rng.gen_range(lo - 1000..hi);
        let t1 = if i == 0 { i64::MAX } else { rng.gen_range(t0..=hi + 1000) };
        assert_eq!(files_touched_by(e, &user, t0, t1).unwrap(), oracle::touched(&all, &user, t0, t1));
        let n = rng.gen_range(1..40);
        assert_eq!(largest_folders(e, &user, n).unwrap(), oracle::folders(&all, &user, n));
        assert_eq!(cycles_consumed(e, &app, t0, t1).unwrap(), oracle::sum(&all, &app, EventKind::CpuSample, t0, t1));
        assert_eq!(net_traffic(e, &app, t0, t1).unwrap(), oracle::sum(&all, &app, EventKind::NetSample, t0, t1));
        let now = rng.gen_range(lo..=hi);
        assert_eq!(large_recent_files(e, now, DAY_US, GIB).unwrap(), oracle::large_recent(&all, now, DAY_US, GIB));
    }
    let any = large_recent_files(e, hi, hi - lo, GIB).unwrap();
    assert!(!any.is_empty() && any.iter().all(|(_, v)| *v > GIB));
}

#[test]
fn largest_folders_boundaries() {
    let k = Kernel::in_memory().unwrap();
    let mk = |ts: i64, obj: &str, v: f64| LogEvent {
        ts,
        host: "h".into(),
        user: "ann".into(),
        app: "du".into(),
        kind: EventKind::FolderSize,
        object: obj.into(),
        value: v,
    };
    let evs = [mk(1, "/b", 5.0), mk(2, "/a", 5.0), mk(3, "/c", 9.0), mk(4, "/c", 1.0)];
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for e in &evs {
        f.write_all(e.to_json_line().as_bytes()).unwrap();
    }
    ingest(&k, f.path(), LogFormat::Jsonl).unwrap();
    // The latest sample of /c wins; ties sort by name.
    let got = largest_folders(k.engine(), "ann", 10).unwrap();
    assert_eq!(got, vec![("/a".to_string(), 5.0), ("/b".to_string(), 5.0), ("/c".to_string(), 1.0)]);
    assert_eq!(largest_folders(k.engine(), "ann", 1).unwrap(), vec![("/a".to_string(), 5.0)]);
}
