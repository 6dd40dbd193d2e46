use dbos_core::bench::{record, run, BenchConfig, Suite, TEXT_HEADER};
use dbos_core::syscall::Kernel;
use dbos_core::{Durability, Predicate, ScanOptions};

#[test]
fn every_suite_reports_positive_throughput() {
    let cfg = BenchConfig::default().scaled(0.01);
    for suite in Suite::ALL {
        let results = run(suite, &cfg).unwrap();
        assert!(!results.is_empty());
        for r in &results {
            assert_eq!(r.suite, suite.as_str());
            assert!(r.ops > 0 && r.ops_per_sec > 0.0, "{r}");
            assert!(r.p50_us <= r.p99_us, "{r}");
            assert_eq!(r.to_string().split_whitespace().count(), TEXT_HEADER.split_whitespace().count());
            let json: serde_json::Value = serde_json::from_str(&r.json_line()).unwrap();
            assert_eq!(json["suite"], suite.as_str());
        }
    }
}

#[test]
fn durable_suites_run_on_scratch_directories() {
    let cfg = BenchConfig { durability: Durability::Full, ..BenchConfig::default().scaled(0.002) };
    for suite in [Suite::Txn, Suite::Fs] {
        assert!(run(suite, &cfg).unwrap().iter().all(|r| r.ops > 0));
    }
}

#[test]
fn results_are_written_to_metrics() {
    let k = Kernel::in_memory().unwrap();
    let results = run(Suite::Fs, &BenchConfig::default().scaled(0.005)).unwrap();
    record(&k, &results).unwrap();
    let txn = k.engine().begin().unwrap();
    let rows = txn.scan("metrics", &ScanOptions::new().filter(Predicate::eq("source", "bench"))).unwrap().rows;
    assert_eq!(rows.len(), results.len() * 3);
    // The measured kernel itself is untouched apart from the metrics.
    assert!(k.tasks(&dbos_core::syscall::SyscallContext::root(), None).unwrap().is_empty());
}
