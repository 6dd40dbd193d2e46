mod support;

use std::collections::{BTreeMap, BTreeSet};

use dbos_core::os::schema;
use dbos_core::provenance::{ErasureReason, ObjectRef, ProvOp, ProvenanceRecord, PurposeDecision};
use dbos_core::syscall::{Kernel, SyscallContext};
use dbos_core::{Row, ScanOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn root() -> SyscallContext {
    SyscallContext::root()
}

fn rec(op: ProvOp, src: Option<ObjectRef>, dst: Option<ObjectRef>) -> ProvenanceRecord {
    ProvenanceRecord { ts: 0, actor: "t".into(), task_id: None, op, src, dst, purpose: "test".into() }
}

fn record_all(k: &Kernel, recs: &[ProvenanceRecord]) {
    let mut txn = k.engine().begin().unwrap();
    for r in recs {
        k.ledger().record(&mut txn, r).unwrap();
    }
    txn.commit().unwrap();
}

#[test]
fn malformed_records_are_rejected() {
    let k = Kernel::in_memory().unwrap();
    let mut txn = k.engine().begin().unwrap();
    let e = k.ledger().record(&mut txn, &rec(ProvOp::Copy, Some(ObjectRef::file(1)), None)).unwrap_err();
    assert_eq!(e.code(), "MalformedRecord");
}

#[test]
fn aborted_operation_leaves_no_ledger_rows() {
    let k = Kernel::in_memory().unwrap();
    let before = k.provenance_records().unwrap().len();
    let mut txn = k.engine().begin().unwrap();
    k.ledger().record(&mut txn, &rec(ProvOp::Create, None, Some(ObjectRef::file(5)))).unwrap();
    txn.abort().unwrap();
    assert_eq!(k.provenance_records().unwrap().len(), before);
}

#[test]
fn chain_lineage() {
    let k = Kernel::in_memory().unwrap();
    let [a, b, c] = [ObjectRef::file(100), ObjectRef::file(101), ObjectRef::message(7)];
    assert!(k.lineage_descendants(a).unwrap().is_empty());
    record_all(&k, &[rec(ProvOp::Copy, Some(a), Some(b)), rec(ProvOp::Transmit, Some(b), Some(c))]);
    assert_eq!(k.lineage_descendants(a).unwrap(), BTreeSet::from([b, c]));
    assert_eq!(k.lineage_ancestors(c).unwrap(), BTreeSet::from([a, b]));
    // Reads are not lineage edges.
    record_all(&k, &[rec(ProvOp::Read, Some(c), Some(ObjectRef::task(1)))]);
    assert_eq!(k.lineage_descendants(a).unwrap(), BTreeSet::from([b, c]));
}

#[test]
fn random_dag_closure_matches_bfs() {
    let k = Kernel::in_memory().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 300u64;
    let ops = [ProvOp::Copy, ProvOp::Mutate, ProvOp::Transmit];
    let mut edges = Vec::new();
    let mut recs = Vec::new();
    while edges.len() < 1000 {
        let a = rng.gen_range(0..n - 1);
        let b = rng.gen_range(a + 1..n);
        edges.push((ObjectRef::file(a), ObjectRef::file(b)));
        recs.push(rec(ops[rng.gen_range(0..3)], Some(ObjectRef::file(a)), Some(ObjectRef::file(b))));
    }
    record_all(&k, &recs);
    let reversed: Vec<_> = edges.iter().map(|(a, b)| (*b, *a)).collect();
    for i in (0..n).step_by(7) {
        let o = ObjectRef::file(i);
        assert_eq!(k.lineage_descendants(o).unwrap(), support::bfs(&edges, o));
        assert_eq!(k.lineage_ancestors(o).unwrap(), support::bfs(&reversed, o));
    }
}

#[test]
fn purpose_checks() {
    let k = Kernel::in_memory().unwrap();
    let r = root();
    let f = k.file_create(&r, "/f").unwrap();
    let ads = r.clone().with_purpose("ads");
    assert_eq!(k.check_purpose(&ads, ObjectRef::file(f)).unwrap(), PurposeDecision::Allow);
    k.tag_pii(&r, ObjectRef::file(f), "sam").unwrap();
    k.set_purpose_grant(&r, "sam", "reporting", true).unwrap();
    assert_eq!(k.check_purpose(&ads, ObjectRef::file(f)).unwrap(), PurposeDecision::Deny);
    let rep = r.clone().with_purpose("reporting");
    assert_eq!(k.check_purpose(&rep, ObjectRef::file(f)).unwrap(), PurposeDecision::Allow);
    assert_eq!(k.file_read(&ads, "/f", 0, 1).unwrap_err().code(), "PermissionDenied");
    assert!(k.file_read(&rep, "/f", 0, 1).is_ok());
    let eve = SyscallContext::new("eve", 0, "x");
    assert_eq!(k.set_purpose_grant(&eve, "sam", "ads", true).unwrap_err().code(), "PermissionDenied");
    k.set_purpose_grant(&SyscallContext::new("sam", 0, "consent"), "sam", "ads", true).unwrap();
    assert_eq!(k.check_purpose(&ads, ObjectRef::file(f)).unwrap(), PurposeDecision::Allow);
    let dir = k.file_stat(&r, "/").unwrap().inode_id;
    assert_eq!(k.tag_pii(&r, ObjectRef::file(dir), "sam").unwrap_err().code(), "UnknownObject");
}

#[test]
fn purpose_fuzz_matches_decision_table() {
    let k = Kernel::in_memory().unwrap();
    let r = root();
    let subjects = ["s0", "s1", "s2"];
    let purposes = ["ads", "reporting", "billing"];
    let files: Vec<u64> = (0..6).map(|i| k.file_create(&r, &format!("/f{i}")).unwrap()).collect();
    let mut tags: BTreeSet<(u64, &str)> = BTreeSet::new();
    let mut grants: BTreeMap<(&str, &str), bool> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..600 {
        let f = files[rng.gen_range(0..files.len())];
        let s = subjects[rng.gen_range(0..3)];
        let p = purposes[rng.gen_range(0..3)];
        match rng.gen_range(0..3) {
            0 => {
                k.tag_pii(&r, ObjectRef::file(f), s).unwrap();
                tags.insert((f, s));
            }
            1 => {
                let allowed = rng.gen_bool(0.5);
                k.set_purpose_grant(&r, s, p, allowed).unwrap();
                grants.insert((s, p), allowed);
            }
            _ => {
                let want = if tags.iter().filter(|(o, _)| *o == f).all(|(_, s)| grants.get(&(*s, p)) == Some(&true)) {
                    PurposeDecision::Allow
                } else {
                    PurposeDecision::Deny
                };
                assert_eq!(k.check_purpose(&r.clone().with_purpose(p), ObjectRef::file(f)).unwrap(), want);
            }
        }
    }
}

#[test]
fn erasure_follows_copies_and_sends() {
    let k = Kernel::in_memory().unwrap();
    let r = root();
    k.channel_create(&r, "out").unwrap();
    let a = k.file_create(&r, "/a").unwrap();
    k.file_write(&r, "/a", 0, b"sam's data").unwrap();
    k.tag_pii(&r, ObjectRef::file(a), "sam").unwrap();
    k.set_purpose_grant(&r, "sam", "admin", true).unwrap();
    let b = k.file_copy(&r, "/a", "/b").unwrap();
    let m = k.file_send(&r, "/b", "out").unwrap();
    let other = k.file_create(&r, "/other").unwrap();
    k.file_read(&r, "/b", 0, 3).unwrap();

    assert!(k.erase_subject(&root(), "nobody").unwrap().is_empty());
    assert_eq!(k.erase_subject(&SyscallContext::new("bob", 0, "x"), "sam").unwrap_err().code(), "PermissionDenied");
    let report = k.erase_subject(&r, "sam").unwrap();
    let mut got: Vec<_> = report.erased.clone();
    got.sort_by_key(|(o, _)| *o);
    let mut want = vec![
        (ObjectRef::file(a), ErasureReason::Tagged),
        (ObjectRef::file(b), ErasureReason::Derived),
        (ObjectRef::message(m), ErasureReason::Derived),
    ];
    want.sort_by_key(|(o, _)| *o);
    assert_eq!(got, want);
    assert!(report.advisory_reads.iter().any(|(o, _)| *o == ObjectRef::file(b)));
    assert!(report.to_string().contains("# advisory\n"));

    assert_eq!(k.file_read(&r, "/a", 0, 1).unwrap_err().code(), "NotFound");
    assert_eq!(k.file_read(&r, "/b", 0, 1).unwrap_err().code(), "NotFound");
    assert!(k.file_stat(&r, "/other").is_ok());
    let txn = k.engine().begin().unwrap();
    assert!(txn.get(schema::MESSAGES, &[m.into()]).unwrap().is_none());
    assert!(txn.scan(schema::PII_TAGS, &ScanOptions::new()).unwrap().rows.is_empty());
    assert!(txn.scan(schema::BLOBS, &ScanOptions::new()).unwrap().rows.is_empty());
    drop(txn);
    assert!(k.provenance_records().unwrap().iter().any(|(_, p)| p.op == ProvOp::Copy));
    assert!(k.erase_subject(&r, "sam").unwrap().is_empty());
    let _ = other;
}

fn object_rows(k: &Kernel) -> BTreeMap<String, Vec<Row>> {
    let dump = k.engine().dump();
    [schema::INODES, schema::BLOBS, schema::DENTRIES, schema::MESSAGES]
        .iter()
        .map(|t| (t.to_string(), dump.tables[*t].1.clone()))
        .collect()
}

#[test]
fn random_pipelines_erase_exactly_the_closure() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for round in 0..20 {
        let k = Kernel::in_memory().unwrap();
        let r = root();
        k.channel_create(&r, "net").unwrap();
        for s in ["s0", "s1"] {
            k.set_purpose_grant(&r, s, "admin", true).unwrap();
        }
        let mut edges: Vec<(ObjectRef, ObjectRef)> = Vec::new();
        let mut files: Vec<(String, ObjectRef)> = Vec::new();
        let mut tags: BTreeMap<ObjectRef, &str> = BTreeMap::new();
        for i in 0..rng.gen_range(2..6) {
            let path = format!("/src{i}");
            let id = ObjectRef::file(k.file_create(&r, &path).unwrap());
            k.file_write(&r, &path, 0, format!("payload {i}").as_bytes()).unwrap();
            if rng.gen_bool(0.7) {
                let s = ["s0", "s1"][rng.gen_range(0..2)];
                k.tag_pii(&r, id, s).unwrap();
                tags.insert(id, s);
            }
            files.push((path, id));
        }
        for j in 0..rng.gen_range(3..12) {
            let (from_path, from) = files[rng.gen_range(0..files.len())].clone();
            let depth = files.iter().filter(|(p, _)| p.starts_with("/copy")).count();
            if rng.gen_bool(0.25) || depth > 5 {
                let m = ObjectRef::message(k.file_send(&r, &from_path, "net").unwrap());
                edges.push((from, m));
            } else {
                let path = format!("/copy{j}");
                let to = ObjectRef::file(k.file_copy(&r, &from_path, &path).unwrap());
                edges.push((from, to));
                files.push((path, to));
            }
        }
        let subject = "s0";
        let tagged: BTreeSet<ObjectRef> = tags.iter().filter(|(_, s)| **s == subject).map(|(o, _)| *o).collect();
        let mut closure = tagged.clone();
        for t in &tagged {
            closure.extend(support::bfs(&edges, *t));
        }
        let before = object_rows(&k);
        let report = k.erase_subject(&r, subject).unwrap();
        let erased: BTreeSet<ObjectRef> = report.erased.iter().map(|(o, _)| *o).collect();
        assert_eq!(erased, closure, "round {round}");
        for (o, why) in &report.erased {
            assert_eq!(*why == ErasureReason::Tagged, tagged.contains(o));
        }
        assert!(k.erase_subject(&r, subject).unwrap().is_empty());

        // Minimality: everything outside the closure is byte-identical.
        let after = object_rows(&k);
        let keep = |table: &str, row: &Row| -> bool {
            let id = row.get(if table == schema::DENTRIES { 2 } else { 0 }).as_u64().unwrap();
            let obj = if table == schema::MESSAGES { ObjectRef::message(id) } else { ObjectRef::file(id) };
            !closure.contains(&obj)
        };
        for (table, rows) in &before {
            let expected: Vec<&Row> = rows.iter().filter(|r| keep(table, r)).collect();
            let actual: Vec<&Row> = after[table].iter().collect();
            assert_eq!(actual, expected, "round {round} table {table}");
        }
    }
}
