use std::collections::BTreeMap;

use dbos_core::engine::{AggFunc, AggSpec};
use dbos_core::query::{run_query, OrderBy, Projection, Query, SelectItem};
use dbos_core::syscall::{Kernel, SyscallContext};
use dbos_core::{CmpOp, Engine, Error, Predicate, Row, Schema, Value, ValueKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn parse_offset(engine: &Engine, text: &str) -> usize {
    match Query::parse_checked(text, engine) {
        Err(Error::Parse { offset, .. }) => offset,
        Err(e) => panic!("{text}: {e}"),
        Ok(q) => panic!("{text} accepted as {q}"),
    }
}

fn files_engine(seed: u64, n: i64) -> (Engine, Vec<Row>) {
    let e = Engine::in_memory();
    e.create_table(
        Schema::new("files")
            .column("id", ValueKind::Int64)
            .column("owner", ValueKind::Text)
            .column("size", ValueKind::Int64)
            .nullable("kind", ValueKind::Text)
            .column("atime", ValueKind::Timestamp)
            .primary_key(&["id"])
            .index(&["owner"]),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Row> = (0..n)
        .map(|id| {
            Row::new(vec![
                id.into(),
                format!("u{}", rng.gen_range(0..4)).into(),
                rng.gen_range(0i64..1000).into(),
                if rng.gen_bool(0.1) { Value::Null } else { ["dir", "file", "link"][rng.gen_range(0..3)].into() },
                Value::Timestamp(rng.gen_range(0..10_000)),
            ])
        })
        .collect();
    e.run(0, |t| rows.iter().try_for_each(|r| t.insert("files", r.clone()))).unwrap();
    (e, rows)
}

const COLS: [&str; 5] = ["id", "owner", "size", "kind", "atime"];

fn col_index(c: &str) -> usize {
    COLS.iter().position(|x| *x == c).unwrap()
}

fn eval(p: &Predicate, r: &Row) -> bool {
    match p {
        Predicate::True => true,
        Predicate::Cmp { column, op, value } => {
            let v = r.get(col_index(column));
            let lit = match (v, value) {
                (Value::Timestamp(_), Value::Int64(i)) => Value::Timestamp(*i),
                _ => value.clone(),
            };
            let o = v.cmp(&lit);
            match op {
                CmpOp::Eq => o.is_eq(),
                CmpOp::Ne => o.is_ne(),
                CmpOp::Lt => o.is_lt(),
                CmpOp::Le => o.is_le(),
                CmpOp::Gt => o.is_gt(),
                CmpOp::Ge => o.is_ge(),
            }
        }
        Predicate::And(a, b) => eval(a, r) && eval(b, r),
        Predicate::Or(a, b) => eval(a, r) || eval(b, r),
        Predicate::Not(a) => !eval(a, r),
    }
}

fn agg_oracle(spec: &AggSpec, rows: &[&Row]) -> Value {
    let Some(c) = &spec.column else { return Value::Int64(rows.len() as i64) };
    let vals: Vec<&Value> = rows.iter().map(|r| r.get(col_index(c))).filter(|v| !v.is_null()).collect();
    match spec.func {
        AggFunc::Count => Value::Int64(vals.len() as i64),
        AggFunc::Min => vals.iter().min().map_or(Value::Null, |v| (*v).clone()),
        AggFunc::Max => vals.iter().max().map_or(Value::Null, |v| (*v).clone()),
        AggFunc::Sum if vals.is_empty() => Value::Null,
        AggFunc::Sum => Value::Int64(vals.iter().map(|v| v.as_i64().unwrap()).sum()),
        _ => unreachable!(),
    }
}

/// Brute-force evaluation of a checked query over all rows.
fn oracle(q: &Query, rows: &[Row]) -> Vec<Row> {
    let matching: Vec<&Row> = rows.iter().filter(|r| q.filter.as_ref().is_none_or(|p| eval(p, r))).collect();
    let items = match &q.projection {
        Projection::Star => COLS.iter().map(|c| SelectItem::Column(c.to_string())).collect(),
        Projection::Items(i) => i.clone(),
    };
    let value_of = |item: &SelectItem, group: &[&Row]| match item {
        SelectItem::Column(c) => group[0].get(col_index(c)).clone(),
        SelectItem::Agg(a) => agg_oracle(a, group),
    };
    // (sort key, output row)
    let mut out: Vec<(Value, Row)> = if q.is_aggregate() {
        let mut groups: BTreeMap<Vec<Value>, Vec<&Row>> = BTreeMap::new();
        for r in &matching {
            groups.entry(q.group_by.iter().map(|g| r.get(col_index(g)).clone()).collect()).or_default().push(r);
        }
        if q.group_by.is_empty() && groups.is_empty() {
            groups.insert(vec![], vec![]);
        }
        groups
            .values()
            .map(|g| {
                let key = q.order_by.as_ref().map_or(Value::Null, |o| {
                    if g.is_empty() {
                        agg_oracle(match &o.key { SelectItem::Agg(a) => a, _ => unreachable!() }, g)
                    } else {
                        value_of(&o.key, g)
                    }
                });
                let row = items
                    .iter()
                    .map(|i| match i {
                        SelectItem::Agg(a) => agg_oracle(a, g),
                        c => value_of(c, g),
                    })
                    .collect();
                (key, Row::new(row))
            })
            .collect()
    } else {
        matching
            .iter()
            .map(|r| {
                let key = q.order_by.as_ref().map_or(Value::Null, |o| value_of(&o.key, &[r]));
                (key, Row::new(items.iter().map(|i| value_of(i, &[r])).collect()))
            })
            .collect()
    };
    if let Some(o) = &q.order_by {
        out.sort_by(|a, b| if o.descending { b.0.cmp(&a.0) } else { a.0.cmp(&b.0) });
    }
    if let Some(n) = q.limit {
        out.truncate(n);
    }
    out.into_iter().map(|(_, r)| r).collect()
}

fn random_pred(rng: &mut ChaCha8Rng, depth: u32) -> Predicate {
    if depth == 0 || rng.gen_bool(0.4) {
        let ops = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];
        let op = ops[rng.gen_range(0..6)];
        return match rng.gen_range(0..5) {
            0 => Predicate::cmp("id", op, rng.gen_range(-5i64..320)),
            1 => Predicate::cmp("owner", op, format!("u{}", rng.gen_range(0..5)).as_str()),
            2 => Predicate::cmp("size", op, rng.gen_range(0i64..1000)),
            3 => Predicate::cmp("kind", op, if rng.gen_bool(0.2) { Value::Null } else { "file".into() }),
            _ => Predicate::cmp("atime", op, rng.gen_range(0i64..10_000)),
        };
    }
    match rng.gen_range(0..3) {
        0 => Predicate::And(Box::new(random_pred(rng, depth - 1)), Box::new(random_pred(rng, depth - 1))),
        1 => Predicate::Or(Box::new(random_pred(rng, depth - 1)), Box::new(random_pred(rng, depth - 1))),
        _ => Predicate::Not(Box::new(random_pred(rng, depth - 1))),
    }
}

fn random_query(rng: &mut ChaCha8Rng) -> Query {
    let filter = rng.gen_bool(0.8).then(|| random_pred(rng, 3));
    let limit = rng.gen_bool(0.4).then(|| rng.gen_range(0..40));
    if rng.gen_bool(0.5) {
        let group_by: Vec<String> = match rng.gen_range(0..3) {
            0 => vec![],
            1 => vec!["owner".into()],
            _ => vec!["owner".into(), "kind".into()],
        };
        let mut items: Vec<SelectItem> = group_by.iter().cloned().map(SelectItem::Column).collect();
        let aggs = [
            AggSpec::count_all(),
            AggSpec::new(AggFunc::Sum, "size"),
            AggSpec::new(AggFunc::Min, "atime"),
            AggSpec::new(AggFunc::Max, "kind"),
            AggSpec::new(AggFunc::Count, "kind"),
        ];
        for _ in 0..rng.gen_range(1..3) {
            items.push(SelectItem::Agg(aggs[rng.gen_range(0..aggs.len())].clone()));
        }
        let order_by = rng.gen_bool(0.6).then(|| OrderBy { key: items[rng.gen_range(0..items.len())].clone(), descending: rng.gen() });
        Query { projection: Projection::Items(items), from: "files".into(), filter, group_by, order_by, limit }
    } else {
        let projection = if rng.gen_bool(0.3) {
            Projection::Star
        } else {
            Projection::Items((0..rng.gen_range(1..4)).map(|_| SelectItem::Column(COLS[rng.gen_range(0..5)].into())).collect())
        };
        let order_by = rng.gen_bool(0.6).then(|| OrderBy { key: SelectItem::Column(COLS[rng.gen_range(0..5)].into()), descending: rng.gen() });
        Query { projection, from: "files".into(), filter, group_by: vec![], order_by, limit }
    }
}

#[test]
fn execution_matches_brute_force() {
    let (e, rows) = files_engine(1, 300);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1500 {
        let q = random_query(&mut rng);
        let text = q.to_string();
        let checked = Query::parse_checked(&text, &e).unwrap_or_else(|err| panic!("{text}: {err}"));
        assert_eq!(checked, q);
        let got = run_query(&e, &text).unwrap();
        assert_eq!(got.rows, oracle(&q, &rows), "{text}");
    }
}

#[test]
fn count_on_fresh_tasks_is_zero() {
    let k = Kernel::in_memory().unwrap();
    let rs = run_query(k.engine(), "SELECT count(*) FROM tasks").unwrap();
    assert_eq!(rs.columns, vec!["count(*)"]);
    assert_eq!(rs.rows, vec![Row::new(vec![Value::Int64(0)])]);
}

#[test]
fn unknown_identifiers_fail_at_parse_time() {
    let k = Kernel::in_memory().unwrap();
    let e = k.engine();
    assert_eq!(parse_offset(e, "SELECT a FROM nope"), 14);
    assert_eq!(parse_offset(e, "SELECT status, nope FROM tasks"), 15);
    assert_eq!(parse_offset(e, "SELECT * FROM tasks WHERE status = 'done' AND bogus > 1"), 46);
    assert_eq!(parse_offset(e, "SELECT count(*) FROM tasks GROUP BY nope"), 36);
    assert_eq!(parse_offset(e, "SELECT * FROM tasks ORDER BY nope"), 29);
    assert_eq!(parse_offset(e, "SELECT sum(nope) FROM tasks"), 7);
    assert_eq!(parse_offset(e, "SELECT owner, count(*) FROM tasks"), 7);
    assert_eq!(parse_offset(e, "SELECT * FROM tasks GROUP BY owner"), 7);
    assert_eq!(parse_offset(e, "SELECT owner FROM tasks ORDER BY count(*)"), 33);
    assert_eq!(parse_offset(e, "SELECT count(*) FROM tasks GROUP BY owner ORDER BY status"), 51);
}

#[test]
fn malformed_query_changes_nothing() {
    let k = Kernel::in_memory().unwrap();
    let before = k.engine().last_commit_ts();
    assert!(run_query(k.engine(), "SELECT FROM").is_err());
    assert!(run_query(k.engine(), "SELECT * FROM tasks WHERE").is_err());
    assert_eq!(k.engine().last_commit_ts(), before);
}

#[test]
fn monitoring_queries_are_expressible() {
    let k = Kernel::in_memory().unwrap();
    let root = SyscallContext::root();
    k.register_function(&root, "f", None, true).unwrap();
    for _ in 0..3 {
        k.task_spawn(&root, "f", &[], 1, None).unwrap();
    }
    let e = k.engine();
    let texts = [
        "SELECT status, count(*) FROM tasks GROUP BY status",
        "SELECT * FROM tasks WHERE status = 'runnable' ORDER BY submit_ts LIMIT 1",
        "SELECT owner, sum(size) FROM inodes WHERE kind = 'file' GROUP BY owner ORDER BY sum(size) DESC LIMIT 10",
        "SELECT object, max(value) FROM log_events WHERE kind = 'file_touch' AND ts >= 0 AND value > 1073741824 GROUP BY object",
        "SELECT app, sum(value) FROM log_events WHERE kind = 'cpu_sample' GROUP BY app",
        "SELECT source, median(value) FROM metrics WHERE name = 'task_runtime_us' GROUP BY source",
        "SELECT worker_id FROM workers WHERE busy = false",
        "SELECT name, value FROM knobs ORDER BY name",
    ];
    for t in texts {
        run_query(e, t).unwrap_or_else(|err| panic!("{t}: {err}"));
    }
    let rs = run_query(e, "SELECT status, count(*) FROM tasks GROUP BY status").unwrap();
    assert_eq!(rs.rows, vec![Row::new(vec!["runnable".into(), Value::Int64(3)])]);
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z_][a-z0-9_]{0,6}".prop_filter("keyword", |s| {
        !["select", "from", "where", "group", "by", "order", "asc", "desc", "limit", "and", "or", "not", "true", "false", "null"]
            .contains(&s.as_str())
    })
}

fn literal() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<i64>().prop_map(Value::Int64),
        any::<f64>().prop_filter("finite", |f| f.is_finite()).prop_map(Value::Float64),
        ".{0,8}".prop_map(Value::Text),
        proptest::collection::vec(any::<u8>(), 0..6).prop_map(Value::Bytes),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::Timestamp),
    ]
}

fn predicate() -> impl Strategy<Value = Predicate> {
    let ops = prop_oneof![
        Just(CmpOp::Eq),
        Just(CmpOp::Ne),
        Just(CmpOp::Lt),
        Just(CmpOp::Le),
        Just(CmpOp::Gt),
        Just(CmpOp::Ge)
    ];
    let leaf = (ident(), ops, literal()).prop_map(|(column, op, value)| Predicate::Cmp { column, op, value });
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Predicate::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Predicate::Or(Box::new(a), Box::new(b))),
            inner.prop_map(|a| Predicate::Not(Box::new(a))),
        ]
    })
}

fn select_item() -> impl Strategy<Value = SelectItem> {
    let func = prop_oneof![
        Just(AggFunc::Count),
        Just(AggFunc::Sum),
        Just(AggFunc::Min),
        Just(AggFunc::Max),
        Just(AggFunc::Avg),
        Just(AggFunc::Median)
    ];
    prop_oneof![
        ident().prop_map(SelectItem::Column),
        (func, ident()).prop_map(|(func, c)| SelectItem::Agg(AggSpec { func, column: Some(c) })),
        Just(SelectItem::Agg(AggSpec::count_all())),
    ]
}

fn query() -> impl Strategy<Value = Query> {
    (
        prop_oneof![Just(Projection::Star), proptest::collection::vec(select_item(), 1..4).prop_map(Projection::Items)],
        ident(),
        proptest::option::of(predicate()),
        proptest::collection::vec(ident(), 0..3),
        proptest::option::of((select_item(), any::<bool>()).prop_map(|(key, descending)| OrderBy { key, descending })),
        proptest::option::of(0usize..1_000_000),
    )
        .prop_map(|(projection, from, filter, group_by, order_by, limit)| Query { projection, from, filter, group_by, order_by, limit })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn print_then_parse_is_identity(q in query()) {
        let text = q.to_string();
        let back = Query::parse(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
        prop_assert_eq!(&back, &q);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn arbitrary_text_never_panics(s in ".{0,60}") {
        let _ = Query::parse(&s);
    }
}
