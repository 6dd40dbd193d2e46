//! Embedded transactional table store.
//!
//! Every table is an ordered map from primary key to a chain of committed
//! versions. Transactions read from the snapshot taken at `begin`, buffer
//! their writes privately and validate them at commit: if any written key has
//! a version newer than the snapshot the commit fails with `WriteConflict`
//! (first committer wins). Commits are serialized by a single commit lock,
//! appended to the write-ahead log, then installed under one logical
//! timestamp. Triggers run on the committing thread once the commit is
//! installed.

mod aggregate;
pub(crate) mod codec;
mod snapshot;
mod table;
pub mod wal;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

pub use aggregate::{median, AggFunc, AggSpec};
pub use snapshot::SNAP_MAGIC;
pub use wal::{OpKind, WalEntry, WalPayload, WalRecord, WAL_MAGIC};

use crate::error::{Error, Result};
use crate::predicate::{BoundPredicate, CmpOp, Predicate};
use crate::schema::Schema;
use crate::value::{format_key, Key, Row, SharedRow, Value};
use table::TableData;
use wal::WalWriter;

const WAL_FILE: &str = "wal.log";
const GC_INTERVAL: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Durability {
    /// Log records are written and fsynced before commit returns.
    #[default]
    Full,
    /// Log records are handed to the OS before commit returns, without fsync.
    Buffered,
    /// No log is written.
    Off,
}

#[derive(Clone, Debug, Default)]
pub struct EngineConfig {
    /// Directory holding `wal.log` and snapshot files. `None` keeps
    /// everything in memory.
    pub data_dir: Option<PathBuf>,
    pub durability: Durability,
}

impl EngineConfig {
    pub fn in_memory() -> Self {
        EngineConfig { data_dir: None, durability: Durability::Off }
    }

    pub fn at(dir: impl Into<PathBuf>, durability: Durability) -> Self {
        EngineConfig { data_dir: Some(dir.into()), durability }
    }
}

/// A named, predicate-restricted window onto one table.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewDef {
    pub view_name: String,
    pub base_table: String,
    pub predicate: Predicate,
    pub projected_columns: Option<Vec<String>>,
}

impl ViewDef {
    pub fn new(view_name: &str, base_table: &str, predicate: Predicate) -> Self {
        ViewDef {
            view_name: view_name.to_string(),
            base_table: base_table.to_string(),
            predicate,
            projected_columns: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TriggerEventKind {
    Insert,
    Update,
    Delete,
}

#[derive(Clone, Debug)]
pub struct TriggerDef {
    pub table_name: String,
    pub event: TriggerEventKind,
    /// Evaluated on the new row (the old row for deletes).
    pub predicate: Option<Predicate>,
}

/// What a trigger callback sees for one matching row event.
#[derive(Debug)]
pub struct TriggerEvent<'a> {
    pub trigger_id: u64,
    pub table: &'a str,
    pub kind: TriggerEventKind,
    pub key: &'a [Value],
    pub before: Option<&'a Row>,
    pub after: Option<&'a Row>,
    pub commit_ts: u64,
}

pub type TriggerAction = Arc<dyn Fn(&TriggerEvent<'_>) + Send + Sync>;

struct Trigger {
    id: u64,
    def: TriggerDef,
    bound: BoundPredicate,
    action: TriggerAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnStatus {
    Active,
    Committed,
    Aborted,
}

/// Identifier of a written snapshot: the last log sequence number it covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotId {
    pub lsn: u64,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub snapshot_lsn: Option<u64>,
    pub replayed_txns: usize,
    pub replayed_ddl: usize,
    pub skipped_records: usize,
    /// Well-formed records of transactions without a commit record.
    pub dropped_records: usize,
    pub dropped_bytes: u64,
    pub stop_reason: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub commits: u64,
    pub aborts: u64,
    pub write_conflicts: u64,
}

/// Committed contents of every table, for equality checks and inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct Dump {
    pub tables: BTreeMap<String, (Schema, Vec<Row>)>,
    pub views: BTreeMap<String, ViewDef>,
}

impl fmt::Display for Dump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, (schema, rows)) in &self.tables {
            let cols: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
            writeln!(f, "table {name} ({}) {} rows", cols.join(", "), rows.len())?;
            for r in rows {
                writeln!(f, "  {r}")?;
            }
        }
        for (name, v) in &self.views {
            writeln!(f, "view {name} over {} where {}", v.base_table, v.predicate)?;
        }
        Ok(())
    }
}

/// Output of a scan or aggregate: column names plus rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSet {
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

/// Scan options; the defaults select every row in primary-key order.
#[derive(Clone, Debug, Default)]
pub struct ScanOptions {
    pub predicate: Option<Predicate>,
    pub projection: Option<Vec<String>>,
    pub order_by: Vec<(String, bool)>,
    pub limit: Option<usize>,
}

impl ScanOptions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn filter(mut self, p: Predicate) -> Self {
        self.predicate = Some(match self.predicate.take() {
            None => p,
            Some(q) => q.and(p),
        });
        self
    }

    pub fn project(mut self, cols: &[&str]) -> Self {
        self.projection = Some(cols.iter().map(|c| c.to_string()).collect());
        self
    }

    /// `descending == true` reverses the order for this column.
    pub fn order_by(mut self, col: &str, descending: bool) -> Self {
        self.order_by.push((col.to_string(), descending));
        self
    }

    pub fn limit(mut self, n: usize) -> Self {
        self.limit = Some(n);
        self
    }
}

#[derive(Default)]
struct Catalog {
    tables: BTreeMap<String, TableData>,
    views: BTreeMap<String, ViewDef>,
}

struct CommitState {
    wal: Option<WalWriter>,
    next_lsn: u64,
    gc_queue: Vec<(String, Key)>,
    commits_since_gc: u32,
}

struct Inner {
    catalog: RwLock<Catalog>,
    commit: Mutex<CommitState>,
    last_committed: AtomicU64,
    next_txn: AtomicU64,
    /// Snapshot timestamp -> number of active transactions holding it.
    active: Mutex<BTreeMap<u64, usize>>,
    triggers: RwLock<Vec<Arc<Trigger>>>,
    next_trigger: AtomicU64,
    closed: AtomicBool,
    data_dir: Option<PathBuf>,
    durability: Durability,
    commits: AtomicU64,
    aborts: AtomicU64,
    conflicts: AtomicU64,
}

/// Handle to a table store; cheap to clone and share across threads.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("last_committed", &self.inner.last_committed.load(Ordering::Relaxed))
            .field("data_dir", &self.inner.data_dir)
            .finish()
    }
}

impl Engine {
    /// Opens an engine. With a data directory, any existing snapshot and log
    /// there are recovered first.
    pub fn open(config: EngineConfig) -> Result<Engine> {
        match &config.data_dir {
            None => Ok(Engine::build(Catalog::default(), 0, 1, 1, None, None, config.durability)),
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let wal_path = dir.join(WAL_FILE);
                let snap = latest_snapshot(dir)?;
                let (engine, report) = Engine::recover_with(&wal_path, snap.as_deref(), config.durability)?;
                if report.dropped_records > 0 || report.stop_reason.is_some() {
                    log::warn!("recovery dropped {} records: {:?}", report.dropped_records, report.stop_reason);
                }
                Ok(engine)
            }
        }
    }

    pub fn in_memory() -> Engine {
        Engine::open(EngineConfig::in_memory()).expect("in-memory engine cannot fail to open")
    }

    /// Rebuilds state from an optional snapshot plus the committed prefix of
    /// the log. The log is truncated to that prefix and reopened for appends.
    pub fn recover(wal_path: &Path, snapshot_path: Option<&Path>) -> Result<(Engine, RecoveryReport)> {
        Engine::recover_with(wal_path, snapshot_path, Durability::Full)
    }

    pub fn recover_with(
        wal_path: &Path,
        snapshot_path: Option<&Path>,
        durability: Durability,
    ) -> Result<(Engine, RecoveryReport)> {
        let mut report = RecoveryReport::default();
        let mut catalog = Catalog::default();
        let (mut lsn, mut last_ts, mut next_txn) = (0u64, 0u64, 1u64);
        if let Some(path) = snapshot_path {
            let img = snapshot::read(path)?;
            report.snapshot_lsn = Some(img.lsn);
            lsn = img.lsn;
            last_ts = img.last_commit_ts;
            next_txn = img.next_txn_id;
            for (schema, rows) in img.tables {
                let mut t = TableData::new(schema.clone())?;
                for r in rows {
                    t.load(r, last_ts);
                }
                catalog.tables.insert(schema.table_name.clone(), t);
            }
            for v in img.views {
                catalog.views.insert(v.view_name.clone(), v);
            }
        }
        let snapshot_lsn = lsn;
        let scan = if wal_path.exists() { Some(wal::scan_file(wal_path)?) } else { None };
        if let Some(scan) = &scan {
            report.dropped_records = scan.dropped_records;
            report.dropped_bytes = scan.dropped_bytes;
            report.stop_reason = scan.stop_reason.clone();
            let mut pending: BTreeMap<u64, Vec<WalEntry>> = BTreeMap::new();
            for rec in &scan.records {
                lsn = lsn.max(rec.lsn);
                if rec.lsn <= snapshot_lsn {
                    report.skipped_records += 1;
                    continue;
                }
                match &rec.payload {
                    WalPayload::Write { txn_id, entries } => {
                        next_txn = next_txn.max(txn_id + 1);
                        pending.insert(*txn_id, entries.clone());
                    }
                    WalPayload::Commit { txn_id, commit_ts } => {
                        next_txn = next_txn.max(txn_id + 1);
                        last_ts = last_ts.max(*commit_ts);
                        for e in pending.remove(txn_id).unwrap_or_default() {
                            let t = catalog
                                .tables
                                .get_mut(&e.table)
                                .ok_or_else(|| Error::CorruptWal(format!("write to unknown table {}", e.table)))?;
                            t.replay(e.key, e.after, *commit_ts);
                        }
                        report.replayed_txns += 1;
                    }
                    ddl => {
                        apply_ddl(&mut catalog, ddl)?;
                        report.replayed_ddl += 1;
                    }
                }
            }
            report.dropped_records += pending.values().len();
        }
        let writer = if durability == Durability::Off {
            None
        } else {
            let valid = scan.as_ref().map(|s| s.valid_len);
            Some(WalWriter::open(wal_path, valid.or(Some(0)), durability == Durability::Full)?)
        };
        let data_dir = wal_path.parent().map(Path::to_path_buf);
        let engine = Engine::build(catalog, last_ts, next_txn, lsn + 1, writer, data_dir, durability);
        Ok((engine, report))
    }

    fn build(
        catalog: Catalog,
        last_ts: u64,
        next_txn: u64,
        next_lsn: u64,
        wal: Option<WalWriter>,
        data_dir: Option<PathBuf>,
        durability: Durability,
    ) -> Engine {
        Engine {
            inner: Arc::new(Inner {
                catalog: RwLock::new(catalog),
                commit: Mutex::new(CommitState { wal, next_lsn, gc_queue: Vec::new(), commits_since_gc: 0 }),
                last_committed: AtomicU64::new(last_ts),
                next_txn: AtomicU64::new(next_txn),
                active: Mutex::new(BTreeMap::new()),
                triggers: RwLock::new(Vec::new()),
                next_trigger: AtomicU64::new(1),
                closed: AtomicBool::new(false),
                data_dir,
                durability,
                commits: AtomicU64::new(0),
                aborts: AtomicU64::new(0),
                conflicts: AtomicU64::new(0),
            }),
        }
    }

    pub fn durability(&self) -> Durability {
        self.inner.durability
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.inner.data_dir.as_deref()
    }

    pub fn wal_path(&self) -> Option<PathBuf> {
        self.inner.commit.lock().wal.as_ref().map(|w| w.path().to_path_buf())
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::Acquire)
    }

    /// Flushes the log and rejects any further transactions.
    pub fn close(&self) -> Result<()> {
        self.inner.closed.store(true, Ordering::Release);
        if let Some(w) = self.inner.commit.lock().wal.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            commits: self.inner.commits.load(Ordering::Relaxed),
            aborts: self.inner.aborts.load(Ordering::Relaxed),
            write_conflicts: self.inner.conflicts.load(Ordering::Relaxed),
        }
    }

    pub fn last_commit_ts(&self) -> u64 {
        self.inner.last_committed.load(Ordering::Acquire)
    }

    fn check_open(&self) -> Result<()> {
        if self.is_closed() {
            Err(Error::EngineClosed)
        } else {
            Ok(())
        }
    }

    fn log_ddl(&self, cs: &mut CommitState, payload: WalPayload) -> Result<()> {
        if let Some(w) = cs.wal.as_mut() {
            let lsn = cs.next_lsn;
            cs.next_lsn += 1;
            w.append(&WalRecord { lsn, payload })?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn create_table(&self, schema: Schema) -> Result<()> {
        self.check_open()?;
        schema.validate()?;
        let mut cs = self.inner.commit.lock();
        {
            let cat = self.inner.catalog.read();
            if cat.tables.contains_key(&schema.table_name) || cat.views.contains_key(&schema.table_name) {
                return Err(Error::DuplicateTable(schema.table_name.clone()));
            }
        }
        let payload = WalPayload::CreateTable(schema.clone());
        let table = TableData::new(schema.clone())?;
        self.log_ddl(&mut cs, payload)?;
        self.inner.catalog.write().tables.insert(schema.table_name.clone(), table);
        Ok(())
    }

    pub fn create_index(&self, table: &str, columns: &[&str]) -> Result<()> {
        self.check_open()?;
        let columns: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        let mut cs = self.inner.commit.lock();
        {
            let cat = self.inner.catalog.read();
            let t = cat.tables.get(table).ok_or_else(|| Error::UnknownTable(table.to_string()))?;
            t.schema.resolve_all(&columns)?;
            if columns.is_empty() {
                return Err(Error::InvalidSchema("empty index".into()));
            }
            if t.indexes.iter().any(|i| i.columns == columns) {
                return Err(Error::DuplicateIndex(format!("{table}({})", columns.join(", "))));
            }
        }
        self.log_ddl(&mut cs, WalPayload::CreateIndex { table: table.to_string(), columns: columns.clone() })?;
        let mut cat = self.inner.catalog.write();
        apply_ddl(&mut cat, &WalPayload::CreateIndex { table: table.to_string(), columns })
    }

    pub fn create_view(&self, def: ViewDef) -> Result<()> {
        self.check_open()?;
        let mut cs = self.inner.commit.lock();
        {
            let cat = self.inner.catalog.read();
            if cat.tables.contains_key(&def.view_name) || cat.views.contains_key(&def.view_name) {
                return Err(Error::DuplicateTable(def.view_name.clone()));
            }
            let t = cat.tables.get(&def.base_table).ok_or_else(|| Error::UnknownTable(def.base_table.clone()))?;
            def.predicate.bind(&t.schema)?;
            if let Some(cols) = &def.projected_columns {
                t.schema.resolve_all(cols)?;
            }
        }
        self.log_ddl(&mut cs, WalPayload::CreateView(def.clone()))?;
        self.inner.catalog.write().views.insert(def.view_name.clone(), def);
        Ok(())
    }

    pub fn register_trigger(&self, def: TriggerDef, action: TriggerAction) -> Result<u64> {
        let bound = {
            let cat = self.inner.catalog.read();
            let t = cat.tables.get(&def.table_name).ok_or_else(|| Error::UnknownTable(def.table_name.clone()))?;
            match &def.predicate {
                Some(p) => p.bind(&t.schema)?,
                None => BoundPredicate::True,
            }
        };
        let id = self.inner.next_trigger.fetch_add(1, Ordering::Relaxed);
        self.inner.triggers.write().push(Arc::new(Trigger { id, def, bound, action }));
        Ok(id)
    }

    pub fn unregister_trigger(&self, id: u64) -> bool {
        let mut triggers = self.inner.triggers.write();
        let before = triggers.len();
        triggers.retain(|t| t.id != id);
        triggers.len() != before
    }

    pub fn table_names(&self) -> Vec<String> {
        self.inner.catalog.read().tables.keys().cloned().collect()
    }

    pub fn view_names(&self) -> Vec<String> {
        self.inner.catalog.read().views.keys().cloned().collect()
    }

    pub fn schema(&self, table: &str) -> Result<Schema> {
        let cat = self.inner.catalog.read();
        cat.tables.get(table).map(|t| t.schema.clone()).ok_or_else(|| Error::UnknownTable(table.to_string()))
    }

    pub fn view(&self, name: &str) -> Option<ViewDef> {
        self.inner.catalog.read().views.get(name).cloned()
    }

    /// Column names produced by scanning `source` (a table or view).
    pub fn source_columns(&self, source: &str) -> Result<Vec<String>> {
        let cat = self.inner.catalog.read();
        let (table, view) = resolve(&cat, source)?;
        Ok(output_columns(&table.schema, view.and_then(|v| v.projected_columns.as_deref())))
    }

    pub fn begin(&self) -> Result<Transaction> {
        self.check_open()?;
        let id = self.inner.next_txn.fetch_add(1, Ordering::Relaxed);
        let snapshot_ts = {
            let mut active = self.inner.active.lock();
            let ts = self.inner.last_committed.load(Ordering::Acquire);
            *active.entry(ts).or_insert(0) += 1;
            ts
        };
        Ok(Transaction {
            inner: self.inner.clone(),
            id,
            snapshot_ts,
            writes: BTreeMap::new(),
            status: TxnStatus::Active,
        })
    }

    /// Runs `f` in a fresh transaction and commits, retrying on write
    /// conflicts up to `max_retries` times.
    pub fn run<T>(&self, max_retries: usize, mut f: impl FnMut(&mut Transaction) -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            let mut txn = self.begin()?;
            let out = f(&mut txn).and_then(|v| txn.commit().map(|_| v));
            match out {
                Err(e) if e.is_write_conflict() && attempt < max_retries => {
                    attempt += 1;
                    backoff(attempt);
                }
                other => return other,
            }
        }
    }

    /// Writes a full snapshot of committed state into the data directory.
    pub fn checkpoint(&self) -> Result<SnapshotId> {
        self.check_open()?;
        let dir = self
            .inner
            .data_dir
            .clone()
            .ok_or_else(|| Error::InvalidArgument("checkpoint needs a data directory".into()))?;
        let mut cs = self.inner.commit.lock();
        if let Some(w) = cs.wal.as_mut() {
            w.flush()?;
        }
        let lsn = cs.next_lsn - 1;
        let img = {
            let cat = self.inner.catalog.read();
            snapshot::SnapshotImage {
                lsn,
                last_commit_ts: self.inner.last_committed.load(Ordering::Acquire),
                next_txn_id: self.inner.next_txn.load(Ordering::Relaxed),
                tables: cat
                    .tables
                    .values()
                    .map(|t| (t.schema.clone(), t.latest_rows().map(|r| (**r).clone()).collect()))
                    .collect(),
                views: cat.views.values().cloned().collect(),
            }
        };
        // Reserve the lsn so a later checkpoint with no new records still sorts after.
        cs.next_lsn += 1;
        drop(cs);
        let path = dir.join(format!("snapshot-{lsn:020}.snap"));
        snapshot::write(&path, &img)?;
        Ok(SnapshotId { lsn, path })
    }

    /// Committed contents of every table and view.
    pub fn dump(&self) -> Dump {
        let cat = self.inner.catalog.read();
        Dump {
            tables: cat
                .tables
                .iter()
                .map(|(n, t)| (n.clone(), (t.schema.clone(), t.latest_rows().map(|r| (**r).clone()).collect())))
                .collect(),
            views: cat.views.clone(),
        }
    }

    /// Drops every version no active snapshot can observe.
    pub fn vacuum(&self) {
        let _cs = self.inner.commit.lock();
        let horizon = self.horizon();
        let mut cat = self.inner.catalog.write();
        for t in cat.tables.values_mut() {
            let keys: Vec<Key> = t.rows.iter().filter(|(_, v)| v.len() > 1 || v[0].row.is_none()).map(|(k, _)| k.clone()).collect();
            for k in keys {
                t.prune(&k, horizon);
            }
        }
    }

    /// Total number of retained row versions (for tests and diagnostics).
    pub fn version_count(&self) -> usize {
        let cat = self.inner.catalog.read();
        cat.tables.values().map(|t| t.rows.values().map(Vec::len).sum::<usize>()).sum()
    }

    fn horizon(&self) -> u64 {
        let active = self.inner.active.lock();
        let last = self.inner.last_committed.load(Ordering::Acquire);
        active.keys().next().map_or(last, |&s| s.min(last))
    }
}

pub(crate) fn backoff(attempt: usize) {
    use rand::Rng;
    if attempt <= 2 {
        std::thread::yield_now();
    } else {
        let cap = 1u64 << attempt.min(8);
        let us = rand::thread_rng().gen_range(0..=cap);
        std::thread::sleep(std::time::Duration::from_micros(us));
    }
}

fn latest_snapshot(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<PathBuf> = None;
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let is_snap = p.extension().is_some_and(|e| e == "snap")
            && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("snapshot-"));
        if is_snap && best.as_ref().is_none_or(|b| p > *b) {
            best = Some(p);
        }
    }
    Ok(best)
}

fn apply_ddl(cat: &mut Catalog, payload: &WalPayload) -> Result<()> {
    match payload {
        WalPayload::CreateTable(schema) => {
            cat.tables.insert(schema.table_name.clone(), TableData::new(schema.clone())?);
        }
        WalPayload::CreateIndex { table, columns } => {
            let t = cat.tables.get_mut(table).ok_or_else(|| Error::UnknownTable(table.clone()))?;
            t.build_index(columns.clone())?;
            t.schema.indexes.push(columns.clone());
        }
        WalPayload::CreateView(v) => {
            cat.views.insert(v.view_name.clone(), v.clone());
        }
        WalPayload::Write { .. } | WalPayload::Commit { .. } => {}
    }
    Ok(())
}

fn resolve<'a>(cat: &'a Catalog, source: &str) -> Result<(&'a TableData, Option<&'a ViewDef>)> {
    if let Some(t) = cat.tables.get(source) {
        return Ok((t, None));
    }
    if let Some(v) = cat.views.get(source) {
        let t = cat.tables.get(&v.base_table).ok_or_else(|| Error::UnknownTable(v.base_table.clone()))?;
        return Ok((t, Some(v)));
    }
    Err(Error::UnknownTable(source.to_string()))
}

fn output_columns(schema: &Schema, projection: Option<&[String]>) -> Vec<String> {
    match projection {
        Some(cols) => cols.to_vec(),
        None => schema.columns.iter().map(|c| c.name.clone()).collect(),
    }
}

type TableWrites = BTreeMap<Key, Option<SharedRow>>;

struct Change {
    table: String,
    key: Key,
    op: OpKind,
    before: Option<SharedRow>,
    after: Option<SharedRow>,
}

/// A snapshot-isolated unit of work. Dropping an active transaction aborts it.
pub struct Transaction {
    inner: Arc<Inner>,
    id: u64,
    snapshot_ts: u64,
    writes: BTreeMap<String, TableWrites>,
    status: TxnStatus,
}

impl fmt::Debug for Transaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transaction")
            .field("id", &self.id)
            .field("snapshot_ts", &self.snapshot_ts)
            .field("status", &self.status)
            .finish()
    }
}

impl Transaction {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn snapshot_ts(&self) -> u64 {
        self.snapshot_ts
    }

    pub fn status(&self) -> TxnStatus {
        self.status
    }

    pub fn is_read_only(&self) -> bool {
        self.writes.values().all(BTreeMap::is_empty)
    }

    fn check_active(&self) -> Result<()> {
        if self.status != TxnStatus::Active {
            return Err(Error::TxnNotActive);
        }
        if self.inner.closed.load(Ordering::Acquire) {
            return Err(Error::EngineClosed);
        }
        Ok(())
    }

    /// Current value of `key` as seen by this transaction.
    fn lookup(&self, t: &TableData, key: &Key) -> Option<SharedRow> {
        if let Some(w) = self.writes.get(&t.schema.table_name).and_then(|ws| ws.get(key)) {
            return w.clone();
        }
        t.visible(key, self.snapshot_ts).cloned()
    }

    pub fn insert(&mut self, table: &str, row: Row) -> Result<()> {
        self.check_active()?;
        let key = {
            let cat = self.inner.catalog.read();
            let t = cat.tables.get(table).ok_or_else(|| Error::UnknownTable(table.to_string()))?;
            t.schema.check_row(&row)?;
            let key = row.project(&t.pk);
            if self.lookup(t, &key).is_some() {
                return Err(Error::DuplicateKey { table: table.to_string(), key: format_key(&key) });
            }
            key
        };
        self.writes.entry(table.to_string()).or_default().insert(key, Some(Arc::new(row)));
        Ok(())
    }

    pub fn update(&mut self, table: &str, key: &[Value], row: Row) -> Result<()> {
        self.check_active()?;
        let key = key.to_vec();
        {
            let cat = self.inner.catalog.read();
            let t = cat.tables.get(table).ok_or_else(|| Error::UnknownTable(table.to_string()))?;
            t.schema.check_key(&key)?;
            t.schema.check_row(&row)?;
            if row.project(&t.pk) != key {
                return Err(Error::InvalidArgument(format!("{table}: update may not change the primary key")));
            }
            if self.lookup(t, &key).is_none() {
                return Err(Error::NotFound(format!("{table} key {}", format_key(&key))));
            }
        }
        self.writes.entry(table.to_string()).or_default().insert(key, Some(Arc::new(row)));
        Ok(())
    }

    /// Inserts or replaces the row with the same primary key.
    pub fn upsert(&mut self, table: &str, row: Row) -> Result<()> {
        self.check_active()?;
        let key = {
            let cat = self.inner.catalog.read();
            let t = cat.tables.get(table).ok_or_else(|| Error::UnknownTable(table.to_string()))?;
            t.schema.check_row(&row)?;
            row.project(&t.pk)
        };
        self.writes.entry(table.to_string()).or_default().insert(key, Some(Arc::new(row)));
        Ok(())
    }

    pub fn delete(&mut self, table: &str, key: &[Value]) -> Result<()> {
        self.check_active()?;
        let key = key.to_vec();
        {
            let cat = self.inner.catalog.read();
            let t = cat.tables.get(table).ok_or_else(|| Error::UnknownTable(table.to_string()))?;
            t.schema.check_key(&key)?;
            if self.lookup(t, &key).is_none() {
                return Err(Error::NotFound(format!("{table} key {}", format_key(&key))));
            }
        }
        self.writes.entry(table.to_string()).or_default().insert(key, None);
        Ok(())
    }

    pub fn get(&self, table: &str, key: &[Value]) -> Result<Option<Row>> {
        self.check_active()?;
        let cat = self.inner.catalog.read();
        let t = cat.tables.get(table).ok_or_else(|| Error::UnknownTable(table.to_string()))?;
        t.schema.check_key(key)?;
        Ok(self.lookup(t, &key.to_vec()).map(|r| (*r).clone()))
    }

    /// Greatest primary key visible to this transaction.
    pub fn last_key(&self, table: &str) -> Result<Option<Key>> {
        self.check_active()?;
        let cat = self.inner.catalog.read();
        let t = cat.tables.get(table).ok_or_else(|| Error::UnknownTable(table.to_string()))?;
        let ws = self.writes.get(table);
        let from_ws = ws.and_then(|w| w.iter().rev().find(|(_, v)| v.is_some()).map(|(k, _)| k.clone()));
        let from_snapshot = t
            .rows
            .iter()
            .rev()
            .find(|(k, vs)| match ws.and_then(|w| w.get(*k)) {
                Some(w) => w.is_some(),
                None => table::visible_in(vs, self.snapshot_ts).is_some(),
            })
            .map(|(k, _)| k.clone());
        Ok(from_ws.max(from_snapshot))
    }

    /// Rows of `t` visible to this transaction that satisfy `pred`, in primary
    /// key order, stopping after `limit` matches.
    fn collect(&self, t: &TableData, pred: &BoundPredicate, limit: Option<usize>) -> Vec<SharedRow> {
        let limit = limit.unwrap_or(usize::MAX);
        let mut out = Vec::new();
        if limit == 0 {
            return out;
        }
        let empty = BTreeMap::new();
        let ws = self.writes.get(&t.schema.table_name).unwrap_or(&empty);
        let eqs = pred.equalities();
        let eq_for = |col: usize| eqs.iter().find(|(c, _)| *c == col).map(|(_, v)| (*v).clone());

        // Point lookup on a fully constrained primary key.
        let pk_vals: Vec<Option<Value>> = t.pk.iter().map(|&c| eq_for(c)).collect();
        if pk_vals.iter().all(Option::is_some) {
            let key: Key = pk_vals.into_iter().map(Option::unwrap).collect();
            if let Some(row) = self.lookup(t, &key) {
                if pred.eval(&row) {
                    out.push(row);
                }
            }
            return out;
        }

        let push = |row: Option<SharedRow>, out: &mut Vec<SharedRow>| {
            if let Some(row) = row {
                if pred.eval(&row) {
                    out.push(row);
                }
            }
            out.len() >= limit
        };

        // Secondary index with every column constrained by equality; entries
        // for one index key come out in primary-key order.
        let index = t.indexes.iter().find_map(|idx| {
            let vals: Option<Key> = idx.cols.iter().map(|&c| eq_for(c)).collect();
            vals.map(|v| (idx, v))
        });
        let snapshot_keys: Box<dyn Iterator<Item = &Key> + '_> = if let Some((idx, ik)) = index {
            Box::new(
                idx.entries
                    .range((ik.clone(), Vec::new())..)
                    .take_while(move |(k, _)| *k == ik)
                    .map(|(_, pk)| pk),
            )
        } else {
            // Range over the longest constrained primary-key prefix.
            let prefix: Key = t.pk.iter().map_while(|&c| eq_for(c)).collect();
            let ranges = t.pk.first().map(|&c| pred.ranges(c)).unwrap_or_default();
            if prefix.is_empty() && !ranges.is_empty() {
                // Range over the leading key column.
                let lower = ranges.iter().filter(|(op, _)| matches!(op, CmpOp::Gt | CmpOp::Ge)).map(|(_, v)| *v).max();
                let uppers: Vec<(CmpOp, Value)> = ranges
                    .iter()
                    .filter(|(op, _)| matches!(op, CmpOp::Lt | CmpOp::Le))
                    .map(|(op, v)| (*op, (*v).clone()))
                    .collect();
                let start: Key = lower.map(|v| vec![v.clone()]).unwrap_or_default();
                Box::new(t.rows.range(start..).map(|(k, _)| k).take_while(move |k| {
                    uppers.iter().all(|(op, v)| match op {
                        CmpOp::Lt => k[0] < *v,
                        _ => k[0] <= *v,
                    })
                }))
            } else if prefix.is_empty() {
                Box::new(t.rows.keys())
            } else {
                let p = prefix.clone();
                Box::new(t.rows.range(prefix..).map(|(k, _)| k).take_while(move |k| k.starts_with(&p)))
            }
        };

        // Merge snapshot keys with this transaction's own writes.
        let mut snap = snapshot_keys.peekable();
        let mut own = ws.iter().peekable();
        loop {
            let next_snap = snap.peek().copied();
            let next_own = own.peek().map(|(k, _)| *k);
            let done = match (next_snap, next_own) {
                (None, None) => break,
                (Some(s), Some(o)) if o <= s => {
                    let (_, w) = own.next().unwrap();
                    if s == o {
                        snap.next();
                    }
                    push(w.clone(), &mut out)
                }
                (Some(s), _) => {
                    snap.next();
                    push(t.visible(s, self.snapshot_ts).cloned(), &mut out)
                }
                (None, Some(_)) => {
                    let (_, w) = own.next().unwrap();
                    push(w.clone(), &mut out)
                }
            };
            if done {
                break;
            }
        }
        out
    }

    /// Rows of a table or view, filtered, ordered, limited and projected.
    pub fn scan(&self, source: &str, opts: &ScanOptions) -> Result<RowSet> {
        self.check_active()?;
        let cat = self.inner.catalog.read();
        let (t, view) = resolve(&cat, source)?;
        self.scan_inner(t, view, opts)
    }

    /// Like `scan`, through an unregistered view definition.
    pub fn scan_view(&self, view: &ViewDef, opts: &ScanOptions) -> Result<RowSet> {
        self.check_active()?;
        let cat = self.inner.catalog.read();
        let t = cat.tables.get(&view.base_table).ok_or_else(|| Error::UnknownTable(view.base_table.clone()))?;
        self.scan_inner(t, Some(view), opts)
    }

    fn scan_inner(&self, t: &TableData, view: Option<&ViewDef>, opts: &ScanOptions) -> Result<RowSet> {
        let schema = &t.schema;
        let visible = output_columns(schema, view.and_then(|v| v.projected_columns.as_deref()));
        let mut pred = match view {
            Some(v) => v.predicate.bind(schema)?,
            None => BoundPredicate::True,
        };
        if let Some(p) = &opts.predicate {
            check_visible(&visible, p.columns())?;
            pred = pred.and(p.bind(schema)?);
        }
        let order: Vec<(usize, bool)> = opts
            .order_by
            .iter()
            .map(|(c, d)| {
                check_visible(&visible, [c.as_str()])?;
                Ok((schema.resolve(c)?, *d))
            })
            .collect::<Result<_>>()?;
        let columns = match &opts.projection {
            Some(cols) => {
                check_visible(&visible, cols.iter().map(String::as_str))?;
                cols.clone()
            }
            None => visible,
        };
        let proj = schema.resolve_all(&columns)?;
        let early_limit = if order.is_empty() { opts.limit } else { None };
        let mut rows = self.collect(t, &pred, early_limit);
        if !order.is_empty() {
            rows.sort_by(|a, b| {
                for &(c, desc) in &order {
                    let o = a.get(c).cmp(b.get(c));
                    let o = if desc { o.reverse() } else { o };
                    if o != std::cmp::Ordering::Equal {
                        return o;
                    }
                }
                std::cmp::Ordering::Equal
            });
            if let Some(n) = opts.limit {
                rows.truncate(n);
            }
        }
        let rows = rows.iter().map(|r| Row::new(r.project(&proj))).collect();
        Ok(RowSet { columns, rows })
    }

    /// Grouped aggregation. Output columns are the group columns followed by
    /// one column per aggregate; groups come out sorted by group key.
    pub fn aggregate(
        &self,
        source: &str,
        group_by: &[&str],
        aggs: &[AggSpec],
        predicate: Option<&Predicate>,
    ) -> Result<RowSet> {
        self.check_active()?;
        let cat = self.inner.catalog.read();
        let (t, view) = resolve(&cat, source)?;
        self.aggregate_inner(t, view, group_by, aggs, predicate)
    }

    pub fn aggregate_view(
        &self,
        view: &ViewDef,
        group_by: &[&str],
        aggs: &[AggSpec],
        predicate: Option<&Predicate>,
    ) -> Result<RowSet> {
        self.check_active()?;
        let cat = self.inner.catalog.read();
        let t = cat.tables.get(&view.base_table).ok_or_else(|| Error::UnknownTable(view.base_table.clone()))?;
        self.aggregate_inner(t, Some(view), group_by, aggs, predicate)
    }

    fn aggregate_inner(
        &self,
        t: &TableData,
        view: Option<&ViewDef>,
        group_by: &[&str],
        aggs: &[AggSpec],
        predicate: Option<&Predicate>,
    ) -> Result<RowSet> {
        let schema = &t.schema;
        let visible = output_columns(schema, view.and_then(|v| v.projected_columns.as_deref()));
        let mut pred = match view {
            Some(v) => v.predicate.bind(schema)?,
            None => BoundPredicate::True,
        };
        if let Some(p) = predicate {
            check_visible(&visible, p.columns())?;
            pred = pred.and(p.bind(schema)?);
        }
        check_visible(&visible, group_by.iter().copied())?;
        check_visible(&visible, aggs.iter().filter_map(|a| a.column.as_deref()))?;
        let group_by: Vec<String> = group_by.iter().map(|s| s.to_string()).collect();
        let rows = self.collect(t, &pred, None);
        let out = aggregate::aggregate_rows(schema, rows.iter().map(|r| &**r), &group_by, aggs)?;
        let mut columns = group_by;
        columns.extend(aggs.iter().map(AggSpec::output_name));
        Ok(RowSet { columns, rows: out })
    }

    pub fn abort(&mut self) -> Result<()> {
        if self.status != TxnStatus::Active {
            return Err(Error::TxnNotActive);
        }
        self.finish(TxnStatus::Aborted);
        self.inner.aborts.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn finish(&mut self, status: TxnStatus) {
        self.status = status;
        self.writes.clear();
        let mut active = self.inner.active.lock();
        if let Some(n) = active.get_mut(&self.snapshot_ts) {
            *n -= 1;
            if *n == 0 {
                active.remove(&self.snapshot_ts);
            }
        }
    }

    /// Validates, logs and installs this transaction's writes. Returns the
    /// commit timestamp (the snapshot timestamp for read-only transactions).
    pub fn commit(&mut self) -> Result<u64> {
        if self.status != TxnStatus::Active {
            return Err(Error::TxnNotActive);
        }
        if self.inner.closed.load(Ordering::Acquire) {
            self.finish(TxnStatus::Aborted);
            return Err(Error::EngineClosed);
        }
        if self.is_read_only() {
            self.finish(TxnStatus::Committed);
            return Ok(self.snapshot_ts);
        }
        let inner = self.inner.clone();
        let mut cs = inner.commit.lock();

        let mut changes = Vec::new();
        let mut conflict = None;
        {
            let cat = inner.catalog.read();
            'validate: for (table, ws) in &self.writes {
                let t = cat.tables.get(table).ok_or_else(|| Error::UnknownTable(table.clone()))?;
                for (key, after) in ws {
                    let (ts, before) = t.latest(key).map_or((0, None), |(ts, r)| (ts, r.cloned()));
                    if ts > self.snapshot_ts {
                        conflict = Some(Error::WriteConflict { table: table.clone(), key: format_key(key) });
                        break 'validate;
                    }
                    let op = match (&before, after) {
                        (None, None) => continue,
                        (None, Some(_)) => OpKind::Insert,
                        (Some(_), Some(_)) => OpKind::Update,
                        (Some(_), None) => OpKind::Delete,
                    };
                    changes.push(Change { table: table.clone(), key: key.clone(), op, before, after: after.clone() });
                }
            }
        }
        if let Some(err) = conflict {
            drop(cs);
            inner.conflicts.fetch_add(1, Ordering::Relaxed);
            inner.aborts.fetch_add(1, Ordering::Relaxed);
            self.finish(TxnStatus::Aborted);
            return Err(err);
        }

        let commit_ts = inner.last_committed.load(Ordering::Acquire) + 1;
        let lsn = cs.next_lsn;
        if !changes.is_empty() {
            if let Some(w) = cs.wal.as_mut() {
                let entries = changes
                    .iter()
                    .map(|c| WalEntry {
                        table: c.table.clone(),
                        op: c.op,
                        key: c.key.clone(),
                        before: c.before.as_deref().cloned(),
                        after: c.after.as_deref().cloned(),
                    })
                    .collect();
                let res = w
                    .append(&WalRecord { lsn, payload: WalPayload::Write { txn_id: self.id, entries } })
                    .and_then(|_| {
                        w.append(&WalRecord {
                            lsn: lsn + 1,
                            payload: WalPayload::Commit { txn_id: self.id, commit_ts },
                        })
                    })
                    .and_then(|_| w.flush());
                if let Err(e) = res {
                    drop(cs);
                    self.finish(TxnStatus::Aborted);
                    return Err(e);
                }
                cs.next_lsn += 2;
            }
        }

        {
            let mut cat = inner.catalog.write();
            for c in &changes {
                let t = cat.tables.get_mut(&c.table).expect("validated above");
                t.apply(c.key.clone(), c.after.clone(), commit_ts);
            }
            inner.last_committed.store(commit_ts, Ordering::Release);
            self.finish(TxnStatus::Committed);

            let horizon = {
                let active = inner.active.lock();
                active.keys().next().map_or(commit_ts, |&s| s.min(commit_ts))
            };
            let cs = &mut *cs;
            for c in &changes {
                let t = cat.tables.get_mut(&c.table).expect("validated above");
                if t.prune(&c.key, horizon) {
                    cs.gc_queue.push((c.table.clone(), c.key.clone()));
                }
            }
            cs.commits_since_gc += 1;
            if cs.commits_since_gc >= GC_INTERVAL && !cs.gc_queue.is_empty() {
                cs.commits_since_gc = 0;
                let queue = std::mem::take(&mut cs.gc_queue);
                for (table, key) in queue {
                    if let Some(t) = cat.tables.get_mut(&table) {
                        if t.prune(&key, horizon) {
                            cs.gc_queue.push((table, key));
                        }
                    }
                }
            }
        }
        drop(cs);
        inner.commits.fetch_add(1, Ordering::Relaxed);

        if !changes.is_empty() {
            fire_triggers(&inner, &changes, commit_ts);
        }
        Ok(commit_ts)
    }
}

fn check_visible<'a>(visible: &[String], cols: impl IntoIterator<Item = &'a str>) -> Result<()> {
    for c in cols {
        if !visible.iter().any(|v| v == c) {
            return Err(Error::UnknownColumn(c.to_string()));
        }
    }
    Ok(())
}

fn fire_triggers(inner: &Inner, changes: &[Change], commit_ts: u64) {
    let triggers: Vec<Arc<Trigger>> = inner.triggers.read().clone();
    if triggers.is_empty() {
        return;
    }
    for c in changes {
        let kind = match c.op {
            OpKind::Insert => TriggerEventKind::Insert,
            OpKind::Update => TriggerEventKind::Update,
            OpKind::Delete => TriggerEventKind::Delete,
        };
        for trig in triggers.iter().filter(|t| t.def.table_name == c.table && t.def.event == kind) {
            let subject = c.after.as_deref().or(c.before.as_deref());
            if subject.is_some_and(|r| trig.bound.eval(r)) {
                (trig.action)(&TriggerEvent {
                    trigger_id: trig.id,
                    table: &c.table,
                    kind,
                    key: &c.key,
                    before: c.before.as_deref(),
                    after: c.after.as_deref(),
                    commit_ts,
                });
            }
        }
    }
}

impl Drop for Transaction {
    fn drop(&mut self) {
        if self.status == TxnStatus::Active {
            self.finish(TxnStatus::Aborted);
            self.inner.aborts.fetch_add(1, Ordering::Relaxed);
        }
    }
}
