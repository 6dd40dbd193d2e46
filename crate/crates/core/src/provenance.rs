//! Provenance ledger, lineage closure, purpose checks and subject erasure.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::engine::{ScanOptions, Transaction};
use crate::error::{Error, Result};
use crate::os::schema::{self, PII_TAGS, PROVENANCE, PURPOSE_GRANTS};
use crate::predicate::Predicate;
use crate::syscall::{Kernel, SyscallContext};
use crate::value::{Row, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectKind {
    File,
    Channel,
    Table,
    Function,
    Message,
    Task,
    Container,
    Knob,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 8] = [
        ObjectKind::File,
        ObjectKind::Channel,
        ObjectKind::Table,
        ObjectKind::Function,
        ObjectKind::Message,
        ObjectKind::Task,
        ObjectKind::Container,
        ObjectKind::Knob,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::File => "file",
            ObjectKind::Channel => "channel",
            ObjectKind::Table => "table",
            ObjectKind::Function => "function",
            ObjectKind::Message => "message",
            ObjectKind::Task => "task",
            ObjectKind::Container => "container",
            ObjectKind::Knob => "knob",
        }
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ObjectKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown object kind {s:?}")))
    }
}

/// A (kind, id) reference to any OS object. Displays and parses as `kind:id`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectRef {
    pub kind: ObjectKind,
    pub id: u64,
}

impl ObjectRef {
    pub fn new(kind: ObjectKind, id: u64) -> Self {
        ObjectRef { kind, id }
    }

    pub fn file(id: u64) -> Self {
        Self::new(ObjectKind::File, id)
    }

    pub fn message(id: u64) -> Self {
        Self::new(ObjectKind::Message, id)
    }

    pub fn task(id: u64) -> Self {
        Self::new(ObjectKind::Task, id)
    }

    pub fn channel(id: u64) -> Self {
        Self::new(ObjectKind::Channel, id)
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.id)
    }
}

impl FromStr for ObjectRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (k, id) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("expected kind:id, got {s:?}")))?;
        let id = id.parse().map_err(|_| Error::InvalidArgument(format!("bad object id in {s:?}")))?;
        Ok(ObjectRef::new(k.parse()?, id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProvOp {
    Create,
    Read,
    Copy,
    Mutate,
    Transmit,
    Delete,
}

impl ProvOp {
    pub fn as_str(self) -> &'static str {
        match self {
            ProvOp::Create => "create",
            ProvOp::Read => "read",
            ProvOp::Copy => "copy",
            ProvOp::Mutate => "mutate",
            ProvOp::Transmit => "transmit",
            ProvOp::Delete => "delete",
        }
    }
}

impl FromStr for ProvOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [ProvOp::Create, ProvOp::Read, ProvOp::Copy, ProvOp::Mutate, ProvOp::Transmit, ProvOp::Delete]
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::MalformedRecord(format!("unknown op {s:?}")))
    }
}

impl fmt::Display for ProvOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One ledger entry. The transaction id is filled in by [`Ledger::record`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProvenanceRecord {
    pub ts: i64,
    pub actor: String,
    pub task_id: Option<u64>,
    pub op: ProvOp,
    pub src: Option<ObjectRef>,
    pub dst: Option<ObjectRef>,
    pub purpose: String,
}

impl ProvenanceRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::MalformedRecord(format!("{} record {m}", self.op)));
        if self.actor.is_empty() || self.purpose.is_empty() {
            return bad("needs an actor and a purpose");
        }
        match (self.op, self.src, self.dst) {
            (ProvOp::Copy | ProvOp::Transmit, Some(_), Some(_)) => Ok(()),
            (ProvOp::Copy | ProvOp::Transmit, _, _) => bad("needs both source and destination"),
            (ProvOp::Create, None, Some(_)) => Ok(()),
            (ProvOp::Create, _, _) => bad("needs a destination only"),
            (ProvOp::Mutate, _, None) => bad("needs a destination"),
            (ProvOp::Read | ProvOp::Delete, None, _) => bad("needs a source"),
            _ => Ok(()),
        }
    }

    fn from_row(row: &Row) -> Result<(u64, ProvenanceRecord)> {
        let obj = |k: usize| -> Result<Option<ObjectRef>> {
            match (row.get(k).as_str(), row.get(k + 1).as_u64()) {
                (Some(kind), Some(id)) => Ok(Some(ObjectRef::new(kind.parse()?, id))),
                _ => Ok(None),
            }
        };
        let rec = ProvenanceRecord {
            ts: row.get(1).as_i64().unwrap_or(0),
            actor: row.get(2).as_str().unwrap_or_default().to_string(),
            task_id: row.get(3).as_u64(),
            op: row.get(4).as_str().unwrap_or_default().parse()?,
            src: obj(5)?,
            dst: obj(7)?,
            purpose: row.get(9).as_str().unwrap_or_default().to_string(),
        };
        Ok((row.get(0).as_u64().unwrap_or(0), rec))
    }
}

/// Allocates ledger ids and appends records inside caller transactions.
#[derive(Debug)]
pub struct Ledger {
    next: AtomicU64,
}

impl Ledger {
    pub(crate) fn new(first_id: u64) -> Self {
        Ledger { next: AtomicU64::new(first_id) }
    }

    /// Appends `rec` to the ledger inside `txn`, so it commits or vanishes
    /// together with the operation it describes.
    pub fn record(&self, txn: &mut Transaction, rec: &ProvenanceRecord) -> Result<u64> {
        rec.validate()?;
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let split = |o: Option<ObjectRef>| match o {
            Some(o) => (Value::from(o.kind.as_str()), Value::from(o.id)),
            None => (Value::Null, Value::Null),
        };
        let (sk, si) = split(rec.src);
        let (dk, di) = split(rec.dst);
        txn.insert(
            PROVENANCE,
            Row::new(vec![
                id.into(),
                Value::Timestamp(rec.ts),
                rec.actor.as_str().into(),
                rec.task_id.into(),
                rec.op.as_str().into(),
                sk,
                si,
                dk,
                di,
                rec.purpose.as_str().into(),
                txn.id().into(),
            ]),
        )?;
        Ok(id)
    }
}

/// Edges along which data flows for lineage purposes.
pub const LINEAGE_OPS: &[ProvOp] = &[ProvOp::Copy, ProvOp::Mutate, ProvOp::Transmit];
/// Edges along which erasure propagates.
pub const ERASURE_OPS: &[ProvOp] = &[ProvOp::Copy, ProvOp::Transmit];

fn records_touching(txn: &Transaction, side: &str, obj: ObjectRef) -> Result<Vec<(u64, ProvenanceRecord)>> {
    let pred = Predicate::eq(&format!("{side}_kind"), obj.kind.as_str()).and(Predicate::eq(&format!("{side}_id"), obj.id));
    txn.scan(PROVENANCE, &ScanOptions::new().filter(pred))?
        .rows
        .iter()
        .map(ProvenanceRecord::from_row)
        .collect()
}

/// Objects reachable from `start` over edges whose op is in `ops`, following
/// edges forwards (towards derived data) or backwards (towards sources).
pub fn closure(txn: &Transaction, start: ObjectRef, ops: &[ProvOp], forward: bool) -> Result<Vec<ObjectRef>> {
    let near = if forward { "src" } else { "dst" };
    let far = |r: &ProvenanceRecord| if forward { r.dst } else { r.src };
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::from([start]);
    while let Some(obj) = queue.pop_front() {
        for (_, rec) in records_touching(txn, near, obj)? {
            if !ops.contains(&rec.op) {
                continue;
            }
            if let Some(next) = far(&rec) {
                if seen.insert(next) {
                    order.push(next);
                    queue.push_back(next);
                }
            }
        }
    }
    Ok(order)
}

pub fn lineage_descendants(txn: &Transaction, obj: ObjectRef) -> Result<BTreeSet<ObjectRef>> {
    Ok(closure(txn, obj, LINEAGE_OPS, true)?.into_iter().collect())
}

pub fn lineage_ancestors(txn: &Transaction, obj: ObjectRef) -> Result<BTreeSet<ObjectRef>> {
    Ok(closure(txn, obj, LINEAGE_OPS, false)?.into_iter().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PurposeDecision {
    Allow,
    Deny,
}

/// Data subjects an object is tagged with.
pub fn subjects_of(txn: &Transaction, obj: ObjectRef) -> Result<Vec<String>> {
    let pred = Predicate::eq("object_kind", obj.kind.as_str()).and(Predicate::eq("object_id", obj.id));
    Ok(txn
        .scan(PII_TAGS, &ScanOptions::new().filter(pred))?
        .rows
        .iter()
        .filter_map(|r| r.get(2).as_str().map(str::to_string))
        .collect())
}

/// Deny iff some data subject of `obj` has not allowed `purpose`.
pub fn check_purpose(txn: &Transaction, purpose: &str, obj: ObjectRef) -> Result<PurposeDecision> {
    for subject in subjects_of(txn, obj)? {
        let allowed = txn
            .get(PURPOSE_GRANTS, &[subject.into(), purpose.into()])?
            .and_then(|r| r.get(2).as_bool())
            .unwrap_or(false);
        if !allowed {
            return Ok(PurposeDecision::Deny);
        }
    }
    Ok(PurposeDecision::Allow)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErasureReason {
    Tagged,
    Derived,
}

impl ErasureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ErasureReason::Tagged => "tagged",
            ErasureReason::Derived => "derived",
        }
    }
}

/// Outcome of [`Kernel::erase_subject`].
///
/// Serialized as tab-separated lines `kind<TAB>id<TAB>reason`, one per erased
/// object, followed by a `# advisory` line and one
/// `kind<TAB>id<TAB>read<TAB>actor` line per recorded read of an erased
/// object. Reads are reported, never erased.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ErasureReport {
    pub erased: Vec<(ObjectRef, ErasureReason)>,
    pub advisory_reads: Vec<(ObjectRef, String)>,
}

impl ErasureReport {
    pub fn is_empty(&self) -> bool {
        self.erased.is_empty()
    }
}

impl fmt::Display for ErasureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (o, why) in &self.erased {
            writeln!(f, "{}\t{}\t{}", o.kind, o.id, why.as_str())?;
        }
        writeln!(f, "# advisory")?;
        for (o, actor) in &self.advisory_reads {
            writeln!(f, "{}\t{}\tread\t{actor}", o.kind, o.id)?;
        }
        Ok(())
    }
}

const TAGGABLE: &[ObjectKind] = &[ObjectKind::File, ObjectKind::Message, ObjectKind::Task];

impl Kernel {
    /// Marks `obj` as holding PII of `subject`.
    pub fn tag_pii(&self, ctx: &SyscallContext, obj: ObjectRef, subject: &str) -> Result<()> {
        if !TAGGABLE.contains(&obj.kind) {
            return Err(Error::InvalidArgument(format!("{} objects cannot carry PII tags", obj.kind)));
        }
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            if !self.object_exists(txn, ctx, obj)? {
                return Err(Error::UnknownObject(obj.to_string()));
            }
            txn.upsert(PII_TAGS, Row::new(vec![obj.kind.as_str().into(), obj.id.into(), subject.into()]))?;
            self.record(txn, ctx, crate::provenance::ProvOp::Mutate, None, Some(obj))?;
            Ok(())
        })
    }

    /// Records whether `subject` allows processing of their data for
    /// `purpose`. Only the subject themself or root may decide.
    pub fn set_purpose_grant(&self, ctx: &SyscallContext, subject: &str, purpose: &str, allowed: bool) -> Result<()> {
        if !ctx.is_root() && ctx.principal != subject {
            return Err(Error::PermissionDenied(format!("{} cannot decide for {subject}", ctx.principal)));
        }
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            txn.upsert(PURPOSE_GRANTS, Row::new(vec![subject.into(), purpose.into(), allowed.into()]))?;
            Ok(())
        })
    }

    pub fn check_purpose(&self, ctx: &SyscallContext, obj: ObjectRef) -> Result<PurposeDecision> {
        let txn = self.engine().begin()?;
        check_purpose(&txn, &ctx.purpose, obj)
    }

    pub fn lineage_descendants(&self, obj: ObjectRef) -> Result<BTreeSet<ObjectRef>> {
        lineage_descendants(&self.engine().begin()?, obj)
    }

    pub fn lineage_ancestors(&self, obj: ObjectRef) -> Result<BTreeSet<ObjectRef>> {
        lineage_ancestors(&self.engine().begin()?, obj)
    }

    /// All ledger records in id order.
    pub fn provenance_records(&self) -> Result<Vec<(u64, ProvenanceRecord)>> {
        let txn = self.engine().begin()?;
        txn.scan(PROVENANCE, &ScanOptions::new())?.rows.iter().map(ProvenanceRecord::from_row).collect()
    }

    pub(crate) fn object_exists(&self, txn: &Transaction, ctx: &SyscallContext, obj: ObjectRef) -> Result<bool> {
        let table = match obj.kind {
            ObjectKind::File => schema::INODES,
            ObjectKind::Message => schema::MESSAGES,
            ObjectKind::Task => schema::TASKS,
            ObjectKind::Channel => schema::CHANNELS,
            ObjectKind::Container => schema::CONTAINERS,
            ObjectKind::Function => return Ok(txn.get(schema::FUNCTIONS, &[obj.id.into()])?.is_some()),
            ObjectKind::Table => return Ok((obj.id as usize) < schema::os_table_names().len()),
            ObjectKind::Knob => return Ok((obj.id as usize) < schema::KNOB_DEFAULTS.len()),
        };
        let row = self.get_scoped(txn, ctx, table, &[obj.id.into()])?;
        Ok(match (obj.kind, row) {
            (ObjectKind::File, Some(r)) => r.get(schema::col::inodes::KIND).as_str() == Some("file"),
            (_, r) => r.is_some(),
        })
    }

    /// Deletes every object tagged with `subject` and everything derived
    /// from those objects by copies and transmissions. Each object goes in
    /// its own transaction, derived objects before tagged ones, so an
    /// interrupted erasure can simply be run again. Root only.
    pub fn erase_subject(&self, ctx: &SyscallContext, subject: &str) -> Result<ErasureReport> {
        if !ctx.is_root() {
            return Err(Error::PermissionDenied("only root may erase data subjects".into()));
        }
        let (tagged, derived, reads) = {
            let txn = self.engine().begin()?;
            self.container_root(&txn, ctx)?;
            let opts = ScanOptions::new().filter(Predicate::eq("data_subject", subject));
            let mut tagged = Vec::new();
            for r in txn.scan(PII_TAGS, &opts)?.rows {
                let obj = ObjectRef::new(r.get(0).as_str().unwrap_or_default().parse()?, r.get(1).as_u64().unwrap_or(0));
                if !tagged.contains(&obj) {
                    tagged.push(obj);
                }
            }
            let mut derived = Vec::new();
            for t in &tagged {
                for d in closure(&txn, *t, ERASURE_OPS, true)? {
                    if !tagged.contains(&d) && !derived.contains(&d) {
                        derived.push(d);
                    }
                }
            }
            let mut reads = Vec::new();
            for o in tagged.iter().chain(&derived) {
                for (_, rec) in records_touching(&txn, "src", *o)? {
                    if rec.op == ProvOp::Read {
                        reads.push((*o, rec.actor));
                    }
                }
            }
            (tagged, derived, reads)
        };

        let mut report = ErasureReport::default();
        let work = derived
            .iter()
            .map(|o| (*o, ErasureReason::Derived))
            .chain(tagged.iter().map(|o| (*o, ErasureReason::Tagged)));
        for (obj, reason) in work {
            let erased = self.syscall(|txn| {
                let existed = self.remove_object(txn, obj)?;
                if existed {
                    self.record(txn, ctx, ProvOp::Delete, Some(obj), None)?;
                }
                Ok(existed)
            })?;
            if erased {
                report.erased.push((obj, reason));
            }
        }
        let erased: HashSet<ObjectRef> = report.erased.iter().map(|(o, _)| *o).collect();
        report.advisory_reads = reads.into_iter().filter(|(o, _)| erased.contains(o)).collect();
        Ok(report)
    }

    /// Deletes an object and everything hanging off it (chunks, directory
    /// entry, permission rules, PII tags). Returns whether it existed.
    pub(crate) fn remove_object(&self, txn: &mut Transaction, obj: ObjectRef) -> Result<bool> {
        let existed = match obj.kind {
            ObjectKind::File => self.remove_inode(txn, obj.id)?,
            ObjectKind::Message | ObjectKind::Task => {
                let table = if obj.kind == ObjectKind::Message { schema::MESSAGES } else { schema::TASKS };
                let key = [obj.id.into()];
                let found = txn.get(table, &key)?.is_some();
                if found {
                    txn.delete(table, &key)?;
                }
                found
            }
            _ => false,
        };
        let pred = Predicate::eq("object_kind", obj.kind.as_str()).and(Predicate::eq("object_id", obj.id));
        for r in txn.scan(PII_TAGS, &ScanOptions::new().filter(pred))?.rows {
            txn.delete(PII_TAGS, &r.values()[..3])?;
        }
        Ok(existed)
    }
}
