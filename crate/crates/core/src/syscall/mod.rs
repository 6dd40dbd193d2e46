//! The OS API. Every syscall is one transaction over the OS tables (retried
//! on write conflicts) and appends its provenance in that same transaction.

mod fs;
mod ipc;
mod task;

use std::collections::HashMap;
use std::fmt;
use std::ops::{BitAnd, BitOr, Not};
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex, RwLock};

use crate::engine::{Engine, Transaction, TriggerDef, TriggerEventKind, ViewDef};
use crate::error::{Error, Result};
use crate::os::clock::{Clock, SystemClock};
use crate::os::schema::{self, col, CONTAINERS, FUNCTIONS, KNOBS, PERMISSIONS, ROOT_CONTAINER, ROOT_PRINCIPAL};
use crate::provenance::{Ledger, ObjectKind, ObjectRef, ProvOp, ProvenanceRecord};
use crate::value::{Row, Value};

pub use fs::{DirEntryInfo, InodeInfo};
pub use task::TaskStatus;

/// Who is calling, from which container, and for what declared purpose.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyscallContext {
    pub principal: String,
    pub container_id: u64,
    pub purpose: String,
    pub task_id: Option<u64>,
}

impl SyscallContext {
    pub fn new(principal: &str, container_id: u64, purpose: &str) -> Self {
        SyscallContext { principal: principal.into(), container_id, purpose: purpose.into(), task_id: None }
    }

    /// The root principal in the root container.
    pub fn root() -> Self {
        Self::new(ROOT_PRINCIPAL, ROOT_CONTAINER, "admin")
    }

    pub fn with_task(mut self, task_id: u64) -> Self {
        self.task_id = Some(task_id);
        self
    }

    pub fn with_purpose(mut self, purpose: &str) -> Self {
        self.purpose = purpose.into();
        self
    }

    pub fn is_root(&self) -> bool {
        self.principal == ROOT_PRINCIPAL
    }
}

/// Permission bits stored in `permissions.rights`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Rights(pub u8);

impl Rights {
    pub const NONE: Rights = Rights(0);
    pub const READ: Rights = Rights(1);
    pub const WRITE: Rights = Rights(2);
    /// Execute for functions, consume for channels.
    pub const EXEC: Rights = Rights(4);
    pub const CONSUME: Rights = Rights(4);
    pub const ALL: Rights = Rights(7);

    pub fn contains(self, other: Rights) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl BitOr for Rights {
    type Output = Rights;
    fn bitor(self, rhs: Rights) -> Rights {
        Rights(self.0 | rhs.0)
    }
}

impl BitAnd for Rights {
    type Output = Rights;
    fn bitand(self, rhs: Rights) -> Rights {
        Rights(self.0 & rhs.0)
    }
}

impl Not for Rights {
    type Output = Rights;
    fn not(self) -> Rights {
        Rights(!self.0 & Rights::ALL.0)
    }
}

impl fmt::Display for Rights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = if self.contains(Rights::READ) { 'r' } else { '-' };
        let w = if self.contains(Rights::WRITE) { 'w' } else { '-' };
        let x = if self.contains(Rights::EXEC) { 'x' } else { '-' };
        write!(f, "{r}{w}{x}")
    }
}

#[derive(Default)]
struct Ids {
    task: AtomicU64,
    inode: AtomicU64,
    msg: AtomicU64,
    channel: AtomicU64,
    function: AtomicU64,
    container: AtomicU64,
    flow: AtomicU64,
}

#[derive(Default)]
pub(crate) struct Notifier {
    seq: Mutex<u64>,
    cv: Condvar,
}

impl Notifier {
    fn bump(&self) {
        *self.seq.lock() += 1;
        self.cv.notify_all();
    }
}

struct KernelInner {
    engine: Engine,
    clock: Arc<dyn Clock>,
    ids: Ids,
    ledger: Ledger,
    knobs: Arc<RwLock<HashMap<String, f64>>>,
    messages: Arc<Notifier>,
    spawn_lock: Mutex<i64>,
    /// Per-channel send locks, keyed by channel id.
    send_locks: Mutex<HashMap<u64, Arc<Mutex<()>>>>,
    metric_ts: AtomicI64,
    triggers: Vec<u64>,
}

impl Drop for KernelInner {
    fn drop(&mut self) {
        for id in &self.triggers {
            self.engine.unregister_trigger(*id);
        }
    }
}

/// Handle to a running OS instance; cheap to clone and share across threads.
#[derive(Clone)]
pub struct Kernel {
    inner: Arc<KernelInner>,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel").field("engine", &self.inner.engine).finish()
    }
}

fn next_after(txn: &Transaction, table: &str) -> Result<u64> {
    Ok(txn.last_key(table)?.and_then(|k| k[0].as_u64()).map_or(1, |v| v + 1))
}

impl Kernel {
    /// Attaches to an engine, bootstrapping the OS tables if it has none.
    pub fn boot(engine: Engine, clock: Arc<dyn Clock>) -> Result<Kernel> {
        let census = schema::os_table_names();
        let present = engine.table_names();
        if !census.iter().all(|t| present.contains(t)) {
            schema::bootstrap(&engine, clock.now_us())?;
        }

        let txn = engine.begin()?;
        let ids = Ids::default();
        ids.task.store(next_after(&txn, schema::TASKS)?, Ordering::Relaxed);
        ids.inode.store(next_after(&txn, schema::INODES)?, Ordering::Relaxed);
        ids.msg.store(next_after(&txn, schema::MESSAGES)?, Ordering::Relaxed);
        ids.channel.store(next_after(&txn, schema::CHANNELS)?, Ordering::Relaxed);
        ids.function.store(next_after(&txn, schema::FUNCTIONS)?, Ordering::Relaxed);
        ids.container.store(next_after(&txn, CONTAINERS)?, Ordering::Relaxed);
        ids.flow.store(next_after(&txn, schema::FLOWS)?, Ordering::Relaxed);
        let ledger = Ledger::new(next_after(&txn, schema::PROVENANCE)?);
        let knob_rows = txn.scan(KNOBS, &Default::default())?.rows;
        drop(txn);

        let knobs: HashMap<String, f64> = knob_rows
            .iter()
            .map(|r| (r.get(col::knobs::NAME).as_str().unwrap_or_default().to_string(), r.get(col::knobs::VALUE).as_f64().unwrap_or(0.0)))
            .collect();
        let knobs = Arc::new(RwLock::new(knobs));
        let messages = Arc::new(Notifier::default());

        let mut triggers = Vec::new();
        for event in [TriggerEventKind::Insert, TriggerEventKind::Update] {
            let k = knobs.clone();
            triggers.push(engine.register_trigger(
                TriggerDef { table_name: KNOBS.into(), event, predicate: None },
                Arc::new(move |ev| {
                    if let Some(row) = ev.after {
                        if let (Some(name), Some(v)) = (row.get(col::knobs::NAME).as_str(), row.get(col::knobs::VALUE).as_f64()) {
                            k.write().insert(name.to_string(), v);
                        }
                    }
                }),
            )?);
        }
        let m = messages.clone();
        triggers.push(engine.register_trigger(
            TriggerDef { table_name: schema::MESSAGES.into(), event: TriggerEventKind::Insert, predicate: None },
            Arc::new(move |_| m.bump()),
        )?);

        Ok(Kernel {
            inner: Arc::new(KernelInner {
                engine,
                clock,
                ids,
                ledger,
                knobs,
                messages,
                spawn_lock: Mutex::new(i64::MIN),
                send_locks: Mutex::new(HashMap::new()),
                metric_ts: AtomicI64::new(i64::MIN),
                triggers,
            }),
        })
    }

    /// A fresh in-memory instance on the system clock.
    pub fn in_memory() -> Result<Kernel> {
        Kernel::boot(Engine::in_memory(), Arc::new(SystemClock::new()))
    }

    pub fn engine(&self) -> &Engine {
        &self.inner.engine
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    pub fn now_us(&self) -> i64 {
        self.inner.clock.now_us()
    }

    pub fn ledger(&self) -> &Ledger {
        &self.inner.ledger
    }

    pub(crate) fn message_notifier(&self) -> &Notifier {
        &self.inner.messages
    }

    pub(crate) fn send_lock(&self, channel_id: u64) -> Arc<Mutex<()>> {
        self.inner.send_locks.lock().entry(channel_id).or_default().clone()
    }

    /// Current value of a knob (the compiled-in default if the row is missing).
    pub fn knob(&self, name: &str) -> f64 {
        if let Some(v) = self.inner.knobs.read().get(name) {
            return *v;
        }
        schema::KNOB_DEFAULTS.iter().find(|k| k.name == name).map_or(0.0, |k| k.value)
    }

    pub(crate) fn max_retries(&self) -> usize {
        self.knob("max_retries").max(0.0) as usize
    }

    /// Runs one syscall body as a transaction, retrying on write conflicts.
    pub(crate) fn syscall<T>(&self, f: impl FnMut(&mut Transaction) -> Result<T>) -> Result<T> {
        self.inner.engine.run(self.max_retries(), f)
    }

    /// Strictly increasing timestamp for metric rows so that their keys never
    /// collide, even under a manual clock.
    pub(crate) fn metric_ts(&self) -> i64 {
        let now = self.now_us();
        let mut prev = self.inner.metric_ts.load(Ordering::Relaxed);
        loop {
            let next = now.max(prev.saturating_add(1));
            match self.inner.metric_ts.compare_exchange_weak(prev, next, Ordering::AcqRel, Ordering::Relaxed) {
                Ok(_) => return next,
                Err(p) => prev = p,
            }
        }
    }

    /// Appends one metric row inside `txn`.
    pub(crate) fn put_metric(&self, txn: &mut Transaction, source: &str, name: &str, value: f64) -> Result<()> {
        let ts = self.metric_ts();
        txn.insert(schema::METRICS, Row::new(vec![Value::Timestamp(ts), source.into(), name.into(), value.into()]))
    }

    /// Appends one metric row in its own transaction.
    pub fn emit_metric(&self, source: &str, name: &str, value: f64) -> Result<()> {
        self.syscall(|txn| self.put_metric(txn, source, name, value))
    }

    pub(crate) fn record(
        &self,
        txn: &mut Transaction,
        ctx: &SyscallContext,
        op: ProvOp,
        src: Option<ObjectRef>,
        dst: Option<ObjectRef>,
    ) -> Result<u64> {
        let rec = ProvenanceRecord {
            ts: self.now_us(),
            actor: ctx.principal.clone(),
            task_id: ctx.task_id,
            op,
            src,
            dst,
            purpose: ctx.purpose.clone(),
        };
        self.inner.ledger.record(txn, &rec)
    }

    /// Validates the context and returns its container's root inode.
    pub(crate) fn container_root(&self, txn: &Transaction, ctx: &SyscallContext) -> Result<u64> {
        if ctx.purpose.is_empty() {
            return Err(Error::InvalidArgument("purpose must not be empty".into()));
        }
        let row = txn
            .get(CONTAINERS, &[ctx.container_id.into()])?
            .ok_or(Error::UnknownContainer(ctx.container_id))?;
        Ok(row.get(col::containers::ROOT_INODE).as_u64().unwrap_or(schema::ROOT_INODE))
    }

    /// Fetches a row of a container-scoped table, hiding rows of other
    /// containers from non-root contexts.
    pub(crate) fn get_scoped(&self, txn: &Transaction, ctx: &SyscallContext, table: &str, key: &[Value]) -> Result<Option<Row>> {
        let row = txn.get(table, key)?;
        let Some(c) = schema::container_column(table) else {
            return Ok(row);
        };
        Ok(row.filter(|r| ctx.container_id == ROOT_CONTAINER || r.get(c).as_u64() == Some(ctx.container_id)))
    }

    /// The view through which `ctx` sees `table`.
    pub fn view_for(&self, txn: &Transaction, ctx: &SyscallContext, table: &str) -> Result<ViewDef> {
        schema::container_view(txn, ctx.container_id, table)
    }

    pub(crate) fn rights_of(&self, txn: &Transaction, principal: &str, obj: ObjectRef) -> Result<Rights> {
        let key = [principal.into(), obj.kind.as_str().into(), obj.id.into()];
        Ok(txn
            .get(PERMISSIONS, &key)?
            .map_or(Rights::NONE, |r| Rights(r.get(col::permissions::RIGHTS).as_i64().unwrap_or(0) as u8)))
    }

    pub(crate) fn check_rights(&self, txn: &Transaction, ctx: &SyscallContext, obj: ObjectRef, need: Rights) -> Result<()> {
        if ctx.is_root() || self.rights_of(txn, &ctx.principal, obj)?.contains(need) {
            Ok(())
        } else {
            Err(Error::PermissionDenied(format!("{} lacks {need} on {obj}", ctx.principal)))
        }
    }

    pub(crate) fn set_rights(&self, txn: &mut Transaction, principal: &str, obj: ObjectRef, rights: Rights) -> Result<()> {
        let key = vec![principal.into(), obj.kind.as_str().into(), obj.id.into()];
        if rights.is_empty() {
            if txn.get(PERMISSIONS, &key)?.is_some() {
                txn.delete(PERMISSIONS, &key)?;
            }
            return Ok(());
        }
        let mut row = key;
        row.push(i64::from(rights.0).into());
        txn.upsert(PERMISSIONS, Row::new(row))
    }

    /// Owner of a grantable object visible to `ctx`.
    fn object_owner(&self, txn: &Transaction, ctx: &SyscallContext, obj: ObjectRef) -> Result<String> {
        let unknown = || Error::UnknownObject(obj.to_string());
        let (table, owner_col) = match obj.kind {
            ObjectKind::File => (schema::INODES, col::inodes::OWNER),
            ObjectKind::Channel => (schema::CHANNELS, col::channels::OWNER),
            ObjectKind::Function => {
                let row = txn.get(FUNCTIONS, &[obj.id.into()])?.ok_or_else(unknown)?;
                return Ok(row.get(col::functions::OWNER).as_str().unwrap_or_default().to_string());
            }
            ObjectKind::Table => {
                return match schema::os_table_names().get(obj.id as usize) {
                    Some(_) => Ok(ROOT_PRINCIPAL.to_string()),
                    None => Err(unknown()),
                }
            }
            _ => return Err(Error::InvalidArgument(format!("{} objects carry no permissions", obj.kind))),
        };
        let row = self.get_scoped(txn, ctx, table, &[obj.id.into()])?.ok_or_else(unknown)?;
        Ok(row.get(owner_col).as_str().unwrap_or_default().to_string())
    }

    /// Adds `rights` for `principal` on `obj`. Only the owner or root may grant.
    pub fn grant(&self, ctx: &SyscallContext, principal: &str, obj: ObjectRef, rights: Rights) -> Result<()> {
        self.change_rights(ctx, principal, obj, |old| old | rights)
    }

    /// Removes `rights` for `principal` on `obj`; an emptied rule is deleted.
    pub fn revoke(&self, ctx: &SyscallContext, principal: &str, obj: ObjectRef, rights: Rights) -> Result<()> {
        self.change_rights(ctx, principal, obj, |old| old & !rights)
    }

    fn change_rights(&self, ctx: &SyscallContext, principal: &str, obj: ObjectRef, f: impl Fn(Rights) -> Rights) -> Result<()> {
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            let owner = self.object_owner(txn, ctx, obj)?;
            if !ctx.is_root() && owner != ctx.principal {
                return Err(Error::PermissionDenied(format!("{} does not own {obj}", ctx.principal)));
            }
            let old = self.rights_of(txn, principal, obj)?;
            self.set_rights(txn, principal, obj, f(old))?;
            self.record(txn, ctx, ProvOp::Mutate, None, Some(obj))?;
            Ok(())
        })
    }

    /// Effective rights of `principal` on `obj` at the current snapshot.
    pub fn rights(&self, principal: &str, obj: ObjectRef) -> Result<Rights> {
        let txn = self.engine().begin()?;
        if principal == ROOT_PRINCIPAL {
            return Ok(Rights::ALL);
        }
        self.rights_of(&txn, principal, obj)
    }

    /// Creates a container with its own empty root directory. Root only.
    pub fn container_create(&self, ctx: &SyscallContext, name: &str) -> Result<u64> {
        if !ctx.is_root() || ctx.container_id != ROOT_CONTAINER {
            return Err(Error::PermissionDenied("only root may create containers".into()));
        }
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            let taken = txn
                .scan(CONTAINERS, &Default::default())?
                .rows
                .iter()
                .any(|r| r.get(col::containers::NAME).as_str() == Some(name));
            if taken {
                return Err(Error::AlreadyExists(format!("container {name}")));
            }
            let id = self.inner.ids.container.fetch_add(1, Ordering::Relaxed);
            let inode = self.inner.ids.inode.fetch_add(1, Ordering::Relaxed);
            txn.insert(CONTAINERS, Row::new(vec![id.into(), name.into(), inode.into()]))?;
            txn.insert(schema::INODES, schema::dir_inode_row(inode, id, ROOT_PRINCIPAL, self.now_us()))?;
            self.record(txn, ctx, ProvOp::Create, None, Some(ObjectRef::new(ObjectKind::Container, id)))?;
            Ok(id)
        })
    }

    /// Registers a function name that tasks may be spawned for. The caller
    /// owns it and receives all rights on it.
    pub fn register_function(&self, ctx: &SyscallContext, name: &str, accel: Option<&str>, is_pure: bool) -> Result<u64> {
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            if self.function_by_name(txn, name)?.is_some() {
                return Err(Error::AlreadyExists(format!("function {name}")));
            }
            let id = self.inner.ids.function.fetch_add(1, Ordering::Relaxed);
            txn.insert(
                FUNCTIONS,
                Row::new(vec![id.into(), name.into(), accel.into(), is_pure.into(), ctx.principal.as_str().into()]),
            )?;
            let obj = ObjectRef::new(ObjectKind::Function, id);
            self.set_rights(txn, &ctx.principal, obj, Rights::ALL)?;
            self.record(txn, ctx, ProvOp::Create, None, Some(obj))?;
            Ok(id)
        })
    }

    pub(crate) fn function_by_name(&self, txn: &Transaction, name: &str) -> Result<Option<Row>> {
        let opts = crate::engine::ScanOptions::new().filter(crate::predicate::Predicate::eq("name", name)).limit(1);
        Ok(txn.scan(FUNCTIONS, &opts)?.rows.into_iter().next())
    }

    /// Id of a registered function.
    pub fn function_id(&self, name: &str) -> Result<u64> {
        let txn = self.engine().begin()?;
        self.function_by_name(&txn, name)?
            .and_then(|r| r.get(col::functions::FUNCTION_ID).as_u64())
            .ok_or_else(|| Error::UnknownFunction(name.into()))
    }

    /// Sets a knob within its bounds. Root only.
    pub fn set_knob(&self, ctx: &SyscallContext, name: &str, value: f64) -> Result<()> {
        if !ctx.is_root() {
            return Err(Error::PermissionDenied("only root may change knobs".into()));
        }
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            let mut row = txn.get(KNOBS, &[name.into()])?.ok_or_else(|| Error::NotFound(format!("knob {name}")))?;
            let (lo, hi) = (row.get(col::knobs::MIN).as_f64().unwrap_or(f64::MIN), row.get(col::knobs::MAX).as_f64().unwrap_or(f64::MAX));
            if !(lo..=hi).contains(&value) {
                return Err(Error::InvalidArgument(format!("knob {name} must be within [{lo}, {hi}], got {value}")));
            }
            row.0[col::knobs::VALUE] = value.into();
            txn.update(KNOBS, &[name.into()], row)?;
            let idx = schema::KNOB_DEFAULTS.iter().position(|k| k.name == name).unwrap_or(usize::MAX) as u64;
            self.record(txn, ctx, ProvOp::Mutate, None, Some(ObjectRef::new(ObjectKind::Knob, idx)))?;
            Ok(())
        })
    }

    pub(crate) fn next_task_id_and_ts(&self) -> (u64, i64) {
        let mut last = self.inner.spawn_lock.lock();
        let ts = self.now_us().max(*last);
        *last = ts;
        (self.inner.ids.task.fetch_add(1, Ordering::Relaxed), ts)
    }

    pub(crate) fn next_inode(&self) -> u64 {
        self.inner.ids.inode.fetch_add(1, Ordering::Relaxed)
    }

    pub(crate) fn next_msg(&self) -> u64 {
        self.inner.ids.msg.fetch_add(1, Ordering::Relaxed)
    }

    pub(crate) fn next_channel(&self) -> u64 {
        self.inner.ids.channel.fetch_add(1, Ordering::Relaxed)
    }

    pub(crate) fn next_flow(&self) -> u64 {
        self.inner.ids.flow.fetch_add(1, Ordering::Relaxed)
    }
}
