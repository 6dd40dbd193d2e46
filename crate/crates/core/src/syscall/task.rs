//! Task lifecycle: runnable -> running -> done | failed, and failed -> runnable
//! on retry.

use std::fmt;
use std::str::FromStr;

use crate::engine::{ScanOptions, Transaction};
use crate::error::{Error, Result};
use crate::os::schema::{col, TASKS, WORKERS};
use crate::predicate::Predicate;
use crate::provenance::{ObjectKind, ObjectRef, ProvOp};
use crate::value::{Row, Value};

use super::{Kernel, Rights, SyscallContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskStatus {
    Runnable,
    Running,
    Done,
    Failed,
}

impl TaskStatus {
    pub const ALL: [TaskStatus; 4] = [TaskStatus::Runnable, TaskStatus::Running, TaskStatus::Done, TaskStatus::Failed];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Runnable => "runnable",
            TaskStatus::Running => "running",
            TaskStatus::Done => "done",
            TaskStatus::Failed => "failed",
        }
    }

    pub fn can_become(self, to: TaskStatus) -> bool {
        use TaskStatus::*;
        matches!((self, to), (Runnable, Running) | (Running, Done) | (Running, Failed) | (Failed, Runnable))
    }

    fn check(self, to: TaskStatus) -> Result<()> {
        if self.can_become(to) {
            Ok(())
        } else {
            Err(Error::InvalidTransition { from: self.as_str().into(), to: to.as_str().into() })
        }
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskStatus::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task status {s:?}")))
    }
}

pub(crate) fn status_of(row: &Row) -> Result<TaskStatus> {
    row.get(col::tasks::STATUS).as_str().unwrap_or_default().parse()
}

impl Kernel {
    /// Submits a runnable task for a registered function. The caller needs
    /// the exec right on the function.
    pub fn task_spawn(
        &self,
        ctx: &SyscallContext,
        function_name: &str,
        args: &[u8],
        demand_cpu: u32,
        demand_accel: Option<&str>,
    ) -> Result<u64> {
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            let f = self.function_by_name(txn, function_name)?.ok_or_else(|| Error::UnknownFunction(function_name.into()))?;
            let fid = f.get(col::functions::FUNCTION_ID).as_u64().unwrap_or(0);
            self.check_rights(txn, ctx, ObjectRef::new(ObjectKind::Function, fid), Rights::EXEC)?;
            let accel: Value = match demand_accel {
                Some(a) => a.into(),
                None => f.get(col::functions::ACCEL).clone(),
            };
            let (id, ts) = self.next_task_id_and_ts();
            txn.insert(
                TASKS,
                Row::new(vec![
                    id.into(),
                    ctx.container_id.into(),
                    TaskStatus::Runnable.as_str().into(),
                    function_name.into(),
                    args.to_vec().into(),
                    ctx.principal.as_str().into(),
                    Value::Timestamp(ts),
                    Value::Null,
                    Value::Null,
                    i64::from(demand_cpu).into(),
                    accel,
                    Value::Null,
                    1i64.into(),
                    Value::Null,
                ]),
            )?;
            self.record(txn, ctx, ProvOp::Create, None, Some(ObjectRef::task(id)))?;
            Ok(id)
        })
    }

    /// Ends a running task. Only the task itself or root may do this.
    pub fn task_exit(&self, ctx: &SyscallContext, task_id: u64, outcome: TaskStatus) -> Result<()> {
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            let row = self.get_scoped(txn, ctx, TASKS, &[task_id.into()])?.ok_or_else(|| Error::NotFound(format!("task {task_id}")))?;
            if !ctx.is_root() && ctx.task_id != Some(task_id) {
                return Err(Error::PermissionDenied(format!("{} may not end task {task_id}", ctx.principal)));
            }
            self.finish_in(txn, row, outcome, None)?;
            self.record(txn, ctx, ProvOp::Mutate, None, Some(ObjectRef::task(task_id)))?;
            Ok(())
        })
    }

    /// Moves a failed task back to runnable with its attempt counter bumped.
    pub fn task_retry(&self, ctx: &SyscallContext, task_id: u64) -> Result<()> {
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            let row = self.get_scoped(txn, ctx, TASKS, &[task_id.into()])?.ok_or_else(|| Error::NotFound(format!("task {task_id}")))?;
            if !ctx.is_root() && row.get(col::tasks::OWNER).as_str() != Some(ctx.principal.as_str()) {
                return Err(Error::PermissionDenied(format!("{} may not retry task {task_id}", ctx.principal)));
            }
            self.requeue_in(txn, row)?;
            self.record(txn, ctx, ProvOp::Mutate, None, Some(ObjectRef::task(task_id)))?;
            Ok(())
        })
    }

    pub(crate) fn requeue_in(&self, txn: &mut Transaction, mut row: Row) -> Result<()> {
        use col::tasks::*;
        status_of(&row)?.check(TaskStatus::Runnable)?;
        let attempt = row.get(ATTEMPT).as_i64().unwrap_or(1);
        row.0[STATUS] = TaskStatus::Runnable.as_str().into();
        row.0[ATTEMPT] = (attempt + 1).into();
        for c in [START_TS, END_TS, WORKER_ID, LEASE_TS] {
            row.0[c] = Value::Null;
        }
        let key = [row.get(TASK_ID).clone()];
        txn.update(TASKS, &key, row)
    }

    /// Marks a running task done or failed and frees its worker. With
    /// `fence`, the task must still be held by that worker. Returns the
    /// updated row.
    pub(crate) fn finish_in(&self, txn: &mut Transaction, mut row: Row, outcome: TaskStatus, fence: Option<u64>) -> Result<Row> {
        use col::tasks::*;
        if !matches!(outcome, TaskStatus::Done | TaskStatus::Failed) {
            return Err(Error::InvalidArgument(format!("a task cannot exit as {outcome}")));
        }
        let status = status_of(&row)?;
        status.check(outcome)?;
        let worker = row.get(WORKER_ID).as_u64();
        if fence.is_some() && fence != worker {
            return Err(Error::InvalidTransition { from: "reaped".into(), to: outcome.as_str().into() });
        }
        let now = self.now_us().max(row.get(START_TS).as_i64().unwrap_or(i64::MIN));
        row.0[STATUS] = outcome.as_str().into();
        row.0[END_TS] = Value::Timestamp(now);
        row.0[LEASE_TS] = Value::Null;
        let task_id = row.get(TASK_ID).clone();
        txn.update(TASKS, &[task_id.clone()], row.clone())?;
        if let Some(w) = worker {
            self.release_worker(txn, w, &task_id)?;
        }
        Ok(row)
    }

    pub(crate) fn release_worker(&self, txn: &mut Transaction, worker: u64, task_id: &Value) -> Result<()> {
        if let Some(mut wr) = txn.get(WORKERS, &[worker.into()])? {
            if wr.get(col::workers::CURRENT_TASK) == task_id {
                wr.0[col::workers::BUSY] = false.into();
                wr.0[col::workers::CURRENT_TASK] = Value::Null;
                txn.update(WORKERS, &[worker.into()], wr)?;
            }
        }
        Ok(())
    }

    /// Task rows visible to `ctx`, optionally restricted to one status, in
    /// task id order.
    pub fn tasks(&self, ctx: &SyscallContext, status: Option<TaskStatus>) -> Result<Vec<Row>> {
        let txn = self.engine().begin()?;
        let view = self.view_for(&txn, ctx, TASKS)?;
        let mut opts = ScanOptions::new();
        if let Some(s) = status {
            opts = opts.filter(Predicate::eq("status", s.as_str()));
        }
        Ok(txn.scan_view(&view, &opts)?.rows)
    }
}
