//! Messages as rows. A send inserts a row; a receive claims the oldest
//! unconsumed row by setting `consumed_by` in the transaction that returns
//! it, so each message is handed out exactly once.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::engine::{ScanOptions, Transaction};
use crate::error::{Error, Result};
use crate::os::schema::{col, CHANNELS, FLOWS, MESSAGES};
use crate::predicate::Predicate;
use crate::provenance::{check_purpose, ObjectRef, ProvOp, PurposeDecision};
use crate::value::{Row, Value};

use super::{Kernel, Rights, SyscallContext};

impl Kernel {
    fn channel_id(&self, txn: &Transaction, ctx: &SyscallContext, name: &str) -> Result<Option<u64>> {
        let pred = Predicate::eq("container_id", ctx.container_id).and(Predicate::eq("name", name));
        Ok(txn
            .scan(CHANNELS, &ScanOptions::new().filter(pred).limit(1))?
            .rows
            .first()
            .and_then(|r| r.get(col::channels::CHANNEL_ID).as_u64()))
    }

    fn require_channel(&self, txn: &Transaction, ctx: &SyscallContext, name: &str) -> Result<u64> {
        self.container_root(txn, ctx)?;
        self.channel_id(txn, ctx, name)?.ok_or_else(|| Error::NotFound(format!("channel {name}")))
    }

    /// Creates a named channel in the caller's container. The caller owns it.
    pub fn channel_create(&self, ctx: &SyscallContext, name: &str) -> Result<u64> {
        self.syscall(|txn| {
            self.container_root(txn, ctx)?;
            if self.channel_id(txn, ctx, name)?.is_some() {
                return Err(Error::AlreadyExists(format!("channel {name}")));
            }
            let id = self.next_channel();
            txn.insert(
                CHANNELS,
                Row::new(vec![id.into(), ctx.container_id.into(), name.into(), ctx.principal.as_str().into(), 0u64.into()]),
            )?;
            let obj = ObjectRef::channel(id);
            self.set_rights(txn, &ctx.principal, obj, Rights::ALL)?;
            self.record(txn, ctx, ProvOp::Create, None, Some(obj))?;
            Ok(id)
        })
    }

    /// Channel id for a name in the caller's container.
    pub fn channel_lookup(&self, ctx: &SyscallContext, name: &str) -> Result<u64> {
        self.require_channel(&self.engine().begin()?, ctx, name)
    }

    /// Inserts a message and its flow row; checks the write right.
    pub(crate) fn put_message(&self, txn: &mut Transaction, ctx: &SyscallContext, channel: &str, payload: Vec<u8>) -> Result<u64> {
        let chan = self.require_channel(txn, ctx, channel)?;
        self.check_rights(txn, ctx, ObjectRef::channel(chan), Rights::WRITE)?;
        // Bumping the channel row makes concurrent sends on one channel
        // conflict, so message ids on a channel increase in commit order.
        let id = self.next_msg();
        let mut chan_row = txn.get(CHANNELS, &[chan.into()])?.ok_or_else(|| Error::NotFound(format!("channel {channel}")))?;
        chan_row.0[col::channels::LAST_MSG_ID] = id.into();
        txn.update(CHANNELS, &[chan.into()], chan_row)?;
        let now = Value::Timestamp(self.now_us());
        let bytes = payload.len() as u64;
        txn.insert(
            MESSAGES,
            Row::new(vec![
                id.into(),
                ctx.container_id.into(),
                channel.into(),
                ctx.task_id.into(),
                payload.into(),
                now.clone(),
                Value::Null,
                Value::Null,
            ]),
        )?;
        txn.insert(
            FLOWS,
            Row::new(vec![self.next_flow().into(), ctx.container_id.into(), ctx.task_id.into(), Value::Null, bytes.into(), now]),
        )?;
        Ok(id)
    }

    /// Sends `payload` on `channel`.
    pub fn msg_send(&self, ctx: &SyscallContext, channel: &str, payload: &[u8]) -> Result<u64> {
        // Sends on one channel queue here instead of retrying against each
        // other on the channel row.
        let lock = match self.channel_id(&self.engine().begin()?, ctx, channel)? {
            Some(id) => self.send_lock(id),
            None => Arc::default(),
        };
        let _held = lock.lock();
        self.syscall(|txn| self.msg_send_in(txn, ctx, channel, payload))
    }

    /// Sends inside a caller-managed transaction; nothing becomes visible
    /// unless that transaction commits.
    pub fn msg_send_in(&self, txn: &mut Transaction, ctx: &SyscallContext, channel: &str, payload: &[u8]) -> Result<u64> {
        let id = self.put_message(txn, ctx, channel, payload.to_vec())?;
        match ctx.task_id {
            Some(t) => self.record(txn, ctx, ProvOp::Transmit, Some(ObjectRef::task(t)), Some(ObjectRef::message(id)))?,
            None => self.record(txn, ctx, ProvOp::Create, None, Some(ObjectRef::message(id)))?,
        };
        Ok(id)
    }

    fn try_recv(&self, ctx: &SyscallContext, channel: &str) -> Result<Option<(u64, Vec<u8>)>> {
        self.inner.engine.run(usize::MAX, |txn| {
            let chan = self.require_channel(txn, ctx, channel)?;
            self.check_rights(txn, ctx, ObjectRef::channel(chan), Rights::CONSUME)?;
            let pred = Predicate::eq("channel", channel)
                .and(Predicate::eq("consumed_by", Value::Null))
                .and(Predicate::eq("container_id", ctx.container_id));
            let Some(mut row) = txn.scan(MESSAGES, &ScanOptions::new().filter(pred).limit(1))?.rows.pop() else {
                return Ok(None);
            };
            let id = row.get(col::messages::MSG_ID).as_u64().unwrap_or(0);
            if check_purpose(txn, &ctx.purpose, ObjectRef::message(id))? == PurposeDecision::Deny {
                return Err(Error::PermissionDenied(format!("purpose {:?} not allowed on message:{id}", ctx.purpose)));
            }
            row.0[col::messages::CONSUMED_BY] = ctx.task_id.unwrap_or(0).into();
            row.0[col::messages::CONSUMED_TS] = Value::Timestamp(self.now_us());
            let payload = row.get(col::messages::PAYLOAD).as_bytes().unwrap_or_default().to_vec();
            txn.update(MESSAGES, &[id.into()], row)?;
            self.record(txn, ctx, ProvOp::Read, Some(ObjectRef::message(id)), ctx.task_id.map(ObjectRef::task))?;
            Ok(Some((id, payload)))
        })
    }

    /// Claims the oldest unconsumed message on `channel`. With `block`, waits
    /// up to `timeout_ms` for one to arrive and fails with `Timeout`.
    pub fn msg_recv(&self, ctx: &SyscallContext, channel: &str, block: bool, timeout_ms: u64) -> Result<Option<(u64, Vec<u8>)>> {
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        let notifier = self.message_notifier();
        loop {
            let seen = *notifier.seq.lock();
            if let Some(m) = self.try_recv(ctx, channel)? {
                return Ok(Some(m));
            }
            if !block {
                return Ok(None);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout);
            }
            let poll = Duration::from_millis(self.knob("recv_poll_ms").max(1.0) as u64);
            let mut seq = notifier.seq.lock();
            if *seq == seen {
                notifier.cv.wait_for(&mut seq, poll.min(deadline - now));
            }
        }
    }
}
