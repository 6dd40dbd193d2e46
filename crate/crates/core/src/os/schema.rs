//! The canonical OS-state tables.
//!
//! Table and column names here are a stable public interface; see
//! `docs/schema.md` for the generated reference.

use crate::engine::{Engine, Transaction, ViewDef};
use crate::error::{Error, Result};
use crate::predicate::Predicate;
use crate::schema::Schema;
use crate::value::{Row, Value, ValueKind};

use ValueKind::{Bool, Bytes, Float64, Int64, Text, Timestamp};

pub const TASKS: &str = "tasks";
pub const INODES: &str = "inodes";
pub const DENTRIES: &str = "dentries";
pub const BLOBS: &str = "blobs";
pub const MESSAGES: &str = "messages";
pub const CHANNELS: &str = "channels";
pub const FUNCTIONS: &str = "functions";
pub const PERMISSIONS: &str = "permissions";
pub const CONTAINERS: &str = "containers";
pub const KNOBS: &str = "knobs";
pub const METRICS: &str = "metrics";
pub const FLOWS: &str = "flows";
pub const PROVENANCE: &str = "provenance";
pub const PII_TAGS: &str = "pii_tags";
pub const PURPOSE_GRANTS: &str = "purpose_grants";
pub const WORKERS: &str = "workers";
pub const LOG_EVENTS: &str = "log_events";

pub const ROOT_CONTAINER: u64 = 0;
pub const ROOT_INODE: u64 = 1;
pub const ROOT_PRINCIPAL: &str = "root";
/// Size of every blob chunk except possibly the last one of a file.
pub const CHUNK_SIZE: usize = 64 * 1024;

/// Every table created by [`bootstrap`], in census order. A table's position
/// in this list is its object id for table-level permissions.
pub fn os_schemas() -> Vec<Schema> {
    vec![
        Schema::new(TASKS)
            .column("task_id", Int64)
            .column("container_id", Int64)
            .column("status", Text)
            .column("function_name", Text)
            .column("args", Bytes)
            .column("owner", Text)
            .column("submit_ts", Timestamp)
            .nullable("start_ts", Timestamp)
            .nullable("end_ts", Timestamp)
            .column("demand_cpu", Int64)
            .nullable("demand_accel", Text)
            .nullable("worker_id", Int64)
            .column("attempt", Int64)
            .nullable("lease_ts", Timestamp)
            .primary_key(&["task_id"])
            .index(&["status"]),
        Schema::new(INODES)
            .column("inode_id", Int64)
            .column("container_id", Int64)
            .column("owner", Text)
            .column("size", Int64)
            .column("perms", Int64)
            .column("atime", Timestamp)
            .column("mtime", Timestamp)
            .column("ctime", Timestamp)
            .column("kind", Text)
            .primary_key(&["inode_id"]),
        Schema::new(DENTRIES)
            .column("parent_inode", Int64)
            .column("name", Text)
            .column("child_inode", Int64)
            .column("container_id", Int64)
            .primary_key(&["parent_inode", "name"])
            .index(&["parent_inode"])
            .index(&["child_inode"]),
        Schema::new(BLOBS)
            .column("inode_id", Int64)
            .column("chunk_no", Int64)
            .column("data", Bytes)
            .column("container_id", Int64)
            .primary_key(&["inode_id", "chunk_no"])
            .index(&["inode_id"]),
        Schema::new(MESSAGES)
            .column("msg_id", Int64)
            .column("container_id", Int64)
            .column("channel", Text)
            .nullable("sender_task", Int64)
            .column("payload", Bytes)
            .column("sent_ts", Timestamp)
            .nullable("consumed_by", Int64)
            .nullable("consumed_ts", Timestamp)
            .primary_key(&["msg_id"])
            .index(&["channel", "consumed_by"]),
        Schema::new(CHANNELS)
            .column("channel_id", Int64)
            .column("container_id", Int64)
            .column("name", Text)
            .column("owner", Text)
            .column("last_msg_id", Int64)
            .primary_key(&["channel_id"])
            .index(&["container_id", "name"]),
        Schema::new(FUNCTIONS)
            .column("function_id", Int64)
            .column("name", Text)
            .nullable("accel", Text)
            .column("is_pure", Bool)
            .column("owner", Text)
            .primary_key(&["function_id"])
            .index(&["name"]),
        Schema::new(PERMISSIONS)
            .column("principal", Text)
            .column("object_kind", Text)
            .column("object_id", Int64)
            .column("rights", Int64)
            .primary_key(&["principal", "object_kind", "object_id"])
            .index(&["object_kind", "object_id"]),
        Schema::new(CONTAINERS)
            .column("container_id", Int64)
            .column("name", Text)
            .column("root_inode", Int64)
            .primary_key(&["container_id"]),
        Schema::new(KNOBS)
            .column("name", Text)
            .column("value", Float64)
            .column("min", Float64)
            .column("max", Float64)
            .column("description", Text)
            .primary_key(&["name"]),
        Schema::new(METRICS)
            .column("ts", Timestamp)
            .column("source", Text)
            .column("name", Text)
            .column("value", Float64)
            .primary_key(&["ts", "source", "name"])
            .index(&["name"])
            .index(&["source", "name"]),
        Schema::new(FLOWS)
            .column("flow_id", Int64)
            .column("container_id", Int64)
            .nullable("src_task", Int64)
            .nullable("dst_task", Int64)
            .column("bytes", Int64)
            .column("ts", Timestamp)
            .primary_key(&["flow_id"]),
        Schema::new(PROVENANCE)
            .column("prov_id", Int64)
            .column("ts", Timestamp)
            .column("actor", Text)
            .nullable("task_id", Int64)
            .column("op", Text)
            .nullable("src_kind", Text)
            .nullable("src_id", Int64)
            .nullable("dst_kind", Text)
            .nullable("dst_id", Int64)
            .column("purpose", Text)
            .column("txn_id", Int64)
            .primary_key(&["prov_id"])
            .index(&["src_kind", "src_id"])
            .index(&["dst_kind", "dst_id"]),
        Schema::new(PII_TAGS)
            .column("object_kind", Text)
            .column("object_id", Int64)
            .column("data_subject", Text)
            .primary_key(&["object_kind", "object_id", "data_subject"])
            .index(&["data_subject"]),
        Schema::new(PURPOSE_GRANTS)
            .column("data_subject", Text)
            .column("purpose", Text)
            .column("allowed", Bool)
            .primary_key(&["data_subject", "purpose"]),
        Schema::new(WORKERS)
            .column("worker_id", Int64)
            .column("node_id", Int64)
            .column("cores", Int64)
            .nullable("accel", Text)
            .column("busy", Bool)
            .nullable("current_task", Int64)
            .column("heartbeat_ts", Timestamp)
            .primary_key(&["worker_id"]),
        Schema::new(LOG_EVENTS)
            .column("ts", Timestamp)
            .column("host", Text)
            .column("user", Text)
            .column("app", Text)
            .column("kind", Text)
            .column("object", Text)
            .column("value", Float64)
            .primary_key(&["ts", "host", "app", "object", "kind"])
            .index(&["user"])
            .index(&["app"]),
    ]
}

/// Column positions of the OS tables, matching [`os_schemas`].
pub mod col {
    pub mod tasks {
        pub const TASK_ID: usize = 0;
        pub const CONTAINER_ID: usize = 1;
        pub const STATUS: usize = 2;
        pub const FUNCTION_NAME: usize = 3;
        pub const ARGS: usize = 4;
        pub const OWNER: usize = 5;
        pub const SUBMIT_TS: usize = 6;
        pub const START_TS: usize = 7;
        pub const END_TS: usize = 8;
        pub const DEMAND_CPU: usize = 9;
        pub const DEMAND_ACCEL: usize = 10;
        pub const WORKER_ID: usize = 11;
        pub const ATTEMPT: usize = 12;
        pub const LEASE_TS: usize = 13;
    }
    pub mod inodes {
        pub const INODE_ID: usize = 0;
        pub const CONTAINER_ID: usize = 1;
        pub const OWNER: usize = 2;
        pub const SIZE: usize = 3;
        pub const PERMS: usize = 4;
        pub const ATIME: usize = 5;
        pub const MTIME: usize = 6;
        pub const CTIME: usize = 7;
        pub const KIND: usize = 8;
    }
    pub mod dentries {
        pub const NAME: usize = 1;
        pub const CHILD_INODE: usize = 2;
    }
    pub mod blobs {
        pub const DATA: usize = 2;
    }
    pub mod messages {
        pub const MSG_ID: usize = 0;
        pub const PAYLOAD: usize = 4;
        pub const CONSUMED_BY: usize = 6;
        pub const CONSUMED_TS: usize = 7;
    }
    pub mod channels {
        pub const CHANNEL_ID: usize = 0;
        pub const OWNER: usize = 3;
        pub const LAST_MSG_ID: usize = 4;
    }
    pub mod functions {
        pub const FUNCTION_ID: usize = 0;
        pub const NAME: usize = 1;
        pub const ACCEL: usize = 2;
        pub const OWNER: usize = 4;
    }
    pub mod permissions {
        pub const PRINCIPAL: usize = 0;
        pub const RIGHTS: usize = 3;
    }
    pub mod containers {
        pub const NAME: usize = 1;
        pub const ROOT_INODE: usize = 2;
    }
    pub mod knobs {
        pub const NAME: usize = 0;
        pub const VALUE: usize = 1;
        pub const MIN: usize = 2;
        pub const MAX: usize = 3;
    }
    pub mod workers {
        pub const WORKER_ID: usize = 0;
        pub const NODE_ID: usize = 1;
        pub const CORES: usize = 2;
        pub const ACCEL: usize = 3;
        pub const BUSY: usize = 4;
        pub const CURRENT_TASK: usize = 5;
        pub const HEARTBEAT_TS: usize = 6;
    }
}

/// Names of all OS tables in census order.
pub fn os_table_names() -> Vec<String> {
    os_schemas().into_iter().map(|s| s.table_name).collect()
}

/// Stable object id of an OS table for table-level permissions.
pub fn table_object_id(name: &str) -> Option<u64> {
    os_schemas().iter().position(|s| s.table_name == name).map(|p| p as u64)
}

/// Tables whose rows belong to a container and are filtered by container views.
pub const CONTAINER_SCOPED: &[&str] = &[TASKS, INODES, DENTRIES, BLOBS, MESSAGES, CHANNELS, FLOWS];

/// Position of the `container_id` column of a container-scoped table.
pub fn container_column(table: &str) -> Option<usize> {
    match table {
        TASKS | INODES | MESSAGES | CHANNELS | FLOWS => Some(1),
        DENTRIES | BLOBS => Some(3),
        _ => None,
    }
}

pub struct KnobDefault {
    pub name: &'static str,
    pub value: f64,
    pub min: f64,
    pub max: f64,
    pub description: &'static str,
}

pub const KNOB_DEFAULTS: &[KnobDefault] = &[
    KnobDefault { name: "max_retries", value: 16.0, min: 0.0, max: 10_000.0, description: "syscall retries on write conflict" },
    KnobDefault { name: "recv_poll_ms", value: 5.0, min: 1.0, max: 60_000.0, description: "blocking receive poll fallback" },
    KnobDefault { name: "max_attempts", value: 3.0, min: 1.0, max: 1_000.0, description: "task attempts before final failure" },
    KnobDefault { name: "lease_ms", value: 5_000.0, min: 1.0, max: 86_400_000.0, description: "running-task lease before reaping" },
    KnobDefault { name: "cv_threshold", value: 1.0, min: 0.0, max: 1_000.0, description: "runtime CV above which sjf is chosen" },
    KnobDefault { name: "accel_speedup", value: 10.0, min: 1.0, max: 10_000.0, description: "simulated accelerator speedup factor" },
    KnobDefault { name: "shards", value: 4.0, min: 1.0, max: 4_096.0, description: "scheduling table partitions" },
    KnobDefault { name: "sched_window", value: 64.0, min: 1.0, max: 1_000_000.0, description: "runnable tasks considered per claim" },
    KnobDefault { name: "poll_interval_ms", value: 1.0, min: 0.0, max: 60_000.0, description: "idle worker poll interval" },
    KnobDefault { name: "ingest_batch", value: 10_000.0, min: 1.0, max: 10_000_000.0, description: "log rows per ingest transaction" },
    KnobDefault { name: "max_bad_frac", value: 0.01, min: 0.0, max: 1.0, description: "tolerated malformed log line fraction" },
];

/// Creates every OS table, the root container, its root directory and the
/// default knobs. Fails with `DuplicateTable` if any table already exists.
pub fn bootstrap(engine: &Engine, now_us: i64) -> Result<()> {
    let existing = engine.table_names();
    for s in os_schemas() {
        if existing.contains(&s.table_name) {
            return Err(Error::DuplicateTable(s.table_name));
        }
    }
    for s in os_schemas() {
        engine.create_table(s)?;
    }
    engine.run(0, |txn| {
        txn.insert(
            CONTAINERS,
            Row::new(vec![ROOT_CONTAINER.into(), "root".into(), ROOT_INODE.into()]),
        )?;
        txn.insert(INODES, dir_inode_row(ROOT_INODE, ROOT_CONTAINER, ROOT_PRINCIPAL, now_us))?;
        for k in KNOB_DEFAULTS {
            txn.insert(
                KNOBS,
                Row::new(vec![k.name.into(), k.value.into(), k.min.into(), k.max.into(), k.description.into()]),
            )?;
        }
        Ok(())
    })
}

pub(crate) fn dir_inode_row(inode: u64, container: u64, owner: &str, now: i64) -> Row {
    Row::new(vec![
        inode.into(),
        container.into(),
        owner.into(),
        0i64.into(),
        0o755i64.into(),
        Value::Timestamp(now),
        Value::Timestamp(now),
        Value::Timestamp(now),
        "dir".into(),
    ])
}

/// The view through which container `container_id` sees `table`: rows with
/// that container id, or everything for the root container.
pub fn container_view(txn: &Transaction, container_id: u64, table: &str) -> Result<ViewDef> {
    if txn.get(CONTAINERS, &[container_id.into()])?.is_none() {
        return Err(Error::UnknownContainer(container_id));
    }
    let name = format!("container_{container_id}_{table}");
    if container_id == ROOT_CONTAINER {
        return Ok(ViewDef::new(&name, table, Predicate::True));
    }
    if !CONTAINER_SCOPED.contains(&table) {
        return Err(Error::PermissionDenied(format!("{table} is visible to the root container only")));
    }
    Ok(ViewDef::new(&name, table, Predicate::eq("container_id", container_id)))
}

/// Markdown reference of every OS table.
pub fn schema_reference() -> String {
    let mut out = String::from("# OS schema reference\n\nGenerated from `os::schema::os_schemas()`.\n");
    for s in os_schemas() {
        out.push_str(&format!("\n## `{}`\n\n| column | type | nullable |\n|---|---|---|\n", s.table_name));
        for c in &s.columns {
            out.push_str(&format!("| {} | {} | {} |\n", c.name, c.kind, if c.nullable { "yes" } else { "no" }));
        }
        out.push_str(&format!("\nPrimary key: ({})\n", s.primary_key.join(", ")));
        for idx in &s.indexes {
            out.push_str(&format!("\nIndex: ({})\n", idx.join(", ")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ScanOptions;

    #[test]
    fn every_schema_is_valid() {
        for s in os_schemas() {
            s.validate().unwrap();
            // The registry is keyed by container_id but not scoped by it.
            if s.table_name != CONTAINERS {
                assert_eq!(container_column(&s.table_name), s.column_index("container_id"), "{}", s.table_name);
            }
        }
    }

    #[test]
    fn bootstrap_twice_fails() {
        let e = Engine::in_memory();
        bootstrap(&e, 0).unwrap();
        assert_eq!(bootstrap(&e, 0).unwrap_err().code(), "DuplicateTable");
    }

    #[test]
    fn bootstrap_census_is_exact() {
        let e = Engine::in_memory();
        bootstrap(&e, 0).unwrap();
        let mut want = os_table_names();
        want.sort();
        assert_eq!(e.table_names(), want);
        let t = e.begin().unwrap();
        assert!(t.scan(TASKS, &ScanOptions::new()).unwrap().rows.is_empty());
    }

    #[test]
    fn views_per_container() {
        let e = Engine::in_memory();
        bootstrap(&e, 0).unwrap();
        let t = e.begin().unwrap();
        assert_eq!(container_view(&t, 0, TASKS).unwrap().predicate, Predicate::True);
        assert_eq!(container_view(&t, 7, TASKS).unwrap_err().code(), "UnknownContainer");
    }
}
