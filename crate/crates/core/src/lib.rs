//! A database-oriented operating system prototype.
//!
//! All OS state (tasks, files, messages, permissions, provenance, metrics)
//! lives in transactional tables managed by [`engine::Engine`]. Every state
//! change is a transaction; scheduling, monitoring, security and erasure are
//! queries over those tables.

pub mod bench;
pub mod engine;
pub mod error;
pub mod executor;
pub mod logs;
pub mod os;
pub mod predicate;
pub mod provenance;
pub mod query;
pub mod schema;
pub mod syscall;
pub mod value;

pub use engine::{
    AggFunc, AggSpec, Durability, Engine, EngineConfig, RowSet, ScanOptions, Transaction, TriggerDef,
    TriggerEventKind, ViewDef,
};
pub use error::{Error, Result};
pub use predicate::{CmpOp, Predicate};
pub use schema::{Column, Schema};
pub use value::{Key, Row, Value, ValueKind};
