use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the engine and every layer built on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("table {0} already exists")]
    DuplicateTable(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("engine is closed")]
    EngineClosed,
    #[error("duplicate key {key} in {table}")]
    DuplicateKey { table: String, key: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("transaction is not active")]
    TxnNotActive,
    #[error("write conflict on {table} key {key}")]
    WriteConflict { table: String, key: String },
    #[error("unknown table or view {0}")]
    UnknownTable(String),
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("index on {0} already exists")]
    DuplicateIndex(String),
    #[error("corrupt log: {0}")]
    CorruptWal(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("invalid transition {from} -> {to}")]
    InvalidTransition { from: String, to: String },
    #[error("is a directory: {0}")]
    IsDirectory(String),
    #[error("not a directory: {0}")]
    NotDirectory(String),
    #[error("path escapes container: {0}")]
    PathEscapesContainer(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("directory not empty: {0}")]
    DirectoryNotEmpty(String),
    #[error("timed out")]
    Timeout,
    #[error("unknown object {0}")]
    UnknownObject(String),
    #[error("unknown container {0}")]
    UnknownContainer(u64),
    #[error("no worker provides accelerator class {0}")]
    NoSuchAcceleratorClass(String),
    #[error("malformed provenance record: {0}")]
    MalformedRecord(String),
    #[error("format error: {0}")]
    FormatError(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Stable, machine-comparable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateTable(_) => "DuplicateTable",
            Error::InvalidSchema(_) => "InvalidSchema",
            Error::EngineClosed => "EngineClosed",
            Error::DuplicateKey { .. } => "DuplicateKey",
            Error::NotFound(_) => "NotFound",
            Error::TxnNotActive => "TxnNotActive",
            Error::WriteConflict { .. } => "WriteConflict",
            Error::UnknownTable(_) => "UnknownTable",
            Error::UnknownColumn(_) => "UnknownColumn",
            Error::TypeMismatch(_) => "TypeMismatch",
            Error::DuplicateIndex(_) => "DuplicateIndex",
            Error::CorruptWal(_) => "CorruptWal",
            Error::CorruptSnapshot(_) => "CorruptSnapshot",
            Error::Io(_) => "IoError",
            Error::PermissionDenied(_) => "PermissionDenied",
            Error::UnknownFunction(_) => "UnknownFunction",
            Error::InvalidTransition { .. } => "InvalidTransition",
            Error::IsDirectory(_) => "IsDirectory",
            Error::NotDirectory(_) => "NotDirectory",
            Error::PathEscapesContainer(_) => "PathEscapesContainer",
            Error::AlreadyExists(_) => "AlreadyExists",
            Error::DirectoryNotEmpty(_) => "DirectoryNotEmpty",
            Error::Timeout => "Timeout",
            Error::UnknownObject(_) => "UnknownObject",
            Error::UnknownContainer(_) => "UnknownContainer",
            Error::NoSuchAcceleratorClass(_) => "NoSuchAcceleratorClass",
            Error::MalformedRecord(_) => "MalformedRecord",
            Error::FormatError(_) => "FormatError",
            Error::Parse { .. } => "ParseError",
            Error::InvalidArgument(_) => "InvalidArgument",
        }
    }

    pub fn is_write_conflict(&self) -> bool {
        matches!(self, Error::WriteConflict { .. })
    }
}
