//! Typed scalar values and rows.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// The kind of a column, and of every non-null value stored in it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ValueKind {
    Int64,
    Float64,
    Text,
    Bytes,
    Bool,
    Timestamp,
}

impl ValueKind {
    pub fn name(self) -> &'static str {
        match self {
            ValueKind::Int64 => "int64",
            ValueKind::Float64 => "float64",
            ValueKind::Text => "text",
            ValueKind::Bytes => "bytes",
            ValueKind::Bool => "bool",
            ValueKind::Timestamp => "timestamp",
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, ValueKind::Int64 | ValueKind::Float64 | ValueKind::Timestamp)
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ValueKind::Int64 => 1,
            ValueKind::Float64 => 2,
            ValueKind::Text => 3,
            ValueKind::Bytes => 4,
            ValueKind::Bool => 5,
            ValueKind::Timestamp => 6,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<ValueKind> {
        Some(match tag {
            1 => ValueKind::Int64,
            2 => ValueKind::Float64,
            3 => ValueKind::Text,
            4 => ValueKind::Bytes,
            5 => ValueKind::Bool,
            6 => ValueKind::Timestamp,
            _ => return None,
        })
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single typed value. Timestamps are microseconds since the Unix epoch.
#[derive(Clone, Debug)]
pub enum Value {
    Null,
    Int64(i64),
    Float64(f64),
    Text(String),
    Bytes(Vec<u8>),
    Bool(bool),
    Timestamp(i64),
}

impl Value {
    pub fn kind(&self) -> Option<ValueKind> {
        Some(match self {
            Value::Null => return None,
            Value::Int64(_) => ValueKind::Int64,
            Value::Float64(_) => ValueKind::Float64,
            Value::Text(_) => ValueKind::Text,
            Value::Bytes(_) => ValueKind::Bytes,
            Value::Bool(_) => ValueKind::Bool,
            Value::Timestamp(_) => ValueKind::Timestamp,
        })
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Compares two values of the same kind. Null sorts before every non-null
    /// value; comparing two different non-null kinds is an error.
    pub fn try_cmp(&self, other: &Value) -> Result<Ordering> {
        match (self, other) {
            (Value::Null, Value::Null) => Ok(Ordering::Equal),
            (Value::Null, _) => Ok(Ordering::Less),
            (_, Value::Null) => Ok(Ordering::Greater),
            (a, b) if a.kind() == b.kind() => Ok(a.cmp(b)),
            (a, b) => Err(Error::TypeMismatch(format!(
                "cannot compare {} with {}",
                a.kind().map_or("null", ValueKind::name),
                b.kind().map_or("null", ValueKind::name)
            ))),
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int64(v) | Value::Timestamp(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        self.as_i64().map(|v| v as u64)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int64(v) | Value::Timestamp(v) => Some(*v as f64),
            Value::Float64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            v => v.kind().map_or(0, ValueKind::tag),
        }
    }
}

// A total order is needed to key ordered maps. Within a variant it is the
// natural order (floats by `total_cmp`); across variants it falls back to the
// variant rank. User-facing comparisons go through `try_cmp`.
impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Null, Value::Null) => Ordering::Equal,
            (Value::Int64(a), Value::Int64(b)) => a.cmp(b),
            (Value::Float64(a), Value::Float64(b)) => a.total_cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Bytes(a), Value::Bytes(b)) => a.cmp(b),
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Timestamp(a), Value::Timestamp(b)) => a.cmp(b),
            (a, b) => a.rank().cmp(&b.rank()),
        }
    }
}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Int64(v) => write!(f, "{v}"),
            Value::Float64(v) => {
                if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
                    write!(f, "{v:.1}")
                } else {
                    write!(f, "{v:?}")
                }
            }
            Value::Text(s) => write!(f, "'{}'", s.replace('\'', "''")),
            Value::Bytes(b) => {
                f.write_str("x'")?;
                for byte in b {
                    write!(f, "{byte:02x}")?;
                }
                f.write_str("'")
            }
            Value::Bool(b) => write!(f, "{b}"),
            Value::Timestamp(v) => write!(f, "ts({v})"),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int64(v)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int64(v as i64)
    }
}

impl From<u32> for Value {
    fn from(v: u32) -> Self {
        Value::Int64(v as i64)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float64(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

impl From<Vec<u8>> for Value {
    fn from(v: Vec<u8>) -> Self {
        Value::Bytes(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl<T: Into<Value>> From<Option<T>> for Value {
    fn from(v: Option<T>) -> Self {
        v.map_or(Value::Null, Into::into)
    }
}

/// A primary-key tuple.
pub type Key = Vec<Value>;

/// One tuple of a table, in schema column order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Row(pub Vec<Value>);

impl Row {
    pub fn new(values: Vec<Value>) -> Self {
        Row(values)
    }

    pub fn values(&self) -> &[Value] {
        &self.0
    }

    pub fn get(&self, idx: usize) -> &Value {
        &self.0[idx]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn project(&self, cols: &[usize]) -> Key {
        cols.iter().map(|&c| self.0[c].clone()).collect()
    }
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str(")")
    }
}

pub(crate) type SharedRow = Arc<Row>;

pub fn format_key(key: &[Value]) -> String {
    Row(key.to_vec()).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_sorts_first() {
        assert_eq!(Value::Null.try_cmp(&Value::Int64(i64::MIN)).unwrap(), Ordering::Less);
        assert_eq!(Value::Text("a".into()).try_cmp(&Value::Null).unwrap(), Ordering::Greater);
        assert_eq!(Value::Null.try_cmp(&Value::Null).unwrap(), Ordering::Equal);
    }

    #[test]
    fn cross_kind_compare_is_an_error() {
        let err = Value::Int64(1).try_cmp(&Value::Text("1".into())).unwrap_err();
        assert_eq!(err.code(), "TypeMismatch");
        assert!(Value::Int64(1).try_cmp(&Value::Timestamp(1)).is_err());
    }

    #[test]
    fn floats_order_totally() {
        let mut v = vec![Value::Float64(2.5), Value::Float64(-1.0), Value::Float64(f64::NAN)];
        v.sort();
        assert_eq!(v[0], Value::Float64(-1.0));
        assert_eq!(v[1], Value::Float64(2.5));
    }
}
