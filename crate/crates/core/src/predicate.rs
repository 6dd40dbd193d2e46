//! A closed predicate language: column-vs-literal comparisons joined by
//! boolean connectives.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::value::{Row, Value, ValueKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    True,
    Cmp { column: String, op: CmpOp, value: Value },
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    pub fn cmp(column: &str, op: CmpOp, value: impl Into<Value>) -> Self {
        Predicate::Cmp { column: column.to_string(), op, value: value.into() }
    }

    pub fn eq(column: &str, value: impl Into<Value>) -> Self {
        Self::cmp(column, CmpOp::Eq, value)
    }

    pub fn and(self, other: Predicate) -> Self {
        match (self, other) {
            (Predicate::True, p) | (p, Predicate::True) => p,
            (a, b) => Predicate::And(Box::new(a), Box::new(b)),
        }
    }

    pub fn or(self, other: Predicate) -> Self {
        Predicate::Or(Box::new(self), Box::new(other))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Predicate::Not(Box::new(self))
    }

    pub fn columns(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_columns(&mut out);
        out
    }

    fn collect_columns<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Predicate::True => {}
            Predicate::Cmp { column, .. } => out.push(column),
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                a.collect_columns(out);
                b.collect_columns(out);
            }
            Predicate::Not(p) => p.collect_columns(out),
        }
    }

    /// Resolves column names against `schema` and coerces numeric literals
    /// to the column kind (integer literals against timestamp or float
    /// columns).
    pub fn bind(&self, schema: &Schema) -> Result<BoundPredicate> {
        Ok(match self {
            Predicate::True => BoundPredicate::True,
            Predicate::Cmp { column, op, value } => {
                let idx = schema.resolve(column)?;
                let kind = schema.columns[idx].kind;
                let value = coerce(value, kind).ok_or_else(|| {
                    Error::TypeMismatch(format!(
                        "{}.{} is {}, literal {} is not",
                        schema.table_name, column, kind, value
                    ))
                })?;
                BoundPredicate::Cmp { column: idx, op: *op, value }
            }
            Predicate::And(a, b) => {
                BoundPredicate::And(Box::new(a.bind(schema)?), Box::new(b.bind(schema)?))
            }
            Predicate::Or(a, b) => {
                BoundPredicate::Or(Box::new(a.bind(schema)?), Box::new(b.bind(schema)?))
            }
            Predicate::Not(p) => BoundPredicate::Not(Box::new(p.bind(schema)?)),
        })
    }
}

fn coerce(value: &Value, kind: ValueKind) -> Option<Value> {
    match (value, kind) {
        (Value::Null, _) => Some(Value::Null),
        (v, k) if v.kind() == Some(k) => Some(v.clone()),
        (Value::Int64(i), ValueKind::Timestamp) => Some(Value::Timestamp(*i)),
        (Value::Int64(i), ValueKind::Float64) => Some(Value::Float64(*i as f64)),
        _ => None,
    }
}

fn precedence(p: &Predicate) -> u8 {
    match p {
        Predicate::Or(..) => 1,
        Predicate::And(..) => 2,
        Predicate::Not(..) => 3,
        Predicate::True | Predicate::Cmp { .. } => 4,
    }
}

fn write_operand(f: &mut fmt::Formatter<'_>, p: &Predicate, min: u8) -> fmt::Result {
    if precedence(p) < min {
        write!(f, "({p})")
    } else {
        write!(f, "{p}")
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::True => f.write_str("true"),
            Predicate::Cmp { column, op, value } => write!(f, "{column} {} {value}", op.symbol()),
            Predicate::And(a, b) => {
                write_operand(f, a, 2)?;
                f.write_str(" AND ")?;
                write_operand(f, b, 3)
            }
            Predicate::Or(a, b) => {
                write_operand(f, a, 1)?;
                f.write_str(" OR ")?;
                write_operand(f, b, 2)
            }
            Predicate::Not(p) => {
                f.write_str("NOT ")?;
                write_operand(f, p, 3)
            }
        }
    }
}

/// A predicate resolved against one schema; evaluation cannot fail.
#[derive(Clone, Debug, PartialEq)]
pub enum BoundPredicate {
    True,
    Cmp { column: usize, op: CmpOp, value: Value },
    And(Box<BoundPredicate>, Box<BoundPredicate>),
    Or(Box<BoundPredicate>, Box<BoundPredicate>),
    Not(Box<BoundPredicate>),
}

impl BoundPredicate {
    pub fn eval(&self, row: &Row) -> bool {
        match self {
            BoundPredicate::True => true,
            BoundPredicate::Cmp { column, op, value } => {
                // Kinds were unified at bind time, so the comparison is total.
                op.holds(row.get(*column).cmp(value))
            }
            BoundPredicate::And(a, b) => a.eval(row) && b.eval(row),
            BoundPredicate::Or(a, b) => a.eval(row) || b.eval(row),
            BoundPredicate::Not(p) => !p.eval(row),
        }
    }

    /// Equality constraints implied by the top-level conjunction.
    pub fn equalities(&self) -> Vec<(usize, &Value)> {
        let mut out = Vec::new();
        self.collect_equalities(&mut out);
        out
    }

    fn collect_equalities<'a>(&'a self, out: &mut Vec<(usize, &'a Value)>) {
        match self {
            BoundPredicate::Cmp { column, op: CmpOp::Eq, value } => out.push((*column, value)),
            BoundPredicate::And(a, b) => {
                a.collect_equalities(out);
                b.collect_equalities(out);
            }
            _ => {}
        }
    }

    /// Ordering comparisons (`<`, `<=`, `>`, `>=`) on `column` implied by the
    /// top-level conjunction.
    pub fn ranges(&self, column: usize) -> Vec<(CmpOp, &Value)> {
        let mut out = Vec::new();
        self.collect_ranges(column, &mut out);
        out
    }

    fn collect_ranges<'a>(&'a self, col: usize, out: &mut Vec<(CmpOp, &'a Value)>) {
        match self {
            BoundPredicate::Cmp { column, op: op @ (CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge), value } if *column == col => {
                out.push((*op, value))
            }
            BoundPredicate::And(a, b) => {
                a.collect_ranges(col, out);
                b.collect_ranges(col, out);
            }
            _ => {}
        }
    }

    pub fn and(self, other: BoundPredicate) -> BoundPredicate {
        match (self, other) {
            (BoundPredicate::True, p) | (p, BoundPredicate::True) => p,
            (a, b) => BoundPredicate::And(Box::new(a), Box::new(b)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new("files")
            .column("id", ValueKind::Int64)
            .column("size", ValueKind::Int64)
            .nullable("owner", ValueKind::Text)
            .column("atime", ValueKind::Timestamp)
            .primary_key(&["id"])
    }

    #[test]
    fn evaluates_connectives() {
        let s = schema();
        let row = Row::new(vec![1i64.into(), 500i64.into(), "ann".into(), Value::Timestamp(10)]);
        let p = Predicate::cmp("size", CmpOp::Gt, 100i64)
            .and(Predicate::eq("owner", "ann"))
            .or(Predicate::eq("id", 9i64).not());
        assert!(p.bind(&s).unwrap().eval(&row));
        let q = Predicate::cmp("atime", CmpOp::Lt, 5i64);
        assert!(!q.bind(&s).unwrap().eval(&row));
    }

    #[test]
    fn null_compares_below_everything() {
        let s = schema();
        let row = Row::new(vec![1i64.into(), 5i64.into(), Value::Null, Value::Timestamp(0)]);
        assert!(Predicate::cmp("owner", CmpOp::Lt, "a").bind(&s).unwrap().eval(&row));
        assert!(Predicate::eq("owner", Value::Null).bind(&s).unwrap().eval(&row));
    }

    #[test]
    fn binding_rejects_bad_columns_and_kinds() {
        let s = schema();
        assert_eq!(Predicate::eq("nope", 1i64).bind(&s).unwrap_err().code(), "UnknownColumn");
        assert_eq!(Predicate::eq("owner", 1i64).bind(&s).unwrap_err().code(), "TypeMismatch");
    }

    #[test]
    fn display_parenthesizes_by_precedence() {
        let p = Predicate::eq("a", 1i64).or(Predicate::eq("b", 2i64)).and(Predicate::eq("c", 3i64));
        assert_eq!(p.to_string(), "(a = 1 OR b = 2) AND c = 3");
        let q = Predicate::eq("a", 1i64).and(Predicate::eq("b", 2i64).not());
        assert_eq!(q.to_string(), "a = 1 AND NOT b = 2");
    }
}
