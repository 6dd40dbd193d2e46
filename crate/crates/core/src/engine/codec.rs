//! Little-endian binary encoding shared by the log and snapshot files.

use crate::error::{Error, Result};
use crate::predicate::{CmpOp, Predicate};
use crate::schema::{Column, Schema};
use crate::value::{Row, Value, ValueKind};

use super::ViewDef;

#[derive(Default)]
pub(crate) struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn strs<S: AsRef<str>>(&mut self, items: &[S]) {
        self.u32(items.len() as u32);
        for s in items {
            self.str(s.as_ref());
        }
    }

    pub fn value(&mut self, v: &Value) {
        match v {
            Value::Null => self.u8(0),
            Value::Int64(i) => {
                self.u8(ValueKind::Int64.tag());
                self.i64(*i);
            }
            Value::Float64(f) => {
                self.u8(ValueKind::Float64.tag());
                self.u64(f.to_bits());
            }
            Value::Text(s) => {
                self.u8(ValueKind::Text.tag());
                self.str(s);
            }
            Value::Bytes(b) => {
                self.u8(ValueKind::Bytes.tag());
                self.bytes(b);
            }
            Value::Bool(b) => {
                self.u8(ValueKind::Bool.tag());
                self.u8(*b as u8);
            }
            Value::Timestamp(t) => {
                self.u8(ValueKind::Timestamp.tag());
                self.i64(*t);
            }
        }
    }

    pub fn values(&mut self, vs: &[Value]) {
        self.u32(vs.len() as u32);
        for v in vs {
            self.value(v);
        }
    }

    pub fn opt_row(&mut self, row: Option<&Row>) {
        match row {
            None => self.u8(0),
            Some(r) => {
                self.u8(1);
                self.values(r.values());
            }
        }
    }

    pub fn schema(&mut self, s: &Schema) {
        self.str(&s.table_name);
        self.u32(s.columns.len() as u32);
        for c in &s.columns {
            self.str(&c.name);
            self.u8(c.kind.tag());
            self.u8(c.nullable as u8);
        }
        self.strs(&s.primary_key);
        self.u32(s.indexes.len() as u32);
        for idx in &s.indexes {
            self.strs(idx);
        }
    }

    pub fn predicate(&mut self, p: &Predicate) {
        match p {
            Predicate::True => self.u8(0),
            Predicate::Cmp { column, op, value } => {
                self.u8(1);
                self.str(column);
                self.u8(match op {
                    CmpOp::Eq => 0,
                    CmpOp::Ne => 1,
                    CmpOp::Lt => 2,
                    CmpOp::Le => 3,
                    CmpOp::Gt => 4,
                    CmpOp::Ge => 5,
                });
                self.value(value);
            }
            Predicate::And(a, b) => {
                self.u8(2);
                self.predicate(a);
                self.predicate(b);
            }
            Predicate::Or(a, b) => {
                self.u8(3);
                self.predicate(a);
                self.predicate(b);
            }
            Predicate::Not(a) => {
                self.u8(4);
                self.predicate(a);
            }
        }
    }

    pub fn view(&mut self, v: &ViewDef) {
        self.str(&v.view_name);
        self.str(&v.base_table);
        self.predicate(&v.predicate);
        match &v.projected_columns {
            None => self.u8(0),
            Some(cols) => {
                self.u8(1);
                self.strs(cols);
            }
        }
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    corrupt: fn(String) -> Error,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], corrupt: fn(String) -> Error) -> Self {
        Decoder { buf, pos: 0, corrupt }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn err<T>(&self, what: &str) -> Result<T> {
        Err((self.corrupt)(format!("{what} at offset {}", self.pos)))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err("unexpected end of data");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        match String::from_utf8(b) {
            Ok(s) => Ok(s),
            Err(_) => self.err("invalid utf-8"),
        }
    }

    pub fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.u32()?;
        (0..n).map(|_| self.str()).collect()
    }

    pub fn value(&mut self) -> Result<Value> {
        let tag = self.u8()?;
        if tag == 0 {
            return Ok(Value::Null);
        }
        let Some(kind) = ValueKind::from_tag(tag) else {
            return self.err("unknown value tag");
        };
        Ok(match kind {
            ValueKind::Int64 => Value::Int64(self.i64()?),
            ValueKind::Float64 => Value::Float64(f64::from_bits(self.u64()?)),
            ValueKind::Text => Value::Text(self.str()?),
            ValueKind::Bytes => Value::Bytes(self.bytes()?),
            ValueKind::Bool => Value::Bool(self.u8()? != 0),
            ValueKind::Timestamp => Value::Timestamp(self.i64()?),
        })
    }

    pub fn values(&mut self) -> Result<Vec<Value>> {
        let n = self.u32()? as usize;
        if n > self.buf.len() - self.pos {
            return self.err("value count exceeds data");
        }
        (0..n).map(|_| self.value()).collect()
    }

    pub fn opt_row(&mut self) -> Result<Option<Row>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(Row::new(self.values()?))),
            _ => self.err("bad row flag"),
        }
    }

    pub fn schema(&mut self) -> Result<Schema> {
        let table_name = self.str()?;
        let n = self.u32()?;
        let mut columns = Vec::new();
        for _ in 0..n {
            let name = self.str()?;
            let Some(kind) = ValueKind::from_tag(self.u8()?) else {
                return self.err("bad column kind");
            };
            let nullable = self.u8()? != 0;
            columns.push(Column { name, kind, nullable });
        }
        let primary_key = self.strs()?;
        let n = self.u32()?;
        let indexes = (0..n).map(|_| self.strs()).collect::<Result<_>>()?;
        Ok(Schema { table_name, columns, primary_key, indexes })
    }

    pub fn predicate(&mut self) -> Result<Predicate> {
        Ok(match self.u8()? {
            0 => Predicate::True,
            1 => {
                let column = self.str()?;
                let op = match self.u8()? {
                    0 => CmpOp::Eq,
                    1 => CmpOp::Ne,
                    2 => CmpOp::Lt,
                    3 => CmpOp::Le,
                    4 => CmpOp::Gt,
                    5 => CmpOp::Ge,
                    _ => return self.err("bad comparison operator"),
                };
                let value = self.value()?;
                Predicate::Cmp { column, op, value }
            }
            2 => Predicate::And(Box::new(self.predicate()?), Box::new(self.predicate()?)),
            3 => Predicate::Or(Box::new(self.predicate()?), Box::new(self.predicate()?)),
            4 => Predicate::Not(Box::new(self.predicate()?)),
            _ => return self.err("bad predicate tag"),
        })
    }

    pub fn view(&mut self) -> Result<ViewDef> {
        let view_name = self.str()?;
        let base_table = self.str()?;
        let predicate = self.predicate()?;
        let projected_columns = match self.u8()? {
            0 => None,
            1 => Some(self.strs()?),
            _ => return self.err("bad projection flag"),
        };
        Ok(ViewDef { view_name, base_table, predicate, projected_columns })
    }
}
