use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::value::{Key, Row, Value, ValueKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub kind: ValueKind,
    pub nullable: bool,
}

impl Column {
    pub fn new(name: &str, kind: ValueKind, nullable: bool) -> Self {
        Column { name: name.to_string(), kind, nullable }
    }
}

/// Table definition: ordered columns, a primary key and secondary indexes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    pub table_name: String,
    pub columns: Vec<Column>,
    pub primary_key: Vec<String>,
    pub indexes: Vec<Vec<String>>,
}

impl Schema {
    pub fn new(table_name: &str) -> Self {
        Schema {
            table_name: table_name.to_string(),
            columns: Vec::new(),
            primary_key: Vec::new(),
            indexes: Vec::new(),
        }
    }

    pub fn column(mut self, name: &str, kind: ValueKind) -> Self {
        self.columns.push(Column::new(name, kind, false));
        self
    }

    pub fn nullable(mut self, name: &str, kind: ValueKind) -> Self {
        self.columns.push(Column::new(name, kind, true));
        self
    }

    pub fn primary_key(mut self, cols: &[&str]) -> Self {
        self.primary_key = cols.iter().map(|c| c.to_string()).collect();
        self
    }

    pub fn index(mut self, cols: &[&str]) -> Self {
        self.indexes.push(cols.iter().map(|c| c.to_string()).collect());
        self
    }

    pub fn arity(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn resolve(&self, name: &str) -> Result<usize> {
        self.column_index(name)
            .ok_or_else(|| Error::UnknownColumn(format!("{}.{}", self.table_name, name)))
    }

    pub fn resolve_all<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.resolve(n.as_ref())).collect()
    }

    pub fn pk_indices(&self) -> Vec<usize> {
        self.primary_key.iter().filter_map(|c| self.column_index(c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidSchema(format!("{}: {m}", self.table_name)));
        if self.table_name.is_empty() {
            return invalid("empty table name".into());
        }
        if self.columns.is_empty() {
            return invalid("no columns".into());
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return invalid(format!("duplicate column {}", c.name));
            }
        }
        if self.primary_key.is_empty() {
            return invalid("empty primary key".into());
        }
        let mut pk_seen = HashSet::new();
        for k in &self.primary_key {
            let Some(idx) = self.column_index(k) else {
                return invalid(format!("primary key column {k} does not exist"));
            };
            if self.columns[idx].nullable {
                return invalid(format!("primary key column {k} is nullable"));
            }
            if !pk_seen.insert(k) {
                return invalid(format!("primary key column {k} repeated"));
            }
        }
        for index in &self.indexes {
            if index.is_empty() {
                return invalid("empty index".into());
            }
            for c in index {
                if self.column_index(c).is_none() {
                    return invalid(format!("index column {c} does not exist"));
                }
            }
        }
        Ok(())
    }

    /// Checks arity, kinds, nullability and non-null primary key.
    pub fn check_row(&self, row: &Row) -> Result<()> {
        if row.len() != self.arity() {
            return Err(Error::TypeMismatch(format!(
                "{}: row has {} values, schema has {} columns",
                self.table_name,
                row.len(),
                self.arity()
            )));
        }
        for (col, v) in self.columns.iter().zip(row.values()) {
            match v.kind() {
                None if !col.nullable => {
                    return Err(Error::TypeMismatch(format!(
                        "{}.{} is not nullable",
                        self.table_name, col.name
                    )))
                }
                Some(k) if k != col.kind => {
                    return Err(Error::TypeMismatch(format!(
                        "{}.{} expects {}, got {}",
                        self.table_name, col.name, col.kind, k
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn key_of(&self, row: &Row) -> Key {
        row.project(&self.pk_indices())
    }

    pub fn check_key(&self, key: &[Value]) -> Result<()> {
        let pk = self.pk_indices();
        if key.len() != pk.len() {
            return Err(Error::TypeMismatch(format!(
                "{}: key has {} values, primary key has {}",
                self.table_name,
                key.len(),
                pk.len()
            )));
        }
        for (v, &i) in key.iter().zip(&pk) {
            if v.kind() != Some(self.columns[i].kind) {
                return Err(Error::TypeMismatch(format!(
                    "{}: key column {} expects {}",
                    self.table_name, self.columns[i].name, self.columns[i].kind
                )));
            }
        }
        Ok(())
    }
}
