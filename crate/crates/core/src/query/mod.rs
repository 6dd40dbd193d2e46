//! A small SELECT language over tables and views.
//!
//! ```text
//! SELECT cols FROM source [WHERE pred] [GROUP BY cols] [ORDER BY key [ASC|DESC]] [LIMIT n]
//! ```
//!
//! Parsing is checked against the engine catalog, so unknown tables and
//! columns fail with the byte offset of the offending identifier.

mod lexer;
mod parser;

use std::fmt;

use crate::engine::{AggSpec, RowSet, ScanOptions, Transaction, ViewDef};
use crate::error::{Error, Result};
use crate::predicate::Predicate;
use crate::value::{Row, Value};
use crate::Engine;

pub use lexer::{tokenize, Token, TokenKind};

#[derive(Clone, Debug, PartialEq)]
pub enum SelectItem {
    Column(String),
    Agg(AggSpec),
}

impl SelectItem {
    /// Name of the output column this item produces.
    pub fn output_name(&self) -> String {
        match self {
            SelectItem::Column(c) => c.clone(),
            SelectItem::Agg(a) => a.output_name(),
        }
    }
}

impl fmt::Display for SelectItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.output_name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Star,
    Items(Vec<SelectItem>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderBy {
    pub key: SelectItem,
    pub descending: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub projection: Projection,
    pub from: String,
    pub filter: Option<Predicate>,
    pub group_by: Vec<String>,
    pub order_by: Option<OrderBy>,
    pub limit: Option<usize>,
}

impl Query {
    /// Syntax only; identifiers are not resolved.
    pub fn parse(text: &str) -> Result<Query> {
        Ok(parser::parse(text)?.query)
    }

    /// Parses and resolves every identifier against `engine`'s catalog.
    pub fn parse_checked(text: &str, engine: &Engine) -> Result<Query> {
        let parsed = parser::parse(text)?;
        parsed.check(engine)?;
        Ok(parsed.query)
    }

    pub fn is_aggregate(&self) -> bool {
        !self.group_by.is_empty()
            || matches!(&self.projection, Projection::Items(items) if items.iter().any(|i| matches!(i, SelectItem::Agg(_))))
    }

    fn aggs(&self) -> Vec<AggSpec> {
        let mut out: Vec<AggSpec> = Vec::new();
        let items = match &self.projection {
            Projection::Items(items) => items.iter().collect(),
            Projection::Star => Vec::new(),
        };
        for item in items.into_iter().chain(self.order_by.as_ref().map(|o| &o.key)) {
            if let SelectItem::Agg(a) = item {
                if !out.contains(a) {
                    out.push(a.clone());
                }
            }
        }
        out
    }

    /// Runs the query in `txn`. With `scope`, rows are read through that view
    /// of the source table instead of the source itself.
    pub fn execute(&self, txn: &Transaction, scope: Option<&ViewDef>) -> Result<RowSet> {
        if self.is_aggregate() {
            self.execute_aggregate(txn, scope)
        } else {
            let mut opts = ScanOptions::new();
            if let Some(p) = &self.filter {
                opts = opts.filter(p.clone());
            }
            if let Projection::Items(items) = &self.projection {
                let cols: Vec<String> = items.iter().map(SelectItem::output_name).collect();
                opts = opts.project(&cols.iter().map(String::as_str).collect::<Vec<_>>());
            }
            if let Some(o) = &self.order_by {
                opts = opts.order_by(&o.key.output_name(), o.descending);
            }
            if let Some(n) = self.limit {
                opts = opts.limit(n);
            }
            match scope {
                Some(v) => txn.scan_view(v, &opts),
                None => txn.scan(&self.from, &opts),
            }
        }
    }

    fn execute_aggregate(&self, txn: &Transaction, scope: Option<&ViewDef>) -> Result<RowSet> {
        let Projection::Items(items) = &self.projection else {
            return Err(Error::InvalidArgument("SELECT * cannot be grouped".into()));
        };
        let aggs = self.aggs();
        let group: Vec<&str> = self.group_by.iter().map(String::as_str).collect();
        let rs = match scope {
            Some(v) => txn.aggregate_view(v, &group, &aggs, self.filter.as_ref())?,
            None => txn.aggregate(&self.from, &group, &aggs, self.filter.as_ref())?,
        };
        let position = |name: &str| {
            rs.columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::UnknownColumn(format!("{name} is neither grouped nor aggregated")))
        };
        let mut rows = rs.rows.clone();
        if let Some(o) = &self.order_by {
            let i = position(&o.key.output_name())?;
            rows.sort_by(|a, b| {
                let ord = a.get(i).cmp(b.get(i));
                if o.descending {
                    ord.reverse()
                } else {
                    ord
                }
            });
        }
        if let Some(n) = self.limit {
            rows.truncate(n);
        }
        let cols: Vec<usize> = items.iter().map(|i| position(&i.output_name())).collect::<Result<_>>()?;
        Ok(RowSet {
            columns: items.iter().map(SelectItem::output_name).collect(),
            rows: rows.iter().map(|r| Row::new(cols.iter().map(|&c| r.get(c).clone()).collect())).collect(),
        })
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SELECT ")?;
        match &self.projection {
            Projection::Star => f.write_str("*")?,
            Projection::Items(items) => {
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
            }
        }
        write!(f, " FROM {}", self.from)?;
        if let Some(p) = &self.filter {
            write!(f, " WHERE {p}")?;
        }
        if !self.group_by.is_empty() {
            write!(f, " GROUP BY {}", self.group_by.join(", "))?;
        }
        if let Some(o) = &self.order_by {
            write!(f, " ORDER BY {}{}", o.key, if o.descending { " DESC" } else { "" })?;
        }
        if let Some(n) = self.limit {
            write!(f, " LIMIT {n}")?;
        }
        Ok(())
    }
}

/// Parses, checks and runs `text` in a fresh transaction.
pub fn run_query(engine: &Engine, text: &str) -> Result<RowSet> {
    let q = Query::parse_checked(text, engine)?;
    let txn = engine.begin()?;
    q.execute(&txn, None)
}

/// Renders a result as a left-aligned text table followed by a row count.
/// Text cells are shown bare; everything else as a literal.
pub fn render_table(rs: &RowSet) -> String {
    let cell = |v: &Value| match v {
        Value::Text(s) => s.clone(),
        v => v.to_string(),
    };
    let cells: Vec<Vec<String>> = rs.rows.iter().map(|r| r.values().iter().map(cell).collect()).collect();
    let mut widths: Vec<usize> = rs.columns.iter().map(|c| c.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |vals: &[String]| {
        let parts: Vec<String> = vals.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        parts.join(" | ").trim_end().to_string()
    };
    let mut out = line(&rs.columns);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row));
        out.push('\n');
    }
    out.push_str(&format!("({} row{})\n", rs.rows.len(), if rs.rows.len() == 1 { "" } else { "s" }));
    out
}
