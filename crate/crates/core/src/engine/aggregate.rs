use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::value::{Key, Row, Value, ValueKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggFunc {
    Count,
    Sum,
    Min,
    Max,
    Avg,
    Median,
}

impl AggFunc {
    pub fn name(self) -> &'static str {
        match self {
            AggFunc::Count => "count",
            AggFunc::Sum => "sum",
            AggFunc::Min => "min",
            AggFunc::Max => "max",
            AggFunc::Avg => "avg",
            AggFunc::Median => "median",
        }
    }

    pub fn parse(name: &str) -> Option<AggFunc> {
        Some(match name.to_ascii_lowercase().as_str() {
            "count" => AggFunc::Count,
            "sum" => AggFunc::Sum,
            "min" => AggFunc::Min,
            "max" => AggFunc::Max,
            "avg" => AggFunc::Avg,
            "median" => AggFunc::Median,
            _ => return None,
        })
    }
}

/// One aggregate output column. `column == None` is only valid for `count(*)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggSpec {
    pub func: AggFunc,
    pub column: Option<String>,
}

impl AggSpec {
    pub fn count_all() -> Self {
        AggSpec { func: AggFunc::Count, column: None }
    }

    pub fn new(func: AggFunc, column: &str) -> Self {
        AggSpec { func, column: Some(column.to_string()) }
    }

    pub fn output_name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AggSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.column {
            None => write!(f, "{}(*)", self.func.name()),
            Some(c) => write!(f, "{}({c})", self.func.name()),
        }
    }
}

struct BoundAgg {
    func: AggFunc,
    column: Option<usize>,
    kind: Option<ValueKind>,
}

fn bind(schema: &Schema, spec: &AggSpec) -> Result<BoundAgg> {
    let Some(name) = &spec.column else {
        if spec.func == AggFunc::Count {
            return Ok(BoundAgg { func: spec.func, column: None, kind: None });
        }
        return Err(Error::TypeMismatch(format!("{}(*) is not defined", spec.func.name())));
    };
    let idx = schema.resolve(name)?;
    let kind = schema.columns[idx].kind;
    let numeric = matches!(kind, ValueKind::Int64 | ValueKind::Float64);
    if matches!(spec.func, AggFunc::Sum | AggFunc::Avg | AggFunc::Median) && !numeric {
        return Err(Error::TypeMismatch(format!(
            "{}({name}) needs a numeric column, {name} is {kind}",
            spec.func.name()
        )));
    }
    Ok(BoundAgg { func: spec.func, column: Some(idx), kind: Some(kind) })
}

/// Mean of the two middle values for even cardinality.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

fn finish(agg: &BoundAgg, rows: &[&Row]) -> Value {
    let Some(col) = agg.column else {
        return Value::Int64(rows.len() as i64);
    };
    let vals = rows.iter().map(|r| r.get(col)).filter(|v| !v.is_null());
    match agg.func {
        AggFunc::Count => Value::Int64(vals.count() as i64),
        AggFunc::Min => vals.min().cloned().unwrap_or(Value::Null),
        AggFunc::Max => vals.max().cloned().unwrap_or(Value::Null),
        AggFunc::Sum => {
            let vals: Vec<&Value> = vals.collect();
            if vals.is_empty() {
                Value::Null
            } else if agg.kind == Some(ValueKind::Int64) {
                Value::Int64(vals.iter().filter_map(|v| v.as_i64()).fold(0i64, i64::saturating_add))
            } else {
                Value::Float64(vals.iter().filter_map(|v| v.as_f64()).sum())
            }
        }
        AggFunc::Avg => {
            let vals: Vec<f64> = vals.filter_map(Value::as_f64).collect();
            if vals.is_empty() {
                Value::Null
            } else {
                Value::Float64(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        }
        AggFunc::Median => {
            let mut vals: Vec<f64> = vals.filter_map(Value::as_f64).collect();
            median(&mut vals).map_or(Value::Null, Value::Float64)
        }
    }
}

/// Groups `rows` by `group_by` columns (sorted by group key) and computes each
/// aggregate. With no grouping columns exactly one row is produced.
pub(crate) fn aggregate_rows<'a, I>(
    schema: &Schema,
    rows: I,
    group_by: &[String],
    aggs: &[AggSpec],
) -> Result<Vec<Row>>
where
    I: IntoIterator<Item = &'a Row>,
{
    let group_cols = schema.resolve_all(group_by)?;
    let bound: Vec<BoundAgg> = aggs.iter().map(|a| bind(schema, a)).collect::<Result<_>>()?;
    let mut groups: BTreeMap<Key, Vec<&Row>> = BTreeMap::new();
    for row in rows {
        groups.entry(row.project(&group_cols)).or_default().push(row);
    }
    if group_cols.is_empty() && groups.is_empty() {
        groups.insert(Vec::new(), Vec::new());
    }
    Ok(groups
        .into_iter()
        .map(|(key, members)| {
            let mut out = key;
            out.extend(bound.iter().map(|a| finish(a, &members)));
            Row::new(out)
        })
        .collect())
}
