use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::Result;
use crate::schema::Schema;
use crate::value::{Key, Row, SharedRow};

#[derive(Clone, Debug)]
pub(crate) struct Version {
    pub ts: u64,
    /// `None` is a tombstone.
    pub row: Option<SharedRow>,
}

#[derive(Debug)]
pub(crate) struct Index {
    pub columns: Vec<String>,
    pub cols: Vec<usize>,
    /// (index key, primary key) for every version still retained.
    pub entries: BTreeSet<(Key, Key)>,
}

/// Multi-versioned rows of one table, ordered by primary key.
#[derive(Debug)]
pub(crate) struct TableData {
    pub schema: Schema,
    pub pk: Vec<usize>,
    pub rows: BTreeMap<Key, Vec<Version>>,
    pub indexes: Vec<Index>,
}

impl TableData {
    pub fn new(schema: Schema) -> Result<Self> {
        let pk = schema.pk_indices();
        let mut t = TableData { schema: schema.clone(), pk, rows: BTreeMap::new(), indexes: Vec::new() };
        for cols in &schema.indexes {
            t.build_index(cols.clone())?;
        }
        Ok(t)
    }

    pub fn build_index(&mut self, columns: Vec<String>) -> Result<()> {
        let cols = self.schema.resolve_all(&columns)?;
        let mut entries = BTreeSet::new();
        for (key, versions) in &self.rows {
            for v in versions {
                if let Some(row) = &v.row {
                    entries.insert((row.project(&cols), key.clone()));
                }
            }
        }
        self.indexes.push(Index { columns, cols, entries });
        Ok(())
    }

    pub fn visible(&self, key: &Key, ts: u64) -> Option<&SharedRow> {
        visible_in(self.rows.get(key)?, ts)
    }

    /// Latest committed version: (commit ts, row).
    pub fn latest(&self, key: &Key) -> Option<(u64, Option<&SharedRow>)> {
        self.rows.get(key)?.last().map(|v| (v.ts, v.row.as_ref()))
    }

    pub fn apply(&mut self, key: Key, row: Option<SharedRow>, ts: u64) {
        if let Some(r) = &row {
            for idx in &mut self.indexes {
                idx.entries.insert((r.project(&idx.cols), key.clone()));
            }
        }
        self.rows.entry(key).or_default().push(Version { ts, row });
    }

    /// Drops versions no snapshot at or after `horizon` can see. Returns true
    /// when the key still carries history that a later pass could drop.
    pub fn prune(&mut self, key: &Key, horizon: u64) -> bool {
        let Some(versions) = self.rows.get_mut(key) else {
            return false;
        };
        // Keep the newest version at or below the horizon plus everything newer.
        let keep_from = match versions.iter().rposition(|v| v.ts <= horizon) {
            Some(i) => i,
            None => return versions.len() > 1,
        };
        let removed: Vec<Version> = versions.drain(..keep_from).collect();
        let dead = versions.len() == 1 && versions[0].row.is_none();
        let remaining: Vec<SharedRow> = if dead {
            Vec::new()
        } else {
            versions.iter().filter_map(|v| v.row.clone()).collect()
        };
        let pending = !dead && versions.len() > 1;
        if dead {
            self.rows.remove(key);
        }
        if !self.indexes.is_empty() && (!removed.is_empty() || dead) {
            for idx in &mut self.indexes {
                for v in &removed {
                    if let Some(r) = &v.row {
                        let ik = r.project(&idx.cols);
                        if !remaining.iter().any(|o| o.project(&idx.cols) == ik) {
                            idx.entries.remove(&(ik, key.clone()));
                        }
                    }
                }
            }
        }
        pending
    }

    /// Loads a row as a single committed version (recovery and snapshots).
    pub fn load(&mut self, row: Row, ts: u64) {
        let key = row.project(&self.pk);
        self.apply(key, Some(Arc::new(row)), ts);
    }

    /// Replaces the history of `key` with one version (log replay).
    pub fn replay(&mut self, key: Key, row: Option<Row>, ts: u64) {
        if let Some(old) = self.rows.remove(&key) {
            for idx in &mut self.indexes {
                for v in &old {
                    if let Some(r) = &v.row {
                        idx.entries.remove(&(r.project(&idx.cols), key.clone()));
                    }
                }
            }
        }
        if let Some(r) = row {
            self.apply(key, Some(Arc::new(r)), ts);
        }
    }

    pub fn latest_rows(&self) -> impl Iterator<Item = &SharedRow> {
        self.rows.values().filter_map(|vs| vs.last().and_then(|v| v.row.as_ref()))
    }
}

pub(crate) fn visible_in(versions: &[Version], ts: u64) -> Option<&SharedRow> {
    versions.iter().rev().find(|v| v.ts <= ts).and_then(|v| v.row.as_ref())
}
