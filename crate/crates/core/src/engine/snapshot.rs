//! Full-state snapshot files.
//!
//! Layout: magic `DBOSSNAP`, then a body, then a little-endian u32 CRC-32 of
//! the body. The body is `u64 lsn, u64 last_commit_ts, u64 next_txn_id`,
//! `u32 table_count`, and per table (sorted by name) a schema block followed by
//! `u64 row_count` and the rows in primary-key order; then `u32 view_count`
//! and the view definitions.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::value::Row;

use super::codec::{Decoder, Encoder};
use super::ViewDef;

pub const SNAP_MAGIC: &[u8; 8] = b"DBOSSNAP";

#[derive(Debug, Default, PartialEq)]
pub(crate) struct SnapshotImage {
    pub lsn: u64,
    pub last_commit_ts: u64,
    pub next_txn_id: u64,
    pub tables: Vec<(Schema, Vec<Row>)>,
    pub views: Vec<ViewDef>,
}

pub(crate) fn encode(img: &SnapshotImage) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(img.lsn);
    e.u64(img.last_commit_ts);
    e.u64(img.next_txn_id);
    e.u32(img.tables.len() as u32);
    for (schema, rows) in &img.tables {
        e.schema(schema);
        e.u64(rows.len() as u64);
        for r in rows {
            e.values(r.values());
        }
    }
    e.u32(img.views.len() as u32);
    for v in &img.views {
        e.view(v);
    }
    let body = e.buf;
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(SNAP_MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out
}

pub(crate) fn decode(data: &[u8]) -> Result<SnapshotImage> {
    if data.len() < 12 || &data[..8] != SNAP_MAGIC {
        return Err(Error::CorruptSnapshot("bad magic".into()));
    }
    let body = &data[8..data.len() - 4];
    let crc = u32::from_le_bytes(data[data.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(Error::CorruptSnapshot("checksum mismatch".into()));
    }
    let mut d = Decoder::new(body, Error::CorruptSnapshot);
    let mut img = SnapshotImage { lsn: d.u64()?, last_commit_ts: d.u64()?, next_txn_id: d.u64()?, ..Default::default() };
    let n = d.u32()?;
    for _ in 0..n {
        let schema = d.schema()?;
        let rows = d.u64()?;
        let mut out = Vec::new();
        for _ in 0..rows {
            out.push(Row::new(d.values()?));
        }
        img.tables.push((schema, out));
    }
    let n = d.u32()?;
    for _ in 0..n {
        img.views.push(d.view()?);
    }
    if !d.is_empty() {
        return Err(Error::CorruptSnapshot("trailing bytes".into()));
    }
    Ok(img)
}

/// Writes atomically via a temporary file and rename.
pub(crate) fn write(path: &Path, img: &SnapshotImage) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(img))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn read(path: &Path) -> Result<SnapshotImage> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predicate::Predicate;
    use crate::value::{Value, ValueKind};

    #[test]
    fn round_trips_and_detects_corruption() {
        let schema = Schema::new("t").column("k", ValueKind::Int64).primary_key(&["k"]).index(&["k"]);
        let img = SnapshotImage {
            lsn: 9,
            last_commit_ts: 4,
            next_txn_id: 12,
            tables: vec![(schema, vec![Row::new(vec![Value::Int64(1)])])],
            views: vec![ViewDef {
                view_name: "v".into(),
                base_table: "t".into(),
                predicate: Predicate::eq("k", 1i64),
                projected_columns: None,
            }],
        };
        let mut bytes = encode(&img);
        assert_eq!(decode(&bytes).unwrap(), img);
        bytes[12] ^= 1;
        assert_eq!(decode(&bytes).unwrap_err().code(), "CorruptSnapshot");
    }
}
