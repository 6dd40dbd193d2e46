//! Write-ahead log.
//!
//! File layout: the 8-byte magic `DBOSWAL1`, then a sequence of records
//! `[u32 len][u64 lsn][payload; len bytes][u32 crc]`, all little-endian. The
//! CRC-32 (IEEE) covers the lsn bytes followed by the payload. A reader stops
//! at the first record that is short or fails its checksum; everything from
//! the last commit (or DDL) boundary onwards is discarded.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::value::{Key, Row};

use super::codec::{Decoder, Encoder};
use super::ViewDef;

pub const WAL_MAGIC: &[u8; 8] = b"DBOSWAL1";

const TAG_WRITE: u8 = 1;
const TAG_COMMIT: u8 = 2;
const TAG_CREATE_TABLE: u8 = 3;
const TAG_CREATE_INDEX: u8 = 4;
const TAG_CREATE_VIEW: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Insert,
    Update,
    Delete,
}

impl OpKind {
    fn tag(self) -> u8 {
        match self {
            OpKind::Insert => 1,
            OpKind::Update => 2,
            OpKind::Delete => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalEntry {
    pub table: String,
    pub op: OpKind,
    pub key: Key,
    pub before: Option<Row>,
    pub after: Option<Row>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WalPayload {
    /// Every write of one transaction, in key order.
    Write { txn_id: u64, entries: Vec<WalEntry> },
    /// Always the last record of a transaction.
    Commit { txn_id: u64, commit_ts: u64 },
    CreateTable(Schema),
    CreateIndex { table: String, columns: Vec<String> },
    CreateView(ViewDef),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalRecord {
    pub lsn: u64,
    pub payload: WalPayload,
}

impl WalRecord {
    /// Whether a reader may safely stop right after this record.
    pub fn is_boundary(&self) -> bool {
        !matches!(self.payload, WalPayload::Write { .. })
    }
}

fn encode_payload(p: &WalPayload) -> Vec<u8> {
    let mut e = Encoder::new();
    match p {
        WalPayload::Write { txn_id, entries } => {
            e.u8(TAG_WRITE);
            e.u64(*txn_id);
            e.u32(entries.len() as u32);
            for w in entries {
                e.str(&w.table);
                e.u8(w.op.tag());
                e.values(&w.key);
                e.opt_row(w.before.as_ref());
                e.opt_row(w.after.as_ref());
            }
        }
        WalPayload::Commit { txn_id, commit_ts } => {
            e.u8(TAG_COMMIT);
            e.u64(*txn_id);
            e.u64(*commit_ts);
        }
        WalPayload::CreateTable(s) => {
            e.u8(TAG_CREATE_TABLE);
            e.schema(s);
        }
        WalPayload::CreateIndex { table, columns } => {
            e.u8(TAG_CREATE_INDEX);
            e.str(table);
            e.strs(columns);
        }
        WalPayload::CreateView(v) => {
            e.u8(TAG_CREATE_VIEW);
            e.view(v);
        }
    }
    e.buf
}

fn decode_payload(buf: &[u8]) -> Result<WalPayload> {
    let mut d = Decoder::new(buf, Error::CorruptWal);
    let payload = match d.u8()? {
        TAG_WRITE => {
            let txn_id = d.u64()?;
            let n = d.u32()?;
            let mut entries = Vec::new();
            for _ in 0..n {
                let table = d.str()?;
                let op = match d.u8()? {
                    1 => OpKind::Insert,
                    2 => OpKind::Update,
                    3 => OpKind::Delete,
                    t => return Err(Error::CorruptWal(format!("bad op kind {t}"))),
                };
                let key = d.values()?;
                let before = d.opt_row()?;
                let after = d.opt_row()?;
                entries.push(WalEntry { table, op, key, before, after });
            }
            WalPayload::Write { txn_id, entries }
        }
        TAG_COMMIT => WalPayload::Commit { txn_id: d.u64()?, commit_ts: d.u64()? },
        TAG_CREATE_TABLE => WalPayload::CreateTable(d.schema()?),
        TAG_CREATE_INDEX => WalPayload::CreateIndex { table: d.str()?, columns: d.strs()? },
        TAG_CREATE_VIEW => WalPayload::CreateView(d.view()?),
        t => return Err(Error::CorruptWal(format!("bad record tag {t}"))),
    };
    if !d.is_empty() {
        return Err(Error::CorruptWal("trailing bytes in record".into()));
    }
    Ok(payload)
}

/// Encodes a full framed record.
pub fn encode_record(rec: &WalRecord) -> Vec<u8> {
    let payload = encode_payload(&rec.payload);
    let mut out = Vec::with_capacity(payload.len() + 16);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&rec.lsn.to_le_bytes());
    out.extend_from_slice(&payload);
    let mut h = crc32fast::Hasher::new();
    h.update(&rec.lsn.to_le_bytes());
    h.update(&payload);
    out.extend_from_slice(&h.finalize().to_le_bytes());
    out
}

/// Result of reading a log file.
#[derive(Debug, Default)]
pub struct WalScan {
    /// Records up to and including the last boundary record.
    pub records: Vec<WalRecord>,
    /// File length covering exactly `records` (including the magic).
    pub valid_len: u64,
    /// Well-formed records after the last boundary (an unfinished transaction).
    pub dropped_records: usize,
    /// Bytes after `valid_len` that were discarded.
    pub dropped_bytes: u64,
    /// Why reading stopped early, if it did.
    pub stop_reason: Option<String>,
}

pub fn scan_bytes(data: &[u8]) -> Result<WalScan> {
    if data.len() < WAL_MAGIC.len() {
        // A torn header means nothing was ever committed.
        if WAL_MAGIC.starts_with(data) {
            return Ok(WalScan {
                dropped_bytes: data.len() as u64,
                stop_reason: (!data.is_empty()).then(|| "torn header".to_string()),
                ..WalScan::default()
            });
        }
        return Err(Error::CorruptWal("bad magic".into()));
    }
    if &data[..8] != WAL_MAGIC {
        return Err(Error::CorruptWal("bad magic".into()));
    }
    let mut scan = WalScan { valid_len: 8, ..WalScan::default() };
    let mut pending: Vec<WalRecord> = Vec::new();
    let mut pos = 8usize;
    let mut last_lsn = 0u64;
    while pos < data.len() {
        let rest = &data[pos..];
        if rest.len() < 16 {
            scan.stop_reason = Some(format!("torn record header at {pos}"));
            break;
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        if rest.len() < 16 + len {
            scan.stop_reason = Some(format!("torn record at {pos}"));
            break;
        }
        let lsn_bytes = &rest[4..12];
        let payload = &rest[12..12 + len];
        let crc = u32::from_le_bytes(rest[12 + len..16 + len].try_into().unwrap());
        let mut h = crc32fast::Hasher::new();
        h.update(lsn_bytes);
        h.update(payload);
        if h.finalize() != crc {
            scan.stop_reason = Some(format!("checksum mismatch at {pos}"));
            break;
        }
        let lsn = u64::from_le_bytes(lsn_bytes.try_into().unwrap());
        if lsn <= last_lsn {
            scan.stop_reason = Some(format!("non-increasing lsn at {pos}"));
            break;
        }
        let payload = match decode_payload(payload) {
            Ok(p) => p,
            Err(e) => {
                scan.stop_reason = Some(e.to_string());
                break;
            }
        };
        last_lsn = lsn;
        pos += 16 + len;
        let rec = WalRecord { lsn, payload };
        let boundary = rec.is_boundary();
        pending.push(rec);
        if boundary {
            scan.records.append(&mut pending);
            scan.valid_len = pos as u64;
        }
    }
    scan.dropped_records = pending.len();
    scan.dropped_bytes = data.len() as u64 - scan.valid_len;
    Ok(scan)
}

pub fn scan_file(path: &Path) -> Result<WalScan> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    scan_bytes(&data)
}

/// Append side of the log.
pub(crate) struct WalWriter {
    path: PathBuf,
    out: BufWriter<File>,
    sync: bool,
}

impl WalWriter {
    /// Opens `path` for appending, creating it with a header if absent, and
    /// truncating it to `valid_len` when given.
    pub fn open(path: &Path, valid_len: Option<u64>, sync: bool) -> Result<Self> {
        let mut file = OpenOptions::new().create(true).read(true).write(true).truncate(false).open(path)?;
        let len = file.metadata()?.len();
        match valid_len {
            Some(valid) if valid >= 8 => {
                if valid < len {
                    file.set_len(valid)?;
                }
            }
            _ => {
                if len < 8 || valid_len.is_some() {
                    file.set_len(0)?;
                    file.write_all(WAL_MAGIC)?;
                    file.sync_all()?;
                }
            }
        }
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0))?;
        Ok(WalWriter { path: path.to_path_buf(), out: BufWriter::new(file), sync })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, rec: &WalRecord) -> Result<()> {
        self.out.write_all(&encode_record(rec))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        if self.sync {
            self.out.get_ref().sync_data()?;
        }
        Ok(())
    }
}
