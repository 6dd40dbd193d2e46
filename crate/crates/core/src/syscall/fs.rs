//! Files as tables: `inodes` for metadata, `dentries` for the hierarchy and
//! `blobs` for content in fixed-size chunks. All operations are positional.

use std::collections::VecDeque;

use crate::engine::{ScanOptions, Transaction};
use crate::error::{Error, Result};
use crate::os::schema::{col, BLOBS, CHUNK_SIZE, DENTRIES, INODES, PERMISSIONS};
use crate::predicate::Predicate;
use crate::provenance::{check_purpose, ObjectRef, ProvOp, PurposeDecision};
use crate::value::{Row, Value};

use super::{Kernel, Rights, SyscallContext};

/// Metadata of one inode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InodeInfo {
    pub inode_id: u64,
    pub container_id: u64,
    pub owner: String,
    pub size: u64,
    pub perms: u16,
    pub atime: i64,
    pub mtime: i64,
    pub ctime: i64,
    pub is_dir: bool,
}

impl InodeInfo {
    fn from_row(r: &Row) -> Self {
        use col::inodes::*;
        InodeInfo {
            inode_id: r.get(INODE_ID).as_u64().unwrap_or(0),
            container_id: r.get(CONTAINER_ID).as_u64().unwrap_or(0),
            owner: r.get(OWNER).as_str().unwrap_or_default().to_string(),
            size: r.get(SIZE).as_u64().unwrap_or(0),
            perms: r.get(PERMS).as_i64().unwrap_or(0) as u16,
            atime: r.get(ATIME).as_i64().unwrap_or(0),
            mtime: r.get(MTIME).as_i64().unwrap_or(0),
            ctime: r.get(CTIME).as_i64().unwrap_or(0),
            is_dir: r.get(KIND).as_str() == Some("dir"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirEntryInfo {
    pub name: String,
    pub inode_id: u64,
    pub is_dir: bool,
}

fn is_dir(r: &Row) -> bool {
    r.get(col::inodes::KIND).as_str() == Some("dir")
}

/// Splits a path into (parent components, final name). The root path has
/// no final name.
fn split_path(path: &str) -> (Vec<&str>, Option<&str>) {
    let mut parts: Vec<&str> = path.split('/').filter(|p| !p.is_empty() && *p != ".").collect();
    let last = parts.pop();
    match last {
        Some("..") => {
            parts.push("..");
            (parts, None)
        }
        other => (parts, other),
    }
}

impl Kernel {
    /// Walks `components` from the container root. `..` may not climb above it.
    fn walk(&self, txn: &Transaction, ctx: &SyscallContext, path: &str, components: &[&str]) -> Result<Row> {
        let root = self.container_root(txn, ctx)?;
        let load = |id: u64| -> Result<Row> {
            self.get_scoped(txn, ctx, INODES, &[id.into()])?.ok_or_else(|| Error::NotFound(path.to_string()))
        };
        let mut stack = vec![load(root)?];
        for c in components {
            if *c == ".." {
                if stack.len() == 1 {
                    return Err(Error::PathEscapesContainer(path.to_string()));
                }
                stack.pop();
                continue;
            }
            let cur = stack.last().unwrap();
            if !is_dir(cur) {
                return Err(Error::NotDirectory(path.to_string()));
            }
            let child = self.lookup(txn, ctx, cur.get(0).as_u64().unwrap_or(0), c)?;
            stack.push(load(child.ok_or_else(|| Error::NotFound(path.to_string()))?)?);
        }
        Ok(stack.pop().unwrap())
    }

    fn lookup(&self, txn: &Transaction, ctx: &SyscallContext, parent: u64, name: &str) -> Result<Option<u64>> {
        Ok(self
            .get_scoped(txn, ctx, DENTRIES, &[parent.into(), name.into()])?
            .and_then(|r| r.get(col::dentries::CHILD_INODE).as_u64()))
    }

    fn resolve(&self, txn: &Transaction, ctx: &SyscallContext, path: &str) -> Result<Row> {
        let (mut parts, last) = split_path(path);
        parts.extend(last);
        self.walk(txn, ctx, path, &parts)
    }

    /// Resolves the parent directory of `path` and returns it with the final name.
    fn resolve_parent<'p>(&self, txn: &Transaction, ctx: &SyscallContext, path: &'p str) -> Result<(Row, &'p str)> {
        let (parts, last) = split_path(path);
        let parent = self.walk(txn, ctx, path, &parts)?;
        let Some(name) = last else {
            return Err(Error::AlreadyExists(path.to_string()));
        };
        if !is_dir(&parent) {
            return Err(Error::NotDirectory(path.to_string()));
        }
        Ok((parent, name))
    }

    fn resolve_file(&self, txn: &Transaction, ctx: &SyscallContext, path: &str) -> Result<Row> {
        let row = self.resolve(txn, ctx, path)?;
        if is_dir(&row) {
            return Err(Error::IsDirectory(path.to_string()));
        }
        Ok(row)
    }

    fn check_readable(&self, txn: &Transaction, ctx: &SyscallContext, obj: ObjectRef) -> Result<()> {
        self.check_rights(txn, ctx, obj, Rights::READ)?;
        if check_purpose(txn, &ctx.purpose, obj)? == PurposeDecision::Deny {
            return Err(Error::PermissionDenied(format!("purpose {:?} not allowed on {obj}", ctx.purpose)));
        }
        Ok(())
    }

    fn make_node(&self, txn: &mut Transaction, ctx: &SyscallContext, path: &str, dir: bool) -> Result<u64> {
        let (parent, name) = self.resolve_parent(txn, ctx, path)?;
        let parent_id = parent.get(col::inodes::INODE_ID).as_u64().unwrap_or(0);
        self.check_rights(txn, ctx, ObjectRef::file(parent_id), Rights::WRITE)?;
        if self.lookup(txn, ctx, parent_id, name)?.is_some() {
            return Err(Error::AlreadyExists(path.to_string()));
        }
        let id = self.next_inode();
        let now = self.now_us();
        let mut row = crate::os::schema::dir_inode_row(id, ctx.container_id, &ctx.principal, now);
        if !dir {
            row.0[col::inodes::PERMS] = 0o644i64.into();
            row.0[col::inodes::KIND] = "file".into();
        }
        txn.insert(INODES, row)?;
        txn.insert(DENTRIES, Row::new(vec![parent_id.into(), name.into(), id.into(), ctx.container_id.into()]))?;
        let obj = ObjectRef::file(id);
        self.set_rights(txn, &ctx.principal, obj, Rights::ALL)?;
        self.record(txn, ctx, ProvOp::Create, None, Some(obj))?;
        Ok(id)
    }

    /// Creates an empty file and returns its inode id.
    pub fn file_create(&self, ctx: &SyscallContext, path: &str) -> Result<u64> {
        self.syscall(|txn| self.make_node(txn, ctx, path, false))
    }

    pub fn file_mkdir(&self, ctx: &SyscallContext, path: &str) -> Result<u64> {
        self.syscall(|txn| self.make_node(txn, ctx, path, true))
    }

    pub fn file_stat(&self, ctx: &SyscallContext, path: &str) -> Result<InodeInfo> {
        let txn = self.engine().begin()?;
        Ok(InodeInfo::from_row(&self.resolve(&txn, ctx, path)?))
    }

    fn read_range(&self, txn: &Transaction, inode: u64, size: u64, offset: u64, len: u64) -> Result<Vec<u8>> {
        let end = size.min(offset.saturating_add(len));
        if offset >= end {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity((end - offset) as usize);
        let chunk = CHUNK_SIZE as u64;
        for c in offset / chunk..=(end - 1) / chunk {
            let row = txn.get(BLOBS, &[inode.into(), c.into()])?;
            let data = row.as_ref().and_then(|r| r.get(col::blobs::DATA).as_bytes()).unwrap_or(&[]);
            let base = c * chunk;
            let lo = offset.max(base) - base;
            let hi = end.min(base + chunk) - base;
            let mut piece = data[lo.min(data.len() as u64) as usize..hi.min(data.len() as u64) as usize].to_vec();
            piece.resize((hi - lo) as usize, 0);
            out.extend_from_slice(&piece);
        }
        Ok(out)
    }

    /// Writes `data` at `offset` and returns the number of bytes written.
    /// Writing past the end zero-fills the gap.
    pub fn file_write(&self, ctx: &SyscallContext, path: &str, offset: u64, data: &[u8]) -> Result<usize> {
        self.syscall(|txn| {
            let mut inode = self.resolve_file(txn, ctx, path)?;
            let id = inode.get(col::inodes::INODE_ID).as_u64().unwrap_or(0);
            self.check_rights(txn, ctx, ObjectRef::file(id), Rights::WRITE)?;
            if data.is_empty() {
                return Ok(0);
            }
            self.write_at(txn, &mut inode, offset, data)?;
            self.record(txn, ctx, ProvOp::Mutate, None, Some(ObjectRef::file(id)))?;
            Ok(data.len())
        })
    }

    fn write_at(&self, txn: &mut Transaction, inode: &mut Row, offset: u64, data: &[u8]) -> Result<()> {
        let id = inode.get(col::inodes::INODE_ID).as_u64().unwrap_or(0);
        let container = inode.get(col::inodes::CONTAINER_ID).clone();
        let old_size = inode.get(col::inodes::SIZE).as_u64().unwrap_or(0);
        let end = offset + data.len() as u64;
        let new_size = old_size.max(end);
        let chunk = CHUNK_SIZE as u64;
        for c in old_size.min(offset) / chunk..=(end - 1) / chunk {
            let base = c * chunk;
            let key = [id.into(), c.into()];
            let mut buf = txn
                .get(BLOBS, &key)?
                .and_then(|r| r.get(col::blobs::DATA).as_bytes().map(<[u8]>::to_vec))
                .unwrap_or_default();
            buf.resize(chunk.min(new_size - base) as usize, 0);
            let lo = offset.max(base);
            let hi = end.min(base + chunk);
            if lo < hi {
                buf[(lo - base) as usize..(hi - base) as usize]
                    .copy_from_slice(&data[(lo - offset) as usize..(hi - offset) as usize]);
            }
            txn.upsert(BLOBS, Row::new(vec![id.into(), c.into(), buf.into(), container.clone()]))?;
        }
        let now = self.now_us();
        inode.0[col::inodes::SIZE] = new_size.into();
        inode.0[col::inodes::MTIME] = Value::Timestamp(now);
        txn.update(INODES, &[id.into()], inode.clone())
    }

    fn touch_atime(&self, txn: &mut Transaction, inode: &mut Row) -> Result<()> {
        let id = inode.get(col::inodes::INODE_ID).clone();
        inode.0[col::inodes::ATIME] = Value::Timestamp(self.now_us());
        txn.update(INODES, &[id], inode.clone())
    }

    /// Reads up to `len` bytes at `offset`; short at end of file.
    pub fn file_read(&self, ctx: &SyscallContext, path: &str, offset: u64, len: u64) -> Result<Vec<u8>> {
        self.syscall(|txn| {
            let mut inode = self.resolve_file(txn, ctx, path)?;
            let id = inode.get(col::inodes::INODE_ID).as_u64().unwrap_or(0);
            self.check_readable(txn, ctx, ObjectRef::file(id))?;
            let size = inode.get(col::inodes::SIZE).as_u64().unwrap_or(0);
            let out = self.read_range(txn, id, size, offset, len)?;
            self.touch_atime(txn, &mut inode)?;
            self.record(txn, ctx, ProvOp::Read, Some(ObjectRef::file(id)), None)?;
            Ok(out)
        })
    }

    /// Entries of a directory in name order.
    pub fn file_list(&self, ctx: &SyscallContext, path: &str) -> Result<Vec<DirEntryInfo>> {
        let txn = self.engine().begin()?;
        let dir = self.resolve(&txn, ctx, path)?;
        if !is_dir(&dir) {
            return Err(Error::NotDirectory(path.to_string()));
        }
        let id = dir.get(col::inodes::INODE_ID).as_u64().unwrap_or(0);
        self.check_rights(&txn, ctx, ObjectRef::file(id), Rights::READ)?;
        self.children(&txn, ctx, id)?
            .into_iter()
            .map(|(name, child)| {
                let row = self.get_scoped(&txn, ctx, INODES, &[child.into()])?.ok_or_else(|| Error::NotFound(name.clone()))?;
                Ok(DirEntryInfo { name, inode_id: child, is_dir: is_dir(&row) })
            })
            .collect()
    }

    fn children(&self, txn: &Transaction, ctx: &SyscallContext, dir: u64) -> Result<Vec<(String, u64)>> {
        let view = self.view_for(txn, ctx, DENTRIES)?;
        let opts = ScanOptions::new().filter(Predicate::eq("parent_inode", dir));
        Ok(txn
            .scan_view(&view, &opts)?
            .rows
            .iter()
            .map(|r| {
                (
                    r.get(col::dentries::NAME).as_str().unwrap_or_default().to_string(),
                    r.get(col::dentries::CHILD_INODE).as_u64().unwrap_or(0),
                )
            })
            .collect())
    }

    /// Removes a file or an empty directory.
    pub fn file_unlink(&self, ctx: &SyscallContext, path: &str) -> Result<()> {
        self.syscall(|txn| {
            let (parent, name) = match self.resolve_parent(txn, ctx, path) {
                Err(Error::AlreadyExists(_)) => return Err(Error::InvalidArgument(format!("cannot unlink {path}"))),
                other => other?,
            };
            let parent_id = parent.get(col::inodes::INODE_ID).as_u64().unwrap_or(0);
            let child = self.lookup(txn, ctx, parent_id, name)?.ok_or_else(|| Error::NotFound(path.to_string()))?;
            self.check_rights(txn, ctx, ObjectRef::file(parent_id), Rights::WRITE)?;
            let row = self.get_scoped(txn, ctx, INODES, &[child.into()])?.ok_or_else(|| Error::NotFound(path.to_string()))?;
            if is_dir(&row) && !self.children(txn, ctx, child)?.is_empty() {
                return Err(Error::DirectoryNotEmpty(path.to_string()));
            }
            self.remove_object(txn, ObjectRef::file(child))?;
            self.record(txn, ctx, ProvOp::Delete, Some(ObjectRef::file(child)), None)?;
            Ok(())
        })
    }

    /// Deletes an inode with its chunks, directory entry and permission
    /// rules. Returns whether it existed.
    pub(crate) fn remove_inode(&self, txn: &mut Transaction, id: u64) -> Result<bool> {
        let Some(row) = txn.get(INODES, &[id.into()])? else {
            return Ok(false);
        };
        let size = row.get(col::inodes::SIZE).as_u64().unwrap_or(0);
        for c in 0..size.div_ceil(CHUNK_SIZE as u64) {
            txn.delete(BLOBS, &[id.into(), c.into()])?;
        }
        let links = txn.scan(DENTRIES, &ScanOptions::new().filter(Predicate::eq("child_inode", id)))?.rows;
        for d in links {
            txn.delete(DENTRIES, &d.values()[..2])?;
        }
        let rules = Predicate::eq("object_kind", "file").and(Predicate::eq("object_id", id));
        for r in txn.scan(PERMISSIONS, &ScanOptions::new().filter(rules))?.rows {
            txn.delete(PERMISSIONS, &r.values()[..3])?;
        }
        txn.delete(INODES, &[id.into()])?;
        Ok(true)
    }

    /// Copies the content of `src` into a new file at `dst`.
    pub fn file_copy(&self, ctx: &SyscallContext, src: &str, dst: &str) -> Result<u64> {
        self.syscall(|txn| {
            let mut from = self.resolve_file(txn, ctx, src)?;
            let from_id = from.get(col::inodes::INODE_ID).as_u64().unwrap_or(0);
            self.check_readable(txn, ctx, ObjectRef::file(from_id))?;
            let size = from.get(col::inodes::SIZE).as_u64().unwrap_or(0);
            let data = self.read_range(txn, from_id, size, 0, size)?;
            self.touch_atime(txn, &mut from)?;
            let to_id = self.make_node(txn, ctx, dst, false)?;
            if !data.is_empty() {
                let mut to = txn.get(INODES, &[to_id.into()])?.ok_or_else(|| Error::NotFound(dst.to_string()))?;
                self.write_at(txn, &mut to, 0, &data)?;
            }
            self.record(txn, ctx, ProvOp::Copy, Some(ObjectRef::file(from_id)), Some(ObjectRef::file(to_id)))?;
            Ok(to_id)
        })
    }

    /// Files under `root_path` (recursively) whose inode row satisfies
    /// `predicate`, in inode id order.
    pub fn file_search(&self, ctx: &SyscallContext, root_path: &str, predicate: &Predicate) -> Result<Vec<InodeInfo>> {
        let txn = self.engine().begin()?;
        let root = self.resolve(&txn, ctx, root_path)?;
        let root_id = root.get(col::inodes::INODE_ID).as_u64().unwrap_or(0);
        let files_only = Predicate::eq("kind", "file").and(predicate.clone());
        let view = self.view_for(&txn, ctx, INODES)?;
        if root_id == self.container_root(&txn, ctx)? {
            // Every live inode of the container hangs below its root.
            let mine = Predicate::eq("container_id", ctx.container_id).and(files_only);
            let rows = txn.scan_view(&view, &ScanOptions::new().filter(mine))?.rows;
            return Ok(rows.iter().map(InodeInfo::from_row).collect());
        }
        let bound = files_only.bind(&self.engine().schema(INODES)?)?;
        let mut out = Vec::new();
        let mut queue = VecDeque::from([root]);
        while let Some(node) = queue.pop_front() {
            if is_dir(&node) {
                for (_, child) in self.children(&txn, ctx, node.get(0).as_u64().unwrap_or(0))? {
                    if let Some(r) = self.get_scoped(&txn, ctx, INODES, &[child.into()])? {
                        queue.push_back(r);
                    }
                }
            } else if bound.eval(&node) {
                out.push(InodeInfo::from_row(&node));
            }
        }
        out.sort_by_key(|i| i.inode_id);
        Ok(out)
    }

    /// Sends the whole content of a file as one message on `channel`.
    pub fn file_send(&self, ctx: &SyscallContext, path: &str, channel: &str) -> Result<u64> {
        self.syscall(|txn| {
            let mut inode = self.resolve_file(txn, ctx, path)?;
            let id = inode.get(col::inodes::INODE_ID).as_u64().unwrap_or(0);
            self.check_readable(txn, ctx, ObjectRef::file(id))?;
            let size = inode.get(col::inodes::SIZE).as_u64().unwrap_or(0);
            let data = self.read_range(txn, id, size, 0, size)?;
            self.touch_atime(txn, &mut inode)?;
            let msg = self.put_message(txn, ctx, channel, data)?;
            self.record(txn, ctx, ProvOp::Transmit, Some(ObjectRef::file(id)), Some(ObjectRef::message(msg)))?;
            Ok(msg)
        })
    }
}
