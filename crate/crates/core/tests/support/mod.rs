//! Shared oracles for integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dbos_core::syscall::{Kernel, SyscallContext};
use dbos_core::Error;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Dir,
    File(Vec<u8>),
}

/// Naive file system: a map from normalized path to directory or byte array.
#[derive(Debug)]
pub struct FsModel {
    nodes: BTreeMap<Vec<String>, Node>,
}

type MResult<T> = std::result::Result<T, &'static str>;

fn split(path: &str) -> (Vec<&str>, Option<&str>) {
    let mut parts: Vec<&str> = path.split('/').filter(|p| !p.is_empty() && *p != ".").collect();
    match parts.pop() {
        Some("..") => {
            parts.push("..");
            (parts, None)
        }
        other => (parts, other),
    }
}

impl Default for FsModel {
    fn default() -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(Vec::new(), Node::Dir);
        FsModel { nodes }
    }
}

impl FsModel {
    fn walk(&self, comps: &[&str]) -> MResult<Vec<String>> {
        let mut stack: Vec<Vec<String>> = vec![Vec::new()];
        for c in comps {
            if *c == ".." {
                if stack.len() == 1 {
                    return Err("PathEscapesContainer");
                }
                stack.pop();
                continue;
            }
            let cur = stack.last().unwrap();
            if self.nodes[cur] != Node::Dir {
                return Err("NotDirectory");
            }
            let mut next = cur.clone();
            next.push(c.to_string());
            if !self.nodes.contains_key(&next) {
                return Err("NotFound");
            }
            stack.push(next);
        }
        Ok(stack.pop().unwrap())
    }

    fn resolve(&self, path: &str) -> MResult<Vec<String>> {
        let (mut parts, last) = split(path);
        parts.extend(last);
        self.walk(&parts)
    }

    fn file(&self, path: &str) -> MResult<Vec<String>> {
        let p = self.resolve(path)?;
        match self.nodes[&p] {
            Node::Dir => Err("IsDirectory"),
            Node::File(_) => Ok(p),
        }
    }

    fn make(&mut self, path: &str, node: Node) -> MResult<()> {
        let (parts, last) = split(path);
        let parent = self.walk(&parts)?;
        let name = last.ok_or("AlreadyExists")?;
        if self.nodes[&parent] != Node::Dir {
            return Err("NotDirectory");
        }
        let mut p = parent;
        p.push(name.to_string());
        if self.nodes.contains_key(&p) {
            return Err("AlreadyExists");
        }
        self.nodes.insert(p, node);
        Ok(())
    }

    pub fn create(&mut self, path: &str) -> MResult<()> {
        self.make(path, Node::File(Vec::new()))
    }

    pub fn mkdir(&mut self, path: &str) -> MResult<()> {
        self.make(path, Node::Dir)
    }

    pub fn write(&mut self, path: &str, offset: u64, data: &[u8]) -> MResult<usize> {
        let p = self.file(path)?;
        if let Some(Node::File(bytes)) = self.nodes.get_mut(&p) {
            if !data.is_empty() {
                let end = offset as usize + data.len();
                if bytes.len() < end {
                    bytes.resize(end, 0);
                }
                bytes[offset as usize..end].copy_from_slice(data);
            }
        }
        Ok(data.len())
    }

    pub fn read(&self, path: &str, offset: u64, len: u64) -> MResult<Vec<u8>> {
        let p = self.file(path)?;
        let Node::File(bytes) = &self.nodes[&p] else { unreachable!() };
        let lo = (offset as usize).min(bytes.len());
        let hi = (offset.saturating_add(len) as usize).min(bytes.len());
        Ok(bytes[lo..hi.max(lo)].to_vec())
    }

    pub fn list(&self, path: &str) -> MResult<Vec<String>> {
        let p = self.resolve(path)?;
        if self.nodes[&p] != Node::Dir {
            return Err("NotDirectory");
        }
        Ok(self
            .nodes
            .keys()
            .filter(|k| k.len() == p.len() + 1 && k.starts_with(&p))
            .map(|k| k.last().unwrap().clone())
            .collect())
    }

    pub fn unlink(&mut self, path: &str) -> MResult<()> {
        let (parts, last) = split(path);
        let parent = self.walk(&parts)?;
        let name = last.ok_or("InvalidArgument")?;
        if self.nodes[&parent] != Node::Dir {
            return Err("NotDirectory");
        }
        let mut p = parent;
        p.push(name.to_string());
        match self.nodes.get(&p) {
            None => Err("NotFound"),
            Some(Node::Dir) if self.nodes.keys().any(|k| k.len() > p.len() && k.starts_with(&p)) => Err("DirectoryNotEmpty"),
            Some(_) => {
                self.nodes.remove(&p);
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum FsOp {
    Create(String),
    Mkdir(String),
    Write(String, u64, Vec<u8>),
    Read(String, u64, u64),
    List(String),
    Unlink(String),
}

const NAMES: &[&str] = &["a", "b", "c", "x", "y"];

pub fn random_path(rng: &mut impl Rng) -> String {
    let depth = rng.gen_range(0..=3);
    let mut p = String::new();
    for _ in 0..depth {
        p.push('/');
        if rng.gen_bool(0.04) {
            p.push_str("..");
        } else {
            p.push_str(NAMES[rng.gen_range(0..NAMES.len())]);
        }
    }
    if p.is_empty() {
        p.push('/');
    }
    p
}

pub fn random_op(rng: &mut impl Rng) -> FsOp {
    let path = random_path(rng);
    match rng.gen_range(0..100) {
        0..=11 => FsOp::Create(path),
        12..=21 => FsOp::Mkdir(path),
        22..=51 => {
            let offset = match rng.gen_range(0..4) {
                0 => rng.gen_range(65_000..66_000),
                1 => rng.gen_range(130_000..132_000),
                _ => rng.gen_range(0..2_000),
            };
            let len = rng.gen_range(0..300);
            let fill: u8 = rng.gen();
            FsOp::Write(path, offset, (0..len).map(|i| fill.wrapping_add(i as u8)).collect())
        }
        52..=81 => FsOp::Read(path, rng.gen_range(0..140_000), rng.gen_range(0..70_000)),
        82..=89 => FsOp::List(path),
        _ => FsOp::Unlink(path),
    }
}

/// Outcome of one op on either side, comparable across the two.
#[derive(Debug, PartialEq)]
pub enum Outcome {
    Unit,
    Count(usize),
    Bytes(Vec<u8>),
    Names(Vec<String>),
    Err(String),
}

fn err(e: Error) -> Outcome {
    Outcome::Err(e.code().to_string())
}

pub fn apply_kernel(k: &Kernel, ctx: &SyscallContext, op: &FsOp) -> Outcome {
    match op {
        FsOp::Create(p) => k.file_create(ctx, p).map_or_else(err, |_| Outcome::Unit),
        FsOp::Mkdir(p) => k.file_mkdir(ctx, p).map_or_else(err, |_| Outcome::Unit),
        FsOp::Write(p, o, d) => k.file_write(ctx, p, *o, d).map_or_else(err, Outcome::Count),
        FsOp::Read(p, o, l) => k.file_read(ctx, p, *o, *l).map_or_else(err, Outcome::Bytes),
        FsOp::List(p) => k
            .file_list(ctx, p)
            .map_or_else(err, |v| Outcome::Names(v.into_iter().map(|e| e.name).collect())),
        FsOp::Unlink(p) => k.file_unlink(ctx, p).map_or_else(err, |_| Outcome::Unit),
    }
}

pub fn apply_model(m: &mut FsModel, op: &FsOp) -> Outcome {
    let e = |s: &str| Outcome::Err(s.to_string());
    match op {
        FsOp::Create(p) => m.create(p).map_or_else(e, |_| Outcome::Unit),
        FsOp::Mkdir(p) => m.mkdir(p).map_or_else(e, |_| Outcome::Unit),
        FsOp::Write(p, o, d) => m.write(p, *o, d).map_or_else(e, Outcome::Count),
        FsOp::Read(p, o, l) => m.read(p, *o, *l).map_or_else(e, Outcome::Bytes),
        FsOp::List(p) => m.list(p).map_or_else(e, Outcome::Names),
        FsOp::Unlink(p) => m.unlink(p).map_or_else(e, |_| Outcome::Unit),
    }
}

/// Breadth-first reachability over an explicit edge list; excludes the
/// start unless a cycle leads back to it.
pub fn bfs<T: Ord + Copy>(edges: &[(T, T)], start: T) -> std::collections::BTreeSet<T> {
    let mut seen = std::collections::BTreeSet::new();
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        for (a, b) in edges {
            if *a == n && seen.insert(*b) {
                queue.push_back(*b);
            }
        }
    }
    seen
}
