//! Host-independent logical snapshots of the value graph.
//!
//! ```text
//! snapshot := "EKSNAP1" varint(count) node* varint(roots) (name idx)*
//! node     := tag:u8 body
//!   Unit   -
//!   Bool   u8
//!   Int    i64 little-endian
//!   Str    varint(len) utf-8
//!   Bytes  varint(len) bytes
//!   List   varint(n) varint(idx)*
//!   Record varint(n) (name varint(idx))*
//!   Enum   name name varint(n) (name varint(idx))*
//! name     := varint(len) utf-8
//! ```
//!
//! Nodes appear in post-order, so every child index is smaller than its
//! parent's. Structurally equal subtrees are emitted once, which makes the
//! encoding a function of the logical values alone: no addresses, no
//! allocation order, no worker identity. Root names are sorted bytewise.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use thiserror::Error;

use super::object::{Obj, Ref};
use super::{Heap, HeapError, Kind, Value, ValueHandle};

pub const MAGIC: &[u8; 7] = b"EKSNAP1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("missing EKSNAP1 magic")]
    BadMagic,
    #[error("truncated snapshot at byte {0}")]
    Truncated(usize),
    #[error("unknown tag {tag} at byte {at}")]
    BadTag { tag: u8, at: usize },
    #[error("node {node} references index {child} which is not earlier")]
    ForwardReference { node: usize, child: usize },
    #[error("invalid utf-8 at byte {0}")]
    Utf8(usize),
    #[error("snapshot is not in canonical form: {0}")]
    NonCanonical(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error(transparent)]
    Heap(#[from] HeapError),
}

/// An encoded snapshot: a flat DAG of values plus named roots.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HeapSnapshot {
    bytes: Vec<u8>,
    nodes: Vec<Node>,
    roots: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Node {
    Unit,
    Bool(bool),
    Int(i64),
    Str(String),
    Bytes(Vec<u8>),
    List(Vec<u32>),
    Record(Vec<(String, u32)>),
    Enum {
        name: String,
        variant: String,
        fields: Vec<(String, u32)>,
    },
}

impl HeapSnapshot {
    /// Captures everything reachable from `roots`. The mutator must be quiescent.
    pub fn capture(heap: &Heap, roots: &BTreeMap<String, ValueHandle>) -> HeapSnapshot {
        let named: Vec<(&str, Ref)> = roots
            .iter()
            .map(|(k, h)| (k.as_str(), heap.resolve(*h)))
            .collect();
        let bytes = encode(&HeapSource(heap), &named);
        HeapSnapshot::from_bytes(bytes).expect("capture produced an invalid snapshot")
    }

    /// Snapshot of owned values; byte-identical to capturing the same values
    /// from a heap.
    pub fn from_values(roots: &BTreeMap<String, Value>) -> HeapSnapshot {
        let named: Vec<(&str, *const Value)> = roots
            .iter()
            .map(|(k, v)| (k.as_str(), v as *const Value))
            .collect();
        let bytes = encode(&ValueSource, &named);
        HeapSnapshot::from_bytes(bytes).expect("encoding produced an invalid snapshot")
    }

    /// Parses and validates an encoded snapshot. Only canonical encodings
    /// are accepted, so `from_bytes(b)?.as_bytes() == b`.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<HeapSnapshot, SnapshotError> {
        let (nodes, roots) = parse(&bytes)?;
        let named: Vec<(&str, u32)> = roots.iter().map(|(k, i)| (k.as_str(), *i)).collect();
        let again = encode(&TableSource(&nodes), &named);
        if again != bytes {
            return Err(SnapshotError::NonCanonical("re-encoding differs"));
        }
        Ok(HeapSnapshot {
            bytes,
            nodes,
            roots,
        })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn value_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root_names(&self) -> impl Iterator<Item = &str> {
        self.roots.keys().map(String::as_str)
    }

    /// Allocates the snapshot's values into `heap`, preserving sharing.
    /// Returns one new handle per root.
    pub fn restore(&self, heap: &mut Heap) -> Result<BTreeMap<String, ValueHandle>, SnapshotError> {
        let mut handles: Vec<ValueHandle> = Vec::with_capacity(self.nodes.len());
        let result = self.restore_into(heap, &mut handles);
        let out = result.map(|()| {
            self.roots
                .iter()
                .map(|(k, &i)| (k.clone(), heap.dup(handles[i as usize])))
                .collect()
        });
        heap.release_all(handles);
        out
    }

    fn restore_into(&self, heap: &mut Heap, handles: &mut Vec<ValueHandle>) -> Result<(), SnapshotError> {
        for node in &self.nodes {
            let fields = |fs: &[(String, u32)], hs: &[ValueHandle]| -> Vec<(String, ValueHandle)> {
                fs.iter().map(|(k, i)| (k.clone(), hs[*i as usize])).collect()
            };
            let h = match node {
                Node::Unit => heap.alloc_unit(),
                Node::Bool(b) => heap.alloc_bool(*b),
                Node::Int(i) => heap.alloc_int(*i),
                Node::Str(s) => heap.alloc_str(s),
                Node::Bytes(b) => heap.alloc_bytes(b),
                Node::List(items) => {
                    let hs: Vec<ValueHandle> = items.iter().map(|i| handles[*i as usize]).collect();
                    heap.alloc_list(&hs)
                }
                Node::Record(fs) => {
                    let owned = fields(fs, handles);
                    let pairs: Vec<(&str, ValueHandle)> = owned.iter().map(|(k, h)| (k.as_str(), *h)).collect();
                    heap.alloc_record(&pairs)
                }
                Node::Enum {
                    name,
                    variant,
                    fields: fs,
                } => {
                    let owned = fields(fs, handles);
                    let pairs: Vec<(&str, ValueHandle)> = owned.iter().map(|(k, h)| (k.as_str(), *h)).collect();
                    heap.alloc_enum(name, variant, &pairs)
                }
            }?;
            handles.push(h);
        }
        Ok(())
    }

    /// Decodes the roots as owned values without touching a heap.
    pub fn to_values(&self) -> BTreeMap<String, Value> {
        let mut memo: Vec<Option<Value>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let get = |j: &u32| memo[*j as usize].clone().expect("post-order");
            let v = match node {
                Node::Unit => Value::Unit,
                Node::Bool(b) => Value::Bool(*b),
                Node::Int(n) => Value::Int(*n),
                Node::Str(s) => Value::Str(s.clone()),
                Node::Bytes(b) => Value::Bytes(b.clone()),
                Node::List(items) => Value::List(items.iter().map(get).collect()),
                Node::Record(fs) => Value::Record(fs.iter().map(|(k, j)| (k.clone(), get(j))).collect()),
                Node::Enum {
                    name,
                    variant,
                    fields,
                } => Value::Enum {
                    name: name.clone(),
                    variant: variant.clone(),
                    fields: fields.iter().map(|(k, j)| (k.clone(), get(j))).collect(),
                },
            };
            memo[i] = Some(v);
        }
        self.roots
            .iter()
            .map(|(k, &i)| (k.clone(), memo[i as usize].clone().expect("root")))
            .collect()
    }
}

// -------------------------------------------------------------------------
// Encoding

pub(crate) fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn put_name(out: &mut Vec<u8>, s: &[u8]) {
    put_varint(out, s.len() as u64);
    out.extend_from_slice(s);
}

/// Scalar or child-bearing view of one node, children given by position.
enum Shape<'a> {
    Unit,
    Bool(bool),
    Int(i64),
    Str(&'a [u8]),
    Bytes(&'a [u8]),
    List(usize),
    Record(Vec<&'a str>),
    Enum(&'a str, &'a str, Vec<&'a str>),
}

trait Source {
    type Id: Copy + Eq + Hash;
    fn shape(&self, id: Self::Id) -> Shape<'_>;
    fn children(&self, id: Self::Id) -> Vec<Self::Id>;
}

struct HeapSource<'h>(&'h Heap);

impl Source for HeapSource<'_> {
    type Id = Ref;

    fn shape(&self, id: Ref) -> Shape<'_> {
        let o: Obj<'_> = self.0.obj(id);
        match o.kind() {
            Kind::Unit => Shape::Unit,
            Kind::Bool => Shape::Bool(o.bool()),
            Kind::Int => Shape::Int(o.int()),
            Kind::Str => Shape::Str(o.blob()),
            Kind::Bytes => Shape::Bytes(o.blob()),
            Kind::List => Shape::List(o.list_len()),
            Kind::Record => Shape::Record(o.fields().map(|(k, _)| k).collect()),
            Kind::Enum => {
                let (n, v) = o.enum_tag();
                Shape::Enum(n, v, o.fields().map(|(k, _)| k).collect())
            }
        }
    }

    fn children(&self, id: Ref) -> Vec<Ref> {
        self.0.obj(id).children()
    }
}

struct ValueSource;

impl Source for ValueSource {
    type Id = *const Value;

    fn shape(&self, id: *const Value) -> Shape<'_> {
        // SAFETY: ids are borrowed from roots that outlive the encoding.
        let v: &Value = unsafe { &*id };
        match v {
            Value::Unit => Shape::Unit,
            Value::Bool(b) => Shape::Bool(*b),
            Value::Int(i) => Shape::Int(*i),
            Value::Str(s) => Shape::Str(s.as_bytes()),
            Value::Bytes(b) => Shape::Bytes(b),
            Value::List(items) => Shape::List(items.len()),
            Value::Record(fs) => Shape::Record(fs.keys().map(String::as_str).collect()),
            Value::Enum {
                name,
                variant,
                fields,
            } => Shape::Enum(name, variant, fields.keys().map(String::as_str).collect()),
        }
    }

    fn children(&self, id: *const Value) -> Vec<*const Value> {
        // SAFETY: as above.
        let v: &Value = unsafe { &*id };
        match v {
            Value::List(items) => items.iter().map(|c| c as *const Value).collect(),
            Value::Record(fs) | Value::Enum { fields: fs, .. } => fs.values().map(|c| c as *const Value).collect(),
            _ => Vec::new(),
        }
    }
}

struct TableSource<'a>(&'a [Node]);

impl Source for TableSource<'_> {
    type Id = u32;

    fn shape(&self, id: u32) -> Shape<'_> {
        match &self.0[id as usize] {
            Node::Unit => Shape::Unit,
            Node::Bool(b) => Shape::Bool(*b),
            Node::Int(i) => Shape::Int(*i),
            Node::Str(s) => Shape::Str(s.as_bytes()),
            Node::Bytes(b) => Shape::Bytes(b),
            Node::List(items) => Shape::List(items.len()),
            Node::Record(fs) => Shape::Record(fs.iter().map(|(k, _)| k.as_str()).collect()),
            Node::Enum {
                name,
                variant,
                fields,
            } => Shape::Enum(name, variant, fields.iter().map(|(k, _)| k.as_str()).collect()),
        }
    }

    fn children(&self, id: u32) -> Vec<u32> {
        match &self.0[id as usize] {
            Node::List(items) => items.clone(),
            Node::Record(fs) | Node::Enum { fields: fs, .. } => fs.iter().map(|(_, i)| *i).collect(),
            _ => Vec::new(),
        }
    }
}

fn encode_node(shape: &Shape<'_>, kids: &[u32], out: &mut Vec<u8>) {
    let fields = |out: &mut Vec<u8>, keys: &[&str]| {
        put_varint(out, keys.len() as u64);
        for (k, i) in keys.iter().zip(kids) {
            put_name(out, k.as_bytes());
            put_varint(out, *i as u64);
        }
    };
    match shape {
        Shape::Unit => out.push(Kind::Unit as u8),
        Shape::Bool(b) => {
            out.push(Kind::Bool as u8);
            out.push(*b as u8);
        }
        Shape::Int(i) => {
            out.push(Kind::Int as u8);
            out.extend_from_slice(&i.to_le_bytes());
        }
        Shape::Str(s) => {
            out.push(Kind::Str as u8);
            put_name(out, s);
        }
        Shape::Bytes(b) => {
            out.push(Kind::Bytes as u8);
            put_name(out, b);
        }
        Shape::List(len) => {
            debug_assert_eq!(*len, kids.len());
            out.push(Kind::List as u8);
            put_varint(out, kids.len() as u64);
            for i in kids {
                put_varint(out, *i as u64);
            }
        }
        Shape::Record(keys) => {
            out.push(Kind::Record as u8);
            fields(out, keys);
        }
        Shape::Enum(name, variant, keys) => {
            out.push(Kind::Enum as u8);
            put_name(out, name.as_bytes());
            put_name(out, variant.as_bytes());
            fields(out, keys);
        }
    }
}

fn encode<S: Source>(src: &S, roots: &[(&str, S::Id)]) -> Vec<u8> {
    let mut memo: HashMap<S::Id, u32> = HashMap::new();
    let mut unique: HashMap<Vec<u8>, u32> = HashMap::new();
    let mut body = Vec::new();
    let mut count: u32 = 0;
    let mut root_idx = Vec::with_capacity(roots.len());
    let mut scratch = Vec::new();

    for (name, root) in roots {
        let mut stack: Vec<(S::Id, bool)> = vec![(*root, false)];
        while let Some((id, expanded)) = stack.pop() {
            if memo.contains_key(&id) {
                continue;
            }
            let children = src.children(id);
            if !expanded {
                stack.push((id, true));
                for c in children.iter().rev() {
                    if !memo.contains_key(c) {
                        stack.push((*c, false));
                    }
                }
                continue;
            }
            let kids: Vec<u32> = children.iter().map(|c| memo[c]).collect();
            scratch.clear();
            encode_node(&src.shape(id), &kids, &mut scratch);
            let idx = match unique.get(&scratch) {
                Some(&i) => i,
                None => {
                    body.extend_from_slice(&scratch);
                    unique.insert(scratch.clone(), count);
                    count += 1;
                    count - 1
                }
            };
            memo.insert(id, idx);
        }
        root_idx.push((*name, memo[root]));
    }

    let mut out = Vec::with_capacity(body.len() + 32);
    out.extend_from_slice(MAGIC);
    put_varint(&mut out, count as u64);
    out.extend_from_slice(&body);
    put_varint(&mut out, root_idx.len() as u64);
    for (name, idx) in root_idx {
        put_name(&mut out, name.as_bytes());
        put_varint(&mut out, idx as u64);
    }
    out
}

// -------------------------------------------------------------------------
// Decoding

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn byte(&mut self) -> Result<u8, SnapshotError> {
        let b = *self.bytes.get(self.pos).ok_or(SnapshotError::Truncated(self.pos))?;
        self.pos += 1;
        Ok(b)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or(SnapshotError::Truncated(self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn varint(&mut self) -> Result<u64, SnapshotError> {
        let start = self.pos;
        let mut v: u64 = 0;
        for shift in (0..64).step_by(7) {
            let b = self.byte()?;
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                if b == 0 && shift > 0 {
                    return Err(SnapshotError::NonCanonical("overlong varint"));
                }
                return Ok(v);
            }
        }
        Err(SnapshotError::Truncated(start))
    }

    fn len(&mut self) -> Result<usize, SnapshotError> {
        let v = self.varint()?;
        usize::try_from(v)
            .ok()
            .filter(|n| *n <= self.bytes.len())
            .ok_or(SnapshotError::Truncated(self.pos))
    }

    pub(crate) fn name(&mut self) -> Result<String, SnapshotError> {
        let at = self.pos;
        let n = self.len()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| SnapshotError::Utf8(at))
    }
}

fn parse(bytes: &[u8]) -> Result<(Vec<Node>, BTreeMap<String, u32>), SnapshotError> {
    if !bytes.starts_with(MAGIC) {
        return Err(SnapshotError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.len()?;
    let mut nodes = Vec::with_capacity(count.min(1 << 20));
    let mut seen = HashSet::new();
    for node_index in 0..count {
        let start = r.pos;
        let tag = r.byte()?;
        let child = |r: &mut Reader<'_>| -> Result<u32, SnapshotError> {
            let c = r.varint()?;
            if c >= node_index as u64 {
                return Err(SnapshotError::ForwardReference {
                    node: node_index,
                    child: c as usize,
                });
            }
            Ok(c as u32)
        };
        let fields = |r: &mut Reader<'_>| -> Result<Vec<(String, u32)>, SnapshotError> {
            let n = r.len()?;
            let mut out: Vec<(String, u32)> = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let k = r.name()?;
                if out.last().is_some_and(|(prev, _)| prev.as_bytes() >= k.as_bytes()) {
                    return Err(SnapshotError::NonCanonical("field keys not strictly sorted"));
                }
                out.push((k, child(r)?));
            }
            Ok(out)
        };
        let node = match Kind::from_u8(tag) {
            Some(Kind::Unit) => Node::Unit,
            Some(Kind::Bool) => match r.byte()? {
                0 => Node::Bool(false),
                1 => Node::Bool(true),
                _ => return Err(SnapshotError::NonCanonical("bool byte")),
            },
            Some(Kind::Int) => Node::Int(i64::from_le_bytes(r.take(8)?.try_into().unwrap())),
            Some(Kind::Str) => Node::Str(r.name()?),
            Some(Kind::Bytes) => {
                let n = r.len()?;
                Node::Bytes(r.take(n)?.to_vec())
            }
            Some(Kind::List) => {
                let n = r.len()?;
                let mut items = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    items.push(child(&mut r)?);
                }
                Node::List(items)
            }
            Some(Kind::Record) => Node::Record(fields(&mut r)?),
            Some(Kind::Enum) => {
                let name = r.name()?;
                let variant = r.name()?;
                Node::Enum {
                    name,
                    variant,
                    fields: fields(&mut r)?,
                }
            }
            None => return Err(SnapshotError::BadTag { tag, at: start }),
        };
        if !seen.insert(&bytes[start..r.pos]) {
            return Err(SnapshotError::NonCanonical("duplicate node"));
        }
        nodes.push(node);
    }
    let n_roots = r.len()?;
    let mut roots = BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..n_roots {
        let name = r.name()?;
        if last.as_ref().is_some_and(|p| p.as_bytes() >= name.as_bytes()) {
            return Err(SnapshotError::NonCanonical("root names not strictly sorted"));
        }
        let idx = r.varint()?;
        if idx >= count as u64 {
            return Err(SnapshotError::ForwardReference {
                node: count,
                child: idx as usize,
            });
        }
        last = Some(name.clone());
        roots.insert(name, idx as u32);
    }
    if r.pos != bytes.len() {
        return Err(SnapshotError::Trailing(bytes.len() - r.pos));
    }
    Ok((nodes, roots))
}
