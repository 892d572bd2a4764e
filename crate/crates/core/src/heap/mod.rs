//! Immutable acyclic values on a two-generation heap.
//!
//! Allocation bump-allocates into a fixed nursery. When the nursery fills, a
//! stop-the-world minor collection evacuates the reachable young objects into
//! the old generation and resets the nursery, so collection work is bounded by
//! the nursery size and never by the amount of old data.
//!
//! Values are immutable and a composite may only reference values that exist
//! when it is built, so the object graph is a DAG and no old object can point
//! at a young one. That gives two things for free:
//!
//! * no write barrier or remembered set: the roots of a minor collection are
//!   exactly the live [`ValueHandle`]s;
//! * plain reference counting is complete for the old generation. Counts
//!   cover old-to-old edges and handles only; references from young objects
//!   are reconciled at the next collection (a zero-count table), and the
//!   cascading release of a dropped structure is paced by
//!   [`GcConfig::old_gen_decrement_budget`] steps per pause.
//!
//! The allocator-held reserve is the nursery plus a side table sized from it,
//! independent of the heap limit and of how much data is live.

mod object;
pub mod bench;
pub mod snapshot;
mod value;

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use thiserror::Error;

use object::{read_ref, write_ref, Body, Obj, Ref, FLAG_FORWARDED, FLAG_MARK};

pub use object::MIN_OBJECT_BYTES;
pub use snapshot::{HeapSnapshot, SnapshotError};
pub use value::{Kind, Value, API_RESULT, ERROR, SUCCESS};

pub const KIB: usize = 1024;
pub const MIB: usize = 1024 * KIB;

/// Collector tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcConfig {
    pub nursery_bytes: usize,
    pub heap_limit_bytes: usize,
    /// Old-generation objects released per pause; `usize::MAX` for unbounded.
    pub old_gen_decrement_budget: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("nursery of {0} bytes is below the {min} byte minimum", min = GcConfig::MIN_NURSERY_BYTES)]
    NurseryTooSmall(usize),
    #[error("heap limit of {limit} bytes must be at least twice the {nursery} byte nursery")]
    HeapLimitTooSmall { limit: usize, nursery: usize },
    #[error("nursery of {0} bytes exceeds the addressable maximum")]
    NurseryTooLarge(usize),
    #[error("old generation decrement budget must be at least 1")]
    ZeroBudget,
}

impl GcConfig {
    pub const MIN_NURSERY_BYTES: usize = 256 * KIB;
    pub const DEFAULT_DECREMENT_BUDGET: usize = 4096;
    const MAX_NURSERY_BYTES: usize = 1 << 30;

    pub fn new(nursery_bytes: usize, heap_limit_bytes: usize) -> Result<GcConfig, ConfigError> {
        let config = GcConfig {
            nursery_bytes,
            heap_limit_bytes,
            old_gen_decrement_budget: Self::DEFAULT_DECREMENT_BUDGET,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_budget(mut self, budget: usize) -> Result<GcConfig, ConfigError> {
        self.old_gen_decrement_budget = budget;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nursery_bytes < Self::MIN_NURSERY_BYTES {
            return Err(ConfigError::NurseryTooSmall(self.nursery_bytes));
        }
        if self.nursery_bytes > Self::MAX_NURSERY_BYTES {
            return Err(ConfigError::NurseryTooLarge(self.nursery_bytes));
        }
        if self.heap_limit_bytes < 2 * self.nursery_bytes {
            return Err(ConfigError::HeapLimitTooSmall {
                limit: self.heap_limit_bytes,
                nursery: self.nursery_bytes,
            });
        }
        if self.old_gen_decrement_budget == 0 {
            return Err(ConfigError::ZeroBudget);
        }
        Ok(())
    }

    /// Allocator metadata held on top of the nursery: the young-object table
    /// (one `u32` per minimum-sized object) plus the heap's own fixed fields.
    /// Depends on the nursery size only.
    pub fn fixed_metadata_bytes(&self) -> usize {
        young_table_capacity(self.nursery_bytes) * std::mem::size_of::<u32>()
            + std::mem::size_of::<Heap>()
    }

    /// Total reserve a fresh heap with this configuration holds.
    pub fn reserve_bytes(&self) -> usize {
        self.nursery_bytes + self.fixed_metadata_bytes()
    }
}

impl Default for GcConfig {
    fn default() -> Self {
        GcConfig {
            nursery_bytes: MIB,
            heap_limit_bytes: 256 * MIB,
            old_gen_decrement_budget: Self::DEFAULT_DECREMENT_BUDGET,
        }
    }
}

fn young_table_capacity(nursery_bytes: usize) -> usize {
    nursery_bytes / MIN_OBJECT_BYTES
}

/// Collector telemetry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GcStats {
    pub minor_collections: u64,
    pub max_pause: Duration,
    pub p99_pause: Duration,
    pub median_pause: Duration,
    /// Old-generation bytes (including released-but-not-yet-freed) plus the
    /// bytes currently bump-allocated in the nursery.
    pub live_bytes: usize,
    /// Allocator-held memory that is not application data.
    pub reserve_bytes: usize,
    /// Cumulative bytes evacuated from the nursery.
    pub promoted_bytes: u64,
    pub old_objects: usize,
    pub released_objects: u64,
    pub pending_release: usize,
}

/// Result of one minor collection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollectionReport {
    pub promoted_objects: usize,
    pub promoted_bytes: usize,
    pub reclaimed_young_bytes: usize,
    pub released_objects: usize,
    pub pause: Duration,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeapError {
    #[error("out of memory: {requested} bytes requested with {live} bytes live under a {limit} byte limit")]
    OutOfMemory {
        requested: usize,
        live: usize,
        limit: usize,
    },
    #[error("a single {size} byte value exceeds the {limit} byte heap limit")]
    OversizedAllocation { size: usize, limit: usize },
    #[error("duplicate field `{0}`")]
    DuplicateField(String),
}

/// Mutator reference to a heap value. Each live handle is a collection root;
/// it stays valid across collections until [`Heap::release`] is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueHandle {
    index: u32,
    generation: u32,
}

/// Allocation request.
#[derive(Debug, Clone, Copy)]
pub enum Payload<'a> {
    Unit,
    Bool(bool),
    Int(i64),
    Str(&'a str),
    Bytes(&'a [u8]),
    List(&'a [ValueHandle]),
    Record(&'a [(&'a str, ValueHandle)]),
    Enum {
        name: &'a str,
        variant: &'a str,
        fields: &'a [(&'a str, ValueHandle)],
    },
}

#[derive(Debug, Clone, Copy)]
struct HandleEntry {
    target: Ref,
    count: u32,
    generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Queued {
    No,
    Zct,
    Release,
}

#[derive(Debug)]
struct OldSlot {
    rc: u32,
    queued: Queued,
    obj: Option<Box<[u8]>>,
}

/// Per-object bookkeeping charged to the old generation on top of the object.
const OLD_SLOT_OVERHEAD: usize = std::mem::size_of::<OldSlot>();

pub struct Heap {
    config: GcConfig,
    nursery: Box<[u8]>,
    top: usize,
    /// Offsets of the objects in the nursery, ascending.
    young: Vec<u32>,
    old: Vec<OldSlot>,
    old_free: Vec<u32>,
    old_bytes: usize,
    old_objects: usize,
    handles: Vec<HandleEntry>,
    handle_free: Vec<u32>,
    zct: Vec<u32>,
    release_queue: VecDeque<u32>,
    next_stamp: u64,
    minor_collections: u64,
    promoted_bytes: u64,
    released_objects: u64,
    pauses: Vec<Duration>,
}

impl std::fmt::Debug for Heap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Heap")
            .field("config", &self.config)
            .field("young_bytes", &self.top)
            .field("old_bytes", &self.old_bytes)
            .field("handles", &(self.handles.len() - self.handle_free.len()))
            .finish()
    }
}

impl Heap {
    pub fn new(config: GcConfig) -> Heap {
        config.validate().expect("invalid GcConfig");
        Heap {
            config,
            nursery: vec![0u8; config.nursery_bytes].into_boxed_slice(),
            top: 0,
            young: Vec::with_capacity(young_table_capacity(config.nursery_bytes)),
            old: Vec::new(),
            old_free: Vec::new(),
            old_bytes: 0,
            old_objects: 0,
            handles: Vec::new(),
            handle_free: Vec::new(),
            zct: Vec::new(),
            release_queue: VecDeque::new(),
            next_stamp: 1,
            minor_collections: 0,
            promoted_bytes: 0,
            released_objects: 0,
            pauses: Vec::new(),
        }
    }

    pub fn config(&self) -> &GcConfig {
        &self.config
    }

    // ---------------------------------------------------------------------
    // Handles

    fn resolve(&self, h: ValueHandle) -> Ref {
        let entry = self
            .handles
            .get(h.index as usize)
            .filter(|e| e.count > 0 && e.generation == h.generation)
            .unwrap_or_else(|| panic!("stale value handle {h:?}"));
        entry.target
    }

    fn new_handle(&mut self, target: Ref) -> ValueHandle {
        if !target.is_young() {
            self.old[target.index()].rc += 1;
        }
        match self.handle_free.pop() {
            Some(index) => {
                let entry = &mut self.handles[index as usize];
                entry.target = target;
                entry.count = 1;
                entry.generation = entry.generation.wrapping_add(1);
                ValueHandle {
                    index,
                    generation: entry.generation,
                }
            }
            None => {
                let index = self.handles.len() as u32;
                self.handles.push(HandleEntry {
                    target,
                    count: 1,
                    generation: 0,
                });
                ValueHandle {
                    index,
                    generation: 0,
                }
            }
        }
    }

    /// Adds a reference to an existing handle; each `dup` needs its own
    /// [`release`](Heap::release).
    pub fn dup(&mut self, h: ValueHandle) -> ValueHandle {
        self.resolve(h);
        self.handles[h.index as usize].count += 1;
        h
    }

    /// Handle-drop event. Dropping the last handle to an old object queues it
    /// for deferred release at the next pause.
    pub fn release(&mut self, h: ValueHandle) {
        let target = self.resolve(h);
        let entry = &mut self.handles[h.index as usize];
        entry.count -= 1;
        if entry.count > 0 {
            return;
        }
        self.handle_free.push(h.index);
        if !target.is_young() {
            self.dec_old(target.index() as u32, true);
        }
    }

    pub fn live_handles(&self) -> usize {
        self.handles.len() - self.handle_free.len()
    }

    fn dec_old(&mut self, slot: u32, from_mutator: bool) {
        let s = &mut self.old[slot as usize];
        s.rc -= 1;
        if s.rc == 0 && s.queued == Queued::No {
            if from_mutator {
                // Young objects may still point at it; settled at the next pause.
                s.queued = Queued::Zct;
                self.zct.push(slot);
            } else {
                s.queued = Queued::Release;
                self.release_queue.push_back(slot);
            }
        }
    }

    // ---------------------------------------------------------------------
    // Reading

    fn obj(&self, r: Ref) -> Obj<'_> {
        if r.is_young() {
            Obj::at(&self.nursery[r.index()..])
        } else {
            let bytes = self.old[r.index()]
                .obj
                .as_deref()
                .expect("reference to a released object");
            Obj::at(bytes)
        }
    }

    fn view(&self, h: ValueHandle) -> Obj<'_> {
        self.obj(self.resolve(h))
    }

    pub fn kind(&self, h: ValueHandle) -> Kind {
        self.view(h).kind()
    }

    pub fn as_bool(&self, h: ValueHandle) -> Option<bool> {
        let o = self.view(h);
        (o.kind() == Kind::Bool).then(|| o.bool())
    }

    pub fn as_int(&self, h: ValueHandle) -> Option<i64> {
        let o = self.view(h);
        (o.kind() == Kind::Int).then(|| o.int())
    }

    pub fn as_str(&self, h: ValueHandle) -> Option<&str> {
        let o = self.view(h);
        (o.kind() == Kind::Str).then(|| o.str())
    }

    pub fn as_bytes(&self, h: ValueHandle) -> Option<&[u8]> {
        let o = self.view(h);
        (o.kind() == Kind::Bytes).then(|| o.blob())
    }

    /// `(enum name, variant)` of an enum value.
    pub fn enum_tag(&self, h: ValueHandle) -> Option<(&str, &str)> {
        let o = self.view(h);
        (o.kind() == Kind::Enum).then(|| o.enum_tag())
    }

    pub fn list_len(&self, h: ValueHandle) -> Option<usize> {
        let o = self.view(h);
        (o.kind() == Kind::List).then(|| o.list_len())
    }

    /// New handle to the `i`th list element.
    pub fn list_item(&mut self, h: ValueHandle, i: usize) -> Option<ValueHandle> {
        let o = self.view(h);
        if o.kind() != Kind::List || i >= o.list_len() {
            return None;
        }
        let r = o.list_item(i);
        Some(self.new_handle(r))
    }

    pub fn list_items(&mut self, h: ValueHandle) -> Option<Vec<ValueHandle>> {
        let o = self.view(h);
        if o.kind() != Kind::List {
            return None;
        }
        let refs = o.children();
        Some(refs.into_iter().map(|r| self.new_handle(r)).collect())
    }

    /// New handle to a record or enum field.
    pub fn field(&mut self, h: ValueHandle, key: &str) -> Option<ValueHandle> {
        let r = self.view(h).fields().find(|(k, _)| *k == key)?.1;
        Some(self.new_handle(r))
    }

    /// Field names and new handles of a record or enum, in key order.
    pub fn fields(&mut self, h: ValueHandle) -> Vec<(String, ValueHandle)> {
        let fields: Vec<(String, Ref)> = self
            .view(h)
            .fields()
            .map(|(k, r)| (k.to_string(), r))
            .collect();
        fields
            .into_iter()
            .map(|(k, r)| (k, self.new_handle(r)))
            .collect()
    }

    pub fn field_names(&self, h: ValueHandle) -> Vec<&str> {
        self.view(h).fields().map(|(k, _)| k).collect()
    }

    /// Creation stamp; every composite's children carry strictly smaller stamps.
    pub fn stamp(&self, h: ValueHandle) -> u64 {
        self.view(h).stamp()
    }

    /// Deep copy into an owned [`Value`].
    pub fn export(&self, h: ValueHandle) -> Value {
        self.export_ref(self.resolve(h))
    }

    fn export_ref(&self, r: Ref) -> Value {
        let o = self.obj(r);
        match o.kind() {
            Kind::Unit => Value::Unit,
            Kind::Bool => Value::Bool(o.bool()),
            Kind::Int => Value::Int(o.int()),
            Kind::Str => Value::Str(o.str().to_string()),
            Kind::Bytes => Value::Bytes(o.blob().to_vec()),
            Kind::List => Value::List(o.children().into_iter().map(|c| self.export_ref(c)).collect()),
            Kind::Record => Value::Record(
                o.fields()
                    .map(|(k, c)| (k.to_string(), self.export_ref(c)))
                    .collect(),
            ),
            Kind::Enum => {
                let (name, variant) = o.enum_tag();
                Value::Enum {
                    name: name.to_string(),
                    variant: variant.to_string(),
                    fields: o
                        .fields()
                        .map(|(k, c)| (k.to_string(), self.export_ref(c)))
                        .collect(),
                }
            }
        }
    }

    /// Structural equality of two heap values.
    pub fn structural_eq(&self, a: ValueHandle, b: ValueHandle) -> bool {
        self.refs_equal(self.resolve(a), self.resolve(b))
    }

    fn refs_equal(&self, a: Ref, b: Ref) -> bool {
        if a == b {
            return true;
        }
        let (x, y) = (self.obj(a), self.obj(b));
        if x.kind() != y.kind() {
            return false;
        }
        match x.kind() {
            Kind::Unit => true,
            Kind::Bool => x.bool() == y.bool(),
            Kind::Int => x.int() == y.int(),
            Kind::Str | Kind::Bytes => x.blob() == y.blob(),
            Kind::List => {
                let (xs, ys) = (x.children(), y.children());
                xs.len() == ys.len() && xs.iter().zip(&ys).all(|(p, q)| self.refs_equal(*p, *q))
            }
            Kind::Record | Kind::Enum => {
                if x.kind() == Kind::Enum && x.enum_tag() != y.enum_tag() {
                    return false;
                }
                let xs: Vec<_> = x.fields().collect();
                let ys: Vec<_> = y.fields().collect();
                xs.len() == ys.len()
                    && xs
                        .iter()
                        .zip(&ys)
                        .all(|((k1, p), (k2, q))| k1 == k2 && self.refs_equal(*p, *q))
            }
        }
    }

    // ---------------------------------------------------------------------
    // Allocation

    pub fn alloc_unit(&mut self) -> Result<ValueHandle, HeapError> {
        self.allocate(Payload::Unit)
    }

    pub fn alloc_bool(&mut self, b: bool) -> Result<ValueHandle, HeapError> {
        self.allocate(Payload::Bool(b))
    }

    pub fn alloc_int(&mut self, i: i64) -> Result<ValueHandle, HeapError> {
        self.allocate(Payload::Int(i))
    }

    pub fn alloc_str(&mut self, s: &str) -> Result<ValueHandle, HeapError> {
        self.allocate(Payload::Str(s))
    }

    pub fn alloc_bytes(&mut self, b: &[u8]) -> Result<ValueHandle, HeapError> {
        self.allocate(Payload::Bytes(b))
    }

    pub fn alloc_list(&mut self, items: &[ValueHandle]) -> Result<ValueHandle, HeapError> {
        self.allocate(Payload::List(items))
    }

    pub fn alloc_record(&mut self, fields: &[(&str, ValueHandle)]) -> Result<ValueHandle, HeapError> {
        self.allocate(Payload::Record(fields))
    }

    pub fn alloc_enum(
        &mut self,
        name: &str,
        variant: &str,
        fields: &[(&str, ValueHandle)],
    ) -> Result<ValueHandle, HeapError> {
        self.allocate(Payload::Enum {
            name,
            variant,
            fields,
        })
    }

    /// Allocates a new value. May run at most one minor collection; fails only
    /// when the live data plus the request would exceed the heap limit.
    pub fn allocate(&mut self, payload: Payload<'_>) -> Result<ValueHandle, HeapError> {
        let size = self.with_body(payload, |_, body| body.encoded_size())?;
        if size > self.config.heap_limit_bytes {
            return Err(HeapError::OversizedAllocation {
                size,
                limit: self.config.heap_limit_bytes,
            });
        }
        if size > self.config.nursery_bytes {
            return self.allocate_large(payload, size);
        }
        let fits_nursery = self.top + size <= self.nursery.len();
        let within_limit = self.old_bytes + self.top + size <= self.config.heap_limit_bytes;
        if !fits_nursery || !within_limit {
            self.collect_for(size)?;
        }
        let stamp = self.take_stamp();
        let offset = self.top;
        // Refs are resolved after any collection above; evacuation moves them.
        let (nursery, young, handles, old) = (&mut self.nursery, &mut self.young, &self.handles, &self.old);
        with_body_parts(handles, payload, |body| {
            check_children(body, stamp, nursery, old);
            body.write(stamp, &mut nursery[offset..offset + size]);
        })?;
        young.push(offset as u32);
        self.top += size;
        Ok(self.new_handle(Ref::young(offset)))
    }

    fn allocate_large(&mut self, payload: Payload<'_>, size: usize) -> Result<ValueHandle, HeapError> {
        let has_young_child = self.with_body(payload, |_, body| body.children().iter().any(|r| r.is_young()))?;
        let start = Instant::now();
        let mut collected = false;
        if has_young_child {
            // Old objects never reference young ones; promote the children first.
            self.minor_collect_inner();
            collected = true;
        }
        if self.old_bytes + size > self.config.heap_limit_bytes {
            self.drain_release_queue(usize::MAX);
        }
        if collected {
            self.record_pause(start.elapsed());
        }
        if self.old_bytes + size > self.config.heap_limit_bytes {
            return Err(HeapError::OutOfMemory {
                requested: size,
                live: self.old_bytes,
                limit: self.config.heap_limit_bytes,
            });
        }
        let stamp = self.take_stamp();
        let mut buf = vec![0u8; size].into_boxed_slice();
        let (nursery, handles, old) = (&self.nursery, &self.handles, &self.old);
        let children = with_body_parts(handles, payload, |body| {
            check_children(body, stamp, nursery, old);
            body.write(stamp, &mut buf);
            body.children()
        })?;
        for c in children {
            self.old[c.index()].rc += 1;
        }
        let slot = self.install_old(buf);
        Ok(self.new_handle(Ref::old(slot)))
    }

    fn with_body<R>(&self, payload: Payload<'_>, f: impl FnOnce(&Self, &Body<'_>) -> R) -> Result<R, HeapError> {
        with_body_parts(&self.handles, payload, |body| f(self, body))
    }

    fn take_stamp(&mut self) -> u64 {
        let s = self.next_stamp;
        self.next_stamp += 1;
        s
    }

    fn install_old(&mut self, obj: Box<[u8]>) -> u32 {
        self.old_bytes += obj.len() + OLD_SLOT_OVERHEAD;
        self.old_objects += 1;
        let slot = OldSlot {
            rc: 0,
            queued: Queued::No,
            obj: Some(obj),
        };
        match self.old_free.pop() {
            Some(i) => {
                self.old[i as usize] = slot;
                i
            }
            None => {
                self.old.push(slot);
                (self.old.len() - 1) as u32
            }
        }
    }

    /// Imports an owned value, sharing nothing with existing heap values.
    pub fn import(&mut self, v: &Value) -> Result<ValueHandle, HeapError> {
        match v {
            Value::Unit => self.alloc_unit(),
            Value::Bool(b) => self.alloc_bool(*b),
            Value::Int(i) => self.alloc_int(*i),
            Value::Str(s) => self.alloc_str(s),
            Value::Bytes(b) => self.alloc_bytes(b),
            Value::List(items) => {
                let hs = self.import_all(items.iter())?;
                let out = self.alloc_list(&hs);
                self.release_all(hs);
                out
            }
            Value::Record(fields) => {
                let hs = self.import_all(fields.values())?;
                let pairs: Vec<(&str, ValueHandle)> = fields.keys().map(String::as_str).zip(hs.iter().copied()).collect();
                let out = self.alloc_record(&pairs);
                self.release_all(hs);
                out
            }
            Value::Enum {
                name,
                variant,
                fields,
            } => {
                let hs = self.import_all(fields.values())?;
                let pairs: Vec<(&str, ValueHandle)> = fields.keys().map(String::as_str).zip(hs.iter().copied()).collect();
                let out = self.alloc_enum(name, variant, &pairs);
                self.release_all(hs);
                out
            }
        }
    }

    fn import_all<'v>(&mut self, items: impl Iterator<Item = &'v Value>) -> Result<Vec<ValueHandle>, HeapError> {
        let mut out = Vec::new();
        for item in items {
            match self.import(item) {
                Ok(h) => out.push(h),
                Err(e) => {
                    self.release_all(out);
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    pub fn release_all(&mut self, hs: impl IntoIterator<Item = ValueHandle>) {
        for h in hs {
            self.release(h);
        }
    }

    // ---------------------------------------------------------------------
    // Collection

    /// Runs a minor collection now. The live handles are the roots.
    pub fn collect(&mut self) -> CollectionReport {
        let start = Instant::now();
        let mut report = self.minor_collect_inner();
        report.pause = start.elapsed();
        self.record_pause(report.pause);
        report
    }

    fn collect_for(&mut self, request: usize) -> Result<(), HeapError> {
        let start = Instant::now();
        self.minor_collect_inner();
        if self.old_bytes + request > self.config.heap_limit_bytes {
            // Before declaring exhaustion, finish every deferred release.
            self.drain_release_queue(usize::MAX);
        }
        self.record_pause(start.elapsed());
        if self.old_bytes + request > self.config.heap_limit_bytes {
            return Err(HeapError::OutOfMemory {
                requested: request,
                live: self.old_bytes,
                limit: self.config.heap_limit_bytes,
            });
        }
        Ok(())
    }

    fn record_pause(&mut self, pause: Duration) {
        self.minor_collections += 1;
        self.pauses.push(pause);
    }

    fn minor_collect_inner(&mut self) -> CollectionReport {
        let mut report = CollectionReport::default();

        // Mark: roots are the live handles pointing into the nursery.
        for e in &self.handles {
            if e.count > 0 && e.target.is_young() {
                self.nursery[e.target.index() + 5] |= FLAG_MARK;
            }
        }
        // Children are always older, i.e. at lower offsets, so one descending
        // pass reaches everything.
        let mut scratch: Vec<usize> = Vec::new();
        for &off in self.young.iter().rev() {
            let off = off as usize;
            if self.nursery[off + 5] & FLAG_MARK == 0 {
                continue;
            }
            scratch.clear();
            let o = Obj::at(&self.nursery[off..]);
            o.for_each_ref_offset(|at| {
                let r = read_ref(o.bytes, at);
                if r.is_young() {
                    scratch.push(r.index());
                }
            });
            for &child in &scratch {
                self.nursery[child + 5] |= FLAG_MARK;
            }
        }

        // Evacuate in ascending order so children are forwarded before parents.
        for i in 0..self.young.len() {
            let off = self.young[i] as usize;
            let size = Obj::at(&self.nursery[off..]).size();
            if self.nursery[off + 5] & FLAG_MARK == 0 {
                report.reclaimed_young_bytes += size;
                continue;
            }
            let mut copy: Box<[u8]> = self.nursery[off..off + size].into();
            copy[5] = 0;
            scratch.clear();
            Obj::at(&copy).for_each_ref_offset(|at| scratch.push(at));
            for &at in &scratch {
                let r = read_ref(&copy, at);
                let slot = if r.is_young() {
                    let fwd = forwarded_slot(&self.nursery, r.index());
                    write_ref(&mut copy, at, Ref::old(fwd));
                    fwd
                } else {
                    r.index() as u32
                };
                self.old[slot as usize].rc += 1;
            }
            let slot = self.install_old(copy);
            self.nursery[off + 5] = FLAG_FORWARDED;
            self.nursery[off + 8..off + 12].copy_from_slice(&slot.to_le_bytes());
            report.promoted_objects += 1;
            report.promoted_bytes += size;
        }

        // Forward the roots.
        for i in 0..self.handles.len() {
            let e = self.handles[i];
            if e.count > 0 && e.target.is_young() {
                let fwd = forwarded_slot(&self.nursery, e.target.index());
                self.handles[i].target = Ref::old(fwd);
                self.old[fwd as usize].rc += 1;
            }
        }

        self.top = 0;
        self.young.clear();
        self.promoted_bytes += report.promoted_bytes as u64;

        // With the nursery empty every count is exact.
        for slot in std::mem::take(&mut self.zct) {
            let s = &mut self.old[slot as usize];
            if s.queued != Queued::Zct {
                continue;
            }
            if s.rc == 0 {
                s.queued = Queued::Release;
                self.release_queue.push_back(slot);
            } else {
                s.queued = Queued::No;
            }
        }
        report.released_objects = self.drain_release_queue(self.config.old_gen_decrement_budget);
        report
    }

    fn drain_release_queue(&mut self, budget: usize) -> usize {
        let mut steps = 0;
        while steps < budget {
            let Some(slot) = self.release_queue.pop_front() else {
                break;
            };
            let obj = self.old[slot as usize]
                .obj
                .take()
                .expect("double release");
            for child in Obj::at(&obj).children() {
                self.dec_old(child.index() as u32, false);
            }
            self.old_bytes -= obj.len() + OLD_SLOT_OVERHEAD;
            self.old_objects -= 1;
            self.old[slot as usize].queued = Queued::No;
            self.old_free.push(slot);
            self.released_objects += 1;
            steps += 1;
        }
        steps
    }

    // ---------------------------------------------------------------------
    // Telemetry

    pub fn stats(&self) -> GcStats {
        let mut sorted = self.pauses.clone();
        sorted.sort_unstable();
        let pick = |q: f64| -> Duration {
            if sorted.is_empty() {
                return Duration::ZERO;
            }
            let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
            sorted[idx]
        };
        GcStats {
            minor_collections: self.minor_collections,
            max_pause: sorted.last().copied().unwrap_or_default(),
            p99_pause: pick(0.99),
            median_pause: pick(0.5),
            live_bytes: self.old_bytes + self.top,
            reserve_bytes: self.reserve_bytes(),
            promoted_bytes: self.promoted_bytes,
            old_objects: self.old_objects,
            released_objects: self.released_objects,
            pending_release: self.release_queue.len() + self.zct.len(),
        }
    }

    /// Measured allocator reserve: the nursery buffer, the young-object table
    /// and the heap's fixed fields.
    pub fn reserve_bytes(&self) -> usize {
        self.nursery.len() + self.young.capacity() * std::mem::size_of::<u32>() + std::mem::size_of::<Heap>()
    }

    /// Pause samples recorded so far.
    pub fn pauses(&self) -> &[Duration] {
        &self.pauses
    }

    /// Forgets pause samples (e.g. after a warm-up phase).
    pub fn reset_pauses(&mut self) {
        self.pauses.clear();
    }

    /// Old-generation bytes, including objects awaiting deferred release.
    pub fn old_bytes(&self) -> usize {
        self.old_bytes
    }

    pub fn young_bytes(&self) -> usize {
        self.top
    }

    pub fn old_objects(&self) -> usize {
        self.old_objects
    }

    pub fn pending_release(&self) -> usize {
        self.release_queue.len() + self.zct.len()
    }

    /// Every object reachable from a live handle, as `(stamp, size)` pairs;
    /// an independent walk used by tests to cross-check the counts.
    pub fn reachable_objects(&self) -> Vec<(u64, usize)> {
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<Ref> = self
            .handles
            .iter()
            .filter(|e| e.count > 0)
            .map(|e| e.target)
            .collect();
        let mut out = Vec::new();
        while let Some(r) = stack.pop() {
            if !seen.insert(r) {
                continue;
            }
            let o = self.obj(r);
            out.push((o.stamp(), o.size()));
            stack.extend(o.children());
        }
        out.sort_unstable();
        out
    }
}

fn forwarded_slot(nursery: &[u8], off: usize) -> u32 {
    debug_assert!(nursery[off + 5] & FLAG_FORWARDED != 0, "live child not forwarded");
    u32::from_le_bytes(nursery[off + 8..off + 12].try_into().unwrap())
}

/// Acyclicity guard: a new composite may only point at strictly older values.
fn check_children(body: &Body<'_>, stamp: u64, nursery: &[u8], old: &[OldSlot]) {
    for c in body.children() {
        let child_stamp = if c.is_young() {
            Obj::at(&nursery[c.index()..]).stamp()
        } else {
            Obj::at(old[c.index()].obj.as_deref().expect("released child")).stamp()
        };
        assert!(child_stamp < stamp, "composite references a younger value");
    }
}

fn with_body_parts<R>(
    handles: &[HandleEntry],
    payload: Payload<'_>,
    f: impl FnOnce(&Body<'_>) -> R,
) -> Result<R, HeapError> {
    let resolve = |h: &ValueHandle| -> Ref {
        let e = handles
            .get(h.index as usize)
            .filter(|e| e.count > 0 && e.generation == h.generation)
            .unwrap_or_else(|| panic!("stale value handle {h:?}"));
        e.target
    };
    let sorted_fields = |fields: &[(&str, ValueHandle)]| -> Result<Vec<(String, Ref)>, HeapError> {
        let mut out: Vec<(String, Ref)> = fields.iter().map(|(k, h)| (k.to_string(), resolve(h))).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(HeapError::DuplicateField(w[0].0.clone()));
        }
        Ok(out)
    };
    Ok(match payload {
        Payload::Unit => f(&Body::Unit),
        Payload::Bool(b) => f(&Body::Bool(b)),
        Payload::Int(i) => f(&Body::Int(i)),
        Payload::Str(s) => f(&Body::Str(s)),
        Payload::Bytes(b) => f(&Body::Bytes(b)),
        Payload::List(items) => {
            let refs: Vec<Ref> = items.iter().map(resolve).collect();
            f(&Body::List(&refs))
        }
        Payload::Record(fields) => {
            let owned = sorted_fields(fields)?;
            let pairs: Vec<(&str, Ref)> = owned.iter().map(|(k, r)| (k.as_str(), *r)).collect();
            f(&Body::Record(&pairs))
        }
        Payload::Enum {
            name,
            variant,
            fields,
        } => {
            let owned = sorted_fields(fields)?;
            let pairs: Vec<(&str, Ref)> = owned.iter().map(|(k, r)| (k.as_str(), *r)).collect();
            f(&Body::Enum {
                name,
                variant,
                fields: &pairs,
            })
        }
    })
}

#[cfg(test)]
mod tests;
