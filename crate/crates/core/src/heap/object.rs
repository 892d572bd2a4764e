//! Byte layout of heap objects.
//!
//! Every object, young or old, is the same little-endian byte string:
//!
//! ```text
//! [0..4)   total size in bytes (multiple of 8)
//! [4]      kind tag
//! [5]      flags (mark / forwarded, nursery only)
//! [6..8)   reserved, zero
//! [8..16)  creation stamp (nursery copy: forwarding slot once evacuated)
//! [16..)   payload
//! ```
//!
//! Payloads:
//!
//! ```text
//! Unit     -
//! Bool     u8, padded
//! Int      i64
//! Str      u32 len, utf-8 bytes, padded
//! Bytes    u32 len, bytes, padded
//! List     u32 n, n x u32 ref
//! Record   u32 n, n x field
//! Enum     u32 len, name (pad 4), u32 len, variant (pad 4), u32 n, n x field
//! field    u32 ref, u32 key len, key bytes (pad 4)
//! ```
//!
//! Record and enum fields are stored sorted by key.

use super::value::Kind;

pub(crate) const HEADER_BYTES: usize = 16;
pub(crate) const FLAG_MARK: u8 = 1;
pub(crate) const FLAG_FORWARDED: u8 = 2;

/// Smallest possible object (a `Unit`); bounds the object count of a nursery.
pub const MIN_OBJECT_BYTES: usize = HEADER_BYTES;

const YOUNG_BIT: u32 = 1 << 31;

/// Internal reference to an object: a nursery offset or an old-generation slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) struct Ref(u32);

impl Ref {
    pub(crate) fn young(offset: usize) -> Ref {
        debug_assert!(offset < YOUNG_BIT as usize);
        Ref(offset as u32 | YOUNG_BIT)
    }

    pub(crate) fn old(slot: u32) -> Ref {
        debug_assert!(slot < YOUNG_BIT);
        Ref(slot)
    }

    pub(crate) fn is_young(self) -> bool {
        self.0 & YOUNG_BIT != 0
    }

    pub(crate) fn index(self) -> usize {
        (self.0 & !YOUNG_BIT) as usize
    }

    pub(crate) fn raw(self) -> u32 {
        self.0
    }

    pub(crate) fn from_raw(raw: u32) -> Ref {
        Ref(raw)
    }
}

/// Allocation request with children already resolved to internal refs.
pub(crate) enum Body<'a> {
    Unit,
    Bool(bool),
    Int(i64),
    Str(&'a str),
    Bytes(&'a [u8]),
    List(&'a [Ref]),
    Record(&'a [(&'a str, Ref)]),
    Enum {
        name: &'a str,
        variant: &'a str,
        fields: &'a [(&'a str, Ref)],
    },
}

fn align8(n: usize) -> usize {
    (n + 7) & !7
}

fn align4(n: usize) -> usize {
    (n + 3) & !3
}

fn fields_size(fields: &[(&str, Ref)]) -> usize {
    4 + fields.iter().map(|(k, _)| 8 + align4(k.len())).sum::<usize>()
}

impl Body<'_> {
    pub(crate) fn kind(&self) -> Kind {
        match self {
            Body::Unit => Kind::Unit,
            Body::Bool(_) => Kind::Bool,
            Body::Int(_) => Kind::Int,
            Body::Str(_) => Kind::Str,
            Body::Bytes(_) => Kind::Bytes,
            Body::List(_) => Kind::List,
            Body::Record(_) => Kind::Record,
            Body::Enum { .. } => Kind::Enum,
        }
    }

    pub(crate) fn encoded_size(&self) -> usize {
        let payload = match self {
            Body::Unit => 0,
            Body::Bool(_) | Body::Int(_) => 8,
            Body::Str(s) => 4 + s.len(),
            Body::Bytes(b) => 4 + b.len(),
            Body::List(items) => 4 + 4 * items.len(),
            Body::Record(fields) => fields_size(fields),
            Body::Enum {
                name,
                variant,
                fields,
            } => 4 + align4(name.len()) + 4 + align4(variant.len()) + fields_size(fields),
        };
        HEADER_BYTES + align8(payload)
    }

    pub(crate) fn children(&self) -> Vec<Ref> {
        match self {
            Body::List(items) => items.to_vec(),
            Body::Record(fields) | Body::Enum { fields, .. } => {
                fields.iter().map(|(_, r)| *r).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Writes the object into `out`, which must be exactly `encoded_size()` long.
    pub(crate) fn write(&self, stamp: u64, out: &mut [u8]) {
        debug_assert_eq!(out.len(), self.encoded_size());
        out.fill(0);
        let size = out.len() as u32;
        out[0..4].copy_from_slice(&size.to_le_bytes());
        out[4] = self.kind() as u8;
        out[8..16].copy_from_slice(&stamp.to_le_bytes());
        let mut w = Writer {
            buf: out,
            pos: HEADER_BYTES,
        };
        match self {
            Body::Unit => {}
            Body::Bool(b) => w.buf[HEADER_BYTES] = *b as u8,
            Body::Int(i) => w.bytes(&i.to_le_bytes()),
            Body::Str(s) => w.blob(s.as_bytes(), 1),
            Body::Bytes(b) => w.blob(b, 1),
            Body::List(items) => {
                w.u32(items.len() as u32);
                for r in items.iter() {
                    w.u32(r.raw());
                }
            }
            Body::Record(fields) => w.fields(fields),
            Body::Enum {
                name,
                variant,
                fields,
            } => {
                w.blob(name.as_bytes(), 4);
                w.blob(variant.as_bytes(), 4);
                w.fields(fields);
            }
        }
    }
}

struct Writer<'a> {
    buf: &'a mut [u8],
    pos: usize,
}

impl Writer<'_> {
    fn bytes(&mut self, b: &[u8]) {
        self.buf[self.pos..self.pos + b.len()].copy_from_slice(b);
        self.pos += b.len();
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn blob(&mut self, b: &[u8], align: usize) {
        self.u32(b.len() as u32);
        self.bytes(b);
        if align == 4 {
            self.pos = align4(self.pos);
        }
    }

    fn fields(&mut self, fields: &[(&str, Ref)]) {
        self.u32(fields.len() as u32);
        for (k, r) in fields {
            self.u32(r.raw());
            self.blob(k.as_bytes(), 4);
        }
    }
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Read-only view of an encoded object.
#[derive(Clone, Copy)]
pub(crate) struct Obj<'a> {
    pub(crate) bytes: &'a [u8],
}

impl<'a> Obj<'a> {
    /// View of the object starting at `bytes[0]`; trailing bytes are ignored.
    pub(crate) fn at(bytes: &'a [u8]) -> Obj<'a> {
        let size = read_u32(bytes, 0) as usize;
        Obj {
            bytes: &bytes[..size],
        }
    }

    pub(crate) fn size(&self) -> usize {
        self.bytes.len()
    }

    pub(crate) fn kind(&self) -> Kind {
        Kind::from_u8(self.bytes[4]).expect("corrupt object kind")
    }

    pub(crate) fn stamp(&self) -> u64 {
        u64::from_le_bytes(self.bytes[8..16].try_into().unwrap())
    }

    pub(crate) fn bool(&self) -> bool {
        self.bytes[HEADER_BYTES] != 0
    }

    pub(crate) fn int(&self) -> i64 {
        i64::from_le_bytes(self.bytes[HEADER_BYTES..HEADER_BYTES + 8].try_into().unwrap())
    }

    fn blob_at(&self, at: usize) -> (&'a [u8], usize) {
        let len = read_u32(self.bytes, at) as usize;
        (&self.bytes[at + 4..at + 4 + len], at + 4 + len)
    }

    pub(crate) fn blob(&self) -> &'a [u8] {
        self.blob_at(HEADER_BYTES).0
    }

    pub(crate) fn str(&self) -> &'a str {
        // Only ever written from a `&str`.
        std::str::from_utf8(self.blob()).expect("corrupt string object")
    }

    /// `(enum name, variant name, offset of the field table)`
    fn enum_header(&self) -> (&'a str, &'a str, usize) {
        let (name, next) = self.blob_at(HEADER_BYTES);
        let (variant, next) = self.blob_at(align4(next));
        (
            std::str::from_utf8(name).expect("corrupt enum name"),
            std::str::from_utf8(variant).expect("corrupt enum variant"),
            align4(next),
        )
    }

    pub(crate) fn enum_tag(&self) -> (&'a str, &'a str) {
        let (n, v, _) = self.enum_header();
        (n, v)
    }

    pub(crate) fn list_len(&self) -> usize {
        read_u32(self.bytes, HEADER_BYTES) as usize
    }

    pub(crate) fn list_item(&self, i: usize) -> Ref {
        Ref::from_raw(read_u32(self.bytes, HEADER_BYTES + 4 + 4 * i))
    }

    fn field_table(&self) -> Option<usize> {
        match self.kind() {
            Kind::Record => Some(HEADER_BYTES),
            Kind::Enum => Some(self.enum_header().2),
            _ => None,
        }
    }

    /// Fields of a record or enum in key order.
    pub(crate) fn fields(&self) -> Fields<'a> {
        match self.field_table() {
            Some(at) => Fields {
                bytes: self.bytes,
                remaining: read_u32(self.bytes, at) as usize,
                pos: at + 4,
            },
            None => Fields {
                bytes: self.bytes,
                remaining: 0,
                pos: 0,
            },
        }
    }

    /// Calls `f` with the byte offset of every child reference in the payload.
    pub(crate) fn for_each_ref_offset(&self, mut f: impl FnMut(usize)) {
        match self.kind() {
            Kind::List => {
                for i in 0..self.list_len() {
                    f(HEADER_BYTES + 4 + 4 * i);
                }
            }
            Kind::Record | Kind::Enum => {
                let mut it = self.fields();
                while it.remaining > 0 {
                    f(it.pos);
                    it.next();
                }
            }
            _ => {}
        }
    }

    pub(crate) fn children(&self) -> Vec<Ref> {
        let mut out = Vec::new();
        self.for_each_ref_offset(|at| out.push(read_ref(self.bytes, at)));
        out
    }
}

pub(crate) struct Fields<'a> {
    bytes: &'a [u8],
    remaining: usize,
    pos: usize,
}

impl<'a> Iterator for Fields<'a> {
    type Item = (&'a str, Ref);

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        let r = Ref::from_raw(read_u32(self.bytes, self.pos));
        let len = read_u32(self.bytes, self.pos + 4) as usize;
        let key = &self.bytes[self.pos + 8..self.pos + 8 + len];
        self.pos = align4(self.pos + 8 + len);
        self.remaining -= 1;
        Some((std::str::from_utf8(key).expect("corrupt field key"), r))
    }
}

pub(crate) fn write_ref(bytes: &mut [u8], at: usize, r: Ref) {
    bytes[at..at + 4].copy_from_slice(&r.raw().to_le_bytes());
}

pub(crate) fn read_ref(bytes: &[u8], at: usize) -> Ref {
    Ref::from_raw(read_u32(bytes, at))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_are_aligned_and_minimal() {
        assert_eq!(Body::Unit.encoded_size(), MIN_OBJECT_BYTES);
        assert_eq!(Body::Int(7).encoded_size(), 24);
        assert_eq!(Body::Str("abcd").encoded_size(), 24);
        assert_eq!(Body::Str("abcde").encoded_size(), 32);
        let kids = [Ref::old(1), Ref::young(8), Ref::old(3)];
        assert_eq!(Body::List(&kids).encoded_size(), 16 + 16);
    }

    #[test]
    fn enum_layout_round_trips() {
        let fields = [("info", Ref::old(4)), ("value", Ref::young(64))];
        let body = Body::Enum {
            name: "APIResult",
            variant: "Success",
            fields: &fields,
        };
        let mut buf = vec![0u8; body.encoded_size()];
        body.write(99, &mut buf);
        let obj = Obj::at(&buf);
        assert_eq!(obj.kind(), Kind::Enum);
        assert_eq!(obj.stamp(), 99);
        assert_eq!(obj.enum_tag(), ("APIResult", "Success"));
        let got: Vec<_> = obj.fields().collect();
        assert_eq!(got, fields.to_vec());
        assert_eq!(obj.children(), vec![Ref::old(4), Ref::young(64)]);
    }

    #[test]
    fn scalar_payloads() {
        let mut buf = vec![0u8; Body::Int(-5).encoded_size()];
        Body::Int(-5).write(1, &mut buf);
        assert_eq!(Obj::at(&buf).int(), -5);
        let body = Body::Bytes(&[1, 2, 3]);
        let mut buf = vec![0u8; body.encoded_size()];
        body.write(2, &mut buf);
        assert_eq!(Obj::at(&buf).blob(), &[1, 2, 3]);
    }
}
