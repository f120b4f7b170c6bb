//! Canonical byte encoding shared by signatures, digests, the simulator's
//! message-size model and trace persistence.
//!
//! The format is fixed and implementation-independent:
//! * integers: 8-byte big-endian,
//! * byte strings: 4-byte big-endian length prefix, then the bytes,
//! * lists: 4-byte big-endian element count, then each element,
//! * enum variants: a single tag byte, then the variant's fields in order,
//! * options: one byte (0 absent / 1 present), then the value if present,
//! * fixed 32-byte digests: raw, no prefix.
//!
//! Encoding a value of a given type is injective: two values encode to the
//! same bytes only if they are equal.

/// Types with a canonical byte representation.
pub trait CanonicalEncode {
    fn encode_into(&self, out: &mut Vec<u8>);

    fn encoded(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Length of the canonical encoding; used as the wire size of messages.
    fn encoded_len(&self) -> usize {
        self.encoded().len()
    }
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

pub fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

pub fn put_digest(out: &mut Vec<u8>, d: &[u8; 32]) {
    out.extend_from_slice(d);
}

pub fn put_list<T: CanonicalEncode>(out: &mut Vec<u8>, items: &[T]) {
    out.extend_from_slice(&(items.len() as u32).to_be_bytes());
    for it in items {
        it.encode_into(out);
    }
}

pub fn put_option<T: CanonicalEncode>(out: &mut Vec<u8>, v: &Option<T>) {
    match v {
        None => out.push(0),
        Some(x) => {
            out.push(1);
            x.encode_into(out);
        }
    }
}

impl CanonicalEncode for u64 {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, *self);
    }
}

impl CanonicalEncode for Vec<u8> {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_bytes(out, self);
    }
}
