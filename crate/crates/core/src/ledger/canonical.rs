//! Canonical byte encoding used for every hash in the ledger.
//!
//! Fields are concatenated in declared order. Integers are 8-byte little
//! endian, reals are IEEE-754 binary64 little endian, strings and byte fields
//! carry an 8-byte little-endian length prefix.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// A SHA-256 digest. Hex-encoded in every textual form.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0; 32]);

    pub fn of(bytes: &[u8]) -> Hash32 {
        Hash32(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Hash32> {
        let v = hex::decode(s).ok()?;
        Some(Hash32(v.try_into().ok()?))
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash32({})", self.to_hex())
    }
}

impl Serialize for Hash32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hash32::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn digest(&self) -> Hash32 {
        Hash32::of(&self.buf)
    }
}

/// Cursor over canonically encoded bytes.
#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("malformed canonical encoding at byte {0}")]
pub struct DecodeError(pub usize);

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError(self.pos))?;
        if end > self.buf.len() {
            return Err(DecodeError(self.pos));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let at = self.pos;
        let n = usize::try_from(self.u64()?).map_err(|_| DecodeError(at))?;
        self.take(n)
    }

    pub fn hash(&mut self) -> Result<Hash32, DecodeError> {
        let at = self.pos;
        let b = self.bytes()?;
        Ok(Hash32(b.try_into().map_err(|_| DecodeError(at))?))
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        let at = self.pos;
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| DecodeError(at))
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(DecodeError(self.pos))
        }
    }
}

/// Serializes `value` as compact JSON with object keys in sorted order.
pub fn sorted_json<T: Serialize>(value: &T) -> Vec<u8> {
    // serde_json::Value keeps objects in a BTreeMap, so a round trip sorts keys.
    let v = serde_json::to_value(value).expect("payload types always serialize");
    serde_json::to_vec(&v).expect("json value always serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_layout() {
        let mut e = Encoder::new();
        e.u64(1).f64(1.0).str("ab");
        let b = e.finish();
        assert_eq!(b.len(), 8 + 8 + 8 + 2);
        assert_eq!(&b[..8], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[8..16], &1.0f64.to_le_bytes());
        assert_eq!(&b[16..24], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[24..], b"ab");
    }

    #[test]
    fn decoder_rejects_overlong_prefix() {
        let mut e = Encoder::new();
        e.u64(u64::MAX);
        let b = e.finish();
        assert!(Decoder::new(&b).bytes().is_err());
    }

    #[test]
    fn sorted_json_orders_keys() {
        #[derive(Serialize)]
        struct P {
            zeta: u8,
            alpha: u8,
        }
        assert_eq!(sorted_json(&P { zeta: 1, alpha: 2 }), br#"{"alpha":2,"zeta":1}"#);
    }
}
