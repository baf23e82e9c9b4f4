//! Flat binary weight container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "FCAN1"
//! repeated until end of file:
//!     u64 name length, name bytes (UTF-8)
//!     u64 rank, rank × u64 dims
//!     prod(dims) × f64 values
//! ```
//!
//! Values are always stored as `f64`, whatever the in-memory scalar.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"FCAN1";

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record, replacing any earlier one with the same name.
    pub fn insert<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        let name = name.into();
        let t = t.cast::<f64>();
        match self.records.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.records.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        self.get(name)
            .map(Tensor::cast)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let mut ck = Checkpoint::new();
        while r.pos < bytes.len() {
            let at = r.pos;
            let n = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint(format!("record at byte {at}: name is not UTF-8")))?
                .to_owned();
            let rank = r.u64()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("record `{name}`: unsupported rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: dims {dims:?} exceed file")))?;
            let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(dims, values).map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
            ck.records.push((name, t));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let mut ck = Checkpoint::new();
        ck.insert("ab", &Tensor::new(vec![2], vec![1.0f64, -0.5]).unwrap());
        let b = ck.to_bytes();
        let mut expected = b"FCAN1".to_vec();
        expected.extend(2u64.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-0.5f64).to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut ck = Checkpoint::new();
        ck.insert("x", &Tensor::<f64>::zeros(&[3, 2]));
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"FCAN2").is_err());
        assert!(Checkpoint::from_bytes(b"FCAN1").unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            records in prop::collection::vec(
                ("[a-z.0-9]{1,12}", prop::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..5,
            )
        ) {
            let mut ck = Checkpoint::new();
            for (name, dims, seed) in &records {
                let mut rng = crate::rng::Rng::seed(*seed);
                // raw bit patterns, including NaN payloads and subnormals
                let n: usize = dims.iter().product();
                let vals = (0..n).map(|_| f64::from_bits(rng.next_u64())).collect();
                ck.insert(name.clone(), &Tensor::new(dims.clone(), vals).unwrap());
            }
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
