//! Named parameter collections and their binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    b"EVPS"
//! version  u32            (PARAMS_FORMAT_VERSION)
//! count    u32
//! repeated count times:
//!   name_len u32, name UTF-8 bytes
//!   ndim     u32, dims u64 × ndim
//!   payload  f64 × product(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use super::DenseArray;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"EVPS";
pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// Named parameters of one or more networks. Iteration order is the sorted
/// name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, DenseArray>,
}

/// Gradients keyed and shaped like the owning [`ParamSet`].
pub type GradSet = ParamSet;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Adds weight `[fan_in × fan_out]` and zero bias `[fan_out]`, with the
    /// weight drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_affine<R: Rng>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..=a))
            .collect();
        self.insert(format!("{prefix}.w"), DenseArray::new(vec![fan_in, fan_out], w)?)?;
        self.insert(format!("{prefix}.b"), DenseArray::zeros(&[fan_out]))
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(DenseArray::len).sum()
    }

    /// A set with the same keys and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), DenseArray::zeros(v.shape())))
                .collect(),
        }
    }

    /// Subset of entries whose name starts with `prefix`.
    pub fn section(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn merge_from(&mut self, other: &ParamSet) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|v| v.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.entries.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&PARAMS_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, value) in &self.entries {
            write_named_array(&mut w, name, value)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::format("parameter container", "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != PARAMS_FORMAT_VERSION {
            return Err(Error::format(
                "parameter container",
                format!("unsupported version {version}"),
            ));
        }
        let count = read_u32(&mut r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let (name, value) = read_named_array(&mut r)?;
            set.insert(name, value)?;
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

pub(crate) fn write_named_array<W: Write>(w: &mut W, name: &str, value: &DenseArray) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
    for &d in value.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(value.len() * 8);
    for v in value.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_named_array<R: Read>(r: &mut R) -> Result<(String, DenseArray)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(Error::format("named array", "name too long"));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| Error::format("named array", e.to_string()))?;
    let ndim = read_u32(r)? as usize;
    if ndim > 16 {
        return Err(Error::format("named array", format!("{ndim} dimensions")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, DenseArray::new(shape, data)?))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", DenseArray::scalar(1.0)).unwrap();
        assert!(p.insert("a", DenseArray::scalar(2.0)).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.insert_affine("l", 10, 6, &mut rng).unwrap();
        let a = (6.0f64 / 16.0).sqrt();
        assert!(p.get("l.w").unwrap().data().iter().all(|v| v.abs() <= a));
        assert!(p.get("l.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut p = ParamSet::new();
        p.insert("x", DenseArray::from_vec(vec![1.0, 2.0])).unwrap();
        let bytes = p.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamSet::from_bytes(&bad).is_err());
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            name in "[a-z.]{1,12}",
        ) {
            let mut p = ParamSet::new();
            let n = values.len();
            p.insert(name.clone(), DenseArray::new(vec![n], values.clone()).unwrap()).unwrap();
            p.insert(format!("{name}_m"), DenseArray::new(vec![1, n], values).unwrap()).unwrap();
            let bytes = p.to_bytes();
            let back = ParamSet::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
