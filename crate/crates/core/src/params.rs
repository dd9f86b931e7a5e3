//! Named parameter tensors and their binary encoding.

use std::collections::BTreeMap;
use std::sync::Arc;

use diffcore::{Graph, NodeId, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

/// Leaf handles of every parameter on one graph.
pub struct Bound(BTreeMap<String, NodeId>);

impl Bound {
    /// Handles recorded elsewhere, for example as named expression inputs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Bound(pairs.into_iter().collect())
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(|t| &**t)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    /// Mutable access; clones the tensor only if a graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.tensors {
            out.insert(name.clone(), g.leaf(name, Arc::clone(t))?);
        }
        Ok(Bound(out))
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn hash(&self) -> String {
        seed::sha256_hex(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_values() * 8 + 64 * self.len());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            write_tensor(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(buf: &mut &[u8]) -> Result<Self> {
        let n = read_u64(buf)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let (name, t) = read_tensor(buf)?;
            store.insert(name, t);
        }
        Ok(store)
    }
}

pub(crate) fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

pub(crate) fn read_u64(buf: &mut &[u8]) -> Result<u64> {
    if buf.len() < 8 {
        return Err(Error::Checkpoint("truncated".into()));
    }
    let (head, rest) = buf.split_at(8);
    *buf = rest;
    Ok(u64::from_le_bytes(head.try_into().expect("8 bytes")))
}

pub(crate) fn read_bytes<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint("truncated".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub(crate) fn read_tensor(buf: &mut &[u8]) -> Result<(String, Tensor)> {
    let len = read_u64(buf)? as usize;
    let name = String::from_utf8(read_bytes(buf, len)?.to_vec())
        .map_err(|_| Error::Checkpoint("bad name".into()))?;
    let rank = read_u64(buf)? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(buf).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    let raw = read_bytes(buf, count * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8"))))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    Ok((name, t))
}

/// Uniform Glorot initialization from a stream keyed by the parameter name.
pub fn glorot(seed: u64, name: &str, rows: usize, cols: usize, gain: f64) -> Tensor {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = seed::rng(seed, name, 0);
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

pub fn normal(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut rng = seed::rng(seed, name, 0);
    let data = (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_bit_exact() {
        let mut p = ParamStore::new();
        p.insert(
            "a",
            Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        p.insert("b", Tensor::vector(vec![0.1, 0.2]));
        let bytes = p.to_bytes();
        let q = ParamStore::from_bytes(&mut bytes.as_slice()).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        assert_eq!(q.hash(), p.hash());
    }
}
