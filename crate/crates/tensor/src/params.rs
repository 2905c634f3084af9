//! Named parameter storage and the checkpoint file format.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic "GSFP" | version u8 | count u32
//! per entry: name_len u32 | name utf8 | ndim u32 | dims u64 * ndim | data f64 * numel
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Gradients, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSFP";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    /// Copies every parameter into `g` as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// `self ← rate · online + (1 − rate) · self`, entry by entry.
    pub fn ema_from(&mut self, online: &ParamStore, rate: f64) -> Result<()> {
        if online.len() != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "ema",
                left: vec![self.len()],
                right: vec![online.len()],
            });
        }
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            if t.shape() != o.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "ema",
                    left: t.shape().to_vec(),
                    right: o.shape().to_vec(),
                });
            }
            t.data_mut()
                .iter_mut()
                .zip(o.data())
                .for_each(|(x, y)| *x = rate * y + (1.0 - rate) * *x);
        }
        Ok(())
    }

    /// Euclidean distance over all entries.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.l2_distance(b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u8(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = r.read_u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| TensorError::Checkpoint(format!("parameter name: {e}")))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

/// Graph handles of a bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the store; `None` where no gradient flowed.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.add("enc.w0", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-9, 7.0]).unwrap());
        s.add("bias", Tensor::vector(vec![0.25]));
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], CHECKPOINT_MAGIC);
        let back = ParamStore::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let err = ParamStore::read_checkpoint(&b"NOPE\x01\0\0\0\0"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn ema_matches_formula() {
        let mut target = ParamStore::new();
        target.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut online = ParamStore::new();
        online.add("w", Tensor::vector(vec![3.0, -2.0]));
        target.ema_from(&online, 0.25).unwrap();
        assert_eq!(target.tensors()[0].data(), &[0.25 * 3.0 + 0.75, 0.25 * -2.0 + 0.75 * 2.0]);
    }
}
