//! Named trainable parameters, the AdamW update, and the binary checkpoint
//! container.
//!
//! Checkpoint layout, all integers little-endian `u64`:
//!
//! ```text
//! "LFT1"
//! repeated: name_len, name bytes (UTF-8), rank, dims[rank], f64 payload
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub state: AdamState,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let n = tensor.numel();
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            state: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Sets every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.tensor.shape()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if g.len() != p.tensor.numel() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: p.tensor.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        match &mut p.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b),
            None => p.grad = Some(Tensor::new(p.tensor.shape().to_vec(), g.to_vec())?),
        }
        Ok(())
    }

    /// Multiplies every present gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= c);
            }
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.tensor.rank() as u64).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Overwrites parameter values from a checkpoint. Every stored parameter
    /// must exist here with the same shape, and every parameter here must
    /// be present in the checkpoint.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let header_err = |msg: &str| Error::Checkpoint {
            param: "<header>".into(),
            msg: msg.into(),
        };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(header_err("bad magic, expected LFT1"));
        }
        let mut r = Reader { bytes, pos: 4 };
        let mut seen = vec![false; self.params.len()];
        let mut loaded: Vec<(ParamId, Vec<f64>)> = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u64().ok_or_else(|| header_err("truncated name length"))? as usize;
            let name_bytes = r
                .take(name_len)
                .ok_or_else(|| header_err("truncated parameter name"))?;
            let name = String::from_utf8(name_bytes.to_vec())
                .map_err(|_| header_err("parameter name is not UTF-8"))?;
            let err = |msg: &str| Error::Checkpoint {
                param: name.clone(),
                msg: msg.into(),
            };
            let rank = r.u64().ok_or_else(|| err("truncated rank"))? as usize;
            if rank == 0 || rank > 8 {
                return Err(err("implausible rank"));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64().ok_or_else(|| err("truncated dims"))? as usize);
            }
            let id = self.find(&name).ok_or_else(|| err("unknown parameter"))?;
            if self.params[id.0].tensor.shape() != dims.as_slice() {
                return Err(err(&format!(
                    "shape {:?} does not match model shape {:?}",
                    dims,
                    self.params[id.0].tensor.shape()
                )));
            }
            let n: usize = dims.iter().product();
            let payload = r
                .take(n * 8)
                .ok_or_else(|| err("truncated payload"))?;
            let values: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err("non-finite value"));
            }
            if seen[id.0] {
                return Err(err("duplicate entry"));
            }
            seen[id.0] = true;
            loaded.push((id, values));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint {
                param: self.params[i].name.clone(),
                msg: "missing from checkpoint".into(),
            });
        }
        for (id, values) in loaded {
            self.params[id.0].tensor.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_checkpoint_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    /// One update over every parameter in `store`; gradients are cleared
    /// afterwards. A parameter without a gradient buffer is an error and
    /// leaves the store untouched.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Contract(format!(
                "parameter `{}` has no gradient",
                p.name
            )));
        }
        for p in &mut store.params {
            let grad = p.grad.take().expect("checked above");
            let st = &mut p.state;
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            for (i, (w, &g)) in p.tensor.data_mut().iter_mut().zip(grad.data()).enumerate() {
                *w -= self.lr * self.weight_decay * *w;
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
