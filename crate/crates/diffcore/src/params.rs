use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{DiffError, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// First/second moment estimates and step count for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    fn fresh(shape: (usize, usize)) -> Self {
        Self {
            m: Tensor::zeros(shape.0, shape.1),
            v: Tensor::zeros(shape.0, shape.1),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Set when a gradient was accumulated since the last update.
    pub has_grad: bool,
    pub adam: Option<AdamState>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with their gradients and Adam state, iterated in name
/// order so that every traversal is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let shape = value.shape();
        self.params.insert(
            name,
            Param {
                value,
                grad: Tensor::zeros(shape.0, shape.1),
                has_grad: false,
                adam: Some(AdamState::fresh(shape)),
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).filter(|p| p.has_grad).map(|p| &p.grad)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Adds the parameter gradients recorded on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, g) in tape.param_grads() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
            if p.grad.shape() != g.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "accumulate_grads",
                    lhs: p.grad.shape(),
                    rhs: g.shape(),
                });
            }
            p.grad.add_assign(g);
            p.has_grad = true;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
            p.has_grad = false;
        }
    }

    /// Bias-corrected Adam update of every parameter holding a gradient,
    /// followed by a gradient reset. Parameters no gradient reached are left
    /// untouched, including their step count.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            if !p.has_grad {
                continue;
            }
            let state = p
                .adam
                .as_mut()
                .ok_or_else(|| DiffError::MissingOptimizerState(name.clone()))?;
            state.step += 1;
            let t = state.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let g = p.grad.data();
            let m = state.m.data_mut();
            let v = state.v.data_mut();
            for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Drops optimizer state, leaving an inference-only store.
    pub fn strip_optimizer_state(&mut self) {
        for p in self.params.values_mut() {
            p.adam = None;
        }
    }
}

const MAGIC: &[u8; 8] = b"DCKPT\0\0\x01";

/// Checkpoint container, all integers and floats little-endian:
///
/// ```text
/// magic      8 bytes  "DCKPT\0\0\x01"
/// header_len u32      followed by `header_len` bytes of opaque UTF-8
/// count      u64      number of parameters, then per parameter in name order:
///   name_len u32, name bytes
///   rows u64, cols u64
///   has_adam u8 (0/1), step u64
///   value    rows*cols f64
///   m, v     rows*cols f64 each, present only when has_adam = 1
/// ```
///
/// Gradients are not stored.
impl ParameterStore {
    pub fn write_checkpoint<W: Write>(&self, mut w: W, header: &str) -> Result<()> {
        w.write_all(MAGIC)?;
        let header = header.as_bytes();
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let (r, c) = p.value.shape();
            w.write_all(&(r as u64).to_le_bytes())?;
            w.write_all(&(c as u64).to_le_bytes())?;
            match &p.adam {
                Some(s) => {
                    w.write_all(&[1])?;
                    w.write_all(&s.step.to_le_bytes())?;
                }
                None => {
                    w.write_all(&[0])?;
                    w.write_all(&0u64.to_le_bytes())?;
                }
            }
            write_f64s(&mut w, p.value.data())?;
            if let Some(s) = &p.adam {
                write_f64s(&mut w, s.m.data())?;
                write_f64s(&mut w, s.v.data())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint, returning the store and its header text.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DiffError::Checkpoint("bad magic".into()));
        }
        let hlen = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; hlen];
        r.read_exact(&mut header)?;
        let header = String::from_utf8(header).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let count = read_u64(&mut r)?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let step = read_u64(&mut r)?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| DiffError::Checkpoint(format!("shape overflow for `{name}`")))?;
            let value = Tensor::new(rows, cols, read_f64s(&mut r, n)?)?;
            let adam = match flag[0] {
                0 => None,
                1 => Some(AdamState {
                    m: Tensor::new(rows, cols, read_f64s(&mut r, n)?)?,
                    v: Tensor::new(rows, cols, read_f64s(&mut r, n)?)?,
                    step,
                }),
                f => return Err(DiffError::Checkpoint(format!("bad optimizer flag {f}"))),
            };
            if store.params.contains_key(&name) {
                return Err(DiffError::DuplicateParam(name));
            }
            store.params.insert(
                name,
                Param {
                    value,
                    grad: Tensor::zeros(rows, cols),
                    has_grad: false,
                    adam,
                },
            );
        }
        Ok((store, header))
    }
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
