//! Parameter containers, the Adam optimizer and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"TODCKPT\0"
//! version  u32       1
//! count    u32       number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8 bytes)
//!   ndim     u32, dims (u64 each)
//!   data     f64 x prod(dims), row-major
//! ```

use std::path::Path;

use ndarray::{ArrayViewD, ArrayViewMutD};
use sha2::{Digest, Sha256};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"TODCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

/// A model whose learnable state is a fixed, ordered list of named tensors.
///
/// `buffers` hold non-learnable state that still belongs in checkpoints.
pub trait Tensors {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;

    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        Vec::new()
    }

    fn fill_zero(&mut self) {
        for mut t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Accumulate `other` into `acc`, tensor by tensor.
pub fn add_assign<P: Tensors>(acc: &mut P, other: &P) {
    for (mut a, (_, b)) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        a += &b;
    }
}

pub fn scale<P: Tensors>(p: &mut P, factor: f64) {
    for mut t in p.tensors_mut() {
        t.mapv_inplace(|x| x * factor);
    }
}

pub fn global_norm<P: Tensors>(p: &P) -> f64 {
    p.tensors().iter().map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<P> {
    cfg: AdamConfig,
    step: i32,
    m: P,
    v: P,
}

impl<P: Tensors + Clone> Adam<P> {
    pub fn new(params: &P, cfg: AdamConfig) -> Self {
        let mut m = params.clone();
        m.fill_zero();
        let v = m.clone();
        Adam { cfg, step: 0, m, v }
    }

    pub fn step(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let grads = grads.tensors();
        for (((mut p, mut m), mut v), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            ndarray::Zip::from(&mut p).and(&mut m).and(&mut v).and(&g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

fn all_state<P: Tensors>(p: &P) -> Vec<(String, ArrayViewD<'_, f64>)> {
    let mut v = p.tensors();
    v.extend(p.buffers());
    v
}

pub fn to_bytes<P: Tensors>(p: &P) -> Vec<u8> {
    let state = all_state(p);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in &state {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Hex SHA-256 of the checkpoint encoding.
pub fn digest<P: Tensors>(p: &P) -> String {
    hex::encode(Sha256::digest(to_bytes(p)))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn parse_bytes(buf: &[u8]) -> Result<Vec<StoredTensor>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(StoredTensor { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(out)
}

/// Overwrite `p` with stored values; names and shapes must match exactly.
pub fn load_bytes_into<P: Tensors>(p: &mut P, buf: &[u8]) -> Result<(), CheckpointError> {
    let stored = parse_bytes(buf)?;
    let expected: Vec<(String, Vec<usize>)> =
        all_state(p).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if stored.len() != expected.len() {
        return Err(CheckpointError::Mismatch(format!(
            "expected {} tensors, found {}",
            expected.len(),
            stored.len()
        )));
    }
    for (s, (name, shape)) in stored.iter().zip(&expected) {
        if &s.name != name || &s.shape != shape {
            return Err(CheckpointError::Mismatch(format!(
                "expected {name} {shape:?}, found {} {:?}",
                s.name, s.shape
            )));
        }
    }
    let mut i = 0;
    for mut t in p.tensors_mut() {
        for (dst, src) in t.iter_mut().zip(&stored[i].data) {
            *dst = *src;
        }
        i += 1;
    }
    for mut t in p.buffers_mut() {
        for (dst, src) in t.iter_mut().zip(&stored[i].data) {
            *dst = *src;
        }
        i += 1;
    }
    Ok(())
}

pub fn save<P: Tensors>(p: &P, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(p))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_into<P: Tensors>(p: &mut P, path: &Path) -> Result<(), CheckpointError> {
    let buf = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    load_bytes_into(p, &buf)
}
