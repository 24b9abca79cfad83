//! Dense row-major tensors and the `MAST` binary file format.
//!
//! Layout of a `MAST` file:
//!
//! | bytes            | content                          |
//! |------------------|----------------------------------|
//! | 4                | magic `b"MAST"`                  |
//! | 1                | version, currently `1`           |
//! | 1                | rank `r`                         |
//! | 4 · r            | extents, `u32` little-endian     |
//! | 4 · Π extents    | data, `f32` little-endian        |
//!
//! Values are always stored as `f32`; an `f64` tensor is narrowed on write.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAST_MAGIC: &[u8; 4] = b"MAST";
pub const MAST_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Element-type conversion through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean of all values, accumulated in `f64`.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / self.data.len() as f64
    }

    /// Copy of item `index` along the leading axis, keeping a leading extent of 1.
    pub fn select(&self, index: usize) -> Result<Self> {
        let lead = self.shape[0];
        if index >= lead {
            return Err(Error::shape("select", format!("index {index} >= {lead}")));
        }
        let stride = self.data.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Stacks tensors of identical shape along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let inner = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Self::new(shape, data)
    }

    pub fn to_mast_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.rank() + 4 * self.len());
        out.extend_from_slice(MAST_MAGIC);
        out.push(MAST_VERSION);
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
        out
    }

    /// Parses a `MAST` buffer; `origin` only labels errors.
    pub fn from_mast_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |field: &str, detail: String| Error::format(origin, field, detail);
        if bytes.len() < 6 {
            return Err(bad("header", format!("{} bytes is too short", bytes.len())));
        }
        if &bytes[..4] != MAST_MAGIC {
            return Err(bad("magic", format!("{:?}", &bytes[..4])));
        }
        if bytes[4] != MAST_VERSION {
            return Err(bad("version", format!("unsupported version {}", bytes[4])));
        }
        let rank = bytes[5] as usize;
        if rank == 0 {
            return Err(bad("rank", "rank 0".into()));
        }
        let body = 6 + 4 * rank;
        if bytes.len() < body {
            return Err(bad("extents", "truncated".into()));
        }
        let shape: Vec<usize> = bytes[6..body]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if shape.contains(&0) {
            return Err(bad("extents", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if bytes.len() != body + 4 * n {
            return Err(bad(
                "data",
                format!("expected {} data bytes, found {}", 4 * n, bytes.len() - body),
            ));
        }
        let data = bytes[body..]
            .chunks_exact(4)
            .map(|c| T::from_f32_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save_mast(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_mast_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_mast(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_mast_bytes(&bytes, path)
    }
}
