//! Dense multiway arrays.
//!
//! A [`Tensor`] stores its entries in a single flat buffer, row-major over the
//! declared mode order: the last mode varies fastest. Every module, the binary
//! format and the JSON debug form share this layout.
//!
//! Mode indices are zero-based throughout the Rust API.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Magic bytes opening a serialized tensor.
pub const TENSOR_MAGIC: [u8; 4] = *b"TNSR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(arg_err!("tensor order must be at least 1"));
    }
    if let Some(m) = shape.iter().position(|&s| s == 0) {
        return Err(arg_err!("mode {m} has size 0"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(arg_err!(
                "shape {shape:?} needs {len} entries, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![0.0; len] })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for m in (0..shape.len()).rev() {
                idx[m] += 1;
                if idx[m] < shape[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Order-1 tensor holding `v`.
    pub fn vector(v: Vec<f64>) -> Result<Self> {
        Self::new(vec![v.len()], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.order()];
        for m in (0..self.order().saturating_sub(1)).rev() {
            strides[m] = strides[m + 1] * self.shape[m + 1];
        }
        strides
    }

    pub fn get(&self, idx: &[usize]) -> Option<f64> {
        if idx.len() != self.order() || idx.iter().zip(&self.shape).any(|(i, s)| i >= s) {
            return None;
        }
        let off: usize = idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        Some(self.data[off])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mode-`mode` matricization: an `I_mode x prod(I_j, j != mode)` matrix.
    ///
    /// Row `i` collects every entry whose index along `mode` is `i`; columns
    /// enumerate the remaining indices in row-major order.
    pub fn unfold(&self, mode: usize) -> Result<Tensor> {
        if mode >= self.order() {
            return Err(arg_err!("mode {mode} out of range for order {}", self.order()));
        }
        let rows = self.shape[mode];
        let cols = self.len() / rows;
        // outer: product of modes before `mode`, inner: product after
        let inner: usize = self.shape[mode + 1..].iter().product();
        let mut out = vec![0.0; self.len()];
        for (off, &v) in self.data.iter().enumerate() {
            let o = off / (rows * inner);
            let i = (off / inner) % rows;
            let r = off % inner;
            out[i * cols + o * inner + r] = v;
        }
        Tensor::new(vec![rows, cols], out)
    }

    /// Inverse of [`Tensor::unfold`] for a tensor of the given `shape`.
    pub fn refold(matrix: &Tensor, mode: usize, shape: &[usize]) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if mode >= shape.len() {
            return Err(arg_err!("mode {mode} out of range for order {}", shape.len()));
        }
        let rows = shape[mode];
        let cols = len / rows;
        if matrix.shape() != [rows, cols] {
            return Err(arg_err!(
                "matrix shape {:?} does not unfold {shape:?} along mode {mode}",
                matrix.shape()
            ));
        }
        let inner: usize = shape[mode + 1..].iter().product();
        let mut out = vec![0.0; len];
        for (off, slot) in out.iter_mut().enumerate() {
            let o = off / (rows * inner);
            let i = (off / inner) % rows;
            let r = off % inner;
            *slot = matrix.data[i * cols + o * inner + r];
        }
        Tensor::new(shape.to_vec(), out)
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_u32::<LittleEndian>(self.order() as u32)?;
        for &s in &self.shape {
            w.write_u64::<LittleEndian>(s as u64)?;
        }
        for &v in &self.data {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    /// Reads one tensor; returns `Ok(None)` on a clean end of stream.
    pub fn read_binary<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
        let mut magic = [0u8; 4];
        match r.read_exact(&mut magic) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        if magic != TENSOR_MAGIC {
            return Err(Error::Data(format!("bad tensor magic {magic:?}")));
        }
        let order = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..order)
            .map(|_| r.read_u64::<LittleEndian>().map(|s| s as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let len = check_shape(&shape)?;
        let mut data = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        Tensor::new(shape, data).map(Some)
    }
}

/// `out[j..] = sum_i beta[j.., i..] * x[i..] + bias[j..]`.
///
/// `beta`'s leading modes must equal `bias`'s shape and its trailing modes
/// must equal `x`'s shape.
pub fn multilinear_apply(beta: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (lead, trail) = split_modes(beta, bias.shape(), x.shape())?;
    let n_in = x.len();
    let mut out = bias.data.clone();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &beta.data[j * n_in..(j + 1) * n_in];
        *o += dot(row, &x.data);
    }
    debug_assert_eq!(lead * trail, beta.len());
    Tensor::new(bias.shape.clone(), out)
}

fn split_modes(beta: &Tensor, out_shape: &[usize], in_shape: &[usize]) -> Result<(usize, usize)> {
    let expected: Vec<usize> = out_shape.iter().chain(in_shape).copied().collect();
    if beta.shape() != expected.as_slice() {
        return Err(arg_err!(
            "beta shape {:?} does not match output {out_shape:?} x input {in_shape:?}",
            beta.shape()
        ));
    }
    Ok((out_shape.iter().product(), in_shape.iter().product()))
}

pub fn frobenius_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(arg_err!("shape mismatch {:?} vs {:?}", a.shape, b.shape));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
