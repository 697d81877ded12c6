//! Forward operations. Each op validates shapes, computes the result, and —
//! when any input lives on a tape — records a node so gradients flow on
//! `backward`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::tape::{NodeRef, Op, Tape};
use crate::tensor::Tensor;

/// Numerical floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn common_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some(node) = t.node() {
            match &found {
                None => found = Some(node.tape.clone()),
                Some(tape) => {
                    if !Tape::same_tape(tape, &node.tape) {
                        return Err(Error::Tape("operation mixes two tapes".into()));
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Computes the output tensor and records `make_op` on the inputs' tape.
fn build(
    inputs: &[&Tensor],
    data: Vec<f64>,
    shape: Vec<usize>,
    make_op: impl FnOnce(&[usize]) -> Op,
) -> Result<Tensor> {
    let data = Rc::new(data);
    let mut out = Tensor {
        shape,
        data: data.clone(),
        node: None,
    };
    if let Some(tape) = common_tape(inputs)? {
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            ids.push(tape.enlist(t)?);
        }
        let op = make_op(&ids);
        let id = tape.push(op, data, out.shape.clone());
        out = out.with_node(NodeRef { tape, id });
    }
    Ok(out)
}

fn check_same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{name}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        build(&[self, other], data, self.shape().to_vec(), |ids| {
            Op::Add(ids[0], ids[1])
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        build(&[self, other], data, self.shape().to_vec(), |ids| {
            Op::Sub(ids[0], ids[1])
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        build(&[self, other], data, self.shape().to_vec(), |ids| {
            Op::Mul(ids[0], ids[1])
        })
    }

    /// Elementwise `k * x + c` with scalar constants.
    pub fn affine(&self, k: f64, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| k * v + c).collect();
        build(&[self], data, self.shape().to_vec(), |ids| {
            Op::Affine(ids[0], k)
        })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.affine(-1.0, 0.0)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::mm_nn(self.data(), other.data(), m, k, n, &mut data);
        build(&[self, other], data, vec![m, n], |ids| {
            Op::Matmul(ids[0], ids[1])
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose: {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        build(&[self], data, vec![n, m], |ids| Op::Transpose(ids[0]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        build(&[self], self.data().to_vec(), shape.to_vec(), |ids| {
            Op::Reshape(ids[0])
        })
    }

    /// Axis-0 block slice `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let rows = self.rows();
        if start >= end || end > rows {
            return Err(Error::shape(format!(
                "slice_rows {start}..{end} of {rows} rows"
            )));
        }
        let block = self.numel() / rows;
        let data = self.data()[start * block..end * block].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = end - start;
        build(&[self], data, shape, |ids| {
            Op::SliceRows(ids[0], start, block)
        })
    }

    /// Single row as a `[1, cols]` (or length-1 block) tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        self.slice_rows(i, i + 1)
    }

    /// 2-D column slice `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::shape(format!("slice_cols {start}..{end} of {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let out_cols = end - start;
        let src = self.data();
        let mut data = vec![0.0; rows * out_cols];
        for i in 0..rows {
            data[i * out_cols..(i + 1) * out_cols]
                .copy_from_slice(&src[i * cols + start..i * cols + end]);
        }
        build(&[self], data, vec![rows, out_cols], |ids| {
            Op::SliceCols(ids[0], start, cols)
        })
    }

    /// Gathers axis-0 blocks: output block `j` is input block `idx[j]`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let rows = self.rows();
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(Error::shape(format!("gather_rows: index {bad} >= {rows}")));
        }
        let block = self.numel() / rows;
        let mut data = Vec::with_capacity(idx.len() * block);
        for &r in idx {
            data.extend_from_slice(&self.data()[r * block..(r + 1) * block]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let idx = Rc::new(idx.to_vec());
        build(&[self], data, shape, |ids| {
            Op::GatherRows(ids[0], idx.clone())
        })
    }

    /// `out[i] = self[i, idx[i]]` for a 2-D tensor.
    pub fn pick(&self, idx: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(Error::shape(format!("pick: {:?} with {} indices", s, idx.len())));
        }
        let cols = s[1];
        if let Some(&bad) = idx.iter().find(|&&c| c >= cols) {
            return Err(Error::shape(format!("pick: column {bad} >= {cols}")));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &c)| self.data()[i * cols + c])
            .collect();
        let idx = Rc::new(idx.to_vec());
        build(&[self], data, vec![s[0]], |ids| Op::Pick(ids[0], idx.clone()))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        build(&[self], data, self.shape().to_vec(), |ids| {
            Op::Sigmoid(ids[0])
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        build(&[self], data, self.shape().to_vec(), |ids| Op::Relu(ids[0]))
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.exp()).collect();
        build(&[self], data, self.shape().to_vec(), |ids| Op::Exp(ids[0]))
    }

    pub fn ln(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.ln()).collect();
        build(&[self], data, self.shape().to_vec(), |ids| Op::Ln(ids[0]))
    }

    pub fn abs(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.abs()).collect();
        build(&[self], data, self.shape().to_vec(), |ids| Op::Abs(ids[0]))
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let n = self.last_dim();
        if n == 0 {
            return Err(Error::shape("softmax over empty last dim"));
        }
        let mut data = vec![0.0; self.numel()];
        for (ds, xs) in data
            .chunks_mut(n)
            .zip(self.data().chunks(n))
        {
            let max = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if !max.is_finite() {
                return Err(Error::Numeric("softmax over non-finite input".into()));
            }
            let mut sum = 0.0;
            for (d, &x) in ds.iter_mut().zip(xs) {
                *d = (x - max).exp();
                sum += *d;
            }
            for d in ds.iter_mut() {
                *d /= sum;
            }
        }
        build(&[self], data, self.shape().to_vec(), |ids| {
            Op::SoftmaxLastDim(ids[0])
        })
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax_lastdim(&self) -> Result<Tensor> {
        let n = self.last_dim();
        if n == 0 {
            return Err(Error::shape("log_softmax over empty last dim"));
        }
        let mut data = vec![0.0; self.numel()];
        for (ds, xs) in data.chunks_mut(n).zip(self.data().chunks(n)) {
            let max = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if !max.is_finite() {
                return Err(Error::Numeric("log_softmax over non-finite input".into()));
            }
            let lse = max
                + xs.iter()
                    .map(|&x| (x - max).exp())
                    .sum::<f64>()
                    .ln();
            for (d, &x) in ds.iter_mut().zip(xs) {
                *d = x - lse;
            }
        }
        build(&[self], data, self.shape().to_vec(), |ids| {
            Op::LogSoftmaxLastDim(ids[0])
        })
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let n = self.last_dim();
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::shape(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                self.shape(),
                gain.shape(),
                bias.shape()
            )));
        }
        let mut data = vec![0.0; self.numel()];
        for (ds, xs) in data.chunks_mut(n).zip(self.data().chunks(n)) {
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((d, &x), (&g, &b)) in ds
                .iter_mut()
                .zip(xs)
                .zip(gain.data().iter().zip(bias.data()))
            {
                *d = (x - mean) * inv * g + b;
            }
        }
        build(&[self, gain, bias], data, self.shape().to_vec(), |ids| {
            Op::LayerNorm {
                x: ids[0],
                gain: ids[1],
                bias: ids[2],
                eps: LAYER_NORM_EPS,
            }
        })
    }

    /// Adds `bias` (shape `[n]`) to every trailing-dimension slice.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = self.last_dim();
        if bias.shape() != [n] {
            return Err(Error::shape(format!(
                "add_bias: x {:?}, bias {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let b = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        build(&[self, bias], data, self.shape().to_vec(), |ids| {
            Op::AddBias(ids[0], ids[1])
        })
    }

    /// Elementwise `ln(exp(a) + exp(b))`, stabilized.
    pub fn logaddexp(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("logaddexp", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| {
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .collect();
        build(&[self, other], data, self.shape().to_vec(), |ids| {
            Op::LogAddExp(ids[0], ids[1])
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data().iter().sum();
        build(&[self], vec![total], vec![1], |ids| Op::Sum(ids[0]))
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let total: f64 = self.data().iter().sum();
        build(&[self], vec![total / self.numel() as f64], vec![1], |ids| {
            Op::Mean(ids[0])
        })
    }

    /// Runs reverse accumulation from this scalar.
    pub fn backward(&self) -> Result<()> {
        let node = self
            .node()
            .ok_or_else(|| Error::Tape("backward on untaped tensor".into()))?;
        node.tape.clone().backward(self)
    }
}

/// Axis-0 concatenation.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_rows of nothing"));
    }
    let inner = &parts[0].shape()[1..];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if &p.shape()[1..] != inner {
            return Err(Error::shape(format!(
                "concat_rows: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] = rows;
    let lens: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    build(parts, data, shape, |ids| {
        Op::ConcatRows(ids.iter().copied().zip(lens).collect())
    })
}

/// 2-D column concatenation.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols of nothing"));
    }
    let rows = parts[0].shape()[0];
    let mut total_cols = 0;
    for p in parts {
        if p.shape().len() != 2 || p.shape()[0] != rows {
            return Err(Error::shape(format!(
                "concat_cols: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
        total_cols += p.shape()[1];
    }
    let mut data = vec![0.0; rows * total_cols];
    let mut col_off = 0;
    for p in parts {
        let cols = p.shape()[1];
        for i in 0..rows {
            data[i * total_cols + col_off..i * total_cols + col_off + cols]
                .copy_from_slice(&p.data()[i * cols..(i + 1) * cols]);
        }
        col_off += cols;
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    build(parts, data, vec![rows, total_cols], |ids| {
        Op::ConcatCols(ids.iter().copied().zip(widths).collect())
    })
}
