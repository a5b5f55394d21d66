//! Minimal dense numeric core: row-major f32 tensors and the handful of
//! operations the encoder and allocator stacks are built from.
//!
//! Storage is 32-bit; every reduction (dot products, row sums, means,
//! variances) accumulates in 64-bit before rounding back, so results are
//! bit-identical across runs and platforms.

use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape("tensor construction", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// 2-D tensor from nested rows; rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Config("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite_all(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows of a 2-D tensor (or the leading extent generally).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent; the vector width all row-wise ops act over.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f32 {
        let (d1, d2) = (self.shape[1], self.shape[2]);
        self.data[(i * d1 + j) * d2 + k]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose2(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }
}

// ── Core operations ──────────────────────────────────────────────────

/// Matrix product of two 2-D tensors. Inner dot products accumulate in f64.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a.data[i * k + p] as f64 * b.data[p * n + j] as f64;
            }
            out.data[i * n + j] = acc as f32;
        }
    }
    Ok(out)
}

/// Elementwise sum; shapes must match exactly.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

/// Adds a length-`cols` bias vector to every row.
pub fn add_bias(m: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = m.cols();
    if bias.numel() != c {
        return Err(Error::shape("add_bias", m.shape(), bias.shape()));
    }
    let mut out = m.clone();
    for row in out.data.chunks_mut(c) {
        for (x, b) in row.iter_mut().zip(&bias.data) {
            *x += b;
        }
    }
    Ok(out)
}

pub fn scale(m: &Tensor, c: f32) -> Tensor {
    let data = m.data.iter().map(|x| x * c).collect();
    Tensor {
        shape: m.shape.clone(),
        data,
    }
}

/// Row-stabilized softmax over the trailing dimension. Total on finite input:
/// the row maximum is subtracted before exponentiation, so entries like 1e3
/// cannot overflow. Row sums accumulate in f64.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = ((*v - max) as f64).exp();
            sum += e;
            *v = e as f32;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    out
}

/// Per-vector normalization over the trailing dimension, then affine.
/// Mean and variance accumulate in f64; variance is the population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::Config(format!(
            "layer_norm over degenerate dimension {d} (need >= 2)"
        )));
    }
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::shape("layer_norm affine", &[d], gain.shape()));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let denom = (var + eps as f64).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            let norm = (*v as f64 - mean) / denom;
            *v = (norm * gain.data[j] as f64 + bias.data[j] as f64) as f32;
        }
    }
    Ok(out)
}

/// Gaussian-CDF GELU evaluated exactly via erf: `x * phi(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x
        .data
        .iter()
        .map(|&v| gelu_scalar(v as f64) as f32)
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

// ── Multi-head attention ─────────────────────────────────────────────

/// Projection weights for one attention layer. Weights are laid out
/// `[in, out]` so activations multiply on the left as row vectors.
pub struct MhaParams<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
}

/// Multi-head self-attention over `x: [t, d]`. Per-head scores are scaled by
/// 1/sqrt(d/heads), softmaxed row-wise, value-mixed, concatenated, and
/// projected. Returns the output `[t, d]` and the stacked per-head attention
/// maps `[heads, t, t]` (each row sums to 1).
pub fn multi_head_attention(
    x: &Tensor,
    params: &MhaParams,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let (t, d) = (x.shape[0], x.shape[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = add_bias(&matmul(x, params.wq)?, params.bq)?;
    let k = add_bias(&matmul(x, params.wk)?, params.bk)?;
    let v = add_bias(&matmul(x, params.wv)?, params.bv)?;

    let mut ctx = Tensor::zeros(vec![t, d]);
    let mut attn = Tensor::zeros(vec![heads, t, t]);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let off = h * dh;
        // scores[i][j] = q_i . k_j / sqrt(dh)
        let mut scores = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0f64;
                for p in 0..dh {
                    acc += q.data[i * d + off + p] as f64 * k.data[j * d + off + p] as f64;
                }
                scores.data[i * t + j] = (acc * scale) as f32;
            }
        }
        let probs = softmax_rows(&scores);
        for i in 0..t {
            for p in 0..dh {
                let mut acc = 0.0f64;
                for j in 0..t {
                    acc += probs.data[i * t + j] as f64 * v.data[j * d + off + p] as f64;
                }
                ctx.data[i * d + off + p] = acc as f32;
            }
        }
        attn.data[h * t * t..(h + 1) * t * t].copy_from_slice(&probs.data);
    }
    let out = add_bias(&matmul(&ctx, params.wo)?, params.bo)?;
    Ok((out, attn))
}
