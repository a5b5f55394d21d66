//! Reverse-mode autodiff over a linear operation tape.
//!
//! The tape covers exactly the operations the weight-allocator and projector
//! forward passes are built from. Node values are held in f64 so that tape
//! gradients can be validated against central finite differences at tight
//! tolerances; public tensors remain f32 at the boundary.

use crate::error::{Error, Result};
use crate::tensor::{gelu_derivative, gelu_scalar, Tensor};

/// Handle to a node on the tape. Nodes only reference earlier nodes, so the
/// creation order is already a topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = a @ b
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// out = a @ b^T
    MatmulNT {
        a: NodeId,
        b: NodeId,
    },
    /// out = a + b (same shape)
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// out[i][j] = m[i][j] + bias[j]
    AddBias {
        m: NodeId,
        bias: NodeId,
    },
    /// out = c * a
    Scale {
        a: NodeId,
        c: f64,
    },
    /// out = s * a where s is a scalar node
    ScaleBy {
        a: NodeId,
        s: NodeId,
    },
    /// scalar node holding a[flat]
    Index {
        a: NodeId,
        flat: usize,
    },
    Gelu {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    SoftmaxRows {
        a: NodeId,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    SliceCols {
        a: NodeId,
        from: usize,
        to: usize,
    },
    SliceRows {
        a: NodeId,
        from: usize,
    },
    /// scalar sum of all entries
    SumAll {
        a: NodeId,
    },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    /// Node value rounded back to an f32 tensor.
    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(
            vec![n.rows, n.cols],
            n.value.iter().map(|&v| v as f32).collect(),
        )
        .expect("tape node shape is consistent")
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        id
    }

    /// Registers a differentiation leaf from an f32 tensor (rank 1 or 2;
    /// vectors become a single row).
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        let (rows, cols) = match t.shape() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Config(format!(
                    "tape leaves must be rank 1 or 2, got {other:?}"
                )))
            }
        };
        let value = t.data().iter().map(|&v| v as f64).collect();
        let id = self.push(Op::Leaf, rows, cols, value);
        self.leaves.push(id);
        Ok(id)
    }

    /// Registers a constant; structurally a leaf but not tracked as a
    /// differentiation target.
    pub fn constant(&mut self, t: &Tensor) -> Result<NodeId> {
        let id = self.leaf(t)?;
        self.leaves.pop();
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::shape("tape matmul", &[m, ka], &[kb, n]));
        }
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..ka {
                    acc += self.nodes[a.0].value[i * ka + p] * self.nodes[b.0].value[p * n + j];
                }
                value[i * n + j] = acc;
            }
        }
        Ok(self.push(Op::Matmul { a, b }, m, n, value))
    }

    /// a @ b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(Error::shape("tape matmul_nt", &[m, ka], &[n, kb]));
        }
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..ka {
                    acc += self.nodes[a.0].value[i * ka + p] * self.nodes[b.0].value[j * ka + p];
                }
                value[i * n + j] = acc;
            }
        }
        Ok(self.push(Op::MatmulNT { a, b }, m, n, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return Err(Error::shape(
                "tape add",
                &[sa.0, sa.1],
                &[self.shape(b).0, self.shape(b).1],
            ));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add { a, b }, sa.0, sa.1, value))
    }

    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(m);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Error::shape("tape add_bias", &[r, c], &[br, bc]));
        }
        let mut value = self.nodes[m.0].value.clone();
        for row in value.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(&self.nodes[bias.0].value) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddBias { m, bias }, r, c, value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (r, cols) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(Op::Scale { a, c }, r, cols, value)
    }

    /// Entrywise product with a scalar node.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Contract("scale_by expects a scalar node".into()));
        }
        let sv = self.nodes[s.0].value[0];
        let (r, c) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|x| x * sv).collect();
        Ok(self.push(Op::ScaleBy { a, s }, r, c, value))
    }

    /// Scalar node holding one entry of `a` (flat row-major index).
    pub fn index(&mut self, a: NodeId, flat: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if flat >= r * c {
            return Err(Error::Range(format!(
                "index {flat} out of range for {r}x{c} node"
            )));
        }
        let value = vec![self.nodes[a.0].value[flat]];
        Ok(self.push(Op::Index { a, flat }, 1, 1, value))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| gelu_scalar(x))
            .collect();
        self.push(Op::Gelu { a }, r, c, value)
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, d) = self.shape(x);
        if d < 2 {
            return Err(Error::Config(format!(
                "layer_norm over degenerate dimension {d} (need >= 2)"
            )));
        }
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(Error::shape("tape layer_norm affine", &[1, d], &[0, 0]));
        }
        let mut value = vec![0.0; r * d];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            for j in 0..d {
                value[i * d + j] = (row[j] - mean) / denom * self.nodes[gain.0].value[j]
                    + self.nodes[bias.0].value[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, r, d, value))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut value = self.nodes[a.0].value.clone();
        for row in value.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::SoftmaxRows { a }, r, c, value)
    }

    /// Concatenates same-height nodes along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let r = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::Contract("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let c = self.shape(p).1;
            for i in 0..r {
                value[i * total + off..i * total + off + c]
                    .copy_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            r,
            total,
            value,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if from >= to || to > c {
            return Err(Error::Range(format!(
                "column slice {from}..{to} out of range for width {c}"
            )));
        }
        let w = to - from;
        let mut value = vec![0.0; r * w];
        for i in 0..r {
            value[i * w..(i + 1) * w]
                .copy_from_slice(&self.nodes[a.0].value[i * c + from..i * c + to]);
        }
        Ok(self.push(Op::SliceCols { a, from, to }, r, w, value))
    }

    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if from >= to || to > r {
            return Err(Error::Range(format!(
                "row slice {from}..{to} out of range for height {r}"
            )));
        }
        let value = self.nodes[a.0].value[from * c..to * c].to_vec();
        Ok(self.push(Op::SliceRows { a, from }, to - from, c, value))
    }

    pub fn slice_row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.slice_rows(a, i, i + 1)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        self.push(Op::SumAll { a }, 1, 1, value)
    }

    /// Reverse pass from a scalar loss node. Every node is visited exactly
    /// once in reverse topological order; leaves never touched by the loss
    /// keep zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    // dA += G @ B^T ; dB += A^T @ G
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * self.nodes[b.0].value[p * n + j];
                            }
                            grads[a.0][i * k + p] += acc;
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += self.nodes[a.0].value[i * k + p] * g[i * n + j];
                            }
                            grads[b.0][p * n + j] += acc;
                        }
                    }
                }
                Op::MatmulNT { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).0;
                    // C = A @ B^T: dA += G @ B ; dB += G^T @ A
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * self.nodes[b.0].value[j * k + p];
                            }
                            grads[a.0][i * k + p] += acc;
                        }
                    }
                    for j in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += g[i * n + j] * self.nodes[a.0].value[i * k + p];
                            }
                            grads[b.0][j * k + p] += acc;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (dst, &gv) in grads[a.0].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                    for (dst, &gv) in grads[b.0].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                }
                Op::AddBias { m, bias } => {
                    let c = self.shape(*m).1;
                    for (dst, &gv) in grads[m.0].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                    for (j, dst) in grads[bias.0].iter_mut().enumerate() {
                        *dst += g.iter().skip(j).step_by(c).sum::<f64>();
                    }
                }
                Op::Scale { a, c } => {
                    for (dst, &gv) in grads[a.0].iter_mut().zip(&g) {
                        *dst += gv * c;
                    }
                }
                Op::ScaleBy { a, s } => {
                    let sv = self.nodes[s.0].value[0];
                    let mut ds = 0.0;
                    for ((dst, &gv), &av) in
                        grads[a.0].iter_mut().zip(&g).zip(&self.nodes[a.0].value)
                    {
                        *dst += gv * sv;
                        ds += gv * av;
                    }
                    grads[s.0][0] += ds;
                }
                Op::Index { a, flat } => {
                    grads[a.0][*flat] += g[0];
                }
                Op::Gelu { a } => {
                    for ((dst, &gv), &x) in
                        grads[a.0].iter_mut().zip(&g).zip(&self.nodes[a.0].value)
                    {
                        *dst += gv * gelu_derivative(x);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (r, d) = self.shape(*x);
                    for i in 0..r {
                        let row = &self.nodes[x.0].value[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let denom = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / denom).collect();
                        let grow = &g[i * d..(i + 1) * d];
                        // d beta, d gamma
                        for j in 0..d {
                            grads[bias.0][j] += grow[j];
                            grads[gain.0][j] += grow[j] * xhat[j];
                        }
                        // d x: (gy - mean(gy) - xhat * mean(gy . xhat)) / denom
                        let gy: Vec<f64> = (0..d)
                            .map(|j| grow[j] * self.nodes[gain.0].value[j])
                            .collect();
                        let mean_gy = gy.iter().sum::<f64>() / d as f64;
                        let mean_gy_xhat =
                            gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            grads[x.0][i * d + j] +=
                                (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) / denom;
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    let (r, c) = self.shape(*a);
                    for i in 0..r {
                        let y = &self.nodes[idx].value[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..c {
                            grads[a.0][i * c + j] += y[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = self.nodes[idx].cols;
                    let r = self.nodes[idx].rows;
                    let mut off = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        for i in 0..r {
                            for j in 0..c {
                                grads[p.0][i * c + j] += g[i * total + off + j];
                            }
                        }
                        off += c;
                    }
                }
                Op::SliceCols { a, from, to } => {
                    let c = self.shape(*a).1;
                    let w = to - from;
                    for i in 0..self.nodes[idx].rows {
                        for j in 0..w {
                            grads[a.0][i * c + from + j] += g[i * w + j];
                        }
                    }
                }
                Op::SliceRows { a, from } => {
                    let c = self.shape(*a).1;
                    for (off, &gv) in g.iter().enumerate() {
                        grads[a.0][from * c + off] += gv;
                    }
                }
                Op::SumAll { a } => {
                    for dst in grads[a.0].iter_mut() {
                        *dst += g[0];
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
