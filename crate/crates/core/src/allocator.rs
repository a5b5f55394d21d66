//! Global semantic-guided weight allocation: cls tokens are projected to the
//! allocator width, contextualized by stacked transformer blocks, and the
//! global token's averaged attention row becomes the per-image weights that
//! scale each block of patch embeddings.
//!
//! Three strategies: self-attention blocks (default), cross-attention blocks
//! (global row queries the tile rows), and a plain cosine-similarity scorer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, ShuffledEmbeddingSet, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{self, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "self-attn")]
    SelfAttn,
    #[serde(rename = "cross-attn")]
    CrossAttn,
    #[serde(rename = "cosine-similarity")]
    CosineSimilarity,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::SelfAttn => "self-attn",
            Strategy::CrossAttn => "cross-attn",
            Strategy::CosineSimilarity => "cosine-similarity",
        };
        f.write_str(s)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self-attn" => Ok(Strategy::SelfAttn),
            "cross-attn" => Ok(Strategy::CrossAttn),
            "cosine-similarity" => Ok(Strategy::CosineSimilarity),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected self-attn, cross-attn, or cosine-similarity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GswaConfig {
    /// Hidden width D_g of the allocator stack.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for GswaConfig {
    fn default() -> Self {
        GswaConfig {
            dim: 1024,
            blocks: 4,
            heads: 4,
            strategy: Strategy::SelfAttn,
            seed: 42,
        }
    }
}

impl GswaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "allocator dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.strategy != Strategy::CosineSimilarity && self.blocks == 0 {
            return Err(Error::Config(
                "attention strategies need at least one transformer block".into(),
            ));
        }
        Ok(())
    }
}

/// Per-image cls rows `[count, D_g]`; tiles first, global row last.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsMatrix {
    pub rows: Tensor,
}

impl ClsMatrix {
    pub fn count(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn global_row(&self) -> &[f32] {
        self.rows.row(self.count() - 1)
    }
}

/// The allocated weights: a point on the probability simplex, ordered like
/// the cls rows (tiles first, global last).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    w: Vec<f32>,
}

impl WeightVector {
    pub fn new(w: Vec<f32>) -> Self {
        WeightVector { w }
    }

    pub fn values(&self) -> &[f32] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn global(&self) -> f32 {
        *self.w.last().expect("weight vectors are never empty")
    }

    pub fn sum(&self) -> f64 {
        self.w.iter().map(|&v| v as f64).sum()
    }

    /// Max deviation from the simplex: |sum - 1| and range violations.
    pub fn simplex_defect(&self) -> f64 {
        let sum_err = (self.sum() - 1.0).abs();
        let range_err = self
            .w
            .iter()
            .map(|&v| {
                if v < 0.0 {
                    -v as f64
                } else if v > 1.0 {
                    (v - 1.0) as f64
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        sum_err.max(range_err)
    }
}

/// Weighted patch embeddings `[count, M/4, 4D]`, cls slots removed.
#[derive(Debug, Clone)]
pub struct WeightedEmbeddings {
    pub tokens: Tensor,
}

impl WeightedEmbeddings {
    pub fn image_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_image(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn total_tokens(&self) -> usize {
        self.image_count() * self.tokens_per_image()
    }
}

/// Stacks the cls vectors of every image into a `[count, 4D]` matrix,
/// tiles in order, global last.
pub fn cls_matrix_of(e: &ShuffledEmbeddingSet) -> Tensor {
    let count = e.image_count();
    let d = e.dim();
    let mut data = Vec::with_capacity(count * d);
    for i in 0..count {
        let start = i * e.tokens_per_image() * d;
        data.extend_from_slice(&e.tokens.data()[start..start + d]);
    }
    Tensor::new(vec![count, d], data).expect("dimensions from the set itself")
}

// ── Parameters ───────────────────────────────────────────────────────

/// Registers every allocator tensor under the `gswa.` namespace.
/// `input_width` is the incoming cls width (4D from the pixel shuffle).
pub fn init_params(cfg: &GswaConfig, input_width: usize, store: &mut ParamStore) {
    params::init_linear(store, cfg.seed, "gswa.proj", input_width, cfg.dim);
    for b in 0..cfg.blocks {
        encoder::init_block_params(store, cfg.seed, &format!("gswa.block{b}"), cfg.dim);
    }
    // The weight-extraction layer needs only query/key maps; value weights
    // exist for layout parity but stay out of the weight path.
    for proj in ["q", "k", "v"] {
        params::init_matrix(
            store,
            cfg.seed,
            &format!("gswa.extract.{proj}"),
            cfg.dim,
            cfg.dim,
        );
    }
}

/// Names of every allocator parameter for a given config, in tape order.
pub fn param_names(cfg: &GswaConfig) -> Vec<String> {
    let mut names = vec!["gswa.proj.w".to_string(), "gswa.proj.b".to_string()];
    for b in 0..cfg.blocks {
        let p = format!("gswa.block{b}");
        for suffix in [
            "ln1.g",
            "ln1.b",
            "attn.q.w",
            "attn.q.b",
            "attn.k.w",
            "attn.k.b",
            "attn.v.w",
            "attn.v.b",
            "attn.o.w",
            "attn.o.b",
            "ln2.g",
            "ln2.b",
            "ffn.fc1.w",
            "ffn.fc1.b",
            "ffn.fc2.w",
            "ffn.fc2.b",
        ] {
            names.push(format!("{p}.{suffix}"));
        }
    }
    names.push("gswa.extract.q".to_string());
    names.push("gswa.extract.k".to_string());
    names.push("gswa.extract.v".to_string());
    names
}

// ── Forward operations ───────────────────────────────────────────────

/// Affine map of each cls row into the allocator width.
pub fn project_cls(cls: &Tensor, store: &ParamStore) -> Result<ClsMatrix> {
    let w = store.get("gswa.proj.w")?;
    if cls.rank() != 2 || cls.shape()[1] != w.shape()[0] {
        return Err(Error::Config(format!(
            "cls width {:?} does not match projection input {:?}",
            cls.shape(),
            w.shape()
        )));
    }
    let rows = tensor::add_bias(&tensor::matmul(cls, w)?, store.get("gswa.proj.b")?)?;
    Ok(ClsMatrix { rows })
}

/// Runs the configured transformer stack over the cls rows.
pub fn contextualize(m: &ClsMatrix, store: &ParamStore, cfg: &GswaConfig) -> Result<ClsMatrix> {
    cfg.validate()?;
    let mut x = m.rows.clone();
    for b in 0..cfg.blocks {
        let prefix = format!("gswa.block{b}");
        x = match cfg.strategy {
            Strategy::SelfAttn => encoder::block_forward(&x, store, &prefix, cfg.heads)?,
            Strategy::CrossAttn => cross_block_forward(&x, store, &prefix, cfg.heads)?,
            Strategy::CosineSimilarity => {
                return Err(Error::Config(
                    "contextualize requires an attention strategy".into(),
                ))
            }
        };
    }
    Ok(ClsMatrix { rows: x })
}

/// Cross-attention block: the global (last) row queries the tile rows and
/// the resulting context update is added to every row, so equal rows stay
/// equal through the block. With no tile rows the sub-layer is skipped.
fn cross_block_forward(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    let count = x.shape()[0];
    let d = x.shape()[1];
    let tiles = count - 1;
    let mut x = x.clone();
    if tiles >= 1 {
        let normed = tensor::layer_norm(
            &x,
            store.get(&format!("{prefix}.ln1.g"))?,
            store.get(&format!("{prefix}.ln1.b"))?,
            LAYER_NORM_EPS,
        )?;
        let q_in = Tensor::new(vec![1, d], normed.row(count - 1).to_vec())?;
        let kv_in = Tensor::new(vec![tiles, d], normed.data()[..tiles * d].to_vec())?;

        let q = tensor::add_bias(
            &tensor::matmul(&q_in, store.get(&format!("{prefix}.attn.q.w"))?)?,
            store.get(&format!("{prefix}.attn.q.b"))?,
        )?;
        let k = tensor::add_bias(
            &tensor::matmul(&kv_in, store.get(&format!("{prefix}.attn.k.w"))?)?,
            store.get(&format!("{prefix}.attn.k.b"))?,
        )?;
        let v = tensor::add_bias(
            &tensor::matmul(&kv_in, store.get(&format!("{prefix}.attn.v.w"))?)?,
            store.get(&format!("{prefix}.attn.v.b"))?,
        )?;

        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Tensor::zeros(vec![1, d]);
        for h in 0..heads {
            let off = h * dh;
            let mut scores = Tensor::zeros(vec![1, tiles]);
            for j in 0..tiles {
                let mut acc = 0.0f64;
                for p in 0..dh {
                    acc += q.data()[off + p] as f64 * k.at2(j, off + p) as f64;
                }
                scores.data_mut()[j] = (acc * scale) as f32;
            }
            let probs = tensor::softmax_rows(&scores);
            for p in 0..dh {
                let mut acc = 0.0f64;
                for j in 0..tiles {
                    acc += probs.data()[j] as f64 * v.at2(j, off + p) as f64;
                }
                ctx.data_mut()[off + p] = acc as f32;
            }
        }
        let out = tensor::add_bias(
            &tensor::matmul(&ctx, store.get(&format!("{prefix}.attn.o.w"))?)?,
            store.get(&format!("{prefix}.attn.o.b"))?,
        )?;
        x = tensor::add_bias(&x, &out)?;
    }
    let ffn = encoder::ffn_forward(&x, store, prefix)?;
    tensor::add(&x, &ffn)
}

/// Final attention layer: per-head score maps scaled by 1/sqrt(D_g) (the
/// full width, not the head width), softmaxed, averaged across heads; the
/// global row of the averaged map is the weight vector. Rows of a softmax
/// already sum to one, so the result lies on the simplex by construction.
pub fn extract_weights(
    m: &ClsMatrix,
    store: &ParamStore,
    cfg: &GswaConfig,
) -> Result<WeightVector> {
    cfg.validate()?;
    if cfg.strategy == Strategy::CosineSimilarity {
        return Err(Error::Config(
            "extract_weights requires an attention strategy".into(),
        ));
    }
    let count = m.count();
    let d = cfg.dim;
    if m.rows.shape()[1] != d {
        return Err(Error::Config(format!(
            "cls width {} does not match allocator dim {d}",
            m.rows.shape()[1]
        )));
    }
    let q = tensor::matmul(&m.rows, store.get("gswa.extract.q")?)?;
    let k = tensor::matmul(&m.rows, store.get("gswa.extract.k")?)?;
    let dh = d / cfg.heads;
    let scale = 1.0 / (d as f64).sqrt();

    // averaged global attention row, accumulated in f64
    let mut avg = vec![0.0f64; count];
    let gi = count - 1;
    for h in 0..cfg.heads {
        let off = h * dh;
        let mut scores = Tensor::zeros(vec![1, count]);
        for j in 0..count {
            let mut acc = 0.0f64;
            for p in 0..dh {
                acc += q.at2(gi, off + p) as f64 * k.at2(j, off + p) as f64;
            }
            scores.data_mut()[j] = (acc * scale) as f32;
        }
        let probs = tensor::softmax_rows(&scores);
        for j in 0..count {
            avg[j] += probs.data()[j] as f64;
        }
    }
    let w = avg.iter().map(|&v| (v / cfg.heads as f64) as f32).collect();
    Ok(WeightVector::new(w))
}

/// Softmax over the cosine similarity of every cls vector against the
/// global one (the global scores 1 against itself).
pub fn cosine_weights(cls: &Tensor) -> Result<WeightVector> {
    let count = cls.shape()[0];
    let d = cls.shape()[1];
    let norm = |i: usize| -> f64 {
        cls.row(i)
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    };
    let g = count - 1;
    let gnorm = norm(g);
    let mut sims = vec![0.0f64; count];
    for i in 0..count {
        let n = norm(i);
        if n == 0.0 || gnorm == 0.0 {
            return Err(Error::Numeric(format!(
                "zero-norm cls vector at index {}",
                if n == 0.0 { i } else { g }
            )));
        }
        let mut dot = 0.0f64;
        for p in 0..d {
            dot += cls.at2(i, p) as f64 * cls.at2(g, p) as f64;
        }
        sims[i] = dot / (n * gnorm);
    }
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(WeightVector::new(
        exps.iter().map(|&e| (e / total) as f32).collect(),
    ))
}

/// Drops each image's cls slot and multiplies its patch tokens by that
/// image's weight. Pure per-image scalar multiplication.
pub fn apply_weights(e: &ShuffledEmbeddingSet, w: &WeightVector) -> Result<WeightedEmbeddings> {
    let count = e.image_count();
    if w.len() != count {
        return Err(Error::shape("apply_weights", &[count], &[w.len()]));
    }
    let per = e.patch_tokens();
    let d = e.dim();
    let mut data = Vec::with_capacity(count * per * d);
    for i in 0..count {
        let wi = w.values()[i];
        let start = (i * e.tokens_per_image() + 1) * d;
        for &v in &e.tokens.data()[start..start + per * d] {
            data.push(wi * v);
        }
    }
    Ok(WeightedEmbeddings {
        tokens: Tensor::new(vec![count, per, d], data)?,
    })
}

/// Full allocator pass: project, contextualize, and extract weights (or
/// score by cosine similarity), then scale each patch block.
pub fn gswa_forward(
    e: &ShuffledEmbeddingSet,
    store: &ParamStore,
    cfg: &GswaConfig,
) -> Result<(WeightedEmbeddings, WeightVector)> {
    cfg.validate()?;
    let cls = cls_matrix_of(e);
    let w = match cfg.strategy {
        Strategy::CosineSimilarity => cosine_weights(&cls)?,
        Strategy::SelfAttn | Strategy::CrossAttn => {
            let projected = project_cls(&cls, store)?;
            let ctx = contextualize(&projected, store, cfg)?;
            extract_weights(&ctx, store, cfg)?
        }
    };
    let weighted = apply_weights(e, &w)?;
    Ok((weighted, w))
}

// ── Traced forward (for gradient verification) ───────────────────────

/// The allocator forward recorded on an autodiff tape, with
/// `loss = sum(weighted embeddings)` as the scalar head.
pub struct TracedGswa {
    pub tape: Tape,
    pub loss: NodeId,
    pub weight_row: NodeId,
    pub weighted_blocks: Vec<NodeId>,
    pub param_nodes: BTreeMap<String, NodeId>,
}

/// Records the attention-strategy forward on a fresh tape. The shuffled
/// embeddings enter as constants; every allocator parameter enters as a
/// differentiation leaf.
pub fn trace_forward(
    e: &ShuffledEmbeddingSet,
    store: &ParamStore,
    cfg: &GswaConfig,
) -> Result<TracedGswa> {
    cfg.validate()?;
    if cfg.strategy == Strategy::CosineSimilarity {
        return Err(Error::Config(
            "the cosine strategy has no learned weight path to trace".into(),
        ));
    }
    let mut tape = Tape::new();
    let mut param_nodes = BTreeMap::new();
    for name in param_names(cfg) {
        let id = tape.leaf(store.get(&name)?)?;
        param_nodes.insert(name, id);
    }
    let p = |name: &str| -> NodeId { param_nodes[name] };

    let count = e.image_count();
    let cls = tape.constant(&cls_matrix_of(e))?;

    // projection
    let mut x = tape.matmul(cls, p("gswa.proj.w"))?;
    x = tape.add_bias(x, p("gswa.proj.b"))?;

    // transformer stack
    let dh = cfg.dim / cfg.heads;
    for b in 0..cfg.blocks {
        let pre = format!("gswa.block{b}");
        let ln1 = tape.layer_norm(
            x,
            p(&format!("{pre}.ln1.g")),
            p(&format!("{pre}.ln1.b")),
            LAYER_NORM_EPS as f64,
        )?;
        let attend = |tape: &mut Tape, q_in: NodeId, kv_in: NodeId| -> Result<NodeId> {
            let q = tape.matmul(q_in, p(&format!("{pre}.attn.q.w")))?;
            let q = tape.add_bias(q, p(&format!("{pre}.attn.q.b")))?;
            let k = tape.matmul(kv_in, p(&format!("{pre}.attn.k.w")))?;
            let k = tape.add_bias(k, p(&format!("{pre}.attn.k.b")))?;
            let v = tape.matmul(kv_in, p(&format!("{pre}.attn.v.w")))?;
            let v = tape.add_bias(v, p(&format!("{pre}.attn.v.b")))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (from, to) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, from, to)?;
                let kh = tape.slice_cols(k, from, to)?;
                let vh = tape.slice_cols(v, from, to)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let probs = tape.softmax_rows(scores);
                heads.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&heads)?;
            let out = tape.matmul(ctx, p(&format!("{pre}.attn.o.w")))?;
            tape.add_bias(out, p(&format!("{pre}.attn.o.b")))
        };
        x = match cfg.strategy {
            Strategy::SelfAttn => {
                let out = attend(&mut tape, ln1, ln1)?;
                tape.add(x, out)?
            }
            Strategy::CrossAttn if count >= 2 => {
                let q_in = tape.slice_row(ln1, count - 1)?;
                let kv_in = tape.slice_rows(ln1, 0, count - 1)?;
                // the 1-row context update broadcasts onto every row
                let out = attend(&mut tape, q_in, kv_in)?;
                tape.add_bias(x, out)?
            }
            // a lone global row has nothing to attend over
            Strategy::CrossAttn => x,
            Strategy::CosineSimilarity => unreachable!("rejected above"),
        };
        let ln2 = tape.layer_norm(
            x,
            p(&format!("{pre}.ln2.g")),
            p(&format!("{pre}.ln2.b")),
            LAYER_NORM_EPS as f64,
        )?;
        let h1 = tape.matmul(ln2, p(&format!("{pre}.ffn.fc1.w")))?;
        let h1 = tape.add_bias(h1, p(&format!("{pre}.ffn.fc1.b")))?;
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, p(&format!("{pre}.ffn.fc2.w")))?;
        let h2 = tape.add_bias(h2, p(&format!("{pre}.ffn.fc2.b")))?;
        x = tape.add(x, h2)?;
    }

    // weight extraction: per-head maps scaled by 1/sqrt(D_g), averaged
    let q = tape.matmul(x, p("gswa.extract.q"))?;
    let k = tape.matmul(x, p("gswa.extract.k"))?;
    let mut avg: Option<NodeId> = None;
    for h in 0..cfg.heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, from, to)?;
        let kh = tape.slice_cols(k, from, to)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, 1.0 / (cfg.dim as f64).sqrt());
        let probs = tape.softmax_rows(scores);
        avg = Some(match avg {
            None => probs,
            Some(acc) => tape.add(acc, probs)?,
        });
    }
    let avg = tape.scale(avg.expect("at least one head"), 1.0 / cfg.heads as f64);
    let weight_row = tape.slice_row(avg, count - 1)?;

    // loss = sum over all weighted patch tokens
    let mut weighted_blocks = Vec::with_capacity(count);
    let mut loss: Option<NodeId> = None;
    for i in 0..count {
        let block = tape.constant(&e.patch_matrix(i))?;
        let wi = tape.index(weight_row, i)?;
        let scaled = tape.scale_by(block, wi)?;
        weighted_blocks.push(scaled);
        let s = tape.sum_all(scaled);
        loss = Some(match loss {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }

    Ok(TracedGswa {
        tape,
        loss: loss.expect("at least one image block"),
        weight_row,
        weighted_blocks,
        param_nodes,
    })
}

/// Random shuffled-embedding fixture shared across test modules.
#[cfg(test)]
pub(crate) fn synthetic_set(
    seed: u64,
    tiles: usize,
    patch_tokens: usize,
    dim: usize,
) -> ShuffledEmbeddingSet {
    let mut rng = params::seeded_rng(seed, "synthetic-set");
    let count = tiles + 1;
    let tokens = params::uniform_tensor(&mut rng, vec![count, patch_tokens + 1, dim], 1.0);
    ShuffledEmbeddingSet {
        tokens,
        has_global: true,
    }
}
