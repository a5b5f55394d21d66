//! Deterministic toy ViT-style tile encoder. Each tile becomes M patch
//! tokens plus a leading cls token; the pixel-shuffle compactor then merges
//! every 2x2 patch-token neighborhood into one token of 4x width.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, CHANNELS};
use crate::params::{self, ParamStore};
use crate::tensor::{self, MhaParams, Tensor};
use crate::tiler::TileBatch;

/// FFN hidden width multiplier used by every transformer block in the stack.
pub const MLP_RATIO: usize = 4;

pub const LAYER_NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub tile_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            tile_size: 448,
            patch_size: 32,
            depth: 2,
            dim: 64,
            heads: 4,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    /// Patch-grid side length G.
    pub fn grid(&self) -> usize {
        self.tile_size / self.patch_size
    }

    /// Patch tokens per tile, M = G^2.
    pub fn patch_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.tile_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "tile size {} not divisible by patch size {}",
                self.tile_size, self.patch_size
            )));
        }
        if self.grid() % 2 != 0 {
            return Err(Error::Config(format!(
                "patch grid {} must be even for 2x2 shuffling",
                self.grid()
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-image token matrices `[count, M+1, D]`; cls at token index 0,
/// tiles in plan order, global thumbnail last when present.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub tokens: Tensor,
    pub has_global: bool,
}

/// Compacted token matrices `[count, M/4+1, 4D]`, cls still at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffledEmbeddingSet {
    pub tokens: Tensor,
    pub has_global: bool,
}

impl EmbeddingSet {
    pub fn image_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_image(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

impl ShuffledEmbeddingSet {
    pub fn image_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_image(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Patch tokens per image, excluding cls.
    pub fn patch_tokens(&self) -> usize {
        self.tokens_per_image() - 1
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn total_tokens(&self) -> usize {
        self.image_count() * self.tokens_per_image()
    }

    /// Number of tile images (excludes the global block when present).
    pub fn tile_count(&self) -> usize {
        self.image_count() - usize::from(self.has_global)
    }

    /// Index of the block treated as the global image: the thumbnail when
    /// present, otherwise the sole remaining block.
    pub fn global_index(&self) -> usize {
        self.image_count() - 1
    }

    /// Patch tokens of one image as an `[M/4, 4D]` matrix (cls dropped).
    pub fn patch_matrix(&self, index: usize) -> Tensor {
        let (tp, d) = (self.tokens_per_image(), self.dim());
        let start = (index * tp + 1) * d;
        let end = (index + 1) * tp * d;
        Tensor::new(vec![tp - 1, d], self.tokens.data()[start..end].to_vec())
            .expect("slice bounds derive from shape")
    }
}

/// cls vector of the indexed image (index `count-1` is the global block).
pub fn cls_of(e: &ShuffledEmbeddingSet, index: usize) -> Result<Tensor> {
    if index >= e.image_count() {
        return Err(Error::Range(format!(
            "image index {index} out of range (have {})",
            e.image_count()
        )));
    }
    let (tp, d) = (e.tokens_per_image(), e.dim());
    let start = index * tp * d;
    Tensor::new(vec![d], e.tokens.data()[start..start + d].to_vec())
}

// ── Parameters ───────────────────────────────────────────────────────

/// Registers every encoder tensor under the `enc.` namespace.
pub fn init_params(cfg: &EncoderConfig, store: &mut ParamStore) {
    let d = cfg.dim;
    let patch_in = cfg.patch_size * cfg.patch_size * CHANNELS;
    let seed = cfg.seed;
    params::init_linear(store, seed, "enc.patch", patch_in, d);
    let mut rng = params::seeded_rng(seed, "enc.cls");
    store.insert("enc.cls", params::normal_tensor(&mut rng, vec![d], 0.02));
    let mut rng = params::seeded_rng(seed, "enc.pos");
    store.insert(
        "enc.pos",
        params::normal_tensor(&mut rng, vec![cfg.patch_tokens() + 1, d], 0.02),
    );
    for b in 0..cfg.depth {
        init_block_params(store, seed, &format!("enc.block{b}"), d);
    }
}

/// Shared block layout: two layer norms, q/k/v/o projections, two FFN layers.
pub(crate) fn init_block_params(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize) {
    params::init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    params::init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    for proj in ["q", "k", "v", "o"] {
        params::init_linear(store, seed, &format!("{prefix}.attn.{proj}"), dim, dim);
    }
    params::init_linear(
        store,
        seed,
        &format!("{prefix}.ffn.fc1"),
        dim,
        dim * MLP_RATIO,
    );
    params::init_linear(
        store,
        seed,
        &format!("{prefix}.ffn.fc2"),
        dim * MLP_RATIO,
        dim,
    );
}

/// Pre-norm transformer block: `x += MHSA(LN1(x)); x += FFN(LN2(x))`.
pub(crate) fn block_forward(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    let normed = tensor::layer_norm(
        x,
        store.get(&format!("{prefix}.ln1.g"))?,
        store.get(&format!("{prefix}.ln1.b"))?,
        LAYER_NORM_EPS,
    )?;
    let mha = MhaParams {
        wq: store.get(&format!("{prefix}.attn.q.w"))?,
        bq: store.get(&format!("{prefix}.attn.q.b"))?,
        wk: store.get(&format!("{prefix}.attn.k.w"))?,
        bk: store.get(&format!("{prefix}.attn.k.b"))?,
        wv: store.get(&format!("{prefix}.attn.v.w"))?,
        bv: store.get(&format!("{prefix}.attn.v.b"))?,
        wo: store.get(&format!("{prefix}.attn.o.w"))?,
        bo: store.get(&format!("{prefix}.attn.o.b"))?,
    };
    let (attn_out, _) = tensor::multi_head_attention(&normed, &mha, heads)?;
    let x = tensor::add(x, &attn_out)?;
    let ffn = ffn_forward(&x, store, prefix)?;
    tensor::add(&x, &ffn)
}

pub(crate) fn ffn_forward(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let normed = tensor::layer_norm(
        x,
        store.get(&format!("{prefix}.ln2.g"))?,
        store.get(&format!("{prefix}.ln2.b"))?,
        LAYER_NORM_EPS,
    )?;
    let h = tensor::add_bias(
        &tensor::matmul(&normed, store.get(&format!("{prefix}.ffn.fc1.w"))?)?,
        store.get(&format!("{prefix}.ffn.fc1.b"))?,
    )?;
    let h = tensor::gelu(&h);
    tensor::add_bias(
        &tensor::matmul(&h, store.get(&format!("{prefix}.ffn.fc2.w"))?)?,
        store.get(&format!("{prefix}.ffn.fc2.b"))?,
    )
}

// ── Encoding ─────────────────────────────────────────────────────────

/// Flattens one tile into its `[M, P*P*3]` patch matrix. Pixels are mapped
/// from [0, 1] to [-1, 1] (mean 0.5, std 0.5 channel standardization).
fn patch_matrix(tile: &ImageTensor, cfg: &EncoderConfig) -> Tensor {
    let p = cfg.patch_size;
    let g = cfg.grid();
    let width = p * p * CHANNELS;
    let mut data = Vec::with_capacity(g * g * width);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                for px in 0..p {
                    let pix = tile.pixel(gy * p + py, gx * p + px);
                    for c in 0..CHANNELS {
                        data.push(2.0 * pix[c] - 1.0);
                    }
                }
            }
        }
    }
    Tensor::new(vec![g * g, width], data).expect("patch grid covers the tile")
}

fn encode_one(tile: &ImageTensor, cfg: &EncoderConfig, store: &ParamStore) -> Result<Tensor> {
    if tile.height() != cfg.tile_size || tile.width() != cfg.tile_size {
        return Err(Error::Config(format!(
            "tile {}x{} does not match configured size {}",
            tile.height(),
            tile.width(),
            cfg.tile_size
        )));
    }
    let m = cfg.patch_tokens();
    let d = cfg.dim;
    let patches = patch_matrix(tile, cfg);
    let embedded = tensor::add_bias(
        &tensor::matmul(&patches, store.get("enc.patch.w")?)?,
        store.get("enc.patch.b")?,
    )?;

    // prepend cls, add positional embeddings
    let cls = store.get("enc.cls")?;
    let pos = store.get("enc.pos")?;
    let mut data = Vec::with_capacity((m + 1) * d);
    data.extend_from_slice(cls.data());
    data.extend_from_slice(embedded.data());
    let mut x = Tensor::new(vec![m + 1, d], data)?;
    for (v, p) in x.data_mut().iter_mut().zip(pos.data()) {
        *v += p;
    }

    for b in 0..cfg.depth {
        x = block_forward(&x, store, &format!("enc.block{b}"), cfg.heads)?;
    }
    Ok(x)
}

/// Encodes every image in the batch (tiles in plan order, thumbnail last).
/// Images are independent and run in parallel; assembly order is the plan
/// order regardless of completion order.
pub fn encode(batch: &TileBatch, cfg: &EncoderConfig, store: &ParamStore) -> Result<EmbeddingSet> {
    cfg.validate()?;
    let images: Vec<&ImageTensor> = batch.images().collect();
    let encoded: Result<Vec<Tensor>> = images
        .par_iter()
        .map(|img| encode_one(img, cfg, store))
        .collect();
    let encoded = encoded?;
    let m1 = cfg.patch_tokens() + 1;
    let d = cfg.dim;
    let mut data = Vec::with_capacity(encoded.len() * m1 * d);
    for t in &encoded {
        data.extend_from_slice(t.data());
    }
    Ok(EmbeddingSet {
        tokens: Tensor::new(vec![encoded.len(), m1, d], data)?,
        has_global: batch.thumbnail.is_some(),
    })
}

// ── Pixel shuffle ────────────────────────────────────────────────────

/// Merges each 2x2 patch-token neighborhood (row-major (0,0),(0,1),(1,0),(1,1))
/// into one token of width 4D; pure rearrangement, no arithmetic. The cls
/// token is lifted to 4D by tiling it four times.
pub fn pixel_shuffle(e: &EmbeddingSet) -> Result<ShuffledEmbeddingSet> {
    let count = e.image_count();
    let m1 = e.tokens_per_image();
    let d = e.dim();
    let m = m1 - 1;
    let g = (m as f64).sqrt().round() as usize;
    if g * g != m || g % 2 != 0 {
        return Err(Error::Config(format!(
            "patch count {m} is not an even-sided square grid"
        )));
    }
    let half = g / 2;
    let out_tokens = half * half + 1;
    let mut data = Vec::with_capacity(count * out_tokens * 4 * d);
    for i in 0..count {
        let base = i * m1 * d;
        let cls = &e.tokens.data()[base..base + d];
        for _ in 0..4 {
            data.extend_from_slice(cls);
        }
        for oy in 0..half {
            for ox in 0..half {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src_token = 1 + (2 * oy + dy) * g + (2 * ox + dx);
                    let start = base + src_token * d;
                    data.extend_from_slice(&e.tokens.data()[start..start + d]);
                }
            }
        }
    }
    Ok(ShuffledEmbeddingSet {
        tokens: Tensor::new(vec![count, out_tokens, 4 * d], data)?,
        has_global: e.has_global,
    })
}

/// Inverse rearrangement; reconstructs the pre-shuffle set bitwise.
pub fn pixel_unshuffle(e: &ShuffledEmbeddingSet, dim: usize) -> Result<EmbeddingSet> {
    let count = e.image_count();
    let wide = e.dim();
    if wide != 4 * dim {
        return Err(Error::Config(format!(
            "shuffled width {wide} is not 4 x {dim}"
        )));
    }
    let quarter = e.patch_tokens();
    let half = (quarter as f64).sqrt().round() as usize;
    if half * half != quarter {
        return Err(Error::Config(format!(
            "shuffled patch count {quarter} is not square"
        )));
    }
    let g = half * 2;
    let m1 = g * g + 1;
    let mut data = vec![0.0f32; count * m1 * dim];
    for i in 0..count {
        let src_base = i * (quarter + 1) * wide;
        let dst_base = i * m1 * dim;
        data[dst_base..dst_base + dim].copy_from_slice(&e.tokens.data()[src_base..src_base + dim]);
        for oy in 0..half {
            for ox in 0..half {
                let src_token = src_base + (1 + oy * half + ox) * wide;
                for (slot, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let dst_token = 1 + (2 * oy + dy) * g + (2 * ox + dx);
                    let dst = dst_base + dst_token * dim;
                    let src = src_token + slot * dim;
                    data[dst..dst + dim].copy_from_slice(&e.tokens.data()[src..src + dim]);
                }
            }
        }
    }
    Ok(EmbeddingSet {
        tokens: Tensor::new(vec![count, m1, dim], data)?,
        has_global: e.has_global,
    })
}
