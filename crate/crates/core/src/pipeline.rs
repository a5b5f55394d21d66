//! End-to-end composition (crop, encode, shuffle, weight, project) plus the
//! analysis harness: cosine ranking against the global image, sub-image
//! removal settings, and the comparison report.

use serde::{Deserialize, Serialize};

use crate::allocator::{self, GswaConfig, WeightVector, WeightedEmbeddings};
use crate::encoder::{self, EncoderConfig, ShuffledEmbeddingSet};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::params::{self, ParamStore};
use crate::tensor::{self, Tensor};
use crate::tiler::{self, CropPlan};

pub const REPORT_SCHEMA: &str = "gswa-report/1";
pub const ABLATION_SCHEMA: &str = "gswa-ablation/1";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tile_size: usize,
    pub min_tiles: usize,
    pub max_tiles: usize,
    pub encoder: EncoderConfig,
    pub gswa: GswaConfig,
    /// Projector output width D_t.
    pub proj_dim: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tile_size: 448,
            min_tiles: 1,
            max_tiles: 8,
            encoder: EncoderConfig::default(),
            gswa: GswaConfig::default(),
            proj_dim: 256,
            seed: 42,
        }
    }
}

impl PipelineConfig {
    /// Propagates the run seed into each stage and keeps the encoder tile
    /// size in lockstep with the tiler.
    pub fn harmonized(mut self) -> Self {
        self.encoder.tile_size = self.tile_size;
        self.encoder.seed = self.seed;
        self.gswa.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_tiles < 1 || self.min_tiles > self.max_tiles {
            return Err(Error::Config(format!(
                "invalid tile bounds {}..={}",
                self.min_tiles, self.max_tiles
            )));
        }
        if self.encoder.tile_size != self.tile_size {
            return Err(Error::Config(format!(
                "encoder tile size {} differs from tiler tile size {}",
                self.encoder.tile_size, self.tile_size
            )));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("projector width must be positive".into()));
        }
        self.encoder.validate()?;
        self.gswa.validate()
    }

    /// Incoming cls width after the pixel shuffle.
    pub fn shuffled_width(&self) -> usize {
        4 * self.encoder.dim
    }
}

/// Deterministically initializes every parameter the pipeline needs.
pub fn init_all_params(cfg: &PipelineConfig) -> ParamStore {
    let mut store = ParamStore::new();
    encoder::init_params(&cfg.encoder, &mut store);
    allocator::init_params(&cfg.gswa, cfg.shuffled_width(), &mut store);
    params::init_linear(
        &mut store,
        cfg.seed,
        "proj.fc1",
        cfg.shuffled_width(),
        cfg.proj_dim,
    );
    params::init_linear(&mut store, cfg.seed, "proj.fc2", cfg.proj_dim, cfg.proj_dim);
    store
}

/// Two affine layers with a GELU between, applied per image block:
/// `[count, M/4, 4D] -> [count, M/4, D_t]`.
pub fn project_tokens(
    weighted: &WeightedEmbeddings,
    store: &ParamStore,
    proj_dim: usize,
) -> Result<Tensor> {
    let count = weighted.image_count();
    let per = weighted.tokens_per_image();
    let d = weighted.dim();
    let flat = Tensor::new(vec![count * per, d], weighted.tokens.data().to_vec())?;
    let h = tensor::add_bias(
        &tensor::matmul(&flat, store.get("proj.fc1.w")?)?,
        store.get("proj.fc1.b")?,
    )?;
    let h = tensor::gelu(&h);
    let out = tensor::add_bias(
        &tensor::matmul(&h, store.get("proj.fc2.w")?)?,
        store.get("proj.fc2.b")?,
    )?;
    out.reshape(vec![count, per, proj_dim])
}

// ── Ranking and removal ──────────────────────────────────────────────

/// Cosine similarity of two vectors, accumulated in f64. Zero-norm inputs
/// score 0 so ranking stays total.
fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Tiles ordered by descending cosine similarity between each tile's cls
/// and the global cls; ties break toward the lower tile index.
pub fn rank_by_global_similarity(e: &ShuffledEmbeddingSet) -> Vec<(usize, f64)> {
    let n = e.tile_count();
    if n == 0 {
        return Vec::new();
    }
    let global = encoder::cls_of(e, e.global_index()).expect("global index is in range");
    let mut scored: Vec<(usize, f64)> = (0..n)
        .map(|i| {
            let cls = encoder::cls_of(e, i).expect("tile index is in range");
            (i, cosine(cls.data(), global.data()))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemovalSetting {
    #[serde(rename = "top")]
    Top,
    #[serde(rename = "second-top")]
    SecondTop,
    #[serde(rename = "bottom")]
    Bottom,
}

impl std::fmt::Display for RemovalSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RemovalSetting::Top => "top",
            RemovalSetting::SecondTop => "second-top",
            RemovalSetting::Bottom => "bottom",
        })
    }
}

/// Which score orders the removal ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankBy {
    #[serde(rename = "similarity")]
    GlobalSimilarity,
    #[serde(rename = "weight")]
    Weight,
}

/// Slices a descending ranking: top-k takes ranks 1..k, second-top-k ranks
/// k+1..2k, bottom-k the last k. Returned indices refer to tiles.
pub fn select_for_removal(
    ranking: &[usize],
    setting: RemovalSetting,
    k: usize,
) -> Result<Vec<usize>> {
    let n = ranking.len();
    if k > n {
        return Err(Error::Range(format!("cannot remove {k} of {n} tiles")));
    }
    let picked = match setting {
        RemovalSetting::Top => &ranking[..k],
        RemovalSetting::SecondTop => {
            if 2 * k > n {
                return Err(Error::Range(format!(
                    "second-top-{k} needs at least {} tiles, have {n}",
                    2 * k
                )));
            }
            &ranking[k..2 * k]
        }
        RemovalSetting::Bottom => &ranking[n - k..],
    };
    Ok(picked.to_vec())
}

/// Drops the selected tile blocks; survivor order is preserved and the
/// global block is never removable.
pub fn remove_tiles(e: &ShuffledEmbeddingSet, removed: &[usize]) -> Result<ShuffledEmbeddingSet> {
    let n = e.tile_count();
    if let Some(&bad) = removed.iter().find(|&&i| i >= n) {
        return Err(Error::Range(format!(
            "tile index {bad} out of range (have {n} tiles)"
        )));
    }
    let keep: Vec<usize> = (0..e.image_count())
        .filter(|i| *i >= n || !removed.contains(i))
        .collect();
    let per = e.tokens_per_image() * e.dim();
    let mut data = Vec::with_capacity(keep.len() * per);
    for &i in &keep {
        data.extend_from_slice(&e.tokens.data()[i * per..(i + 1) * per]);
    }
    Ok(ShuffledEmbeddingSet {
        tokens: Tensor::new(vec![keep.len(), e.tokens_per_image(), e.dim()], data)?,
        has_global: e.has_global,
    })
}

// ── Reports ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileReport {
    pub index: usize,
    pub row: u32,
    pub col: u32,
    pub similarity: f32,
    pub weight: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovalReport {
    pub setting: RemovalSetting,
    pub k: usize,
    pub rank_by: RankBy,
    pub removed: Vec<usize>,
    pub removed_weight_mass: f32,
}

/// Per-image similarities and weights plus token bookkeeping for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema: String,
    pub strategy: String,
    pub seed: u64,
    pub plan: CropPlan,
    pub n_tiles: usize,
    pub tokens_before_removal: usize,
    pub tokens_after_removal: usize,
    pub removal: Option<RemovalReport>,
    pub tiles: Vec<TileReport>,
    pub global_weight: f32,
    pub weight_sum: f32,
}

/// Full pipeline over one image; returns the projected tokens
/// `[count, M/4, D_t]` and the populated report.
pub fn run_pipeline(
    image: &ImageTensor,
    cfg: &PipelineConfig,
    store: &ParamStore,
) -> Result<(Tensor, AnalysisReport)> {
    cfg.validate()?;
    let batch = tiler::crop(image, cfg.tile_size, cfg.min_tiles, cfg.max_tiles)?;
    let encoded = encoder::encode(&batch, &cfg.encoder, store)?;
    let shuffled = encoder::pixel_shuffle(&encoded)?;
    let (weighted, w) = allocator::gswa_forward(&shuffled, store, &cfg.gswa)?;
    let projected = project_tokens(&weighted, store, cfg.proj_dim)?;
    let report = build_report(cfg, &batch.plan, &shuffled, &w, None);
    Ok((projected, report))
}

fn build_report(
    cfg: &PipelineConfig,
    plan: &CropPlan,
    shuffled: &ShuffledEmbeddingSet,
    w: &WeightVector,
    removal: Option<RemovalReport>,
) -> AnalysisReport {
    let ranking = rank_by_global_similarity(shuffled);
    let mut similarity = vec![0.0f64; shuffled.tile_count()];
    for &(i, s) in &ranking {
        similarity[i] = s;
    }
    let tiles: Vec<TileReport> = (0..shuffled.tile_count())
        .map(|i| {
            let (row, col) = plan.grid_position(i);
            TileReport {
                index: i,
                row,
                col,
                similarity: similarity[i] as f32,
                weight: w.values()[i],
            }
        })
        .collect();
    let tokens = shuffled.total_tokens();
    let removed_tokens = removal
        .as_ref()
        .map(|r| r.removed.len() * shuffled.tokens_per_image())
        .unwrap_or(0);
    AnalysisReport {
        schema: REPORT_SCHEMA.to_string(),
        strategy: cfg.gswa.strategy.to_string(),
        seed: cfg.seed,
        plan: plan.clone(),
        n_tiles: plan.tile_count(),
        tokens_before_removal: tokens + removed_tokens,
        tokens_after_removal: tokens,
        removal,
        tiles,
        global_weight: w.global(),
        weight_sum: w.sum() as f32,
    }
}

// ── Setting comparison (removal harness) ─────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingOutcome {
    pub setting: RemovalSetting,
    pub removed: Vec<usize>,
    pub survivors: Vec<usize>,
    /// Baseline weight mass of the removed tiles.
    pub removed_weight_mass: f32,
    pub surviving_tokens: usize,
    pub output_norm: f32,
    pub weights_after: Vec<f32>,
    pub weight_sum_after: f32,
}

/// One pipeline run per removal setting at the same k, reporting the weight
/// mass each setting discards and the norms of the surviving projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub strategy: String,
    pub seed: u64,
    pub k: usize,
    pub rank_by: RankBy,
    pub n_tiles: usize,
    pub baseline_weights: Vec<f32>,
    pub baseline_output_norm: f32,
    pub baseline_tokens: usize,
    pub settings: Vec<SettingOutcome>,
}

/// Runs the pipeline under each removal setting (skipping settings whose
/// precondition fails at this k) and reports weight mass and norm deltas.
pub fn compare_settings(
    image: &ImageTensor,
    cfg: &PipelineConfig,
    store: &ParamStore,
    k: usize,
    rank_by: RankBy,
) -> Result<ComparisonReport> {
    cfg.validate()?;
    let batch = tiler::crop(image, cfg.tile_size, cfg.min_tiles, cfg.max_tiles)?;
    let encoded = encoder::encode(&batch, &cfg.encoder, store)?;
    let shuffled = encoder::pixel_shuffle(&encoded)?;
    let n = shuffled.tile_count();
    if k > n {
        return Err(Error::Range(format!("cannot remove {k} of {n} tiles")));
    }

    let (baseline_weighted, baseline_w) = allocator::gswa_forward(&shuffled, store, &cfg.gswa)?;
    let baseline_proj = project_tokens(&baseline_weighted, store, cfg.proj_dim)?;

    let ranking: Vec<usize> = match rank_by {
        RankBy::GlobalSimilarity => rank_by_global_similarity(&shuffled)
            .into_iter()
            .map(|(i, _)| i)
            .collect(),
        RankBy::Weight => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                baseline_w.values()[b]
                    .partial_cmp(&baseline_w.values()[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order
        }
    };

    let mut settings = Vec::new();
    for setting in [
        RemovalSetting::Top,
        RemovalSetting::SecondTop,
        RemovalSetting::Bottom,
    ] {
        let removed = match select_for_removal(&ranking, setting, k) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let reduced = remove_tiles(&shuffled, &removed)?;
        let survivors: Vec<usize> = (0..n).filter(|i| !removed.contains(i)).collect();
        let (weighted, w) = allocator::gswa_forward(&reduced, store, &cfg.gswa)?;
        let projected = project_tokens(&weighted, store, cfg.proj_dim)?;
        let removed_mass: f64 = removed.iter().map(|&i| baseline_w.values()[i] as f64).sum();
        settings.push(SettingOutcome {
            setting,
            removed,
            survivors,
            removed_weight_mass: removed_mass as f32,
            surviving_tokens: reduced.total_tokens(),
            output_norm: projected.frobenius_norm() as f32,
            weights_after: w.values().to_vec(),
            weight_sum_after: w.sum() as f32,
        });
    }

    Ok(ComparisonReport {
        schema: ABLATION_SCHEMA.to_string(),
        strategy: cfg.gswa.strategy.to_string(),
        seed: cfg.seed,
        k,
        rank_by,
        n_tiles: n,
        baseline_weights: baseline_w.values().to_vec(),
        baseline_output_norm: baseline_proj.frobenius_norm() as f32,
        baseline_tokens: shuffled.total_tokens(),
        settings,
    })
}
