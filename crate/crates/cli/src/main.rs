//! Command-line surface: tile an image, compute and visualize allocator
//! weights, run removal comparisons, manage parameter files, and run the
//! self-check suites.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input, 3 configuration,
//! 4 infeasible request, 5 I/O or file format.

mod heatmap;
mod verify;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gswa_core::allocator::Strategy;
use gswa_core::error::Error;
use gswa_core::imaging::ImageTensor;
use gswa_core::jsonfmt;
use gswa_core::pipeline::{self, PipelineConfig, RankBy, RemovalSetting};
use gswa_core::tiler;
use gswa_core::{EncoderConfig, GswaConfig, ParamStore, WeightVector};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(
    name = "gswa",
    version,
    about = "Tile high-resolution images and weight sub-images by global semantics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigFlags {
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long)]
    max_tiles: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Encoder transformer depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Encoder embedding width.
    #[arg(long)]
    dim: Option<usize>,
    /// Allocator hidden width.
    #[arg(long)]
    gswa_dim: Option<usize>,
    #[arg(long)]
    gswa_blocks: Option<usize>,
    #[arg(long)]
    gswa_heads: Option<usize>,
    /// One of self-attn, cross-attn, cosine-similarity.
    #[arg(long)]
    strategy: Option<String>,
    /// Projector output width.
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON run config; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (output file for init-params).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for multi-image runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the crop plan for each image; optionally emit the tile PNGs.
    Tile {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        emit_tiles: bool,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run the full pipeline and write the analysis report plus a heatmap.
    Weigh {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Compare the top / second-top / bottom removal settings at one k.
    Ablate {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Removal request as setting:k, e.g. top:3 or bottom:0.
        #[arg(long)]
        remove: String,
        /// Ranking source: similarity (default) or weight.
        #[arg(long, default_value = "similarity")]
        rank_by: String,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Write a deterministic parameter file for the resolved config.
    InitParams {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run the self-check suites (simplex, shuffle, grad, or all).
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Validate an existing parameter file before the suites run.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

// ── Config resolution ────────────────────────────────────────────────

/// On-disk run config; every field optional, flags win over file values.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfigFile {
    tile_size: Option<usize>,
    max_tiles: Option<usize>,
    patch_size: Option<usize>,
    depth: Option<usize>,
    dim: Option<usize>,
    gswa_dim: Option<usize>,
    gswa_blocks: Option<usize>,
    gswa_heads: Option<usize>,
    strategy: Option<String>,
    proj_dim: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

struct Resolved {
    pipeline: PipelineConfig,
    out: PathBuf,
    jobs: usize,
}

fn env_seed() -> Option<u64> {
    std::env::var("GSWA_SEED").ok().and_then(|v| v.parse().ok())
}

fn resolve(flags: &ConfigFlags, default_out: &str) -> Result<Resolved, Error> {
    let file: RunConfigFile = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?
        }
        None => RunConfigFile::default(),
    };
    // precedence: flag, then config file, then GSWA_SEED, then the default
    let seed = flags
        .seed
        .or(file.seed)
        .or_else(env_seed)
        .unwrap_or(DEFAULT_SEED);
    let strategy = match flags.strategy.as_ref().or(file.strategy.as_ref()) {
        Some(s) => Strategy::from_str(s)?,
        None => Strategy::SelfAttn,
    };
    let defaults = PipelineConfig::default();
    let pipeline = PipelineConfig {
        tile_size: flags
            .tile_size
            .or(file.tile_size)
            .unwrap_or(defaults.tile_size),
        min_tiles: 1,
        max_tiles: flags
            .max_tiles
            .or(file.max_tiles)
            .unwrap_or(defaults.max_tiles),
        encoder: EncoderConfig {
            tile_size: 0, // harmonized below
            patch_size: flags
                .patch_size
                .or(file.patch_size)
                .unwrap_or(defaults.encoder.patch_size),
            depth: flags.depth.or(file.depth).unwrap_or(defaults.encoder.depth),
            dim: flags.dim.or(file.dim).unwrap_or(defaults.encoder.dim),
            heads: defaults.encoder.heads,
            seed,
        },
        gswa: GswaConfig {
            dim: flags
                .gswa_dim
                .or(file.gswa_dim)
                .unwrap_or(defaults.gswa.dim),
            blocks: flags
                .gswa_blocks
                .or(file.gswa_blocks)
                .unwrap_or(defaults.gswa.blocks),
            heads: flags
                .gswa_heads
                .or(file.gswa_heads)
                .unwrap_or(defaults.gswa.heads),
            strategy,
            seed,
        },
        proj_dim: flags
            .proj_dim
            .or(file.proj_dim)
            .unwrap_or(defaults.proj_dim),
        seed,
    }
    .harmonized();
    pipeline.validate()?;
    let out = flags
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(default_out));
    Ok(Resolved {
        pipeline,
        out,
        jobs: flags.jobs.max(1),
    })
}

// ── Output helpers ───────────────────────────────────────────────────

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_png_atomic(img: &ImageTensor, path: &Path) -> Result<(), Error> {
    write_atomic(path, &img.png_bytes()?)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string())
}

fn load_image(path: &Path) -> Result<ImageTensor, Error> {
    if !path.exists() {
        return Err(Error::Input(format!("no such file: {}", path.display())));
    }
    ImageTensor::load(path)
}

/// Runs `work` over each image path, fanning out across `jobs` threads.
/// Per-image stdout is buffered and printed whole.
fn for_each_image(
    images: &[PathBuf],
    jobs: usize,
    work: &(dyn Fn(&Path) -> Result<String, Error> + Sync),
) -> Result<(), Error> {
    if jobs <= 1 || images.len() <= 1 {
        for path in images {
            print!("{}", work(path)?);
        }
        return Ok(());
    }
    let results: Vec<Result<String, Error>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in images.chunks(images.len().div_ceil(jobs)) {
            handles.push(scope.spawn(move || chunk.iter().map(|p| work(p)).collect::<Vec<_>>()));
        }
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    for r in results {
        print!("{}", r?);
    }
    Ok(())
}

// ── Commands ─────────────────────────────────────────────────────────

fn cmd_tile(images: &[PathBuf], emit_tiles: bool, resolved: &Resolved) -> Result<(), Error> {
    let cfg = &resolved.pipeline;
    for_each_image(images, resolved.jobs, &|path| {
        let image = load_image(path)?;
        let batch = tiler::crop(&image, cfg.tile_size, cfg.min_tiles, cfg.max_tiles)?;
        let stem = stem_of(path);
        let plan_path = resolved.out.join(format!("{stem}.plan.json"));
        write_atomic(&plan_path, jsonfmt::to_json_string(&batch.plan)?.as_bytes())?;
        if emit_tiles {
            let dir = resolved.out.join(format!("{stem}_tiles"));
            for (i, tile) in batch.tiles.iter().enumerate() {
                let (row, col) = batch.plan.grid_position(i);
                write_png_atomic(tile, &dir.join(format!("tile_{row}_{col}.png")))?;
            }
            if let Some(thumb) = &batch.thumbnail {
                write_png_atomic(thumb, &dir.join("thumbnail.png"))?;
            }
        }
        Ok(format!(
            "{}: grid {}x{}, {} tile(s){}, plan -> {}\n",
            path.display(),
            batch.plan.ratio[0],
            batch.plan.ratio[1],
            batch.tiles.len(),
            if batch.plan.include_thumbnail {
                " + thumbnail"
            } else {
                ""
            },
            plan_path.display(),
        ))
    })
}

fn cmd_weigh(images: &[PathBuf], resolved: &Resolved) -> Result<(), Error> {
    let cfg = &resolved.pipeline;
    let store = pipeline::init_all_params(cfg);
    for_each_image(images, resolved.jobs, &|path| {
        let image = load_image(path)?;
        let (_, report) = pipeline::run_pipeline(&image, cfg, &store)?;
        let stem = stem_of(path);
        let report_path = resolved.out.join(format!("{stem}.report.json"));
        write_atomic(&report_path, jsonfmt::to_json_string(&report)?.as_bytes())?;

        // heatmap over the resized canvas (crop is deterministic, so this
        // batch matches the one the report was built from)
        let batch = tiler::crop(&image, cfg.tile_size, cfg.min_tiles, cfg.max_tiles)?;
        let mut w: Vec<f32> = report.tiles.iter().map(|t| t.weight).collect();
        if batch.plan.include_thumbnail {
            w.push(report.global_weight);
        }
        let map = heatmap::render(&batch, &WeightVector::new(w));
        write_png_atomic(&map, &resolved.out.join(format!("{stem}.heatmap.png")))?;

        let mut out = String::new();
        out.push_str(&format!(
            "{}: {} tile(s), strategy {}\n",
            path.display(),
            report.n_tiles,
            report.strategy
        ));
        for t in &report.tiles {
            out.push_str(&format!(
                "  tile ({},{}) #{}: weight {:.8e} similarity {:.8e}\n",
                t.row, t.col, t.index, t.weight, t.similarity
            ));
        }
        out.push_str(&format!(
            "  global: weight {:.8e} (sum {:.8e})\n",
            report.global_weight, report.weight_sum
        ));
        Ok(out)
    })
}

/// Serialized output of the ablate command: the requested slice plus the
/// full setting comparison.
#[derive(Serialize)]
struct AblateOutput {
    schema: &'static str,
    requested_setting: RemovalSetting,
    requested_k: usize,
    comparison: pipeline::ComparisonReport,
}

fn parse_remove(request: &str) -> Result<(RemovalSetting, usize), Error> {
    let (name, k) = request
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("--remove expects setting:k, got '{request}'")))?;
    let setting = match name {
        "top" => RemovalSetting::Top,
        "second-top" => RemovalSetting::SecondTop,
        "bottom" => RemovalSetting::Bottom,
        other => {
            return Err(Error::Config(format!(
                "unknown removal setting '{other}' (top, second-top, bottom)"
            )))
        }
    };
    let k: usize = k
        .parse()
        .map_err(|_| Error::Config(format!("--remove: '{k}' is not a count")))?;
    Ok((setting, k))
}

fn parse_rank_by(name: &str) -> Result<RankBy, Error> {
    match name {
        "similarity" => Ok(RankBy::GlobalSimilarity),
        "weight" => Ok(RankBy::Weight),
        other => Err(Error::Config(format!(
            "unknown rank source '{other}' (similarity, weight)"
        ))),
    }
}

fn cmd_ablate(
    images: &[PathBuf],
    remove: &str,
    rank_by: &str,
    resolved: &Resolved,
) -> Result<(), Error> {
    let (setting, k) = parse_remove(remove)?;
    let rank_by = parse_rank_by(rank_by)?;
    let cfg = &resolved.pipeline;
    let store = pipeline::init_all_params(cfg);
    for_each_image(images, resolved.jobs, &|path| {
        let image = load_image(path)?;
        let comparison = pipeline::compare_settings(&image, cfg, &store, k, rank_by)?;
        if !comparison.settings.iter().any(|o| o.setting == setting) {
            return Err(Error::Range(format!(
                "{setting}:{k} is infeasible for {} tiles",
                comparison.n_tiles
            )));
        }
        let out = AblateOutput {
            schema: pipeline::ABLATION_SCHEMA,
            requested_setting: setting,
            requested_k: k,
            comparison,
        };
        let stem = stem_of(path);
        let out_path = resolved.out.join(format!("{stem}.ablation.json"));
        write_atomic(&out_path, jsonfmt::to_json_string(&out)?.as_bytes())?;

        let mut text = format!("{}: remove {setting}:{k}\n", path.display());
        for o in &out.comparison.settings {
            text.push_str(&format!(
                "  {}: removed {:?} mass {:.8e}, surviving tokens {}\n",
                o.setting, o.removed, o.removed_weight_mass, o.surviving_tokens
            ));
        }
        Ok(text)
    })
}

fn cmd_init_params(flags: &ConfigFlags) -> Result<(), Error> {
    let resolved = resolve(flags, "params.gswa")?;
    let store = pipeline::init_all_params(&resolved.pipeline);
    store.save(&resolved.out)?;
    println!(
        "wrote {} tensors ({} values, seed {}) -> {}",
        store.len(),
        store.total_values(),
        resolved.pipeline.seed,
        resolved.out.display()
    );
    Ok(())
}

fn cmd_verify(suite: &str, params: Option<&Path>, seed: Option<u64>) -> Result<i32, Error> {
    if !matches!(suite, "all" | "simplex" | "shuffle" | "grad") {
        return Err(Error::Config(format!(
            "unknown suite '{suite}' (all, simplex, shuffle, grad)"
        )));
    }
    if let Some(path) = params {
        let store = ParamStore::load(path)?;
        for name in store.names() {
            let t = store.get(name)?;
            if !t.is_finite_all() {
                return Err(Error::Format(format!(
                    "tensor '{name}' contains non-finite values"
                )));
            }
        }
        println!(
            "PASS params-file: {} tensors, {} values validated",
            store.len(),
            store.total_values()
        );
    }
    let seed = seed.or_else(env_seed).unwrap_or(DEFAULT_SEED);
    let summary = verify::run(suite, seed);
    for s in &summary.suites {
        println!(
            "{} {}: {}",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.detail
        );
    }
    println!("{}", jsonfmt::to_json_string(&summary)?);
    Ok(if summary.failed == 0 { 0 } else { 1 })
}

// ── Entry ────────────────────────────────────────────────────────────

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Input(_) => 2,
        Error::Config(_) | Error::Contract(_) | Error::ShapeMismatch { .. } | Error::Numeric(_) => {
            3
        }
        Error::Range(_) => 4,
        Error::Io(_) | Error::Format(_) => 5,
    }
}

fn run(cli: Cli) -> Result<i32, Error> {
    match &cli.command {
        Command::Tile {
            images,
            emit_tiles,
            flags,
        } => {
            let resolved = resolve(flags, "out")?;
            cmd_tile(images, *emit_tiles, &resolved)?;
            Ok(0)
        }
        Command::Weigh { images, flags } => {
            let resolved = resolve(flags, "out")?;
            cmd_weigh(images, &resolved)?;
            Ok(0)
        }
        Command::Ablate {
            images,
            remove,
            rank_by,
            flags,
        } => {
            let resolved = resolve(flags, "out")?;
            cmd_ablate(images, remove, rank_by, &resolved)?;
            Ok(0)
        }
        Command::InitParams { flags } => {
            cmd_init_params(flags)?;
            Ok(0)
        }
        Command::Verify {
            suite,
            params,
            seed,
        } => cmd_verify(suite, params.as_deref(), *seed),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
