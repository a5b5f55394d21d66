//! Self-check suites: simplex weights, shuffle inversion, and gradient
//! agreement, each printed as a pass/fail line plus one JSON summary.

use serde::Serialize;

use gswa_core::allocator::{self, GswaConfig, Strategy};
use gswa_core::encoder::{self, EmbeddingSet, ShuffledEmbeddingSet};
use gswa_core::gradcheck::{finite_diff_grad, relative_error};
use gswa_core::params::{seeded_rng, uniform_tensor, ParamStore, RngCore};

#[derive(Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Serialize)]
pub struct VerifySummary {
    pub seed: u64,
    pub passed: usize,
    pub failed: usize,
    pub suites: Vec<SuiteResult>,
}

fn synthetic_set(seed: u64, tiles: usize, dim: usize) -> ShuffledEmbeddingSet {
    let mut rng = seeded_rng(seed, "verify-set");
    ShuffledEmbeddingSet {
        tokens: uniform_tensor(&mut rng, vec![tiles + 1, 5, dim], 1.0),
        has_global: true,
    }
}

pub fn simplex_suite(seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for round in 0..30u64 {
        for strategy in [
            Strategy::SelfAttn,
            Strategy::CrossAttn,
            Strategy::CosineSimilarity,
        ] {
            let cfg = GswaConfig {
                dim: 16,
                blocks: 2,
                heads: 2,
                strategy,
                seed: seed.wrapping_add(round),
            };
            let mut store = ParamStore::new();
            allocator::init_params(&cfg, 8, &mut store);
            for n in [1usize, 3, 6, 8] {
                let e = synthetic_set(seed.wrapping_add(round * 7 + n as u64), n, 8);
                match allocator::gswa_forward(&e, &store, &cfg) {
                    Ok((_, w)) => worst = worst.max(w.simplex_defect()),
                    Err(e) => {
                        return SuiteResult {
                            name: "simplex".into(),
                            passed: false,
                            detail: format!("forward failed: {e}"),
                        }
                    }
                }
            }
        }
    }
    SuiteResult {
        name: "simplex".into(),
        passed: worst < 1e-6,
        detail: format!("worst simplex defect {worst:.3e} over 360 weight vectors"),
    }
}

pub fn shuffle_suite(seed: u64) -> SuiteResult {
    for round in 0..20u64 {
        let mut dims = seeded_rng(seed.wrapping_add(round), "verify-shuffle-dims");
        let half = 1 + (dims.next_u64() % 3) as usize;
        let g = 2 * half;
        let d = 1 + (dims.next_u64() % 4) as usize;
        let count = 1 + (dims.next_u64() % 3) as usize;
        let mut rng = seeded_rng(seed.wrapping_add(round), "verify-shuffle-data");
        let e = EmbeddingSet {
            tokens: uniform_tensor(&mut rng, vec![count, g * g + 1, d], 2.0),
            has_global: count > 1,
        };
        let s = match encoder::pixel_shuffle(&e) {
            Ok(s) => s,
            Err(e) => {
                return SuiteResult {
                    name: "shuffle-inversion".into(),
                    passed: false,
                    detail: format!("shuffle failed: {e}"),
                }
            }
        };
        if s.tokens.shape() != [count, g * g / 4 + 1, 4 * d] {
            return SuiteResult {
                name: "shuffle-inversion".into(),
                passed: false,
                detail: format!("round {round}: unexpected shape {:?}", s.tokens.shape()),
            };
        }
        let back = match encoder::pixel_unshuffle(&s, d) {
            Ok(b) => b,
            Err(e) => {
                return SuiteResult {
                    name: "shuffle-inversion".into(),
                    passed: false,
                    detail: format!("unshuffle failed: {e}"),
                }
            }
        };
        if back.tokens.data() != e.tokens.data() {
            return SuiteResult {
                name: "shuffle-inversion".into(),
                passed: false,
                detail: format!("round {round}: reconstruction not bitwise"),
            };
        }
    }
    SuiteResult {
        name: "shuffle-inversion".into(),
        passed: true,
        detail: "20 random grids rearrange and invert bitwise".into(),
    }
}

pub fn gradient_suite(seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for round in 0..2u64 {
        let cfg = GswaConfig {
            dim: 16,
            blocks: 2,
            heads: 2,
            strategy: Strategy::SelfAttn,
            seed: seed.wrapping_add(round),
        };
        let mut store = ParamStore::new();
        allocator::init_params(&cfg, 8, &mut store);
        let e = synthetic_set(seed.wrapping_add(round + 900), 3, 8);
        let traced = match allocator::trace_forward(&e, &store, &cfg) {
            Ok(t) => t,
            Err(e) => {
                return SuiteResult {
                    name: "gradient-check".into(),
                    passed: false,
                    detail: format!("trace failed: {e}"),
                }
            }
        };
        let grads = match traced.tape.backward(traced.loss) {
            Ok(g) => g,
            Err(e) => {
                return SuiteResult {
                    name: "gradient-check".into(),
                    passed: false,
                    detail: format!("backward failed: {e}"),
                }
            }
        };
        for name in allocator::param_names(&cfg) {
            let analytic = grads.get(traced.param_nodes[&name]).to_vec();
            let base = store.get(&name).expect("param present");
            let fd = finite_diff_grad(
                &mut |t| {
                    let mut probe = store.clone();
                    probe.insert(name.clone(), t.clone());
                    let tr = allocator::trace_forward(&e, &probe, &cfg).expect("trace");
                    tr.tape.value(tr.loss)[0]
                },
                base,
                1e-3,
            );
            for (a, f) in analytic.iter().zip(fd.data()) {
                worst = worst.max(relative_error(*a, *f as f64));
            }
        }
    }
    SuiteResult {
        name: "gradient-check".into(),
        passed: worst < 1e-3,
        detail: format!("worst relative error {worst:.3e} over 2 seeds"),
    }
}

pub fn run(suite: &str, seed: u64) -> VerifySummary {
    let mut suites = Vec::new();
    if suite == "all" || suite == "simplex" {
        suites.push(simplex_suite(seed));
    }
    if suite == "all" || suite == "shuffle" {
        suites.push(shuffle_suite(seed));
    }
    if suite == "all" || suite == "grad" {
        suites.push(gradient_suite(seed));
    }
    let passed = suites.iter().filter(|s| s.passed).count();
    let failed = suites.len() - passed;
    VerifySummary {
        seed,
        passed,
        failed,
        suites,
    }
}
