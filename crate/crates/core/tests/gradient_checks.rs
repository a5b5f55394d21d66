//! Analytic tape gradients vs central finite differences over the full
//! allocator forward pass.

use gswa_core::allocator::{self, GswaConfig, Strategy};
use gswa_core::encoder::ShuffledEmbeddingSet;
use gswa_core::gradcheck::{finite_diff_grad, relative_error};
use gswa_core::params::{seeded_rng, uniform_tensor, ParamStore};

fn synthetic_set(seed: u64, tiles: usize, patch_tokens: usize, dim: usize) -> ShuffledEmbeddingSet {
    let mut rng = seeded_rng(seed, "gradcheck-set");
    ShuffledEmbeddingSet {
        tokens: uniform_tensor(&mut rng, vec![tiles + 1, patch_tokens + 1, dim], 1.0),
        has_global: true,
    }
}

/// Max relative error between tape gradients and finite differences across
/// every allocator parameter; also returns the number of parameters whose
/// analytic gradient is exactly zero.
fn max_grad_error(
    e: &ShuffledEmbeddingSet,
    store: &ParamStore,
    cfg: &GswaConfig,
    step: f64,
) -> (f64, Vec<String>) {
    let traced = allocator::trace_forward(e, store, cfg).expect("trace");
    let grads = traced.tape.backward(traced.loss).expect("backward");

    let mut max_err = 0.0f64;
    let mut zero_params = Vec::new();
    for name in allocator::param_names(cfg) {
        let analytic = grads.get(traced.param_nodes[&name]).to_vec();
        if analytic.iter().all(|&g| g == 0.0) {
            zero_params.push(name.clone());
        }
        let base = store.get(&name).expect("param present");
        let fd = finite_diff_grad(
            &mut |t| {
                let mut probe = store.clone();
                probe.insert(name.clone(), t.clone());
                let traced = allocator::trace_forward(e, &probe, cfg).expect("trace");
                traced.tape.value(traced.loss)[0]
            },
            base,
            step,
        );
        for (a, f) in analytic.iter().zip(fd.data()) {
            let err = relative_error(*a, *f as f64);
            if err > max_err {
                max_err = err;
            }
        }
    }
    (max_err, zero_params)
}

#[test]
fn self_attn_two_block_stack_matches_finite_differences() {
    let cfg = GswaConfig {
        dim: 16,
        blocks: 2,
        heads: 2,
        strategy: Strategy::SelfAttn,
        seed: 100,
    };
    let mut store = ParamStore::new();
    allocator::init_params(&cfg, 8, &mut store);
    let e = synthetic_set(100, 3, 4, 8);
    let (err, zeros) = max_grad_error(&e, &store, &cfg, 1e-3);
    assert!(err < 1e-3, "max relative error {err}");
    // only the unused extraction value weights may sit at zero
    assert_eq!(zeros, vec!["gswa.extract.v".to_string()]);
}

#[test]
fn cross_attn_stack_matches_finite_differences() {
    let cfg = GswaConfig {
        dim: 16,
        blocks: 2,
        heads: 2,
        strategy: Strategy::CrossAttn,
        seed: 101,
    };
    let mut store = ParamStore::new();
    allocator::init_params(&cfg, 8, &mut store);
    let e = synthetic_set(101, 3, 4, 8);
    let (err, zeros) = max_grad_error(&e, &store, &cfg, 1e-3);
    assert!(err < 1e-3, "max relative error {err}");
    assert_eq!(zeros, vec!["gswa.extract.v".to_string()]);
}

#[test]
fn single_image_degenerate_batch_still_differentiates() {
    // N = 0: just the global block
    let cfg = GswaConfig {
        dim: 8,
        blocks: 1,
        heads: 2,
        strategy: Strategy::SelfAttn,
        seed: 102,
    };
    let mut store = ParamStore::new();
    allocator::init_params(&cfg, 8, &mut store);
    let e = synthetic_set(102, 0, 4, 8);
    let (err, _) = max_grad_error(&e, &store, &cfg, 1e-3);
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn traced_loss_matches_untraced_weighted_sum() {
    let cfg = GswaConfig {
        dim: 16,
        blocks: 2,
        heads: 2,
        strategy: Strategy::SelfAttn,
        seed: 103,
    };
    let mut store = ParamStore::new();
    allocator::init_params(&cfg, 8, &mut store);
    let e = synthetic_set(103, 3, 4, 8);
    let (weighted, _) = allocator::gswa_forward(&e, &store, &cfg).expect("forward");
    let untraced_sum: f64 = weighted.tokens.data().iter().map(|&v| v as f64).sum();
    let traced = allocator::trace_forward(&e, &store, &cfg).expect("trace");
    let traced_sum = traced.tape.value(traced.loss)[0];
    assert!(
        (untraced_sum - traced_sum).abs() < 1e-4,
        "untraced {untraced_sum} vs traced {traced_sum}"
    );
}
