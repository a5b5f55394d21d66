//! Central finite-difference gradient oracle.

use crate::tensor::Tensor;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
/// The scalar function is evaluated in f64. Perturbed coordinates round
/// through f32 storage, so the divisor is the realized spread of the two
/// probe points rather than the nominal 2h.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite differences need a positive step");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let up = (orig as f64 + step) as f32;
        let down = (orig as f64 - step) as f32;
        probe.data_mut()[i] = up;
        let plus = f(&probe);
        probe.data_mut()[i] = down;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = ((plus - minus) / (up as f64 - down as f64)) as f32;
    }
    grad
}

/// Relative error with an absolute floor: |a - b| / max(|a|, |b|, 1e-4).
/// Below the floor the comparison turns absolute, which keeps central
/// differences meaningful on near-zero gradients where their O(h^2)
/// truncation noise would otherwise dominate the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, uniform_tensor};

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![3], vec![0.4, -1.2, 2.5]).unwrap();
        let g = finite_diff_grad(
            &mut |t: &Tensor| t.data().iter().map(|&v| v as f64).sum(),
            &x,
            1e-4,
        );
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(
            &mut |t: &Tensor| {
                let v = t.data()[0] as f64;
                v * v
            },
            &x,
            1e-4,
        );
        assert!((g.data()[0] as f64 - 6.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_form_matches_analytic_gradient() {
        let n = 5;
        let mut rng = seeded_rng(21, "quadform");
        let a = uniform_tensor(&mut rng, vec![n, n], 1.0);
        let x = uniform_tensor(&mut rng, vec![n], 1.0);
        let g = finite_diff_grad(
            &mut |t: &Tensor| {
                let mut acc = 0.0f64;
                for i in 0..n {
                    for j in 0..n {
                        acc += t.data()[i] as f64 * a.at2(i, j) as f64 * t.data()[j] as f64;
                    }
                }
                acc
            },
            &x,
            1e-3,
        );
        // analytic: (A + A^T) x
        for i in 0..n {
            let mut want = 0.0f64;
            for j in 0..n {
                want += (a.at2(i, j) as f64 + a.at2(j, i) as f64) * x.data()[j] as f64;
            }
            assert!(
                (g.data()[i] as f64 - want).abs() < 1e-4,
                "coord {i}: fd {} vs analytic {want}",
                g.data()[i]
            );
        }
    }
}
