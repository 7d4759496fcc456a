//! Diagonal Gaussian log-density.

use std::f64::consts::PI;

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `Σ_i [-logσ_i - ½ln2π - ½((a_i-μ_i)/σ_i)²]`.
pub fn gaussian_log_likelihood(action: &[f64], mean: &[f64], log_std: &[f64]) -> Result<f64> {
    if action.len() != mean.len() || mean.len() != log_std.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: action {}, mean {}, log_std {}",
            action.len(),
            mean.len(),
            log_std.len()
        )));
    }
    Ok(action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) * (-ls).exp();
            -ls - 0.5 * (2.0 * PI).ln() - 0.5 * z * z
        })
        .sum())
}

/// Row-wise log-density: `[n, d]` action, mean and log-std nodes give `[n, 1]`.
pub fn log_likelihood_rows(
    g: &mut Graph<'_>,
    action: NodeId,
    mean: NodeId,
    log_std: NodeId,
) -> Result<NodeId> {
    let d = g.value(mean).cols() as f64;
    let neg_ls = g.neg(log_std)?;
    let inv_std = g.exp(neg_ls)?;
    let diff = g.sub(action, mean)?;
    let z = g.mul(diff, inv_std)?;
    let zz = g.square(z)?;
    let half = g.scale(zz, -0.5)?;
    let per_dim = g.sub(half, log_std)?;
    let summed = g.sum_cols(per_dim)?;
    g.offset(summed, -HALF_LN_2PI * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn half_ln_two_pi_constant() {
        assert!((HALF_LN_2PI - 0.5 * (2.0 * PI).ln()).abs() < 1e-16);
    }

    #[test]
    fn standard_normal_reference_values() {
        let at_mean = gaussian_log_likelihood(&[0.3], &[0.3], &[0.0]).unwrap();
        assert!((at_mean + 0.918939).abs() < 1e-6);
        let one_sigma = gaussian_log_likelihood(&[1.3], &[0.3], &[0.0]).unwrap();
        assert!((one_sigma + 1.418939).abs() < 1e-6);
        let two_d = gaussian_log_likelihood(&[0.0, 5.0], &[0.0, 5.0], &[0.0, 0.0]).unwrap();
        assert_eq!(two_d, 2.0 * gaussian_log_likelihood(&[0.0], &[0.0], &[0.0]).unwrap());
    }

    #[test]
    fn graph_matches_scalar_form() {
        let a = [0.1, -0.4, 0.02, 0.3];
        let m = [0.0, -0.1, 0.05, 0.25];
        let ls = [-1.0, 0.5, -3.0, 0.0];
        let mut g = Graph::standalone();
        let an = g.constant(Tensor::matrix(2, 2, a.to_vec()).unwrap());
        let mn = g.constant(Tensor::matrix(2, 2, m.to_vec()).unwrap());
        let ln = g.constant(Tensor::matrix(2, 2, ls.to_vec()).unwrap());
        let ll = log_likelihood_rows(&mut g, an, mn, ln).unwrap();
        for r in 0..2 {
            let expect =
                gaussian_log_likelihood(&a[2 * r..2 * r + 2], &m[2 * r..2 * r + 2], &ls[2 * r..2 * r + 2])
                    .unwrap();
            assert!((g.value(ll).get(r, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_gradient_changes_sign_at_action() {
        let grad_at = |mu: f64| {
            let mut g = Graph::standalone();
            let a = g.constant(Tensor::row(&[0.4]));
            let m = g.variable(Tensor::row(&[mu]));
            let ls = g.constant(Tensor::row(&[-0.5]));
            let ll = log_likelihood_rows(&mut g, a, m, ls).unwrap();
            let loss = g.sum(ll).unwrap();
            g.backward(loss).unwrap().variable(m).unwrap().item()
        };
        assert!(grad_at(0.3) > 0.0);
        assert!(grad_at(0.5) < 0.0);
        assert_eq!(grad_at(0.4), 0.0);
    }
}
