//! Beta sampling with pathwise (implicit reparameterization) gradients.
//!
//! A draw `lambda ~ Beta(alpha, beta)` is made differentiable w.r.t. its
//! parameters through the implicit relation `F(lambda; alpha, beta) = u`:
//!
//! ```text
//! d lambda / d alpha = - (dF/d alpha) / pdf(lambda)
//! ```
//!
//! The parameter derivative of the regularized incomplete beta function is
//! taken by central differences, which is accurate to ~1e-10 relative for the
//! parameter ranges reached in training. Unlike the accept/reject surrogate
//! gradient, this estimator is unbiased.

use rand::Rng;
use rand_distr::{Beta as BetaDist, Distribution};
use statrs::function::beta::{beta_reg, ln_beta};

use crate::error::{Error, Result};

/// Draws are clamped into this open interval so log-densities stay finite.
pub const LAMBDA_EPS: f64 = 1e-6;

/// Parameter derivatives are clamped to this magnitude; the implicit formula
/// blows up in the far tails where the density underflows.
const GRAD_CLAMP: f64 = 1e4;

/// One draw from Beta(alpha, beta), clamped to the open unit interval.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Config(format!(
            "Beta parameters must be positive finite, got ({alpha}, {beta})"
        )));
    }
    let dist = BetaDist::new(alpha, beta)
        .map_err(|e| Error::Config(format!("Beta({alpha}, {beta}): {e}")))?;
    let x: f64 = dist.sample(rng);
    Ok(x.clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS))
}

/// Beta density at `x`.
pub fn beta_pdf(x: f64, alpha: f64, beta: f64) -> f64 {
    let x = x.clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS);
    ((alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - ln_beta(alpha, beta)).exp()
}

/// Regularized incomplete beta function `I_x(alpha, beta)`.
pub fn beta_cdf(x: f64, alpha: f64, beta: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        beta_reg(alpha, beta, x)
    }
}

/// Pathwise derivatives `(d lambda/d alpha, d lambda/d beta)` of a realized
/// draw, via implicit reparameterization.
pub fn lambda_param_grads(lambda: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let pdf = beta_pdf(lambda, alpha, beta).max(1e-300);
    let ha = (alpha * 1e-4).max(1e-9);
    let hb = (beta * 1e-4).max(1e-9);
    let df_da = (beta_cdf(lambda, alpha + ha, beta) - beta_cdf(lambda, alpha - ha, beta))
        / (2.0 * ha);
    let df_db = (beta_cdf(lambda, alpha, beta + hb) - beta_cdf(lambda, alpha, beta - hb))
        / (2.0 * hb);
    (
        (-df_da / pdf).clamp(-GRAD_CLAMP, GRAD_CLAMP),
        (-df_db / pdf).clamp(-GRAD_CLAMP, GRAD_CLAMP),
    )
}

/// Mean of Beta(alpha, beta).
pub fn beta_mean(alpha: f64, beta: f64) -> f64 {
    alpha / (alpha + beta)
}

/// Quantile `F^{-1}(u; alpha, beta)` by bisection. Test oracle: holding `u`
/// fixed while perturbing the parameters gives common-random-number finite
/// differences that the pathwise gradients must match.
pub fn beta_quantile(u: f64, alpha: f64, beta: f64) -> f64 {
    if u <= 0.0 {
        return LAMBDA_EPS;
    }
    if u >= 1.0 {
        return 1.0 - LAMBDA_EPS;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_cdf(mid, alpha, beta) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn sample_rejects_nonpositive_params() {
        let mut rng = stream_rng(0, Stream::MonteCarlo);
        assert!(sample_beta(0.0, 1.0, &mut rng).is_err());
        assert!(sample_beta(1.0, -2.0, &mut rng).is_err());
        assert!(sample_beta(f64::NAN, 1.0, &mut rng).is_err());
    }

    #[test]
    fn symmetric_beta_has_mean_half() {
        let mut rng = stream_rng(1, Stream::MonteCarlo);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_beta(3.0, 3.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn skewed_beta_matches_analytic_mean() {
        let mut rng = stream_rng(2, Stream::MonteCarlo);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_beta(2.0, 6.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.25).abs() < 0.01, "mean {mean}");
    }

    /// Pathwise MC estimate of d E[lambda]/d alpha against the analytic
    /// moment derivative beta/(alpha+beta)^2.
    #[test]
    fn pathwise_gradient_matches_moment_derivative() {
        let (alpha, beta) = (2.0, 6.0);
        let mut rng = stream_rng(3, Stream::MonteCarlo);
        let n = 100_000;
        let (mut ga, mut gb) = (0.0, 0.0);
        for _ in 0..n {
            let l = sample_beta(alpha, beta, &mut rng).unwrap();
            let (da, db) = lambda_param_grads(l, alpha, beta);
            ga += da;
            gb += db;
        }
        ga /= n as f64;
        gb /= n as f64;
        let expect_a = beta / (alpha + beta).powi(2); // 6/64 = 0.09375
        let expect_b = -alpha / (alpha + beta).powi(2);
        assert!(
            (ga - expect_a).abs() / expect_a.abs() < 0.05,
            "d/dalpha {ga} vs {expect_a}"
        );
        assert!(
            (gb - expect_b).abs() / expect_b.abs() < 0.05,
            "d/dbeta {gb} vs {expect_b}"
        );
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &(a, b) in &[(2.0, 6.0), (0.7, 0.9), (5.0, 1.2)] {
            for &u in &[0.05, 0.3, 0.5, 0.9] {
                let x = beta_quantile(u, a, b);
                assert!((beta_cdf(x, a, b) - u).abs() < 1e-10, "({a},{b},{u})");
            }
        }
    }

    #[test]
    fn cdf_edges() {
        assert_eq!(beta_cdf(-0.1, 2.0, 2.0), 0.0);
        assert_eq!(beta_cdf(1.1, 2.0, 2.0), 1.0);
        assert!((beta_cdf(0.5, 2.0, 2.0) - 0.5).abs() < 1e-12);
    }
}
