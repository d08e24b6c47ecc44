//! Random-walk Metropolis-Hastings over `R^d` with a Gaussian proposal.
//!
//! The proposal is symmetric, so the Hastings correction cancels and the
//! acceptance test reduces to the target ratio, evaluated in log-space.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::cholesky_jittered;
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub thin: usize,
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub samples: Vec<DVector<f64>>,
    pub log_target: Vec<f64>,
    pub accepted: usize,
    pub proposed: usize,
}

impl ChainOutput {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// `min(1, exp(log_proposed − log_current))` acceptance draw.
pub fn mh_accept(log_current: f64, log_proposed: f64, rng: &mut Rng) -> bool {
    if log_proposed.is_nan() || log_proposed == f64::NEG_INFINITY {
        return false;
    }
    if log_proposed >= log_current {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_proposed - log_current
}

/// Gaussian random-walk proposal `N(·| current, Σ)`.
#[derive(Clone, Debug)]
pub struct GaussianProposal {
    factor: DMatrix<f64>,
}

impl GaussianProposal {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::InvalidArgument(
                "proposal covariance must be square".into(),
            ));
        }
        let chol = cholesky_jittered(cov)?;
        Ok(Self { factor: chol.l() })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn propose(&self, current: &DVector<f64>, rng: &mut Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        current + &self.factor * z
    }
}

/// Runs a chain from `start` and returns exactly `n` post-burn-in states,
/// keeping every `thin`-th one. Rejected proposals repeat the current state.
pub fn run_chain<F>(
    start: DVector<f64>,
    proposal: &GaussianProposal,
    n: usize,
    cfg: ChainConfig,
    rng: &mut Rng,
    mut log_target: F,
) -> Result<ChainOutput>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    if start.len() != proposal.dim() {
        return Err(Error::DimensionMismatch {
            expected: proposal.dim(),
            got: start.len(),
        });
    }
    let thin = cfg.thin.max(1);
    let mut current = start;
    let mut current_lt = log_target(&current);
    if !current_lt.is_finite() {
        return Err(Error::InvalidArgument(
            "chain start has zero target density".into(),
        ));
    }
    let mut out = ChainOutput {
        samples: Vec::with_capacity(n),
        log_target: Vec::with_capacity(n),
        accepted: 0,
        proposed: 0,
    };
    let total = cfg.burn_in + n * thin;
    for step in 1..=total {
        let cand = proposal.propose(&current, rng);
        let cand_lt = log_target(&cand);
        out.proposed += 1;
        if mh_accept(current_lt, cand_lt, rng) {
            current = cand;
            current_lt = cand_lt;
            out.accepted += 1;
        }
        if step > cfg.burn_in && (step - cfg.burn_in).is_multiple_of(thin) {
            out.samples.push(current.clone());
            out.log_target.push(current_lt);
        }
    }
    debug_assert_eq!(out.samples.len(), n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn uphill_moves_always_accepted() {
        let mut rng = seed::rng(3);
        for _ in 0..1000 {
            assert!(mh_accept(-5.0, -5.0, &mut rng));
            assert!(mh_accept(-5.0, -1.0, &mut rng));
            assert!(!mh_accept(-5.0, f64::NEG_INFINITY, &mut rng));
        }
    }

    #[test]
    fn downhill_acceptance_is_likelihood_ratio() {
        let mut rng = seed::rng(4);
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| mh_accept(0.0, -(3f64).ln(), &mut rng))
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 1.0 / 3.0).abs() < 0.005, "{rate}");
    }

    #[test]
    fn exact_sample_count_and_repeats_on_reject() {
        let prop = GaussianProposal::new(&DMatrix::identity(1, 1)).unwrap();
        let mut rng = seed::rng(1);
        let out = run_chain(
            DVector::from_element(1, 0.0),
            &prop,
            37,
            ChainConfig {
                burn_in: 5,
                thin: 3,
            },
            &mut rng,
            |x| {
                if x[0].abs() < 0.5 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            },
        )
        .unwrap();
        assert_eq!(out.samples.len(), 37);
        assert_eq!(out.proposed, 5 + 37 * 3);
        assert!(out.samples.iter().all(|s| s[0].abs() < 0.5));
    }

    #[test]
    fn conjugate_gaussian_target_moments() {
        // target N(1.5, 0.49)
        let (mu, var) = (1.5, 0.49);
        let prop = GaussianProposal::new(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        let mut rng = seed::rng(11);
        let out = run_chain(
            DVector::from_element(1, 0.0),
            &prop,
            100_000,
            ChainConfig {
                burn_in: 500,
                thin: 1,
            },
            &mut rng,
            |x| -0.5 * (x[0] - mu).powi(2) / var,
        )
        .unwrap();
        let n = out.samples.len() as f64;
        let m = out.samples.iter().map(|s| s[0]).sum::<f64>() / n;
        let v = out.samples.iter().map(|s| (s[0] - m).powi(2)).sum::<f64>() / n;
        assert!((m - mu).abs() / mu < 0.05, "{m}");
        assert!((v - var).abs() / var < 0.05, "{v}");
        let rate = out.acceptance_rate();
        assert!(rate > 0.0 && rate < 1.0);
    }
}
