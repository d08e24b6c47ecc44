//! One belief-adaptation step: sample, weigh, gate on the effective particle
//! percentage, optionally rejuvenate with MCMC, resample, refit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::mixture::{fit_gm, init_gm, Component, GaussianMixture};
use crate::belief::particles::{
    batches_log_likelihood, conditional_entropy_gm, effective_particle_pct, resample_systematic_to,
    sde_pool_sample, weigh_particles_multi, ParticleSet,
};
use crate::error::{Error, Result};
use crate::gp::HyperParams;
use crate::mcmc::{run_chain, ChainConfig, GaussianProposal};
use crate::observation::ObservationBatch;
use crate::seed;

/// Log-space box for `(σ_f, σ_n, σ_l1, σ_l2)`: the support of the initial
/// belief and of the rejuvenation chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogBounds(pub [[f64; 2]; 4]);

impl LogBounds {
    /// `σ_f, σ_n ∈ [e⁻³, e³]·field_std`, `σ_l ∈ [10⁻², 1]·extent`.
    pub fn for_field(field_std: f64, extent: f64) -> Self {
        let s = field_std.ln();
        let l = extent.ln();
        Self([
            [s - 3.0, s + 3.0],
            [s - 3.0, s + 3.0],
            [l + 0.01f64.ln(), l],
            [l + 0.01f64.ln(), l],
        ])
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        v.len() == 4
            && v.iter()
                .zip(&self.0)
                .all(|(x, [lo, hi])| *x >= *lo && *x <= *hi)
    }

    pub fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            4,
            v.iter().zip(&self.0).map(|(x, [lo, hi])| x.clamp(*lo, *hi)),
        )
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(4, self.0.iter().map(|[lo, hi]| 0.5 * (lo + hi)))
    }

    pub fn as_pairs(&self) -> Vec<(f64, f64)> {
        self.0.iter().map(|[lo, hi]| (*lo, *hi)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    /// Particle count.
    pub p: usize,
    /// Mixture components.
    pub k: usize,
    /// Stable particles percentage: below it, MCMC rejuvenation fires.
    pub spp: f64,
    /// Optimum particles percentage: at or above it, no adaptation.
    pub opp: f64,
    /// Random-walk covariance in log-space.
    pub proposal_cov_theta: [[f64; 4]; 4],
    pub chain: ChainConfig,
    pub reg_floor: f64,
    /// `None` means [`LogBounds::for_field`]`(1, 1000)`; experiments fill it
    /// in from the region size.
    pub log_bounds: Option<LogBounds>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        let s = 0.05f64 * 0.05;
        Self {
            p: 1000,
            k: 3,
            spp: 20.0,
            opp: 80.0,
            proposal_cov_theta: [
                [s, 0.0, 0.0, 0.0],
                [0.0, s, 0.0, 0.0],
                [0.0, 0.0, s, 0.0],
                [0.0, 0.0, 0.0, s],
            ],
            chain: ChainConfig {
                burn_in: 200,
                thin: 2,
            },
            reg_floor: 1e-6,
            log_bounds: None,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.spp) || !(self.spp..=100.0).contains(&self.opp) {
            return Err(Error::Config(format!(
                "need 0 <= spp <= opp <= 100, got spp={} opp={}",
                self.spp, self.opp
            )));
        }
        if self.k == 0 || self.p < self.k {
            return Err(Error::Config(format!(
                "need p >= k >= 1, got p={} k={}",
                self.p, self.k
            )));
        }
        if !(self.reg_floor > 0.0) {
            return Err(Error::Config("reg_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> LogBounds {
        self.log_bounds
            .unwrap_or_else(|| LogBounds::for_field(1.0, 1000.0))
    }

    pub fn proposal_cov(&self) -> DMatrix<f64> {
        DMatrix::from_fn(4, 4, |i, j| self.proposal_cov_theta[i][j])
    }

    pub fn initial_belief(&self, seed: u64) -> Result<GaussianMixture> {
        init_gm(self.k, &self.bounds().as_pairs(), self.reg_floor, seed)
    }
}

/// Rejuvenated particles from a Metropolis-Hastings chain on the batch
/// likelihood, confined to the log-space bounds.
#[derive(Clone, Debug)]
pub struct McmcDraw {
    pub particles: ParticleSet,
    pub acceptance_rate: f64,
}

pub fn mcmc_hyperparams(
    batch: &ObservationBatch,
    theta0: &HyperParams,
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<McmcDraw> {
    mcmc_hyperparams_multi(&[batch], &theta0.to_log(), cfg, cfg.p, seed)
}

pub(crate) fn mcmc_hyperparams_multi(
    batches: &[&ObservationBatch],
    start: &DVector<f64>,
    cfg: &AdaptationConfig,
    n: usize,
    seed: u64,
) -> Result<McmcDraw> {
    let bounds = cfg.bounds();
    let start = bounds.clamp(start);
    let proposal = GaussianProposal::new(&cfg.proposal_cov())?;
    let mut rng = seed::rng(seed);
    let out = run_chain(start, &proposal, n, cfg.chain, &mut rng, |v| {
        if bounds.contains(v) {
            batches_log_likelihood(v, batches)
        } else {
            f64::NEG_INFINITY
        }
    })?;
    let rate = out.acceptance_rate();
    Ok(McmcDraw {
        particles: ParticleSet::from_log_weights(out.samples, out.log_target)?,
        acceptance_rate: rate,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationDiagnostics {
    /// Effective particle percentage used by the gate.
    pub epp: f64,
    /// `100·exp(H* − H)` as literally written in the algorithm; diagnostic only.
    pub epp_literal: f64,
    pub h_gm_given_y: f64,
    pub adapted: bool,
    pub mcmc_fired: bool,
    pub degenerate: bool,
    pub mcmc_acceptance: Option<f64>,
}

/// Where the `p` prior particles come from.
#[derive(Clone, Copy, Debug)]
pub enum ParticleSource<'a> {
    Own,
    /// Pooled with neighbor beliefs (state exchange).
    Pooled(&'a [GaussianMixture]),
}

pub fn adapt_belief(
    prior: &GaussianMixture,
    batch: &ObservationBatch,
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<(GaussianMixture, AdaptationDiagnostics)> {
    adapt_belief_with(prior, ParticleSource::Own, &[batch], cfg, seed)
}

/// General form: particles from `source`, weights from the product of the
/// likelihoods of all `batches` (a single batch outside observation exchange).
pub fn adapt_belief_with(
    prior: &GaussianMixture,
    source: ParticleSource<'_>,
    batches: &[&ObservationBatch],
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<(GaussianMixture, AdaptationDiagnostics)> {
    cfg.validate()?;
    if prior.dim() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            got: prior.dim(),
        });
    }
    let p = cfg.p;
    let (particles, density) = match source {
        ParticleSource::Own => (
            prior.sample(p, &mut seed::rng(seed::child(seed, "particles"))),
            None,
        ),
        ParticleSource::Pooled(neighbors) => (
            sde_pool_sample(prior, neighbors, p, seed::child(seed, "particles"))?,
            Some(pooled_mixture(prior, neighbors)?),
        ),
    };
    let density = density.as_ref().unwrap_or(prior);

    let ps = weigh_particles_multi(particles, batches)?;
    let degenerate = ps.is_degenerate();
    let epp = if degenerate {
        0.0
    } else {
        effective_particle_pct(&ps)
    };
    let h = conditional_entropy_gm(&ps, density)?;
    let mut diag = AdaptationDiagnostics {
        epp,
        epp_literal: 100.0 * ((p as f64).ln() - h).exp(),
        h_gm_given_y: h,
        degenerate,
        ..Default::default()
    };
    if epp >= cfg.opp {
        return Ok((prior.clone(), diag));
    }
    diag.adapted = true;

    let pool = if degenerate || epp < cfg.spp {
        let start = ps.particles()[ps.best()].clone();
        let draw = mcmc_hyperparams_multi(batches, &start, cfg, p, seed::child(seed, "mcmc"))?;
        diag.mcmc_fired = true;
        diag.mcmc_acceptance = Some(draw.acceptance_rate);
        ps.concat(draw.particles)?
    } else {
        ps
    };
    if pool.is_degenerate() {
        // Nothing (not even the chain) explains the batch; keep the prior.
        diag.adapted = false;
        return Ok((prior.clone(), diag));
    }
    let resampled = resample_systematic_to(&pool, p, seed::child(seed, "resample"));
    let posterior = fit_gm(&resampled, cfg.k, cfg.reg_floor, seed::child(seed, "fit"))?;
    Ok((posterior, diag))
}

/// Equal-weight mixture of the given mixtures.
pub fn pooled_mixture(
    own: &GaussianMixture,
    others: &[GaussianMixture],
) -> Result<GaussianMixture> {
    let n = (others.len() + 1) as f64;
    let comps: Vec<Component> = std::iter::once(own)
        .chain(others)
        .flat_map(|gm| {
            gm.components().iter().map(move |c| Component {
                weight: c.weight / n,
                mean: c.mean.clone(),
                cov: c.cov.clone(),
            })
        })
        .collect();
    GaussianMixture::new(own.dim(), comps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::Location;

    fn batch() -> ObservationBatch {
        let locs: Vec<Location> = (0..8)
            .map(|i| Location::new(i as f64 * 30.0, (i % 3) as f64 * 40.0))
            .collect();
        let vals = vec![0.3, 0.5, 0.1, -0.4, -0.9, -0.2, 0.6, 1.0];
        let times = (0..8).map(f64::from).collect();
        ObservationBatch::new(0, locs, vals, times).unwrap()
    }

    fn small_cfg() -> AdaptationConfig {
        AdaptationConfig {
            p: 200,
            k: 2,
            log_bounds: Some(LogBounds::for_field(1.0, 200.0)),
            ..Default::default()
        }
    }

    #[test]
    fn gate_returns_prior_when_opp_is_met() {
        let cfg = AdaptationConfig {
            spp: 0.0,
            opp: 0.0,
            ..small_cfg()
        };
        let prior = cfg.initial_belief(1).unwrap();
        let (post, d) = adapt_belief(&prior, &batch(), &cfg, 3).unwrap();
        assert_eq!(post, prior);
        assert!(!d.adapted && !d.mcmc_fired);
    }

    #[test]
    fn full_gate_adapts_and_fires_mcmc() {
        let cfg = AdaptationConfig {
            spp: 100.0,
            opp: 100.0,
            ..small_cfg()
        };
        let prior = cfg.initial_belief(1).unwrap();
        let (post, d) = adapt_belief(&prior, &batch(), &cfg, 3).unwrap();
        assert!(d.adapted && d.mcmc_fired);
        assert_ne!(post, prior);
        let rate = d.mcmc_acceptance.unwrap();
        assert!(rate > 0.0 && rate < 1.0);
        let total: f64 = post.components().iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = AdaptationConfig {
            opp: 100.0,
            ..small_cfg()
        };
        let prior = cfg.initial_belief(4).unwrap();
        let a = adapt_belief(&prior, &batch(), &cfg, 99).unwrap();
        let b = adapt_belief(&prior, &batch(), &cfg, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chain_stays_in_bounds_and_returns_p() {
        let cfg = small_cfg();
        let theta0 = HyperParams::new(1.0, 0.2, [20.0, 20.0]).unwrap();
        let draw = mcmc_hyperparams(&batch(), &theta0, &cfg, 5).unwrap();
        assert_eq!(draw.particles.len(), cfg.p);
        assert!(draw
            .particles
            .particles()
            .iter()
            .all(|v| cfg.bounds().contains(v)));
    }

    #[test]
    fn config_validation() {
        assert!(AdaptationConfig {
            spp: 90.0,
            opp: 80.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdaptationConfig {
            p: 2,
            k: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
