//! Weighted particle sets over log-hyper-parameters.

use nalgebra::DVector;
use rand::Rng as _;
use rayon::prelude::*;

use crate::belief::mixture::GaussianMixture;
use crate::error::{Error, Result};
use crate::gp::{log_likelihood, HyperParams};
use crate::observation::ObservationBatch;
use crate::seed;

/// Particles with raw log-weights and normalized weights.
///
/// When every raw weight underflows the normalized weights fall back to
/// uniform and `degenerate` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    particles: Vec<DVector<f64>>,
    log_weights: Vec<f64>,
    norm_weights: Vec<f64>,
    degenerate: bool,
}

impl ParticleSet {
    pub fn from_log_weights(particles: Vec<DVector<f64>>, log_weights: Vec<f64>) -> Result<Self> {
        if particles.len() != log_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: particles.len(),
                got: log_weights.len(),
            });
        }
        if particles.is_empty() {
            return Err(Error::InvalidArgument("empty particle set".into()));
        }
        let max = log_weights
            .iter()
            .copied()
            .filter(|w| !w.is_nan())
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = if max.is_finite() {
            log_weights
                .iter()
                .map(|w| if w.is_nan() { 0.0 } else { (w - max).exp() })
                .collect()
        } else {
            vec![0.0; particles.len()]
        };
        let total: f64 = shifted.iter().sum();
        let (norm_weights, degenerate) = if total > 0.0 && total.is_finite() {
            (shifted.iter().map(|w| w / total).collect(), false)
        } else {
            (vec![1.0 / particles.len() as f64; particles.len()], true)
        };
        Ok(Self {
            particles,
            log_weights,
            norm_weights,
            degenerate,
        })
    }

    pub fn uniform(particles: Vec<DVector<f64>>) -> Result<Self> {
        let n = particles.len();
        Self::from_log_weights(particles, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Raw likelihood weights; may underflow to zero.
    pub fn raw_weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn norm_weights(&self) -> &[f64] {
        &self.norm_weights
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Index of the highest raw weight (first on ties).
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.norm_weights.iter().enumerate() {
            if *w > self.norm_weights[best] {
                best = i;
            }
        }
        best
    }

    /// Concatenation, re-normalized jointly over both sets.
    pub fn concat(mut self, other: ParticleSet) -> Result<Self> {
        self.particles.extend(other.particles);
        self.log_weights.extend(other.log_weights);
        Self::from_log_weights(self.particles, self.log_weights)
    }

    pub fn weighted_mean(&self) -> DVector<f64> {
        let d = self.particles[0].len();
        self.particles
            .iter()
            .zip(&self.norm_weights)
            .fold(DVector::zeros(d), |acc, (p, w)| acc + p * *w)
    }
}

/// Joint log-likelihood of several batches under the log-space particle.
/// Any failure (degenerate covariance, invalid point) scores `-inf`.
pub fn batches_log_likelihood(log_theta: &DVector<f64>, batches: &[&ObservationBatch]) -> f64 {
    let Ok(theta) = HyperParams::from_log(log_theta) else {
        return f64::NEG_INFINITY;
    };
    let mut total = 0.0;
    for b in batches {
        match log_likelihood(&b.values, &b.locations, &theta) {
            Ok(l) if !l.is_nan() => total += l,
            _ => return f64::NEG_INFINITY,
        }
    }
    total
}

/// Weighs each particle by the likelihood of one observation batch.
pub fn weigh_particles(
    particles: Vec<DVector<f64>>,
    batch: &ObservationBatch,
) -> Result<ParticleSet> {
    weigh_particles_multi(particles, &[batch])
}

/// Weighs by the product of per-batch likelihoods (observation exchange).
pub fn weigh_particles_multi(
    particles: Vec<DVector<f64>>,
    batches: &[&ObservationBatch],
) -> Result<ParticleSet> {
    if batches.is_empty() || batches.iter().all(|b| b.is_empty()) {
        return Err(Error::InvalidArgument("empty observation batch".into()));
    }
    let log_w: Vec<f64> = particles
        .par_iter()
        .map(|p| batches_log_likelihood(p, batches))
        .collect();
    ParticleSet::from_log_weights(particles, log_w)
}

/// Product of the per-batch likelihoods of one particle.
pub fn ode_weights(particle: &HyperParams, batches: &[ObservationBatch]) -> Result<f64> {
    Ok(ode_log_weight(particle, batches)?.exp())
}

pub fn ode_log_weight(particle: &HyperParams, batches: &[ObservationBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("at least one batch required".into()));
    }
    batches
        .iter()
        .map(|b| log_likelihood(&b.values, &b.locations, particle))
        .sum()
}

fn x_log_x(w: f64) -> f64 {
    if w > 0.0 {
        w * w.ln()
    } else {
        0.0
    }
}

/// Particle estimate of the posterior entropy of the belief:
/// `log(1/p) − Σ w̄ log(w̄ P(θ))`, with `P` the prior mixture density.
pub fn conditional_entropy_gm(ps: &ParticleSet, prior: &GaussianMixture) -> Result<f64> {
    let p = ps.len() as f64;
    let mut acc = 0.0;
    for (theta, &w) in ps.particles().iter().zip(ps.norm_weights()) {
        if w > 0.0 {
            acc += x_log_x(w) + w * prior.log_density(theta)?;
        }
    }
    Ok((1.0 / p).ln() - acc)
}

/// Entropy-based effective sample size as a percentage of `p`.
pub fn effective_particle_pct(ps: &ParticleSet) -> f64 {
    let h: f64 = -ps.norm_weights().iter().map(|&w| x_log_x(w)).sum::<f64>();
    (100.0 * h.exp() / ps.len() as f64).clamp(0.0, 100.0)
}

/// Systematic (low-variance) resampling to `m` particles.
pub fn resample_systematic_to(ps: &ParticleSet, m: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = seed::rng(seed);
    let step = 1.0 / m as f64;
    let u0: f64 = rng.random::<f64>() * step;
    let w = ps.norm_weights();
    let mut out = Vec::with_capacity(m);
    let mut i = 0;
    let mut cum = w[0];
    for j in 0..m {
        let u = u0 + j as f64 * step;
        while u >= cum && i + 1 < w.len() {
            i += 1;
            cum += w[i];
        }
        out.push(ps.particles()[i].clone());
    }
    out
}

pub fn resample_systematic(ps: &ParticleSet, seed: u64) -> Vec<DVector<f64>> {
    resample_systematic_to(ps, ps.len(), seed)
}

/// Samples `p` particles from the equal-weight pool of `own` and the
/// neighbor mixtures, `⌈p/(r̄+1)⌉` per source in order, truncated to `p`.
pub fn sde_pool_sample(
    own: &GaussianMixture,
    neighbors: &[GaussianMixture],
    p: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if let Some(gm) = neighbors.iter().find(|g| g.dim() != own.dim()) {
        return Err(Error::DimensionMismatch {
            expected: own.dim(),
            got: gm.dim(),
        });
    }
    let per = p.div_ceil(neighbors.len() + 1);
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(p);
    for gm in std::iter::once(own).chain(neighbors) {
        let take = per.min(p - out.len());
        out.extend(gm.sample(take, &mut rng));
        if out.len() == p {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn pts(n: usize) -> Vec<DVector<f64>> {
        (0..n).map(|i| DVector::from_element(1, i as f64)).collect()
    }

    fn set(w: &[f64]) -> ParticleSet {
        ParticleSet::from_log_weights(pts(w.len()), w.iter().map(|x| x.ln()).collect()).unwrap()
    }

    #[test]
    fn normalization_examples() {
        let one = ParticleSet::from_log_weights(pts(1), vec![-1234.5]).unwrap();
        assert_eq!(one.norm_weights(), &[1.0]);
        let eq = ParticleSet::from_log_weights(pts(2), vec![-7.0, -7.0]).unwrap();
        assert_eq!(eq.norm_weights(), &[0.5, 0.5]);
        let s = ParticleSet::from_log_weights(pts(2), vec![0.0, -(3f64).ln()]).unwrap();
        assert!((s.norm_weights()[0] - 0.75).abs() < 1e-15);
        assert!((s.norm_weights()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn underflow_falls_back_to_uniform() {
        let s = ParticleSet::from_log_weights(pts(3), vec![f64::NEG_INFINITY; 3]).unwrap();
        assert!(s.is_degenerate());
        assert_eq!(s.norm_weights(), &[1.0 / 3.0; 3]);
        let big = ParticleSet::from_log_weights(pts(2), vec![-1e6, -1e6 - 2f64.ln()]).unwrap();
        assert!(!big.is_degenerate());
        // f64 spacing at 1e6 is ~1.2e-10, which bounds the representable offset
        assert!((big.norm_weights()[0] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn epp_examples() {
        assert!((effective_particle_pct(&set(&[0.25; 4])) - 100.0).abs() < 1e-12);
        assert!((effective_particle_pct(&set(&[1.0, 0.0, 0.0, 0.0])) - 25.0).abs() < 1e-12);
        assert!((effective_particle_pct(&set(&[0.5, 0.5, 0.0, 0.0])) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_entropy_uniform_case() {
        // uniform weights, prior density 1/p at every particle → log p
        let p = 4;
        let d = 1.0 / p as f64;
        // a 1-D Gaussian whose density at its mean equals 1/p
        let var = 1.0 / (2.0 * std::f64::consts::PI * d * d);
        let prior =
            GaussianMixture::gaussian(DVector::zeros(1), DMatrix::from_element(1, 1, var)).unwrap();
        let ps = ParticleSet::uniform(vec![DVector::zeros(1); p]).unwrap();
        let h = conditional_entropy_gm(&ps, &prior).unwrap();
        assert!((h - (p as f64).ln()).abs() < 1e-12);
        assert!((h - 1.386_294).abs() < 1e-6);

        let single = ParticleSet::uniform(vec![DVector::zeros(1)]).unwrap();
        let dens = prior.density(&DVector::zeros(1)).unwrap();
        assert!((conditional_entropy_gm(&single, &prior).unwrap() + dens.ln()).abs() < 1e-12);
    }

    #[test]
    fn systematic_examples() {
        let degenerate = set(&[1.0, 0.0, 0.0]);
        assert!(resample_systematic(&degenerate, 1)
            .iter()
            .all(|p| p[0] == 0.0));
        let uniform = set(&[0.2; 5]);
        let mut out: Vec<f64> = resample_systematic(&uniform, 42)
            .iter()
            .map(|p| p[0])
            .collect();
        out.sort_by(f64::total_cmp);
        assert_eq!(out, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn systematic_counts_are_floor_or_ceil() {
        let w = [0.05, 0.4, 0.15, 0.3, 0.1];
        let s = set(&w);
        for seed in 0..50 {
            let out = resample_systematic(&s, seed);
            for (i, wi) in w.iter().enumerate() {
                let c = out.iter().filter(|p| p[0] == i as f64).count() as f64;
                let base = (5.0 * wi).floor();
                assert!(
                    c == base || c == base + 1.0,
                    "seed {seed} idx {i} count {c}"
                );
            }
        }
    }

    #[test]
    fn sde_allocation() {
        let a =
            GaussianMixture::gaussian(DVector::from_element(1, -100.0), DMatrix::identity(1, 1))
                .unwrap();
        let b = GaussianMixture::gaussian(DVector::from_element(1, 100.0), DMatrix::identity(1, 1))
            .unwrap();
        let s = sde_pool_sample(&a, std::slice::from_ref(&b), 2, 3).unwrap();
        assert!(s[0][0] < 0.0 && s[1][0] > 0.0);
        let own = sde_pool_sample(&a, &[], 10, 9).unwrap();
        assert_eq!(own, crate::belief::gm_sample(&a, 10, 9));
        let odd = sde_pool_sample(&a, &[b.clone(), b], 7, 1).unwrap();
        assert_eq!(odd.len(), 7);
        assert_eq!(odd.iter().filter(|x| x[0] < 0.0).count(), 3);
    }
}
