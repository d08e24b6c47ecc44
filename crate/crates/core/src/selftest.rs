//! Analytic-oracle checks run by `persmon selftest`.
//!
//! Each check compares a library routine against an independent closed form,
//! quadrature or exhaustive search. A check passes when its error is strictly
//! below the tolerance, so a zero tolerance always fails.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Serialize;

use crate::belief::{conditional_entropy_gm, GaussianMixture, ParticleSet};
use crate::error::Result;
use crate::eval::kl_gm_mc;
use crate::gp::{cov_matrix, gaussian_entropy, CovMatrix, HyperParams, Location};
use crate::seed;
use crate::sensing::greedy_entropy_discrete;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerances {
    pub entropy_abs: f64,
    pub quadrature_abs: f64,
    pub kl_rel: f64,
    pub conditional_entropy_rel: f64,
    /// Slack on the greedy approximation bound, in nats.
    pub greedy_abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            entropy_abs: 1e-9,
            quadrature_abs: 1e-6,
            kl_rel: 0.02,
            conditional_entropy_rel: 0.05,
            greedy_abs: 1e-9,
        }
    }
}

impl Tolerances {
    pub fn scaled(&self, f: f64) -> Self {
        Self {
            entropy_abs: self.entropy_abs * f,
            quadrature_abs: self.quadrature_abs * f,
            kl_rel: self.kl_rel * f,
            conditional_entropy_rel: self.conditional_entropy_rel * f,
            greedy_abs: self.greedy_abs * f,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error (or bound violation) against the tolerance.
    pub error: f64,
    pub tolerance: f64,
}

pub const CHECK_NAMES: [&str; 7] = [
    "gaussian_entropy_closed_forms",
    "gaussian_entropy_chain_rule_6x6",
    "gaussian_entropy_quadrature_1d",
    "kl_mean_shift_closed_form",
    "kl_scale_closed_form",
    "greedy_submodular_bound",
    "conditional_entropy_conjugate_toy",
];

fn check(name: &'static str, error: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name,
        passed: error.is_finite() && error < tolerance,
        error,
        tolerance,
    }
}

fn half_log_2pie() -> f64 {
    0.5 * (2.0 * PI * E).ln()
}

fn entropy_closed_forms() -> Result<f64> {
    let cases = [
        (DMatrix::from_element(1, 1, 1.0), half_log_2pie()),
        (DMatrix::identity(2, 2), 2.0 * half_log_2pie()),
        (
            DMatrix::from_element(1, 1, 4.0),
            half_log_2pie() + 2f64.ln(),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (m, expected) in cases {
        worst = worst.max((gaussian_entropy(&CovMatrix(m))? - expected).abs());
    }
    Ok(worst)
}

fn random_spd(n: usize, rng: &mut seed::Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

fn chain_rule(instances: usize) -> Result<f64> {
    let mut rng = seed::rng(0x5e1f_7e57);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let s = random_spd(6, &mut rng);
        let na = rng.random_range(1..6);
        let (saa, sab, sbb) = (
            s.view((0, 0), (na, na)).into_owned(),
            s.view((0, na), (na, 6 - na)).into_owned(),
            s.view((na, na), (6 - na, 6 - na)).into_owned(),
        );
        let sbb_inv = sbb.clone().try_inverse().expect("SPD block");
        let schur = &saa - &sab * sbb_inv * sab.transpose();
        let rhs = gaussian_entropy(&CovMatrix(sbb))?
            + 0.5 * (na as f64 * (2.0 * PI * E).ln() + schur.determinant().ln());
        worst = worst.max((gaussian_entropy(&CovMatrix(s))? - rhs).abs());
    }
    Ok(worst)
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn entropy_quadrature() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for var in [0.25, 1.0, 9.0] {
        let sd = f64::sqrt(var);
        let neg_p_log_p = |x: f64| {
            let lp = -0.5 * x * x / var - 0.5 * (2.0 * PI * var).ln();
            -lp.exp() * lp
        };
        let h = simpson(neg_p_log_p, -14.0 * sd, 14.0 * sd, 20_000);
        let analytic = gaussian_entropy(&CovMatrix(DMatrix::from_element(1, 1, var)))?;
        worst = worst.max((analytic - h).abs());
    }
    Ok(worst)
}

fn normal_1d(mean: f64, var: f64) -> Result<GaussianMixture> {
    GaussianMixture::gaussian(
        DVector::from_element(1, mean),
        DMatrix::from_element(1, 1, var),
    )
}

fn kl_relative_error(q_mean: f64, q_var: f64, exact: f64) -> Result<f64> {
    let est = kl_gm_mc(
        &normal_1d(0.0, 1.0)?,
        &normal_1d(q_mean, q_var)?,
        100_000,
        0x6b1,
    )?;
    Ok((est.value - exact).abs() / exact)
}

/// Worst ratio shortfall `bound·opt − greedy` over random instances whose
/// entropy increments are all positive.
pub fn greedy_bound_violation(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = seed::rng(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..instances {
        let m = rng.random_range(6..=12);
        let n = rng.random_range(1..=4.min(m));
        let cands: Vec<Location> = (0..m)
            .map(|_| Location::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)))
            .collect();
        let theta = HyperParams::new(
            rng.random_range(1.0..2.0),
            rng.random_range(0.3..1.0),
            [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)],
        )?;
        let (_, greedy) = greedy_entropy_discrete(&cands, n, &theta)?;
        let full = cov_matrix(&cands, &theta)?;
        let mut opt = f64::NEG_INFINITY;
        for subset in subsets(m, n) {
            opt = opt.max(gaussian_entropy(&full.select(&subset))?);
        }
        let bound = 1.0 - ((n as f64 - 1.0) / n as f64).powi(n as i32);
        worst = worst.max(bound * opt - greedy);
    }
    Ok(worst)
}

/// All `n`-subsets of `0..m` in lexicographic order.
pub fn subsets(m: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    if n > m {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = n;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < m - n + i {
                cur[i] += 1;
                for j in i + 1..n {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Conjugate toy: prior N(0,1), one observation `y ~ N(θ, s²)`.
pub struct ConjugateToy {
    pub y: f64,
    pub noise_var: f64,
}

impl ConjugateToy {
    pub const DEFAULT: Self = Self {
        y: 0.8,
        noise_var: 0.25,
    };

    fn log_lik(&self, theta: f64) -> f64 {
        -0.5 * (self.y - theta).powi(2) / self.noise_var
    }

    /// Estimator applied to `p` prior draws weighted by the likelihood.
    pub fn estimate(&self, p: usize, seed: u64) -> Result<f64> {
        let prior = normal_1d(0.0, 1.0)?;
        let particles = prior.sample(p, &mut seed::rng(seed));
        let lw = particles.iter().map(|t| self.log_lik(t[0])).collect();
        conditional_entropy_gm(&ParticleSet::from_log_weights(particles, lw)?, &prior)
    }

    /// Posterior entropy by quadrature of the unnormalised density.
    pub fn quadrature(&self) -> f64 {
        let un = |t: f64| (-0.5 * t * t + self.log_lik(t)).exp();
        let (a, b, n) = (-12.0, 12.0, 24_000);
        let z = simpson(un, a, b, n);
        simpson(
            |t| {
                let d = un(t) / z;
                if d > 0.0 {
                    -d * d.ln()
                } else {
                    0.0
                }
            },
            a,
            b,
            n,
        )
    }
}

fn conjugate_toy_relative_error() -> Result<f64> {
    let toy = ConjugateToy::DEFAULT;
    let h = toy.quadrature();
    Ok((toy.estimate(100_000, 0x1e44a1)? - h).abs() / h.abs())
}

/// Runs every check in `CHECK_NAMES` order.
pub fn run(tol: &Tolerances) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check(CHECK_NAMES[0], entropy_closed_forms()?, tol.entropy_abs),
        check(CHECK_NAMES[1], chain_rule(50)?, tol.entropy_abs),
        check(CHECK_NAMES[2], entropy_quadrature()?, tol.quadrature_abs),
        check(
            CHECK_NAMES[3],
            kl_relative_error(1.0, 1.0, 0.5)?,
            tol.kl_rel,
        ),
        check(
            CHECK_NAMES[4],
            kl_relative_error(0.0, 4.0, 0.5 * (4f64.ln() + 0.25 - 1.0))?,
            tol.kl_rel,
        ),
        // Bound shortfall is ≤ 0 when the guarantee holds.
        check(
            CHECK_NAMES[5],
            greedy_bound_violation(100, 0x9eed)?,
            tol.greedy_abs,
        ),
        check(
            CHECK_NAMES[6],
            conjugate_toy_relative_error()?,
            tol.conditional_entropy_rel,
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_and_zero_tolerance_fails() {
        let ok = run(&Tolerances::default()).unwrap();
        assert_eq!(ok.iter().map(|c| c.name).collect::<Vec<_>>(), CHECK_NAMES);
        for c in &ok {
            assert!(c.passed, "{c:?}");
        }
        let zero = run(&Tolerances::default().scaled(0.0)).unwrap();
        assert!(zero.iter().any(|c| !c.passed));
    }

    #[test]
    fn subsets_count() {
        assert_eq!(subsets(6, 3).len(), 20);
        assert_eq!(subsets(4, 4), vec![vec![0, 1, 2, 3]]);
        assert_eq!(subsets(3, 0), vec![Vec::<usize>::new()]);
    }
}
