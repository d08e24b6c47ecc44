//! Full-covariance Gaussian mixtures over `R^d`.
//!
//! Used for the belief over kernel hyper-parameters (d = 4, log-space), for
//! informative regions (d = 2) and for observed space-time dynamics (d = 4).

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{cholesky_jittered, log_det};
use crate::seed::{self, Rng};

const WEIGHT_TOL: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-9;
const EM_MAX_ITER: usize = 200;
const EM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GmDocument", into = "GmDocument")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    factors: Vec<Factor>,
}

impl PartialEq for GaussianMixture {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.components == other.components
    }
}

/// Wire form: `{dim, components: [{weight, mean: [..], cov: [[..]]}]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmDocument {
    pub dim: usize,
    pub components: Vec<ComponentDocument>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentDocument {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl From<GaussianMixture> for GmDocument {
    fn from(gm: GaussianMixture) -> Self {
        GmDocument {
            dim: gm.dim,
            components: gm
                .components
                .into_iter()
                .map(|c| ComponentDocument {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    cov: c
                        .cov
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<GmDocument> for GaussianMixture {
    type Error = Error;

    fn try_from(doc: GmDocument) -> Result<Self> {
        let d = doc.dim;
        let mut comps = Vec::with_capacity(doc.components.len());
        for c in doc.components {
            if c.mean.len() != d || c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: c.mean.len(),
                });
            }
            comps.push(Component {
                weight: c.weight,
                mean: DVector::from_vec(c.mean),
                cov: DMatrix::from_fn(d, d, |i, j| c.cov[i][j]),
            });
        }
        GaussianMixture::new(d, comps)
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Raises every eigenvalue of a symmetric matrix to at least `floor`.
///
/// This is the exact maximizer of the Gaussian likelihood under an
/// eigenvalue lower bound, so EM stays monotone with it.
pub fn floor_eigenvalues(cov: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= floor {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

impl GaussianMixture {
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument(
                "mixture needs at least one component".into(),
            ));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be non-negative and sum to 1 (sum = {total})"
            )));
        }
        let mut factors = Vec::with_capacity(components.len());
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.cov.nrows(),
                });
            }
            let asym = (&c.cov - c.cov.transpose()).amax();
            if asym > SYMMETRY_TOL * c.cov.amax().max(1.0) {
                return Err(Error::InvalidArgument(
                    "component covariance is not symmetric".into(),
                ));
            }
            let chol = cholesky_jittered(&c.cov)?;
            let log_norm = -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det(&chol));
            factors.push(Factor { chol, log_norm });
        }
        Ok(Self {
            dim,
            components,
            factors,
        })
    }

    /// Single Gaussian component.
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        Self::new(
            d,
            vec![Component {
                weight: 1.0,
                mean,
                cov,
            }],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn to_document(&self) -> GmDocument {
        self.clone().into()
    }

    fn component_log_density(&self, c: usize, x: &DVector<f64>) -> f64 {
        let f = &self.factors[c];
        let diff = x - &self.components[c].mean;
        let z = f
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        f.log_norm - 0.5 * z.norm_squared()
    }

    fn component_log_densities(&self, x: &DVector<f64>, out: &mut Vec<f64>) {
        out.clear();
        for (i, c) in self.components.iter().enumerate() {
            out.push(c.weight.ln() + self.component_log_density(i, x));
        }
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut buf = Vec::with_capacity(self.components.len());
        self.component_log_densities(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight)
    }

    /// Mixture covariance (law of total variance).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        self.components
            .iter()
            .fold(DMatrix::zeros(self.dim, self.dim), |acc, c| {
                let d = &c.mean - &mu;
                acc + (&c.cov + &d * d.transpose()) * c.weight
            })
    }

    /// Index of the component a uniform draw `u ∈ [0,1)` falls into.
    fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        self.components
            .iter()
            .rposition(|c| c.weight > 0.0)
            .unwrap_or(self.components.len() - 1)
    }

    pub fn sample_one(&self, rng: &mut Rng) -> DVector<f64> {
        let c = self.pick(rng.random());
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.components[c].mean + self.factors[c].chol.l_dirty().lower_triangle() * z
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }
}

/// Random initial mixture: uniform weights, means uniform inside `bounds`,
/// diagonal covariances with per-axis std-dev `range / k`.
pub fn init_gm(
    k: usize,
    bounds: &[(f64, f64)],
    reg_floor: f64,
    seed: u64,
) -> Result<GaussianMixture> {
    if bounds.is_empty() {
        return Err(Error::InvalidArgument("empty bounds".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if bounds
        .iter()
        .any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || hi < lo)
    {
        return Err(Error::InvalidArgument(format!("invalid bounds {bounds:?}")));
    }
    let d = bounds.len();
    let mut rng = seed::rng(seed);
    let comps = (0..k)
        .map(|_| {
            let mean = DVector::from_iterator(
                d,
                bounds.iter().map(|&(lo, hi)| {
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        lo
                    }
                }),
            );
            let var = DVector::from_iterator(
                d,
                bounds
                    .iter()
                    .map(|&(lo, hi)| ((hi - lo) / k as f64).powi(2).max(reg_floor)),
            );
            Component {
                weight: 1.0 / k as f64,
                mean,
                cov: DMatrix::from_diagonal(&var),
            }
        })
        .collect();
    GaussianMixture::new(d, comps)
}

pub fn gm_density(point: &DVector<f64>, gm: &GaussianMixture) -> Result<f64> {
    gm.density(point)
}

/// Ancestral sampling: categorical component, then multivariate normal.
pub fn gm_sample(gm: &GaussianMixture, n: usize, seed: u64) -> Vec<DVector<f64>> {
    gm.sample(n, &mut seed::rng(seed))
}

/// Result of an EM fit together with the per-iteration mean log-likelihood.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    pub log_likelihood_trace: Vec<f64>,
}

fn kmeans_pp(points: &[DVector<f64>], k: usize, rng: &mut Rng) -> Vec<DVector<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - &centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min((p - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

fn sample_moments(points: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = points[0].len();
    let n = points.len() as f64;
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n;
    let cov = points.iter().fold(DMatrix::zeros(d, d), |acc, p| {
        let c = p - &mean;
        acc + &c * c.transpose()
    }) / n;
    (mean, cov)
}

/// Expectation-maximization with k-means++ seeding. Stops after 200
/// iterations or when the mean log-likelihood improves by less than 1e-6.
pub fn fit_gm_traced(
    points: &[DVector<f64>],
    k: usize,
    reg_floor: f64,
    seed: u64,
) -> Result<EmFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientData {
            needed: k,
            got: points.len(),
        });
    }
    let d = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: p.len(),
        });
    }
    let n = points.len();
    let mut rng = seed::rng(seed);

    let (_, global_cov) = sample_moments(points);
    let global_cov = floor_eigenvalues(&global_cov, reg_floor);
    let centers = if k == 1 {
        vec![points[0].clone()]
    } else {
        kmeans_pp(points, k, &mut rng)
    };
    let mut gm = GaussianMixture::new(
        d,
        centers
            .into_iter()
            .map(|mean| Component {
                weight: 1.0 / k as f64,
                mean,
                cov: global_cov.clone(),
            })
            .collect(),
    )?;

    let mut trace = Vec::new();
    let mut resp = DMatrix::<f64>::zeros(n, k);
    let mut buf = Vec::with_capacity(k);
    for _ in 0..EM_MAX_ITER {
        // E-step
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            gm.component_log_densities(p, &mut buf);
            let lse = log_sum_exp(&buf);
            ll += lse;
            for (c, v) in buf.iter().enumerate() {
                resp[(i, c)] = (v - lse).exp();
            }
        }
        let mean_ll = ll / n as f64;
        let converged = trace
            .last()
            .is_some_and(|prev: &f64| (mean_ll - prev).abs() < EM_TOL);
        trace.push(mean_ll);
        if converged {
            break;
        }

        // M-step
        let mut comps = Vec::with_capacity(k);
        for c in 0..k {
            let nk: f64 = resp.column(c).sum();
            let old = &gm.components[c];
            if nk <= 1e-12 * n as f64 {
                comps.push(Component {
                    weight: nk / n as f64,
                    mean: old.mean.clone(),
                    cov: old.cov.clone(),
                });
                continue;
            }
            let mean = points
                .iter()
                .enumerate()
                .fold(DVector::zeros(d), |acc, (i, p)| acc + p * resp[(i, c)])
                / nk;
            let cov = points
                .iter()
                .enumerate()
                .fold(DMatrix::zeros(d, d), |acc, (i, p)| {
                    let diff = p - &mean;
                    acc + &diff * diff.transpose() * resp[(i, c)]
                })
                / nk;
            comps.push(Component {
                weight: nk / n as f64,
                mean,
                cov: floor_eigenvalues(&cov, reg_floor),
            });
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= total;
        }
        gm = GaussianMixture::new(d, comps)?;
    }
    Ok(EmFit {
        mixture: gm,
        log_likelihood_trace: trace,
    })
}

pub fn fit_gm(
    points: &[DVector<f64>],
    k: usize,
    reg_floor: f64,
    seed: u64,
) -> Result<GaussianMixture> {
    Ok(fit_gm_traced(points, k, reg_floor, seed)?.mixture)
}
