//! Gaussian-process substrate: squared-exponential kernel, covariance
//! assembly, joint-Gaussian entropy and likelihood, and posterior variance.
//!
//! Everything here is a pure function of its inputs. Entropies are in nats.

use std::f64::consts::{E, PI};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor applied before taking the log of a conditional variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const JITTER_SCALE: f64 = 1e-10;
const JITTER_DOUBLINGS: usize = 8;

/// A point in the 2-D monitored region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Exact coordinate equality, the Kronecker delta of the noise term.
    fn same_site(&self, other: &Location) -> bool {
        self.x.to_bits() == other.x.to_bits() && self.y.to_bits() == other.y.to_bits()
    }
}

/// Kernel hyper-parameters: signal std-dev, noise std-dev and one
/// length-scale per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub sigma_f: f64,
    pub sigma_n: f64,
    pub sigma_l: [f64; 2],
}

impl HyperParams {
    pub fn new(sigma_f: f64, sigma_n: f64, sigma_l: [f64; 2]) -> Result<Self> {
        let theta = Self {
            sigma_f,
            sigma_n,
            sigma_l,
        };
        theta.validate()?;
        Ok(theta)
    }

    /// Checks that every component can be carried through log-space.
    ///
    /// `sigma_n = 0` is admitted as the noise-free limit; it has no
    /// log-space image and such a point must never be used as a particle.
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.sigma_f) || !ok(self.sigma_l[0]) || !ok(self.sigma_l[1]) {
            return Err(Error::InvalidArgument(format!(
                "hyper-parameters must be strictly positive and finite: {self:?}"
            )));
        }
        if !(self.sigma_n.is_finite() && self.sigma_n >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise std-dev must be non-negative and finite: {self:?}"
            )));
        }
        Ok(())
    }

    /// Componentwise log, ordered `(σ_f, σ_n, σ_l1, σ_l2)`.
    pub fn to_log(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.sigma_f.ln(),
            self.sigma_n.ln(),
            self.sigma_l[0].ln(),
            self.sigma_l[1].ln(),
        ])
    }

    pub fn from_log(v: &DVector<f64>) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::DimensionMismatch {
                expected: 4,
                got: v.len(),
            });
        }
        Self::new(v[0].exp(), v[1].exp(), [v[2].exp(), v[3].exp()])
    }

    /// Componentwise scaling, handy for deliberately wrong beliefs in tests.
    pub fn scaled(&self, f: f64, n: f64, l: f64) -> Self {
        Self {
            sigma_f: self.sigma_f * f,
            sigma_n: self.sigma_n * n,
            sigma_l: [self.sigma_l[0] * l, self.sigma_l[1] * l],
        }
    }
}

/// Symmetric positive semi-definite covariance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CovMatrix(pub DMatrix<f64>);

impl CovMatrix {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Sub-matrix on the given row/column indices.
    pub fn select(&self, idx: &[usize]) -> CovMatrix {
        CovMatrix(DMatrix::from_fn(idx.len(), idx.len(), |i, j| {
            self.0[(idx[i], idx[j])]
        }))
    }
}

/// Cholesky factorization with the diagonal jitter ladder: plain first, then
/// `1e-10 * trace / n` doubled up to eight times.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let n = m.nrows().max(1);
    let trace = m.trace().abs();
    let base = if trace > 0.0 {
        JITTER_SCALE * trace / n as f64
    } else {
        JITTER_SCALE
    };
    for step in 0..=JITTER_DOUBLINGS {
        let jitter = base * f64::from(1u32 << step);
        let mut jm = m.clone();
        for i in 0..m.nrows() {
            jm[(i, i)] += jitter;
        }
        if let Some(c) = jm.cholesky() {
            return Ok(c);
        }
    }
    Err(Error::DegenerateCovariance {
        attempts: JITTER_DOUBLINGS + 2,
    })
}

/// `log |Σ|` from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Squared-exponential covariance between two sites, plus the noise term on
/// exactly coincident sites.
pub fn kernel_eval(xi: &Location, xj: &Location, theta: &HyperParams) -> Result<f64> {
    theta.validate()?;
    Ok(kernel_unchecked(xi, xj, theta))
}

#[inline]
pub(crate) fn kernel_unchecked(xi: &Location, xj: &Location, theta: &HyperParams) -> f64 {
    let dx = (xi.x - xj.x) / theta.sigma_l[0];
    let dy = (xi.y - xj.y) / theta.sigma_l[1];
    let mut k = theta.sigma_f * theta.sigma_f * (-0.5 * (dx * dx + dy * dy)).exp();
    if xi.same_site(xj) {
        k += theta.sigma_n * theta.sigma_n;
    }
    k
}

pub fn cov_matrix(xs: &[Location], theta: &HyperParams) -> Result<CovMatrix> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("empty location set".into()));
    }
    theta.validate()?;
    Ok(CovMatrix(cov_unchecked(xs, theta)))
}

pub(crate) fn cov_unchecked(xs: &[Location], theta: &HyperParams) -> DMatrix<f64> {
    let n = xs.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let k = kernel_unchecked(&xs[i], &xs[j], theta);
            m[(i, j)] = k;
            m[(j, i)] = k;
        }
    }
    m
}

/// Differential entropy `½ log((2πe)^n |Σ|)` of a zero-mean joint Gaussian.
pub fn gaussian_entropy(sigma: &CovMatrix) -> Result<f64> {
    let n = sigma.dim();
    if n == 0 {
        return Ok(0.0);
    }
    let chol = cholesky_jittered(sigma.matrix())?;
    Ok(0.5 * (n as f64 * (2.0 * PI * E).ln() + log_det(&chol)))
}

/// Log-density of `y` under the zero-mean GP prior at sites `xs`.
pub fn log_likelihood(y: &[f64], xs: &[Location], theta: &HyperParams) -> Result<f64> {
    if y.len() != xs.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: y.len(),
        });
    }
    let sigma = cov_matrix(xs, theta)?;
    log_likelihood_cov(y, &sigma)
}

pub fn log_likelihood_cov(y: &[f64], sigma: &CovMatrix) -> Result<f64> {
    let n = sigma.dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    let chol = cholesky_jittered(sigma.matrix())?;
    let yv = DVector::from_column_slice(y);
    // ‖L⁻¹y‖² = yᵀΣ⁻¹y
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&yv)
        .ok_or(Error::DegenerateCovariance { attempts: 0 })?;
    Ok(-0.5 * z.norm_squared() - 0.5 * log_det(&chol) - 0.5 * n as f64 * (2.0 * PI).ln())
}

/// GP posterior at arbitrary query sites given a fixed conditioning set.
///
/// The conditioning factorization is computed once, so repeated queries
/// (as in the region sampler) cost `O(|A|²)` each.
#[derive(Clone, Debug)]
pub struct Conditioner {
    theta: HyperParams,
    anchors: Vec<Location>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl Conditioner {
    pub fn new(anchors: &[Location], theta: &HyperParams) -> Result<Self> {
        theta.validate()?;
        let chol = if anchors.is_empty() {
            None
        } else {
            Some(cholesky_jittered(&cov_unchecked(anchors, theta))?)
        };
        Ok(Self {
            theta: *theta,
            anchors: anchors.to_vec(),
            chol,
        })
    }

    pub fn theta(&self) -> &HyperParams {
        &self.theta
    }

    fn cross(&self, x: &Location) -> DVector<f64> {
        DVector::from_iterator(
            self.anchors.len(),
            self.anchors
                .iter()
                .map(|a| kernel_unchecked(x, a, &self.theta)),
        )
    }

    /// Posterior variance `K(x,x) − k_Aᵀ K_AA⁻¹ k_A`, clamped at zero.
    pub fn variance(&self, x: &Location) -> f64 {
        let prior = kernel_unchecked(x, x, &self.theta);
        let Some(chol) = &self.chol else {
            return prior;
        };
        let k = self.cross(x);
        let v = chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .expect("cholesky factor has a positive diagonal");
        (prior - v.norm_squared()).max(0.0)
    }

    pub fn entropy(&self, x: &Location) -> f64 {
        point_entropy(self.variance(x))
    }

    /// Posterior mean at `x` given values observed at the anchors.
    pub fn mean(&self, x: &Location, y: &[f64]) -> f64 {
        let Some(chol) = &self.chol else {
            return 0.0;
        };
        let alpha = chol.solve(&DVector::from_column_slice(y));
        self.cross(x).dot(&alpha)
    }
}

/// `½ log(2πe·v)` with the variance floored.
pub fn point_entropy(variance: f64) -> f64 {
    0.5 * (2.0 * PI * E * variance.max(VARIANCE_FLOOR)).ln()
}

pub fn conditional_variance(
    x: &Location,
    anchors: &[Location],
    theta: &HyperParams,
) -> Result<f64> {
    Ok(Conditioner::new(anchors, theta)?.variance(x))
}

pub fn conditional_entropy_point(
    x: &Location,
    anchors: &[Location],
    theta: &HyperParams,
) -> Result<f64> {
    Ok(point_entropy(conditional_variance(x, anchors, theta)?))
}

/// Predictive log-likelihood of held-out values `y_eval` at `x_eval` given
/// observations `(x_obs, y_obs)`, using the full joint posterior.
pub fn predictive_log_likelihood(
    x_obs: &[Location],
    y_obs: &[f64],
    x_eval: &[Location],
    y_eval: &[f64],
    theta: &HyperParams,
) -> Result<f64> {
    if x_obs.len() != y_obs.len() {
        return Err(Error::DimensionMismatch {
            expected: x_obs.len(),
            got: y_obs.len(),
        });
    }
    if x_eval.len() != y_eval.len() {
        return Err(Error::DimensionMismatch {
            expected: x_eval.len(),
            got: y_eval.len(),
        });
    }
    theta.validate()?;
    let m = x_eval.len();
    let k_ee = cov_unchecked(x_eval, theta);
    if x_obs.is_empty() {
        return log_likelihood_cov(y_eval, &CovMatrix(k_ee));
    }
    let chol = cholesky_jittered(&cov_unchecked(x_obs, theta))?;
    let k_eo = DMatrix::from_fn(m, x_obs.len(), |i, j| {
        kernel_unchecked(&x_eval[i], &x_obs[j], theta)
    });
    let alpha = chol.solve(&DVector::from_column_slice(y_obs));
    let mu = &k_eo * alpha;
    let w = chol
        .l_dirty()
        .solve_lower_triangular(&k_eo.transpose())
        .ok_or(Error::DegenerateCovariance { attempts: 0 })?;
    let mut post = k_ee - w.transpose() * w;
    post = (&post + post.transpose()) * 0.5;
    let resid: Vec<f64> = y_eval.iter().zip(mu.iter()).map(|(a, b)| a - b).collect();
    log_likelihood_cov(&resid, &CovMatrix(post))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn th(f: f64, n: f64, l: f64) -> HyperParams {
        HyperParams::new(f, n, [l, l]).unwrap()
    }

    const O: Location = Location::new(0.0, 0.0);

    #[test]
    fn kernel_examples() {
        assert_eq!(kernel_eval(&O, &O, &th(1.0, 0.0, 1.0)).unwrap(), 1.0);
        let k = kernel_eval(&O, &Location::new(1.0, 0.0), &th(1.0, 0.0, 1.0)).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        let p = Location::new(3.0, 3.0);
        assert!((kernel_eval(&p, &p, &th(1.0, 0.5, 1.0)).unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn kernel_rejects_nonpositive() {
        let bad = HyperParams {
            sigma_f: 0.0,
            sigma_n: 0.1,
            sigma_l: [1.0, 1.0],
        };
        assert!(matches!(
            kernel_eval(&O, &O, &bad),
            Err(Error::InvalidArgument(_))
        ));
        assert!(HyperParams::new(1.0, 0.1, [-1.0, 1.0]).is_err());
    }

    #[test]
    fn cov_matrix_examples() {
        let t = th(1.0, 0.0, 1.0);
        assert_eq!(
            cov_matrix(&[O], &t).unwrap().0,
            DMatrix::from_element(1, 1, 1.0)
        );
        let c = cov_matrix(&[O, O], &t).unwrap();
        assert_eq!(c.0, DMatrix::from_element(2, 2, 1.0));
        assert!(cov_matrix(&[], &t).is_err());
    }

    #[test]
    fn entropy_examples() {
        let h1 = gaussian_entropy(&CovMatrix(DMatrix::from_element(1, 1, 1.0))).unwrap();
        assert!((h1 - 1.418_938_533_204_672_7).abs() < 1e-12);
        let h2 = gaussian_entropy(&CovMatrix(DMatrix::identity(2, 2))).unwrap();
        assert!((h2 - 2.837_877_066_409_345).abs() < 1e-12);
        let h4 = gaussian_entropy(&CovMatrix(DMatrix::from_element(1, 1, 4.0))).unwrap();
        assert!((h4 - (h1 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn likelihood_examples() {
        let t = th(1.0, 0.0, 1.0);
        let l0 = log_likelihood(&[0.0], &[O], &t).unwrap();
        assert!((l0 + 0.918_938_533_204_672_7).abs() < 1e-12);
        let l1 = log_likelihood(&[1.0], &[O], &t).unwrap();
        assert!((l1 + 1.418_938_533_204_672_7).abs() < 1e-12);
        let err = log_likelihood(&[0.0; 3], &[O, Location::new(1.0, 0.0)], &t);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn conditional_examples() {
        let t = th(1.0, 0.1, 1.0);
        assert!((conditional_variance(&O, &[], &t).unwrap() - 1.01).abs() < 1e-15);

        let t0 = th(1.0, 0.0, 1.0);
        let a = [Location::new(0.3, 0.2), O];
        assert!(conditional_variance(&O, &a, &t0).unwrap().abs() < 1e-9);
        let floor = 0.5 * (2.0 * PI * E * 1e-12).ln();
        let h = conditional_entropy_point(&Location::new(0.3, 0.2), &a, &t0).unwrap();
        assert!((h - floor).abs() < 1e-3);

        let far = Location::new(10.0, 0.0);
        let v = conditional_variance(&far, &[O], &t).unwrap();
        // direct formula: K(x,x) - k²/K(a,a)
        let k = (-50.0f64).exp();
        let direct = 1.01 - k * k / 1.01;
        assert!((v - direct).abs() < 1e-15);
        assert!((v - 1.01).abs() < 1e-6);

        let h_empty = conditional_entropy_point(&O, &[], &th(1.0, 1e-9, 1.0)).unwrap();
        assert!((h_empty - 1.418_938_533).abs() < 1e-8);
    }

    #[test]
    fn jitter_rescues_rank_deficient() {
        let m = DMatrix::from_element(2, 2, 1.0);
        assert!(cholesky_jittered(&m).is_ok());
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            cholesky_jittered(&neg),
            Err(Error::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn predictive_matches_conditioner_in_one_dim() {
        let t = th(1.3, 0.2, 0.7);
        let obs = [O, Location::new(0.5, 0.1)];
        let y = [0.4, -0.2];
        let q = Location::new(0.2, 0.3);
        let c = Conditioner::new(&obs, &t).unwrap();
        let mu = c.mean(&q, &y);
        let var = c.variance(&q);
        let direct = -0.5 * (0.7 - mu).powi(2) / var - 0.5 * (2.0 * PI * var).ln();
        let lp = predictive_log_likelihood(&obs, &y, &[q], &[0.7], &t).unwrap();
        assert!((lp - direct).abs() < 1e-10);
    }
}
