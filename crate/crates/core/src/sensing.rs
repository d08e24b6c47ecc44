//! Greedy placement of informative regions in continuous 2-D space.
//!
//! Each greedy step runs a Metropolis-Hastings chain over the location
//! likelihood `P(x) = exp(−H(x | anchors)^(−s_c))` (zero outside the region),
//! resamples the chain by likelihood, fits a small 2-D mixture to it and
//! draws anchor sites from that mixture to condition the next step.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::belief::{fit_gm, resample_systematic, GaussianMixture, GmDocument, ParticleSet};
use crate::error::{Error, Result};
use crate::gp::{cov_matrix, gaussian_entropy, Conditioner, HyperParams, Location};
use crate::mcmc::{run_chain, ChainConfig, GaussianProposal};
use crate::seed::{self, Rng};

/// Entropy (nats) at or below which a site is treated as uninformative.
pub const H_MIN: f64 = 1e-3;

const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

/// Monitored region: an axis-aligned rectangle minus polygonal holes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bounds: Rect,
    #[serde(default)]
    pub holes: Vec<Vec<Location>>,
}

fn in_polygon(p: &Location, poly: &[Location]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let a = &poly[i];
        let b = &poly[(i + n - 1) % n];
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
    }
    inside
}

impl Region {
    pub fn square(side: f64) -> Self {
        Self::rect(0.0, 0.0, side, side)
    }

    pub fn rect(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            bounds: Rect {
                min_x,
                min_y,
                max_x,
                max_y,
            },
            holes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        let finite = [b.min_x, b.min_y, b.max_x, b.max_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite || b.max_x <= b.min_x || b.max_y <= b.min_y {
            return Err(Error::Config(format!(
                "region must have positive area: {b:?}"
            )));
        }
        for hole in &self.holes {
            if hole.len() < 3 {
                return Err(Error::Config(
                    "hole polygons need at least 3 vertices".into(),
                ));
            }
            let strictly_inside = hole
                .iter()
                .all(|v| v.x > b.min_x && v.x < b.max_x && v.y > b.min_y && v.y < b.max_y);
            if !strictly_inside {
                return Err(Error::Config(
                    "holes must lie strictly inside the bounds".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Location) -> bool {
        let b = &self.bounds;
        p.x >= b.min_x
            && p.x <= b.max_x
            && p.y >= b.min_y
            && p.y <= b.max_y
            && !self.holes.iter().any(|h| in_polygon(p, h))
    }

    pub fn width(&self) -> f64 {
        self.bounds.max_x - self.bounds.min_x
    }

    pub fn height(&self) -> f64 {
        self.bounds.max_y - self.bounds.min_y
    }

    /// Longest side of the bounding rectangle.
    pub fn extent(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> Location {
        Location::new(
            0.5 * (self.bounds.min_x + self.bounds.max_x),
            0.5 * (self.bounds.min_y + self.bounds.max_y),
        )
    }

    pub fn sample_uniform(&self, rng: &mut Rng) -> Result<Location> {
        let b = &self.bounds;
        for _ in 0..MAX_REJECTIONS {
            let p = Location::new(
                rng.random_range(b.min_x..=b.max_x),
                rng.random_range(b.min_y..=b.max_y),
            );
            if self.contains(&p) {
                return Ok(p);
            }
        }
        Err(Error::PlannerDegenerate(
            "uniform sampling kept landing in holes".into(),
        ))
    }

    /// Rejection-samples one site from `gm` that lies inside the region.
    pub fn sample_from(&self, gm: &GaussianMixture, rng: &mut Rng) -> Result<Location> {
        for _ in 0..MAX_REJECTIONS {
            let v = gm.sample_one(rng);
            let p = Location::new(v[0], v[1]);
            if self.contains(&p) {
                return Ok(p);
            }
        }
        Err(Error::PlannerDegenerate(format!(
            "{MAX_REJECTIONS} consecutive samples fell outside the region"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingPlanConfig {
    /// Informative regions per cycle.
    pub n_r: usize,
    /// Anchor sites per region used for conditioning.
    pub n_o: usize,
    /// Physical sensing sites per region.
    pub n_p: usize,
    /// Entropy amplification exponent.
    pub s_c: f64,
    /// Chain samples per greedy step.
    pub p: usize,
    /// Random-walk covariance; `None` means `(0.05·extent)²·I`.
    pub proposal_cov_x: Option<[[f64; 2]; 2]>,
    pub chain: ChainConfig,
    pub k_region: usize,
    pub reg_floor: f64,
}

impl Default for SensingPlanConfig {
    fn default() -> Self {
        Self {
            n_r: 5,
            n_o: 2,
            n_p: 2,
            s_c: 150.0,
            p: 1000,
            proposal_cov_x: None,
            chain: ChainConfig {
                burn_in: 100,
                thin: 1,
            },
            k_region: 2,
            reg_floor: 1e-6,
        }
    }
}

impl SensingPlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_r == 0 || self.n_o == 0 || self.n_p == 0 {
            return Err(Error::Config("n_r, n_o and n_p must be at least 1".into()));
        }
        if !(self.s_c > 0.0) {
            return Err(Error::Config("s_c must be positive".into()));
        }
        if self.k_region == 0 || self.p < self.k_region {
            return Err(Error::Config("need p >= k_region >= 1".into()));
        }
        Ok(())
    }

    pub fn proposal_cov(&self, region: &Region) -> DMatrix<f64> {
        match self.proposal_cov_x {
            Some(c) => DMatrix::from_fn(2, 2, |i, j| c[i][j]),
            None => DMatrix::identity(2, 2) * (0.05 * region.extent()).powi(2),
        }
    }
}

/// Log of the location likelihood given a conditioning set.
pub fn location_log_likelihood(
    x: &Location,
    anchors: &[Location],
    theta: &HyperParams,
    s_c: f64,
    region: &Region,
) -> Result<f64> {
    if !(s_c > 0.0) {
        return Err(Error::InvalidArgument("s_c must be positive".into()));
    }
    let cond = Conditioner::new(anchors, theta)?;
    Ok(log_likelihood_from_entropy(x, &cond, s_c, region))
}

fn log_likelihood_from_entropy(x: &Location, cond: &Conditioner, s_c: f64, region: &Region) -> f64 {
    if !region.contains(x) {
        return f64::NEG_INFINITY;
    }
    entropy_log_likelihood(cond.entropy(x), s_c)
}

/// `−H^(−s_c)`, or `−∞` at or below `H_MIN`.
pub fn entropy_log_likelihood(h: f64, s_c: f64) -> f64 {
    if h <= H_MIN {
        f64::NEG_INFINITY
    } else {
        -(-s_c * h.ln()).exp()
    }
}

#[derive(Clone, Debug)]
pub struct RegionChain {
    /// Chain states with normalized location-likelihood weights.
    pub samples: ParticleSet,
    pub acceptance_rate: f64,
}

impl RegionChain {
    pub fn locations(&self) -> Vec<Location> {
        self.samples
            .particles()
            .iter()
            .map(|v| Location::new(v[0], v[1]))
            .collect()
    }
}

/// Metropolis-Hastings over the location likelihood conditioned on `anchors`.
pub fn mcmc_region(
    anchors: &[Location],
    theta: &HyperParams,
    region: &Region,
    cfg: &SensingPlanConfig,
    seed: u64,
) -> Result<RegionChain> {
    let cond = Conditioner::new(anchors, theta)?;
    let mut rng = seed::rng(seed);
    let target = |v: &DVector<f64>| {
        log_likelihood_from_entropy(&Location::new(v[0], v[1]), &cond, cfg.s_c, region)
    };

    let mut start = None;
    for _ in 0..MAX_REJECTIONS {
        let p = region.sample_uniform(&mut rng)?;
        let v = DVector::from_vec(vec![p.x, p.y]);
        if target(&v).is_finite() {
            start = Some(v);
            break;
        }
    }
    let start = start.ok_or_else(|| {
        Error::PlannerDegenerate("no informative start location found in the region".into())
    })?;
    let proposal = GaussianProposal::new(&cfg.proposal_cov(region))?;
    let out = run_chain(start, &proposal, cfg.p, cfg.chain, &mut rng, target)?;
    let rate = out.acceptance_rate();
    Ok(RegionChain {
        samples: ParticleSet::from_log_weights(out.samples, out.log_target)?,
        acceptance_rate: rate,
    })
}

/// Regions and their conditioning anchors for one planning round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionSetDocument", into = "RegionSetDocument")]
pub struct InformativeRegionSet {
    pub regions: Vec<GaussianMixture>,
    pub anchors: Vec<Vec<Location>>,
    pub theta: HyperParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionSetDocument {
    pub theta: HyperParams,
    pub regions: Vec<GmDocument>,
    pub anchors: Vec<Vec<[f64; 2]>>,
}

impl From<InformativeRegionSet> for RegionSetDocument {
    fn from(s: InformativeRegionSet) -> Self {
        Self {
            theta: s.theta,
            regions: s.regions.into_iter().map(Into::into).collect(),
            anchors: s
                .anchors
                .into_iter()
                .map(|a| a.into_iter().map(|p| [p.x, p.y]).collect())
                .collect(),
        }
    }
}

impl TryFrom<RegionSetDocument> for InformativeRegionSet {
    type Error = Error;

    fn try_from(d: RegionSetDocument) -> Result<Self> {
        if d.regions.len() != d.anchors.len() {
            return Err(Error::DimensionMismatch {
                expected: d.regions.len(),
                got: d.anchors.len(),
            });
        }
        Ok(Self {
            theta: d.theta,
            regions: d
                .regions
                .into_iter()
                .map(GaussianMixture::try_from)
                .collect::<Result<_>>()?,
            anchors: d
                .anchors
                .into_iter()
                .map(|a| a.into_iter().map(|[x, y]| Location::new(x, y)).collect())
                .collect(),
        })
    }
}

impl InformativeRegionSet {
    pub fn all_anchors(&self) -> Vec<Location> {
        self.anchors.iter().flatten().copied().collect()
    }
}

pub fn greedy_regions(
    theta: &HyperParams,
    region: &Region,
    cfg: &SensingPlanConfig,
    seed: u64,
) -> Result<InformativeRegionSet> {
    cfg.validate()?;
    region.validate()?;
    let mut regions = Vec::with_capacity(cfg.n_r);
    let mut anchors: Vec<Vec<Location>> = Vec::with_capacity(cfg.n_r);
    let mut conditioning: Vec<Location> = Vec::new();
    for step in 0..cfg.n_r {
        let step_seed = seed::child(seed, &format!("region-{step}"));
        let chain = mcmc_region(
            &conditioning,
            theta,
            region,
            cfg,
            seed::child(step_seed, "chain"),
        )?;
        let resampled = resample_systematic(&chain.samples, seed::child(step_seed, "resample"));
        let gm = fit_gm(
            &resampled,
            cfg.k_region,
            cfg.reg_floor,
            seed::child(step_seed, "fit"),
        )?;
        let mut rng = seed::rng(seed::child(step_seed, "anchors"));
        let picked = (0..cfg.n_o)
            .map(|_| region.sample_from(&gm, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        conditioning.extend_from_slice(&picked);
        anchors.push(picked);
        regions.push(gm);
    }
    Ok(InformativeRegionSet {
        regions,
        anchors,
        theta: *theta,
    })
}

/// `n_p` sites per region, region-major, drawn independently of the anchors.
pub fn sample_sensing_locations(
    irs: &InformativeRegionSet,
    n_p: usize,
    region: &Region,
    seed: u64,
) -> Result<Vec<Location>> {
    if n_p == 0 {
        return Err(Error::InvalidArgument("n_p must be at least 1".into()));
    }
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(n_p * irs.regions.len());
    for gm in &irs.regions {
        for _ in 0..n_p {
            out.push(region.sample_from(gm, &mut rng)?);
        }
    }
    Ok(out)
}

/// Classic greedy max-entropy subset selection over a finite candidate set.
/// Returns the selected indices (in selection order) and their joint entropy.
pub fn greedy_entropy_discrete(
    candidates: &[Location],
    n: usize,
    theta: &HyperParams,
) -> Result<(Vec<usize>, f64)> {
    if n > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {n} of {} candidates",
            candidates.len()
        )));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut sites: Vec<Location> = Vec::with_capacity(n);
    for _ in 0..n {
        let cond = Conditioner::new(&sites, theta)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in candidates.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let v = cond.variance(c);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        let (i, _) = best.expect("at least one candidate remains");
        chosen.push(i);
        sites.push(candidates[i]);
    }
    let h = gaussian_entropy(&cov_matrix(&sites, theta)?)?;
    Ok((chosen, h))
}

/// Joint entropy of a location set under `theta`.
pub fn joint_entropy(sites: &[Location], theta: &HyperParams) -> Result<f64> {
    gaussian_entropy(&cov_matrix(sites, theta)?)
}
