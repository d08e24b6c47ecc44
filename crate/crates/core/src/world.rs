//! Ground-truth fields the robots sense.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::belief::{
    fit_gm, mcmc_hyperparams_multi, resample_systematic, AdaptationConfig, GaussianMixture,
};
use crate::error::{Error, Result};
use crate::gp::Location;
use crate::observation::ObservationBatch;
use crate::seed;
use crate::sensing::Region;

/// Parameters of the seeded multi-scale generator. Half of the components
/// are drifting plane waves, half are drifting gamma-profile bumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtificialFieldSpec {
    pub n_components: usize,
    pub seed: u64,
    /// Wavelength range as fractions of the region extent.
    pub wavelength_frac: [f64; 2],
    /// Bump scale range as fractions of the region extent.
    pub bump_scale_frac: [f64; 2],
    pub bump_shape: [f64; 2],
    /// Upper drift speed as a fraction of the extent per second.
    pub max_speed_frac: f64,
    /// Rescale to zero mean and unit std over the region at `t = 0`.
    pub normalize: bool,
}

impl Default for ArtificialFieldSpec {
    fn default() -> Self {
        Self {
            n_components: 220,
            seed: 0,
            wavelength_frac: [0.5, 2.0],
            bump_scale_frac: [0.15, 0.5],
            bump_shape: [2.0, 4.0],
            max_speed_frac: 0.02,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldComponent {
    Sinusoid {
        amplitude: f64,
        omega: [f64; 2],
        phase: f64,
        velocity: [f64; 2],
    },
    GammaBump {
        amplitude: f64,
        center: [f64; 2],
        shape: f64,
        scale: f64,
        velocity: [f64; 2],
    },
}

/// `r^(k−1)·e^(−r/s)` rescaled to peak value 1.
fn gamma_profile(r: f64, shape: f64, scale: f64) -> f64 {
    let mode = (shape - 1.0) * scale;
    if mode <= 0.0 {
        (-r / scale).exp()
    } else if r == 0.0 {
        0.0
    } else {
        ((shape - 1.0) * (r / mode).ln() - (r - mode) / scale).exp()
    }
}

/// Triangle-wave position of `c + v·t` bouncing inside `[lo, hi]`.
fn reflect(c: f64, v: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let len = hi - lo;
    let u = (c - lo + v * t).rem_euclid(2.0 * len);
    lo + if u <= len { u } else { 2.0 * len - u }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtificialField {
    pub spec: ArtificialFieldSpec,
    pub components: Vec<FieldComponent>,
    /// Bump centres bounce inside this box (the region padded by its extent).
    pub travel_box: [f64; 4],
    pub offset: f64,
    pub gain: f64,
}

impl ArtificialField {
    pub fn generate(spec: &ArtificialFieldSpec, region: &Region) -> Result<Self> {
        if spec.n_components == 0 {
            return Err(Error::Config(
                "artificial field needs at least one component".into(),
            ));
        }
        let ranges = [spec.wavelength_frac, spec.bump_scale_frac, spec.bump_shape];
        if ranges.iter().any(|[lo, hi]| !(*lo > 0.0 && hi >= lo)) || !(spec.max_speed_frac >= 0.0) {
            return Err(Error::Config(format!(
                "invalid artificial field ranges: {spec:?}"
            )));
        }
        let ext = region.extent();
        let b = region.bounds;
        let pad = 0.5 * ext;
        let travel_box = [b.min_x - pad, b.min_y - pad, b.max_x + pad, b.max_y + pad];
        let mut rng = seed::rng(seed::child(spec.seed, "artificial-field"));
        let log_uniform = |rng: &mut seed::Rng, [lo, hi]: [f64; 2]| -> f64 {
            (rng.random_range(lo.ln()..=hi.ln())).exp()
        };
        let mut components = Vec::with_capacity(spec.n_components);
        for j in 0..spec.n_components {
            let heading: f64 = rng.random_range(0.0..2.0 * PI);
            let speed = rng.random_range(0.0..=spec.max_speed_frac) * ext;
            let velocity = [speed * heading.cos(), speed * heading.sin()];
            let amplitude =
                rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            if j % 2 == 0 {
                let wavelength = log_uniform(&mut rng, spec.wavelength_frac) * ext;
                let dir: f64 = rng.random_range(0.0..2.0 * PI);
                let w = 2.0 * PI / wavelength;
                components.push(FieldComponent::Sinusoid {
                    amplitude,
                    omega: [w * dir.cos(), w * dir.sin()],
                    phase: rng.random_range(0.0..2.0 * PI),
                    velocity,
                });
            } else {
                components.push(FieldComponent::GammaBump {
                    amplitude,
                    center: [
                        rng.random_range(travel_box[0]..travel_box[2]),
                        rng.random_range(travel_box[1]..travel_box[3]),
                    ],
                    shape: rng.random_range(spec.bump_shape[0]..=spec.bump_shape[1]),
                    scale: log_uniform(&mut rng, spec.bump_scale_frac) * ext,
                    velocity,
                });
            }
        }
        let mut field = Self {
            spec: spec.clone(),
            components,
            travel_box,
            offset: 0.0,
            gain: 1.0,
        };
        if spec.normalize {
            let n = 40;
            let mut vals = Vec::with_capacity(n * n);
            for i in 0..n {
                for k in 0..n {
                    let x = b.min_x + (i as f64 + 0.5) / n as f64 * region.width();
                    let y = b.min_y + (k as f64 + 0.5) / n as f64 * region.height();
                    vals.push(field.raw(&Location::new(x, y), 0.0));
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            field.offset = mean;
            field.gain = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        }
        Ok(field)
    }

    fn raw(&self, x: &Location, t: f64) -> f64 {
        let tb = &self.travel_box;
        self.components
            .iter()
            .map(|c| match c {
                FieldComponent::Sinusoid {
                    amplitude,
                    omega,
                    phase,
                    velocity,
                } => {
                    let u = [x.x - velocity[0] * t, x.y - velocity[1] * t];
                    amplitude * (omega[0] * u[0] + omega[1] * u[1] + phase).sin()
                }
                FieldComponent::GammaBump {
                    amplitude,
                    center,
                    shape,
                    scale,
                    velocity,
                } => {
                    let cx = reflect(center[0], velocity[0], t, tb[0], tb[2]);
                    let cy = reflect(center[1], velocity[1], t, tb[1], tb[3]);
                    let r = ((x.x - cx).powi(2) + (x.y - cy).powi(2)).sqrt();
                    amplitude * gamma_profile(r, *shape, *scale)
                }
            })
            .sum()
    }

    pub fn value(&self, x: &Location, t: f64) -> f64 {
        (self.raw(x, t) - self.offset) * self.gain
    }
}

/// Values on a rectilinear `(x, y, t)` grid, interpolated bilinearly in
/// space and linearly in time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub ts: Vec<f64>,
    /// Indexed `[it][iy][ix]`, flattened.
    pub values: Vec<f64>,
}

fn bracket(axis: &[f64], v: f64, name: &str) -> Result<(usize, f64)> {
    let (lo, hi) = (axis[0], axis[axis.len() - 1]);
    if !(v >= lo && v <= hi) {
        return Err(Error::OutOfRange(format!(
            "{name}={v} outside [{lo}, {hi}]"
        )));
    }
    if axis.len() == 1 {
        return Ok((0, 0.0));
    }
    let i = axis.partition_point(|a| *a <= v).clamp(1, axis.len() - 1) - 1;
    let frac = (v - axis[i]) / (axis[i + 1] - axis[i]);
    Ok((i, frac))
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

#[derive(Serialize, Deserialize)]
struct GridRow {
    x: f64,
    y: f64,
    t: f64,
    value: f64,
}

impl GridDataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, ts: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let d = Self { xs, ys, ts, values };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("x", &self.xs), ("y", &self.ys), ("t", &self.ts)] {
            if axis.is_empty()
                || axis.windows(2).any(|w| !(w[1] > w[0]))
                || axis.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Config(format!(
                    "{name} axis must be finite and strictly increasing"
                )));
            }
        }
        let n = self.xs.len() * self.ys.len() * self.ts.len();
        if self.values.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid values must be finite".into()));
        }
        Ok(())
    }

    fn at(&self, ix: usize, iy: usize, it: usize) -> f64 {
        self.values[(it * self.ys.len() + iy) * self.xs.len() + ix]
    }

    pub fn value(&self, x: &Location, t: f64) -> Result<f64> {
        let (ix, fx) = bracket(&self.xs, x.x, "x")?;
        let (iy, fy) = bracket(&self.ys, x.y, "y")?;
        let (it, ft) = bracket(&self.ts, t, "t")?;
        let spatial = |it: usize| {
            let nx = (ix + 1).min(self.xs.len() - 1);
            let ny = (iy + 1).min(self.ys.len() - 1);
            let a = self.at(ix, iy, it) * (1.0 - fx) + self.at(nx, iy, it) * fx;
            let b = self.at(ix, ny, it) * (1.0 - fx) + self.at(nx, ny, it) * fx;
            a * (1.0 - fy) + b * fy
        };
        let v0 = spatial(it);
        if ft == 0.0 {
            return Ok(v0);
        }
        Ok(v0 * (1.0 - ft) + spatial(it + 1) * ft)
    }

    /// Reads a `x,y,t,value` CSV; every grid node must appear exactly once.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x", "y", "t", "value"] {
            return Err(Error::Config(format!(
                "dataset header must be x,y,t,value, got {headers:?}"
            )));
        }
        let rows: Vec<GridRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let xs = sorted_unique(rows.iter().map(|r| r.x).collect());
        let ys = sorted_unique(rows.iter().map(|r| r.y).collect());
        let ts = sorted_unique(rows.iter().map(|r| r.t).collect());
        let n = xs.len() * ys.len() * ts.len();
        if rows.len() != n {
            return Err(Error::Config(format!(
                "dataset is not a full rectilinear grid: {} rows for {n} nodes",
                rows.len()
            )));
        }
        let mut values = vec![f64::NAN; n];
        let mut seen = vec![false; n];
        for r in &rows {
            let find = |axis: &[f64], v: f64| axis.binary_search_by(|a| a.total_cmp(&v)).ok();
            let (Some(ix), Some(iy), Some(it)) = (find(&xs, r.x), find(&ys, r.y), find(&ts, r.t))
            else {
                return Err(Error::Config("non-finite coordinate in dataset".into()));
            };
            let idx = (it * ys.len() + iy) * xs.len() + ix;
            if seen[idx] {
                return Err(Error::Config(format!(
                    "duplicate grid node ({}, {}, {})",
                    r.x, r.y, r.t
                )));
            }
            seen[idx] = true;
            values[idx] = r.value;
        }
        Self::new(xs, ys, ts, values)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (it, &t) in self.ts.iter().enumerate() {
            for (iy, &y) in self.ys.iter().enumerate() {
                for (ix, &x) in self.xs.iter().enumerate() {
                    w.serialize(GridRow {
                        x,
                        y,
                        t,
                        value: self.at(ix, iy, it),
                    })?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorModel {
    pub noise_std: f64,
    pub localization_std: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            localization_std: 0.0,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        if self.noise_std >= 0.0 && self.localization_std >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(
                "sensor noise levels must be non-negative".into(),
            ))
        }
    }
}

/// Serializable description of a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldSpec {
    Artificial(ArtificialFieldSpec),
    Dataset { path: String },
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self::Artificial(ArtificialFieldSpec::default())
    }
}

#[derive(Clone, Debug)]
pub enum World {
    Artificial(ArtificialField),
    Dataset(GridDataset),
}

impl World {
    pub fn build(spec: &WorldSpec, region: &Region) -> Result<Self> {
        match spec {
            WorldSpec::Artificial(s) => Ok(Self::Artificial(ArtificialField::generate(s, region)?)),
            WorldSpec::Dataset { path } => Ok(Self::Dataset(GridDataset::load_csv(path)?)),
        }
    }

    pub fn field_value(&self, x: &Location, t: f64) -> Result<f64> {
        match self {
            Self::Artificial(f) => Ok(f.value(x, t)),
            Self::Dataset(d) => d.value(x, t),
        }
    }
}

/// Senses at a perturbed position; returns `(y, x_actual)`.
pub fn sense(
    world: &World,
    x_commanded: &Location,
    t: f64,
    sensor: &SensorModel,
    seed: u64,
) -> Result<(f64, Location)> {
    let mut rng = seed::rng(seed);
    let mut x = *x_commanded;
    if sensor.localization_std > 0.0 {
        x.x += sensor.localization_std * rng.sample::<f64, _>(StandardNormal);
        x.y += sensor.localization_std * rng.sample::<f64, _>(StandardNormal);
    }
    let mut y = world.field_value(&x, t)?;
    if sensor.noise_std > 0.0 {
        y += sensor.noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    Ok((y, x))
}

/// Settings for the evaluation-only "true" hyper-parameter distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub n_dense: usize,
    pub k: usize,
    /// Initial-belief draws scored to pick the chain start.
    pub start_draws: usize,
    pub burn_in: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n_dense: 200,
            k: 3,
            start_draws: 64,
            burn_in: 1000,
        }
    }
}

/// Noisy dense snapshot of the world at time `t`, uniform over the region.
pub fn dense_batch(
    world: &World,
    region: &Region,
    t: f64,
    n: usize,
    sensor: &SensorModel,
    seed: u64,
) -> Result<ObservationBatch> {
    let mut rng = seed::rng(seed::child(seed, "dense-sites"));
    let exact = SensorModel {
        localization_std: 0.0,
        ..*sensor
    };
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let site = region.sample_uniform(&mut rng)?;
        let (y, _) = sense(
            world,
            &site,
            t,
            &exact,
            seed::child(seed, &format!("dense-{i}")),
        )?;
        xs.push(site);
        ys.push(y);
    }
    ObservationBatch::new(usize::MAX, xs, ys, vec![t; n])
}

/// Posterior over hyper-parameters given a dense batch: best of a few
/// initial-belief draws starts a long chain whose samples are fitted by EM.
pub fn oracle_posterior_from_batch(
    batch: &ObservationBatch,
    adapt: &AdaptationConfig,
    oracle: &OracleConfig,
    seed: u64,
) -> Result<GaussianMixture> {
    let init = adapt.initial_belief(seed::child(seed, "oracle-init"))?;
    let draws = init.sample(
        oracle.start_draws.max(1),
        &mut seed::rng(seed::child(seed, "oracle-start")),
    );
    let batches = [batch];
    let bounds = adapt.bounds();
    let start: DVector<f64> = draws
        .into_iter()
        .map(|d| bounds.clamp(&d))
        .map(|d| (crate::belief::batches_log_likelihood(&d, &batches), d))
        .fold((f64::NEG_INFINITY, bounds.center()), |best, c| {
            if c.0 > best.0 {
                c
            } else {
                best
            }
        })
        .1;
    let mut cfg = adapt.clone();
    cfg.chain.burn_in = oracle.burn_in;
    let draw = mcmc_hyperparams_multi(
        &batches,
        &start,
        &cfg,
        cfg.p,
        seed::child(seed, "oracle-chain"),
    )?;
    let resampled = resample_systematic(&draw.particles, seed::child(seed, "oracle-resample"));
    fit_gm(
        &resampled,
        oracle.k,
        cfg.reg_floor,
        seed::child(seed, "oracle-fit"),
    )
}

pub fn oracle_posterior_gm(
    world: &World,
    region: &Region,
    t: f64,
    sensor: &SensorModel,
    adapt: &AdaptationConfig,
    oracle: &OracleConfig,
    seed: u64,
) -> Result<GaussianMixture> {
    let batch = dense_batch(
        world,
        region,
        t,
        oracle.n_dense,
        sensor,
        seed::child(seed, "oracle-data"),
    )?;
    oracle_posterior_from_batch(&batch, adapt, oracle, seed)
}
