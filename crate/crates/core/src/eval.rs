//! Scoring of runs: effective-particle percentage, mixture KL divergence,
//! entropy and predictive likelihood against random sensing, and 4-D
//! observed-dynamics divergence.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{effective_particle_pct, fit_gm, weigh_particles, GaussianMixture};
use crate::error::{Error, Result};
use crate::gp::{predictive_log_likelihood, HyperParams, Location};
use crate::observation::ObservationBatch;
use crate::seed;
use crate::sensing::Region;
use crate::sim::{ExperimentConfig, LoadedRun};
use crate::world::{dense_batch, oracle_posterior_gm, sense, OracleConfig, SensorModel, World};

/// Monte-Carlo estimate of `KL(p‖q)` in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Some sample had `q` below the smallest positive double.
    pub infinite: bool,
}

impl KlEstimate {
    /// `value`, or NaN when infinite (a gap in plots and tables).
    pub fn finite_or_nan(&self) -> f64 {
        if self.infinite {
            f64::NAN
        } else {
            self.value
        }
    }
}

const LOG_UNDERFLOW: f64 = -745.0;

pub fn kl_gm_mc(
    p: &GaussianMixture,
    q: &GaussianMixture,
    n: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if n < 1000 {
        return Err(Error::InvalidArgument(format!(
            "KL estimate needs n >= 1000, got {n}"
        )));
    }
    let xs = p.sample(n, &mut seed::rng(seed));
    let mut diffs = Vec::with_capacity(n);
    let mut infinite = false;
    for x in &xs {
        let lq = q.log_density(x)?;
        if lq < LOG_UNDERFLOW {
            infinite = true;
        }
        diffs.push(p.log_density(x)? - lq);
    }
    if infinite {
        return Ok(KlEstimate {
            value: f64::INFINITY,
            std_error: f64::NAN,
            infinite,
        });
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(KlEstimate {
        value: mean,
        std_error: (var / nf).sqrt(),
        infinite,
    })
}

/// Draws `p` particles from `belief` and returns the effective-particle
/// percentage of their likelihood weights on `batch`.
pub fn pct_effective_vs_true(
    belief: &GaussianMixture,
    batch: &ObservationBatch,
    p: usize,
    seed: u64,
) -> Result<f64> {
    if p == 0 {
        return Err(Error::InvalidArgument("p must be positive".into()));
    }
    let particles = belief.sample(p, &mut seed::rng(seed));
    let ps = weigh_particles(particles, batch)?;
    Ok(if ps.is_degenerate() {
        0.0
    } else {
        effective_particle_pct(&ps)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoglikRatio {
    pub ratio: f64,
    pub l_sel: f64,
    pub l_rand: f64,
}

/// Noise-free held-out values at `m` uniform sites.
pub fn held_out(
    world: &World,
    region: &Region,
    t: f64,
    m: usize,
    seed: u64,
) -> Result<(Vec<Location>, Vec<f64>)> {
    let mut rng = seed::rng(seed);
    let xs = (0..m)
        .map(|_| region.sample_uniform(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    let ys = xs
        .iter()
        .map(|x| world.field_value(x, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((xs, ys))
}

/// `L_sel / L_rand`: predictive log-likelihoods of noise-free held-out
/// values given the selected observations and given an equally sized
/// uniformly random set sensed at `t`.
#[allow(clippy::too_many_arguments)]
pub fn loglik_ratio_vs_random(
    world: &World,
    region: &Region,
    t: f64,
    x_sel: &[Location],
    y_sel: &[f64],
    theta: &HyperParams,
    sensor: &SensorModel,
    m_eval: usize,
    seed: u64,
) -> Result<LoglikRatio> {
    let (xe, ye) = held_out(world, region, t, m_eval, seed::child(seed, "held-out"))?;
    let mut rng = seed::rng(seed::child(seed, "random-set"));
    let exact = SensorModel {
        localization_std: 0.0,
        ..*sensor
    };
    let mut xr = Vec::with_capacity(x_sel.len());
    let mut yr = Vec::with_capacity(x_sel.len());
    for i in 0..x_sel.len() {
        let x = region.sample_uniform(&mut rng)?;
        let (y, _) = sense(
            world,
            &x,
            t,
            &exact,
            seed::child(seed, &format!("random-{i}")),
        )?;
        xr.push(x);
        yr.push(y);
    }
    let l_sel = predictive_log_likelihood(x_sel, y_sel, &xe, &ye, theta)?;
    let l_rand = predictive_log_likelihood(&xr, &yr, &xe, &ye, theta)?;
    Ok(LoglikRatio {
        ratio: l_sel / l_rand,
        l_sel,
        l_rand,
    })
}

/// Affine map to the unit box in space and time and z-scored values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x0: f64,
    pub y0: f64,
    pub extent: f64,
    pub horizon: f64,
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    /// Value statistics from `n` uniform `(x, t)` samples of the world.
    pub fn from_world(
        world: &World,
        region: &Region,
        horizon: f64,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let rows = dense_rows(world, region, horizon, n, seed)?;
        let vals: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        Ok(Self {
            x0: region.bounds.min_x,
            y0: region.bounds.min_y,
            extent: region.extent(),
            horizon,
            mean,
            std: if var > 0.0 { var.sqrt() } else { 1.0 },
        })
    }

    pub fn apply(&self, x: f64, y: f64, t: f64, v: f64) -> DVector<f64> {
        DVector::from_vec(vec![
            (x - self.x0) / self.extent,
            (y - self.y0) / self.extent,
            t / self.horizon,
            (v - self.mean) / self.std,
        ])
    }
}

fn dense_rows(
    world: &World,
    region: &Region,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64, f64)>> {
    use rand::Rng as _;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "need at least one dense sample".into(),
        ));
    }
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|_| {
            let x = region.sample_uniform(&mut rng)?;
            let t = rng.random_range(0.0..=horizon);
            Ok((x.x, x.y, t, world.field_value(&x, t)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub k: usize,
    pub reg_floor: f64,
    pub n_dense: usize,
    pub n_kl: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            k: 8,
            reg_floor: 1e-3,
            n_dense: 2000,
            n_kl: 10_000,
        }
    }
}

/// 4-D mixture over normalized `(x, y, t, value)` rows of the batches.
pub fn observed_dynamics_gm(
    batches: &[&ObservationBatch],
    norm: &Normalization,
    k: usize,
    reg_floor: f64,
    seed: u64,
) -> Result<GaussianMixture> {
    let rows: Vec<DVector<f64>> = batches
        .iter()
        .flat_map(|b| {
            (0..b.len()).map(move |i| {
                norm.apply(b.locations[i].x, b.locations[i].y, b.times[i], b.values[i])
            })
        })
        .collect();
    if rows.len() < 10 * k {
        return Err(Error::InsufficientData {
            needed: 10 * k,
            got: rows.len(),
        });
    }
    fit_gm(&rows, k, reg_floor, seed)
}

/// Mixture fitted to dense noise-free samples of the world over `[0, horizon]`.
pub fn true_dynamics_gm(
    world: &World,
    region: &Region,
    horizon: f64,
    norm: &Normalization,
    cfg: &DynamicsConfig,
    seed: u64,
) -> Result<GaussianMixture> {
    let rows: Vec<DVector<f64>> = dense_rows(
        world,
        region,
        horizon,
        cfg.n_dense,
        seed::child(seed, "dense"),
    )?
    .into_iter()
    .map(|(x, y, t, v)| norm.apply(x, y, t, v))
    .collect();
    fit_gm(&rows, cfg.k, cfg.reg_floor, seed::child(seed, "fit"))
}

/// `KL(true‖observed)` for a 4-D observed-dynamics mixture.
#[allow(clippy::too_many_arguments)]
pub fn dataset_kld(
    observed: &GaussianMixture,
    world: &World,
    region: &Region,
    horizon: f64,
    norm: &Normalization,
    cfg: &DynamicsConfig,
    seed: u64,
) -> Result<KlEstimate> {
    let truth = true_dynamics_gm(
        world,
        region,
        horizon,
        norm,
        cfg,
        seed::child(seed, "truth"),
    )?;
    kl_gm_mc(&truth, observed, cfg.n_kl, seed::child(seed, "kl"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out sites per cycle.
    pub m_eval: usize,
    /// Particles drawn for the effective-particle percentage.
    pub p: usize,
    pub n_kl: usize,
    pub oracle: OracleConfig,
    pub dynamics: DynamicsConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            m_eval: 30,
            p: 1000,
            n_kl: 10_000,
            oracle: OracleConfig::default(),
            dynamics: DynamicsConfig::default(),
            seed: 0,
        }
    }
}

/// One row per cycle record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub record: usize,
    pub cycle: usize,
    pub robot_id: usize,
    pub t_end: f64,
    pub pct_ep_adapted: f64,
    pub pct_ep_initial: f64,
    pub kld_adapted: f64,
    pub kld_initial: f64,
    pub kld_adapted_infinite: bool,
    pub kld_initial_infinite: bool,
    pub entropy_selected: f64,
    pub entropy_random: f64,
    pub loglik_selected: f64,
    pub loglik_random: f64,
    pub loglik_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub rows: Vec<MetricRow>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub cycles: usize,
    pub mean_pct_ep_adapted: f64,
    pub mean_pct_ep_initial: f64,
    /// Fraction of cycles whose adapted belief is closer to the oracle.
    pub frac_kld_adapted_below_initial: f64,
    pub frac_entropy_selected_above_random: f64,
    pub frac_loglik_ratio_below_one: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricSeries {
    pub fn summary(&self) -> MetricSummary {
        let n = self.rows.len();
        let frac = |f: &dyn Fn(&MetricRow) -> bool| {
            if n == 0 {
                f64::NAN
            } else {
                self.rows.iter().filter(|r| f(r)).count() as f64 / n as f64
            }
        };
        MetricSummary {
            cycles: n,
            mean_pct_ep_adapted: mean(self.rows.iter().map(|r| r.pct_ep_adapted)),
            mean_pct_ep_initial: mean(self.rows.iter().map(|r| r.pct_ep_initial)),
            frac_kld_adapted_below_initial: frac(&|r| {
                !r.kld_adapted_infinite && (r.kld_initial_infinite || r.kld_adapted < r.kld_initial)
            }),
            frac_entropy_selected_above_random: frac(&|r| r.entropy_selected > r.entropy_random),
            frac_loglik_ratio_below_one: frac(&|r| r.loglik_ratio < 1.0),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn evaluate_cycle(
    cfg: &ExperimentConfig,
    world: &World,
    run: &LoadedRun,
    ecfg: &EvalConfig,
    i: usize,
) -> Result<MetricRow> {
    let c = &run.cycles[i];
    let d = &run.details[i];
    let batch = &run.batches[i];
    let s = |tag: &str| seed::derive(ecfg.seed, c.robot_id as u64, c.cycle as u64, tag);
    let adapt = cfg.resolved_adaptation();
    let oracle = oracle_posterior_gm(
        world,
        &cfg.region,
        c.t_end,
        &cfg.sensor,
        &adapt,
        &ecfg.oracle,
        s("oracle"),
    )?;
    let adapted = &run.snapshots[d.belief_after];
    let initial = &run.snapshots[0];

    let eval_batch = dense_batch(
        world,
        &cfg.region,
        c.t_end,
        ecfg.m_eval,
        &cfg.sensor,
        s("eval-batch"),
    )?;
    let ep_seed = s("pct-ep");
    let pct_ep_adapted = pct_effective_vs_true(adapted, &eval_batch, ecfg.p, ep_seed)?;
    let pct_ep_initial = pct_effective_vs_true(initial, &eval_batch, ecfg.p, ep_seed)?;
    let kl_seed = s("kl");
    let kld_adapted = kl_gm_mc(&oracle, adapted, ecfg.n_kl, kl_seed)?;
    let kld_initial = kl_gm_mc(&oracle, initial, ecfg.n_kl, kl_seed)?;
    let ll = loglik_ratio_vs_random(
        world,
        &cfg.region,
        c.t_end,
        &batch.locations,
        &batch.values,
        &d.theta()?,
        &cfg.sensor,
        ecfg.m_eval,
        s("loglik"),
    )?;
    Ok(MetricRow {
        record: i,
        cycle: c.cycle,
        robot_id: c.robot_id,
        t_end: c.t_end,
        pct_ep_adapted,
        pct_ep_initial,
        kld_adapted: kld_adapted.finite_or_nan(),
        kld_initial: kld_initial.finite_or_nan(),
        kld_adapted_infinite: kld_adapted.infinite,
        kld_initial_infinite: kld_initial.infinite,
        entropy_selected: c.entropy_selected,
        entropy_random: c.entropy_random,
        loglik_selected: ll.l_sel,
        loglik_random: ll.l_rand,
        loglik_ratio: ll.ratio,
    })
}

/// Per-cycle metrics for a loaded run; rows align with `run.cycles`.
pub fn evaluate_cycles(
    cfg: &ExperimentConfig,
    world: &World,
    run: &LoadedRun,
    ecfg: &EvalConfig,
) -> Result<MetricSeries> {
    if run.cycles.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let rows = (0..run.cycles.len())
        .into_par_iter()
        .map(|i| evaluate_cycle(cfg, world, run, ecfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSeries { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetKlRow {
    /// Robot id, or `joint` for the whole team.
    pub subset: String,
    pub points: usize,
    pub kld: f64,
    pub std_error: f64,
    pub infinite: bool,
}

/// Observed-dynamics divergence per robot and for the pooled team data.
pub fn dataset_kl_table(
    cfg: &ExperimentConfig,
    world: &World,
    batches: &[ObservationBatch],
    dcfg: &DynamicsConfig,
    seed: u64,
) -> Result<Vec<DatasetKlRow>> {
    let horizon = batches
        .iter()
        .flat_map(|b| b.times.iter().copied())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let norm = Normalization::from_world(
        world,
        &cfg.region,
        horizon,
        dcfg.n_dense,
        seed::child(seed, "norm"),
    )?;
    let truth = true_dynamics_gm(
        world,
        &cfg.region,
        horizon,
        &norm,
        dcfg,
        seed::child(seed, "truth"),
    )?;
    let mut subsets: Vec<(String, Vec<&ObservationBatch>)> = (0..cfg.r)
        .map(|id| {
            (
                id.to_string(),
                batches.iter().filter(|b| b.robot_id == id).collect(),
            )
        })
        .collect();
    subsets.push(("joint".into(), batches.iter().collect()));
    subsets
        .into_iter()
        .map(|(name, bs)| {
            let points = bs.iter().map(|b| b.len()).sum();
            let fit_seed = seed::child(seed, "observed-fit");
            let est = match observed_dynamics_gm(&bs, &norm, dcfg.k, dcfg.reg_floor, fit_seed) {
                Ok(gm) => kl_gm_mc(&truth, &gm, dcfg.n_kl, seed::child(seed, "kl"))?,
                Err(Error::InsufficientData { .. }) => KlEstimate {
                    value: f64::INFINITY,
                    std_error: f64::NAN,
                    infinite: true,
                },
                Err(e) => return Err(e),
            };
            Ok(DatasetKlRow {
                subset: name,
                points,
                kld: est.finite_or_nan(),
                std_error: est.std_error,
                infinite: est.infinite,
            })
        })
        .collect()
}
