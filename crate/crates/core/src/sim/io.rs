//! Run-directory artifacts: per-cycle CSVs, observation log, belief and
//! region snapshots.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CycleRecord, RunOutput};
use crate::belief::GaussianMixture;
use crate::error::{Error, Result};
use crate::gp::{HyperParams, Location};
use crate::observation::ObservationBatch;

pub const FORMAT_VERSION: u32 = 1;

pub const CYCLES_CSV: &str = "cycles.csv";
pub const DETAILS_CSV: &str = "cycle_details.csv";
pub const OBSERVATIONS_CSV: &str = "observations.csv";
pub const SERVER_VERSIONS_JSON: &str = "server_versions.json";
pub const BELIEF_DIR: &str = "beliefs";
pub const REGION_DIR: &str = "regions";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleCsvRow {
    pub cycle: usize,
    pub robot_id: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub epp: f64,
    pub h_gm_given_y: f64,
    pub adapted: bool,
    pub mcmc_fired: bool,
    pub entropy_selected: f64,
    pub entropy_random: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleDetail {
    /// Row index in `cycles.csv`.
    pub record: usize,
    pub robot_id: usize,
    pub cycle: usize,
    pub sigma_f: f64,
    pub sigma_n: f64,
    pub sigma_l1: f64,
    pub sigma_l2: f64,
    pub belief_before: usize,
    pub belief_after: usize,
    pub local_adaptation: bool,
    pub planner_attempts: usize,
    pub planner_fallback: bool,
    pub epp_literal: f64,
    pub mcmc_acceptance: Option<f64>,
}

impl CycleDetail {
    pub fn theta(&self) -> Result<HyperParams> {
        HyperParams::new(self.sigma_f, self.sigma_n, [self.sigma_l1, self.sigma_l2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub record: usize,
    pub robot_id: usize,
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub value: f64,
}

fn csv_row(r: &CycleRecord) -> CycleCsvRow {
    CycleCsvRow {
        cycle: r.cycle,
        robot_id: r.robot_id,
        t_start: r.t_start,
        t_end: r.t_end,
        epp: r.diagnostics.epp,
        h_gm_given_y: r.diagnostics.h_gm_given_y,
        adapted: r.diagnostics.adapted,
        mcmc_fired: r.diagnostics.mcmc_fired,
        entropy_selected: r.entropy_selected,
        entropy_random: r.entropy_random,
    }
}

pub fn belief_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join(BELIEF_DIR).join(format!("belief_{id:05}.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes all artifacts of a finished run into `dir` (created if missing).
pub fn write_run(dir: &Path, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir.join(BELIEF_DIR))?;
    fs::create_dir_all(dir.join(REGION_DIR))?;
    write_rows(&dir.join(CYCLES_CSV), run.records.iter().map(csv_row))?;
    write_rows(
        &dir.join(DETAILS_CSV),
        run.records.iter().enumerate().map(|(i, r)| CycleDetail {
            record: i,
            robot_id: r.robot_id,
            cycle: r.cycle,
            sigma_f: r.theta.sigma_f,
            sigma_n: r.theta.sigma_n,
            sigma_l1: r.theta.sigma_l[0],
            sigma_l2: r.theta.sigma_l[1],
            belief_before: r.belief_before,
            belief_after: r.belief_after,
            local_adaptation: r.local_adaptation,
            planner_attempts: r.planner_attempts,
            planner_fallback: r.planner_fallback,
            epp_literal: r.diagnostics.epp_literal,
            mcmc_acceptance: r.diagnostics.mcmc_acceptance,
        }),
    )?;
    write_rows(
        &dir.join(OBSERVATIONS_CSV),
        run.records.iter().enumerate().flat_map(|(i, r)| {
            let b = &r.batch;
            (0..b.len()).map(move |k| ObservationRow {
                record: i,
                robot_id: b.robot_id,
                x: b.locations[k].x,
                y: b.locations[k].y,
                t: b.times[k],
                value: b.values[k],
            })
        }),
    )?;
    for (id, gm) in run.snapshots.iter().enumerate() {
        write_json(&belief_path(dir, id), gm)?;
    }
    write_json(&dir.join(SERVER_VERSIONS_JSON), &run.server_versions)?;
    for r in &run.records {
        if let Some(irs) = &r.regions {
            write_json(
                &dir.join(REGION_DIR)
                    .join(format!("robot{}_cycle{:04}.json", r.robot_id, r.cycle)),
                irs,
            )?;
        }
    }
    Ok(())
}

/// Artifacts read back from a run directory.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub cycles: Vec<CycleCsvRow>,
    pub details: Vec<CycleDetail>,
    /// One batch per cycle row.
    pub batches: Vec<ObservationBatch>,
    pub snapshots: Vec<GaussianMixture>,
    pub server_versions: Vec<usize>,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing artifact {}",
            path.display()
        )));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cycles: Vec<CycleCsvRow> = read_rows(&dir.join(CYCLES_CSV))?;
    let details: Vec<CycleDetail> = read_rows(&dir.join(DETAILS_CSV))?;
    let obs: Vec<ObservationRow> = read_rows(&dir.join(OBSERVATIONS_CSV))?;
    if details.len() != cycles.len() {
        return Err(Error::Config(
            "cycle_details.csv does not match cycles.csv".into(),
        ));
    }
    let mut batches: Vec<ObservationBatch> = cycles
        .iter()
        .map(|c| ObservationBatch {
            robot_id: c.robot_id,
            locations: Vec::new(),
            values: Vec::new(),
            times: Vec::new(),
        })
        .collect();
    for o in obs {
        let b = batches.get_mut(o.record).ok_or_else(|| {
            Error::Config(format!("observation refers to unknown record {}", o.record))
        })?;
        b.locations.push(Location::new(o.x, o.y));
        b.values.push(o.value);
        b.times.push(o.t);
    }
    for b in &batches {
        b.validate()?;
    }
    let versions_path = dir.join(SERVER_VERSIONS_JSON);
    if !versions_path.exists() {
        return Err(Error::Config(format!(
            "missing artifact {}",
            versions_path.display()
        )));
    }
    let server_versions: Vec<usize> = serde_json::from_str(&fs::read_to_string(versions_path)?)?;
    let mut snapshots = Vec::new();
    loop {
        let p = belief_path(dir, snapshots.len());
        if !p.exists() {
            break;
        }
        snapshots.push(serde_json::from_str(&fs::read_to_string(p)?)?);
    }
    if snapshots.is_empty() {
        return Err(Error::Config(
            "run directory has no belief snapshots".into(),
        ));
    }
    let max_id = details
        .iter()
        .flat_map(|d| [d.belief_before, d.belief_after])
        .chain(server_versions.iter().copied())
        .max()
        .unwrap_or(0);
    if max_id >= snapshots.len() {
        return Err(Error::Config(format!(
            "belief snapshot {max_id} is missing"
        )));
    }
    Ok(LoadedRun {
        cycles,
        details,
        batches,
        snapshots,
        server_versions,
    })
}
