//! Discrete-event simulation of the monitoring loop.
//!
//! Robots cycle plan → traverse → sense → report on a virtual clock. Events
//! are processed in `(time, robot_id)` order by a single loop that owns all
//! belief state; only the per-robot planning step (which reads nothing but
//! the robot's own belief) may run on several threads, and its results are
//! merged back in event order.

mod io;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{
    adapt_belief_with, AdaptationConfig, AdaptationDiagnostics, GaussianMixture, LogBounds,
    ParticleSource,
};
use crate::error::{Error, Result};
use crate::gp::{HyperParams, Location};
use crate::observation::ObservationBatch;
use crate::planning::{traverse, tsp_tour, MotionLimits};
use crate::seed;
use crate::sensing::{
    greedy_regions, joint_entropy, sample_sensing_locations, InformativeRegionSet, Region,
    SensingPlanConfig,
};
use crate::world::{sense, SensorModel, World, WorldSpec};

pub use io::{
    load_run, write_run, CycleCsvRow, CycleDetail, LoadedRun, ObservationRow, BELIEF_DIR,
    CYCLES_CSV, DETAILS_CSV, FORMAT_VERSION, OBSERVATIONS_CSV, REGION_DIR, SERVER_VERSIONS_JSON,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Central server holds the belief.
    Central,
    /// Decentralized; particles pooled from neighbour beliefs.
    Sde,
    /// Decentralized; particles weighted by neighbour observations too.
    Ode,
}

/// Planning attempts after the first when the location chain degenerates.
pub const PLANNER_RETRIES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub r: usize,
    /// Simulated seconds; no cycle starts at or after it.
    pub horizon: f64,
    pub adaptation: AdaptationConfig,
    pub sensing: SensingPlanConfig,
    pub motion: MotionLimits,
    pub region: Region,
    pub world: WorldSpec,
    pub sensor: SensorModel,
    pub comm_failure_prob: f64,
    pub comm_radius: f64,
    pub seed: u64,
    /// Planning threads; 0 uses all cores.
    pub threads: usize,
    /// Stop starting cycles once this many have started.
    pub max_cycles: Option<usize>,
    /// Field scale used to derive default hyper-parameter bounds.
    pub field_std: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Central,
            r: 4,
            horizon: 5000.0,
            adaptation: AdaptationConfig::default(),
            sensing: SensingPlanConfig::default(),
            motion: MotionLimits::default(),
            region: Region::square(1000.0),
            world: WorldSpec::default(),
            sensor: SensorModel::default(),
            comm_failure_prob: 0.0,
            comm_radius: 300.0,
            seed: 0,
            threads: 1,
            max_cycles: None,
            field_std: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("r must be at least 1".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.comm_failure_prob) {
            return Err(Error::Config("comm_failure_prob must be in [0, 1]".into()));
        }
        if !(self.comm_radius >= 0.0) {
            return Err(Error::Config("comm_radius must be non-negative".into()));
        }
        if !(self.field_std > 0.0) {
            return Err(Error::Config("field_std must be positive".into()));
        }
        self.adaptation.validate()?;
        self.sensing.validate()?;
        self.motion.validate()?;
        self.region.validate()?;
        self.sensor.validate()
    }

    /// Adaptation settings with the log-bounds filled in from the region.
    pub fn resolved_adaptation(&self) -> AdaptationConfig {
        let mut a = self.adaptation.clone();
        if a.log_bounds.is_none() {
            a.log_bounds = Some(LogBounds::for_field(self.field_std, self.region.extent()));
        }
        a
    }

    pub fn initial_belief(&self) -> Result<GaussianMixture> {
        self.resolved_adaptation()
            .initial_belief(seed::derive(self.seed, 0, 0, "initial-belief"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleRecord {
    pub robot_id: usize,
    /// Per-robot cycle index.
    pub cycle: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub theta: HyperParams,
    pub regions: Option<InformativeRegionSet>,
    pub batch: ObservationBatch,
    pub diagnostics: AdaptationDiagnostics,
    pub entropy_selected: f64,
    pub entropy_random: f64,
    /// Snapshot the robot planned with.
    pub belief_before: usize,
    /// Snapshot the robot holds after reporting.
    pub belief_after: usize,
    /// Report did not reach the server; adapted on board.
    pub local_adaptation: bool,
    pub planner_attempts: usize,
    /// Every planning attempt degenerated; sites were drawn uniformly.
    pub planner_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub records: Vec<CycleRecord>,
    /// Every belief that existed during the run; ids index into this.
    pub snapshots: Vec<GaussianMixture>,
    /// Snapshot ids of successive server versions (central mode).
    pub server_versions: Vec<usize>,
    pub end_time: f64,
}

impl RunOutput {
    pub fn initial_belief(&self) -> &GaussianMixture {
        &self.snapshots[0]
    }

    /// All batches of one robot, or of the whole team for `None`.
    pub fn batches(&self, robot: Option<usize>) -> Vec<&ObservationBatch> {
        self.records
            .iter()
            .filter(|r| robot.is_none_or(|id| r.robot_id == id))
            .map(|r| &r.batch)
            .collect()
    }
}

/// Robots other than `id` within Euclidean distance `radius` (inclusive).
pub fn neighbor_set(positions: &BTreeMap<usize, Location>, id: usize, radius: f64) -> Vec<usize> {
    if radius <= 0.0 {
        return Vec::new();
    }
    let Some(me) = positions.get(&id) else {
        return Vec::new();
    };
    positions
        .iter()
        .filter(|(&j, p)| j != id && me.distance(p) <= radius)
        .map(|(&j, _)| j)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    // Reports sort before plan starts at equal time and robot id.
    Report,
    Start,
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
struct Event {
    time: f64,
    robot: usize,
    kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.robot.cmp(&other.robot))
            .then(self.kind.cmp(&other.kind))
    }
}

struct RobotState {
    belief: usize,
    position: Location,
    cycle: usize,
    last_batch: Option<ObservationBatch>,
    pending: Option<PlannedCycle>,
}

struct PlannedCycle {
    t_start: f64,
    theta: HyperParams,
    regions: Option<InformativeRegionSet>,
    batch: ObservationBatch,
    /// Positions over the cycle, for neighbour queries at report time.
    track: Vec<(f64, Location)>,
    entropy_selected: f64,
    entropy_random: f64,
    attempts: usize,
    fallback: bool,
}

impl PlannedCycle {
    fn position_at(&self, t: f64) -> Location {
        self.track
            .iter()
            .take_while(|(ts, _)| *ts <= t)
            .last()
            .map(|(_, p)| *p)
            .unwrap_or(self.track[0].1)
    }
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    adapt: AdaptationConfig,
    world: &'a World,
}

impl Sim<'_> {
    fn sample_theta(&self, belief: &GaussianMixture, seed: u64) -> Result<HyperParams> {
        let v = belief.sample_one(&mut seed::rng(seed));
        HyperParams::from_log(&self.adapt.bounds().clamp(&v))
    }

    fn plan(
        &self,
        robot: usize,
        cycle: usize,
        t0: f64,
        start: Location,
        belief: &GaussianMixture,
    ) -> Result<PlannedCycle> {
        let cfg = self.cfg;
        let s = |tag: &str| seed::derive(cfg.seed, robot as u64, cycle as u64, tag);
        let n_sites = cfg.sensing.n_r * cfg.sensing.n_p;

        let mut attempt = 0;
        let (theta, regions, sites) = loop {
            let tag = |base: &str| seed::child(s(base), &attempt.to_string());
            let theta = self.sample_theta(belief, tag("theta"))?;
            let planned = greedy_regions(&theta, &cfg.region, &cfg.sensing, tag("regions"))
                .and_then(|irs| {
                    let sites =
                        sample_sensing_locations(&irs, cfg.sensing.n_p, &cfg.region, tag("sites"))?;
                    Ok((irs, sites))
                });
            match planned {
                Ok((irs, sites)) => break (theta, Some(irs), sites),
                Err(Error::PlannerDegenerate(_)) if attempt < PLANNER_RETRIES => attempt += 1,
                Err(Error::PlannerDegenerate(_)) => {
                    let mut rng = seed::rng(tag("fallback-sites"));
                    let sites = (0..n_sites)
                        .map(|_| cfg.region.sample_uniform(&mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    break (theta, None, sites);
                }
                Err(e) => return Err(e),
            }
        };
        let fallback = regions.is_none();

        let tour = tsp_tour(start, &sites)?;
        let stops = traverse(&tour, &cfg.motion, t0);
        let mut locations = Vec::with_capacity(stops.len());
        let mut values = Vec::with_capacity(stops.len());
        let mut times = Vec::with_capacity(stops.len());
        let mut track = vec![(t0, start)];
        for (i, stop) in stops.iter().enumerate() {
            let (y, actual) = sense(
                self.world,
                &stop.location,
                stop.arrival,
                &cfg.sensor,
                seed::child(s("sense"), &i.to_string()),
            )?;
            locations.push(actual);
            values.push(y);
            times.push(stop.arrival);
            track.push((stop.arrival, stop.location));
        }
        let batch = ObservationBatch::new(robot, locations, values, times)?;

        let mut rng = seed::rng(s("random-baseline"));
        let random = (0..batch.len())
            .map(|_| cfg.region.sample_uniform(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(PlannedCycle {
            t_start: t0,
            theta,
            regions,
            entropy_selected: joint_entropy(&batch.locations, &theta)?,
            entropy_random: joint_entropy(&random, &theta)?,
            batch,
            track,
            attempts: attempt + 1,
            fallback,
        })
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let world = World::build(&cfg.world, &cfg.region)?;
    run_experiment_in(cfg, &world)
}

/// Runs against an already-built world.
pub fn run_experiment_in(cfg: &ExperimentConfig, world: &World) -> Result<RunOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| simulate(cfg, world))
}

fn simulate(cfg: &ExperimentConfig, world: &World) -> Result<RunOutput> {
    let sim = Sim {
        cfg,
        adapt: cfg.resolved_adaptation(),
        world,
    };
    let mut snapshots = vec![cfg.initial_belief()?];
    let mut server_versions = vec![0usize];
    let mut records = Vec::new();

    // Robots start spread on a ring around the region centre.
    let c = cfg.region.center();
    let rad = 0.25 * cfg.region.width().min(cfg.region.height());
    let mut robots: Vec<RobotState> = (0..cfg.r)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / cfg.r as f64;
            let mut p = Location::new(c.x + rad * a.cos(), c.y + rad * a.sin());
            if !cfg.region.contains(&p) {
                p = c;
            }
            RobotState {
                belief: 0,
                position: p,
                cycle: 0,
                last_batch: None,
                pending: None,
            }
        })
        .collect();

    let mut queue: BinaryHeap<Reverse<Event>> = (0..cfg.r)
        .map(|robot| {
            Reverse(Event {
                time: 0.0,
                robot,
                kind: EventKind::Start,
            })
        })
        .collect();
    let mut started = 0usize;
    let mut end_time = 0.0f64;
    let can_start =
        |t: f64, started: usize| t < cfg.horizon && cfg.max_cycles.is_none_or(|m| started < m);

    while let Some(Reverse(ev)) = queue.pop() {
        end_time = end_time.max(ev.time);
        match ev.kind {
            EventKind::Start => {
                // Gather the run of consecutive plan starts; they are independent.
                let mut batch = vec![ev];
                while let Some(Reverse(next)) = queue.peek() {
                    if next.kind != EventKind::Start {
                        break;
                    }
                    batch.push(queue.pop().unwrap().0);
                }
                let mut admitted = Vec::new();
                for e in batch {
                    if can_start(e.time, started) {
                        started += 1;
                        admitted.push(e);
                    }
                }
                let jobs: Vec<(usize, usize, f64, Location, &GaussianMixture)> = admitted
                    .iter()
                    .map(|e| {
                        let st = &robots[e.robot];
                        (
                            e.robot,
                            st.cycle,
                            e.time,
                            st.position,
                            &snapshots[st.belief],
                        )
                    })
                    .collect();
                let planned: Vec<Result<PlannedCycle>> = jobs
                    .par_iter()
                    .map(|&(robot, cycle, t, pos, belief)| sim.plan(robot, cycle, t, pos, belief))
                    .collect();
                for (e, plan) in admitted.iter().zip(planned) {
                    let plan = plan?;
                    let t_end =
                        plan.batch.times.last().copied().unwrap_or(e.time) + cfg.motion.dwell;
                    robots[e.robot].pending = Some(plan);
                    queue.push(Reverse(Event {
                        time: t_end,
                        robot: e.robot,
                        kind: EventKind::Report,
                    }));
                }
            }
            EventKind::Report => {
                let robot = ev.robot;
                let plan = robots[robot]
                    .pending
                    .take()
                    .expect("report without a planned cycle");
                let cycle = robots[robot].cycle;
                let s = |tag: &str| seed::derive(cfg.seed, robot as u64, cycle as u64, tag);
                let before = robots[robot].belief;
                let mut local = false;
                let (after, diag) = match cfg.mode {
                    Mode::Central => {
                        let failed = cfg.comm_failure_prob > 0.0
                            && seed::rng(s("comm")).random::<f64>() < cfg.comm_failure_prob;
                        if failed {
                            local = true;
                            let (gm, d) = adapt_belief_with(
                                &snapshots[before],
                                ParticleSource::Own,
                                &[&plan.batch],
                                &sim.adapt,
                                s("adapt-local"),
                            )?;
                            let id = if d.adapted {
                                snapshots.push(gm);
                                snapshots.len() - 1
                            } else {
                                before
                            };
                            (id, d)
                        } else {
                            let current = *server_versions.last().unwrap();
                            let (gm, d) = adapt_belief_with(
                                &snapshots[current],
                                ParticleSource::Own,
                                &[&plan.batch],
                                &sim.adapt,
                                s("adapt-server"),
                            )?;
                            if d.adapted {
                                snapshots.push(gm);
                                server_versions.push(snapshots.len() - 1);
                            }
                            (*server_versions.last().unwrap(), d)
                        }
                    }
                    Mode::Sde | Mode::Ode => {
                        let positions: BTreeMap<usize, Location> = robots
                            .iter()
                            .enumerate()
                            .map(|(j, st)| {
                                let p = st
                                    .pending
                                    .as_ref()
                                    .map_or(st.position, |pc| pc.position_at(ev.time));
                                (
                                    j,
                                    if j == robot {
                                        plan.batch.locations.last().copied().unwrap_or(st.position)
                                    } else {
                                        p
                                    },
                                )
                            })
                            .collect();
                        let neighbors = neighbor_set(&positions, robot, cfg.comm_radius);
                        let own = &snapshots[before];
                        let (gm, d) = if cfg.mode == Mode::Sde {
                            let others: Vec<GaussianMixture> = neighbors
                                .iter()
                                .map(|&j| snapshots[robots[j].belief].clone())
                                .collect();
                            adapt_belief_with(
                                own,
                                ParticleSource::Pooled(&others),
                                &[&plan.batch],
                                &sim.adapt,
                                s("adapt-sde"),
                            )?
                        } else {
                            let mut batches = vec![&plan.batch];
                            batches.extend(
                                neighbors
                                    .iter()
                                    .filter_map(|&j| robots[j].last_batch.as_ref()),
                            );
                            adapt_belief_with(
                                own,
                                ParticleSource::Own,
                                &batches,
                                &sim.adapt,
                                s("adapt-ode"),
                            )?
                        };
                        let id = if d.adapted {
                            snapshots.push(gm);
                            snapshots.len() - 1
                        } else {
                            before
                        };
                        (id, d)
                    }
                };
                let st = &mut robots[robot];
                st.belief = after;
                st.position = plan.batch.locations.last().copied().unwrap_or(st.position);
                st.cycle += 1;
                st.last_batch = Some(plan.batch.clone());
                records.push(CycleRecord {
                    robot_id: robot,
                    cycle,
                    t_start: plan.t_start,
                    t_end: ev.time,
                    theta: plan.theta,
                    regions: plan.regions,
                    batch: plan.batch,
                    diagnostics: diag,
                    entropy_selected: plan.entropy_selected,
                    entropy_random: plan.entropy_random,
                    belief_before: before,
                    belief_after: after,
                    local_adaptation: local,
                    planner_attempts: plan.attempts,
                    planner_fallback: plan.fallback,
                });
                queue.push(Reverse(Event {
                    time: ev.time,
                    robot,
                    kind: EventKind::Start,
                }));
            }
        }
    }
    Ok(RunOutput {
        config: cfg.clone(),
        records,
        snapshots,
        server_versions,
        end_time,
    })
}
