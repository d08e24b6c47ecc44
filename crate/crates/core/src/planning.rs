//! Open tours over sensing sites and their kinematic traversal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Location;

const IMPROVE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tour {
    pub start: Location,
    pub order: Vec<usize>,
    pub sites: Vec<Location>,
    pub total_length: f64,
}

impl Tour {
    pub fn ordered_sites(&self) -> Vec<Location> {
        self.order.iter().map(|&i| self.sites[i]).collect()
    }
}

/// Length of the open path `start → sites[order[0]] → …`.
pub fn path_length(start: &Location, sites: &[Location], order: &[usize]) -> f64 {
    let mut prev = *start;
    let mut total = 0.0;
    for &i in order {
        total += prev.distance(&sites[i]);
        prev = sites[i];
    }
    total
}

pub fn nearest_neighbor_order(start: &Location, sites: &[Location]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..sites.len()).collect();
    let mut order = Vec::with_capacity(sites.len());
    let mut cur = *start;
    while !left.is_empty() {
        let (pos, _) = left
            .iter()
            .enumerate()
            .map(|(pos, &i)| (pos, cur.distance(&sites[i])))
            .fold(
                (0, f64::INFINITY),
                |best, c| if c.1 < best.1 { c } else { best },
            );
        let i = left.remove(pos);
        cur = sites[i];
        order.push(i);
    }
    order
}

/// Change in open-path length from reversing `order[i..=j]`.
pub fn two_opt_delta(
    start: &Location,
    sites: &[Location],
    order: &[usize],
    i: usize,
    j: usize,
) -> f64 {
    let prev = if i == 0 { *start } else { sites[order[i - 1]] };
    let a = sites[order[i]];
    let b = sites[order[j]];
    let mut delta = prev.distance(&b) - prev.distance(&a);
    if j + 1 < order.len() {
        let next = sites[order[j + 1]];
        delta += a.distance(&next) - b.distance(&next);
    }
    delta
}

/// Nearest-neighbour construction followed by first-improvement 2-opt.
pub fn tsp_tour(start: Location, sites: &[Location]) -> Result<Tour> {
    if sites.is_empty() {
        return Err(Error::InvalidArgument(
            "tour needs at least one site".into(),
        ));
    }
    let n = sites.len();
    let mut order = nearest_neighbor_order(&start, sites);
    let cap = 10 * n * n;
    let mut exchanges = 0;
    'outer: loop {
        for i in 0..n {
            for j in i + 1..n {
                if two_opt_delta(&start, sites, &order, i, j) < -IMPROVE_EPS {
                    order[i..=j].reverse();
                    exchanges += 1;
                    if exchanges >= cap {
                        break 'outer;
                    }
                    continue 'outer;
                }
            }
        }
        break;
    }
    let total_length = path_length(&start, sites, &order);
    Ok(Tour {
        start,
        order,
        sites: sites.to_vec(),
        total_length,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionLimits {
    pub v_max: [f64; 2],
    pub a_max: [f64; 2],
    /// Seconds spent sensing at each site.
    pub dwell: f64,
}

impl Default for MotionLimits {
    fn default() -> Self {
        Self {
            v_max: [30.0, 30.0],
            a_max: [300.0, 300.0],
            dwell: 1.0,
        }
    }
}

impl MotionLimits {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .v_max
            .iter()
            .chain(self.a_max.iter())
            .chain(std::iter::once(&self.dwell))
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "motion limits must be positive and finite".into(),
            ))
        }
    }
}

/// Rest-to-rest time over distance `d` with a trapezoidal (or triangular) profile.
pub fn axis_time(d: f64, v: f64, a: f64) -> f64 {
    let d = d.abs();
    if d == 0.0 {
        0.0
    } else if d >= v * v / a {
        d / v + v / a
    } else {
        2.0 * (d / a).sqrt()
    }
}

pub fn segment_time(from: &Location, to: &Location, limits: &MotionLimits) -> f64 {
    let tx = axis_time(to.x - from.x, limits.v_max[0], limits.a_max[0]);
    let ty = axis_time(to.y - from.y, limits.v_max[1], limits.a_max[1]);
    tx.max(ty)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub location: Location,
    pub arrival: f64,
    pub departure: f64,
}

/// Visits the tour in order starting at rest at `t0`; sensing happens at arrival.
pub fn traverse(tour: &Tour, limits: &MotionLimits, t0: f64) -> Vec<Stop> {
    let mut t = t0;
    let mut at = tour.start;
    let mut stops = Vec::with_capacity(tour.order.len());
    for site in tour.ordered_sites() {
        let arrival = t + segment_time(&at, &site, limits);
        let departure = arrival + limits.dwell;
        stops.push(Stop {
            location: site,
            arrival,
            departure,
        });
        t = departure;
        at = site;
    }
    stops
}
