use persmon::gp::conditional_entropy_point;
use persmon::mcmc::ChainConfig;
use persmon::planning::{traverse, tsp_tour, MotionLimits};
use persmon::selftest::subsets;
use persmon::sensing::{
    greedy_entropy_discrete, greedy_regions, joint_entropy, mcmc_region, sample_sensing_locations,
    Region, SensingPlanConfig,
};
use persmon::{HyperParams, Location};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn open_length(start: Location, pts: &[Location]) -> f64 {
    let mut prev = start;
    let mut total = 0.0;
    for p in pts {
        total += ((p.x - prev.x).powi(2) + (p.y - prev.y).powi(2)).sqrt();
        prev = *p;
    }
    total
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

#[test]
fn tsp_within_twenty_percent_of_brute_force() {
    let perms = permutations(8);
    for seed in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Location> = (0..8)
            .map(|_| Location::new(r.random_range(0.0..100.0), r.random_range(0.0..100.0)))
            .collect();
        let start = Location::new(50.0, 50.0);
        let opt = perms
            .iter()
            .map(|p| open_length(start, &p.iter().map(|&i| pts[i]).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min);
        let tour = tsp_tour(start, &pts).unwrap();
        assert!(tour.total_length >= opt - 1e-9);
        assert!(
            tour.total_length <= 1.2 * opt,
            "seed {seed}: {} vs {opt}",
            tour.total_length
        );
    }
}

fn nn_oracle(start: Location, pts: &[Location]) -> f64 {
    let mut left: Vec<Location> = pts.to_vec();
    let mut at = start;
    let mut total = 0.0;
    while !left.is_empty() {
        let (i, d) = left
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.distance(&at)))
            .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
        total += d;
        at = left.remove(i);
    }
    total
}

fn loc() -> impl Strategy<Value = Location> {
    (0.0..100.0f64, 0.0..100.0f64).prop_map(|(x, y)| Location::new(x, y))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_opt_leaves_no_improving_exchange(start in loc(), pts in prop::collection::vec(loc(), 1..14)) {
        let tour = tsp_tour(start, &pts).unwrap();
        let mut sorted = tour.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..pts.len()).collect::<Vec<_>>());
        let seq = tour.ordered_sites();
        let len = open_length(start, &seq);
        prop_assert!((len - tour.total_length).abs() < 1e-9);
        prop_assert!(len <= nn_oracle(start, &pts) + 1e-9);
        for i in 0..seq.len() {
            for j in i + 1..seq.len() {
                let mut alt = seq.clone();
                alt[i..=j].reverse();
                prop_assert!(open_length(start, &alt) >= len - 1e-9, "({}, {}) improves", i, j);
            }
        }
    }

    #[test]
    fn traversal_times_are_monotone_and_speed_bounded(start in loc(), pts in prop::collection::vec(loc(), 1..12), t0 in 0.0..1e4f64) {
        let limits = MotionLimits::default();
        let tour = tsp_tour(start, &pts).unwrap();
        let stops = traverse(&tour, &limits, t0);
        let mut prev_t = t0;
        let mut prev = start;
        for s in &stops {
            prop_assert!(s.arrival >= prev_t);
            prop_assert!(s.departure > s.arrival);
            let bound = ((s.location.x - prev.x).abs() / limits.v_max[0])
                .max((s.location.y - prev.y).abs() / limits.v_max[1]);
            prop_assert!(s.arrival - prev_t >= bound - 1e-9);
            prev_t = s.departure;
            prev = s.location;
        }
        for w in stops.windows(2) {
            prop_assert!(w[1].arrival > w[0].arrival);
        }
    }

    #[test]
    fn greedy_selection_is_nested_and_entropy_monotone(
        pts in prop::collection::vec((0.0..10.0f64, 0.0..10.0f64), 4..12),
        l in 0.5..4.0f64,
    ) {
        // Noise variance above 1/(2πe) keeps every entropy increment positive.
        let theta = HyperParams::new(1.0, 0.5, [l, l]).unwrap();
        let cands: Vec<Location> = pts.iter().map(|&(x, y)| Location::new(x, y)).collect();
        let mut prev: Option<(Vec<usize>, f64)> = None;
        for n in 1..=cands.len() {
            let (sel, h) = greedy_entropy_discrete(&cands, n, &theta).unwrap();
            let direct = joint_entropy(&sel.iter().map(|&i| cands[i]).collect::<Vec<_>>(), &theta).unwrap();
            prop_assert!((h - direct).abs() < 1e-9);
            if let Some((ps, ph)) = &prev {
                prop_assert_eq!(&sel[..ps.len()], &ps[..]);
                prop_assert!(h >= *ph - 1e-12);
            }
            prev = Some((sel, h));
        }
    }
}

#[test]
fn greedy_meets_submodular_bound_on_enumerable_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..60 {
        let m = r.random_range(5..=15);
        let n = r.random_range(1..=4usize.min(m));
        let cands: Vec<Location> = (0..m)
            .map(|_| Location::new(r.random_range(0.0..6.0), r.random_range(0.0..6.0)))
            .collect();
        let theta = HyperParams::new(
            r.random_range(0.8..2.0),
            r.random_range(0.3..1.0),
            [1.5, 2.5],
        )
        .unwrap();
        let (_, greedy) = greedy_entropy_discrete(&cands, n, &theta).unwrap();
        let opt = subsets(m, n)
            .into_iter()
            .map(|s| {
                joint_entropy(&s.iter().map(|&i| cands[i]).collect::<Vec<_>>(), &theta).unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let bound = 1.0 - ((n as f64 - 1.0) / n as f64).powi(n as i32);
        assert!(greedy >= bound * opt, "{greedy} < {bound}·{opt}");
    }
}

#[test]
fn unconditioned_chain_is_uniform_over_the_rectangle() {
    let region = Region::rect(0.0, 0.0, 100.0, 50.0);
    let theta = HyperParams::new(1.0, 0.1, [10.0, 10.0]).unwrap();
    let cfg = SensingPlanConfig {
        p: 100_000,
        proposal_cov_x: Some([[2500.0, 0.0], [0.0, 625.0]]),
        chain: ChainConfig {
            burn_in: 100,
            thin: 20,
        },
        ..SensingPlanConfig::default()
    };
    let chain = mcmc_region(&[], &theta, &region, &cfg, 9).unwrap();
    let mut bins = [0usize; 100];
    for l in chain.locations() {
        assert!(region.contains(&l));
        let bx = ((l.x / 10.0) as usize).min(9);
        let by = ((l.y / 5.0) as usize).min(9);
        bins[by * 10 + bx] += 1;
    }
    let expected = 1000.0;
    let chi2: f64 = bins
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // Upper 1% point of chi-square with 99 degrees of freedom.
    assert!(chi2 < 134.642, "chi2 = {chi2}");
}

#[test]
fn single_anchor_pushes_samples_away() {
    let region = Region::square(100.0);
    let theta = HyperParams::new(1.0, 0.1, [20.0, 20.0]).unwrap();
    let anchor = Location::new(50.0, 50.0);
    let cfg = SensingPlanConfig {
        p: 5000,
        ..SensingPlanConfig::default()
    };
    let chain = mcmc_region(&[anchor], &theta, &region, &cfg, 4).unwrap();
    let locs = chain.locations();
    let chain_mean = locs.iter().map(|l| l.distance(&anchor)).sum::<f64>() / locs.len() as f64;
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let uniform_mean = (0..100_000)
        .map(|_| {
            Location::new(r.random_range(0.0..100.0), r.random_range(0.0..100.0)).distance(&anchor)
        })
        .sum::<f64>()
        / 100_000.0;
    assert!(chain_mean > uniform_mean, "{chain_mean} <= {uniform_mean}");
}

#[test]
fn chain_mass_lands_on_brute_force_argmax_candidate() {
    let region = Region::rect(0.0, 0.0, 100.0, 20.0);
    let theta = HyperParams::new(1.0, 0.1, [30.0, 30.0]).unwrap();
    let anchor = Location::new(10.0, 10.0);
    let cands = [
        Location::new(10.0, 10.0),
        Location::new(30.0, 10.0),
        Location::new(90.0, 10.0),
    ];
    let argmax = (0..3)
        .max_by(|&a, &b| {
            let ha = conditional_entropy_point(&cands[a], &[anchor], &theta).unwrap();
            let hb = conditional_entropy_point(&cands[b], &[anchor], &theta).unwrap();
            ha.total_cmp(&hb)
        })
        .unwrap();
    let cfg = SensingPlanConfig {
        p: 20_000,
        ..SensingPlanConfig::default()
    };
    let chain = mcmc_region(&[anchor], &theta, &region, &cfg, 21).unwrap();
    let mut mass = [0.0; 3];
    for (l, w) in chain.locations().iter().zip(chain.samples.norm_weights()) {
        let nearest = (0..3)
            .min_by(|&a, &b| l.distance(&cands[a]).total_cmp(&l.distance(&cands[b])))
            .unwrap();
        mass[nearest] += w;
    }
    let top = (0..3).max_by(|&a, &b| mass[a].total_cmp(&mass[b])).unwrap();
    assert_eq!(top, argmax, "mass {mass:?}");
}

#[test]
fn anchors_and_sites_stay_inside_a_region_with_a_hole() {
    let mut region = Region::square(100.0);
    region.holes.push(vec![
        Location::new(30.0, 30.0),
        Location::new(70.0, 30.0),
        Location::new(70.0, 70.0),
        Location::new(30.0, 70.0),
    ]);
    region.validate().unwrap();
    let theta = HyperParams::new(1.0, 0.1, [15.0, 15.0]).unwrap();
    let cfg = SensingPlanConfig {
        p: 200,
        n_r: 3,
        ..SensingPlanConfig::default()
    };
    for seed in 0..100 {
        let irs = greedy_regions(&theta, &region, &cfg, seed).unwrap();
        assert_eq!(irs.regions.len(), 3);
        assert!(irs.all_anchors().iter().all(|a| region.contains(a)));
        let sites = sample_sensing_locations(&irs, 2, &region, seed + 1000).unwrap();
        assert_eq!(sites.len(), 6);
        assert!(sites.iter().all(|s| region.contains(s)));
    }
}

#[test]
fn tiny_length_scale_regions_do_not_crash() {
    let region = Region::square(100.0);
    let theta = HyperParams::new(1.0, 0.1, [0.01, 0.01]).unwrap();
    let cfg = SensingPlanConfig {
        p: 300,
        n_r: 2,
        ..SensingPlanConfig::default()
    };
    let irs = greedy_regions(&theta, &region, &cfg, 3).unwrap();
    let d = (&irs.regions[0].mean() - &irs.regions[1].mean()).norm();
    assert!(d > 0.0);
}
