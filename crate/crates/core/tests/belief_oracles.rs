use nalgebra::{DMatrix, DVector};
use persmon::belief::{
    adapt_belief, conditional_entropy_gm, effective_particle_pct, fit_gm, fit_gm_traced,
    ode_weights, resample_systematic, sde_pool_sample, weigh_particles, LogBounds,
};
use persmon::gp::log_likelihood;
use persmon::{
    AdaptationConfig, GaussianMixture, HyperParams, Location, ObservationBatch, ParticleSet,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws a GP sample at `xs` by an explicit Cholesky of the SE kernel.
fn gp_sample(xs: &[Location], t: &HyperParams, r: &mut ChaCha8Rng) -> Vec<f64> {
    let n = xs.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let dx = (xs[i].x - xs[j].x) / t.sigma_l[0];
        let dy = (xs[i].y - xs[j].y) / t.sigma_l[1];
        let noise = if i == j { t.sigma_n * t.sigma_n } else { 0.0 };
        t.sigma_f * t.sigma_f * (-0.5 * (dx * dx + dy * dy)).exp() + noise
    }) + DMatrix::identity(n, n) * 1e-10;
    let l = k.cholesky().unwrap().l();
    let z = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
    (l * z).iter().copied().collect()
}

fn gp_batch(n: usize, side: f64, t: &HyperParams, seed: u64) -> ObservationBatch {
    let mut r = rng(seed);
    let xs: Vec<Location> = (0..n)
        .map(|_| Location::new(r.random_range(0.0..side), r.random_range(0.0..side)))
        .collect();
    let ys = gp_sample(&xs, t, &mut r);
    ObservationBatch::new(0, xs, ys, (0..n).map(|i| i as f64).collect()).unwrap()
}

/// Lloyd's algorithm from fixed starting centres.
fn kmeans(points: &[DVector<f64>], mut centres: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    for _ in 0..100 {
        let mut sums = vec![DVector::zeros(points[0].len()); centres.len()];
        let mut counts = vec![0usize; centres.len()];
        for p in points {
            let c = (0..centres.len())
                .min_by(|&a, &b| {
                    (p - &centres[a])
                        .norm()
                        .total_cmp(&(p - &centres[b]).norm())
                })
                .unwrap();
            sums[c] += p;
            counts[c] += 1;
        }
        centres = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s / c as f64)
            .collect();
    }
    centres
}

#[test]
fn two_clusters_recover_kmeans_centroids() {
    let mut r = rng(3);
    let mut pts = Vec::new();
    for cx in [-10.0, 10.0] {
        for _ in 0..200 {
            pts.push(DVector::from_vec(vec![
                cx + 0.1 * r.sample::<f64, _>(StandardNormal),
                0.1 * r.sample::<f64, _>(StandardNormal),
            ]));
        }
    }
    let centres = kmeans(&pts, vec![pts[0].clone(), pts[399].clone()]);
    for seed in 0..10 {
        let gm = fit_gm(&pts, 2, 1e-6, seed).unwrap();
        for c in &centres {
            let nearest = gm
                .components()
                .iter()
                .map(|k| (&k.mean - c).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.2, "seed {seed}: {nearest}");
        }
    }
}

#[test]
fn systematic_resampling_is_unbiased_for_weighted_mean() {
    let particles: Vec<DVector<f64>> = (0..7).map(|i| DVector::from_element(1, i as f64)).collect();
    let lw = vec![0.0, -0.3, -2.0, 0.5, -1.0, -0.1, -4.0];
    let ps = ParticleSet::from_log_weights(particles.clone(), lw).unwrap();
    let target: f64 = ps
        .norm_weights()
        .iter()
        .zip(&particles)
        .map(|(w, p)| w * p[0])
        .sum();
    let means: Vec<f64> = (0..100)
        .map(|s| {
            let out = resample_systematic(&ps, s);
            out.iter().map(|p| p[0]).sum::<f64>() / out.len() as f64
        })
        .collect();
    let m = means.iter().sum::<f64>() / 100.0;
    let sd = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 99.0).sqrt();
    assert!(
        (m - target).abs() <= 3.0 * sd / 10.0 + 1e-12,
        "{m} vs {target}"
    );
}

#[test]
fn ode_weight_is_product_of_batch_likelihoods() {
    let t = HyperParams::new(1.1, 0.3, [2.0, 3.0]).unwrap();
    let batches: Vec<ObservationBatch> = (0..3).map(|i| gp_batch(4, 5.0, &t, 40 + i)).collect();
    let direct: f64 = batches
        .iter()
        .map(|b| log_likelihood(&b.values, &b.locations, &t).unwrap().exp())
        .product();
    let w = ode_weights(&t, &batches).unwrap();
    assert!((w - direct).abs() <= 1e-12 * direct.abs());
    let single = ode_weights(&t, &batches[..1]).unwrap();
    let ps = weigh_particles(vec![t.to_log()], &batches[0]).unwrap();
    assert!((single - ps.raw_weights()[0]).abs() <= 1e-12 * single);
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn pooling_identical_mixtures_matches_single_mixture() {
    let gm = GaussianMixture::new(
        1,
        vec![
            persmon::belief::Component {
                weight: 0.3,
                mean: DVector::from_element(1, -2.0),
                cov: DMatrix::from_element(1, 1, 0.5),
            },
            persmon::belief::Component {
                weight: 0.7,
                mean: DVector::from_element(1, 1.0),
                cov: DMatrix::from_element(1, 1, 1.0),
            },
        ],
    )
    .unwrap();
    let n = 100_000;
    let pooled: Vec<f64> = sde_pool_sample(&gm, &[gm.clone()], n, 5)
        .unwrap()
        .iter()
        .map(|v| v[0])
        .collect();
    let single: Vec<f64> = gm.sample(n, &mut rng(6)).iter().map(|v| v[0]).collect();
    // Critical value at alpha = 0.01 for two samples of size n.
    let crit = 1.628 * (2.0 / n as f64).sqrt();
    assert!(ks(pooled, single) < crit);
}

fn conjugate_quadrature(y: f64, s2: f64) -> f64 {
    let un = |t: f64| (-0.5 * t * t - 0.5 * (y - t).powi(2) / s2).exp();
    let (a, b, n) = (-12.0, 12.0, 24_000);
    let h = (b - a) / n as f64;
    let simpson = |f: &dyn Fn(f64) -> f64| {
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    let z = simpson(&un);
    simpson(&|t| {
        let d = un(t) / z;
        if d > 0.0 {
            -d * d.ln()
        } else {
            0.0
        }
    })
}

#[test]
fn conditional_entropy_estimator_matches_quadrature_on_conjugate_toy() {
    let (y, s2) = (0.8, 0.25);
    let h = conjugate_quadrature(y, s2);
    let prior = GaussianMixture::gaussian(
        DVector::from_element(1, 0.0),
        DMatrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    let mut good = 0;
    for seed in 0..10 {
        let particles = prior.sample(100_000, &mut rng(seed));
        let lw = particles
            .iter()
            .map(|t| -0.5 * (y - t[0]).powi(2) / s2)
            .collect();
        let est = conditional_entropy_gm(
            &ParticleSet::from_log_weights(particles, lw).unwrap(),
            &prior,
        )
        .unwrap();
        if (est - h).abs() / h.abs() < 0.05 {
            good += 1;
        }
    }
    assert!(good >= 9, "{good}/10");
}

#[test]
fn adaptation_moves_belief_towards_true_hyperparameters() {
    let truth = HyperParams::new(1.0, 0.1, [20.0, 20.0]).unwrap();
    let cfg = AdaptationConfig {
        log_bounds: Some(LogBounds::for_field(1.0, 100.0)),
        ..AdaptationConfig::default()
    };
    let prior = cfg.initial_belief(1).unwrap();
    let mut gm = prior.clone();
    for c in 0..10 {
        let batch = gp_batch(10, 100.0, &truth, 100 + c);
        gm = adapt_belief(&gm, &batch, &cfg, 200 + c).unwrap().0;
    }
    let at = truth.to_log();
    assert!(gm.log_density(&at).unwrap() > prior.log_density(&at).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn epp_is_a_percentage_and_extremes_hold(lw in prop::collection::vec(-50.0..0.0f64, 1..40)) {
        let p = lw.len();
        let particles: Vec<DVector<f64>> = (0..p).map(|i| DVector::from_element(1, i as f64)).collect();
        let ps = ParticleSet::from_log_weights(particles.clone(), lw).unwrap();
        let e = effective_particle_pct(&ps);
        prop_assert!((0.0..=100.0).contains(&e));
        prop_assert!(e >= 100.0 / p as f64 - 1e-9);
        let uni = ParticleSet::from_log_weights(particles, vec![-1.0; p]).unwrap();
        prop_assert!((effective_particle_pct(&uni) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn resampling_preserves_support(lw in prop::collection::vec(-20.0..0.0f64, 1..30), seed in any::<u64>()) {
        let particles: Vec<DVector<f64>> = (0..lw.len()).map(|i| DVector::from_element(1, i as f64)).collect();
        let ps = ParticleSet::from_log_weights(particles.clone(), lw).unwrap();
        let out = resample_systematic(&ps, seed);
        prop_assert_eq!(out.len(), particles.len());
        prop_assert!(out.iter().all(|o| particles.contains(o)));
    }

    #[test]
    fn em_is_monotone_and_respects_the_floor(seed in any::<u64>(), k in 1usize..4) {
        let mut r = rng(seed);
        let pts: Vec<DVector<f64>> = (0..60)
            .map(|i| DVector::from_vec(vec![
                (i % 3) as f64 * 4.0 + r.sample::<f64, _>(StandardNormal),
                r.sample::<f64, _>(StandardNormal),
            ]))
            .collect();
        let fit = fit_gm_traced(&pts, k, 1e-3, seed).unwrap();
        for w in fit.log_likelihood_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9);
        }
        let total: f64 = fit.mixture.components().iter().map(|c| c.weight).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for c in fit.mixture.components() {
            let min_eig = c.cov.clone().symmetric_eigen().eigenvalues.min();
            prop_assert!(min_eig >= 1e-3 * (1.0 - 1e-9));
        }
    }
}
