use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crofton::airy::{self, AiryModel, EigenCondition};
use crofton::manifold::{self, TargetDensity};
use crofton::rng;
use crofton::samplers::{self, StepDensity};
use crofton::solver::SolverConfig;
use crofton::stats;
use crofton::validation;
use crofton::weights::{Scheme, WeightConfig};

#[test]
fn full_space_gibbs_recovers_standard_gaussian() {
    let n = 5;
    let m = manifold::full_space(n);
    let f = TargetDensity::standard_gaussian();
    let psi = |x: &DVector<f64>| x.iter().copied().collect::<Vec<_>>();
    let run = samplers::run_gibbs_mcmc(
        &m,
        &f,
        2,
        &StepDensity { scale: 1.0 },
        &SolverConfig::default(),
        &WeightConfig { scheme: Scheme::FirstOrder, ..Default::default() },
        100_000,
        &DVector::zeros(n),
        &psi,
        21,
    )
    .unwrap();
    assert_eq!(run.stats.stalls, 0);
    let xs: Vec<&Vec<f64>> = run.samples.iter().map(|s| &s.statistic).collect();
    let count = xs.len() as f64;
    let mean: Vec<f64> = (0..n).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / count).collect();
    for i in 0..n {
        assert!(mean[i].abs() < 0.02, "mean[{i}] = {}", mean[i]);
        for j in 0..n {
            let c = xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (count - 1.0);
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((c - target).abs() < 0.05, "cov[{i}][{j}] = {c}");
        }
    }
}

#[test]
fn independent_gaussian_moments_and_independence() {
    let n = 4;
    let m = manifold::full_space(n);
    let psi = |x: &DVector<f64>| vec![x[0], x.norm_squared()];
    let run = samplers::run_independent_gaussian(&m, 2, 100_000, &SolverConfig::default(), &WeightConfig::default(), &psi, 22).unwrap();
    let x0: Vec<f64> = run.samples.iter().map(|s| s.statistic[0]).collect();
    let r2: Vec<f64> = run.samples.iter().map(|s| s.statistic[1]).collect();
    assert!(stats::mean(&x0).abs() < 0.02);
    assert!((stats::variance(&x0) - 1.0).abs() < 0.05);
    assert!((stats::mean(&r2) - n as f64).abs() < 0.1);
    assert!(stats::lag1_autocorrelation(&x0).abs() < 3.0 / (x0.len() as f64).sqrt());
}

#[test]
fn airy_outputs_satisfy_condition() {
    let model = AiryModel::new(1e3, 2.0).unwrap();
    let m = airy::airy_manifold(&model, &EigenCondition::single(1, 0.0)).unwrap();
    let psi = airy::top_eigenvalues(&model, 1);
    let run = samplers::run_independent_gaussian(&m, 23, 30, &SolverConfig::default(), &WeightConfig::default(), &psi, 23).unwrap();
    assert!(!run.samples.is_empty());
    assert!(run.samples.iter().all(|s| s.statistic[0].abs() < 1e-8));
}

#[test]
fn six_eigenvalue_condition_is_met() {
    let model = AiryModel::new(1e3, 2.0).unwrap();
    let cond = EigenCondition::new(vec![1, 2, 3, 5, 6, 7], vec![-2.0, -3.5, -4.65, -7.9, -9.0, -10.8]).unwrap();
    let m = airy::airy_manifold(&model, &cond).unwrap();
    let run = airy::conditioned_run(&model, &cond, 7, 23, 10, &SolverConfig::default(), &WeightConfig::default(), 24).unwrap();
    assert!(!run.samples.is_empty());
    for s in &run.samples {
        assert!(m.residual_norm(&s.x).unwrap() < 1e-8);
        let j = m.jacobian(&s.x).unwrap();
        let sv = j.singular_values();
        assert!(sv.min() > 1e-10);
    }
    assert!(airy::interlacing_holds(&run));
}

/// Kinematic lines through the unit circle: random direction and offset.
/// Both weightings of the arc positions of the intersection points estimate
/// the uniform law; the unit first-order weights should be at least as
/// close to it as the heavy-tailed traditional weights.
#[test]
fn circle_first_order_histogram_beats_traditional() {
    for &size in &[1_000usize, 10_000, 100_000] {
        let mut ks_t = Vec::new();
        let mut ks_f = Vec::new();
        for rerun in 0..20u64 {
            let mut r = rng::from_seed(rng::derive(size as u64, rerun));
            let mut pos = Vec::with_capacity(2 * size);
            let mut wt = Vec::with_capacity(2 * size);
            for _ in 0..size {
                let dir: f64 = r.random_range(0.0..2.0 * PI);
                let off: f64 = r.random_range(-1.0..1.0);
                let w = validation::circle_traditional_weight(off);
                let half = off.acos();
                for a in [dir + half, dir - half] {
                    pos.push(a.rem_euclid(2.0 * PI));
                    wt.push(w);
                }
            }
            let ones = vec![1.0; pos.len()];
            let cdf = |x: f64| x / (2.0 * PI);
            ks_t.push(stats::weighted_ks_to_cdf(&pos, &wt, cdf));
            ks_f.push(stats::weighted_ks_to_cdf(&pos, &ones, cdf));
        }
        assert!(stats::median(&ks_f) <= stats::median(&ks_t), "size {size}");
    }
}

#[test]
fn traditional_weighted_circle_abscissae_follow_arc_length() {
    let r = validation::circle_weight_experiment(1_000_000, 25).unwrap();
    let w: Vec<f64> = r.abscissae.iter().map(|&x| validation::circle_traditional_weight(x)).collect();
    // Arc-length law of the abscissa on the upper half circle.
    let cdf = |x: f64| 1.0 - x.clamp(-1.0, 1.0).acos() / PI;
    let d = stats::weighted_ks_to_cdf(&r.abscissae, &w, cdf);
    let ess = stats::effective_sample_size(&w);
    assert!(stats::ks_pvalue(d, ess) > 0.01, "KS {d}, ess {ess}");
}

#[test]
fn affine_level_set_is_sampled_uniformly_by_gibbs() {
    // A plane in R³ with a Gaussian target restricted to it: the chain's
    // marginal along the plane normal is degenerate and the in-plane
    // coordinates are standard normal.
    let m = manifold::affine_plane(DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]), DVector::from_element(1, 0.5)).unwrap();
    let f = TargetDensity::standard_gaussian();
    let psi = |x: &DVector<f64>| vec![x[0], x[2]];
    let mut x0 = DVector::zeros(3);
    x0[2] = 0.5;
    let run = samplers::run_gibbs_mcmc(
        &m,
        &f,
        2,
        &StepDensity { scale: 1.0 },
        &SolverConfig::default(),
        &WeightConfig { scheme: Scheme::FirstOrder, ..Default::default() },
        20_000,
        &x0,
        &psi,
        26,
    )
    .unwrap();
    let a: Vec<f64> = run.samples.iter().map(|s| s.statistic[0]).collect();
    assert!(run.samples.iter().all(|s| (s.statistic[1] - 0.5).abs() < 1e-8));
    assert!(stats::mean(&a).abs() < 0.1);
    assert!((stats::variance(&a) - 1.0).abs() < 0.15);
}
