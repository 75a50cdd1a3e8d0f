//! Search-subspace samplers and self-normalized weighted estimators.
//!
//! * `run_gibbs_mcmc`: reweighted Metropolis-within-Gibbs chain. Each step
//!   draws a subspace through the current point and a step radius, picks an
//!   intersection point by weight, and accepts it with the multiple-try
//!   ratio Σw(forward points)/Σw(reverse points). Samples are unweighted.
//! * `run_independent_gaussian`: one subspace through the origin per draw
//!   with a χ_n radius; unweighted outputs.
//! * `run_deterministic_gibbs`: one solver solution per draw, emitted with
//!   traditional and first-order weights side by side.
//! * `run_rejection`: iid Gaussian draws filtered by a relaxed condition.
//!
//! For Gaussian targets the radial law χ_n cancels the Gaussian density on
//! the sphere, leaving r^{−k}/|∇λ restricted| as the per-point weight.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, CroftonConstant, SearchSubspace, Space, SphereRestriction};
use crate::manifold::{ConstraintManifold, TargetDensity};
use crate::rng;
use crate::solver::{self, SolverConfig, SolverStats};
use crate::stats;
use crate::weights::{self, Scheme, WeightConfig};

/// Observed statistic ψ.
pub type Statistic<'a> = &'a (dyn Fn(&DVector<f64>) -> Vec<f64> + Sync);

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub x: DVector<f64>,
    pub weight: f64,
    pub statistic: Vec<f64>,
    pub scheme: Scheme,
    pub traditional: Option<f64>,
    pub first_order: Option<f64>,
    pub curvature: Option<f64>,
}

impl WeightedSample {
    fn unweighted(x: DVector<f64>, statistic: Vec<f64>, scheme: Scheme) -> Self {
        WeightedSample { x, weight: 1.0, statistic, scheme, traditional: None, first_order: None, curvature: None }
    }

    /// Weight under the given scheme, if it was computed.
    pub fn weight_for(&self, s: Scheme) -> Option<f64> {
        match s {
            Scheme::Traditional => self.traditional,
            Scheme::FirstOrder => self.first_order,
            Scheme::Curvature => self.curvature,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub current: DVector<f64>,
    pub iteration: usize,
}

/// Step radius r = scale·χ_n.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDensity {
    pub scale: f64,
}

impl Default for StepDensity {
    fn default() -> Self {
        StepDensity { scale: 1.0 }
    }
}

impl StepDensity {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> f64 {
        self.scale * chi(n, rng)
    }
}

/// χ_n draw.
pub fn chi<R: Rng + ?Sized>(n: usize, rng: &mut R) -> f64 {
    ChiSquared::new(n as f64).expect("n >= 1").sample(rng).sqrt()
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct RunStats {
    pub iterations: u64,
    pub stalls: u64,
    pub accepted: u64,
    pub degenerate: u64,
    pub search_dim: usize,
    pub solver_attempts: u64,
    pub solver_successes: u64,
    pub solver_mean_iterations: f64,
}

impl RunStats {
    pub fn stall_fraction(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.stalls as f64 / self.iterations as f64
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        let moves = self.iterations - self.stalls;
        if moves == 0 {
            0.0
        } else {
            self.accepted as f64 / moves as f64
        }
    }

    /// More than half of the iterations stalled.
    pub fn invalid(&self) -> bool {
        self.stall_fraction() > 0.5
    }

    fn absorb_solver(&mut self, s: &SolverStats) {
        self.solver_attempts = s.attempts;
        self.solver_successes = s.successes;
        self.solver_mean_iterations = s.mean_iterations();
    }
}

#[derive(Debug, Clone)]
pub struct Run {
    pub samples: Vec<WeightedSample>,
    pub stats: RunStats,
}

/// Search dimension used by the curvature scheme: the intersection with the
/// sphere, of dimension d − k − 1, must be even.
pub fn parity_adjusted_dim(d: usize, k: usize, n: usize, scheme: Scheme) -> usize {
    if scheme != Scheme::Curvature || d < k + 1 {
        return d;
    }
    if (d - k - 1) % 2 == 1 {
        if d < n {
            d + 1
        } else {
            d - 1
        }
    } else {
        d
    }
}

fn unit_constant(d: usize, k: usize, n: usize) -> CroftonConstant {
    CroftonConstant { d, k, n, space: Space::Euclidean, value: 1.0, std_error: 0.0 }
}

/// Per-point weight on S ∩ M ∩ sphere. `rho` multiplies the density and
/// is evaluated at the distance to the sphere center.
#[allow(clippy::too_many_arguments)]
fn slice_weight(
    scheme: Scheme,
    m: &ConstraintManifold,
    f: &TargetDensity,
    s: &SearchSubspace,
    sph: &SphereRestriction,
    x: &DVector<f64>,
    wcfg: &WeightConfig,
    rho: &dyn Fn(f64) -> f64,
    norm_seed: u64,
) -> Result<f64> {
    let c = unit_constant(s.dim, m.codim, m.ambient_dim);
    match scheme {
        Scheme::Traditional => weights::traditional_weight(m, f, s, Some(sph), x, rho),
        Scheme::FirstOrder => weights::first_order_weight(m, f, Some(sph), x, &c, rho),
        Scheme::Curvature => {
            let nz = weights::curvature_normalization_seeded(
                m,
                x,
                s.dim,
                Some(sph),
                wcfg,
                wcfg.normalization_mc_samples,
                norm_seed,
            )?;
            weights::curvature_weight(m, f, s, Some(sph), x, wcfg, &c, rho, nz.value)
        }
    }
}

fn check_start(m: &ConstraintManifold, x0: &DVector<f64>, tol: f64) -> Result<()> {
    if x0.len() != m.ambient_dim {
        return Err(Error::input("starting point has the wrong dimension"));
    }
    let res = m.residual_norm(x0)?;
    if !(res < tol.max(1e-8)) {
        return Err(Error::input(format!("starting point is off the manifold (residual {res:e})")));
    }
    Ok(())
}

/// Reweighted Metropolis-within-Gibbs chain; samples are unweighted.
#[allow(clippy::too_many_arguments)]
pub fn run_gibbs_mcmc(
    m: &ConstraintManifold,
    f: &TargetDensity,
    d: usize,
    rho: &StepDensity,
    cfg: &SolverConfig,
    wcfg: &WeightConfig,
    i_max: usize,
    x0: &DVector<f64>,
    psi: Statistic,
    seed: u64,
) -> Result<Run> {
    cfg.validate()?;
    wcfg.validate()?;
    let n = m.ambient_dim;
    let k = m.codim;
    let d = parity_adjusted_dim(d, k, n, wcfg.scheme);
    if d < k + 1 || d > n {
        return Err(Error::input(format!("need k + 1 <= d <= n, got d={d}, k={k}, n={n}")));
    }
    check_start(m, x0, cfg.residual_tol)?;
    let mut r = rng::from_seed(seed);
    let mut state = ChainState { current: x0.clone(), iteration: 0 };
    let mut st = RunStats { search_dim: d, ..Default::default() };
    let mut sstats = SolverStats::default();
    let mut samples = Vec::with_capacity(i_max);
    let one = |_: f64| 1.0;
    for _ in 0..i_max {
        state.iteration += 1;
        st.iterations += 1;
        let xi = state.current.clone();
        let s = geometry::isotropic_subspace(n, d, xi.clone(), &mut r)?;
        let radius = rho.sample(n, &mut r);
        let sph = SphereRestriction::new(xi.clone(), radius)?;
        let norm_seed: u64 = r.random();
        let wf = |y: &DVector<f64>| slice_weight(wcfg.scheme, m, f, &s, &sph, y, wcfg, &one, norm_seed);
        let sel = solver::sample_intersection_point(m, &s, Some(&sph), wf, cfg.n_starts, cfg, &mut r, &mut sstats)?;
        let Some(sel) = sel else {
            st.stalls += 1;
            samples.push(WeightedSample::unweighted(xi.clone(), psi(&xi), wcfg.scheme));
            continue;
        };
        let y = sel.point.x.clone();
        // Reverse move: the same affine subspace seen from y.
        let s_back = SearchSubspace { basis: s.basis.clone(), center: y.clone(), dim: d };
        let sph_back = SphereRestriction::new(y.clone(), radius)?;
        let back_seed: u64 = r.random();
        let wb = |z: &DVector<f64>| slice_weight(wcfg.scheme, m, f, &s_back, &sph_back, z, wcfg, &one, back_seed);
        let accept = match wb(&xi) {
            Ok(w_cur) => {
                let others = solver::find_intersection_points(
                    m,
                    &s_back,
                    Some(&sph_back),
                    cfg.n_starts.saturating_sub(1).max(1),
                    cfg,
                    &mut r,
                    &mut sstats,
                )?;
                let tol = solver::dedup_tol(&s_back, Some(&sph_back));
                let mut total_back = w_cur;
                for p in others.iter().filter(|p| (&p.x - &xi).norm() >= tol) {
                    match wb(&p.x) {
                        Ok(w) => total_back += w,
                        Err(Error::Degenerate(_)) => st.degenerate += 1,
                        Err(e) => return Err(e),
                    }
                }
                let ratio = sel.total_weight / total_back;
                r.random::<f64>() < ratio.min(1.0)
            }
            Err(Error::Degenerate(_)) => {
                st.degenerate += 1;
                false
            }
            Err(e) => return Err(e),
        };
        if accept {
            st.accepted += 1;
            state.current = y;
        }
        let cur = state.current.clone();
        samples.push(WeightedSample::unweighted(cur.clone(), psi(&cur), wcfg.scheme));
    }
    st.absorb_solver(&sstats);
    Ok(Run { samples, stats: st })
}

/// Gaussian-slice weight r^{−k}/|∇λ restricted| under the given scheme.
fn gaussian_weight(
    scheme: Scheme,
    m: &ConstraintManifold,
    s: &SearchSubspace,
    sph: &SphereRestriction,
    x: &DVector<f64>,
    wcfg: &WeightConfig,
    norm_seed: u64,
) -> Result<f64> {
    let k = m.codim as i32;
    let rho = move |r: f64| r.powi(-k);
    slice_weight(scheme, m, &TargetDensity::uniform(), s, sph, x, wcfg, &rho, norm_seed)
}

struct Draw {
    sample: Option<WeightedSample>,
    degenerate: u64,
    solver: SolverStats,
}

fn merge_draws(draws: Vec<Draw>, d: usize) -> Run {
    let mut st = RunStats { search_dim: d, ..Default::default() };
    let mut ss = SolverStats::default();
    let mut samples = Vec::with_capacity(draws.len());
    for dr in draws {
        st.iterations += 1;
        st.degenerate += dr.degenerate;
        ss.merge(&dr.solver);
        match dr.sample {
            Some(s) => {
                st.accepted += 1;
                samples.push(s);
            }
            None => st.stalls += 1,
        }
    }
    st.absorb_solver(&ss);
    Run { samples, stats: st }
}

fn gaussian_setup<R: Rng + ?Sized>(m: &ConstraintManifold, d: usize, r: &mut R) -> Result<(SearchSubspace, SphereRestriction)> {
    let n = m.ambient_dim;
    let s = geometry::isotropic_subspace(n, d, DVector::zeros(n), r)?;
    let radius = chi(n, r);
    Ok((s, SphereRestriction::new(DVector::zeros(n), radius)?))
}

/// Independent search subspaces for a standard Gaussian target; one
/// weight-selected intersection point per draw, unweighted output.
pub fn run_independent_gaussian(
    m: &ConstraintManifold,
    d: usize,
    i_max: usize,
    cfg: &SolverConfig,
    wcfg: &WeightConfig,
    psi: Statistic,
    seed: u64,
) -> Result<Run> {
    cfg.validate()?;
    wcfg.validate()?;
    let n = m.ambient_dim;
    let k = m.codim;
    let d = parity_adjusted_dim(d, k, n, wcfg.scheme);
    if d < k + 1 || d > n {
        return Err(Error::input(format!("need k + 1 <= d <= n, got d={d}, k={k}, n={n}")));
    }
    let draws = (0..i_max)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(seed, i as u64);
            let (s, sph) = gaussian_setup(m, d, &mut r)?;
            let norm_seed: u64 = r.random();
            let mut ss = SolverStats::default();
            let mut degenerate = 0;
            let wf = |y: &DVector<f64>| gaussian_weight(wcfg.scheme, m, &s, &sph, y, wcfg, norm_seed);
            let sel = solver::sample_intersection_point(m, &s, Some(&sph), wf, cfg.n_starts, cfg, &mut r, &mut ss)?;
            if sel.is_none() && ss.successes > 0 {
                degenerate += 1;
            }
            Ok(Draw {
                sample: sel.map(|sel| WeightedSample::unweighted(sel.point.x.clone(), psi(&sel.point.x), wcfg.scheme)),
                degenerate,
                solver: ss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_draws(draws, d))
}

/// One solver solution per independent draw, carrying both the traditional
/// and the first-order weight (and the curvature weight when that scheme is
/// configured). `weight` holds the configured scheme's value.
pub fn run_deterministic_gibbs(
    m: &ConstraintManifold,
    d: usize,
    i_max: usize,
    cfg: &SolverConfig,
    wcfg: &WeightConfig,
    psi: Statistic,
    seed: u64,
) -> Result<Run> {
    cfg.validate()?;
    wcfg.validate()?;
    let n = m.ambient_dim;
    let k = m.codim;
    let d = parity_adjusted_dim(d, k, n, wcfg.scheme);
    if d < k + 1 || d > n {
        return Err(Error::input(format!("need k + 1 <= d <= n, got d={d}, k={k}, n={n}")));
    }
    let draws = (0..i_max)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(seed, i as u64);
            let (s, sph) = gaussian_setup(m, d, &mut r)?;
            let norm_seed: u64 = r.random();
            let mut ss = SolverStats::default();
            let Some(pt) = solver::solve_intersection_counted(m, &s, Some(&sph), cfg, &mut r, &mut ss)? else {
                return Ok(Draw { sample: None, degenerate: 0, solver: ss });
            };
            let x = pt.x;
            let w = |sch| gaussian_weight(sch, m, &s, &sph, &x, wcfg, norm_seed);
            let weights = (|| -> Result<(f64, f64, Option<f64>)> {
                let t = w(Scheme::Traditional)?;
                let fo = w(Scheme::FirstOrder)?;
                let cv = if wcfg.scheme == Scheme::Curvature { Some(w(Scheme::Curvature)?) } else { None };
                Ok((t, fo, cv))
            })();
            match weights {
                Ok((t, fo, cv)) => {
                    let weight = match wcfg.scheme {
                        Scheme::Traditional => t,
                        Scheme::FirstOrder => fo,
                        Scheme::Curvature => cv.unwrap(),
                    };
                    let statistic = psi(&x);
                    Ok(Draw {
                        sample: Some(WeightedSample {
                            x,
                            weight,
                            statistic,
                            scheme: wcfg.scheme,
                            traditional: Some(t),
                            first_order: Some(fo),
                            curvature: cv,
                        }),
                        degenerate: 0,
                        solver: ss,
                    })
                }
                Err(Error::Degenerate(_)) => Ok(Draw { sample: None, degenerate: 1, solver: ss }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_draws(draws, d))
}

#[derive(Debug, Clone)]
pub struct RejectionRun {
    pub statistics: Vec<Vec<f64>>,
    pub draws: u64,
    pub accepted: u64,
}

impl RejectionRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.draws as f64
    }

    pub fn std_error(&self) -> f64 {
        stats::binomial_se(self.acceptance_rate(), self.draws as f64)
    }
}

/// iid N(0, I_n) draws; `accept` returns the statistic of accepted draws.
/// Zero acceptances is an estimation failure.
pub fn run_rejection<A>(n: usize, accept: A, draws: u64, seed: u64) -> Result<RejectionRun>
where
    A: Fn(&[f64]) -> Option<Vec<f64>> + Sync,
{
    const CHUNK: u64 = 4096;
    let chunks = draws.div_ceil(CHUNK);
    let parts: Vec<Vec<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::substream(seed, c);
            let mut buf = vec![0.0; n];
            let mut out = Vec::new();
            for _ in 0..CHUNK.min(draws - c * CHUNK) {
                crate::airy::fill_normals(&mut buf, &mut r);
                if let Some(s) = accept(&buf) {
                    out.push(s);
                }
            }
            out
        })
        .collect();
    let statistics: Vec<Vec<f64>> = parts.into_iter().flatten().collect();
    let accepted = statistics.len() as u64;
    if accepted == 0 {
        return Err(Error::Estimation(format!("rejection sampling accepted 0 of {draws} draws")));
    }
    Ok(RejectionRun { statistics, draws, accepted })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedHistogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub total_weight: f64,
}

impl WeightedHistogram {
    /// Mass per unit length, normalized to integrate to one.
    pub fn density(&self) -> Vec<f64> {
        self.mass
            .iter()
            .enumerate()
            .map(|(i, m)| m / (self.total_weight * (self.edges[i + 1] - self.edges[i])))
            .collect()
    }
}

/// Weighted histogram of scalar values over fixed edges. Values outside the
/// edges are dropped from the bins but still count in `total_weight`.
pub fn weighted_histogram(values: &[f64], weights: &[f64], edges: &[f64]) -> Result<WeightedHistogram> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::input("histogram needs matching nonempty values and weights"));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::input("histogram edges must be strictly increasing"));
    }
    let mut mass = vec![0.0; edges.len() - 1];
    let mut total = 0.0;
    for (&v, &w) in values.iter().zip(weights) {
        total += w;
        if v < edges[0] || v > edges[edges.len() - 1] {
            continue;
        }
        let i = edges.partition_point(|&e| e <= v).saturating_sub(1).min(mass.len() - 1);
        mass[i] += w;
    }
    if !(total > 0.0) {
        return Err(Error::input("total weight must be positive"));
    }
    Ok(WeightedHistogram { edges: edges.to_vec(), mass, total_weight: total })
}

/// Weighted quantile (inverse of the weighted empirical CDF).
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i];
        if acc >= q * total {
            return values[i];
        }
    }
    values[*idx.last().unwrap()]
}

/// Freedman-Diaconis edges using weighted quartiles and the effective
/// sample size.
pub fn freedman_diaconis_edges(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::input("no values to bin"));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(vec![lo - 0.5, hi + 0.5]);
    }
    let iqr = weighted_quantile(values, weights, 0.75) - weighted_quantile(values, weights, 0.25);
    let ess = stats::effective_sample_size(weights).max(1.0);
    let width = 2.0 * iqr * ess.powf(-1.0 / 3.0);
    let bins = if width > 0.0 { ((hi - lo) / width).ceil().clamp(1.0, 10_000.0) as usize } else { 1 };
    Ok((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
}

fn check_weighted(samples: &[WeightedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::input("no samples"));
    }
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if !(total > 0.0) {
        return Err(Error::input("total weight must be positive"));
    }
    Ok(total)
}

/// Self-normalized weighted mean of the statistic.
pub fn weighted_mean(samples: &[WeightedSample]) -> Result<Vec<f64>> {
    let total = check_weighted(samples)?;
    let p = samples[0].statistic.len();
    let mut m = vec![0.0; p];
    for s in samples {
        for j in 0..p {
            m[j] += s.weight * s.statistic[j];
        }
    }
    Ok(m.into_iter().map(|v| v / total).collect())
}

/// Self-normalized weighted variance Σw(ψ−μ)²/Σw of the statistic.
pub fn weighted_variance(samples: &[WeightedSample]) -> Result<Vec<f64>> {
    let total = check_weighted(samples)?;
    let mu = weighted_mean(samples)?;
    let mut v = vec![0.0; mu.len()];
    for s in samples {
        for j in 0..mu.len() {
            let e = s.statistic[j] - mu[j];
            v[j] += s.weight * e * e;
        }
    }
    Ok(v.into_iter().map(|x| x / total).collect())
}

/// Replace each sample's `weight` with the given scheme's weight.
pub fn reweighted(samples: &[WeightedSample], scheme: Scheme) -> Result<Vec<WeightedSample>> {
    samples
        .iter()
        .map(|s| {
            let w = s.weight_for(scheme).ok_or_else(|| Error::input(format!("{} weight not computed", scheme.as_str())))?;
            Ok(WeightedSample { weight: w, scheme, ..s.clone() })
        })
        .collect()
}

/// Sample variance of weights divided by their median squared.
pub fn median_normalized_weight_variance(w: &[f64]) -> f64 {
    let med = stats::median(w);
    stats::variance(w) / (med * med)
}
