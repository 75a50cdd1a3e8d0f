//! Conditioning experiments on the Airy model: single-eigenvalue rare
//! events, the multi-eigenvalue condition, and relaxed-box rejection
//! references.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{airy_manifold, fill_normals, AiryModel, EigenCondition, NoiseScaling, Tridiagonal};
use crate::error::{Error, Result};
use crate::geometry::SearchSubspace;
use crate::rng;
use crate::samplers::{self, RejectionRun, Run, RunStats, WeightedSample};
use crate::solver::{self, SolverConfig, SolverStats};
use crate::stats;
use crate::weights::{Scheme, WeightConfig};

/// Top `p` eigenvalues, descending; the statistic attached to each sample.
pub fn top_eigenvalues(model: &AiryModel, p: usize) -> impl Fn(&DVector<f64>) -> Vec<f64> + Sync {
    let model = *model;
    move |x| {
        let t = model.build_matrix(x.as_slice()).expect("noise length matches model");
        (1..=p).map(|i| t.eigenvalue_desc(i)).collect()
    }
}

/// Conditioned samples from the deterministic-solver sampler; the
/// statistic holds the top `top` eigenvalues.
pub fn conditioned_run(
    model: &AiryModel,
    cond: &EigenCondition,
    top: usize,
    d: usize,
    i_max: usize,
    cfg: &SolverConfig,
    wcfg: &WeightConfig,
    seed: u64,
) -> Result<Run> {
    let m = airy_manifold(model, cond)?;
    let psi = top_eigenvalues(model, top);
    samplers::run_deterministic_gibbs(&m, d, i_max, cfg, wcfg, &psi, seed)
}

/// Control run: Newton from a Gaussian start in the whole noise space, with
/// no search subspace and no reweighting.
pub fn unconstrained_control(
    model: &AiryModel,
    cond: &EigenCondition,
    top: usize,
    i_max: usize,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<Run> {
    cfg.validate()?;
    let m = airy_manifold(model, cond)?;
    let n = model.matrix_size;
    let s = SearchSubspace::new(DMatrix::identity(n, n), DVector::zeros(n))?;
    let psi = top_eigenvalues(model, top);
    let draws: Vec<(Option<WeightedSample>, SolverStats)> = (0..i_max)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(seed, i as u64);
            let mut ss = SolverStats::default();
            let pt = solver::solve_intersection_counted(&m, &s, None, cfg, &mut r, &mut ss)?;
            let sample = pt.map(|p| WeightedSample {
                statistic: psi(&p.x),
                x: p.x,
                weight: 1.0,
                scheme: Scheme::FirstOrder,
                traditional: None,
                first_order: None,
                curvature: None,
            });
            Ok((sample, ss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut st = RunStats { search_dim: n, ..Default::default() };
    let mut ss = SolverStats::default();
    let mut samples = Vec::new();
    for (s, x) in draws {
        st.iterations += 1;
        ss.merge(&x);
        match s {
            Some(s) => {
                st.accepted += 1;
                samples.push(s);
            }
            None => st.stalls += 1,
        }
    }
    st.solver_attempts = ss.attempts;
    st.solver_successes = ss.successes;
    st.solver_mean_iterations = ss.mean_iterations();
    Ok(Run { samples, stats: st })
}

/// λ_i ∈ [lo, hi] from Sturm counts (`below` counts eigenvalues < x).
fn eig_in_window(t: &Tridiagonal, i: usize, lo: f64, hi: f64) -> bool {
    let k = t.size();
    k - t.count_below(lo) >= i && k - t.count_below(hi) < i
}

/// Rejection sampling of N ~ N(0, I) on the box λ_{indices[j]} ∈
/// [values[j] ± halfwidth]; accepted draws record the top `top`
/// eigenvalues.
pub fn relaxed_rejection(
    model: &AiryModel,
    indices: &[usize],
    values: &[f64],
    halfwidth: f64,
    top: usize,
    draws: u64,
    seed: u64,
) -> Result<RejectionRun> {
    if indices.len() != values.len() || indices.is_empty() {
        return Err(Error::input("box needs matching nonempty indices and values"));
    }
    if !(halfwidth > 0.0) {
        return Err(Error::input("halfwidth must be positive"));
    }
    let k = model.matrix_size;
    if indices.iter().chain(std::iter::once(&top)).any(|&i| i == 0 || i > k) {
        return Err(Error::input("eigenvalue index out of range"));
    }
    const CHUNK: u64 = 8192;
    let chunks = draws.div_ceil(CHUNK);
    let base = model.build_matrix(&vec![0.0; k])?;
    let sigma = model.noise_scale();
    let parts: Vec<Vec<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::substream(seed, c);
            let mut noise = vec![0.0; k];
            let mut t = base.clone();
            let mut out = Vec::new();
            for _ in 0..CHUNK.min(draws - c * CHUNK) {
                fill_normals(&mut noise, &mut r);
                for j in 0..k {
                    t.diag[j] = base.diag[j] + sigma * noise[j];
                }
                let hit = indices
                    .iter()
                    .zip(values)
                    .all(|(&i, &v)| eig_in_window(&t, i, v - halfwidth, v + halfwidth));
                if hit {
                    out.push((1..=top).map(|i| t.eigenvalue_desc(i)).collect());
                }
            }
            out
        })
        .collect();
    let statistics: Vec<Vec<f64>> = parts.into_iter().flatten().collect();
    if statistics.is_empty() {
        return Err(Error::Estimation("rejection sampler accepted no draws".into()));
    }
    Ok(RejectionRun { accepted: statistics.len() as u64, statistics, draws })
}

/// Weighted summaries of one statistic component under both schemes.
#[derive(Debug, Clone, Serialize)]
pub struct SchemeComparison {
    pub samples: usize,
    pub traditional_mean: f64,
    pub first_order_mean: f64,
    /// Weight variance divided by the squared median weight.
    pub traditional_weight_variance: f64,
    pub first_order_weight_variance: f64,
    pub variance_ratio: f64,
    pub ks_traditional: Option<f64>,
    pub ks_first_order: Option<f64>,
    pub reference_mean: Option<f64>,
    pub reference_samples: Option<u64>,
}

/// Compare traditional and first-order weighting of component `j` of the
/// statistic, optionally against unweighted reference draws.
pub fn compare_schemes(run: &Run, j: usize, reference: Option<&[f64]>) -> Result<SchemeComparison> {
    let s = &run.samples;
    if s.is_empty() {
        return Err(Error::Estimation("run produced no samples".into()));
    }
    let psi: Vec<f64> = s.iter().map(|x| x.statistic[j]).collect();
    let wt: Vec<f64> = s.iter().map(|x| x.traditional.unwrap_or(x.weight)).collect();
    let wf: Vec<f64> = s.iter().map(|x| x.first_order.unwrap_or(x.weight)).collect();
    let wmean = |w: &[f64]| psi.iter().zip(w).map(|(p, w)| p * w).sum::<f64>() / w.iter().sum::<f64>();
    let vt = samplers::median_normalized_weight_variance(&wt);
    let vf = samplers::median_normalized_weight_variance(&wf);
    let (kt, kf, rm, rn) = match reference {
        Some(r) => {
            let ones = vec![1.0; r.len()];
            (
                Some(stats::weighted_ks_two_sample(&psi, &wt, r, &ones)),
                Some(stats::weighted_ks_two_sample(&psi, &wf, r, &ones)),
                Some(stats::mean(r)),
                Some(r.len() as u64),
            )
        }
        None => (None, None, None, None),
    };
    Ok(SchemeComparison {
        samples: s.len(),
        traditional_mean: wmean(&wt),
        first_order_mean: wmean(&wf),
        traditional_weight_variance: vt,
        first_order_weight_variance: vf,
        variance_ratio: vt / vf,
        ks_traditional: kt,
        ks_first_order: kf,
        reference_mean: rm,
        reference_samples: rn,
    })
}

fn comparison(run: &Run, j: usize, reference: Option<&[f64]>) -> Result<Option<SchemeComparison>> {
    if run.samples.is_empty() {
        return Ok(None);
    }
    compare_schemes(run, j, reference).map(Some)
}

/// True when every sample's eigenvalues are strictly decreasing.
pub fn interlacing_holds(run: &Run) -> bool {
    run.samples.iter().all(|s| s.statistic.windows(2).all(|w| w[0] > w[1]))
}

fn default_n() -> f64 {
    1e6
}
fn default_beta() -> f64 {
    2.0
}
fn default_d() -> usize {
    23
}
fn default_i_max() -> usize {
    5000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleEigConfig {
    #[serde(default = "default_n")]
    pub n_parameter: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "white_noise")]
    pub noise_scaling: NoiseScaling,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_i_max")]
    pub i_max: usize,
    /// 1-based index of the reported eigenvalue.
    #[serde(default = "two")]
    pub psi_index: usize,
    /// Conditioning values of λ₁.
    #[serde(default = "single_values")]
    pub values: Vec<f64>,
    /// λ₁ value for the unrestricted-solver control; none skips it.
    #[serde(default = "control_value")]
    pub control_value: Option<f64>,
    #[serde(default = "default_i_max")]
    pub control_samples: usize,
    /// Rejection draws per conditioning value; 0 skips the reference.
    #[serde(default)]
    pub rejection_draws: u64,
    #[serde(default = "single_halfwidth")]
    pub rejection_halfwidth: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "first_order_weights")]
    pub weights: WeightConfig,
}

fn white_noise() -> NoiseScaling {
    NoiseScaling::WhiteNoise
}
fn two() -> usize {
    2
}
fn four() -> usize {
    4
}
fn single_values() -> Vec<f64> {
    vec![-2.0, 0.0, 2.0, 5.0]
}
fn control_value() -> Option<f64> {
    Some(5.0)
}
fn single_halfwidth() -> f64 {
    0.1
}
fn first_order_weights() -> WeightConfig {
    WeightConfig { scheme: Scheme::FirstOrder, ..Default::default() }
}

impl Default for SingleEigConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

impl SingleEigConfig {
    pub fn model(&self) -> Result<AiryModel> {
        Ok(AiryModel::new(self.n_parameter, self.beta)?.with_noise_scaling(self.noise_scaling))
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.weights.validate()?;
        let k = self.model()?.matrix_size;
        if self.psi_index < 2 || self.psi_index > k {
            return Err(Error::input("psi_index must lie in 2..=K"));
        }
        if self.values.is_empty() || self.d < 2 || self.d > k || self.i_max == 0 {
            return Err(Error::input("need values, 2 <= d <= K and i_max > 0"));
        }
        if !(self.rejection_halfwidth > 0.0) {
            return Err(Error::input("rejection_halfwidth must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionResult {
    pub value: f64,
    pub stats: RunStats,
    /// None when every draw stalled.
    pub comparison: Option<SchemeComparison>,
    pub interlacing: bool,
    #[serde(skip)]
    pub run: Run,
    #[serde(skip)]
    pub reference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlResult {
    pub value: f64,
    pub stats: RunStats,
    pub mean: f64,
    #[serde(skip)]
    pub run: Run,
}

#[derive(Debug, Clone, Serialize)]
pub struct SingleEigReport {
    pub matrix_size: usize,
    pub grid_step: f64,
    pub conditions: Vec<ConditionResult>,
    pub control: Option<ControlResult>,
}

/// λ_ψ | λ₁ = value for each configured value, with both weightings on the
/// same solver outputs, optional rejection references on [value ± hw], and
/// the unrestricted-solver control.
pub fn experiment_single_eig(cfg: &SingleEigConfig, seed: u64) -> Result<SingleEigReport> {
    cfg.validate()?;
    let model = cfg.model()?;
    let top = cfg.psi_index;
    let mut conditions = Vec::new();
    for (i, &v) in cfg.values.iter().enumerate() {
        let cond = EigenCondition::single(1, v);
        let s = rng::derive(seed, i as u64);
        let run = conditioned_run(&model, &cond, top, cfg.d, cfg.i_max, &cfg.solver, &cfg.weights, rng::labeled(s, "run"))?;
        let reference = if cfg.rejection_draws > 0 {
            let rej = relaxed_rejection(&model, &[1], &[v], cfg.rejection_halfwidth, top, cfg.rejection_draws, rng::labeled(s, "rejection"))?;
            Some(rej.statistics.iter().map(|x| x[top - 1]).collect::<Vec<_>>())
        } else {
            None
        };
        conditions.push(ConditionResult {
            value: v,
            stats: run.stats,
            comparison: comparison(&run, top - 1, reference.as_deref())?,
            interlacing: interlacing_holds(&run),
            run,
            reference,
        });
    }
    let control = match cfg.control_value {
        Some(v) => {
            let cond = EigenCondition::single(1, v);
            let run = unconstrained_control(&model, &cond, top, cfg.control_samples, &cfg.solver, rng::labeled(seed, "control"))?;
            let vals: Vec<f64> = run.samples.iter().map(|s| s.statistic[top - 1]).collect();
            Some(ControlResult { value: v, stats: run.stats, mean: stats::mean(&vals), run })
        }
        None => None,
    };
    Ok(SingleEigReport { matrix_size: model.matrix_size, grid_step: model.grid_step, conditions, control })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiEigConfig {
    #[serde(default = "default_n")]
    pub n_parameter: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "white_noise")]
    pub noise_scaling: NoiseScaling,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_i_max")]
    pub i_max: usize,
    #[serde(default = "four")]
    pub psi_index: usize,
    #[serde(default = "multi_condition")]
    pub condition: EigenCondition,
    /// Indices and values of the relaxed rejection box.
    #[serde(default = "box_indices")]
    pub rejection_indices: Vec<usize>,
    #[serde(default = "box_values")]
    pub rejection_values: Vec<f64>,
    #[serde(default = "box_halfwidth")]
    pub rejection_halfwidth: f64,
    #[serde(default)]
    pub rejection_draws: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "first_order_weights")]
    pub weights: WeightConfig,
}

fn multi_condition() -> EigenCondition {
    EigenCondition { indices: vec![1, 2, 3, 5, 6, 7], values: vec![-2.0, -3.5, -4.65, -7.9, -9.0, -10.8] }
}
fn box_indices() -> Vec<usize> {
    vec![3, 5]
}
fn box_values() -> Vec<f64> {
    vec![-4.65, -7.9]
}
fn box_halfwidth() -> f64 {
    0.001
}

impl Default for MultiEigConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

impl MultiEigConfig {
    pub fn model(&self) -> Result<AiryModel> {
        Ok(AiryModel::new(self.n_parameter, self.beta)?.with_noise_scaling(self.noise_scaling))
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.weights.validate()?;
        self.condition.validate()?;
        let k = self.model()?.matrix_size;
        if self.psi_index == 0 || self.psi_index > k || self.condition.indices.contains(&self.psi_index) {
            return Err(Error::input("psi_index must be an unconditioned index in 1..=K"));
        }
        let codim = self.condition.indices.len();
        if self.d <= codim || self.d > k || self.i_max == 0 {
            return Err(Error::input("need codim < d <= K and i_max > 0"));
        }
        if self.rejection_indices.len() != self.rejection_values.len() || !(self.rejection_halfwidth > 0.0) {
            return Err(Error::input("rejection box needs matching indices/values and positive halfwidth"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiEigReport {
    pub matrix_size: usize,
    pub grid_step: f64,
    pub stats: RunStats,
    /// None when every draw stalled.
    pub comparison: Option<SchemeComparison>,
    pub interlacing: bool,
    pub rejection_acceptance: Option<f64>,
    #[serde(skip)]
    pub run: Run,
    #[serde(skip)]
    pub reference: Option<Vec<f64>>,
}

/// λ_ψ conditioned on several other eigenvalues, both weightings on the
/// same solver outputs, plus the relaxed-box rejection reference.
pub fn experiment_multi_eig(cfg: &MultiEigConfig, seed: u64) -> Result<MultiEigReport> {
    cfg.validate()?;
    let model = cfg.model()?;
    let top = cfg.psi_index.max(*cfg.condition.indices.last().unwrap());
    let run = conditioned_run(&model, &cfg.condition, top, cfg.d, cfg.i_max, &cfg.solver, &cfg.weights, rng::labeled(seed, "run"))?;
    let (reference, acc) = if cfg.rejection_draws > 0 {
        let rej = relaxed_rejection(
            &model,
            &cfg.rejection_indices,
            &cfg.rejection_values,
            cfg.rejection_halfwidth,
            cfg.psi_index,
            cfg.rejection_draws,
            rng::labeled(seed, "rejection"),
        )?;
        let r: Vec<f64> = rej.statistics.iter().map(|x| x[cfg.psi_index - 1]).collect();
        (Some(r), Some(rej.acceptance_rate()))
    } else {
        (None, None)
    };
    Ok(MultiEigReport {
        matrix_size: model.matrix_size,
        grid_step: model.grid_step,
        stats: run.stats,
        comparison: comparison(&run, cfg.psi_index - 1, reference.as_deref())?,
        interlacing: interlacing_holds(&run),
        rejection_acceptance: acc,
        run,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AiryModel {
        AiryModel::new(1e3, 2.0).unwrap()
    }

    #[test]
    fn window_test_matches_eigenvalues() {
        let m = small();
        let mut r = rng::from_seed(3);
        let mut noise = vec![0.0; m.matrix_size];
        fill_normals(&mut noise, &mut r);
        let t = m.build_matrix(&noise).unwrap();
        for i in 1..5 {
            let l = t.eigenvalue_desc(i);
            assert!(eig_in_window(&t, i, l - 1e-6, l + 1e-6));
            assert!(!eig_in_window(&t, i, l + 1e-6, l + 1.0));
        }
    }

    #[test]
    fn rejection_box_contains_targets() {
        let m = small();
        let rej = relaxed_rejection(&m, &[1], &[-1.0], 0.5, 2, 20_000, 5).unwrap();
        assert!(rej.accepted > 0);
        for s in &rej.statistics {
            assert!((s[0] + 1.0).abs() <= 0.5 && s[0] > s[1]);
        }
    }

    #[test]
    fn conditioned_samples_hit_target() {
        let m = small();
        let cond = EigenCondition::single(1, 0.0);
        let wcfg = first_order_weights();
        let run = conditioned_run(&m, &cond, 2, 23, 40, &SolverConfig::default(), &wcfg, 1).unwrap();
        assert!(run.samples.len() > 20);
        for s in &run.samples {
            assert!(s.statistic[0].abs() < 1e-8);
            assert!(s.traditional.is_some() && s.first_order.is_some());
        }
        assert!(interlacing_holds(&run));
    }

    #[test]
    fn default_configs_are_valid() {
        SingleEigConfig::default().validate().unwrap();
        MultiEigConfig::default().validate().unwrap();
        assert!(toml::from_str::<SingleEigConfig>("bogus = 1").is_err());
    }
}
