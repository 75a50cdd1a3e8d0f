//! Command-line runner: parses a TOML experiment file, runs the named
//! experiment and writes samples.csv, histogram.csv, summary.json and an
//! echo of the configuration into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::airy::{self, MultiEigConfig, SingleEigConfig};
use crate::error::{Error, Result};
use crate::geometry::Space;
use crate::manifold::{self, TargetDensity};
use crate::samplers::{self, Run, RunStats, StepDensity};
use crate::solver::SolverConfig;
use crate::validation;
use crate::weights::{Scheme, WeightConfig};

#[derive(Debug, Parser)]
#[command(name = "crofton", about = "Integral-geometry reweighted sampling experiments")]
pub struct Args {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides output_dir in the file.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Circle,
    Theorem3,
    SphereCollection,
    VolumeEstimator,
    AlgebraicBound,
    AiryMulti,
    AirySingle,
    GaussianSanity,
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::Traditional, Scheme::FirstOrder]
}
fn default_rows() -> usize {
    100_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Weightings written to the CSV files for experiments that carry both.
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    /// Cap on samples per label written to samples.csv.
    #[serde(default = "default_rows")]
    pub max_sample_rows: usize,
    #[serde(default)]
    pub circle: CircleParams,
    #[serde(default)]
    pub theorem3: Theorem3Params,
    #[serde(default)]
    pub sphere_collection: SphereCollectionParams,
    #[serde(default)]
    pub volume_estimator: VolumeParams,
    #[serde(default)]
    pub algebraic_bound: BoundParams,
    #[serde(default)]
    pub airy_multi: MultiEigConfig,
    #[serde(default)]
    pub airy_single: SingleEigConfig,
    #[serde(default)]
    pub gaussian_sanity: GaussianParams,
}

macro_rules! toml_default {
    ($t:ty) => {
        impl Default for $t {
            fn default() -> Self {
                toml::from_str("").expect("defaults deserialize")
            }
        }
    };
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleParams {
    #[serde(default = "million")]
    pub samples: usize,
}
toml_default!(CircleParams);

fn million() -> usize {
    1_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem3Params {
    #[serde(default = "fifty")]
    pub n: usize,
    #[serde(default = "t3_dims")]
    pub d_list: Vec<usize>,
    #[serde(default = "million")]
    pub samples: usize,
    /// Offset ball radius for the variant that keeps misses.
    #[serde(default = "offset_radius")]
    pub offset_radius: f64,
}
toml_default!(Theorem3Params);

fn fifty() -> usize {
    50
}
fn t3_dims() -> Vec<usize> {
    vec![5, 10, 20]
}
fn offset_radius() -> f64 {
    1.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereCollectionParams {
    #[serde(default = "twenty")]
    pub n: usize,
    #[serde(default = "eight")]
    pub d: usize,
    #[serde(default = "fifty")]
    pub n_spheres: usize,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default = "hundred_k")]
    pub samples: usize,
    #[serde(default)]
    pub weights: WeightConfig,
}
toml_default!(SphereCollectionParams);

fn twenty() -> usize {
    20
}
fn eight() -> usize {
    8
}
fn one() -> f64 {
    1.0
}
fn hundred_k() -> usize {
    100_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeParams {
    /// Radius of the round sphere whose area is estimated.
    #[serde(default = "three")]
    pub radius: f64,
    /// Even sphere dimension.
    #[serde(default = "two")]
    pub dim: usize,
    #[serde(default = "ten_k")]
    pub samples: usize,
}
toml_default!(VolumeParams);

fn three() -> f64 {
    3.0
}
fn two() -> usize {
    2
}
fn ten_k() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    #[serde(default = "two_u32")]
    pub degree: u32,
    #[serde(default = "two")]
    pub d: usize,
    #[serde(default = "three_usize")]
    pub n: usize,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default = "spherical")]
    pub space: Space,
}
toml_default!(BoundParams);

fn two_u32() -> u32 {
    2
}
fn three_usize() -> usize {
    3
}
fn spherical() -> Space {
    Space::Spherical
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianParams {
    #[serde(default = "five")]
    pub n: usize,
    #[serde(default = "two")]
    pub d: usize,
    #[serde(default = "hundred_k")]
    pub iterations: usize,
    #[serde(default = "one")]
    pub step_scale: f64,
    #[serde(default)]
    pub solver: SolverConfig,
}
toml_default!(GaussianParams);

fn five() -> usize {
    5
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Input(m) => Error::Config(m),
            other => other,
        };
        if self.max_sample_rows == 0 {
            return Err(Error::Config("max_sample_rows must be positive".into()));
        }
        match self.experiment {
            ExperimentKind::Circle if self.circle.samples < 2 => Err(Error::Config("circle.samples must be at least 2".into())),
            ExperimentKind::Theorem3 => {
                let t = &self.theorem3;
                if t.d_list.iter().any(|&d| d < 2 || d >= t.n) || t.samples < 2 || !(t.offset_radius > 0.0) {
                    return Err(Error::Config("theorem3 needs 2 <= d < n, samples >= 2 and a positive offset radius".into()));
                }
                Ok(())
            }
            ExperimentKind::SphereCollection => {
                let s = &self.sphere_collection;
                s.weights.validate().map_err(cfg_err)?;
                if s.d < 2 || s.d > s.n || s.n_spheres == 0 || !(s.radius > 0.0) || s.samples == 0 {
                    return Err(Error::Config("sphere_collection needs 2 <= d <= n, spheres, radius and samples".into()));
                }
                Ok(())
            }
            ExperimentKind::VolumeEstimator => {
                let v = &self.volume_estimator;
                if v.dim == 0 || v.dim % 2 == 1 || !(v.radius > 0.0) || v.samples == 0 {
                    return Err(Error::Config("volume_estimator needs even dim, positive radius and samples".into()));
                }
                Ok(())
            }
            ExperimentKind::AlgebraicBound => {
                let b = &self.algebraic_bound;
                if b.degree == 0 || !(b.b > 0.0) || b.d == 0 || b.d > b.n {
                    return Err(Error::Config("algebraic_bound needs degree >= 1, b > 0 and 1 <= d <= n".into()));
                }
                Ok(())
            }
            ExperimentKind::AiryMulti => self.airy_multi.validate().map_err(cfg_err),
            ExperimentKind::AirySingle => self.airy_single.validate().map_err(cfg_err),
            ExperimentKind::GaussianSanity => {
                let g = &self.gaussian_sanity;
                g.solver.validate().map_err(cfg_err)?;
                if g.n == 0 || g.d == 0 || g.d > g.n || g.iterations == 0 || !(g.step_scale > 0.0) {
                    return Err(Error::Config("gaussian_sanity needs 1 <= d <= n, iterations and a positive step scale".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Rendered outputs of one experiment, held in memory until the run is
/// complete.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub samples_csv: String,
    pub histogram_csv: String,
    pub report: Value,
    pub weight_variance: Value,
    pub counters: Value,
    pub invalid: bool,
}

/// 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

struct Tables {
    samples: String,
    histogram: String,
    max_rows: usize,
}

impl Tables {
    fn new(max_rows: usize) -> Self {
        Tables {
            samples: "label,index,weight,psi\n".into(),
            histogram: "label,bin_left,bin_right,density\n".into(),
            max_rows,
        }
    }

    fn add(&mut self, label: &str, psi: &[f64], w: &[f64]) -> Result<()> {
        for (i, (p, w)) in psi.iter().zip(w).take(self.max_rows).enumerate() {
            writeln!(self.samples, "{label},{i},{},{}", fmt_float(*w), fmt_float(*p)).unwrap();
        }
        if psi.is_empty() {
            return Ok(());
        }
        let edges = samplers::freedman_diaconis_edges(psi, w)?;
        let h = samplers::weighted_histogram(psi, w, &edges)?;
        for (j, dens) in h.density().iter().enumerate() {
            writeln!(self.histogram, "{label},{},{},{}", fmt_float(h.edges[j]), fmt_float(h.edges[j + 1]), fmt_float(*dens)).unwrap();
        }
        Ok(())
    }
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("report serializes")
}

fn run_counters(st: &RunStats) -> Value {
    json!({
        "iterations": st.iterations,
        "stalls": st.stalls,
        "degenerate": st.degenerate,
        "stall_fraction": st.stall_fraction(),
        "solver_attempts": st.solver_attempts,
        "solver_successes": st.solver_successes,
        "invalid": st.invalid(),
    })
}

fn scheme_weights(run: &Run, scheme: Scheme) -> Vec<f64> {
    run.samples.iter().map(|s| s.weight_for(scheme).unwrap_or(s.weight)).collect()
}

fn add_run(t: &mut Tables, prefix: &str, run: &Run, j: usize, schemes: &[Scheme], wv: &mut serde_json::Map<String, Value>) -> Result<()> {
    let psi: Vec<f64> = run.samples.iter().map(|s| s.statistic[j]).collect();
    for &sch in schemes {
        let w = scheme_weights(run, sch);
        let label = format!("{prefix}{}", sch.as_str());
        if !w.is_empty() {
            wv.insert(label.clone(), json!(samplers::median_normalized_weight_variance(&w)));
        }
        t.add(&label, &psi, &w)?;
    }
    Ok(())
}

/// Run the configured experiment without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outputs> {
    let seed = cfg.seed;
    let mut t = Tables::new(cfg.max_sample_rows);
    let mut wv = serde_json::Map::new();
    let mut counters = json!({});
    let mut invalid = false;
    let report = match cfg.experiment {
        ExperimentKind::Circle => {
            let r = validation::circle_weight_experiment(cfg.circle.samples, seed)?;
            let xs = &r.abscissae;
            for &sch in &cfg.schemes {
                let w: Vec<f64> = match sch {
                    Scheme::Traditional => xs.iter().map(|&x| validation::circle_traditional_weight(x)).collect(),
                    _ => vec![1.0; xs.len()],
                };
                t.add(sch.as_str(), xs, &w)?;
            }
            wv.insert("traditional".into(), json!(r.variance_trace.last().map(|v| v.1)));
            wv.insert("first_order".into(), json!(r.first_order_variance));
            to_value(&r)
        }
        ExperimentKind::Theorem3 => {
            let p = &cfg.theorem3;
            to_value(&validation::theorem3_check(p.n, &p.d_list, p.samples, p.offset_radius, seed)?)
        }
        ExperimentKind::SphereCollection => {
            let p = &cfg.sphere_collection;
            let r = validation::sphere_collection_experiment(p.n, p.d, p.n_spheres, p.radius, p.samples, &p.weights, seed)?;
            let idx: Vec<f64> = (0..p.n_spheres).map(|i| i as f64).collect();
            for (label, mass) in [("raw", &r.raw_mass), ("curvature", &r.curvature_mass)] {
                for (i, m) in mass.iter().enumerate().take(cfg.max_sample_rows) {
                    writeln!(t.samples, "{label},{i},{},{}", fmt_float(*m), fmt_float(idx[i])).unwrap();
                }
                let total: f64 = mass.iter().sum();
                for (i, m) in mass.iter().enumerate() {
                    writeln!(t.histogram, "{label},{},{},{}", fmt_float(i as f64), fmt_float(i as f64 + 1.0), fmt_float(m / total)).unwrap();
                }
            }
            wv.insert("raw".into(), json!(r.raw_volume_variance));
            wv.insert("curvature".into(), json!(r.curvature_volume_variance));
            counters = json!({ "degenerate": r.degenerate });
            to_value(&r)
        }
        ExperimentKind::VolumeEstimator => {
            let p = &cfg.volume_estimator;
            let sampler = validation::round_sphere_sampler(p.radius, p.dim)?;
            let est = validation::volume_from_curvature(sampler, 2, p.dim, p.samples, seed)?;
            let exact = crate::geometry::sphere_volume(p.dim) * p.radius.powi(p.dim as i32);
            json!({ "estimate": est, "exact": exact, "rel_err": (est - exact).abs() / exact })
        }
        ExperimentKind::AlgebraicBound => {
            let p = &cfg.algebraic_bound;
            let bound = validation::algebraic_volume_bound(p.degree, p.d, 0, p.n, p.b, p.space)?;
            json!({ "bound": bound })
        }
        ExperimentKind::AirySingle => {
            let r = airy::experiment_single_eig(&cfg.airy_single, seed)?;
            let j = cfg.airy_single.psi_index - 1;
            let mut cs = serde_json::Map::new();
            for c in &r.conditions {
                let prefix = format!("lambda1={}/", c.value);
                add_run(&mut t, &prefix, &c.run, j, &cfg.schemes, &mut wv)?;
                if let Some(refs) = &c.reference {
                    t.add(&format!("{prefix}rejection"), refs, &vec![1.0; refs.len()])?;
                }
                invalid |= c.stats.invalid();
                cs.insert(prefix, run_counters(&c.stats));
            }
            if let Some(c) = &r.control {
                let psi: Vec<f64> = c.run.samples.iter().map(|s| s.statistic[j]).collect();
                t.add(&format!("lambda1={}/control", c.value), &psi, &vec![1.0; psi.len()])?;
                cs.insert("control".into(), run_counters(&c.stats));
            }
            counters = Value::Object(cs);
            to_value(&r)
        }
        ExperimentKind::AiryMulti => {
            let r = airy::experiment_multi_eig(&cfg.airy_multi, seed)?;
            add_run(&mut t, "", &r.run, cfg.airy_multi.psi_index - 1, &cfg.schemes, &mut wv)?;
            if let Some(refs) = &r.reference {
                t.add("rejection", refs, &vec![1.0; refs.len()])?;
            }
            invalid = r.stats.invalid();
            counters = run_counters(&r.stats);
            to_value(&r)
        }
        ExperimentKind::GaussianSanity => {
            let p = &cfg.gaussian_sanity;
            let m = manifold::full_space(p.n);
            let f = TargetDensity::standard_gaussian();
            let psi = |x: &DVector<f64>| x.iter().copied().collect::<Vec<_>>();
            let run = samplers::run_gibbs_mcmc(
                &m,
                &f,
                p.d,
                &StepDensity { scale: p.step_scale },
                &p.solver,
                &WeightConfig { scheme: Scheme::FirstOrder, ..Default::default() },
                p.iterations,
                &DVector::zeros(p.n),
                &psi,
                seed,
            )?;
            let x1: Vec<f64> = run.samples.iter().map(|s| s.statistic[0]).collect();
            t.add("first_order", &x1, &vec![1.0; x1.len()])?;
            invalid = run.stats.invalid();
            counters = run_counters(&run.stats);
            json!({
                "mean": samplers::weighted_mean(&run.samples)?,
                "variance": samplers::weighted_variance(&run.samples)?,
                "lag1_autocorrelation": crate::stats::lag1_autocorrelation(&x1),
            })
        }
    };
    Ok(Outputs {
        samples_csv: t.samples,
        histogram_csv: t.histogram,
        report,
        weight_variance: Value::Object(wv),
        counters,
        invalid,
    })
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_outputs(dir: &Path, text: &str, out: &Outputs, summary: &Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("samples.csv"), &out.samples_csv)?;
    std::fs::write(dir.join("histogram.csv"), &out.histogram_csv)?;
    std::fs::write(dir.join("config.toml"), text)?;
    let s = serde_json::to_string_pretty(summary).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), s + "\n")?;
    Ok(())
}

fn run_inner(args: &Args) -> Result<PathBuf> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let dir = args
        .output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (set output_dir or --output)".into()))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;
    let start = Instant::now();
    let out = pool.install(|| execute(&cfg))?;
    let summary = json!({
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config_hash": config_hash(&text),
        "wall_clock_seconds": start.elapsed().as_secs_f64(),
        "threads": pool.current_num_threads(),
        "invalid": out.invalid,
        "weight_variance": out.weight_variance,
        "counters": out.counters,
        "report": out.report,
        "config": text,
    });
    write_outputs(&dir, &text, &out, &summary)?;
    if out.invalid {
        return Err(Error::InvalidRun("stall fraction above 0.5".into()));
    }
    Ok(dir)
}

fn category(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Input(_) => "config",
        Error::InvalidRun(_) => "invalid_run",
        Error::Io(_) => "io",
        _ => "numerical",
    }
}

/// Runs the command line and returns the process exit code. Errors are
/// reported on stderr as one JSON object.
pub fn run(args: &Args) -> i32 {
    match run_inner(args) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": category(&e), "message": e.to_string() }));
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::parse("experiment = \"circle\"\nbogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("experiment = \"circle\"\n[circle]\nsample = 3"), Err(Error::Config(_))));
        assert!(ExperimentConfig::parse("experiment = \"circle\"").is_ok());
    }

    #[test]
    fn invalid_parameters_are_config_errors() {
        let e = ExperimentConfig::parse("experiment = \"theorem3\"\n[theorem3]\nn = 10\nd_list = [10]").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn floats_have_seventeen_digits() {
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn circle_outputs() {
        let cfg = ExperimentConfig::parse("experiment = \"circle\"\nmax_sample_rows = 5\n[circle]\nsamples = 1000").unwrap();
        let out = execute(&cfg).unwrap();
        assert_eq!(out.samples_csv.lines().count(), 1 + 2 * 5);
        assert!(out.report["mean_traditional"].as_f64().unwrap() > 5.0);
    }
}
