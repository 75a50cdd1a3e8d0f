//! Damped Newton solver for points of S ∩ M ∩ sphere, plus multi-start
//! sampling of one intersection point with categorical selection.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SearchSubspace, SphereRestriction};
use crate::linalg;
use crate::manifold::ConstraintManifold;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub residual_tol: f64,
    pub step_damping: f64,
    pub max_restarts: usize,
    /// Independent starts per multi-start selection.
    pub n_starts: usize,
    /// Spread of start points when no sphere restriction is given.
    pub start_scale: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 100,
            residual_tol: 1e-10,
            step_damping: 1.0,
            max_restarts: 20,
            n_starts: 8,
            start_scale: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tol > 0.0) {
            return Err(Error::input("residual_tol must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::input("max_iters must be at least 1"));
        }
        if !(self.step_damping > 0.0 && self.step_damping <= 1.0) {
            return Err(Error::input("step_damping must lie in (0, 1]"));
        }
        if self.max_restarts == 0 || self.n_starts == 0 {
            return Err(Error::input("max_restarts and n_starts must be at least 1"));
        }
        if !(self.start_scale > 0.0) {
            return Err(Error::input("start_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IntersectionPoint {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Seed of the start that produced this point.
    pub start_seed: u64,
}

/// Attempt statistics accumulated across solves.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SolverStats {
    pub attempts: u64,
    pub successes: u64,
    pub iterations: u64,
}

impl SolverStats {
    pub fn success_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.successes == 0 {
            0.0
        } else {
            self.iterations as f64 / self.successes as f64
        }
    }

    pub fn merge(&mut self, o: &SolverStats) {
        self.attempts += o.attempts;
        self.successes += o.successes;
        self.iterations += o.iterations;
    }
}

struct Problem<'a> {
    m: &'a ConstraintManifold,
    s: &'a SearchSubspace,
    sph: Option<&'a SphereRestriction>,
    origin: DVector<f64>,
}

impl Problem<'_> {
    fn new<'a>(m: &'a ConstraintManifold, s: &'a SearchSubspace, sph: Option<&'a SphereRestriction>) -> Result<Problem<'a>> {
        if m.ambient_dim != s.ambient_dim() {
            return Err(Error::input("manifold and subspace dimensions differ"));
        }
        if s.dim < m.codim + usize::from(sph.is_some()) {
            return Err(Error::input(format!(
                "search dimension {} too small for codimension {}",
                s.dim, m.codim
            )));
        }
        let origin = match sph {
            Some(sp) => {
                if sp.center.len() != s.ambient_dim() || s.distance(&sp.center) > 1e-10 * (1.0 + sp.center.norm()) {
                    return Err(Error::input("sphere center must lie in the search subspace"));
                }
                sp.center.clone()
            }
            None => s.center.clone(),
        };
        Ok(Problem { m, s, sph, origin })
    }

    fn embed(&self, u: &DVector<f64>) -> DVector<f64> {
        let scale = self.sph.map_or(1.0, |sp| sp.radius);
        &self.origin + &self.s.basis * u * scale
    }

    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.m.eval_constraint(&self.embed(u))
    }

    /// Linearization in the free coordinates: tangent of the unit sphere
    /// for the restricted problem, all of R^d otherwise.
    fn linearization(&self, u: &DVector<f64>) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        let x = self.embed(u);
        let jx = self.m.jacobian(&x)?;
        let scale = self.sph.map_or(1.0, |sp| sp.radius);
        let ju = jx * &self.s.basis * scale;
        if self.sph.is_some() {
            let t = linalg::complement_of_vector(u);
            Ok((&ju * &t, Some(t)))
        } else {
            Ok((ju, None))
        }
    }

    fn start<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> DVector<f64> {
        let d = self.s.dim;
        match self.sph {
            Some(_) => linalg::unit_vector(d, rng),
            None => DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale),
        }
    }

    fn advance(&self, u: &DVector<f64>, du: &DVector<f64>) -> DVector<f64> {
        let v = u + du;
        if self.sph.is_some() {
            let n = v.norm();
            v / n
        } else {
            v
        }
    }

    fn membership_ok(&self, x: &DVector<f64>) -> bool {
        let scale = 1.0 + x.norm();
        if self.s.distance(x) > 1e-8 * scale {
            return false;
        }
        self.sph.is_none_or(|sp| sp.on_sphere(x, 1e-8))
    }
}

/// Minimum-norm least-squares solution of a·δ = b.
fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    if !(smax > 0.0) || !smax.is_finite() {
        return None;
    }
    let eps = smax * 1e-12 * a.nrows().max(a.ncols()) as f64;
    svd.solve(b, eps).ok()
}

// A start is abandoned after this many consecutive steps that each shrink
// the residual by less than SLOW_RATIO.
const SLOW_LIMIT: usize = 6;
const SLOW_RATIO: f64 = 0.9;

fn newton_from(p: &Problem, u0: DVector<f64>, cfg: &SolverConfig) -> Result<Option<(DVector<f64>, f64, usize)>> {
    let mut u = u0;
    let mut f = match p.residual(&u) {
        Ok(f) => f,
        Err(Error::Numerical(_) | Error::Degenerate(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut fnorm = f.norm();
    let mut slow = 0;
    for it in 0..cfg.max_iters {
        if fnorm < cfg.residual_tol {
            return Ok(Some((u, fnorm, it)));
        }
        let (a, tangent) = match p.linearization(&u) {
            Ok(v) => v,
            Err(Error::Numerical(_) | Error::Degenerate(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let Some(delta) = min_norm_solve(&a, &(-&f)) else {
            return Ok(None);
        };
        let step = match &tangent {
            Some(t) => t * delta,
            None => delta,
        };
        if !step.iter().all(|v| v.is_finite()) {
            return Ok(None);
        }
        let mut alpha = cfg.step_damping;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = p.advance(&u, &(&step * alpha));
            if let Ok(fc) = p.residual(&cand) {
                let nc = fc.norm();
                if nc.is_finite() && nc < fnorm {
                    slow = if nc > SLOW_RATIO * fnorm { slow + 1 } else { 0 };
                    u = cand;
                    f = fc;
                    fnorm = nc;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted || slow >= SLOW_LIMIT {
            return Ok(None);
        }
    }
    if fnorm < cfg.residual_tol {
        Ok(Some((u, fnorm, cfg.max_iters)))
    } else {
        Ok(None)
    }
}

fn single_start(p: &Problem, cfg: &SolverConfig, seed: u64) -> Result<Option<IntersectionPoint>> {
    let mut r = rng::from_seed(seed);
    let u0 = p.start(cfg.start_scale, &mut r);
    Ok(newton_from(p, u0, cfg)?.and_then(|(u, res, it)| {
        let x = p.embed(&u);
        p.membership_ok(&x).then_some(IntersectionPoint { x, residual_norm: res, iterations: it, start_seed: seed })
    }))
}

/// Newton from random starts (uniform on the unit sphere of S when a
/// sphere restriction is given) until one converges or `max_restarts`
/// starts have failed.
pub fn solve_intersection<R: Rng + ?Sized>(
    m: &ConstraintManifold,
    s: &SearchSubspace,
    sph: Option<&SphereRestriction>,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<Option<IntersectionPoint>> {
    let mut stats = SolverStats::default();
    solve_intersection_counted(m, s, sph, cfg, rng, &mut stats)
}

pub fn solve_intersection_counted<R: Rng + ?Sized>(
    m: &ConstraintManifold,
    s: &SearchSubspace,
    sph: Option<&SphereRestriction>,
    cfg: &SolverConfig,
    rng: &mut R,
    stats: &mut SolverStats,
) -> Result<Option<IntersectionPoint>> {
    let p = Problem::new(m, s, sph)?;
    for _ in 0..cfg.max_restarts {
        let seed: u64 = rng.random();
        stats.attempts += 1;
        if let Some(pt) = single_start(&p, cfg, seed)? {
            stats.successes += 1;
            stats.iterations += pt.iterations as u64;
            return Ok(Some(pt));
        }
    }
    Ok(None)
}

/// Result of a multi-start selection.
#[derive(Debug, Clone)]
pub struct Selection {
    pub point: IntersectionPoint,
    pub weight: f64,
    /// Sum of weights over all distinct points found.
    pub total_weight: f64,
    pub distinct: usize,
}

/// Distinct intersection points from `n_starts` independent solves;
/// solutions closer than `1e-6·r` are merged.
pub fn find_intersection_points<R: Rng + ?Sized>(
    m: &ConstraintManifold,
    s: &SearchSubspace,
    sph: Option<&SphereRestriction>,
    n_starts: usize,
    cfg: &SolverConfig,
    rng: &mut R,
    stats: &mut SolverStats,
) -> Result<Vec<IntersectionPoint>> {
    let p = Problem::new(m, s, sph)?;
    let base: u64 = rng.random();
    let found: Vec<Option<IntersectionPoint>> = (0..n_starts)
        .into_par_iter()
        .map(|i| single_start(&p, cfg, rng::derive(base, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let tol = dedup_tol(s, sph);
    let mut distinct: Vec<IntersectionPoint> = Vec::new();
    for pt in found.into_iter() {
        stats.attempts += 1;
        let Some(pt) = pt else { continue };
        stats.successes += 1;
        stats.iterations += pt.iterations as u64;
        if distinct.iter().all(|q| (&q.x - &pt.x).norm() >= tol) {
            distinct.push(pt);
        }
    }
    Ok(distinct)
}

pub fn dedup_tol(s: &SearchSubspace, sph: Option<&SphereRestriction>) -> f64 {
    1e-6 * sph.map_or(1.0 + s.center.norm(), |sp| sp.radius)
}

/// Run `n_starts` independent solves, merge duplicates, and pick one point
/// with probability proportional to `weight_fn`. Points whose weight is
/// undefined (degenerate) are dropped.
#[allow(clippy::too_many_arguments)]
pub fn sample_intersection_point<R, W>(
    m: &ConstraintManifold,
    s: &SearchSubspace,
    sph: Option<&SphereRestriction>,
    weight_fn: W,
    n_starts: usize,
    cfg: &SolverConfig,
    rng: &mut R,
    stats: &mut SolverStats,
) -> Result<Option<Selection>>
where
    R: Rng + ?Sized,
    W: Fn(&DVector<f64>) -> Result<f64>,
{
    let distinct = find_intersection_points(m, s, sph, n_starts, cfg, rng, stats)?;
    if distinct.is_empty() {
        return Ok(None);
    }
    let mut weighted = Vec::with_capacity(distinct.len());
    for pt in distinct {
        match weight_fn(&pt.x) {
            Ok(w) if w > 0.0 && w.is_finite() => weighted.push((pt, w)),
            Ok(_) | Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if weighted.is_empty() {
        return Ok(None);
    }
    let ws: Vec<f64> = weighted.iter().map(|(_, w)| *w).collect();
    let total: f64 = ws.iter().sum();
    let n_distinct = weighted.len();
    let idx = categorical(&ws, rng);
    let (point, weight) = weighted.swap_remove(idx);
    Ok(Some(Selection { point, weight, total_weight: total, distinct: n_distinct }))
}

/// Index drawn with probability proportional to `w`.
pub fn categorical<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry;
    use crate::manifold::{sphere, unit_circle};

    #[test]
    fn circle_equals_sphere() {
        let m = unit_circle();
        let s = SearchSubspace::new(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        let sph = SphereRestriction::new(DVector::zeros(2), 1.0).unwrap();
        let mut r = rng::from_seed(3);
        let pt = solve_intersection(&m, &s, Some(&sph), &SolverConfig::default(), &mut r).unwrap().unwrap();
        assert!((pt.x.norm() - 1.0).abs() < 1e-12);
        assert!(pt.residual_norm < 1e-10);
    }

    #[test]
    fn empty_intersection_not_found() {
        let m = sphere(DVector::from_vec(vec![5.0, 0.0]), 1.0).unwrap();
        let s = SearchSubspace::new(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        let sph = SphereRestriction::new(DVector::zeros(2), 0.1).unwrap();
        let mut r = rng::from_seed(3);
        assert!(solve_intersection(&m, &s, Some(&sph), &SolverConfig::default(), &mut r).unwrap().is_none());
    }

    #[test]
    fn great_circle_meets_offset_sphere() {
        let mut c = DVector::zeros(5);
        c[0] = 0.8;
        let m = sphere(c, 1.0).unwrap();
        let sph = SphereRestriction::new(DVector::zeros(5), 1.3).unwrap();
        let mut r = rng::from_seed(11);
        let mut hits = 0;
        for _ in 0..50 {
            let s = geometry::isotropic_subspace(5, 3, DVector::zeros(5), &mut r).unwrap();
            if let Some(pt) = solve_intersection(&m, &s, Some(&sph), &SolverConfig::default(), &mut r).unwrap() {
                hits += 1;
                assert!(m.residual_norm(&pt.x).unwrap() < 1e-10);
                assert!(s.contains(&pt.x, 1e-10));
                assert!(sph.on_sphere(&pt.x, 1e-10));
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn categorical_frequencies() {
        let mut r = rng::from_seed(5);
        let n = 100_000;
        let first = (0..n).filter(|_| categorical(&[2.0, 1.0], &mut r) == 0).count();
        assert!((first as f64 / n as f64 - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn unit_line_intersections_selected_by_weight() {
        // Vertical line x₁ = 0.6 meets the unit circle at (0.6, ±0.8).
        let m = unit_circle();
        let s = SearchSubspace::new(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), DVector::from_vec(vec![0.6, 0.0])).unwrap();
        let cfg = SolverConfig { n_starts: 16, ..Default::default() };
        let mut r = rng::from_seed(8);
        let mut stats = SolverStats::default();
        let mut upper = 0;
        let trials = 4000;
        for _ in 0..trials {
            let sel = sample_intersection_point(&m, &s, None, |x| Ok(if x[1] > 0.0 { 3.0 } else { 1.0 }), 16, &cfg, &mut r, &mut stats)
                .unwrap()
                .unwrap();
            assert_eq!(sel.distinct, 2);
            assert!((sel.total_weight - 4.0).abs() < 1e-12);
            if sel.point.x[1] > 0.0 {
                upper += 1;
            }
        }
        let p = upper as f64 / trials as f64;
        assert!((p - 0.75).abs() < 4.0 * (0.75f64 * 0.25 / trials as f64).sqrt(), "{p}");
    }

    #[test]
    fn deterministic_under_seed() {
        let m = sphere(DVector::from_vec(vec![0.5, 0.0, 0.0, 0.0]), 1.0).unwrap();
        let sph = SphereRestriction::new(DVector::zeros(4), 1.2).unwrap();
        let run = || {
            let mut r = rng::from_seed(21);
            let s = geometry::isotropic_subspace(4, 3, DVector::zeros(4), &mut r).unwrap();
            let mut st = SolverStats::default();
            sample_intersection_point(&m, &s, Some(&sph), |_| Ok(1.0), 6, &SolverConfig::default(), &mut r, &mut st)
                .unwrap()
                .map(|s| s.point.x)
        };
        assert_eq!(run(), run());
    }
}
