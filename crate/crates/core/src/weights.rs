//! Intersection weights.
//!
//! * traditional: f·ρ / |∇λ restricted to the tangent of S ∩ sphere|
//! * first order: (c/Vol_d(S))·f·ρ / |∇λ restricted to the sphere tangent|
//! * curvature: first order × clamp(|Pf|, a, b) / normalization
//!
//! The curvature normalization is E_Q[ŵ·det(P Q)] / E_Q[det(P Q)] over Haar
//! rotations Q of the search subspace about x, where P projects onto the
//! normal space of M. Dividing by E_Q[det] makes the normalization the mean
//! pre-weight among orientations that hit M at x, so a constant pre-weight
//! reproduces the first-order weight exactly.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, CroftonConstant, SearchSubspace, Space, SphereRestriction};
use crate::linalg;
use crate::manifold::{restricted_jacobian_det, ConstraintManifold, TargetDensity, RANK_TOL};
use crate::rng;
use crate::stats::Welford;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Traditional,
    FirstOrder,
    Curvature,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Traditional => "traditional",
            Scheme::FirstOrder => "first_order",
            Scheme::Curvature => "curvature",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub scheme: Scheme,
    pub cutoff_low: f64,
    pub cutoff_high: f64,
    pub normalization_mc_samples: usize,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            scheme: Scheme::FirstOrder,
            cutoff_low: 1e-8,
            cutoff_high: 1e8,
            normalization_mc_samples: 10_000,
        }
    }
}

impl WeightConfig {
    pub fn with_scheme(scheme: Scheme) -> Self {
        WeightConfig { scheme, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_low >= 0.0 && self.cutoff_low < self.cutoff_high) {
            return Err(Error::input("need 0 <= cutoff_low < cutoff_high"));
        }
        if self.scheme == Scheme::Curvature && self.normalization_mc_samples < 100 {
            return Err(Error::input("curvature scheme needs normalization_mc_samples >= 100"));
        }
        Ok(())
    }

    pub fn clamp(&self, w: f64) -> f64 {
        w.max(self.cutoff_low).min(self.cutoff_high)
    }
}

/// Second fundamental form of S ∩ M (∩ sphere) at a point, in an
/// orthonormal tangent basis.
#[derive(Debug, Clone)]
pub struct CurvatureForm {
    pub shape_matrix: DMatrix<f64>,
    pub pfaffian_abs: f64,
    /// Orthonormal n×m basis in which `shape_matrix` is expressed.
    pub tangent_basis: DMatrix<f64>,
}

/// c / Vol_d(S): Vol_d(S) is the unit d-sphere volume for great subspheres
/// and 1 for planes.
pub fn crofton_factor(c: &CroftonConstant) -> f64 {
    match c.space {
        Space::Spherical => c.value / geometry::sphere_volume(c.d),
        Space::Euclidean => c.value,
    }
}

fn density_and_step(
    f: &TargetDensity,
    sph: Option<&SphereRestriction>,
    x: &DVector<f64>,
    rho: &dyn Fn(f64) -> f64,
) -> Result<f64> {
    let fx = f.density(x);
    let step = match sph {
        Some(s) => rho((x - &s.center).norm()),
        None => 1.0,
    };
    let v = fx * step;
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::degenerate(format!("density factor {v:e} is not positive and finite")));
    }
    Ok(v)
}

/// Traditional weight: the Jacobian is restricted to the realized search
/// subspace (and sphere, when given).
pub fn traditional_weight(
    m: &ConstraintManifold,
    f: &TargetDensity,
    s: &SearchSubspace,
    sph: Option<&SphereRestriction>,
    x: &DVector<f64>,
    rho: &dyn Fn(f64) -> f64,
) -> Result<f64> {
    let base = density_and_step(f, sph, x, rho)?;
    if m.codim == 0 {
        return Ok(base);
    }
    let basis = match sph {
        Some(sp) => geometry::subspace_sphere_tangent_basis(s, sp, x)?,
        None => s.basis.clone(),
    };
    let det = restricted_jacobian_det(m, x, &basis)?;
    finite_positive(base / det)
}

/// First-order weight: the Jacobian is restricted to the whole sphere
/// tangent space (or left unrestricted without a sphere), independent of
/// the orientation of S.
pub fn first_order_weight(
    m: &ConstraintManifold,
    f: &TargetDensity,
    sph: Option<&SphereRestriction>,
    x: &DVector<f64>,
    c: &CroftonConstant,
    rho: &dyn Fn(f64) -> f64,
) -> Result<f64> {
    let base = density_and_step(f, sph, x, rho)? * crofton_factor(c);
    if m.codim == 0 {
        return finite_positive(base);
    }
    let det = match sph {
        Some(sp) => restricted_jacobian_det(m, x, &geometry::sphere_tangent_basis(sp, x)?)?,
        None => {
            let n = m.ambient_dim;
            restricted_jacobian_det(m, x, &DMatrix::identity(n, n))?
        }
    };
    finite_positive(base / det)
}

fn finite_positive(w: f64) -> Result<f64> {
    if w > 0.0 && w.is_finite() {
        Ok(w)
    } else {
        Err(Error::degenerate(format!("weight {w:e} is not positive and finite")))
    }
}

/// Dimension of S ∩ M (∩ sphere) for a codimension-k manifold.
pub fn intersection_dim(d: usize, k: usize, with_sphere: bool) -> isize {
    d as isize - k as isize - if with_sphere { 1 } else { 0 }
}

/// Curvature of the intersection S ∩ M (∩ sphere) at x, for manifolds that
/// are hypersurfaces inside the search slice (k = 1).
pub fn intersection_curvature(
    m: &ConstraintManifold,
    s: &SearchSubspace,
    sph: Option<&SphereRestriction>,
    x: &DVector<f64>,
) -> Result<CurvatureForm> {
    if m.codim != 1 {
        return Err(Error::input("curvature pre-weight is implemented for codimension-1 manifolds only"));
    }
    let frame = match sph {
        Some(sp) => geometry::subspace_sphere_tangent_basis(s, sp, x)?,
        None => s.basis.clone(),
    };
    let grad = m.jacobian(x)?.row(0).transpose();
    let g = frame.transpose() * &grad;
    let gn = g.norm();
    if !(gn > RANK_TOL * grad.norm()) {
        return Err(Error::degenerate("search slice is tangent to the manifold"));
    }
    let e = frame.ncols();
    if e == 1 {
        let n = m.ambient_dim;
        return Ok(CurvatureForm {
            shape_matrix: DMatrix::zeros(0, 0),
            pfaffian_abs: 1.0,
            tangent_basis: DMatrix::zeros(n, 0),
        });
    }
    let t = &frame * linalg::complement_of_vector(&g);
    let hess = m.hessians(x)?.remove(0);
    let mut shape = -(t.transpose() * &hess * &t);
    if let Some(sp) = sph {
        // Normal of S ∩ sphere inside S.
        let y = &s.basis * (s.basis.transpose() * (x - &sp.center));
        let corr = grad.dot(&y) / y.norm_squared();
        for i in 0..shape.nrows() {
            shape[(i, i)] += corr;
        }
    }
    shape /= gn;
    let shape = (&shape + shape.transpose()) * 0.5;
    let pfaffian_abs = shape.determinant().abs();
    if !pfaffian_abs.is_finite() {
        return Err(Error::numerical("non-finite curvature"));
    }
    Ok(CurvatureForm { shape_matrix: shape, pfaffian_abs, tangent_basis: t })
}

/// Curvature of M itself as a hypersurface of R^n at x (Gauss map).
pub fn manifold_curvature(m: &ConstraintManifold, x: &DVector<f64>) -> Result<CurvatureForm> {
    let n = m.ambient_dim;
    let s = SearchSubspace { basis: DMatrix::identity(n, n), center: x.clone(), dim: n };
    intersection_curvature(m, &s, None, x)
}

#[derive(Debug, Clone, Copy)]
pub struct Normalization {
    /// E_Q[ŵ det] / E_Q[det]
    pub value: f64,
    pub std_error: f64,
    /// E_Q[ŵ det] alone.
    pub weighted_det_mean: f64,
    /// E_Q[det] alone.
    pub det_mean: f64,
    pub degenerate: u64,
    pub samples: usize,
}

/// Monte Carlo normalization at x over `mc` Haar rotations of a
/// d-dimensional search subspace about x.
pub fn curvature_normalization<R: Rng + ?Sized>(
    m: &ConstraintManifold,
    x: &DVector<f64>,
    d: usize,
    sph: Option<&SphereRestriction>,
    cfg: &WeightConfig,
    mc: usize,
    rng: &mut R,
) -> Result<Normalization> {
    let seed: u64 = rng.random();
    curvature_normalization_seeded(m, x, d, sph, cfg, mc, seed)
}

pub fn curvature_normalization_seeded(
    m: &ConstraintManifold,
    x: &DVector<f64>,
    d: usize,
    sph: Option<&SphereRestriction>,
    cfg: &WeightConfig,
    mc: usize,
    seed: u64,
) -> Result<Normalization> {
    use rayon::prelude::*;
    if mc < 100 {
        return Err(Error::input("normalization needs mc >= 100"));
    }
    let n = m.ambient_dim;
    if d > n || d <= m.codim {
        return Err(Error::input("normalization needs codim < d <= n"));
    }
    let (frame, radial, dq) = match sph {
        Some(sp) => (geometry::sphere_tangent_basis(sp, x)?, Some(sp.normal(x)), d - 1),
        None => (DMatrix::identity(n, n), None, d),
    };
    let a = frame.ncols();
    let grad = m.jacobian(x)?;
    let normal = linalg::orthonormal_span(&(frame.transpose() * grad.transpose()), 1e-12);
    if normal.ncols() < m.codim {
        return Err(Error::degenerate("manifold normal space degenerates inside the frame"));
    }
    const CHUNK: usize = 256;
    let chunks = mc.div_ceil(CHUNK);
    let parts: Vec<(Welford, Welford, Vec<(f64, f64)>, u64)> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut r = rng::substream(seed, ci as u64);
            let mut wd = Welford::new();
            let mut dd = Welford::new();
            let mut pairs = Vec::new();
            let mut degenerate = 0;
            for _ in 0..CHUNK.min(mc - ci * CHUNK) {
                let q = linalg::haar_columns(a, dq, &mut r);
                let det = linalg::gdet(&(normal.transpose() * &q));
                let basis_q = &frame * &q;
                let sub = match &radial {
                    Some(u) => {
                        let mut cols = Vec::with_capacity(d);
                        cols.push(u.clone());
                        cols.extend((0..dq).map(|j| basis_q.column(j).into_owned()));
                        SearchSubspace { basis: DMatrix::from_columns(&cols), center: sph.unwrap().center.clone(), dim: d }
                    }
                    None => SearchSubspace { basis: basis_q, center: x.clone(), dim: d },
                };
                match intersection_curvature(m, &sub, sph, x) {
                    Ok(cf) => {
                        let w = cfg.clamp(cf.pfaffian_abs);
                        wd.push(w * det);
                        dd.push(det);
                        pairs.push((w * det, det));
                    }
                    Err(Error::Degenerate(_)) => degenerate += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((wd, dd, pairs, degenerate))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut wd = Welford::new();
    let mut dd = Welford::new();
    let mut degenerate = 0;
    for p in &parts {
        wd = wd.merge(&p.0);
        dd = dd.merge(&p.1);
        degenerate += p.3;
    }
    if wd.count == 0 || !(dd.mean > 0.0) {
        return Err(Error::Estimation("all normalization draws were degenerate".into()));
    }
    let value = wd.mean / dd.mean;
    // Delta-method standard error of the ratio estimator.
    let mut resid = Welford::new();
    for p in &parts {
        for &(u, v) in &p.2 {
            resid.push(u - value * v);
        }
    }
    let std_error = resid.std_error() / dd.mean;
    Ok(Normalization {
        value,
        std_error,
        weighted_det_mean: wd.mean,
        det_mean: dd.mean,
        degenerate,
        samples: wd.count as usize,
    })
}

/// Cache of normalizations for homogeneous manifolds without a sphere
/// restriction, where the normalization does not depend on x.
#[derive(Debug, Default)]
pub struct NormalizationCache {
    map: Mutex<HashMap<(String, usize), Normalization>>,
}

impl NormalizationCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Normalization at x, reusing a cached value when the manifold is
    /// homogeneous and no sphere restriction applies.
    pub fn get(
        &self,
        m: &ConstraintManifold,
        x: &DVector<f64>,
        d: usize,
        sph: Option<&SphereRestriction>,
        cfg: &WeightConfig,
        seed: u64,
    ) -> Result<Normalization> {
        let cacheable = m.homogeneous && sph.is_none();
        let key = (m.name.clone(), d);
        if cacheable {
            if let Some(v) = self.map.lock().unwrap().get(&key) {
                return Ok(*v);
            }
        }
        let v = curvature_normalization_seeded(m, x, d, sph, cfg, cfg.normalization_mc_samples, seed)?;
        if cacheable {
            self.map.lock().unwrap().entry(key).or_insert(v);
            return Ok(*self.map.lock().unwrap().get(&(m.name.clone(), d)).unwrap());
        }
        Ok(v)
    }
}

/// Curvature weight for sampling: first-order weight × clamped pre-weight /
/// normalization.
#[allow(clippy::too_many_arguments)]
pub fn curvature_weight(
    m: &ConstraintManifold,
    f: &TargetDensity,
    s: &SearchSubspace,
    sph: Option<&SphereRestriction>,
    x: &DVector<f64>,
    cfg: &WeightConfig,
    c: &CroftonConstant,
    rho: &dyn Fn(f64) -> f64,
    normalization: f64,
) -> Result<f64> {
    let fo = first_order_weight(m, f, sph, x, c, rho)?;
    let cf = intersection_curvature(m, s, sph, x)?;
    finite_positive(fo * cfg.clamp(cf.pfaffian_abs) / normalization)
}

/// Weight of the volume element of S ∩ M for volume estimation with the
/// generalized Crofton formula: (c/Vol_d(S)) × clamp(|Pf|) / normalization.
pub fn volume_weight(c: &CroftonConstant, cf: &CurvatureForm, cfg: &WeightConfig, normalization: f64) -> f64 {
    crofton_factor(c) * cfg.clamp(cf.pfaffian_abs) / normalization
}
