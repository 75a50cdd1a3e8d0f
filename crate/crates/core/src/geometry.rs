//! Isotropic random subspaces, sphere restrictions and Crofton constants.
//!
//! Spherical constants have the closed form
//! c = Vol(S^{n−k})·Vol(S^d)/Vol(S^{d−k}). Euclidean constants are obtained
//! only by Monte Carlo calibration against a unit reference sphere, with the
//! kinematic measure normalized as (Haar probability on orientations) ×
//! (Lebesgue measure on the orthogonal offset), so that
//! Vol(M) = c · ∫ Vol(S ∩ M) dμ(S).

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::stats::Welford;

/// d-dimensional subspace through `center` with orthonormal basis columns.
#[derive(Debug, Clone)]
pub struct SearchSubspace {
    pub basis: DMatrix<f64>,
    pub center: DVector<f64>,
    pub dim: usize,
}

impl SearchSubspace {
    pub fn new(basis: DMatrix<f64>, center: DVector<f64>) -> Result<Self> {
        if basis.nrows() != center.len() {
            return Err(Error::input("subspace basis and center dimensions differ"));
        }
        let d = basis.ncols();
        let err = (basis.transpose() * &basis - DMatrix::identity(d, d)).amax();
        if err > 1e-10 {
            return Err(Error::input(format!("subspace basis not orthonormal (err {err:e})")));
        }
        Ok(SearchSubspace { basis, center, dim: d })
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// center + basis·t
    pub fn embed(&self, t: &DVector<f64>) -> DVector<f64> {
        &self.center + &self.basis * t
    }

    /// Distance from x to the affine subspace.
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        let y = x - &self.center;
        let p = &self.basis * (self.basis.transpose() * &y);
        (y - p).norm()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.distance(x) <= tol * (1.0 + x.norm())
    }
}

/// Sphere of radius `radius` around `center`.
#[derive(Debug, Clone)]
pub struct SphereRestriction {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl SphereRestriction {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::input("sphere radius must be positive"));
        }
        Ok(SphereRestriction { center, radius })
    }

    /// Outward unit normal at x.
    pub fn normal(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.center) / self.radius
    }

    pub fn on_sphere(&self, x: &DVector<f64>, rel_tol: f64) -> bool {
        ((x - &self.center).norm() - self.radius).abs() <= rel_tol * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Spherical,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CroftonConstant {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub space: Space,
    pub value: f64,
    /// Monte Carlo standard error; zero for closed forms.
    pub std_error: f64,
}

/// Vol(S^m) = 2π^{(m+1)/2}/Γ((m+1)/2), the volume of the unit m-sphere.
pub fn sphere_volume(m: usize) -> f64 {
    let a = (m as f64 + 1.0) / 2.0;
    (std::f64::consts::LN_2 + a * std::f64::consts::PI.ln() - ln_gamma(a)).exp()
}

/// Volume of the m-ball of the given radius.
pub fn ball_volume(m: usize, radius: f64) -> f64 {
    if m == 0 {
        return 1.0;
    }
    let a = m as f64 / 2.0;
    (a * std::f64::consts::PI.ln() - ln_gamma(a + 1.0)).exp() * radius.powi(m as i32)
}

pub fn isotropic_subspace<R: Rng + ?Sized>(n: usize, d: usize, center: DVector<f64>, rng: &mut R) -> Result<SearchSubspace> {
    if d == 0 || d > n || center.len() != n {
        return Err(Error::input(format!("isotropic subspace needs 1 <= d <= n = len(center), got d={d}, n={n}")));
    }
    let basis = linalg::haar_columns(n, d, rng);
    Ok(SearchSubspace { basis, center, dim: d })
}

pub fn haar_orthogonal_columns<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if d > n {
        return Err(Error::input(format!("need d <= n, got d={d}, n={n}")));
    }
    Ok(linalg::haar_columns(n, d, rng))
}

/// Kinematic-measure affine d-plane whose orthogonal offset from `around`
/// is uniform in the (n−d)-ball of radius `radius`.
pub fn kinematic_plane<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    around: &DVector<f64>,
    radius: f64,
    rng: &mut R,
) -> Result<SearchSubspace> {
    if d == 0 || d > n {
        return Err(Error::input("kinematic plane needs 1 <= d <= n"));
    }
    let q = linalg::haar_columns(n, n, rng);
    let basis = q.columns(0, d).into_owned();
    let comp = q.columns(d, n - d).into_owned();
    let z = linalg::ball_point(n - d, radius, rng);
    let center = around + comp * z;
    Ok(SearchSubspace { basis, center, dim: d })
}

/// Orthonormal basis of the tangent space of the sphere at x.
pub fn sphere_tangent_basis(s: &SphereRestriction, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    if !s.on_sphere(x, 1e-8) {
        return Err(Error::input(format!(
            "point at distance {} from center is not on sphere of radius {}",
            (x - &s.center).norm(),
            s.radius
        )));
    }
    Ok(linalg::complement_of_vector(&s.normal(x)))
}

/// Orthonormal basis of span(S) ∩ T_x(sphere), an n×(d−1) matrix.
pub fn subspace_sphere_tangent_basis(sub: &SearchSubspace, s: &SphereRestriction, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    if !s.on_sphere(x, 1e-8) {
        return Err(Error::input("point is not on the sphere"));
    }
    if !sub.contains(x, 1e-8) {
        return Err(Error::input("point is not in the search subspace"));
    }
    let y = sub.basis.transpose() * s.normal(x);
    if y.norm() < 1e-10 {
        return Err(Error::degenerate("search subspace is tangent to the sphere"));
    }
    if sub.dim == 1 {
        return Ok(DMatrix::zeros(sub.ambient_dim(), 0));
    }
    Ok(&sub.basis * linalg::complement_of_vector(&y))
}

/// Closed-form spherical constant, or the calibrated Euclidean constant.
pub fn crofton_constant(d: usize, k: usize, n: usize, space: Space) -> Result<CroftonConstant> {
    if !(k <= d && d <= n) || n == 0 {
        return Err(Error::input(format!("need k <= d <= n, got d={d}, k={k}, n={n}")));
    }
    match space {
        Space::Spherical => Ok(CroftonConstant {
            d,
            k,
            n,
            space,
            value: sphere_volume(n - k) * sphere_volume(d) / sphere_volume(d - k),
            std_error: 0.0,
        }),
        Space::Euclidean => euclidean_constant_cached(d, k, n),
    }
}

/// Draw count and seed of the built-in Euclidean calibration.
pub const EUCLIDEAN_CALIBRATION_SAMPLES: usize = 400_000;
const EUCLIDEAN_CALIBRATION_SEED: u64 = 0x0C40_F7A1_1B2A_0001;

fn euclidean_constant_cached(d: usize, k: usize, n: usize) -> Result<CroftonConstant> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize), CroftonConstant>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(c) = cache.lock().unwrap().get(&(d, k, n)) {
        return Ok(*c);
    }
    let c = calibrate_crofton_seeded(d, k, n, Space::Euclidean, EUCLIDEAN_CALIBRATION_SAMPLES, EUCLIDEAN_CALIBRATION_SEED)?;
    cache.lock().unwrap().insert((d, k, n), c);
    Ok(c)
}

/// Intersection volume of a random d-plane (Euclidean) with the unit
/// (n−k)-sphere lying in the first n−k+1 coordinates.
fn euclidean_reference_section(plane: &SearchSubspace, k: usize) -> f64 {
    let n = plane.ambient_dim();
    let d = plane.dim;
    let m = n - k;
    let b = &plane.basis;
    let p = &plane.center;
    // Constrain the trailing k−1 coordinates to vanish.
    let (q0, dirs) = if k > 1 {
        let be = b.rows(m + 1, k - 1).into_owned();
        let pe = p.rows(m + 1, k - 1).into_owned();
        let gram = &be * be.transpose();
        let Some(chol) = gram.cholesky() else {
            return 0.0;
        };
        let t0 = be.transpose() * chol.solve(&(-pe));
        let (null, rank) = linalg::kernel_in_frame(&be, &DMatrix::identity(d, d), 1e-12);
        if rank < k - 1 {
            return 0.0;
        }
        (p + b * t0, b * null)
    } else {
        (p.clone(), b.clone())
    };
    let proj = dirs.transpose() * &q0;
    let dist2 = (q0.norm_squared() - proj.norm_squared()).max(0.0);
    if dist2 >= 1.0 {
        return 0.0;
    }
    let dim = d - k;
    sphere_volume(dim) * (1.0 - dist2).powf(dim as f64 / 2.0)
}

/// Intersection volume of the great d-subsphere span(B) ∩ S^n with the
/// subsphere {x ∈ S^n : x_1 = ρ₀, x_2 = … = x_k = 0}.
pub fn spherical_reference_section(b: &DMatrix<f64>, k: usize, rho0: f64) -> f64 {
    let d = b.ncols() - 1;
    let mk = b.rows(0, k).into_owned();
    let mut a = DVector::zeros(k);
    a[0] = rho0;
    let gram = &mk * mk.transpose();
    let Some(chol) = gram.cholesky() else {
        return 0.0;
    };
    let t0 = mk.transpose() * chol.solve(&a);
    let r2 = 1.0 - t0.norm_squared();
    if r2 <= 0.0 {
        return 0.0;
    }
    sphere_volume(d - k) * r2.powf((d - k) as f64 / 2.0)
}

/// Volume of the reference subsphere used by `spherical_reference_section`.
pub fn spherical_reference_volume(n: usize, k: usize, rho0: f64) -> f64 {
    sphere_volume(n - k) * (1.0 - rho0 * rho0).powf((n - k) as f64 / 2.0)
}

/// Mean and standard error of Vol(S ∩ M) for the spherical reference
/// subsphere in S^n ⊂ R^{n+1}, with `samples` random great d-subspheres.
pub fn spherical_section_moments(n: usize, d: usize, k: usize, rho0: f64, samples: usize, seed: u64) -> Welford {
    parallel_welford(samples, seed, |rng| {
        let b = linalg::haar_columns(n + 1, d + 1, rng);
        spherical_reference_section(&b, k, rho0)
    })
}

/// Parallel Monte Carlo mean over `samples` draws with per-chunk substreams.
pub fn parallel_welford<F>(samples: usize, seed: u64, f: F) -> Welford
where
    F: Fn(&mut rng::Rng) -> f64 + Sync,
{
    use rayon::prelude::*;
    const CHUNK: usize = 4096;
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<Welford> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::substream(seed, c as u64);
            let mut w = Welford::new();
            let len = CHUNK.min(samples - c * CHUNK);
            for _ in 0..len {
                w.push(f(&mut r));
            }
            w
        })
        .collect();
    parts.iter().fold(Welford::new(), |acc, w| acc.merge(w))
}

/// Monte Carlo estimate of the Crofton constant from a reference manifold
/// of known volume: a subsphere at height 1/2 for the spherical case and
/// the unit (n−k)-sphere for the Euclidean case.
pub fn calibrate_crofton<R: Rng + ?Sized>(d: usize, k: usize, n: usize, space: Space, samples: usize, rng: &mut R) -> Result<CroftonConstant> {
    let seed: u64 = rng.random();
    calibrate_crofton_seeded(d, k, n, space, samples, seed)
}

fn calibrate_crofton_seeded(d: usize, k: usize, n: usize, space: Space, samples: usize, seed: u64) -> Result<CroftonConstant> {
    if !(1 <= k && k <= d && d <= n) {
        return Err(Error::input(format!("calibration needs 1 <= k <= d <= n, got d={d}, k={k}, n={n}")));
    }
    if samples < 2 {
        return Err(Error::input("calibration needs at least two samples"));
    }
    let (stats, volume, scale) = match space {
        Space::Spherical => {
            let rho0 = 0.5;
            let w = spherical_section_moments(n, d, k, rho0, samples, seed);
            (w, spherical_reference_volume(n, k, rho0), sphere_volume(d))
        }
        Space::Euclidean => {
            let origin = DVector::zeros(n);
            let w = parallel_welford(samples, seed, |r| {
                let plane = kinematic_plane(n, d, &origin, 1.0, r).expect("valid dims");
                euclidean_reference_section(&plane, k)
            });
            (w, sphere_volume(n - k), 1.0 / ball_volume(n - d, 1.0))
        }
    };
    if !(stats.mean > 0.0) {
        return Err(Error::Estimation("no intersections observed during calibration".into()));
    }
    let value = volume * scale / stats.mean;
    let std_error = value * stats.std_error() / stats.mean;
    Ok(CroftonConstant { d, k, n, space, value, std_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn sphere_volumes() {
        assert!((sphere_volume(0) - 2.0).abs() < 1e-14);
        assert!((sphere_volume(1) - 2.0 * PI).abs() < 1e-13);
        assert!((sphere_volume(2) - 4.0 * PI).abs() < 1e-13);
        assert!((sphere_volume(4) - 8.0 * PI * PI / 3.0).abs() < 1e-12);
        assert!((ball_volume(3, 2.0) - 4.0 / 3.0 * PI * 8.0).abs() < 1e-12);
    }

    #[test]
    fn spherical_constant_point_case() {
        let c = crofton_constant(1, 1, 2, Space::Spherical).unwrap();
        assert!((c.value - 2.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn spherical_constants_positive() {
        for n in 1..=64 {
            for d in 1..=n {
                for k in 1..=d {
                    let c = crofton_constant(d, k, n, Space::Spherical).unwrap();
                    assert!(c.value > 0.0 && c.value.is_finite());
                }
            }
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(crofton_constant(2, 3, 4, Space::Spherical).is_err());
        let mut r = rng::from_seed(0);
        assert!(isotropic_subspace(3, 4, DVector::zeros(3), &mut r).is_err());
    }

    #[test]
    fn full_dimensional_subspace() {
        let mut r = rng::from_seed(3);
        let s = isotropic_subspace(4, 4, DVector::zeros(4), &mut r).unwrap();
        let p = &s.basis * s.basis.transpose();
        assert!((p - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn sphere_tangent_examples() {
        let s = SphereRestriction::new(DVector::zeros(4), 1.0).unwrap();
        let e1 = DVector::from_row_slice(&[1.0, 0.0, 0.0, 0.0]);
        let t = sphere_tangent_basis(&s, &e1).unwrap();
        assert_eq!(t.ncols(), 3);
        assert!(t.row(0).amax() < 1e-15);
        assert!(sphere_tangent_basis(&s, &(e1 * 2.0)).is_err());
    }

    #[test]
    fn subspace_sphere_tangent_examples() {
        let s = SphereRestriction::new(DVector::zeros(3), 1.0).unwrap();
        let basis = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let sub = SearchSubspace::new(basis, DVector::zeros(3)).unwrap();
        let x = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let t = subspace_sphere_tangent_basis(&sub, &s, &x).unwrap();
        assert_eq!(t.ncols(), 1);
        assert!((t[(1, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn euclidean_reference_full_space() {
        let plane = SearchSubspace::new(DMatrix::identity(3, 3), DVector::zeros(3)).unwrap();
        assert!((euclidean_reference_section(&plane, 1) - 4.0 * PI).abs() < 1e-12);
    }
}
