//! Experiments checking the geometric claims: the circle weight law,
//! Crofton identities, first- and second-order weighted volume estimates,
//! concentration of intersection volumes, the sphere-collection
//! comparison, curvature volume estimates and the algebraic volume bound.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::{self, SearchSubspace, Space, SphereRestriction};
use crate::linalg;
use crate::manifold::{self, TargetDensity};
use crate::rng;
use crate::solver::{self, SolverConfig, SolverStats};
use crate::stats::{self, Welford};
use crate::weights::{self, CurvatureForm, NormalizationCache, WeightConfig};

/// Traditional weight of a vertical line meeting the unit circle at
/// abscissa x: √(1 + x²/(1−x²)).
pub fn circle_traditional_weight(x: f64) -> f64 {
    (1.0 + x * x / (1.0 - x * x)).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct CircleReport {
    pub samples: usize,
    /// Mean over lines of the per-line circumference estimate
    /// 2·(w(x) + w(x)); the offset range [−1, 1] has length 2.
    pub mean_traditional: f64,
    pub std_error_traditional: f64,
    /// Running sample variance of w at each checkpoint.
    pub variance_trace: Vec<(usize, f64)>,
    pub first_order_variance: f64,
    /// Circumference from first-order weights with the calibrated constant.
    pub mean_first_order: f64,
    #[serde(skip)]
    pub abscissae: Vec<f64>,
}

/// Vertical lines x ~ U[−1, 1] through the unit circle.
pub fn circle_weight_experiment(samples: usize, seed: u64) -> Result<CircleReport> {
    if samples < 2 {
        return Err(Error::input("need at least two samples"));
    }
    let mut r = rng::from_seed(seed);
    let mut w = Welford::new();
    let mut est = Welford::new();
    let mut trace = Vec::new();
    let mut next = 10usize;
    let mut first_order = Welford::new();
    let mut xs = Vec::with_capacity(samples);
    for i in 1..=samples {
        let x: f64 = r.random_range(-1.0..1.0);
        xs.push(x);
        let wt = circle_traditional_weight(x);
        w.push(wt);
        est.push(2.0 * 2.0 * wt);
        first_order.push(1.0);
        if i == next || i == samples {
            trace.push((i, w.variance()));
            next *= 10;
        }
    }
    let c = geometry::crofton_constant(1, 1, 2, Space::Euclidean)?;
    Ok(CircleReport {
        samples,
        mean_traditional: est.mean,
        std_error_traditional: est.std_error(),
        variance_trace: trace,
        first_order_variance: first_order.variance(),
        mean_first_order: c.value * 2.0 * 2.0 * first_order.mean,
        abscissae: xs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CroftonReport {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub rho0: f64,
    pub constant: f64,
    pub mean_section: f64,
    pub estimate: f64,
    pub exact: f64,
    pub rel_err: f64,
}

/// c/Vol(S^d)·E[Vol(S ∩ M)] against Vol(M) for the subsphere
/// {x ∈ S^n : x₁ = ρ₀, x₂ = … = x_k = 0} (a great subsphere for ρ₀ = 0).
pub fn spherical_crofton_check(n: usize, d: usize, k: usize, rho0: f64, samples: usize, seed: u64) -> Result<CroftonReport> {
    let c = geometry::crofton_constant(d, k, n, Space::Spherical)?;
    if !(0.0..1.0).contains(&rho0) {
        return Err(Error::input("rho0 must lie in [0, 1)"));
    }
    let w = geometry::spherical_section_moments(n, d, k, rho0, samples, seed);
    let estimate = c.value / geometry::sphere_volume(d) * w.mean;
    let exact = geometry::spherical_reference_volume(n, k, rho0);
    Ok(CroftonReport {
        n,
        d,
        k,
        rho0,
        constant: c.value,
        mean_section: w.mean,
        estimate,
        exact,
        rel_err: (estimate - exact).abs() / exact,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FirstOrderReport {
    pub samples: usize,
    pub mean_points: f64,
    /// E[Σ w] against the density of x₃ at the level, 1/(2R).
    pub density_estimate: f64,
    pub density_exact: f64,
    /// Vol(sphere)·E[Σ w·|∇λ restricted|] against the circle length.
    pub volume_estimate: f64,
    pub volume_std_error: f64,
    pub volume_exact: f64,
    pub rel_err: f64,
    pub solver_success_rate: f64,
}

/// First-order weights on the sphere of radius `sphere_radius` in R³ for
/// the level set {x₃ = level}, a circle of radius √(R² − level²), using
/// random great circles and the intersection solver.
pub fn theorem1_check(sphere_radius: f64, level: f64, samples: usize, n_starts: usize, seed: u64) -> Result<FirstOrderReport> {
    if !(level.abs() < sphere_radius) {
        return Err(Error::input("level must cut the sphere"));
    }
    let (n, d) = (3usize, 2usize);
    let m = manifold::affine_plane(DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]), DVector::from_element(1, level))?;
    let sph = SphereRestriction::new(DVector::zeros(n), sphere_radius)?;
    let area = geometry::sphere_volume(2) * sphere_radius * sphere_radius;
    let f = TargetDensity::custom(move |_| -area.ln());
    let c = geometry::crofton_constant(d - 1, 1, n - 1, Space::Spherical)?;
    let rho = move |_: f64| sphere_radius.powi((n - d) as i32);
    let cfg = SolverConfig::default();
    let draws: Vec<(f64, f64, f64, SolverStats)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(seed, i as u64);
            let s = geometry::isotropic_subspace(n, d, DVector::zeros(n), &mut r)?;
            let mut ss = SolverStats::default();
            let pts = solver::find_intersection_points(&m, &s, Some(&sph), n_starts, &cfg, &mut r, &mut ss)?;
            let (mut wsum, mut vsum) = (0.0, 0.0);
            for p in &pts {
                let w = weights::first_order_weight(&m, &f, Some(&sph), &p.x, &c, &rho)?;
                let g = manifold::restricted_jacobian_det(&m, &p.x, &geometry::sphere_tangent_basis(&sph, &p.x)?)?;
                wsum += w;
                vsum += w * g;
            }
            Ok((pts.len() as f64, wsum, vsum * area, ss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pts = Welford::new();
    let mut dens = Welford::new();
    let mut vol = Welford::new();
    let mut ss = SolverStats::default();
    for (p, w, v, s) in &draws {
        pts.push(*p);
        dens.push(*w);
        vol.push(*v);
        ss.merge(s);
    }
    let exact = 2.0 * PI * (sphere_radius * sphere_radius - level * level).sqrt();
    Ok(FirstOrderReport {
        samples,
        mean_points: pts.mean,
        density_estimate: dens.mean,
        density_exact: 1.0 / (2.0 * sphere_radius),
        volume_estimate: vol.mean,
        volume_std_error: vol.std_error(),
        volume_exact: exact,
        rel_err: (vol.mean - exact).abs() / exact,
        solver_success_rate: ss.success_rate(),
    })
}

/// A point of S ∩ sphere(center, radius) for a Euclidean plane S, with the
/// distance ρ from the center to S; None when they miss.
pub fn plane_sphere_point(s: &SearchSubspace, center: &DVector<f64>, radius: f64) -> Option<(DVector<f64>, f64)> {
    let y = center - &s.center;
    let t = s.basis.transpose() * &y;
    let foot = &s.center + &s.basis * &t;
    let rho = (center - &foot).norm();
    if rho >= radius {
        return None;
    }
    let a = (radius * radius - rho * rho).sqrt();
    Some((foot + s.basis.column(0) * a, rho))
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvatureVolumeReport {
    pub n: usize,
    pub d: usize,
    pub radius: f64,
    pub samples: usize,
    pub normalization: f64,
    pub normalization_std_error: f64,
    pub normalization_exact: f64,
    pub crofton_constant: f64,
    pub estimate_analytic: f64,
    pub estimate_numeric: f64,
    pub exact: f64,
    pub rel_err_analytic: f64,
    pub rel_err_numeric: f64,
    pub hit_fraction: f64,
}

/// Curvature-weighted Crofton estimate of the volume of a sphere of radius
/// `radius` in R^n using kinematic d-planes whose offsets are uniform in
/// the (n−d)-ball of radius `radius` about the center. Each hit
/// contributes |Pf|·Vol(S ∩ M)/normalization, with |Pf| from the closed
/// form (analytic) or from the Hessian pipeline at one intersection point
/// (numeric).
pub fn theorem2_check(n: usize, d: usize, radius: f64, samples: usize, mc: usize, seed: u64) -> Result<CurvatureVolumeReport> {
    if !(2 <= d && d < n) {
        return Err(Error::input("need 2 <= d < n"));
    }
    let center = DVector::zeros(n);
    let m = manifold::sphere(center.clone(), radius)?;
    let wcfg = WeightConfig {
        scheme: weights::Scheme::Curvature,
        normalization_mc_samples: mc,
        ..Default::default()
    };
    let mut x0 = DVector::zeros(n);
    x0[0] = radius;
    let nz = weights::curvature_normalization_seeded(&m, &x0, d, None, &wcfg, mc, rng::labeled(seed, "normalization"))?;
    let c = geometry::crofton_constant(d, 1, n, Space::Euclidean)?;
    let mut_seed = rng::labeled(seed, "planes");
    let parts: Vec<(f64, f64, bool)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(mut_seed, i as u64);
            let s = geometry::kinematic_plane(n, d, &center, radius, &mut r)?;
            let Some((x, rho)) = plane_sphere_point(&s, &center, radius) else {
                return Ok((0.0, 0.0, false));
            };
            let a2 = radius * radius - rho * rho;
            let vol = geometry::sphere_volume(d - 1) * a2.powf((d - 1) as f64 / 2.0);
            let pf_exact = a2.powf(-((d - 1) as f64) / 2.0);
            let cf = weights::intersection_curvature(&m, &s, None, &x)?;
            Ok((wcfg.clamp(pf_exact) * vol, wcfg.clamp(cf.pfaffian_abs) * vol, true))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut a = Welford::new();
    let mut b = Welford::new();
    let mut hits = 0usize;
    for (u, v, h) in &parts {
        a.push(*u);
        b.push(*v);
        hits += usize::from(*h);
    }
    let measure = geometry::ball_volume(n - d, radius);
    let scale = c.value * measure / nz.value;
    let exact = geometry::sphere_volume(n - 1) * radius.powi((n - 1) as i32);
    let est_a = scale * a.mean;
    let est_b = scale * b.mean;
    Ok(CurvatureVolumeReport {
        n,
        d,
        radius,
        samples,
        normalization: nz.value,
        normalization_std_error: nz.std_error,
        normalization_exact: sphere_normalization_exact(n, d, radius),
        crofton_constant: c.value,
        estimate_analytic: est_a,
        estimate_numeric: est_b,
        exact,
        rel_err_analytic: (est_a - exact).abs() / exact,
        rel_err_numeric: (est_b - exact).abs() / exact,
        hit_fraction: hits as f64 / samples as f64,
    })
}

/// E_Q[|Pf|·det]/E_Q[det] for a sphere of radius R in R^n and d-planes
/// through a point of it, where det² ~ Beta(d/2, (n−d)/2) and
/// |Pf| = (R·det)^{−(d−1)}.
pub fn sphere_normalization_exact(n: usize, d: usize, radius: f64) -> f64 {
    let (a, b) = (d as f64 / 2.0, (n - d) as f64 / 2.0);
    // E[X^s] for X ~ Beta(a, b).
    let moment = |s: f64| (ln_gamma(a + s) - ln_gamma(a) + ln_gamma(a + b) - ln_gamma(a + b + s)).exp();
    let num = moment(-((d - 2) as f64) / 2.0);
    let den = moment(0.5);
    radius.powi(-((d - 1) as i32)) * num / den
}

/// exp of φ(α) from the concentration bound.
pub fn phi(alpha: f64) -> f64 {
    let ia = 1.0 / alpha;
    2f64.ln() + ia * ia.ln() - (0.5 * ia + 0.5) * (ia + 1.0).ln() - (0.5 * ia - 0.5) * (ia - 1.0).ln()
}

fn bound_common(n: usize, d: usize) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    (nf - df).powi(2) * ((nf - 1.0) * (nf / df - 1.0) / ((df - 1.0) * (nf + df - 2.0))).sqrt()
}

/// Lower bound k(α,d)·e^{dφ(α)} − 1.
pub fn concentration_lower_bound(n: usize, d: usize) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    let a = df / nf;
    let k = (2.0 * PI).powf(1.5) / 4f64.exp() * bound_common(n, d) * (-1.0 - (1.0 + a) / (1.0 + a - 2.0 / df)).exp();
    k * (df * phi(a)).exp() - 1.0
}

/// Upper bound K(α,d)·e^{dφ(α)} − 1.
pub fn concentration_upper_bound(n: usize, d: usize) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    let a = df / nf;
    let k = 3f64.exp() / (4.0 * PI * PI) * bound_common(n, d) * (-nf / (nf - 1.0) + 1.0).exp();
    k * (df * phi(a)).exp() - 1.0
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub samples: usize,
    /// Normalized variance among planes that hit the sphere.
    pub empirical_var: f64,
    /// Normalized variance including misses, with offsets uniform in a
    /// ball of radius `offset_radius`.
    pub unconditioned_var: f64,
    pub offset_radius: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub within_bounds: bool,
    pub unconditioned_within_bounds: bool,
}

/// Normalized intersection-volume variance of kinematic d-planes with the
/// unit sphere in R^n. Offsets are uniform in the unit ball of the
/// orthogonal complement (conditioned) or in a ball of radius
/// `offset_radius` (unconditioned).
pub fn theorem3_check(n: usize, d_list: &[usize], samples: usize, offset_radius: f64, seed: u64) -> Result<Vec<ConcentrationReport>> {
    let mut out = Vec::new();
    for &d in d_list {
        if !(2 <= d && d < n) {
            return Err(Error::input(format!("need 2 <= d < n, got d={d}, n={n}")));
        }
        let vol = |rho: f64| {
            if rho >= 1.0 {
                0.0
            } else {
                geometry::sphere_volume(d - 1) * (1.0 - rho * rho).powf((d - 1) as f64 / 2.0)
            }
        };
        let base = rng::derive(seed, d as u64);
        let cond = geometry::parallel_welford(samples, rng::labeled(base, "conditioned"), |r| {
            vol(linalg::ball_point(n - d, 1.0, r).norm())
        });
        let uncond = geometry::parallel_welford(samples, rng::labeled(base, "unconditioned"), |r| {
            vol(linalg::ball_point(n - d, offset_radius, r).norm())
        });
        let ev = cond.variance() / (cond.mean * cond.mean);
        let uv = uncond.variance() / (uncond.mean * uncond.mean);
        let lo = concentration_lower_bound(n, d);
        let hi = concentration_upper_bound(n, d);
        out.push(ConcentrationReport {
            n,
            d,
            alpha: d as f64 / n as f64,
            samples,
            empirical_var: ev,
            unconditioned_var: uv,
            offset_radius,
            lower_bound: lo,
            upper_bound: hi,
            within_bounds: lo <= ev && ev <= hi,
            unconditioned_within_bounds: lo <= uv && uv <= hi,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SphereCollectionReport {
    pub n: usize,
    pub d: usize,
    pub n_spheres: usize,
    pub radius: f64,
    pub samples: usize,
    pub mean_hits: f64,
    pub raw_mass: Vec<f64>,
    pub curvature_mass: Vec<f64>,
    pub raw_chi_square: f64,
    pub raw_p_value: f64,
    pub curvature_chi_square: f64,
    pub curvature_p_value: f64,
    /// Variance of per-hit credited volume divided by its mean, squared.
    pub raw_volume_variance: f64,
    pub curvature_volume_variance: f64,
    pub normalization: f64,
    pub degenerate: u64,
}

/// Centers with pairwise distances above 2·radius, drawn as Gaussian points
/// of spread `spread`.
pub fn separated_centers<R: Rng + ?Sized>(n: usize, count: usize, radius: f64, spread: f64, rng: &mut R) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let c = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal) * spread);
        if out.iter().all(|o| (o - &c).norm() > 2.0 * radius) {
            out.push(c);
        }
    }
    out
}

/// Each draw picks a sphere uniformly and a kinematic d-plane whose offset
/// from that sphere's center is uniform in the radius-R ball, so planes
/// follow the kinematic measure weighted by their hit count; each draw is
/// therefore weighted by 1/#hits. Every hit sphere is credited its raw
/// intersection volume or its curvature-weighted volume |Pf|·Vol/N. Masses
/// are scaled to total `samples` and tested for uniformity.
pub fn sphere_collection_experiment(
    n: usize,
    d: usize,
    n_spheres: usize,
    radius: f64,
    samples: usize,
    wcfg: &WeightConfig,
    seed: u64,
) -> Result<SphereCollectionReport> {
    if !(2 <= d && d <= n) || n_spheres == 0 {
        return Err(Error::input("need 2 <= d <= n and at least one sphere"));
    }
    let mut r = rng::from_seed(rng::labeled(seed, "centers"));
    let centers = separated_centers(n, n_spheres, radius, 2.0 * radius, &mut r);
    let m = manifold::sphere_collection(centers.clone(), radius)?;
    let cache = NormalizationCache::new();
    let norm_seed = rng::labeled(seed, "normalization");
    let mut x0 = centers[0].clone();
    x0[0] += radius;
    let nz = if d < n {
        cache.get(&m, &x0, d, None, wcfg, norm_seed)?.value
    } else {
        // A full-dimensional slice meets M at every orientation.
        weights::manifold_curvature(&m, &x0)?.pfaffian_abs
    };
    let draw_seed = rng::labeled(seed, "draws");
    type Hit = (usize, f64, f64);
    let draws: Vec<(Vec<Hit>, u64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(draw_seed, i as u64);
            let j = r.random_range(0..n_spheres);
            let s = geometry::kinematic_plane(n, d, &centers[j], radius, &mut r)?;
            let mut hits = Vec::new();
            let mut degenerate = 0;
            for (idx, c) in centers.iter().enumerate() {
                let Some((x, rho)) = plane_sphere_point(&s, c, radius) else { continue };
                let vol = geometry::sphere_volume(d - 1) * (radius * radius - rho * rho).powf((d - 1) as f64 / 2.0);
                match weights::intersection_curvature(&m, &s, None, &x) {
                    Ok(cf) => hits.push((idx, vol, wcfg.clamp(cf.pfaffian_abs) * vol / nz)),
                    Err(Error::Degenerate(_)) => degenerate += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((hits, degenerate))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut raw = vec![0.0; n_spheres];
    let mut curv = vec![0.0; n_spheres];
    let mut raw_w = Welford::new();
    let mut curv_w = Welford::new();
    let mut total_hits = 0usize;
    let mut degenerate = 0;
    for (hits, deg) in &draws {
        degenerate += deg;
        if hits.is_empty() {
            continue;
        }
        let share = 1.0 / hits.len() as f64;
        total_hits += hits.len();
        for &(idx, v, cv) in hits {
            raw[idx] += share * v;
            curv[idx] += share * cv;
            raw_w.push(v);
            curv_w.push(cv);
        }
    }
    let scale_to = |v: &mut Vec<f64>| {
        let t: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x *= samples as f64 / t);
    };
    scale_to(&mut raw);
    scale_to(&mut curv);
    let chi = |v: &[f64]| if v.len() > 1 { stats::chi_square_uniform(v) } else { (0.0, 1.0) };
    let (rc, rp) = chi(&raw);
    let (cc, cp) = chi(&curv);
    Ok(SphereCollectionReport {
        n,
        d,
        n_spheres,
        radius,
        samples,
        mean_hits: total_hits as f64 / samples as f64,
        raw_chi_square: rc,
        raw_p_value: rp,
        curvature_chi_square: cc,
        curvature_p_value: cp,
        raw_volume_variance: raw_w.variance() / (raw_w.mean * raw_w.mean),
        curvature_volume_variance: curv_w.variance() / (curv_w.mean * curv_w.mean),
        raw_mass: raw,
        curvature_mass: curv,
        normalization: nz,
        degenerate,
    })
}

/// (m−1)!! for odd m−1, the factor relating the Pfaffian of the curvature
/// form of a hypersurface to the determinant of its shape operator.
pub fn pfaffian_factor(m: usize) -> f64 {
    let mut f = 1.0;
    let mut j = m as i64 - 1;
    while j > 1 {
        f *= j as f64;
        j -= 2;
    }
    f
}

/// (2π)^{m/2}·χ / E[Pf(Ω)] from `samples` uniform points on an
/// m-dimensional hypersurface, where `sample` returns the curvature form at
/// a fresh uniform point.
pub fn volume_from_curvature<F>(sample: F, euler_char: i64, m: usize, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut rng::Rng) -> Result<CurvatureForm> + Sync,
{
    if euler_char == 0 {
        return Err(Error::input("Euler characteristic 0 leaves the estimator undefined"));
    }
    if m % 2 == 1 || m == 0 {
        return Err(Error::input("manifold dimension must be even and positive"));
    }
    let parts: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(seed, i as u64);
            let cf = sample(&mut r)?;
            Ok(pfaffian_factor(m) * cf.shape_matrix.determinant())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = stats::mean(&parts);
    if mean == 0.0 || !mean.is_finite() {
        return Err(Error::Estimation("mean Pfaffian is zero".into()));
    }
    Ok((2.0 * PI).powf(m as f64 / 2.0) * euler_char as f64 / mean)
}

/// Curvature sampler for the round m-sphere of the given radius: uniform
/// points, shape operator from the Hessian pipeline.
pub fn round_sphere_sampler(radius: f64, m: usize) -> Result<impl Fn(&mut rng::Rng) -> Result<CurvatureForm> + Sync> {
    let man = manifold::sphere(DVector::zeros(m + 1), radius)?;
    Ok(move |r: &mut rng::Rng| {
        let x = linalg::unit_vector(m + 1, r) * radius;
        let mut cf = weights::manifold_curvature(&man, &x)?;
        // Orient the shape operator by the inward normal so that convex
        // surfaces have positive curvature.
        cf.shape_matrix = -cf.shape_matrix;
        Ok(cf)
    })
}

/// Volume bound c·(1/b)·(s(s−1)^d/2)·Vol(S^n) for a degree-s algebraic
/// hypersurface of R^n whose curvature normalization is at least b.
pub fn algebraic_volume_bound(s: u32, d: usize, k1: usize, n: usize, b: f64, space: Space) -> Result<f64> {
    if k1 != 0 {
        return Err(Error::input("the bound holds for hypersurfaces only (k − 1 = 0)"));
    }
    if !(b > 0.0) || s < 1 {
        return Err(Error::input("need b > 0 and s >= 1"));
    }
    let c = geometry::crofton_constant(d, 1, n, space)?;
    let sf = s as f64;
    Ok(c.value / b * sf * (sf - 1.0).powi(d as i32) / 2.0 * geometry::sphere_volume(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_first_order_variance_is_zero() {
        let rep = circle_weight_experiment(1000, 1).unwrap();
        assert_eq!(rep.first_order_variance, 0.0);
    }

    #[test]
    fn phi_is_positive_and_bounds_ordered() {
        for &(n, d) in &[(50, 5), (50, 10), (50, 20), (400, 100)] {
            assert!(phi(d as f64 / n as f64) > 0.0);
            assert!(concentration_lower_bound(n, d) <= concentration_upper_bound(n, d));
        }
        assert_eq!(concentration_lower_bound(50, 10).to_bits(), concentration_lower_bound(50, 10).to_bits());
    }

    #[test]
    fn theorem3_rejects_d_at_least_n() {
        assert!(theorem3_check(10, &[10], 10, 1.25, 0).is_err());
        assert!(theorem3_check(10, &[1], 10, 1.25, 0).is_err());
    }

    #[test]
    fn affine_hyperplane_bound_is_zero() {
        assert_eq!(algebraic_volume_bound(1, 2, 0, 3, 1.0, Space::Spherical).unwrap(), 0.0);
    }

    #[test]
    fn bound_monotone() {
        let a = algebraic_volume_bound(2, 2, 0, 3, 1.0, Space::Spherical).unwrap();
        let b = algebraic_volume_bound(3, 2, 0, 3, 1.0, Space::Spherical).unwrap();
        let c = algebraic_volume_bound(3, 2, 0, 3, 2.0, Space::Spherical).unwrap();
        assert!(b > a && c < b);
    }

    #[test]
    fn euler_zero_rejected() {
        let s = round_sphere_sampler(1.0, 2).unwrap();
        assert!(volume_from_curvature(s, 0, 2, 10, 1).is_err());
    }

    #[test]
    fn pfaffian_factors() {
        assert_eq!(pfaffian_factor(2), 1.0);
        assert_eq!(pfaffian_factor(4), 3.0);
        assert_eq!(pfaffian_factor(6), 15.0);
    }

    #[test]
    fn curvature_volumes_agree_for_center_and_grazing_planes() {
        let (n, d, rad) = (8, 4, 1.0);
        let m = manifold::sphere(DVector::zeros(n), rad).unwrap();
        let cfg = WeightConfig::default();
        let mut out = Vec::new();
        for &rho in &[0.0, 0.999] {
            let mut c = DVector::zeros(n);
            c[n - 1] = rho;
            let s = SearchSubspace::new(DMatrix::identity(n, d), c).unwrap();
            let (x, got) = plane_sphere_point(&s, &DVector::zeros(n), rad).unwrap();
            assert!((got - rho).abs() < 1e-12);
            let cf = weights::intersection_curvature(&m, &s, None, &x).unwrap();
            let vol = geometry::sphere_volume(d - 1) * (rad * rad - rho * rho).powf((d - 1) as f64 / 2.0);
            out.push((vol, weights::volume_weight(&geometry::crofton_constant(d, 1, n, Space::Spherical).unwrap(), &cf, &cfg, 1.0) * vol));
        }
        assert!(out[0].0 / out[1].0 > 1e3);
        assert!((out[0].1 - out[1].1).abs() < 0.05 * out[0].1);
    }
}
