//! Implicit constraint manifolds {x : λ(x) = c} and target densities.
//!
//! A manifold is a bundle of oracles over R^n: the constraint value, and
//! optionally its Jacobian and per-constraint Hessians. Missing derivative
//! oracles fall back to central finite differences.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub type ValueFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync>;
pub type HessianFn = Arc<dyn Fn(&DVector<f64>) -> Result<Vec<DMatrix<f64>>> + Send + Sync>;

/// Smallest singular value must exceed this fraction of the largest singular
/// value of the full Jacobian.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Clone)]
pub struct ConstraintManifold {
    pub name: String,
    pub ambient_dim: usize,
    pub codim: usize,
    pub constraint_value: DVector<f64>,
    value_oracle: ValueFn,
    jacobian_oracle: Option<JacobianFn>,
    hessian_oracle: Option<HessianFn>,
    /// Set when every point has the same local geometry (one sphere, say),
    /// which lets curvature normalizations be cached.
    pub homogeneous: bool,
}

impl fmt::Debug for ConstraintManifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintManifold")
            .field("name", &self.name)
            .field("ambient_dim", &self.ambient_dim)
            .field("codim", &self.codim)
            .field("constraint_value", &self.constraint_value.as_slice())
            .field("analytic_jacobian", &self.jacobian_oracle.is_some())
            .field("analytic_hessian", &self.hessian_oracle.is_some())
            .finish()
    }
}

impl ConstraintManifold {
    /// A codimension-k manifold given by its value oracle. `codim` may be 0
    /// for the full space.
    pub fn new(
        name: impl Into<String>,
        ambient_dim: usize,
        constraint_value: DVector<f64>,
        value: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        let codim = constraint_value.len();
        if ambient_dim == 0 || codim > ambient_dim {
            return Err(Error::input(format!(
                "need 0 <= codim <= ambient_dim, got codim {codim}, ambient {ambient_dim}"
            )));
        }
        Ok(ConstraintManifold {
            name: name.into(),
            ambient_dim,
            codim,
            constraint_value,
            value_oracle: Arc::new(value),
            jacobian_oracle: None,
            hessian_oracle: None,
            homogeneous: false,
        })
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian_oracle = Some(Arc::new(jac));
        self
    }

    pub fn with_hessian(
        mut self,
        hess: impl Fn(&DVector<f64>) -> Result<Vec<DMatrix<f64>>> + Send + Sync + 'static,
    ) -> Self {
        self.hessian_oracle = Some(Arc::new(hess));
        self
    }

    pub fn homogeneous(mut self, flag: bool) -> Self {
        self.homogeneous = flag;
        self
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian_oracle.is_some()
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.ambient_dim {
            return Err(Error::input(format!(
                "point has dimension {}, manifold lives in R^{}",
                x.len(),
                self.ambient_dim
            )));
        }
        Ok(())
    }

    /// λ(x).
    pub fn value(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        Ok((self.value_oracle)(x))
    }

    /// Residual λ(x) − c.
    pub fn eval_constraint(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.value(x)? - &self.constraint_value)
    }

    pub fn residual_norm(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.eval_constraint(x)?.norm())
    }

    /// ∇λ(x) as a k×n matrix, analytic when available.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let j = match &self.jacobian_oracle {
            Some(f) => f(x)?,
            None => self.fd_jacobian(x)?,
        };
        if j.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite Jacobian entry"));
        }
        Ok(j)
    }

    /// Central finite-difference Jacobian with step max(1e-6, 1e-7·‖x‖).
    pub fn fd_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let h = fd_step(x);
        let mut j = DMatrix::zeros(self.codim, self.ambient_dim);
        let mut xp = x.clone();
        for i in 0..self.ambient_dim {
            xp[i] = x[i] + h;
            let fp = (self.value_oracle)(&xp);
            xp[i] = x[i] - h;
            let fm = (self.value_oracle)(&xp);
            xp[i] = x[i];
            j.set_column(i, &((fp - fm) / (2.0 * h)));
        }
        Ok(j)
    }

    /// Second partials of each constraint, as k symmetric n×n matrices.
    pub fn hessians(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check_dim(x)?;
        match &self.hessian_oracle {
            Some(f) => f(x),
            None => self.fd_hessians(x),
        }
    }

    /// Hessians from central differences of the Jacobian, symmetrized.
    pub fn fd_hessians(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        let n = self.ambient_dim;
        let h = fd_step(x).max(1e-5);
        let mut out = vec![DMatrix::zeros(n, n); self.codim];
        let mut xp = x.clone();
        for i in 0..n {
            xp[i] = x[i] + h;
            let jp = self.jacobian(&xp)?;
            xp[i] = x[i] - h;
            let jm = self.jacobian(&xp)?;
            xp[i] = x[i];
            for (r, hr) in out.iter_mut().enumerate() {
                for c in 0..n {
                    hr[(i, c)] = (jp[(r, c)] - jm[(r, c)]) / (2.0 * h);
                }
            }
        }
        for hr in out.iter_mut() {
            let t = hr.transpose();
            *hr = (&*hr + t) * 0.5;
        }
        Ok(out)
    }

    /// Whether ∇λ(x) has full row rank under the spectral rank tolerance.
    pub fn full_rank_at(&self, x: &DVector<f64>) -> Result<bool> {
        if self.codim == 0 {
            return Ok(true);
        }
        let sv = linalg::singular_values(&self.jacobian(x)?);
        let smax = sv.amax();
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(smax > 0.0 && smin > RANK_TOL * smax)
    }
}

pub fn fd_step(x: &DVector<f64>) -> f64 {
    (1e-7 * x.norm()).max(1e-6)
}

/// Generalized determinant of ∇λ(x)·basis for an orthonormal n×p basis.
/// Fails with a degenerate-intersection error when the restriction loses
/// rank relative to the full Jacobian.
pub fn restricted_jacobian_det(m: &ConstraintManifold, x: &DVector<f64>, basis: &DMatrix<f64>) -> Result<f64> {
    if m.codim == 0 {
        return Ok(1.0);
    }
    if basis.nrows() != m.ambient_dim {
        return Err(Error::input("tangent basis has wrong ambient dimension"));
    }
    let j = m.jacobian(x)?;
    let reference = linalg::singular_values(&j).amax();
    linalg::gdet_checked(&(&j * basis), reference, RANK_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    StandardGaussian,
    UniformOnRegion,
    Custom,
}

/// Target density f, stored as its logarithm up to a constant.
#[derive(Clone)]
pub struct TargetDensity {
    pub kind: DensityKind,
    log_density: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
}

impl fmt::Debug for TargetDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TargetDensity({:?})", self.kind)
    }
}

impl TargetDensity {
    pub fn standard_gaussian() -> Self {
        TargetDensity {
            kind: DensityKind::StandardGaussian,
            log_density: Arc::new(|x| -0.5 * x.norm_squared()),
        }
    }

    /// Constant density on all of R^n.
    pub fn uniform() -> Self {
        TargetDensity {
            kind: DensityKind::UniformOnRegion,
            log_density: Arc::new(|_| 0.0),
        }
    }

    /// Uniform density on the closed ball of the given center and radius.
    pub fn uniform_in_ball(center: DVector<f64>, radius: f64) -> Self {
        TargetDensity {
            kind: DensityKind::UniformOnRegion,
            log_density: Arc::new(move |x| {
                if (x - &center).norm() <= radius {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }),
        }
    }

    /// Density given through its logarithm.
    pub fn custom(f: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        TargetDensity {
            kind: DensityKind::Custom,
            log_density: Arc::new(f),
        }
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        (self.log_density)(x)
    }

    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.log_density(x).exp()
    }
}

/// Sphere {‖x − center‖² = radius²}.
pub fn sphere(center: DVector<f64>, radius: f64) -> Result<ConstraintManifold> {
    if !(radius > 0.0) {
        return Err(Error::input("sphere radius must be positive"));
    }
    let n = center.len();
    let c1 = center.clone();
    let c2 = center.clone();
    Ok(ConstraintManifold::new(
        format!("sphere(n={n}, r={radius})"),
        n,
        DVector::from_element(1, radius * radius),
        move |x| DVector::from_element(1, (x - &center).norm_squared()),
    )?
    .with_jacobian(move |x| Ok(DMatrix::from_iterator(1, x.len(), (x - &c1).iter().map(|v| 2.0 * v))))
    .with_hessian(move |_| Ok(vec![DMatrix::identity(c2.len(), c2.len()) * 2.0]))
    .homogeneous(true))
}

/// Unit circle in the plane, λ(x) = ‖x‖².
pub fn unit_circle() -> ConstraintManifold {
    sphere(DVector::zeros(2), 1.0).expect("valid radius")
}

/// Affine subspace {A x = b} with A of size k×n.
pub fn affine_plane(a: DMatrix<f64>, b: DVector<f64>) -> Result<ConstraintManifold> {
    if a.nrows() != b.len() {
        return Err(Error::input("affine plane: row count must match offsets"));
    }
    let n = a.ncols();
    let a1 = a.clone();
    let a2 = a.clone();
    let k = a.nrows();
    Ok(ConstraintManifold::new(format!("affine(k={k}, n={n})"), n, b, move |x| &a1 * x)?
        .with_jacobian(move |_| Ok(a2.clone()))
        .with_hessian(move |_| Ok(vec![DMatrix::zeros(n, n); k]))
        .homogeneous(true))
}

/// Circle of the given radius in the plane x₃ = center₃ of R³ (codimension 2).
pub fn circle_in_r3(center: DVector<f64>, radius: f64) -> Result<ConstraintManifold> {
    if center.len() != 3 {
        return Err(Error::input("circle_in_r3 needs a 3-vector center"));
    }
    let c1 = center.clone();
    let c2 = center.clone();
    let mut target = DVector::zeros(2);
    target[0] = radius * radius;
    Ok(ConstraintManifold::new("circle_in_r3", 3, target, move |x| {
        let d = x - &center;
        DVector::from_vec(vec![d.norm_squared(), d[2]])
    })?
    .with_jacobian(move |x| {
        let d = x - &c1;
        Ok(DMatrix::from_row_slice(2, 3, &[2.0 * d[0], 2.0 * d[1], 2.0 * d[2], 0.0, 0.0, 1.0]))
    })
    .with_hessian(move |_| {
        let _ = &c2;
        Ok(vec![DMatrix::identity(3, 3) * 2.0, DMatrix::zeros(3, 3)])
    }))
}

/// The whole space R^n (codimension 0).
pub fn full_space(n: usize) -> ConstraintManifold {
    ConstraintManifold::new(format!("full_space(n={n})"), n, DVector::zeros(0), |_| DVector::zeros(0))
        .expect("valid dimensions")
        .with_jacobian(move |_| Ok(DMatrix::zeros(0, n)))
        .with_hessian(|_| Ok(Vec::new()))
        .homogeneous(true)
}

/// Union of equal-radius spheres, λ(x) = ‖x − c_j‖² for the nearest center
/// c_j. Smooth wherever the nearest center is unique, which holds on and
/// near each sphere when the spheres are well separated.
pub fn sphere_collection(centers: Vec<DVector<f64>>, radius: f64) -> Result<ConstraintManifold> {
    if centers.is_empty() {
        return Err(Error::input("sphere collection needs at least one center"));
    }
    let n = centers[0].len();
    if centers.iter().any(|c| c.len() != n) {
        return Err(Error::input("sphere centers have mixed dimensions"));
    }
    let centers = Arc::new(centers);
    let nearest = {
        let centers = centers.clone();
        move |x: &DVector<f64>| -> usize {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (i, c) in centers.iter().enumerate() {
                let d = (x - c).norm_squared();
                if d < bd {
                    bd = d;
                    best = i;
                }
            }
            best
        }
    };
    let (c1, c2) = (centers.clone(), centers.clone());
    let (n1, n2) = (nearest.clone(), nearest.clone());
    Ok(ConstraintManifold::new(
        format!("sphere_collection(count={}, n={n}, r={radius})", centers.len()),
        n,
        DVector::from_element(1, radius * radius),
        move |x| DVector::from_element(1, (x - &c1[n1(x)]).norm_squared()),
    )?
    .with_jacobian(move |x| Ok(DMatrix::from_iterator(1, x.len(), (x - &c2[n2(x)]).iter().map(|v| 2.0 * v))))
    .with_hessian(move |_| Ok(vec![DMatrix::identity(n, n) * 2.0]))
    .homogeneous(true))
}
