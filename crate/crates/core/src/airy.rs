//! Tridiagonal discretization of the stochastic Airy operator,
//!
//!   A = (1/h²)Δ − h·diag(1..K) + σ·diag(N),
//!
//! with a Sturm-bisection eigensolver, eigenvalue gradients with respect to
//! the noise vector N, and manifolds {N : λ_i(A(N)) = c_i}.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::ConstraintManifold;
use crate::rng;

mod experiments;
pub use experiments::*;

/// How the noise term is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaling {
    /// σ = 2/√(hβ): discretized white noise, whose top eigenvalue
    /// converges to the soft-edge (Tracy-Widom) law.
    WhiteNoise,
    /// σ = 2/(h√β).
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AiryModel {
    pub n_parameter: f64,
    pub beta: f64,
    pub grid_step: f64,
    pub matrix_size: usize,
    pub noise_scaling: NoiseScaling,
}

impl AiryModel {
    /// h = n^{−1/3}, K = ⌈10·n^{1/3}⌉.
    pub fn new(n_parameter: f64, beta: f64) -> Result<Self> {
        if !(n_parameter > 0.0) || !(beta > 0.0) {
            return Err(Error::input("n_parameter and beta must be positive"));
        }
        let c = n_parameter.cbrt();
        let k = (10.0 * c - 1e-9).ceil() as usize;
        Self::with_grid(n_parameter, beta, 1.0 / c, k.max(2))
    }

    pub fn with_grid(n_parameter: f64, beta: f64, grid_step: f64, matrix_size: usize) -> Result<Self> {
        if matrix_size < 2 {
            return Err(Error::input("matrix size must be at least 2"));
        }
        if !(grid_step > 0.0) || !(beta > 0.0) {
            return Err(Error::input("grid step and beta must be positive"));
        }
        Ok(AiryModel { n_parameter, beta, grid_step, matrix_size, noise_scaling: NoiseScaling::WhiteNoise })
    }

    pub fn with_noise_scaling(mut self, s: NoiseScaling) -> Self {
        self.noise_scaling = s;
        self
    }

    pub fn noise_scale(&self) -> f64 {
        let h = self.grid_step;
        match self.noise_scaling {
            NoiseScaling::WhiteNoise => 2.0 / (h * self.beta).sqrt(),
            NoiseScaling::Literal => 2.0 / (h * self.beta.sqrt()),
        }
    }

    /// Diagonal and off-diagonal of A(N).
    pub fn build_matrix(&self, noise: &[f64]) -> Result<Tridiagonal> {
        let k = self.matrix_size;
        if noise.len() != k {
            return Err(Error::input(format!("noise has length {}, expected {k}", noise.len())));
        }
        let h = self.grid_step;
        let s = self.noise_scale();
        let diag = (0..k).map(|j| -2.0 / (h * h) - h * (j + 1) as f64 + s * noise[j]).collect();
        Ok(Tridiagonal { diag, off: vec![1.0 / (h * h); k - 1] })
    }
}

/// Symmetric tridiagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl Tridiagonal {
    pub fn size(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.size();
        let mut a = DMatrix::zeros(k, k);
        for i in 0..k {
            a[(i, i)] = self.diag[i];
            if i + 1 < k {
                a[(i, i + 1)] = self.off[i];
                a[(i + 1, i)] = self.off[i];
            }
        }
        a
    }

    /// Gershgorin interval containing the spectrum.
    pub fn gershgorin(&self) -> (f64, f64) {
        let k = self.size();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..k {
            let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + if i + 1 < k { self.off[i].abs() } else { 0.0 };
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    pub fn norm_bound(&self) -> f64 {
        let (lo, hi) = self.gershgorin();
        lo.abs().max(hi.abs())
    }

    /// Number of eigenvalues strictly below x (Sturm count from the LDLᵀ
    /// pivots of A − xI).
    pub fn count_below(&self, x: f64) -> usize {
        let pivmin = f64::MIN_POSITIVE.sqrt() * (1.0 + self.off.iter().map(|b| b * b).fold(0.0, f64::max));
        let mut d = self.diag[0] - x;
        let mut count = usize::from(d < 0.0);
        for i in 1..self.size() {
            if d.abs() < pivmin {
                d = -pivmin;
            }
            d = self.diag[i] - x - self.off[i - 1] * self.off[i - 1] / d;
            count += usize::from(d < 0.0);
        }
        count
    }

    /// p-th largest eigenvalue (1-based) by bisection.
    pub fn eigenvalue_desc(&self, p: usize) -> f64 {
        let k = self.size();
        let target = k - p; // ascending 0-based index
        let (mut lo, mut hi) = self.gershgorin();
        let scale = lo.abs().max(hi.abs());
        for _ in 0..200 {
            if hi - lo <= 4.0 * f64::EPSILON * scale {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.count_below(mid) > target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Solve (A − shift·I) y = b by LU with partial pivoting.
    fn shifted_solve(&self, shift: f64, b: &mut [f64]) {
        let n = self.size();
        let tiny = f64::EPSILON * self.norm_bound().max(1.0);
        let mut d: Vec<f64> = self.diag.iter().map(|v| v - shift).collect();
        let mut dl = self.off.clone();
        let mut du = self.off.clone();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swap = vec![false; n.saturating_sub(1)];
        for i in 0..n - 1 {
            if d[i].abs() >= dl[i].abs() {
                if d[i] == 0.0 {
                    d[i] = tiny;
                }
                let fact = dl[i] / d[i];
                dl[i] = fact;
                d[i + 1] -= fact * du[i];
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                swap[i] = true;
            }
        }
        if d[n - 1] == 0.0 {
            d[n - 1] = tiny;
        }
        for i in 0..n - 1 {
            if swap[i] {
                let t = b[i];
                b[i] = b[i + 1];
                b[i + 1] = t - dl[i] * b[i];
            } else {
                b[i + 1] -= dl[i] * b[i];
            }
        }
        b[n - 1] /= d[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - du[n - 2] * b[n - 1]) / d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - du[i] * b[i + 1] - du2[i] * b[i + 2]) / d[i];
        }
    }

    /// Unit eigenvector for eigenvalue `lambda` by inverse iteration,
    /// orthogonalized against `previous`.
    fn eigenvector(&self, lambda: f64, previous: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.size();
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7548776662).sin()).collect();
        let ortho = |v: &mut Vec<f64>| {
            for q in previous {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= nv);
            nv
        };
        ortho(&mut v);
        for _ in 0..4 {
            self.shifted_solve(lambda, &mut v);
            let nv = ortho(&mut v);
            if !nv.is_finite() || nv == 0.0 {
                return Err(Error::numerical("inverse iteration broke down"));
            }
        }
        Ok(v)
    }

    /// p largest eigenvalues in descending order with unit eigenvectors
    /// (columns).
    pub fn eigen_top(&self, p: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let k = self.size();
        if p == 0 || p > k {
            return Err(Error::input(format!("need 1 <= p <= {k}, got {p}")));
        }
        let vals: Vec<f64> = (1..=p).map(|i| self.eigenvalue_desc(i)).collect();
        let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(p);
        for &l in &vals {
            let v = self.eigenvector(l, &vecs)?;
            vecs.push(v);
        }
        let mut m = DMatrix::zeros(k, p);
        for (j, v) in vecs.iter().enumerate() {
            for i in 0..k {
                m[(i, j)] = v[i];
            }
        }
        Ok((vals, m))
    }
}

/// Relative spacing below which an eigenvalue counts as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-8;

/// Gradients ∂λ_i/∂N_j = σ·v_j(i)² for each requested 1-based index, as
/// rows of a matrix.
pub fn eigen_gradients(model: &AiryModel, noise: &[f64], indices: &[usize]) -> Result<DMatrix<f64>> {
    let t = model.build_matrix(noise)?;
    let k = t.size();
    let pmax = *indices.iter().max().ok_or_else(|| Error::input("no eigenvalue indices"))?;
    if indices.iter().any(|&i| i == 0) {
        return Err(Error::input("eigenvalue indices are 1-based"));
    }
    let p = (pmax + 1).min(k);
    let (vals, vecs) = t.eigen_top(p)?;
    let gap_tol = DEGENERACY_TOL * t.norm_bound();
    let s = model.noise_scale();
    let mut g = DMatrix::zeros(indices.len(), k);
    for (r, &i) in indices.iter().enumerate() {
        let li = vals[i - 1];
        let below = if i < p { vals[i] } else { f64::NEG_INFINITY };
        let above = if i > 1 { vals[i - 2] } else { f64::INFINITY };
        if (li - below).min(above - li) <= gap_tol {
            return Err(Error::degenerate(format!("eigenvalue {i} is within {gap_tol:e} of a neighbour")));
        }
        for j in 0..k {
            g[(r, j)] = s * vecs[(j, i - 1)] * vecs[(j, i - 1)];
        }
    }
    Ok(g)
}

pub fn eigen_gradient(model: &AiryModel, noise: &[f64], index: usize) -> Result<DVector<f64>> {
    Ok(eigen_gradients(model, noise, &[index])?.row(0).transpose())
}

/// Eigenvalue conditions λ_{indices[j]} = values[j].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenCondition {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl EigenCondition {
    pub fn new(indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let c = EigenCondition { indices, values };
        c.validate()?;
        Ok(c)
    }

    pub fn single(index: usize, value: f64) -> Self {
        EigenCondition { indices: vec![index], values: vec![value] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.is_empty() || self.indices.len() != self.values.len() {
            return Err(Error::input("condition needs matching nonempty indices and values"));
        }
        if self.indices[0] == 0 {
            return Err(Error::input("eigenvalue indices are 1-based"));
        }
        for w in self.indices.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::input("condition indices must be strictly increasing"));
            }
        }
        for w in self.values.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::input("condition values must be strictly decreasing"));
            }
        }
        Ok(())
    }
}

/// Eigenvalues at the given 1-based indices.
pub fn eigenvalues_at(model: &AiryModel, noise: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
    let t = model.build_matrix(noise)?;
    Ok(indices.iter().map(|&i| t.eigenvalue_desc(i)).collect())
}

/// {N ∈ R^K : λ_i(A(N)) = c_i}, with analytic Jacobian rows and
/// finite-difference Hessians.
pub fn airy_manifold(model: &AiryModel, cond: &EigenCondition) -> Result<ConstraintManifold> {
    cond.validate()?;
    let k = model.matrix_size;
    if *cond.indices.last().unwrap() > k {
        return Err(Error::input("condition index exceeds matrix size"));
    }
    let (m1, m2) = (*model, *model);
    let (i1, i2) = (cond.indices.clone(), cond.indices.clone());
    let name = format!(
        "airy(K={k}, h={}, beta={}, idx={:?}, val={:?})",
        model.grid_step, model.beta, cond.indices, cond.values
    );
    Ok(ConstraintManifold::new(name, k, DVector::from_vec(cond.values.clone()), move |x| {
        let t = m1.build_matrix(x.as_slice()).expect("dimension checked by manifold");
        DVector::from_iterator(i1.len(), i1.iter().map(|&i| t.eigenvalue_desc(i)))
    })?
    .with_jacobian(move |x| eigen_gradients(&m2, x.as_slice(), &i2)))
}

/// Fill `buf` with standard normals.
pub fn fill_normals<R: rand::Rng + ?Sized>(buf: &mut [f64], rng: &mut R) {
    for v in buf.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Draws of N ~ N(0, I) and the count with λ₁ ≥ threshold, via Sturm counts.
pub fn top_tail_count(model: &AiryModel, threshold: f64, draws: u64, seed: u64) -> u64 {
    const CHUNK: u64 = 8192;
    let chunks = draws.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::substream(seed, c);
            let k = model.matrix_size;
            let mut noise = vec![0.0; k];
            let base = model.build_matrix(&noise).unwrap();
            let s = model.noise_scale();
            let mut t = base.clone();
            let mut hits = 0;
            for _ in 0..CHUNK.min(draws - c * CHUNK) {
                fill_normals(&mut noise, &mut r);
                for j in 0..k {
                    t.diag[j] = base.diag[j] + s * noise[j];
                }
                if t.count_below(threshold) < k {
                    hits += 1;
                }
            }
            hits
        })
        .sum()
}
