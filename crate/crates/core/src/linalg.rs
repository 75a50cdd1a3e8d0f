//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Singular values of `m`, in no particular order.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DVector::zeros(0);
    }
    m.clone().svd(false, false).singular_values
}

/// Generalized determinant: the product of the singular values of a k×p
/// matrix with k ≤ p, i.e. sqrt(det(M Mᵀ)).
pub fn gdet(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m.row(0).norm();
    }
    singular_values(m).iter().product()
}

/// Generalized determinant with a numerical-rank check. The smallest singular
/// value must exceed `rel_tol * reference`, where `reference` is the scale of
/// the unrestricted Jacobian.
pub fn gdet_checked(m: &DMatrix<f64>, reference: f64, rel_tol: f64) -> Result<f64> {
    if m.nrows() > m.ncols() {
        return Err(Error::degenerate(format!(
            "restriction to {} dimensions cannot carry {} constraints",
            m.ncols(),
            m.nrows()
        )));
    }
    let sv = if m.nrows() == 1 {
        DVector::from_element(1, m.row(0).norm())
    } else {
        singular_values(m)
    };
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = if reference > 0.0 { reference } else { sv.amax() };
    if !(smin > rel_tol * scale) || !smin.is_finite() {
        return Err(Error::degenerate(format!(
            "smallest singular value {smin:e} below tolerance (scale {scale:e})"
        )));
    }
    Ok(sv.iter().product())
}

/// Orthonormal basis of the complement of a single nonzero vector, built from
/// one Householder reflector. Returns an n×(n−1) matrix.
pub fn complement_of_vector(u: &DVector<f64>) -> DMatrix<f64> {
    let n = u.len();
    let norm = u.norm();
    let u = u / norm;
    let (j, _) = u.iter().enumerate().fold((0, 0.0), |acc, (i, v)| {
        if v.abs() > acc.1 {
            (i, v.abs())
        } else {
            acc
        }
    });
    let mut v = u.clone();
    v[j] += u[j].signum();
    let vv = v.dot(&v);
    let mut out = DMatrix::zeros(n, n - 1);
    let mut col = 0;
    for c in 0..n {
        if c == j {
            continue;
        }
        for r in 0..n {
            let id = if r == c { 1.0 } else { 0.0 };
            out[(r, col)] = id - 2.0 * v[r] * v[c] / vv;
        }
        col += 1;
    }
    out
}

/// Orthonormal basis (n×r) of the column span of `a`, with the numerical rank
/// r decided by `rel_tol` relative to the largest column norm.
pub fn orthonormal_span(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let scale = (0..a.ncols()).map(|j| a.column(j).norm()).fold(0.0, f64::max);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for j in 0..a.ncols() {
        let mut v: DVector<f64> = a.column(j).into_owned();
        for _ in 0..2 {
            for q in &cols {
                let p = q.dot(&v);
                v.axpy(-p, q, 1.0);
            }
        }
        let nv = v.norm();
        if nv > rel_tol * scale && nv > 0.0 {
            cols.push(v / nv);
        }
    }
    if cols.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Orthonormal basis of the orthogonal complement of the span of the
/// orthonormal columns of `q` (n×k), as an n×(n−k) matrix.
pub fn complete_basis(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let k = q.ncols();
    if k == 0 {
        return DMatrix::identity(n, n);
    }
    if k == 1 {
        return complement_of_vector(&q.column(0).into_owned());
    }
    let mut cols: Vec<DVector<f64>> = (0..k).map(|j| q.column(j).into_owned()).collect();
    let mut out = Vec::with_capacity(n - k);
    // Gram-Schmidt against the identity, visiting the axes least aligned
    // with span(q) first for stability.
    let mut order: Vec<usize> = (0..n).collect();
    let weight = |i: usize| -> f64 { (0..k).map(|j| q[(i, j)] * q[(i, j)]).sum() };
    order.sort_by(|&a, &b| weight(a).partial_cmp(&weight(b)).unwrap().then(a.cmp(&b)));
    for &i in &order {
        if out.len() == n - k {
            break;
        }
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let p = c.dot(&v);
                v.axpy(-p, c, 1.0);
            }
        }
        let nv = v.norm();
        if nv > 1e-8 {
            let v = v / nv;
            cols.push(v.clone());
            out.push(v);
        }
    }
    DMatrix::from_columns(&out)
}

/// Orthonormal basis of ker(g) inside the column span of `frame`, where
/// `frame` is n×p with orthonormal columns and `g` is k×n. Returns
/// n×(p − rank) together with the numerical rank of g·frame.
pub fn kernel_in_frame(g: &DMatrix<f64>, frame: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let gp = g * frame; // k×p
    let rows = orthonormal_span(&gp.transpose(), rel_tol); // p×r
    let r = rows.ncols();
    let p = frame.ncols();
    if r == p {
        return (DMatrix::zeros(frame.nrows(), 0), r);
    }
    let ker = complete_basis(&rows); // p×(p−r)
    (frame * ker, r)
}

/// Haar-distributed n×d matrix with orthonormal columns: QR of a Gaussian
/// matrix with the sign convention diag(R) > 0.
pub fn haar_columns<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Uniform point on the unit sphere S^{m−1} ⊂ R^m.
pub fn unit_vector<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-300 {
            return v / n;
        }
    }
}

/// Uniform point in the ball of radius `radius` in R^m.
pub fn ball_point<R: Rng + ?Sized>(m: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    if m == 0 {
        return DVector::zeros(0);
    }
    let u: f64 = rng.random();
    unit_vector(m, rng) * (radius * u.powf(1.0 / m as f64))
}

pub fn max_abs_offdiag_sym(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn orth_err(q: &DMatrix<f64>) -> f64 {
        (q.transpose() * q - DMatrix::identity(q.ncols(), q.ncols())).amax()
    }

    #[test]
    fn householder_complement_is_orthonormal() {
        let u = DVector::from_vec(vec![0.3, -1.2, 0.5, 2.0]);
        let c = complement_of_vector(&u);
        assert_eq!(c.shape(), (4, 3));
        assert!(orth_err(&c) < 1e-13);
        assert!((c.transpose() * &u).amax() < 1e-13);
    }

    #[test]
    fn complete_basis_spans_complement() {
        let mut r = rng::from_seed(1);
        let q = haar_columns(7, 3, &mut r);
        let c = complete_basis(&q);
        assert_eq!(c.shape(), (7, 4));
        assert!(orth_err(&c) < 1e-12);
        assert!((q.transpose() * &c).amax() < 1e-12);
    }

    #[test]
    fn haar_columns_orthonormal_with_positive_r() {
        let mut r = rng::from_seed(2);
        let q = haar_columns(10, 4, &mut r);
        assert!(orth_err(&q) < 1e-12);
        let sq = haar_columns(2, 2, &mut r);
        assert!((sq.determinant().abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gdet_matches_sqrt_det() {
        let m: DMatrix<f64> = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.3, 2.0]);
        let direct = (&m * m.transpose()).determinant().sqrt();
        assert!((gdet(&m) - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn gdet_checked_flags_rank_loss() {
        let m = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(matches!(gdet_checked(&m, 1.0, 1e-10), Err(Error::Degenerate(_))));
    }

    #[test]
    fn kernel_in_frame_dimension() {
        let g = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
        let frame = DMatrix::identity(3, 3);
        let (k, r) = kernel_in_frame(&g, &frame, 1e-10);
        assert_eq!(r, 1);
        assert_eq!(k.ncols(), 2);
        assert!((&g * &k).amax() < 1e-14);
    }
}
