//! Small dense linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Largest dimension for which the dense eigenvalue route is used.
pub const DENSE_EIG_MAX_DIM: usize = 16;

/// Spectral radius: largest eigenvalue modulus.
///
/// Dense Schur eigenvalues for `n <= 16`; above that a Gelfand estimate
/// `||A^(2^k)||^(1/2^k)` computed by normalized repeated squaring, which also
/// handles complex-conjugate dominant pairs where plain power iteration cycles.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    assert!(a.is_square(), "spectral radius of a non-square matrix");
    let n = a.nrows();
    match n {
        0 => 0.0,
        1 => a[(0, 0)].abs(),
        _ if n <= DENSE_EIG_MAX_DIM => a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
        _ => gelfand_radius(a),
    }
}

fn gelfand_radius(a: &DMatrix<f64>) -> f64 {
    let mut m = a.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    let mut estimate = m.norm();
    for _ in 0..40 {
        let s = m.norm();
        if s == 0.0 {
            return 0.0;
        }
        m /= s;
        log_scale += s.ln() / power;
        m = &m * &m;
        power *= 2.0;
        let next = (log_scale + m.norm().ln() / power).exp();
        if (next - estimate).abs() <= 1e-12 * next.max(1e-300) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Largest singular value. Vectors and scalars skip the SVD.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    if a.nrows() == 1 || a.ncols() == 1 {
        return a.norm();
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Spectral norm of a row-major `rows x cols` block stored in a slice.
pub fn spectral_norm_slice(data: &[f64], rows: usize, cols: usize) -> f64 {
    if rows == 1 || cols == 1 {
        return data.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    spectral_norm(&DMatrix::from_row_slice(rows, cols, data))
}

/// Singular values sorted in decreasing order.
pub fn singular_values_desc(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Numerical rank with the usual `max(r, c) * eps * sigma_1` cutoff.
pub fn rank(a: &DMatrix<f64>) -> usize {
    let sv = singular_values_desc(a);
    let Some(&top) = sv.first() else { return 0 };
    let tol = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * top;
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue_sym(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn eigen_range_sym(a: &DMatrix<f64>) -> (f64, f64) {
    if a.nrows() == 0 {
        return (0.0, 0.0);
    }
    let ev = SymmetricEigen::new(symmetrize(a)).eigenvalues;
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// A factor `L` with `L L^T = S` for a symmetric PSD `S`. Falls back to the
/// eigen-decomposition (negative eigenvalues clamped) when Cholesky fails.
pub fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(s);
    if let Some(ch) = sym.clone().cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(sym);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

pub fn identity(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// Integer matrix power by repeated multiplication (small exponents only).
pub fn mat_pow(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = identity(a.nrows());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

pub fn to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

/// Builds a matrix from nested row-major arrays. `cols_hint` is used for the
/// zero-row case so shapes like `0 x p` survive a round trip.
pub fn from_rows(
    field: &'static str,
    rows: &[Vec<f64>],
    cols_hint: Option<usize>,
) -> crate::Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map(|row| row.len()).or(cols_hint).unwrap_or(0);
    if let Some(bad) = rows.iter().position(|row| row.len() != c) {
        return Err(crate::Error::dim(
            field,
            format!("{c} columns in every row"),
            format!("{} columns in row {bad}", rows[bad].len()),
        ));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn dvec(data: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_radius_rotation_pair() {
        // eigenvalues 0.6 ± 0.8i have modulus 1
        let a = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        assert!((spectral_radius(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelfand_matches_dense_route() {
        let n = 20;
        let a = DMatrix::from_fn(n, n, |i, j| {
            let x = ((i * 31 + j * 17) % 23) as f64 / 23.0 - 0.5;
            if i == j { 0.3 } else { 0.1 * x }
        });
        let dense = a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        let est = spectral_radius(&a);
        assert!((dense - est).abs() < 1e-6 * dense, "{dense} vs {est}");
    }

    #[test]
    fn rank_of_nilpotent_shift() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(rank(&a), 1);
        assert_eq!(rank(&identity(3)), 3);
    }

    #[test]
    fn psd_factor_handles_singular() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&s);
        assert!((&l * l.transpose() - s).norm() < 1e-12);
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(from_rows("A", &rows, None).is_err());
    }
}
