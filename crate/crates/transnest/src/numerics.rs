//! Dense linear-algebra primitives shared by the estimators: truncated
//! positive-semidefinite factorization, polar factor, orthogonal Procrustes,
//! and weighted least squares with a minimum-norm fallback.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use ndarray_linalg::{JobSvd, SVDDC, SVD};

use crate::error::{Error, Result};

/// Relative symmetry tolerance applied when loading a symmetric matrix.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Max-entry tolerance on `QᵀQ − I` for orthogonal matrices.
pub const ORTHO_TOL: f64 = 1e-10;
/// Relative singular-value ratio below which a matrix is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-12;
/// Relative Gram-trace tolerance that switches least squares to the minimum-norm solve.
pub const LSQ_TOL: f64 = 1e-10;

/// A validated symmetric matrix with finite entries, stored as `(a_ij + a_ji)/2`.
#[derive(Debug, Clone)]
pub struct SymmetricMatrix(Array2<f64>);

impl SymmetricMatrix {
    /// Validates squareness, finiteness and `|a_ij − a_ji| ≤ 1e−8·(1+|a_ij|)`,
    /// then stores the symmetrized matrix.
    pub fn new(a: Array2<f64>) -> Result<Self> {
        let (n, m) = a.dim();
        if n != m {
            return Err(Error::Dim(format!("matrix is {n}x{m}, expected square")));
        }
        for ((i, j), &v) in a.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite entry {v} at ({i},{j})"
                )));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (x, y) = (a[[i, j]], a[[j, i]]);
                if (x - y).abs() > SYMMETRY_TOL * (1.0 + x.abs()) {
                    return Err(Error::Validation(format!(
                        "symmetry violated at ({i},{j}): {x} vs {y}"
                    )));
                }
            }
        }
        let mut s = a;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (s[[i, j]] + s[[j, i]]);
                s[[i, j]] = avg;
                s[[j, i]] = avg;
            }
        }
        Ok(SymmetricMatrix(s))
    }

    /// Wraps a matrix that is symmetric by construction (e.g. `XXᵀ` products).
    pub fn from_exact(a: Array2<f64>) -> Result<Self> {
        Self::new(a)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// Submatrix restricted to `idx` rows and columns (in the given order).
    pub fn submatrix(&self, idx: &[usize]) -> Array2<f64> {
        let k = idx.len();
        Array2::from_shape_fn((k, k), |(a, b)| self.0[[idx[a], idx[b]]])
    }
}

/// Result of a truncated PSD factorization of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct Factorization {
    /// `n×r` embedding matrix, `X = Û·clip(D̂)^{1/2}`.
    pub x: Array2<f64>,
    /// The r algebraically-largest eigenvalues, signed, descending.
    pub eigvals: Vec<f64>,
    /// Number of negative eigenvalues among the top r that were clipped to zero.
    pub clipped_count: usize,
    /// Full eigenvalue spectrum, descending.
    pub spectrum: Vec<f64>,
}

impl Factorization {
    /// Spectral norm of `S − XXᵀ`: the largest |eigenvalue| not represented in `XXᵀ`.
    pub fn residual_spectral_norm(&self) -> f64 {
        let r = self.eigvals.len();
        self.spectrum
            .iter()
            .enumerate()
            .filter(|(i, v)| *i >= r || **v < 0.0)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max)
    }
}

/// An `r×r` matrix validated to satisfy `‖QᵀQ − I‖_max ≤ 1e−10`.
#[derive(Debug, Clone)]
pub struct OrthogonalMatrix(Array2<f64>);

impl OrthogonalMatrix {
    pub fn new(q: Array2<f64>) -> Result<Self> {
        let r = q.nrows();
        if q.ncols() != r {
            return Err(Error::Dim(format!(
                "orthogonal matrix must be square, got {}x{}",
                r,
                q.ncols()
            )));
        }
        let gram = q.t().dot(&q);
        let mut dev: f64 = 0.0;
        for ((i, j), &v) in gram.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((v - target).abs());
        }
        if dev > ORTHO_TOL {
            return Err(Error::Numerical(format!(
                "matrix is not orthogonal: max |QᵀQ − I| = {dev:.3e}"
            )));
        }
        Ok(OrthogonalMatrix(q))
    }

    pub fn identity(r: usize) -> Self {
        OrthogonalMatrix(Array2::eye(r))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Flips each column of `x` so its first component of non-negligible magnitude
/// is positive. Fixes a canonical representative among sign-equivalent
/// eigenvector bases for byte-stable outputs.
fn canonicalize_column_signs(x: &mut Array2<f64>) {
    for mut col in x.columns_mut() {
        let norm = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if norm == 0.0 {
            continue;
        }
        let lead = col.iter().find(|v| v.abs() > RANK_TOL * norm);
        if let Some(&v) = lead {
            if v < 0.0 {
                col.mapv_inplace(|e| -e);
            }
        }
    }
}

/// Symmetric eigendecomposition via LAPACK's divide-and-conquer `dsyevd`,
/// which is far faster than the QR-iteration `dsyev` on large matrices.
/// Returns ascending eigenvalues and eigenvectors as matching columns.
fn sym_eigh_ascending(a: ndarray::ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    use core::ffi::{c_char, c_int};
    let n = a.nrows();
    // Symmetric input, so the row-major buffer doubles as column-major.
    let mut buf: Vec<f64> = a.iter().copied().collect();
    let mut w = vec![0.0f64; n];
    let ni = n as c_int;
    let jobz = b'V' as c_char;
    let uplo = b'L' as c_char;
    let mut info: c_int = 0;
    let (mut wkopt, mut iwkopt): (f64, c_int) = (0.0, 0);
    unsafe {
        lapack_sys::dsyevd_(
            &jobz,
            &uplo,
            &ni,
            buf.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            &mut wkopt,
            &(-1 as c_int),
            &mut iwkopt,
            &(-1 as c_int),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!(
            "eigensolver workspace query failed: info={info}"
        )));
    }
    let lwork = wkopt as c_int;
    let liwork = iwkopt;
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    let mut iwork = vec![0 as c_int; liwork.max(1) as usize];
    unsafe {
        lapack_sys::dsyevd_(
            &jobz,
            &uplo,
            &ni,
            buf.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!(
            "eigensolver failed on {n}x{n} matrix: info={info}"
        )));
    }
    // LAPACK wrote eigenvectors as columns in column-major order; reinterpret
    // the buffer row-major and transpose so eigenvector i is column i.
    let vecs = Array2::from_shape_vec((n, n), buf)
        .expect("buffer has n*n elements")
        .reversed_axes();
    Ok((Array1::from_vec(w), vecs))
}

/// Truncated PSD factorization: eigenvectors of the r algebraically-largest
/// eigenvalues of `S`, negatives clipped to zero before the square root.
pub fn truncated_psd_factorization(s: &SymmetricMatrix, r: usize) -> Result<Factorization> {
    let n = s.dim();
    if r == 0 || r > n {
        return Err(Error::Dim(format!(
            "rank {r} out of range for a {n}x{n} matrix"
        )));
    }
    let (vals, vecs) = sym_eigh_ascending(s.as_array().view())?;
    // eigh returns ascending eigenvalues; reverse to descending.
    let spectrum: Vec<f64> = vals.iter().rev().copied().collect();
    let eigvals: Vec<f64> = spectrum[..r].to_vec();
    let mut x = Array2::zeros((n, r));
    let mut clipped_count = 0;
    for (c, &lambda) in eigvals.iter().enumerate() {
        let src = vecs.column(n - 1 - c);
        if lambda < 0.0 {
            clipped_count += 1;
            continue; // column stays zero
        }
        let scale = lambda.sqrt();
        x.column_mut(c).assign(&src.mapv(|v| v * scale));
    }
    canonicalize_column_signs(&mut x);
    Ok(Factorization {
        x,
        eigvals,
        clipped_count,
        spectrum,
    })
}

/// Polar factor `𝕌(A) = A(AᵀA)^{−1/2}`, computed via SVD as `UVᵀ`.
pub fn polar_factor(a: &Array2<f64>) -> Result<OrthogonalMatrix> {
    let r = a.nrows();
    if a.ncols() != r {
        return Err(Error::Dim(format!(
            "polar factor requires a square matrix, got {}x{}",
            r,
            a.ncols()
        )));
    }
    let (u, sv, vt) = a
        .svd(true, true)
        .map_err(|e| Error::Numerical(format!("SVD failed: {e}")))?;
    let u = u.expect("u requested");
    let vt = vt.expect("vt requested");
    let smax = sv.iter().fold(0.0f64, |m, v| m.max(*v));
    let smin = sv.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        return Err(Error::Numerical(format!(
            "rank-deficient input to polar factor: singular-value ratio {:.3e}",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    OrthogonalMatrix::new(u.dot(&vt))
}

/// Orthogonal Procrustes: `argmin_Q ‖X_to − X_from·Q‖_F = 𝕌(X_fromᵀ·X_to)`.
pub fn procrustes(x_from: ArrayView2<f64>, x_to: ArrayView2<f64>) -> Result<OrthogonalMatrix> {
    if x_from.nrows() != x_to.nrows() || x_from.ncols() != x_to.ncols() {
        return Err(Error::Dim(format!(
            "procrustes inputs must match: {}x{} vs {}x{}",
            x_from.nrows(),
            x_from.ncols(),
            x_to.nrows(),
            x_to.ncols()
        )));
    }
    let cross = x_from.t().dot(&x_to);
    polar_factor(&cross)
        .map_err(|e| Error::Numerical(format!("degenerate Procrustes cross-product: {e}")))
}

/// Weighted least squares `argmin Σᵢ wᵢ(yᵢ − dᵢᵀx)²`. Falls back to the
/// minimum-norm solution when the weighted Gram matrix is singular beyond
/// `1e−10·trace`.
pub fn least_squares(
    design: ArrayView2<f64>,
    response: ArrayView1<f64>,
    row_weights: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let m = design.nrows();
    if m == 0 {
        return Err(Error::Dim("least squares needs at least one row".into()));
    }
    if response.len() != m || row_weights.len() != m {
        return Err(Error::Dim(format!(
            "least squares rows {m}, response {}, weights {}",
            response.len(),
            row_weights.len()
        )));
    }
    if row_weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Validation("negative row weight".into()));
    }
    if row_weights.iter().all(|w| *w == 0.0) {
        return Err(Error::Validation("all least-squares weights are zero".into()));
    }
    let sqrt_w = row_weights.mapv(f64::sqrt);
    let mut scaled = design.to_owned();
    for (mut row, &s) in scaled.rows_mut().into_iter().zip(sqrt_w.iter()) {
        row.mapv_inplace(|v| v * s);
    }
    let scaled_y = Array1::from_iter(response.iter().zip(sqrt_w.iter()).map(|(y, s)| y * s));
    let sol = pinv_solve(&scaled, &scaled_y.view().insert_axis(Axis(1)))?;
    Ok(sol.index_axis(Axis(1), 0).to_owned())
}

/// Minimum-norm least squares with many right-hand sides sharing one design.
/// `responses` is `m×t`; the result is `r×t`.
pub fn least_squares_multi(design: ArrayView2<f64>, responses: ArrayView2<f64>) -> Result<Array2<f64>> {
    if design.nrows() == 0 {
        return Err(Error::Dim("least squares needs at least one row".into()));
    }
    if responses.nrows() != design.nrows() {
        return Err(Error::Dim(format!(
            "design rows {} vs response rows {}",
            design.nrows(),
            responses.nrows()
        )));
    }
    pinv_solve(&design.to_owned(), &responses)
}

/// Pseudo-inverse solve via SVD; singular values with `σ² ≤ 1e−10·Σσ²` are
/// dropped, which realizes the minimum-norm solution on the retained range.
fn pinv_solve(design: &Array2<f64>, responses: &ArrayView2<f64>) -> Result<Array2<f64>> {
    // Economy SVD: U is m×k, Vᵀ is k×n with k = min(m, n).
    let (u, sv, vt) = design
        .svddc(JobSvd::Some)
        .map_err(|e| Error::Numerical(format!("SVD failed in least squares: {e}")))?;
    let u = u.expect("u requested");
    let vt = vt.expect("vt requested");
    let gram_trace: f64 = sv.iter().map(|s| s * s).sum();
    let cutoff = LSQ_TOL * gram_trace;
    // Uᵀy scaled by 1/σ on retained components.
    let mut scaled = u.t().dot(responses);
    for (i, mut row) in scaled.rows_mut().into_iter().enumerate() {
        let s = sv[i];
        if s * s > cutoff && s > 0.0 {
            row.mapv_inplace(|v| v / s);
        } else {
            row.fill(0.0);
        }
    }
    Ok(vt.t().dot(&scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray_linalg::{Eigh, UPLO};
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.sample(StandardNormal))
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> SymmetricMatrix {
        let a = random_matrix(rng, n, n);
        SymmetricMatrix::new(&a + &a.t()).unwrap()
    }

    pub(crate) fn random_orthogonal(rng: &mut ChaCha8Rng, r: usize) -> OrthogonalMatrix {
        loop {
            let a = random_matrix(rng, r, r);
            if let Ok(q) = polar_factor(&a) {
                return q;
            }
        }
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn symmetry_tolerance_enforced() {
        let bad = array![[1.0, 2.0], [2.5, 1.0]];
        assert!(SymmetricMatrix::new(bad).is_err());
        let ok = array![[1.0, 2.0], [2.0 + 1e-9, 1.0]];
        let s = SymmetricMatrix::new(ok).unwrap();
        assert_eq!(s.as_array()[[0, 1]], s.as_array()[[1, 0]]);
    }

    #[test]
    fn factorize_diagonal() {
        let s = SymmetricMatrix::new(array![[4.0, 0.0], [0.0, 1.0]]).unwrap();
        let f = truncated_psd_factorization(&s, 1).unwrap();
        assert_eq!(f.eigvals, vec![4.0]);
        assert!((f.x[[0, 0]].abs() - 2.0).abs() < 1e-12);
        assert!(f.x[[1, 0]].abs() < 1e-12);
        assert_eq!(f.clipped_count, 0);
    }

    #[test]
    fn factorize_identity_reconstructs() {
        let s = SymmetricMatrix::new(Array2::eye(2)).unwrap();
        let f = truncated_psd_factorization(&s, 2).unwrap();
        let recon = f.x.dot(&f.x.t());
        assert!(max_abs_diff(&recon, &Array2::eye(2)) < 1e-12);
        assert_eq!(f.eigvals, vec![1.0, 1.0]);
    }

    #[test]
    fn factorize_matches_full_eigendecomposition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let s = random_symmetric(&mut rng, 5);
        let f = truncated_psd_factorization(&s, 3).unwrap();
        // Oracle: full eigendecomposition, clip negatives among the top 3.
        let (vals, vecs) = s.as_array().eigh(UPLO::Lower).unwrap();
        let n = 5;
        let mut oracle = Array2::<f64>::zeros((n, n));
        for c in 0..3 {
            let lambda = vals[n - 1 - c].max(0.0);
            let v = vecs.column(n - 1 - c);
            for i in 0..n {
                for j in 0..n {
                    oracle[[i, j]] += lambda * v[i] * v[j];
                }
            }
        }
        let recon = f.x.dot(&f.x.t());
        assert!(max_abs_diff(&recon, &oracle) < 1e-10);
    }

    #[test]
    fn factorize_rank_out_of_range() {
        let s = SymmetricMatrix::new(Array2::eye(3)).unwrap();
        assert!(truncated_psd_factorization(&s, 4).is_err());
        assert!(truncated_psd_factorization(&s, 0).is_err());
    }

    #[test]
    fn factorization_clips_negative_eigenvalues() {
        let s = SymmetricMatrix::new(array![[1.0, 0.0], [0.0, -2.0]]).unwrap();
        let f = truncated_psd_factorization(&s, 2).unwrap();
        assert_eq!(f.clipped_count, 1);
        assert_eq!(f.eigvals, vec![1.0, -2.0]);
        // Clipped column is a zero vector.
        assert!(f.x.column(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn full_rank_psd_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 6, 6);
        let psd = a.dot(&a.t());
        let s = SymmetricMatrix::new(psd.clone()).unwrap();
        let f = truncated_psd_factorization(&s, 6).unwrap();
        let recon = f.x.dot(&f.x.t());
        let num = (&recon - &psd).mapv(|v| v * v).sum().sqrt();
        let den = psd.mapv(|v| v * v).sum().sqrt();
        assert!(num / den < 1e-8);
    }

    #[test]
    fn polar_of_orthogonal_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q0 = random_orthogonal(&mut rng, 4);
        let q = polar_factor(q0.as_array()).unwrap();
        assert!(max_abs_diff(q.as_array(), q0.as_array()) < 1e-12);
    }

    #[test]
    fn polar_of_spd_times_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q0 = random_orthogonal(&mut rng, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let spd: Array2<f64> = b.dot(&b.t()) + 3.0 * Array2::<f64>::eye(3);
        let a = spd.dot(q0.as_array());
        let q = polar_factor(&a).unwrap();
        assert!(max_abs_diff(q.as_array(), q0.as_array()) < 1e-10);
    }

    #[test]
    fn polar_hand_example() {
        // [[−1,2],[−2,1]] = [[2,1],[1,2]]·[[0,1],[−1,0]]
        let a = array![[-1.0, 2.0], [-2.0, 1.0]];
        let q = polar_factor(&a).unwrap();
        let expected = array![[0.0, 1.0], [-1.0, 0.0]];
        assert!(max_abs_diff(q.as_array(), &expected) < 1e-12);
    }

    #[test]
    fn polar_rejects_rank_deficient() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let err = polar_factor(&a).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn procrustes_identity_and_rotation_recovery() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let q = procrustes(x.view(), x.view()).unwrap();
        assert!(max_abs_diff(q.as_array(), &Array2::eye(2)) < 1e-12);

        let q0 = array![[0.0, 1.0], [-1.0, 0.0]];
        let target = x.dot(&q0);
        let q = procrustes(x.view(), target.view()).unwrap();
        assert!(max_abs_diff(q.as_array(), &q0) < 1e-10);
    }

    #[test]
    fn procrustes_minimality_against_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 20, 3);
        let q0 = random_orthogonal(&mut rng, 3);
        let noise = random_matrix(&mut rng, 20, 3);
        let target = x.dot(q0.as_array()) + 0.01 * &noise;
        let q = procrustes(x.view(), target.view()).unwrap();
        let best = (&target - &x.dot(q.as_array())).mapv(|v| v * v).sum();
        for _ in 0..1000 {
            let alt = random_orthogonal(&mut rng, 3);
            let cost = (&target - &x.dot(alt.as_array())).mapv(|v| v * v).sum();
            assert!(best <= cost + 1e-12);
        }
    }

    #[test]
    fn procrustes_output_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 15, 4);
            let y = random_matrix(&mut rng, 15, 4);
            let q = procrustes(x.view(), y.view()).unwrap();
            let gram = q.as_array().t().dot(q.as_array());
            assert!(max_abs_diff(&gram, &Array2::eye(4)) <= ORTHO_TOL);
        }
    }

    #[test]
    fn least_squares_orthonormal_design() {
        let design = Array2::eye(3);
        let y = array![1.5, -2.0, 0.25];
        let w = array![1.0, 1.0, 1.0];
        let sol = least_squares(design.view(), y.view(), w.view()).unwrap();
        for i in 0..3 {
            assert!((sol[i] - y[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn least_squares_diagonal_normal_equations() {
        let design = array![[1.0, 0.0], [0.0, 1.0]];
        let y = array![3.0, 5.0];
        let w = array![2.0, 0.5];
        let sol = least_squares(design.view(), y.view(), w.view()).unwrap();
        assert!((sol[0] - 3.0).abs() < 1e-12);
        assert!((sol[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let design = random_matrix(&mut rng, 20, 3);
        let coef = array![1.0, -2.0, 0.5];
        let y = design.dot(&coef);
        let w = Array1::from_elem(20, 1.0);
        let sol = least_squares(design.view(), y.view(), w.view()).unwrap();
        for i in 0..3 {
            assert!((sol[i] - coef[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn least_squares_rejects_zero_weights() {
        let design = Array2::eye(2);
        let y = array![1.0, 2.0];
        let w = array![0.0, 0.0];
        assert!(least_squares(design.view(), y.view(), w.view()).is_err());
    }

    #[test]
    fn least_squares_minimum_norm_on_singular_design() {
        // Two identical columns: infinitely many solutions; min-norm splits evenly.
        let design = array![[1.0, 1.0], [2.0, 2.0]];
        let y = array![2.0, 4.0];
        let w = array![1.0, 1.0];
        let sol = least_squares(design.view(), y.view(), w.view()).unwrap();
        assert!((sol[0] - 1.0).abs() < 1e-10);
        assert!((sol[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn residual_orthogonal_to_weighted_column_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let design = random_matrix(&mut rng, 12, 4);
            let y = random_matrix(&mut rng, 12, 1).column(0).to_owned();
            let w = Array1::from_shape_fn(12, |_| rng.gen_range(0.0..2.0));
            let sol = least_squares(design.view(), y.view(), w.view()).unwrap();
            let resid = &y - &design.dot(&sol);
            let weighted = Array1::from_iter(resid.iter().zip(w.iter()).map(|(r, w)| r * w));
            let proj = design.t().dot(&weighted);
            let scale = y.mapv(|v| v * v).sum().sqrt().max(1.0);
            assert!(proj.iter().all(|v| v.abs() <= 1e-8 * scale));
        }
    }

    #[test]
    fn factorization_objective_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_symmetric(&mut rng, 6);
        let f = truncated_psd_factorization(&s, 3).unwrap();
        let q = random_orthogonal(&mut rng, 3);
        let rotated = f.x.dot(q.as_array());
        let r1 = f.x.dot(&f.x.t());
        let r2 = rotated.dot(&rotated.t());
        assert!(max_abs_diff(&r1, &r2) < 1e-10);
    }

    #[test]
    fn polar_factor_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_matrix(&mut rng, 4, 4);
        let q1 = polar_factor(&a).unwrap();
        let q2 = polar_factor(q1.as_array()).unwrap();
        assert!(max_abs_diff(q1.as_array(), q2.as_array()) < 1e-12);
    }

    #[test]
    fn residual_spectral_norm_matches_spectrum() {
        let s = SymmetricMatrix::new(array![
            [3.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, -2.0]
        ])
        .unwrap();
        let f = truncated_psd_factorization(&s, 1).unwrap();
        assert!((f.residual_spectral_norm() - 2.0).abs() < 1e-12);
    }
}
