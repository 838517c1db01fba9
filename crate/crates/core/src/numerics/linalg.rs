//! Dense factorizations for the small matrices that appear in embedding
//! problems: Jacobians are `D×d` with `d ≤ 3`, covariances at most `64×64`.

use super::{Matrix, NumericsError, Real};

/// Largest size accepted by [`sym_eigendecomp`].
pub const MAX_EIGEN_SIZE: usize = 64;

/// Gram matrices whose eigenvalue ratio falls below this are rejected by
/// [`half_logdet_gram`]; no jitter is ever added.
pub const GRAM_RATIO_FLOOR: f64 = 1e-12;

/// Singular value ratio below which a Jacobian is treated as rank deficient.
pub const PINV_RATIO_FLOOR: f64 = 1e-10;

/// Eigenvalues (descending) and orthonormal eigenvectors as matrix columns.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eigendecomp(m: &Matrix) -> Result<SymEigen, NumericsError> {
    let (n, c) = m.shape();
    if n != c {
        return Err(NumericsError::Shape(format!(
            "eigendecomposition needs a square matrix, got {n}x{c}"
        )));
    }
    if n == 0 || n > MAX_EIGEN_SIZE {
        return Err(NumericsError::Shape(format!(
            "eigendecomposition supports sizes 1..={MAX_EIGEN_SIZE}, got {n}"
        )));
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFinite("matrix has non-finite entries".into()));
    }
    let asym = m.max_asymmetry().unwrap_or(0.0);
    if asym > 1e-10 * m.max_abs().max(1.0) {
        return Err(NumericsError::NotSymmetric { max_asymmetry: asym });
    }

    let mut a = m.clone();
    // symmetrize exactly so rotations see a consistent matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = cs * akp - sn * akq;
                    a[(k, q)] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = cs * apk - sn * aqk;
                    a[(q, k)] = sn * apk + cs * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = cs * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + cs * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        // fix the sign so the largest-magnitude component is positive
        let col = v.col(old_j);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, new_j)] = s * col[i];
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Lower Cholesky factor of a symmetric positive definite matrix given as
/// row-major `n×n` data. Works on any [`Real`] so it can be taped.
pub fn cholesky<T: Real>(a: &[T], n: usize) -> Result<Vec<T>, NumericsError> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![T::cst(0.0); n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag = diag - l[j * n + k] * l[j * n + k];
        }
        if !(diag.value() > 0.0) {
            return Err(NumericsError::NotPositiveDefinite {
                smallest_eigenvalue: diag.value(),
            });
        }
        let djj = diag.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s = s - l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Row-major Gram matrix `JᵀJ` of a row-major `rows×cols` Jacobian.
pub fn gram_of<T: Real>(jac: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut g = vec![T::cst(0.0); cols * cols];
    let columns: Vec<Vec<T>> = (0..cols)
        .map(|j| (0..rows).map(|i| jac[i * cols + j]).collect())
        .collect();
    for a in 0..cols {
        for b in a..cols {
            let v = T::dot(&columns[a], &columns[b]);
            g[a * cols + b] = v;
            g[b * cols + a] = v;
        }
    }
    g
}

/// `½ log det(JᵀJ)` through a Cholesky factorization of the Gram matrix.
///
/// The Jacobian is row-major `rows×cols`. Fails (rather than regularizing)
/// when the Gram spectrum ratio drops below [`GRAM_RATIO_FLOOR`].
pub fn half_logdet_gram_of<T: Real>(jac: &[T], rows: usize, cols: usize) -> Result<T, NumericsError> {
    let g = gram_of(jac, rows, cols);
    if cols == 1 {
        let v = g[0].value();
        if !(v > 0.0) || !v.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { smallest_eigenvalue: v });
        }
        return Ok(g[0].ln() * 0.5);
    }
    let gv: Vec<f64> = g.iter().map(Real::value).collect();
    let eig = sym_eigendecomp(&Matrix::from_row_major(cols, cols, gv)?)?;
    let (hi, lo) = (eig.values[0], eig.values[cols - 1]);
    if !(lo > GRAM_RATIO_FLOOR * hi) {
        return Err(NumericsError::NotPositiveDefinite {
            smallest_eigenvalue: lo,
        });
    }
    let l = cholesky(&g, cols)?;
    let logs: Vec<T> = (0..cols).map(|i| l[i * cols + i].ln()).collect();
    Ok(T::sum(&logs))
}

/// `½ log det(JᵀJ)` for a plain matrix.
pub fn half_logdet_gram(j: &Matrix) -> Result<f64, NumericsError> {
    half_logdet_gram_of(j.as_slice(), j.rows(), j.cols())
}

/// Singular values (descending) by one-sided Jacobi rotations.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut u = m.clone();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    alpha += u[(i, p)] * u[(i, p)];
                    beta += u[(i, q)] * u[(i, q)];
                    gamma += u[(i, p)] * u[(i, q)];
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    u[(i, p)] = c * up - s * uq;
                    u[(i, q)] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| u[(i, j)] * u[(i, j)]).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Thin Householder QR of a tall matrix: `m = Q R` with `Q` of shape
/// `rows×cols` (orthonormal columns) and `R` upper triangular `cols×cols`.
pub fn qr_thin(m: &Matrix) -> Result<(Matrix, Matrix), NumericsError> {
    let (rows, cols) = m.shape();
    if cols > rows {
        return Err(NumericsError::Shape(format!(
            "QR needs rows >= cols, got {rows}x{cols}"
        )));
    }
    let mut r = m.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for k in 0..cols {
        let x: Vec<f64> = (k..rows).map(|i| r[(i, k)]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = x.clone();
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            for a in &mut v {
                *a /= vnorm;
            }
            for j in k..cols {
                let dot: f64 = (k..rows).map(|i| v[i - k] * r[(i, j)]).sum();
                for i in k..rows {
                    r[(i, j)] -= 2.0 * v[i - k] * dot;
                }
            }
        }
        reflectors.push(v);
    }
    let mut q = Matrix::zeros(rows, cols);
    for j in 0..cols {
        q[(j, j)] = 1.0;
    }
    for k in (0..cols).rev() {
        let v = &reflectors[k];
        for j in 0..cols {
            let dot: f64 = (k..rows).map(|i| v[i - k] * q[(i, j)]).sum();
            for i in k..rows {
                q[(i, j)] -= 2.0 * v[i - k] * dot;
            }
        }
    }
    let mut rr = Matrix::zeros(cols, cols);
    for i in 0..cols {
        for j in i..cols {
            rr[(i, j)] = r[(i, j)];
        }
    }
    Ok((q, rr))
}

/// Moore-Penrose pseudoinverse `(JᵀJ)⁻¹Jᵀ` of a full-column-rank matrix,
/// computed from a QR factorization (`R⁻¹Qᵀ`).
pub fn pseudoinverse(j: &Matrix) -> Result<Matrix, NumericsError> {
    let (rows, cols) = j.shape();
    if cols == 0 || cols > rows {
        return Err(NumericsError::Shape(format!(
            "pseudoinverse needs a tall full-column-rank matrix, got {rows}x{cols}"
        )));
    }
    if !j.is_finite() {
        return Err(NumericsError::NonFinite("Jacobian has non-finite entries".into()));
    }
    let sv = singular_values(j);
    let ratio = sv[cols - 1] / sv[0];
    if !(ratio > PINV_RATIO_FLOOR) {
        return Err(NumericsError::RankDeficient { condition: 1.0 / ratio });
    }
    let (q, r) = qr_thin(j)?;
    // solve R X = Qᵀ by back substitution
    let qt = q.transpose();
    let mut x = Matrix::zeros(cols, rows);
    for c in 0..rows {
        for i in (0..cols).rev() {
            let mut s = qt[(i, c)];
            for k in (i + 1)..cols {
                s -= r[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / r[(i, i)];
        }
    }
    Ok(x)
}

/// Inverse of a symmetric positive definite matrix through Cholesky.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    let l = cholesky(a.as_slice(), n)?;
    let mut inv = Matrix::zeros(n, n);
    for c in 0..n {
        // forward: L y = e_c
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * inv[(k, c)];
            }
            inv[(i, c)] = s / l[i * n + i];
        }
    }
    Ok(inv)
}

/// `log det` of a symmetric positive definite matrix.
pub fn spd_logdet(a: &Matrix) -> Result<f64, NumericsError> {
    let n = a.rows();
    let l = cholesky(a.as_slice(), n)?;
    Ok(2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>())
}

/// Determinant by partial-pivot elimination (small square matrices).
pub fn determinant(a: &Matrix) -> f64 {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let mut m = a.clone();
    let mut det = 1.0;
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| m[(i, k)].abs().total_cmp(&m[(j, k)].abs()))
            .unwrap();
        if m[(piv, k)] == 0.0 {
            return 0.0;
        }
        if piv != k {
            for j in 0..n {
                let t = m[(k, j)];
                m[(k, j)] = m[(piv, j)];
                m[(piv, j)] = t;
            }
            det = -det;
        }
        det *= m[(k, k)];
        for i in (k + 1)..n {
            let f = m[(i, k)] / m[(k, k)];
            for j in k..n {
                m[(i, j)] -= f * m[(k, j)];
            }
        }
    }
    det
}

/// Inverse of a general small square matrix (Gauss-Jordan, partial pivoting).
pub fn inverse(a: &Matrix) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    if n != a.cols() {
        return Err(NumericsError::Shape("inverse needs a square matrix".into()));
    }
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| m[(i, k)].abs().total_cmp(&m[(j, k)].abs()))
            .unwrap();
        if m[(piv, k)].abs() <= 1e-14 * scale {
            return Err(NumericsError::Singular);
        }
        for j in 0..n {
            let t = m[(k, j)];
            m[(k, j)] = m[(piv, j)];
            m[(piv, j)] = t;
            let t = inv[(k, j)];
            inv[(k, j)] = inv[(piv, j)];
            inv[(piv, j)] = t;
        }
        let p = m[(k, k)];
        for j in 0..n {
            m[(k, j)] /= p;
            inv[(k, j)] /= p;
        }
        for i in 0..n {
            if i != k {
                let f = m[(i, k)];
                if f != 0.0 {
                    for j in 0..n {
                        m[(i, j)] -= f * m[(k, j)];
                        inv[(i, j)] -= f * inv[(k, j)];
                    }
                }
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn eigen_diagonal_and_identity() {
        let e = sym_eigendecomp(&Matrix::diag(&[1.0, 4.0])).unwrap();
        assert_eq!(e.values, vec![4.0, 1.0]);
        assert!(close(e.vectors[(1, 0)].abs(), 1.0, 1e-15));
        assert!(close(e.vectors[(0, 1)].abs(), 1.0, 1e-15));

        let e = sym_eigendecomp(&Matrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.5, 1.0]]).unwrap();
        match sym_eigendecomp(&m) {
            Err(NumericsError::NotSymmetric { max_asymmetry }) => assert!(close(max_asymmetry, 0.5, 1e-15)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pseudoinverse_examples() {
        let v = Matrix::column(&[3.0, 4.0]);
        let p = pseudoinverse(&v).unwrap();
        assert!(close(p[(0, 0)], 0.12, 1e-15) && close(p[(0, 1)], 0.16, 1e-15));

        let j = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let p = pseudoinverse(&j).unwrap();
        let want = [1.0, 0.0, 0.0, 0.0, 0.5, 0.0];
        for (a, b) in p.as_slice().iter().zip(want) {
            assert!(close(*a, b, 1e-15));
        }
    }

    #[test]
    fn pseudoinverse_rejects_rank_deficiency() {
        let j = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(pseudoinverse(&j), Err(NumericsError::RankDeficient { .. })));
    }

    #[test]
    fn half_logdet_examples() {
        let j = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        assert!(close(half_logdet_gram(&j).unwrap(), 2f64.ln(), 1e-15));
        let j = Matrix::column(&[1.0, 1.0, 1.0]);
        assert!(close(half_logdet_gram(&j).unwrap(), 0.5 * 3f64.ln(), 1e-15));
        let j = Matrix::column(&[2.0, 0.0]);
        assert!(close(half_logdet_gram(&j).unwrap(), 2f64.ln(), 1e-15));
    }

    #[test]
    fn half_logdet_rejects_degenerate_gram() {
        let j = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0 + 1e-9]]).unwrap();
        match half_logdet_gram(&j) {
            Err(NumericsError::NotPositiveDefinite { smallest_eigenvalue }) => {
                assert!(smallest_eigenvalue < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(half_logdet_gram(&Matrix::column(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn singular_values_of_diagonal() {
        let j = Matrix::from_rows(&[vec![0.0, 3.0], vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let sv = singular_values(&j);
        assert!(close(sv[0], 3.0, 1e-14) && close(sv[1], 2.0, 1e-14));
    }

    #[test]
    fn small_inverses() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let i1 = spd_inverse(&a).unwrap();
        let i2 = inverse(&a).unwrap();
        let prod = a.matmul(&i1);
        assert!(prod.sub(&Matrix::identity(2)).max_abs() < 1e-15);
        assert!(i1.sub(&i2).max_abs() < 1e-15);
        assert!(close(determinant(&a), 5.0, 1e-14));
        assert!(close(spd_logdet(&a).unwrap(), 5f64.ln(), 1e-14));
    }
}
