//! Shared dense linear algebra helpers.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used by every pseudo-inverse solve.
pub const PINV_RTOL: f64 = 1e-10;

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn symmetric_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let n = sym.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        sym.eigenvalues[b]
            .partial_cmp(&sym.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = DVector::from_iterator(n, order.iter().map(|&i| sym.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(m.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &sym.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Eigenvalues and eigenvectors of the sample covariance XᵀX/(n−1) of a
/// centered data matrix, returning the top min(n,p) components.
///
/// For n < p the decomposition goes through the n×n Gram matrix XXᵀ/(n−1)
/// so the cost never exceeds O(min(n,p)³).
pub fn sample_cov_eigen(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, p) = (x.nrows(), x.ncols());
    let denom = (n - 1) as f64;
    if p <= n {
        let s = x.transpose() * x / denom;
        symmetric_eigen_sorted(&s)
    } else {
        let g = x * x.transpose() / denom;
        let (vals, u) = symmetric_eigen_sorted(&g);
        let mut vecs = DMatrix::zeros(p, n);
        for j in 0..n {
            let lam = vals[j].max(0.0);
            let col = x.transpose() * u.column(j);
            let norm = (denom * lam).sqrt();
            if norm > 1e-300 {
                vecs.set_column(j, &(col / norm));
            }
        }
        (vals, vecs)
    }
}

/// Orthonormal basis for the orthogonal complement of the column space of
/// `m` (p×q, full column rank), computed from Householder reflectors of the
/// QR factorization. Columns follow a fixed sign convention: the
/// largest-magnitude entry of each column is positive; among ties the lowest
/// row index wins.
pub fn orthonormal_complement(m: &DMatrix<f64>) -> Result<DMatrix<f64>, String> {
    let (p, q) = (m.nrows(), m.ncols());
    if q >= p {
        return Err(format!("complement is empty: {q} columns in dimension {p}"));
    }
    if q == 0 {
        return Ok(DMatrix::identity(p, p));
    }
    // Householder QR on a working copy; reflectors stored column by column.
    let mut a = m.clone();
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(q);
    let max_norm = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for k in 0..q {
        let x = DVector::from_fn(p - k, |i, _| a[(k + i, k)]);
        let xnorm = x.norm();
        if xnorm <= 1e-12 * max_norm.max(1.0) {
            return Err("loading matrix is rank deficient".to_string());
        }
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.norm();
        if vnorm > 0.0 {
            v /= vnorm;
        }
        // Apply H = I − 2vvᵀ to the trailing block.
        for j in k..q {
            let col = DVector::from_fn(p - k, |i, _| a[(k + i, j)]);
            let coef = 2.0 * v.dot(&col);
            for i in 0..p - k {
                a[(k + i, j)] -= coef * v[i];
            }
        }
        reflectors.push(v);
    }
    // Columns q..p of the full Q factor: apply H₁…H_q to the trailing
    // identity columns (reflectors applied in reverse order).
    let mut b = DMatrix::zeros(p, p - q);
    for (jc, j) in (q..p).enumerate() {
        let mut e = DVector::zeros(p);
        e[j] = 1.0;
        for k in (0..q).rev() {
            let v = &reflectors[k];
            let mut coef = 0.0;
            for i in 0..p - k {
                coef += v[i] * e[k + i];
            }
            coef *= 2.0;
            for i in 0..p - k {
                e[k + i] -= coef * v[i];
            }
        }
        b.set_column(jc, &e);
    }
    fix_column_signs(&mut b);
    Ok(b)
}

/// Flip each column so its largest-magnitude entry is positive; among ties
/// the lowest row index wins.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            if a > best_abs + 1e-15 {
                best_abs = a;
                best = i;
            }
        }
        if m[(best, j)] < 0.0 {
            for i in 0..m.nrows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

/// Orthonormal basis of the column space of `s`, dropping directions whose
/// singular value falls below `PINV_RTOL` times the largest. Returns the
/// basis (n×r) and its rank r.
pub fn colspace_basis(s: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (n, m) = (s.nrows(), s.ncols());
    if m <= n {
        let svd = s.clone().svd(true, false);
        let u = svd.u.as_ref().expect("svd u requested");
        let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > PINV_RTOL * smax)
            .collect();
        let mut q = DMatrix::zeros(n, keep.len());
        for (dst, &src) in keep.iter().enumerate() {
            q.set_column(dst, &u.column(src));
        }
        let r = keep.len();
        (q, r)
    } else {
        // Wide matrix: eigendecompose the n×n outer product instead.
        let g = s * s.transpose();
        let (vals, vecs) = symmetric_eigen_sorted(&g);
        let lmax = vals.iter().cloned().fold(0.0f64, f64::max);
        let cutoff = (PINV_RTOL * PINV_RTOL) * lmax;
        let r = (0..vals.len()).take_while(|&i| vals[i] > cutoff).count();
        let q = vecs.columns(0, r).into_owned();
        (q, r)
    }
}

/// Minimum-norm least-squares solution of A x = y via SVD with the shared
/// relative tolerance.
pub fn lstsq(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let mut sv = svd.singular_values.clone();
    for v in sv.iter_mut() {
        if *v <= PINV_RTOL * smax {
            *v = 0.0;
        }
    }
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut z = u.transpose() * y;
    for i in 0..sv.len() {
        if sv[i] > 0.0 {
            z[i] /= sv[i];
        } else {
            z[i] = 0.0;
        }
    }
    vt.transpose() * z
}

/// Solve the symmetric positive semidefinite system G x = c, falling back to
/// an eigen-based pseudo-inverse when Cholesky fails.
pub fn solve_psd(g: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = nalgebra::Cholesky::new(g.clone()) {
        return chol.solve(c);
    }
    let (vals, vecs) = symmetric_eigen_sorted(g);
    let lmax = vals.iter().cloned().fold(0.0f64, f64::max);
    let mut z = vecs.transpose() * c;
    for i in 0..vals.len() {
        if vals[i] > PINV_RTOL * lmax {
            z[i] /= vals[i];
        } else {
            z[i] = 0.0;
        }
    }
    &vecs * z
}

/// Pseudo-inverse of a symmetric PSD matrix.
pub fn solve_psd_matrix(g: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = nalgebra::Cholesky::new(g.clone()) {
        return chol.inverse();
    }
    let (vals, vecs) = symmetric_eigen_sorted(g);
    let lmax = vals.iter().cloned().fold(0.0f64, f64::max);
    let mut scaled = vecs.clone();
    for j in 0..vals.len() {
        let inv = if vals[j] > PINV_RTOL * lmax {
            1.0 / vals[j]
        } else {
            0.0
        };
        for i in 0..vecs.nrows() {
            scaled[(i, j)] *= inv;
        }
    }
    scaled * vecs.transpose()
}

/// Condition number estimate (ratio of extreme eigenvalues) of a symmetric
/// PSD matrix; infinity when numerically singular.
pub fn psd_condition(g: &DMatrix<f64>) -> f64 {
    let (vals, _) = symmetric_eigen_sorted(g);
    let lmax = vals[0].max(0.0);
    let lmin = vals[vals.len() - 1].max(0.0);
    if lmin <= PINV_RTOL * lmax {
        f64::INFINITY
    } else {
        lmax / lmin
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_of_standard_basis_vector() {
        let lam = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let b = orthonormal_complement(&lam).unwrap();
        assert_eq!(b.shape(), (3, 2));
        let btb = b.transpose() * &b;
        assert!((btb - DMatrix::identity(2, 2)).abs().max() < 1e-12);
        let cross = lam.transpose() * &b;
        assert!(cross.abs().max() < 1e-12);
    }

    #[test]
    fn complement_rejects_square_input() {
        let lam = DMatrix::identity(3, 3);
        assert!(orthonormal_complement(&lam).is_err());
    }

    #[test]
    fn gram_trick_matches_direct_eigen() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 6;
        let p = 10;
        let x = DMatrix::from_fn(n, p, |_, _| rng.gen::<f64>() - 0.5);
        // Center columns.
        let mut xc = x.clone();
        for j in 0..p {
            let m = xc.column(j).mean();
            for i in 0..n {
                xc[(i, j)] -= m;
            }
        }
        let (vals, vecs) = sample_cov_eigen(&xc);
        let s = xc.transpose() * &xc / (n as f64 - 1.0);
        let (vals_d, _) = symmetric_eigen_sorted(&s);
        for i in 0..n {
            assert!((vals[i] - vals_d[i]).abs() < 1e-10);
            // Each returned vector is an eigenvector of S.
            if vals[i] > 1e-12 {
                let resid = &s * vecs.column(i) - vals[i] * vecs.column(i).into_owned();
                assert!(resid.abs().max() < 1e-8);
            }
        }
    }

    #[test]
    fn lstsq_minimum_norm() {
        let a = DMatrix::from_column_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let y = DVector::from_column_slice(&[1.0, 2.0]);
        let x = lstsq(&a, &y);
        let resid = &a * &x - y;
        assert!(resid.norm() < 1e-10);
    }
}
