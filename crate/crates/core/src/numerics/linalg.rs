//! Jacobi-family decompositions for rank checks, norms and eigen-truncation.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// All singular values of `a`, descending, length `min(rows, cols)`.
///
/// One-sided (Hestenes) Jacobi applied to the columns of `a` (or of `aᵀ`
/// when `a` is wide). Working on `a` directly rather than on its Gram matrix
/// keeps the absolute error near `eps * ||a||`, so tiny trailing singular
/// values are resolved down to roundoff rather than `sqrt(eps)`.
pub fn singular_values<T: Scalar>(a: &Matrix<T>) -> Result<Vec<T>> {
    // Columns of `work` are stored as rows so each rotation touches two
    // contiguous slices.
    let mut work = if a.rows() >= a.cols() {
        a.transpose()
    } else {
        a.clone()
    };
    let k = work.rows();
    let len = work.cols();
    if k == 0 {
        return Ok(Vec::new());
    }
    let eps = T::epsilon();
    let tol = eps * T::from_count(len.max(1)).sqrt();
    let fro2 = a.as_slice().iter().map(|&v| v * v).sum::<T>();
    // Pairs whose coupling sits below the working precision of ||a|| are
    // left alone; rotating them only shuffles roundoff.
    let negligible = eps * eps * fro2;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (alpha, beta, gamma) = {
                    let rp = work.row(p);
                    let rq = work.row(q);
                    (dot(rp, rp), dot(rq, rq), dot(rp, rq))
                };
                let scale = (alpha * beta).sqrt();
                if scale <= negligible || gamma.abs() <= tol * scale {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut work, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "one-sided Jacobi SVD",
            iterations: MAX_SWEEPS,
        });
    }
    let mut values: Vec<T> = (0..k)
        .map(|i| {
            let r = work.row(i);
            dot(r, r).sqrt()
        })
        .collect();
    values.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    Ok(values)
}

#[inline]
fn rotate_rows<T: Scalar>(m: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen<T> {
    /// Eigenvalues in the order Jacobi produced them (unsorted).
    pub values: Vec<T>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: Matrix<T>,
}

impl<T: Scalar> SymmetricEigen<T> {
    /// Indices sorted by decreasing `|eigenvalue|`.
    pub fn order_by_magnitude(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| {
            self.values[b]
                .abs()
                .partial_cmp(&self.values[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx
    }
}

/// Cyclic Jacobi eigensolver. Only the symmetric part `(a + aᵀ)/2` is used.
pub fn symmetric_eigen<T: Scalar>(a: &Matrix<T>) -> Result<SymmetricEigen<T>> {
    if !a.is_square() {
        return Err(Error::NonSquare {
            name: "symmetric_eigen input".into(),
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    let half = T::lit(0.5);
    let mut m = Matrix::from_fn(n, n, |i, j| (a[(i, j)] + a[(j, i)]) * half);
    let mut v = Matrix::<T>::identity(n);
    let scale = m.frobenius_norm();
    let threshold = T::epsilon() * scale;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= threshold || scale == T::zero() {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (T::one() + theta * theta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                // m <- Jᵀ m J with J the (p, q) rotation.
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = T::zero();
                m[(q, p)] = T::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "cyclic Jacobi eigensolver",
            iterations: MAX_SWEEPS,
        });
    }
    Ok(SymmetricEigen {
        values: (0..n).map(|i| m[(i, i)]).collect(),
        vectors: v,
    })
}

/// Orthonormal basis for the column span of `a` via modified Gram-Schmidt with
/// one reorthogonalization pass. Columns that collapse to zero are dropped.
pub fn orthonormal_columns<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    let (n, k) = a.shape();
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = a.col_to_vec(j);
        let original = dot(&v, &v).sqrt();
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(b, &v);
                for (x, &y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > T::lit(1e3) * T::epsilon() * original.max(T::one()) {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Matrix::from_fn(n, basis.len(), |i, j| basis[j][i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{gaussian_matrix, SeededRng};

    type M = Matrix<f64>;

    #[test]
    fn diagonal_and_zero_cases() {
        let sv = singular_values(&M::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(sv, vec![3.0, 1.0]);
        assert_eq!(singular_values(&M::zeros(2, 2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rank_one_closed_form() {
        let u = M::column(&[1.0, 2.0]);
        let v = M::column(&[2.0, 1.0]);
        let a = u.matmul_nt(&v).unwrap();
        let sv = singular_values(&a).unwrap();
        assert!((sv[0] - 5.0).abs() < 1e-14, "{sv:?}");
        assert!(sv[1].abs() < 1e-14, "{sv:?}");
    }

    #[test]
    fn wide_and_tall_agree() {
        let mut rng = SeededRng::new(5);
        let a = gaussian_matrix::<f64>(7, 3, 1.0, &mut rng);
        let s1 = singular_values(&a).unwrap();
        let s2 = singular_values(&a.transpose()).unwrap();
        assert_eq!(s1.len(), 3);
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn known_spectrum_recovered_to_ten_digits() {
        // A = U diag(s) Vᵀ with orthonormal U, V.
        let n = 96;
        let mut rng = SeededRng::new(17);
        let u = orthonormal_columns(&gaussian_matrix::<f64>(n, n, 1.0, &mut rng));
        let v = orthonormal_columns(&gaussian_matrix::<f64>(n, n, 1.0, &mut rng));
        let spectrum: Vec<f64> = (0..n).map(|i| 10f64.powf(-(i as f64) / 24.0)).collect();
        let a = u
            .matmul(&M::diag(&spectrum))
            .unwrap()
            .matmul_nt(&v)
            .unwrap();
        let sv = singular_values(&a).unwrap();
        for (got, want) in sv.iter().zip(&spectrum) {
            assert!(((got - want) / want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn eigen_reconstructs() {
        let mut rng = SeededRng::new(8);
        let g = gaussian_matrix::<f64>(10, 10, 1.0, &mut rng);
        let s = g.add(&g.transpose()).unwrap();
        let e = symmetric_eigen(&s).unwrap();
        let rebuilt = e
            .vectors
            .matmul(&M::diag(&e.values))
            .unwrap()
            .matmul_nt(&e.vectors)
            .unwrap();
        assert!(rebuilt.max_abs_diff(&s).unwrap() < 1e-12);
        let vtv = e.vectors.matmul_tn(&e.vectors).unwrap();
        assert!(vtv.max_abs_diff(&M::identity(10)).unwrap() < 1e-13);
    }

    #[test]
    fn eigen_rejects_non_square() {
        assert!(symmetric_eigen(&M::zeros(2, 3)).is_err());
    }
}
