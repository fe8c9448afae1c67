//! Cyclic Jacobi eigensolver for dense symmetric matrices.

use crate::scalar::Scalar;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    /// Eigenvalues in non-increasing order.
    pub values: Vec<T>,
    /// Row `i` is the unit eigenvector for `values[i]`.
    pub vectors: Vec<Vec<T>>,
}

const MAX_SWEEPS: usize = 100;

/// Decompose the symmetric `n×n` matrix `a` (row-major, only symmetry of the
/// input is assumed, not checked).
pub fn symmetric_eigen<T: Scalar>(a: &[T], n: usize) -> SymmetricEigen<T> {
    assert_eq!(a.len(), n * n, "matrix must be n*n");
    let mut m = a.to_vec();
    // v holds eigenvectors as columns.
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }

    let scale: T = m.iter().map(|x| *x * *x).sum::<T>().sqrt();
    let tiny = T::epsilon() * T::epsilon() * scale.max(T::min_positive_value());

    for _ in 0..MAX_SWEEPS {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<T>()
            .sqrt();
        if off <= tiny {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original index order for equal eigenvalues.
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    SymmetricEigen {
        values: order.iter().map(|&i| m[i * n + i]).collect(),
        vectors: order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect(),
    }
}
