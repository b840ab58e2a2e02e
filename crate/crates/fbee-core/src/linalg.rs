//! Small dense linear algebra: LU solves for the exact successor-measure
//! computation and a symmetric Jacobi eigensolver for covariance summaries.
//!
//! Sizes are capped by construction (state-action spaces ≤ ~2000 rows,
//! covariance dimension ≤ 64), so plain dense routines are the right tool.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: lhs is {n}x{n}, rhs has {rhs_rows} rows")]
    RhsMismatch { n: usize, rhs_rows: usize },
    #[error("matrix is singular to working precision (pivot {pivot:.3e} at column {col})")]
    Singular { pivot: f64, col: usize },
}

/// LU factorization with partial pivoting, solving `A X = B` for a matrix
/// right-hand side. `A` is consumed as the factorization workspace.
pub fn solve_lu(mut a: Array2<f64>, mut b: Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::NotSquare { rows: a.nrows(), cols: a.ncols() });
    }
    if b.nrows() != n {
        return Err(LinalgError::RhsMismatch { n, rhs_rows: b.nrows() });
    }
    let m = b.ncols();

    for col in 0..n {
        // Pivot search.
        let mut piv = col;
        let mut best = a[[col, col]].abs();
        for r in col + 1..n {
            let v = a[[r, col]].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(LinalgError::Singular { pivot: best, col });
        }
        if piv != col {
            for c in 0..n {
                a.swap([col, c], [piv, c]);
            }
            for c in 0..m {
                b.swap([col, c], [piv, c]);
            }
        }
        let inv_p = 1.0 / a[[col, col]];
        for r in col + 1..n {
            let factor = a[[r, col]] * inv_p;
            if factor == 0.0 {
                continue;
            }
            a[[r, col]] = 0.0;
            for c in col + 1..n {
                a[[r, c]] -= factor * a[[col, c]];
            }
            for c in 0..m {
                b[[r, c]] -= factor * b[[col, c]];
            }
        }
    }

    // Back substitution.
    for col in (0..n).rev() {
        let inv_p = 1.0 / a[[col, col]];
        for c in 0..m {
            b[[col, c]] *= inv_p;
        }
        for r in 0..col {
            let factor = a[[r, col]];
            if factor == 0.0 {
                continue;
            }
            for c in 0..m {
                b[[r, c]] -= factor * b[[col, c]];
            }
        }
    }
    Ok(b)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted descending. Off-diagonal mass below 1e-12 of
/// the initial Frobenius norm counts as converged.
pub fn symmetric_eigenvalues(mat: &Array2<f64>) -> Result<Array1<f64>, LinalgError> {
    let n = mat.nrows();
    if mat.ncols() != n {
        return Err(LinalgError::NotSquare { rows: mat.nrows(), cols: mat.ncols() });
    }
    let mut a = mat.clone();
    if n == 0 {
        return Ok(Array1::zeros(0));
    }
    let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = (frob * 1e-14).max(1e-300);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }

    let mut eigs: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(Array1::from(eigs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_small_system() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![[1.0], [2.0]];
        let x = solve_lu(a.clone(), b.clone()).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn solve_matches_inverse_on_random_system() {
        use rand::Rng;
        let mut rng = crate::seeding::derive_rng(11, "linalg-test");
        let n = 17;
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                a[[i, j]] = rng.gen_range(-1.0..1.0);
            }
            a[[i, i]] += 5.0; // diagonally dominant, well conditioned
        }
        let mut b = Array2::zeros((n, 3));
        b.mapv_inplace(|_: f64| rng.gen_range(-1.0..1.0));
        let x = solve_lu(a.clone(), b.clone()).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn singular_rejected() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let b = array![[1.0], [1.0]];
        assert!(matches!(solve_lu(a, b), Err(LinalgError::Singular { .. })));
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let a = array![[3.0, 0.0], [0.0, -1.0]];
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-12);
        assert!((e[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_match_trace_and_det_2x2() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-10);
        assert!((e[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn eigenvalues_of_rank_one_outer_product() {
        // vvᵀ has eigenvalues {‖v‖², 0, 0}
        let v = array![1.0, -2.0, 2.0];
        let n = v.len();
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                a[[i, j]] = v[i] * v[j];
            }
        }
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 9.0).abs() < 1e-10);
        assert!(e[1].abs() < 1e-10);
        assert!(e[2].abs() < 1e-10);
    }
}
