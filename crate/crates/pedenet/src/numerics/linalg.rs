//! Cholesky factorization with a fixed jitter escalation schedule.
//!
//! Covariance estimates from small batches can be numerically semidefinite.
//! Factorization first runs with no regularization; on failure it retries
//! with `eps * I` added, doubling eps from 1e-6 up to six times. The chosen
//! eps is part of the factor so gradients differentiate exactly the function
//! that was evaluated. Only the lower triangle of the input is read.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;

pub const JITTER_BASE: f64 = 1e-6;
pub const JITTER_DOUBLINGS: usize = 6;

/// Lower-triangular factor L with `L L^T = sym(A) + eps*I`.
#[derive(Clone)]
pub struct CholFactor<S> {
    l: Vec<S>,
    n: usize,
    eps: f64,
}

fn attempt<S: Scalar>(a: &[S], n: usize, eps: S) -> Option<Vec<S>> {
    let mut max_diag = S::zero();
    for i in 0..n {
        let d = a[i * n + i] + eps;
        if d > max_diag {
            max_diag = d;
        }
    }
    if !(max_diag > S::zero()) {
        return None;
    }
    let tol = S::from_f64(S::PIVOT_RTOL) * max_diag;

    let mut l = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = if i == j { a[i * n + i] + eps } else { a[i * n + j] };
            for k in 0..j {
                acc = (-l[i * n + k]).mul_add(l[j * n + k], acc);
            }
            if i == j {
                if !(acc > tol) {
                    return None;
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Factor the symmetric matrix whose lower triangle is stored in `a`
/// (row-major n x n). `component` tags the error with which mixture
/// component could not be factored.
pub fn cholesky<S: Scalar>(a: &[S], n: usize, component: usize) -> Result<CholFactor<S>> {
    assert_eq!(a.len(), n * n);
    let mut eps = 0.0f64;
    for step in 0..=JITTER_DOUBLINGS {
        if let Some(l) = attempt(a, n, S::from_f64(eps)) {
            return Ok(CholFactor { l, n, eps });
        }
        eps = if step == 0 { JITTER_BASE } else { eps * 2.0 };
    }
    Err(Error::SingularMatrix { component })
}

impl<S: Scalar> CholFactor<S> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// log det(sym(A) + eps*I) = 2 sum ln L[i,i].
    pub fn logdet(&self) -> S {
        let mut acc = S::zero();
        for i in 0..self.n {
            acc += self.l[i * self.n + i].ln();
        }
        acc + acc
    }

    /// Solve (L L^T) X = B for B with `cols` columns, row-major.
    pub fn solve(&self, b: &[S], cols: usize) -> Vec<S> {
        let n = self.n;
        assert_eq!(b.len(), n * cols);
        let mut x = b.to_vec();
        // Forward: L y = b.
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[i * n + k];
                for c in 0..cols {
                    x[i * cols + c] = (-lik).mul_add(x[k * cols + c], x[i * cols + c]);
                }
            }
            let d = self.l[i * n + i];
            for c in 0..cols {
                x[i * cols + c] /= d;
            }
        }
        // Back: L^T x = y.
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = self.l[k * n + i];
                for c in 0..cols {
                    x[i * cols + c] = (-lki).mul_add(x[k * cols + c], x[i * cols + c]);
                }
            }
            let d = self.l[i * n + i];
            for c in 0..cols {
                x[i * cols + c] /= d;
            }
        }
        x
    }

    /// (sym(A) + eps*I)^-1, used by gradient rules.
    pub fn inverse(&self) -> Vec<S> {
        let n = self.n;
        let mut eye = vec![S::zero(); n * n];
        for i in 0..n {
            eye[i * n + i] = S::one();
        }
        self.solve(&eye, n)
    }
}
