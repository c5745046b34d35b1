//! ℓ1-regularized least squares by cyclic coordinate descent.
//!
//! Solves `min_α ½‖x − Dα‖² + λ‖α‖₁`. Iteration stops once the KKT
//! conditions hold to within `tol`:
//!
//! * `|d_lᵀ(x − Dα) − λ·sign(α_l)| ≤ tol` for `α_l ≠ 0`
//! * `|d_lᵀ(x − Dα)| ≤ λ + tol` for `α_l = 0`

use super::Dictionary;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LassoOptions {
    pub lambda: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl LassoOptions {
    pub fn new(lambda: f64, tol: f64) -> Self {
        Self {
            lambda,
            tol,
            max_sweeps: 1000,
        }
    }
}

#[inline]
pub fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// Sparse coder bound to one dictionary; caches the Gram matrix `DᵀD`.
pub struct LassoSolver<'a> {
    dict: &'a Dictionary,
    gram: Vec<f64>,
}

/// Outcome of a single solve.
#[derive(Clone, Copy, Debug)]
pub struct Solve {
    pub sweeps: usize,
    pub residual: f64,
    pub converged: bool,
}

impl<'a> LassoSolver<'a> {
    pub fn new(dict: &'a Dictionary) -> Self {
        let l = dict.num_atoms();
        let mut gram = vec![0.0; l * l];
        for a in 0..l {
            for b in a..l {
                let v = dot(dict.atom(a), dict.atom(b));
                gram[a * l + b] = v;
                gram[b * l + a] = v;
            }
        }
        Self { dict, gram }
    }

    pub fn correlations(&self, patch: &[f64]) -> Vec<f64> {
        (0..self.dict.num_atoms())
            .map(|l| dot(self.dict.atom(l), patch))
            .collect()
    }

    /// Runs coordinate descent from the starting point already in `alpha`.
    /// Never increases the objective, whether or not it converges.
    pub fn solve_warm(&self, patch: &[f64], alpha: &mut [f64], opts: &LassoOptions) -> Solve {
        let l = self.dict.num_atoms();
        let corr = self.correlations(patch);
        let mut q = self.gram_times(alpha);
        let mut residual = f64::INFINITY;
        for sweep in 1..=opts.max_sweeps {
            for j in 0..l {
                let gjj = self.gram[j * l + j];
                if gjj <= 0.0 {
                    continue;
                }
                let rho = corr[j] - q[j] + gjj * alpha[j];
                let next = soft_threshold(rho, opts.lambda) / gjj;
                let delta = next - alpha[j];
                if delta != 0.0 {
                    alpha[j] = next;
                    let col = &self.gram[j * l..(j + 1) * l];
                    for (qk, &g) in q.iter_mut().zip(col) {
                        *qk += delta * g;
                    }
                }
            }
            residual = kkt_violation(&corr, &q, alpha, opts.lambda);
            if residual <= opts.tol {
                // confirm against a freshly accumulated Gα
                q = self.gram_times(alpha);
                residual = kkt_violation(&corr, &q, alpha, opts.lambda);
                if residual <= opts.tol {
                    return Solve {
                        sweeps: sweep,
                        residual,
                        converged: true,
                    };
                }
            }
        }
        Solve {
            sweeps: opts.max_sweeps,
            residual,
            converged: false,
        }
    }

    pub fn solve(&self, patch: &[f64], opts: &LassoOptions) -> Result<Vec<f64>> {
        let mut alpha = vec![0.0; self.dict.num_atoms()];
        let s = self.solve_warm(patch, &mut alpha, opts);
        if !s.converged {
            return Err(Error::LassoNotConverged {
                iterations: s.sweeps,
                residual: s.residual,
            });
        }
        Ok(alpha)
    }

    fn gram_times(&self, alpha: &[f64]) -> Vec<f64> {
        let l = alpha.len();
        let mut q = vec![0.0; l];
        for (j, &a) in alpha.iter().enumerate() {
            if a != 0.0 {
                for (qk, &g) in q.iter_mut().zip(&self.gram[j * l..(j + 1) * l]) {
                    *qk += a * g;
                }
            }
        }
        q
    }
}

fn kkt_violation(corr: &[f64], q: &[f64], alpha: &[f64], lambda: f64) -> f64 {
    corr.iter()
        .zip(q)
        .zip(alpha)
        .map(|((&c, &gq), &a)| {
            let r = c - gq;
            if a > 0.0 {
                (r - lambda).abs()
            } else if a < 0.0 {
                (r + lambda).abs()
            } else {
                (r.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Largest KKT violation of `alpha` for `patch`, computed from the explicit
/// residual `x − Dα` rather than the solver's bookkeeping.
pub fn kkt_residual(patch: &[f64], dict: &Dictionary, alpha: &[f64], lambda: f64) -> f64 {
    let resid = dict.residual(patch, alpha);
    (0..dict.num_atoms())
        .map(|l| {
            let r = dot(dict.atom(l), &resid);
            let a = alpha[l];
            if a > 0.0 {
                (r - lambda).abs()
            } else if a < 0.0 {
                (r + lambda).abs()
            } else {
                (r.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Lasso code of one patch (`tol` on the KKT residual, at most 1000 sweeps).
pub fn sparse_code(patch: &[f64], dict: &Dictionary, lambda: f64, tol: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("lasso lambda must be positive"));
    }
    if patch.len() != dict.patch_dim() {
        return Err(Error::shape("sparse_code", &[patch.len()], &[dict.patch_dim()]));
    }
    LassoSolver::new(dict).solve(patch, &LassoOptions::new(lambda, tol))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_atom_soft_threshold() {
        let d = Dictionary::from_columns(2, vec![1.0, 0.0]).unwrap();
        let a = sparse_code(&[2.0, 0.0], &d, 1.0, 1e-9).unwrap();
        assert_eq!(a, vec![1.0]);
        let a = sparse_code(&[-0.5, 3.0], &d, 1.0, 1e-9).unwrap();
        assert_eq!(a, vec![0.0]);
    }

    #[test]
    fn large_lambda_gives_zero_code() {
        let d = Dictionary::from_columns_normalized(
            3,
            vec![1.0, 2.0, 0.5, -1.0, 0.0, 1.0, 0.3, 0.3, -0.9, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let x = [0.4, -0.7, 0.2];
        let lambda = (0..4).map(|l| dot(d.atom(l), &x).abs()).fold(0.0, f64::max);
        let a = sparse_code(&x, &d, lambda, 1e-9).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn solution_satisfies_kkt() {
        let d = Dictionary::from_columns_normalized(
            3,
            vec![1.0, 2.0, 0.5, -1.0, 0.0, 1.0, 0.3, 0.3, -0.9, 0.0, 1.0, 1.0, 0.2, -0.5, 0.1],
        )
        .unwrap();
        let x = [1.4, -0.7, 0.9];
        let a = sparse_code(&x, &d, 0.1, 1e-8).unwrap();
        assert!(kkt_residual(&x, &d, &a, 0.1) <= 1e-8);
        assert!(a.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = Dictionary::from_columns(2, vec![1.0, 0.0]).unwrap();
        assert!(sparse_code(&[1.0, 0.0], &d, 0.0, 1e-6).is_err());
        assert!(sparse_code(&[1.0], &d, 1.0, 1e-6).is_err());
    }

    #[test]
    fn non_convergence_reports_residual() {
        // two nearly collinear atoms make coordinate descent crawl
        let d = Dictionary::from_columns_normalized(2, vec![1.0, 0.0, 1.0, 1e-4]).unwrap();
        let solver = LassoSolver::new(&d);
        let opts = LassoOptions {
            lambda: 1e-3,
            tol: 1e-14,
            max_sweeps: 3,
        };
        match solver.solve(&[1.0, 1.0], &opts) {
            Err(Error::LassoNotConverged { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 1e-14);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
