//! BFGS with Armijo backtracking.

use nalgebra::{DMatrix, DVector};

pub trait Objective {
    /// `None` outside the admissible region.
    fn value(&self, x: &DVector<f64>) -> Option<f64>;
    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>>;
    /// Initial inverse-Hessian approximation at `x`; identity if `None`.
    fn inverse_hessian_guess(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Bound on the ∞-norm of the gradient at convergence.
    pub grad_tol: f64,
    /// Bound on `|f_k − f_{k−1}| / (1 + |f_k|)` at convergence.
    pub f_rel_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            f_rel_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Returns `None` if the starting point is inadmissible.
pub fn minimize<O: Objective>(obj: &O, x0: DVector<f64>, opts: BfgsOptions) -> Option<BfgsOutcome> {
    let n = x0.len();
    let mut x = x0;
    let mut f = obj.value(&x)?;
    let mut g = obj.gradient(&x)?;
    let fresh_h = |x: &DVector<f64>| obj.inverse_hessian_guess(x).unwrap_or_else(|| DMatrix::identity(n, n));
    let mut h = fresh_h(&x);
    let mut f_change = f64::INFINITY;

    for iter in 0..opts.max_iter {
        if inf_norm(&g) < opts.grad_tol && f_change <= opts.f_rel_tol {
            return Some(BfgsOutcome {
                x,
                f,
                gradient: g,
                iterations: iter,
                converged: true,
            });
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = fresh_h(&x);
            dir = -(&h * &g);
            slope = g.dot(&dir);
            if !(slope < 0.0) {
                h = DMatrix::identity(n, n);
                dir = -g.clone();
                slope = g.dot(&dir);
            }
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + alpha * &dir;
            if let Some(ft) = obj.value(&trial) {
                if ft <= f + ARMIJO_C1 * alpha * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // no progress possible along any admissible step
            let converged = inf_norm(&g) < opts.grad_tol;
            return Some(BfgsOutcome {
                x,
                f,
                gradient: g,
                iterations: iter,
                converged,
            });
        };
        let Some(g_new) = obj.gradient(&x_new) else {
            return Some(BfgsOutcome {
                x,
                f,
                gradient: g,
                iterations: iter,
                converged: false,
            });
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H − ρ(s·yᵀH + Hy·sᵀ) + (ρ²·yᵀHy + ρ)·s·sᵀ
            h -= rho * (&s * hy.transpose() + &hy * s.transpose());
            h += (rho * rho * yhy + rho) * (&s * s.transpose());
        }
        f_change = (f - f_new).abs() / (1.0 + f_new.abs());
        x = x_new;
        f = f_new;
        g = g_new;
    }
    let converged = inf_norm(&g) < opts.grad_tol && f_change <= opts.f_rel_tol;
    Some(BfgsOutcome {
        x,
        f,
        gradient: g,
        iterations: opts.max_iter,
        converged,
    })
}
