//! Small dense quasi-Newton minimizer used for the eta-step.

use nalgebra::{DMatrix, DVector};

/// Result of a local minimization.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// BFGS with Armijo backtracking. `f` returns (value, gradient). The
/// inverse-Hessian approximation resets to identity whenever the curvature
/// condition fails, which keeps descent directions valid on nonconvex
/// objectives.
pub fn bfgs<F>(f: F, x0: &DVector<f64>, grad_tol: f64, max_iter: usize) -> OptimResult
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let dim = x0.len();
    let mut x = x0.clone();
    let (mut fx, mut g) = f(&x);
    let mut hinv = DMatrix::<f64>::identity(dim, dim);

    let mut iterations = 0;
    while iterations < max_iter {
        let gnorm = g.amax();
        if gnorm <= grad_tol {
            return OptimResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations,
                converged: true,
            };
        }
        iterations += 1;

        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(dim, dim);
            dir = -g.clone();
        }

        // backtracking line search
        let g_dot_d = g.dot(&dir);
        let mut step = 1.0;
        let c1 = 1e-4;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &x + &dir * step;
            let (fc, gc) = f(&cand);
            if fc.is_finite() && fc <= fx + c1 * step * g_dot_d {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // no progress possible along this direction
            return OptimResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations,
                converged: false,
            };
        };

        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            // BFGS inverse update
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            // H <- H + (sy + yHy) rho^2 s s' - rho (H y s' + s y' H)
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            hinv += ss * (rho * rho * (sy + yhy)) - (&hys + hys.transpose()) * rho;
        } else {
            hinv = DMatrix::identity(dim, dim);
        }

        if (fx - f_new).abs() <= 1e-14 * fx.abs().max(1.0) {
            x = x_new;
            fx = f_new;
            g = g_new;
            break;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    let gnorm = g.amax();
    OptimResult {
        converged: gnorm <= grad_tol,
        x,
        value: fx,
        grad_norm: gnorm,
        iterations,
    }
}
