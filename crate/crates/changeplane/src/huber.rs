//! Huber loss, its score, fixed-tau robust regression by iteratively
//! reweighted least squares, and the data-adaptive tau calibration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Huber loss: `u^2/2` on `|u| <= tau`, linear `tau|u| - tau^2/2` outside.
/// `tau = +inf` is the quadratic loss.
pub fn huber_loss(u: f64, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::NonpositiveTau(tau));
    }
    Ok(loss_unchecked(u, tau))
}

/// First derivative of the Huber loss: `sgn(u) * min(|u|, tau)`.
pub fn huber_psi(u: f64, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::NonpositiveTau(tau));
    }
    Ok(psi_unchecked(u, tau))
}

#[inline]
pub(crate) fn loss_unchecked(u: f64, tau: f64) -> f64 {
    let a = u.abs();
    if a <= tau {
        0.5 * u * u
    } else {
        tau * a - 0.5 * tau * tau
    }
}

#[inline]
pub(crate) fn psi_unchecked(u: f64, tau: f64) -> f64 {
    u.clamp(-tau, tau)
}

/// A robust linear fit together with the robustification parameter it used.
#[derive(Debug, Clone)]
pub struct HuberFit {
    pub theta: DVector<f64>,
    pub tau: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: DVector<f64>,
}

fn ols(
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    obs_weights: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let d = w.ncols();
    let mut gram = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for i in 0..w.nrows() {
        let v = obs_weights.map_or(1.0, |ws| ws[i]);
        let row = w.row(i);
        for a in 0..d {
            rhs[a] += v * row[a] * y[i];
            for b in a..d {
                gram[(a, b)] += v * row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let chol = gram.cholesky().ok_or(Error::RankDeficient)?;
    Ok(chol.solve(&rhs))
}

/// Max-norm of the score `sum_i v_i psi_tau(r_i) W_i`.
fn score_inf_norm(
    w: &DMatrix<f64>,
    resid: &DVector<f64>,
    tau: f64,
    obs_weights: Option<&DVector<f64>>,
) -> f64 {
    let d = w.ncols();
    let mut s = DVector::zeros(d);
    for i in 0..w.nrows() {
        let v = obs_weights.map_or(1.0, |ws| ws[i]);
        let p = v * psi_unchecked(resid[i], tau);
        for a in 0..d {
            s[a] += p * w[(i, a)];
        }
    }
    s.amax()
}

/// Fixed-tau Huber regression. Solves `sum_i psi_tau(y_i - W_i'theta) W_i = 0`
/// by IRLS with weight `min(1, tau/|r_i|)`. Non-convergence is reported in
/// the flag, not as an error.
pub fn huber_fit_fixed_tau(
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<HuberFit> {
    if tau <= 0.0 {
        return Err(Error::NonpositiveTau(tau));
    }
    huber_irls(w, y, tau, init, tol, max_iter, None)
}

pub(crate) fn huber_irls(
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    obs_weights: Option<&DVector<f64>>,
) -> Result<HuberFit> {
    let n = w.nrows();
    let d = w.ncols();
    if n <= d {
        return Err(Error::TooFewRows { n, needed: d + 1 });
    }
    if tau.is_infinite() {
        let theta = ols(w, y, obs_weights)?;
        let residuals = y - w * &theta;
        return Ok(HuberFit {
            theta,
            tau,
            iterations: 1,
            converged: true,
            residuals,
        });
    }

    let mut theta = init.clone();
    let mut resid = y - w * &theta;
    let thresh = tol * n as f64;
    let mut converged = score_inf_norm(w, &resid, tau, obs_weights) <= thresh;
    let mut iterations = 0;
    while !converged && iterations < max_iter {
        iterations += 1;
        let mut gram = DMatrix::zeros(d, d);
        let mut rhs = DVector::zeros(d);
        for i in 0..n {
            let a = resid[i].abs();
            let hw = if a <= tau { 1.0 } else { tau / a };
            let v = hw * obs_weights.map_or(1.0, |ws| ws[i]);
            let row = w.row(i);
            for a in 0..d {
                rhs[a] += v * row[a] * y[i];
                for b in a..d {
                    gram[(a, b)] += v * row[a] * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let chol = gram.cholesky().ok_or(Error::RankDeficient)?;
        theta = chol.solve(&rhs);
        resid = y - w * &theta;
        converged = score_inf_norm(w, &resid, tau, obs_weights) <= thresh;
    }
    Ok(HuberFit {
        theta,
        tau,
        iterations,
        converged,
        residuals: resid,
    })
}

/// Solves the censored moment equation
/// `sum_i min(r_i^2, tau^2)/tau^2 = d + z` for the unique positive tau.
///
/// The left side is nonincreasing in tau, from the count of nonzero
/// residuals down to 0, so a root exists iff that count exceeds `d + z`;
/// bracketed bisection then pins it to machine precision.
pub fn calibrate_tau(residuals: &[f64], d: usize, z: f64) -> Result<f64> {
    let target = d as f64 + z;
    let n = residuals.len() as f64;
    let mut min_nz = f64::INFINITY;
    let mut max_abs: f64 = 0.0;
    let mut nonzero = 0usize;
    for &r in residuals {
        let a = r.abs();
        if a > 0.0 {
            nonzero += 1;
            min_nz = min_nz.min(a);
        }
        max_abs = max_abs.max(a);
    }
    if nonzero == 0 {
        return Err(Error::TauUnsolvable("all residuals are zero".into()));
    }
    let f = |tau: f64| -> f64 {
        let t2 = tau * tau;
        residuals.iter().map(|&r| (r * r).min(t2)).sum::<f64>() / t2 - target
    };
    // On (0, min nonzero |r|] the equation value is constant at
    // (#nonzero - target); below target means no sign change anywhere.
    if (nonzero as f64) < target {
        return Err(Error::TauUnsolvable(format!(
            "only {nonzero} nonzero residuals but d + z = {target}"
        )));
    }
    if nonzero as f64 == target {
        return Ok(min_nz);
    }
    let mut lo = min_nz;
    let mut hi = max_abs * (n / target).sqrt();
    if f(hi) > 0.0 {
        // roundoff at the closed-form upper end
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Detects an intercept column and returns the effective dimension used in
/// the censored equation: columns minus one when the first column is
/// constant 1, else columns.
fn effective_dim(w: &DMatrix<f64>) -> usize {
    let d = w.ncols();
    let has_intercept = (0..w.nrows()).all(|i| w[(i, 0)] == 1.0);
    if has_intercept && d > 0 {
        d - 1
    } else {
        d
    }
}

/// Joint (theta, tau) fit: alternates the fixed-tau IRLS solve with the
/// censored-equation calibration, `z = log n`, starting from the least
/// squares fit and `tau = sigma_hat * sqrt(n/(d+z))`.
pub fn huber_fit_adaptive(
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<HuberFit> {
    huber_adaptive_weighted(w, y, tol, max_iter, None)
}

pub(crate) fn huber_adaptive_weighted(
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    obs_weights: Option<&DVector<f64>>,
) -> Result<HuberFit> {
    let n = w.nrows();
    let cols = w.ncols();
    if n <= cols {
        return Err(Error::TooFewRows { n, needed: cols + 1 });
    }
    let d = effective_dim(w);
    let z = (n as f64).ln();

    let theta0 = ols(w, y, obs_weights)?;
    let resid0 = y - w * &theta0;
    let scale = resid0.amax();
    if scale < 1e-12 * (1.0 + y.amax()) {
        // noiseless data: least squares is already the exact fit
        return Ok(HuberFit {
            theta: theta0,
            tau: 1.0,
            iterations: 0,
            converged: true,
            residuals: resid0,
        });
    }
    let sigma = (resid0.norm_squared() / (n - cols) as f64).sqrt();
    let mut tau = sigma * (n as f64 / (d as f64 + z)).sqrt();

    let mut fit = HuberFit {
        theta: theta0,
        tau,
        iterations: 0,
        converged: false,
        residuals: resid0,
    };
    let mut total_iter = 0usize;
    for _outer in 0..50 {
        fit = huber_irls(w, y, tau, &fit.theta, tol, max_iter, obs_weights)?;
        total_iter += fit.iterations.max(1);
        let resid: Vec<f64> = fit.residuals.iter().copied().collect();
        let tau_new = match calibrate_tau(&resid, d, z) {
            Ok(t) => t,
            Err(_) => {
                // censored equation unsolvable at these residuals; keep tau
                fit.tau = tau;
                fit.converged = true;
                break;
            }
        };
        let done = (tau_new - tau).abs() <= tol.max(1e-10) * tau.max(1.0);
        tau = tau_new;
        fit.tau = tau;
        if done && fit.converged {
            break;
        }
        fit.converged = false;
    }
    // final solve at the settled tau
    fit = huber_irls(w, y, tau, &fit.theta, tol, max_iter, obs_weights)?;
    fit.tau = tau;
    fit.iterations = total_iter + fit.iterations;
    Ok(fit)
}
