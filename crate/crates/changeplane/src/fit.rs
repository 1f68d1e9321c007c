//! The alternating smoothed-Huber estimator of (alpha, beta, eta),
//! multiplier-bootstrap confidence intervals, and estimation metrics.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::data::{classify, derive_stream, ChangePlaneParams, Dataset, FitConfig, HPolicy, RngStream, TauPolicy};
use crate::error::{Error, Result};
use crate::huber::{self, loss_unchecked, psi_unchecked};
use crate::kernel::{estimate_sigma_u, kernel_eval, rule_of_thumb_h, select_h_cv, KernelSpec};
use crate::optim::bfgs;

/// Output of [`fit_alternating`].
#[derive(Debug, Clone)]
pub struct SmoothedFitResult {
    pub params: ChangePlaneParams,
    pub tau: f64,
    pub h: f64,
    /// Smoothed-loss value after each outer iteration.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub subgroup_labels: Vec<u8>,
}

/// Percentile confidence intervals over the stacked (alpha, beta, eta).
#[derive(Debug, Clone)]
pub struct BootstrapCi {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub level: f64,
    pub b: usize,
    /// Replicates dropped for non-convergence.
    pub dropped: usize,
}

fn check_dims(d: &Dataset, zeta: &ChangePlaneParams) -> Result<()> {
    if zeta.alpha.len() != d.p() {
        return Err(Error::DimensionMismatch { block: "alpha", expected: d.p(), found: zeta.alpha.len() });
    }
    if zeta.beta.len() != d.q() {
        return Err(Error::DimensionMismatch { block: "beta", expected: d.q(), found: zeta.beta.len() });
    }
    if zeta.eta.len() + 1 != d.r() {
        return Err(Error::DimensionMismatch { block: "eta", expected: d.r() - 1, found: zeta.eta.len() });
    }
    Ok(())
}

/// Boundary values `U1 + U2'eta` per row.
fn boundary(d: &Dataset, eta: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(d.n(), |i, _| {
        let mut t = d.u[(i, 0)];
        for j in 1..d.r() {
            t += d.u[(i, j)] * eta[j - 1];
        }
        t
    })
}

/// Smoothed loss `sum_i L_tau(y_i - X_i'alpha - Z_i'beta K_h(U1 + U2'eta))`.
pub fn smoothed_loss(d: &Dataset, zeta: &ChangePlaneParams, tau: f64, spec: &KernelSpec) -> Result<f64> {
    check_dims(d, zeta)?;
    Ok(loss_impl(d, zeta, tau, spec, None))
}

fn loss_impl(
    d: &Dataset,
    zeta: &ChangePlaneParams,
    tau: f64,
    spec: &KernelSpec,
    weights: Option<&DVector<f64>>,
) -> f64 {
    let omega = boundary(d, &zeta.eta);
    let mut total = 0.0;
    for i in 0..d.n() {
        let (k, _, _) = kernel_eval(spec, omega[i]);
        let mut pred = 0.0;
        for j in 0..d.p() {
            pred += d.x[(i, j)] * zeta.alpha[j];
        }
        let mut zb = 0.0;
        for j in 0..d.q() {
            zb += d.z[(i, j)] * zeta.beta[j];
        }
        let v = weights.map_or(1.0, |w| w[i]);
        total += v * loss_unchecked(d.y[i] - pred - zb * k, tau);
    }
    total
}

/// Analytic gradient of [`smoothed_loss`] in the stacked order
/// (alpha, beta, eta), length p+q+r-1.
pub fn smoothed_loss_grad(
    d: &Dataset,
    zeta: &ChangePlaneParams,
    tau: f64,
    spec: &KernelSpec,
) -> Result<DVector<f64>> {
    check_dims(d, zeta)?;
    let (p, q, r) = (d.p(), d.q(), d.r());
    let omega = boundary(d, &zeta.eta);
    let mut g = DVector::zeros(p + q + r - 1);
    for i in 0..d.n() {
        let (k, k1, _) = kernel_eval(spec, omega[i]);
        let mut pred = 0.0;
        for j in 0..p {
            pred += d.x[(i, j)] * zeta.alpha[j];
        }
        let mut zb = 0.0;
        for j in 0..q {
            zb += d.z[(i, j)] * zeta.beta[j];
        }
        let psi = psi_unchecked(d.y[i] - pred - zb * k, tau);
        for j in 0..p {
            g[j] -= psi * d.x[(i, j)];
        }
        for j in 0..q {
            g[p + j] -= psi * k * d.z[(i, j)];
        }
        let factor = psi * zb * k1 / spec.h;
        for j in 1..r {
            g[p + q + j - 1] -= factor * d.u[(i, j)];
        }
    }
    Ok(g)
}

/// Theta-step: minimize the smoothed loss over (alpha, beta) at fixed eta by
/// robust regression on the stacked design `[X | Z .* K_h(omega)]`.
/// Returns (alpha, beta, tau-used).
pub fn fit_theta_step(
    d: &Dataset,
    eta: &DVector<f64>,
    tau_policy: TauPolicy,
    spec: &KernelSpec,
    tol: f64,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    theta_step_impl(d, eta, tau_policy, spec, tol, None)
}

fn theta_step_impl(
    d: &Dataset,
    eta: &DVector<f64>,
    tau_policy: TauPolicy,
    spec: &KernelSpec,
    tol: f64,
    weights: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let (n, p, q) = (d.n(), d.p(), d.q());
    let omega = boundary(d, eta);
    let mut w = DMatrix::zeros(n, p + q);
    for i in 0..n {
        let (k, _, _) = kernel_eval(spec, omega[i]);
        for j in 0..p {
            w[(i, j)] = d.x[(i, j)];
        }
        for j in 0..q {
            w[(i, p + j)] = d.z[(i, j)] * k;
        }
    }
    let fit = match tau_policy {
        TauPolicy::Adaptive => huber::huber_adaptive_weighted(&w, &d.y, tol, 200, weights)?,
        TauPolicy::Fixed { tau } => {
            let init = DVector::zeros(p + q);
            huber::huber_irls(&w, &d.y, tau, &init, tol, 200, weights)?
        }
        TauPolicy::Infinite => {
            let init = DVector::zeros(p + q);
            huber::huber_irls(&w, &d.y, f64::INFINITY, &init, tol, 1, weights)?
        }
    };
    let alpha = fit.theta.rows(0, p).into_owned();
    let beta = fit.theta.rows(p, q).into_owned();
    Ok((alpha, beta, fit.tau))
}

/// Eta-step: minimize the smoothed loss over eta at fixed (alpha, beta, tau)
/// by quasi-Newton descent from `init_eta` plus a multi-start over random
/// unit directions scaled to the boundary spread. Returns the candidate with
/// the best objective, never worse than the initializer.
pub fn fit_eta_step(
    d: &Dataset,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    tau: f64,
    spec: &KernelSpec,
    init_eta: &DVector<f64>,
    stream: &RngStream,
) -> Result<DVector<f64>> {
    eta_step_impl(d, alpha, beta, tau, spec, init_eta, 20, stream, None)
}

#[allow(clippy::too_many_arguments)]
fn eta_step_impl(
    d: &Dataset,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    tau: f64,
    spec: &KernelSpec,
    init_eta: &DVector<f64>,
    starts: usize,
    stream: &RngStream,
    weights: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if beta.amax() == 0.0 {
        return Err(Error::EtaUnidentifiable);
    }
    let (n, p, q, r) = (d.n(), d.p(), d.q(), d.r());
    let dim = r - 1;
    if init_eta.len() != dim {
        return Err(Error::DimensionMismatch { block: "eta", expected: dim, found: init_eta.len() });
    }
    // per-row constants
    let mut xa = DVector::zeros(n);
    let mut zb = DVector::zeros(n);
    for i in 0..n {
        for j in 0..p {
            xa[i] += d.x[(i, j)] * alpha[j];
        }
        for j in 0..q {
            zb[i] += d.z[(i, j)] * beta[j];
        }
    }
    let objective = |eta: &DVector<f64>| -> (f64, DVector<f64>) {
        let mut val = 0.0;
        let mut grad = DVector::zeros(dim);
        for i in 0..n {
            let mut om = d.u[(i, 0)];
            for j in 1..r {
                om += d.u[(i, j)] * eta[j - 1];
            }
            let (k, k1, _) = kernel_eval(spec, om);
            let resid = d.y[i] - xa[i] - zb[i] * k;
            let v = weights.map_or(1.0, |w| w[i]);
            val += v * loss_unchecked(resid, tau);
            let factor = v * psi_unchecked(resid, tau) * zb[i] * k1 / spec.h;
            for j in 1..r {
                grad[j - 1] -= factor * d.u[(i, j)];
            }
        }
        (val, grad)
    };

    let mut best = bfgs(&objective, init_eta, 1e-8, 200);
    let (init_val, _) = objective(init_eta);
    if best.value > init_val {
        best.x = init_eta.clone();
        best.value = init_val;
    }
    if starts > 0 && dim > 0 {
        let sigma_u = estimate_sigma_u(&d.u, init_eta).unwrap_or(1.0).max(1e-8);
        let mut rng = stream.rng();
        for _ in 0..starts {
            let mut dir = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let norm = dir.norm();
            if norm == 0.0 {
                continue;
            }
            dir /= norm;
            let start = dir * sigma_u;
            let res = bfgs(&objective, &start, 1e-8, 200);
            if res.value < best.value {
                best = res;
            }
        }
    }
    Ok(best.x)
}

/// Full alternating fit: quadratic-loss pilot for the initial eta and the
/// smoothness parameter, then theta/eta alternation under the configured
/// tau policy. Tau is frozen after each theta-step so the eta-step descends
/// a fixed objective.
pub fn fit_alternating(d: &Dataset, cfg: &FitConfig) -> Result<SmoothedFitResult> {
    fit_alternating_impl(d, cfg, None, None)
}

pub(crate) fn fit_alternating_impl(
    d: &Dataset,
    cfg: &FitConfig,
    weights: Option<&DVector<f64>>,
    warm: Option<&SmoothedFitResult>,
) -> Result<SmoothedFitResult> {
    d.validate()?;
    cfg.validate()?;
    let (n, p, q, r) = (d.n(), d.p(), d.q(), d.r());
    if p + q >= n {
        return Err(Error::TooFewRows { n, needed: p + q + 1 });
    }
    let stream = derive_stream(cfg.seed, 0xE7A);

    let (mut eta, h, pilot_tau_frozen) = if let Some(wstart) = warm {
        (wstart.params.eta.clone(), wstart.h, Some(wstart.tau))
    } else {
        // quadratic-loss pilot with a starter bandwidth
        let sigma_u0 = estimate_sigma_u(&d.u, &DVector::zeros(r - 1))?.max(1e-8);
        let h0 = match cfg.h_policy {
            HPolicy::Fixed { h } => h,
            _ => rule_of_thumb_h(1.0, sigma_u0, n)?,
        };
        let spec0 = KernelSpec::new(cfg.kernel, h0)?;
        let mut eta = DVector::zeros(r - 1);
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            let (alpha, beta, _) = theta_step_impl(d, &eta, TauPolicy::Infinite, &spec0, cfg.tol, weights)?;
            if beta.amax() > 0.0 {
                let starts = if k == 0 { 20 } else { 0 };
                eta = eta_step_impl(d, &alpha, &beta, f64::INFINITY, &spec0, &eta, starts, &stream.child(k as u64), weights)?;
            }
            let z = ChangePlaneParams { alpha, beta, eta: eta.clone() };
            let obj = loss_impl(d, &z, f64::INFINITY, &spec0, weights);
            if (prev - obj).abs() <= cfg.tol * obj.abs().max(1.0) {
                break;
            }
            prev = obj;
        }
        // settle the bandwidth from the pilot eta
        let sigma_u = estimate_sigma_u(&d.u, &eta)?.max(1e-8);
        let h = match cfg.h_policy {
            HPolicy::Fixed { h } => h,
            HPolicy::RuleOfThumb { c_h } => rule_of_thumb_h(c_h, sigma_u, n)?,
            HPolicy::CrossValidation { .. } => {
                let rot = rule_of_thumb_h(1.0, sigma_u, n)?;
                let candidates = [0.25 * rot, 0.5 * rot, rot, 2.0 * rot];
                select_h_cv(d, cfg, &candidates)?
            }
        };
        (eta, h, None)
    };
    let spec = KernelSpec::new(cfg.kernel, h)?;

    // main alternation
    let policy = match (cfg.tau_policy, pilot_tau_frozen) {
        // bootstrap refits keep the point estimate's tau fixed
        (TauPolicy::Adaptive, Some(t)) if t.is_finite() => TauPolicy::Fixed { tau: t },
        (pol, _) => pol,
    };
    let mut alpha = DVector::zeros(p);
    let mut beta = DVector::zeros(q);
    let mut tau = f64::INFINITY;
    let mut loss_trace = Vec::new();
    let mut converged = false;
    let mut prev = f64::INFINITY;
    let multistart_budget = if warm.is_some() { 0 } else { 20 };
    for k in 0..cfg.max_outer_iter {
        let (a, b, t) = theta_step_impl(d, &eta, policy, &spec, cfg.tol, weights)?;
        alpha = a;
        beta = b;
        tau = t;
        if beta.amax() > 0.0 {
            let starts = if k == 0 { multistart_budget } else { 0 };
            eta = eta_step_impl(
                d,
                &alpha,
                &beta,
                tau,
                &spec,
                &eta,
                starts,
                &stream.child(1000 + k as u64),
                weights,
            )?;
        }
        let z = ChangePlaneParams { alpha: alpha.clone(), beta: beta.clone(), eta: eta.clone() };
        let obj = loss_impl(d, &z, tau, &spec, weights);
        loss_trace.push(obj);
        if (prev - obj).abs() <= cfg.tol * obj.abs().max(1.0) {
            converged = true;
            break;
        }
        prev = obj;
    }

    let params = ChangePlaneParams { alpha, beta, eta };
    let subgroup_labels = classify(&params.eta, &d.u)?;
    Ok(SmoothedFitResult {
        params,
        tau,
        h,
        loss_trace,
        converged,
        subgroup_labels,
    })
}

/// Multiplier-bootstrap percentile confidence intervals for the stacked
/// (alpha, beta, eta).
///
/// Each replicate reweights the smoothed-loss summands by i.i.d. unit-mean
/// unit-variance exponential multipliers and refits, warm-started at the
/// point estimate. Non-convergent replicates are dropped; more than 10%
/// dropped is an error.
pub fn bootstrap_ci(d: &Dataset, cfg: &FitConfig, b: usize, level: f64) -> Result<BootstrapCi> {
    bootstrap_ci_impl(d, cfg, b, level, false)
}

pub(crate) fn bootstrap_ci_impl(
    d: &Dataset,
    cfg: &FitConfig,
    b: usize,
    level: f64,
    unit_multipliers: bool,
) -> Result<BootstrapCi> {
    if b < 100 {
        return Err(Error::BootstrapTooSmall { min: 100, got: b });
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must be in (0,1), got {level}")));
    }
    let point = fit_alternating(d, cfg)?;
    let n = d.n();
    let mut refit_cfg = *cfg;
    refit_cfg.max_outer_iter = refit_cfg.max_outer_iter.min(5);

    let stream = derive_stream(cfg.seed, 0xB0075);
    let replicates: Vec<Option<DVector<f64>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream.child(rep as u64).rng();
            let w = if unit_multipliers {
                DVector::from_element(n, 1.0)
            } else {
                DVector::from_fn(n, |_, _| Exp1.sample(&mut rng))
            };
            fit_alternating_impl(d, &refit_cfg, Some(&w), Some(&point))
                .ok()
                .map(|fitted| fitted.params.stacked())
        })
        .collect();

    let kept: Vec<&DVector<f64>> = replicates.iter().flatten().collect();
    let dropped = b - kept.len();
    if dropped * 10 > b {
        return Err(Error::BootstrapUnstable { dropped, total: b });
    }
    let dim = point.params.stacked().len();
    let lo_q = (1.0 - level) / 2.0;
    let hi_q = 1.0 - lo_q;
    let mut lower = DVector::zeros(dim);
    let mut upper = DVector::zeros(dim);
    for j in 0..dim {
        let mut col: Vec<f64> = kept.iter().map(|v| v[j]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower[j] = quantile_sorted(&col, lo_q);
        upper[j] = quantile_sorted(&col, hi_q);
    }
    Ok(BootstrapCi { lower, upper, level, b, dropped })
}

/// Linear-interpolation quantile of a sorted slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Euclidean norm of the stacked (alpha, beta) estimation error.
pub fn l2_error(est: &ChangePlaneParams, truth: &ChangePlaneParams) -> Result<f64> {
    if est.alpha.len() != truth.alpha.len() || est.beta.len() != truth.beta.len() {
        return Err(Error::DimensionMismatch {
            block: "alpha",
            expected: truth.alpha.len() + truth.beta.len(),
            found: est.alpha.len() + est.beta.len(),
        });
    }
    let mut ss = 0.0;
    for j in 0..est.alpha.len() {
        ss += (est.alpha[j] - truth.alpha[j]).powi(2);
    }
    for j in 0..est.beta.len() {
        ss += (est.beta[j] - truth.beta[j]).powi(2);
    }
    Ok(ss.sqrt())
}

/// Fraction of agreeing subgroup labels.
pub fn accuracy(labels_hat: &[u8], labels_true: &[u8]) -> Result<f64> {
    if labels_hat.len() != labels_true.len() {
        return Err(Error::DimensionMismatch {
            block: "labels",
            expected: labels_true.len(),
            found: labels_hat.len(),
        });
    }
    let agree = labels_hat
        .iter()
        .zip(labels_true)
        .filter(|(a, b)| a == b)
        .count();
    Ok(agree as f64 / labels_hat.len() as f64)
}
