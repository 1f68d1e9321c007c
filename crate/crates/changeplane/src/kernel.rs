//! Smooth surrogates for the subgroup indicator and selection of the
//! smoothness parameter `h`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, FitConfig, HPolicy, TauPolicy};
use crate::error::{Error, Result};
use crate::huber::huber_loss;

/// Standard normal density.
pub(crate) fn phi(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal cdf.
pub(crate) fn norm_cdf(u: f64) -> f64 {
    Normal::standard().cdf(u)
}

/// Standard normal quantile.
pub(crate) fn norm_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// The admissible surrogate families. All three satisfy `K(-u) = 1 - K(u)`
/// with symmetric first derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    /// `K(u) = 1/(1 + e^{-u})`
    Sigmoid,
    /// `K(u) = Phi(u)`
    NormalCdf,
    /// `K(u) = Phi(u) + u*phi(u)`. Not confined to [0, 1]; no clamping is
    /// applied.
    NormalMix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub h: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, h: f64) -> Result<Self> {
        if h <= 0.0 || !h.is_finite() {
            return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
        }
        Ok(KernelSpec { kind, h })
    }
}

/// Evaluates `(K(u), K'(u), K''(u))` at `u = t/h`.
///
/// The derivatives are taken with respect to `u`; callers chain-rule in the
/// `1/h` factors themselves.
pub fn kernel_eval(spec: &KernelSpec, t: f64) -> (f64, f64, f64) {
    let u = t / spec.h;
    match spec.kind {
        KernelKind::Sigmoid => {
            // numerically stable logistic
            let k = if u >= 0.0 {
                1.0 / (1.0 + (-u).exp())
            } else {
                let e = u.exp();
                e / (1.0 + e)
            };
            let k1 = k * (1.0 - k);
            (k, k1, k1 * (1.0 - 2.0 * k))
        }
        KernelKind::NormalCdf => {
            let p = phi(u);
            (norm_cdf(u), p, -u * p)
        }
        KernelKind::NormalMix => {
            let p = phi(u);
            (norm_cdf(u) + u * p, (2.0 - u * u) * p, (u * u - 4.0) * u * p)
        }
    }
}

/// `|K(t/h) - 1(t >= 0)|`, the pointwise approximation error of the
/// surrogate.
pub fn indicator_gap(spec: &KernelSpec, t: f64) -> f64 {
    let (k, _, _) = kernel_eval(spec, t);
    let ind = if t >= 0.0 { 1.0 } else { 0.0 };
    (k - ind).abs()
}

/// Rule-of-thumb smoothness parameter `h = c_h * sigma_u_hat * log(n)/sqrt(n)`.
pub fn rule_of_thumb_h(c_h: f64, sigma_u_hat: f64, n: usize) -> Result<f64> {
    if c_h <= 0.0 || sigma_u_hat <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "rule-of-thumb h needs positive inputs, got c_h = {c_h}, sigma_u_hat = {sigma_u_hat}"
        )));
    }
    if n < 2 {
        return Err(Error::TooFewRows { n, needed: 2 });
    }
    Ok(c_h * sigma_u_hat * (n as f64).ln() / (n as f64).sqrt())
}

/// Scale of the boundary variable: `sqrt((n-r)^{-1} sum (U1 + U2'eta)^2)`
/// at a pilot eta from the quadratic-loss fit.
pub fn estimate_sigma_u(u: &DMatrix<f64>, eta_ols: &DVector<f64>) -> Result<f64> {
    let n = u.nrows();
    let r = u.ncols();
    if n <= r {
        return Err(Error::TooFewRows { n, needed: r + 1 });
    }
    if eta_ols.len() + 1 != r {
        return Err(Error::DimensionMismatch {
            block: "U",
            expected: eta_ols.len() + 1,
            found: r,
        });
    }
    let mut ss = 0.0;
    for i in 0..n {
        let mut t = u[(i, 0)];
        for j in 1..r {
            t += u[(i, j)] * eta_ols[j - 1];
        }
        ss += t * t;
    }
    Ok((ss / (n - r) as f64).sqrt())
}

/// Selects `h` from `candidates` by K-fold cross-validation of the held-out
/// Huber prediction loss of the full fitted model. Folds come from a seeded
/// permutation; ties break toward the smaller candidate.
pub fn select_h_cv(d: &Dataset, cfg: &FitConfig, candidates: &[f64]) -> Result<f64> {
    use rand::seq::SliceRandom;

    if candidates.is_empty() || candidates.iter().any(|&h| h <= 0.0) {
        return Err(Error::InvalidArgument(
            "h candidates must be nonempty and positive".into(),
        ));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let folds = match cfg.h_policy {
        HPolicy::CrossValidation { folds } => folds,
        _ => 5,
    };
    let n = d.n();
    if n < folds {
        return Err(Error::TooFewRows { n, needed: folds });
    }

    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = crate::data::derive_stream(cfg.seed, 0xCF).rng();
    perm.shuffle(&mut rng);

    let mut sorted: Vec<f64> = candidates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut best = (f64::INFINITY, sorted[0]);
    for &h in &sorted {
        let mut cv_loss = 0.0;
        for fold in 0..folds {
            let test_idx: Vec<usize> = perm
                .iter()
                .copied()
                .enumerate()
                .filter(|(k, _)| k % folds == fold)
                .map(|(_, i)| i)
                .collect();
            let train_idx: Vec<usize> = perm
                .iter()
                .copied()
                .enumerate()
                .filter(|(k, _)| k % folds != fold)
                .map(|(_, i)| i)
                .collect();
            let train = subset(d, &train_idx);
            let test = subset(d, &test_idx);
            let mut fold_cfg = *cfg;
            fold_cfg.h_policy = HPolicy::Fixed { h };
            let fit = crate::fit::fit_alternating(&train, &fold_cfg)?;
            let tau = match cfg.tau_policy {
                TauPolicy::Infinite => f64::INFINITY,
                _ => fit.tau,
            };
            let labels = crate::data::classify(&fit.params.eta, &test.u)?;
            for i in 0..test.n() {
                let mut pred = 0.0;
                for j in 0..test.p() {
                    pred += test.x[(i, j)] * fit.params.alpha[j];
                }
                if labels[i] == 1 {
                    for j in 0..test.q() {
                        pred += test.z[(i, j)] * fit.params.beta[j];
                    }
                }
                cv_loss += huber_loss(test.y[i] - pred, tau)?;
            }
        }
        // strict inequality: equal losses keep the smaller h
        if cv_loss < best.0 {
            best = (cv_loss, h);
        }
    }
    Ok(best.1)
}

fn subset(d: &Dataset, idx: &[usize]) -> Dataset {
    Dataset {
        y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| d.y[i])),
        x: d.x.select_rows(idx.iter()),
        z: d.z.select_rows(idx.iter()),
        u: d.u.select_rows(idx.iter()),
    }
}
