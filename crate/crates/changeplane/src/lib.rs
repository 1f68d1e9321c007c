//! Robust change-plane regression with heavy-tailed errors.
//!
//! This crate fits the model
//!
//! ```text
//! y = X'alpha + Z'beta * 1(U'gamma >= 0) + eps
//! ```
//!
//! where the indicator splits observations into two subgroups along an
//! unknown hyperplane in the grouping variables `U`. Estimation replaces the
//! indicator with a smooth surrogate `K((U1 + U2'eta)/h)` and minimizes a
//! Huber loss whose robustification parameter `tau` is calibrated from the
//! data, so that heavy-tailed errors do not wreck the fit.
//!
//! The crate also tests for subgroup existence (`H0: beta = 0`, under which
//! the grouping parameter is not identifiable) via a weighted average of
//! squared score statistics with closed-form pair weights (RWAST), its
//! quadratic-loss counterpart (WAST), and a supremum score test (SST), all
//! calibrated by a multiplier bootstrap.
//!
//! Start with the runnable programs in `examples/`:
//!
//! - `adaptive_huber` — adaptive Huber regression on its own
//! - `fit_simulated` — fit a change-plane model on simulated data
//! - `bootstrap_ci` — multiplier-bootstrap confidence intervals
//! - `subgroup_test` — RWAST / WAST / SST p-values
//! - `simulation_study` — Monte Carlo estimation and power studies
//! - `kernels` — the smooth indicator surrogates and bandwidth rules
//!
//! A thin CLI (`changeplane fit|test|simulate`) drives the same entry points
//! on CSV files.

pub mod data;
pub mod error;
pub mod fit;
pub mod huber;
pub mod io;
pub mod kernel;
pub mod optim;
pub mod simlab;
pub mod testing;

pub use data::{
    classify, derive_stream, gamma_to_eta, ChangePlaneParams, Dataset, FitConfig, GammaVector,
    HPolicy, RngStream, TauPolicy,
};
pub use error::{Error, Result};
pub use fit::{accuracy, bootstrap_ci, fit_alternating, l2_error, BootstrapCi, SmoothedFitResult};
pub use huber::{calibrate_tau, huber_fit_adaptive, huber_fit_fixed_tau, huber_loss, huber_psi, HuberFit};
pub use kernel::{kernel_eval, rule_of_thumb_h, KernelKind, KernelSpec};
pub use testing::{bootstrap_pvalue, fit_null, pair_weight, rwast_statistic, wast_statistic, TestMethod, TestResult};
