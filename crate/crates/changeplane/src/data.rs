//! Shared data model: observations, parameters, tuning knobs, and the
//! reproducible random-stream contract.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelKind;

/// One sample of the change-plane model.
///
/// `y` is the response, `X` the baseline block (first column may be a
/// constant 1), `Z` the grouping-difference block, and `U` the grouping
/// block whose first column plays the role of `U1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>, u: DMatrix<f64>) -> Result<Self> {
        let d = Dataset { y, x, z, u };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }
    pub fn r(&self) -> usize {
        self.u.ncols()
    }

    /// Checks row-count agreement, finiteness of every entry, and the
    /// minimal sample size `n >= max(p+q, r) + 1`.
    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        for (name, m) in [("X", &self.x), ("Z", &self.z), ("U", &self.u)] {
            if m.nrows() != n {
                return Err(Error::DimensionMismatch {
                    block: name,
                    expected: n,
                    found: m.nrows(),
                });
            }
        }
        for (i, v) in self.y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    block: "y",
                    row: i,
                    col: 0,
                });
            }
        }
        for (name, m) in [("X", &self.x), ("Z", &self.z), ("U", &self.u)] {
            for j in 0..m.ncols() {
                for i in 0..m.nrows() {
                    if !m[(i, j)].is_finite() {
                        return Err(Error::NonFinite {
                            block: name,
                            row: i,
                            col: j,
                        });
                    }
                }
            }
        }
        let needed = (self.p() + self.q()).max(self.r()) + 1;
        if n < needed {
            return Err(Error::TooFewRows { n, needed });
        }
        Ok(())
    }
}

/// Fitted parameters in the identifiable parametrization: the boundary is
/// `U1 + U2'eta >= 0` with an implicit +1 coefficient on `U1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangePlaneParams {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
}

impl ChangePlaneParams {
    pub fn zeros(p: usize, q: usize, r: usize) -> Self {
        ChangePlaneParams {
            alpha: DVector::zeros(p),
            beta: DVector::zeros(q),
            eta: DVector::zeros(r.saturating_sub(1)),
        }
    }

    /// Stacks (alpha, beta, eta) into one vector of length p+q+r-1.
    pub fn stacked(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.alpha.len() + self.beta.len() + self.eta.len());
        v.extend(self.alpha.iter());
        v.extend(self.beta.iter());
        v.extend(self.eta.iter());
        DVector::from_vec(v)
    }
}

/// Unnormalized grouping parameter gamma of length r.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaVector(pub DVector<f64>);

/// Reparametrizes gamma into `eta = gamma[1..]/gamma[0]`.
///
/// `flip` is true when `gamma[0] < 0`; in that case `1(U'gamma >= 0)` is the
/// complement of `1(U1 + U2'eta >= 0)` (up to the boundary set) rather than
/// equal to it. A gamma with `gamma[0] < 0` is never silently negated.
pub fn gamma_to_eta(g: &GammaVector) -> Result<(DVector<f64>, bool)> {
    let g0 = g.0[0];
    if g0 == 0.0 {
        return Err(Error::ZeroLeadingGamma);
    }
    let eta = DVector::from_iterator(g.0.len() - 1, g.0.iter().skip(1).map(|v| v / g0));
    Ok((eta, g0 < 0.0))
}

/// Subgroup labels `1(U1 + U2'eta >= 0)`, tie at exactly 0 labeled 1.
pub fn classify(eta: &DVector<f64>, u: &DMatrix<f64>) -> Result<Vec<u8>> {
    if eta.len() + 1 != u.ncols() {
        return Err(Error::DimensionMismatch {
            block: "U",
            expected: eta.len() + 1,
            found: u.ncols(),
        });
    }
    Ok((0..u.nrows())
        .map(|i| {
            let mut t = u[(i, 0)];
            for j in 1..u.ncols() {
                t += u[(i, j)] * eta[j - 1];
            }
            (t >= 0.0) as u8
        })
        .collect())
}

/// Smoothness-parameter policy for the indicator surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HPolicy {
    /// `h = c_h * sigma_u_hat * log(n)/sqrt(n)`.
    RuleOfThumb { c_h: f64 },
    Fixed { h: f64 },
    CrossValidation { folds: usize },
}

/// Robustification-parameter policy for the Huber loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TauPolicy {
    /// Calibrate tau from the data by solving the censored moment equation.
    Adaptive,
    Fixed { tau: f64 },
    /// Ordinary least squares: the quadratic loss, no clipping.
    Infinite,
}

/// Tuning knobs for the alternating smoothed-Huber fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub kernel: KernelKind,
    pub h_policy: HPolicy,
    pub tau_policy: TauPolicy,
    pub max_outer_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            kernel: KernelKind::Sigmoid,
            h_policy: HPolicy::RuleOfThumb { c_h: 1.0 },
            tau_policy: TauPolicy::Adaptive,
            max_outer_iter: 50,
            tol: 1e-8,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tol <= 0.0 {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_outer_iter < 1 {
            return Err(Error::InvalidArgument("max_outer_iter must be >= 1".into()));
        }
        match self.h_policy {
            HPolicy::RuleOfThumb { c_h } if c_h <= 0.0 => {
                return Err(Error::InvalidArgument(format!("c_h must be > 0, got {c_h}")))
            }
            HPolicy::Fixed { h } if h <= 0.0 => {
                return Err(Error::InvalidArgument(format!("h must be > 0, got {h}")))
            }
            HPolicy::CrossValidation { folds } if folds < 2 => {
                return Err(Error::InvalidArgument("cv folds must be >= 2".into()))
            }
            _ => {}
        }
        if let TauPolicy::Fixed { tau } = self.tau_policy {
            if tau <= 0.0 {
                return Err(Error::NonpositiveTau(tau));
            }
        }
        Ok(())
    }
}

/// A named position in a deterministic family of random streams.
///
/// Identical `(seed, stream_id)` yields the identical draw sequence on every
/// run and under any parallelism degree; distinct `stream_id`s give
/// independent streams. Parallel code derives one child stream per work item
/// so that results do not depend on scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// SplitMix64 finalizer, used to spread (seed, stream_id) pairs over the
/// full 64-bit seed space before keying ChaCha.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn derive_stream(seed: u64, stream_id: u64) -> RngStream {
    RngStream { seed, stream_id }
}

impl RngStream {
    /// Instantiates the generator for this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let key = splitmix(splitmix(self.seed) ^ self.stream_id.wrapping_mul(0xd1342543de82ef95));
        let mut rng = ChaCha12Rng::seed_from_u64(key);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Derives a child stream, e.g. one per bootstrap replicate.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream {
            seed: splitmix(self.seed ^ splitmix(self.stream_id)),
            stream_id: splitmix(self.stream_id.rotate_left(17) ^ index.wrapping_add(0x2545f4914f6cdd1d)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_dataset(n: usize, p: usize, q: usize, r: usize) -> Dataset {
        let mut rng = derive_stream(7, 0).rng();
        Dataset {
            y: DVector::from_fn(n, |_, _| rng.gen::<f64>()),
            x: DMatrix::from_fn(n, p, |_, _| rng.gen::<f64>()),
            z: DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>()),
            u: DMatrix::from_fn(n, r, |_, _| rng.gen::<f64>()),
        }
    }

    #[test]
    fn validate_accepts_well_formed() {
        assert!(small_dataset(10, 3, 3, 3).validate().is_ok());
    }

    #[test]
    fn validate_names_offending_block() {
        let mut d = small_dataset(10, 3, 3, 3);
        d.x = d.x.rows(0, 9).into_owned();
        match d.validate() {
            Err(Error::DimensionMismatch { block: "X", expected: 10, found: 9 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn validate_cites_nan_position() {
        let mut d = small_dataset(10, 3, 3, 3);
        d.u[(3, 2)] = f64::NAN;
        match d.validate() {
            Err(Error::NonFinite { block: "U", row: 3, col: 2 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn gamma_to_eta_divides_componentwise() {
        let g = GammaVector(DVector::from_vec(vec![2.0, 4.0, -6.0]));
        let (eta, flip) = gamma_to_eta(&g).unwrap();
        assert_eq!(eta.as_slice(), &[2.0, -3.0]);
        assert!(!flip);
    }

    #[test]
    fn gamma_to_eta_identity_case() {
        let g = GammaVector(DVector::from_vec(vec![1.0, 0.0, 0.0]));
        let (eta, flip) = gamma_to_eta(&g).unwrap();
        assert_eq!(eta.as_slice(), &[0.0, 0.0]);
        assert!(!flip);
    }

    #[test]
    fn gamma_to_eta_zero_leading_errors() {
        let g = GammaVector(DVector::from_vec(vec![0.0, 1.0]));
        assert!(matches!(gamma_to_eta(&g), Err(Error::ZeroLeadingGamma)));
    }

    #[test]
    fn gamma_to_eta_negative_leading_flips_indicator() {
        let g = GammaVector(DVector::from_vec(vec![-1.0, 2.0, 2.0]));
        let (eta, flip) = gamma_to_eta(&g).unwrap();
        assert_eq!(eta.as_slice(), &[-2.0, -2.0]);
        assert!(flip);
        // On random U draws, the unnormalized indicator equals the complement
        // of the eta-parametrized one whenever flip is set (ties aside).
        let mut rng = derive_stream(3, 0).rng();
        for _ in 0..100 {
            let u: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let raw = (u[0] * g.0[0] + u[1] * g.0[1] + u[2] * g.0[2] >= 0.0) as u8;
            let t = u[0] + u[1] * eta[0] + u[2] * eta[1];
            if t != 0.0 {
                let repar = (t >= 0.0) as u8;
                assert_eq!(raw, 1 - repar);
            }
        }
    }

    #[test]
    fn classify_sign_of_u1() {
        let eta = DVector::from_vec(vec![0.0]);
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, -1.0, 5.0]);
        assert_eq!(classify(&eta, &u).unwrap(), vec![1, 0]);
    }

    #[test]
    fn classify_boundary_tie_is_one() {
        let eta = DVector::from_vec(vec![1.0, 1.0]);
        let u = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 0.0]);
        assert_eq!(classify(&eta, &u).unwrap(), vec![1]);
    }

    #[test]
    fn classify_hand_case() {
        // 1 + 0.5*(-2) = 0 -> 1 (tie), 1 + 0.4*(-2) = 0.2 -> 1
        let eta = DVector::from_vec(vec![-2.0]);
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 1.0, 0.4]);
        assert_eq!(classify(&eta, &u).unwrap(), vec![1, 1]);
    }

    #[test]
    fn classify_agrees_with_unnormalized_form() {
        let mut rng = derive_stream(11, 0).rng();
        for _ in 0..50 {
            let mut g: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            g[0] = g[0].abs() + 0.1;
            let gv = GammaVector(DVector::from_vec(g.clone()));
            let (eta, flip) = gamma_to_eta(&gv).unwrap();
            assert!(!flip);
            let u = DMatrix::from_fn(40, 3, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let labels = classify(&eta, &u).unwrap();
            for i in 0..40 {
                let raw = (u[(i, 0)] * g[0] + u[(i, 1)] * g[1] + u[(i, 2)] * g[2] >= 0.0) as u8;
                assert_eq!(labels[i], raw);
            }
        }
    }

    #[test]
    fn stream_determinism_and_separation() {
        let a: Vec<f64> = {
            let mut r = derive_stream(42, 0).rng();
            (0..100).map(|_| r.gen()).collect()
        };
        let b: Vec<f64> = {
            let mut r = derive_stream(42, 0).rng();
            (0..100).map(|_| r.gen()).collect()
        };
        let c: Vec<f64> = {
            let mut r = derive_stream(42, 1).rng();
            (0..100).map(|_| r.gen()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn child_streams_differ_from_parent_and_each_other() {
        let s = derive_stream(9, 4);
        let mut seqs: Vec<Vec<u64>> = Vec::new();
        for i in 0..8 {
            let mut r = s.child(i).rng();
            seqs.push((0..16).map(|_| r.gen()).collect());
        }
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_ne!(seqs[i], seqs[j]);
            }
        }
    }
}
