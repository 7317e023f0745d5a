//! Closed-form Gaussian expectation operators for the ReLU activation.
//!
//! The kernel recursions in [`crate::rntk`] repeatedly need
//! `E[phi(g) * phi(g')]` and `E[phi'(g) * phi'(g')]` where `(g, g')` is a
//! zero-mean bivariate Gaussian with covariance `[[k1, k3], [k3, k2]]`.
//! For ReLU both expectations have closed forms in the correlation
//! `c = k3 / sqrt(k1 * k2)`; this module holds the 2x2 block type and the
//! two operators.

use std::f64::consts::PI;

use thiserror::Error;

/// Activations with a known closed-form expectation operator.
///
/// ReLU is the only member today; the enum keeps the activation an
/// explicit parameter so further closed forms can slot in later.
#[derive(Clone, Copy, Debug, Default, Eq, PartialEq)]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    /// `E[phi(g) * phi(g')]` for this activation.
    pub fn expectation(self, b: &CovBlock) -> f64 {
        match self {
            Activation::Relu => v_relu(b),
        }
    }

    /// `E[phi'(g) * phi'(g')]` for this activation.
    pub fn derivative_expectation(self, b: &CovBlock) -> f64 {
        match self {
            Activation::Relu => v_relu_prime(b),
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum KernelMathError {
    #[error("covariance block entries must be finite (k1={k1}, k2={k2}, k3={k3})")]
    NonFinite { k1: f64, k2: f64, k3: f64 },
    #[error("self-covariances must be non-negative (k1={k1}, k2={k2})")]
    NegativeSelfCovariance { k1: f64, k2: f64 },
    #[error("block is not positive semidefinite (k1={k1}, k2={k2}, k3={k3})")]
    NotPositiveSemidefinite { k1: f64, k2: f64, k3: f64 },
    #[error("correlation is undefined on a padded block")]
    PaddedBlock,
    #[error("correlation is undefined on a degenerate block (k1={k1}, k2={k2})")]
    DegenerateBlock { k1: f64, k2: f64 },
}

/// A 2x2 positive-semidefinite covariance block at one (layer, time) cell.
///
/// `k1` and `k2` are the self-covariances of the two sequences at this
/// cell, `k3` the cross-covariance. `pad_x` / `pad_y` mark cells whose
/// position is zero padding in the respective sequence; the expectation
/// operators return exactly zero on such blocks, so padding never leaks
/// into the kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovBlock {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub pad_x: bool,
    pub pad_y: bool,
}

impl CovBlock {
    /// Slack allowed on `k3^2 <= k1 * k2` before a block is rejected.
    pub const PSD_REL_TOL: f64 = 1e-9;

    /// Validating constructor for a non-padded block.
    pub fn new(k1: f64, k2: f64, k3: f64) -> Result<Self, KernelMathError> {
        Self::with_padding(k1, k2, k3, false, false)
    }

    /// Validating constructor. Padded blocks skip the PSD check because the
    /// operators annihilate them regardless of the stored values.
    pub fn with_padding(
        k1: f64,
        k2: f64,
        k3: f64,
        pad_x: bool,
        pad_y: bool,
    ) -> Result<Self, KernelMathError> {
        if !(k1.is_finite() && k2.is_finite() && k3.is_finite()) {
            return Err(KernelMathError::NonFinite { k1, k2, k3 });
        }
        if k1 < 0.0 || k2 < 0.0 {
            return Err(KernelMathError::NegativeSelfCovariance { k1, k2 });
        }
        if !(pad_x || pad_y) && k3 * k3 > k1 * k2 * (1.0 + Self::PSD_REL_TOL) {
            return Err(KernelMathError::NotPositiveSemidefinite { k1, k2, k3 });
        }
        Ok(Self { k1, k2, k3, pad_x, pad_y })
    }

    /// Construct without validation; callers uphold the invariants.
    pub(crate) fn raw(k1: f64, k2: f64, k3: f64, pad_x: bool, pad_y: bool) -> Self {
        Self { k1, k2, k3, pad_x, pad_y }
    }

    pub fn is_padded(&self) -> bool {
        self.pad_x || self.pad_y
    }
}

/// Correlation coefficient `k3 / sqrt(k1 * k2)`, clamped into `[-1, 1]`.
///
/// The clamp absorbs floating-point excursions a hair past the endpoints.
/// Padded and degenerate blocks have no defined correlation; callers must
/// route them around this operation.
pub fn correlation(b: &CovBlock) -> Result<f64, KernelMathError> {
    if b.is_padded() {
        return Err(KernelMathError::PaddedBlock);
    }
    if b.k1 == 0.0 || b.k2 == 0.0 {
        return Err(KernelMathError::DegenerateBlock { k1: b.k1, k2: b.k2 });
    }
    Ok((b.k3 / (b.k1 * b.k2).sqrt()).clamp(-1.0, 1.0))
}

/// `E[relu(g) * relu(g')]` for `(g, g') ~ N(0, [[k1, k3], [k3, k2]])`.
///
/// Returns exactly zero for padded blocks and for blocks with a vanishing
/// self-covariance, which is the limit of the closed form as
/// `sqrt(k1 * k2) -> 0`.
pub fn v_relu(b: &CovBlock) -> f64 {
    debug_assert!(b.k1.is_finite() && b.k2.is_finite() && b.k3.is_finite());
    if b.is_padded() {
        return 0.0;
    }
    let scale = (b.k1 * b.k2).sqrt();
    if scale == 0.0 {
        return 0.0;
    }
    let c = (b.k3 / scale).clamp(-1.0, 1.0);
    (c * (PI - c.acos()) + (1.0 - c * c).sqrt()) / (2.0 * PI) * scale
}

/// `E[relu'(g) * relu'(g')]` for the same bivariate Gaussian.
///
/// A degenerate marginal carries no gradient signal, so blocks with a zero
/// self-covariance return zero exactly like the padded ones.
pub fn v_relu_prime(b: &CovBlock) -> f64 {
    debug_assert!(b.k1.is_finite() && b.k2.is_finite() && b.k3.is_finite());
    if b.is_padded() {
        return 0.0;
    }
    if b.k1 == 0.0 || b.k2 == 0.0 {
        return 0.0;
    }
    let c = (b.k3 / (b.k1 * b.k2).sqrt()).clamp(-1.0, 1.0);
    (PI - c.acos()) / (2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(k1: f64, k2: f64, k3: f64) -> CovBlock {
        CovBlock::new(k1, k2, k3).unwrap()
    }

    #[test]
    fn correlation_examples() {
        assert_eq!(correlation(&block(1.0, 1.0, 1.0)).unwrap(), 1.0);
        assert_eq!(correlation(&block(1.0, 1.0, 0.0)).unwrap(), 0.0);
        assert_eq!(correlation(&block(4.0, 1.0, 1.0)).unwrap(), 0.5);
    }

    #[test]
    fn correlation_rejects_padded_and_degenerate() {
        let padded = CovBlock::with_padding(1.0, 1.0, 1.0, true, false).unwrap();
        assert_eq!(correlation(&padded), Err(KernelMathError::PaddedBlock));
        let degenerate = block(0.0, 1.0, 0.0);
        assert!(matches!(
            correlation(&degenerate),
            Err(KernelMathError::DegenerateBlock { .. })
        ));
    }

    #[test]
    fn v_relu_trivial_values() {
        assert!((v_relu(&block(1.0, 1.0, 1.0)) - 0.5).abs() < 1e-12);
        assert!((v_relu(&block(1.0, 1.0, 0.0)) - 1.0 / (2.0 * PI)).abs() < 1e-12);
        assert_eq!(v_relu(&block(1.0, 1.0, -1.0)), 0.0);
        let padded = CovBlock::with_padding(1.0, 1.0, 1.0, true, false).unwrap();
        assert_eq!(v_relu(&padded), 0.0);
    }

    #[test]
    fn v_relu_prime_trivial_values() {
        assert!((v_relu_prime(&block(1.0, 1.0, 1.0)) - 0.5).abs() < 1e-12);
        assert!((v_relu_prime(&block(1.0, 1.0, 0.0)) - 0.25).abs() < 1e-12);
        assert_eq!(v_relu_prime(&block(1.0, 1.0, -1.0)), 0.0);
        let padded = CovBlock::with_padding(1.0, 1.0, 1.0, false, true).unwrap();
        assert_eq!(v_relu_prime(&padded), 0.0);
    }

    #[test]
    fn degenerate_blocks_return_zero_from_both_operators() {
        assert_eq!(v_relu(&block(0.0, 1.0, 0.0)), 0.0);
        assert_eq!(v_relu(&block(1.0, 0.0, 0.0)), 0.0);
        assert_eq!(v_relu_prime(&block(0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn activation_dispatch_matches_relu_operators() {
        let b = block(1.3, 0.8, 0.4);
        let act = Activation::default();
        assert_eq!(act.expectation(&b), v_relu(&b));
        assert_eq!(act.derivative_expectation(&b), v_relu_prime(&b));
    }

    #[test]
    fn constructor_rejects_bad_blocks() {
        assert!(matches!(
            CovBlock::new(f64::NAN, 1.0, 0.0),
            Err(KernelMathError::NonFinite { .. })
        ));
        assert!(matches!(
            CovBlock::new(-1.0, 1.0, 0.0),
            Err(KernelMathError::NegativeSelfCovariance { .. })
        ));
        assert!(matches!(
            CovBlock::new(1.0, 1.0, 2.0),
            Err(KernelMathError::NotPositiveSemidefinite { .. })
        ));
        // A hair over the boundary stays inside the relative tolerance.
        assert!(CovBlock::new(1.0, 1.0, 1.0 + 1e-13).is_ok());
    }

    #[test]
    fn monte_carlo_agreement_on_sample_blocks() {
        // Smoke-scale version of the acceptance check: 1e6 bivariate
        // samples per block, 3 standard errors.
        for (i, &(k1, k2, k3)) in [(1.0, 1.0, 0.6), (2.0, 0.5, -0.4), (1.3, 0.9, 0.0)]
            .iter()
            .enumerate()
        {
            let b = block(k1, k2, k3);
            let est = crate::oracle::verify::relu_moments_mc(&b, 1_000_000, 41 + i as u64);
            let dv = (est.v_mean - v_relu(&b)).abs();
            let dp = (est.v_prime_mean - v_relu_prime(&b)).abs();
            assert!(
                dv <= 3.0 * est.v_std_error,
                "v_relu off by {dv} (3se = {})",
                3.0 * est.v_std_error
            );
            assert!(
                dp <= 3.0 * est.v_prime_std_error,
                "v_relu_prime off by {dp} (3se = {})",
                3.0 * est.v_prime_std_error
            );
        }
    }

    fn arb_block() -> impl Strategy<Value = CovBlock> {
        (0.01f64..4.0, 0.01f64..4.0, -1.0f64..1.0)
            .prop_map(|(k1, k2, c)| CovBlock::raw(k1, k2, c * (k1 * k2).sqrt(), false, false))
    }

    proptest! {
        #[test]
        fn v_relu_bounds(b in arb_block()) {
            let v = v_relu(&b);
            let cap = (b.k1 * b.k2).sqrt() / 2.0;
            prop_assert!(v >= 0.0);
            prop_assert!(v <= cap * (1.0 + 1e-12));
        }

        #[test]
        fn v_relu_peak_at_unit_correlation(k1 in 0.01f64..4.0, k2 in 0.01f64..4.0) {
            let b = CovBlock::raw(k1, k2, (k1 * k2).sqrt(), false, false);
            let v = v_relu(&b);
            prop_assert!((v - (k1 * k2).sqrt() / 2.0).abs() <= 1e-12 * (k1 * k2).sqrt());
        }

        #[test]
        fn v_relu_prime_bounds_and_monotone(
            k1 in 0.01f64..4.0,
            k2 in 0.01f64..4.0,
            c1 in -1.0f64..1.0,
            c2 in -1.0f64..1.0,
        ) {
            let scale = (k1 * k2).sqrt();
            let lo = c1.min(c2);
            let hi = c1.max(c2);
            let p_lo = v_relu_prime(&CovBlock::raw(k1, k2, lo * scale, false, false));
            let p_hi = v_relu_prime(&CovBlock::raw(k1, k2, hi * scale, false, false));
            prop_assert!((0.0..=0.5).contains(&p_lo));
            prop_assert!((0.0..=0.5).contains(&p_hi));
            prop_assert!(p_lo <= p_hi + 1e-15);
        }

        #[test]
        fn v_relu_symmetric_under_argument_swap(b in arb_block()) {
            let swapped = CovBlock::raw(b.k2, b.k1, b.k3, b.pad_y, b.pad_x);
            prop_assert_eq!(v_relu(&b), v_relu(&swapped));
        }

        #[test]
        fn clamp_absorbs_tiny_excursions(k in 0.01f64..4.0) {
            // k3 nudged past sqrt(k1*k2) by a few ulps must not produce NaN.
            let k3 = k * (1.0 + 4.0 * f64::EPSILON);
            let b = CovBlock::raw(k, k, k3, false, false);
            let v = v_relu(&b);
            prop_assert!(v.is_finite());
            prop_assert!((v - k / 2.0).abs() <= 1e-12 * k);
        }
    }
}
