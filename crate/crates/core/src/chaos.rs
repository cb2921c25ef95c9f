//! Logistic-map sequence generation.
//!
//! A watermark key is the triple `(r, x0, epsilon)`; `r` and `x0` drive the
//! recurrence `x_{n+1} = r * x_n * (1 - x_n)` and `epsilon` scales the
//! resulting sequence when it is added to a layer. All arithmetic is `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower edge of the chaotic band for `r`.
pub const R_CHAOTIC_MIN: f64 = 3.57;
/// Upper edge of the logistic map's bounded regime.
pub const R_MAX: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RRange {
    /// `3.57 <= r <= 4.0`.
    Chaotic,
    /// `0 < r <= 4.0`, used only for the verifier's search box.
    Permissive,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("x0 = {0} is not in the open interval (0, 1)")]
    X0OutOfRange(f64),
    #[error("r = {r} is outside the allowed range [{min}, {max}]")]
    ROutOfRange { r: f64, min: f64, max: f64 },
    #[error("epsilon = {0} must be strictly positive")]
    NonPositiveEpsilon(f64),
    #[error("sequence length {0} is negative")]
    NegativeLength(i64),
}

/// The secret watermark key plus the number of elements to generate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChaoticParams {
    pub r: f64,
    pub x0: f64,
    pub epsilon: f64,
    pub length: usize,
}

impl ChaoticParams {
    pub fn new(r: f64, x0: f64, epsilon: f64, length: usize) -> Self {
        Self { r, x0, epsilon, length }
    }

    /// Same key, different length.
    pub fn with_length(self, length: usize) -> Self {
        Self { length, ..self }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        validate_key(self.r, self.x0, self.epsilon, RRange::Chaotic)
    }
}

/// Checks the key invariants. `length` is unsigned here, so the
/// negative-length case can only arise from [`validate_raw`].
pub fn validate_params(params: &ChaoticParams) -> Result<(), ParamError> {
    params.validate()
}

/// Validation for values coming from untyped sources (CLI, config files)
/// where a length may still be signed.
pub fn validate_raw(r: f64, x0: f64, epsilon: f64, length: i64) -> Result<ChaoticParams, ParamError> {
    validate_key(r, x0, epsilon, RRange::Chaotic)?;
    if length < 0 {
        return Err(ParamError::NegativeLength(length));
    }
    Ok(ChaoticParams::new(r, x0, epsilon, length as usize))
}

pub fn validate_key(r: f64, x0: f64, epsilon: f64, range: RRange) -> Result<(), ParamError> {
    // NaN fails every comparison below, so it is rejected too.
    if !(x0 > 0.0 && x0 < 1.0) {
        return Err(ParamError::X0OutOfRange(x0));
    }
    let ok = match range {
        RRange::Chaotic => (R_CHAOTIC_MIN..=R_MAX).contains(&r),
        RRange::Permissive => r > 0.0 && r <= R_MAX,
    };
    if !ok {
        let min = match range {
            RRange::Chaotic => R_CHAOTIC_MIN,
            RRange::Permissive => 0.0,
        };
        return Err(ParamError::ROutOfRange { r, min, max: R_MAX });
    }
    if !(epsilon > 0.0) {
        return Err(ParamError::NonPositiveEpsilon(epsilon));
    }
    Ok(())
}

/// Validated logistic-map output. Element `i` is the `(i+1)`-th iterate; `x0`
/// itself is never emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence(Vec<f64>);

impl Sequence {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn generate_chaotic_sequence(params: &ChaoticParams) -> Result<Sequence, ParamError> {
    params.validate()?;
    Ok(Sequence(logistic_iterates(params.r, params.x0, params.length)))
}

/// Unchecked iteration used by the verifier, whose candidates may sit in the
/// permissive range. Update first, then store.
pub fn logistic_iterates(r: f64, x0: f64, length: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(length);
    logistic_iterates_into(r, x0, length, &mut out);
    out
}

pub fn logistic_iterates_into(r: f64, x0: f64, length: usize, out: &mut Vec<f64>) {
    out.clear();
    let mut x = x0;
    for _ in 0..length {
        x = r * x * (1.0 - x);
        out.push(x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_key_is_valid() {
        assert!(ChaoticParams::new(3.9, 0.5, 0.01, 100).validate().is_ok());
    }

    #[test]
    fn rejects_each_violation_distinctly() {
        assert_eq!(
            ChaoticParams::new(3.9, 0.0, 0.01, 100).validate(),
            Err(ParamError::X0OutOfRange(0.0))
        );
        assert!(matches!(
            ChaoticParams::new(3.0, 0.5, 0.01, 100).validate(),
            Err(ParamError::ROutOfRange { .. })
        ));
        assert_eq!(
            ChaoticParams::new(3.9, 0.5, 0.0, 100).validate(),
            Err(ParamError::NonPositiveEpsilon(0.0))
        );
        assert_eq!(validate_raw(3.9, 0.5, 0.01, -1), Err(ParamError::NegativeLength(-1)));
        assert!(ChaoticParams::new(3.9, 1.0, 0.01, 1).validate().is_err());
        assert!(ChaoticParams::new(f64::NAN, 0.5, 0.01, 1).validate().is_err());
        assert!(ChaoticParams::new(4.0000001, 0.5, 0.01, 1).validate().is_err());
        assert!(ChaoticParams::new(3.57, 0.5, 0.01, 1).validate().is_ok());
        assert!(ChaoticParams::new(4.0, 0.5, 0.01, 1).validate().is_ok());
    }

    #[test]
    fn permissive_range_for_search() {
        assert!(validate_key(3.0, 0.5, 0.01, RRange::Permissive).is_ok());
        assert!(validate_key(0.0, 0.5, 0.01, RRange::Permissive).is_err());
    }

    #[test]
    fn zero_length_is_empty() {
        let s = generate_chaotic_sequence(&ChaoticParams::new(3.9, 0.5, 0.01, 0)).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn hand_iterated_prefix() {
        let s = generate_chaotic_sequence(&ChaoticParams::new(3.9, 0.5, 0.01, 3)).unwrap();
        assert!((s.values()[0] - 0.975).abs() < 1e-12);
        assert!((s.values()[1] - 0.0950625).abs() < 1e-12);
        assert!((s.values()[2] - 0.3355).abs() < 1e-4);
    }

    #[test]
    fn invalid_params_rejected_before_generation() {
        assert!(generate_chaotic_sequence(&ChaoticParams::new(3.9, 1.5, 0.01, 10)).is_err());
    }

    #[test]
    fn sensitive_to_initial_value() {
        for x0 in [0.3, 0.4, 0.6, 0.123] {
            let a = logistic_iterates(3.9, x0, 100);
            let b = logistic_iterates(3.9, x0 + 1e-9, 100);
            assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 0.1), "x0 = {x0}");
        }
    }

    #[test]
    fn critical_point_absorbs_small_perturbations() {
        // The map is flat at 0.5: a 1e-9 shift changes x1 by ~1e-18, below
        // f64 resolution, so both orbits are bit-identical.
        let a = logistic_iterates(3.9, 0.5, 100);
        let b = logistic_iterates(3.9, 0.5 + 1e-9, 100);
        assert_eq!(a, b);
        let c = logistic_iterates(3.9, 0.5 + 1e-6, 100);
        assert!(a.iter().zip(&c).any(|(x, y)| (x - y).abs() > 0.1));
    }

    #[test]
    fn long_sequence_stays_in_unit_interval() {
        let s = logistic_iterates(3.9, 0.5, 1_000_000);
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    proptest! {
        #[test]
        fn recurrence_and_range(r in 3.57f64..=4.0, x0 in 1e-6f64..0.999_999, len in 0usize..2000) {
            let p = ChaoticParams::new(r, x0, 0.01, len);
            let s = generate_chaotic_sequence(&p).unwrap();
            prop_assert_eq!(s.len(), len);
            let v = s.values();
            if len > 0 {
                prop_assert_eq!(v[0], r * x0 * (1.0 - x0));
            }
            for w in v.windows(2) {
                prop_assert_eq!(w[1], r * w[0] * (1.0 - w[0]));
            }
            if r < 4.0 {
                prop_assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
            }
            prop_assert_eq!(generate_chaotic_sequence(&p).unwrap(), s);
        }
    }
}
