//! Three-term power law `L(m, s) = a_m m^b_m + a_s s^b_s + a_c (m s)^b_c`,
//! with `m` in millions of parameters and `s` in optimizer steps.

mod fit;
mod io;
mod metrics;

pub use fit::{
    fit, FitOptions, EXPONENT_BOUNDS, LOG_AMPLITUDE_BOUNDS, MAX_ITERATIONS, MIN_OBSERVATIONS,
    START_EXPONENTS,
};
pub use io::{observations_from_log, read_fit, write_fit, write_predictions};
pub use metrics::{fit_metrics, FitMetrics};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("m and s must be positive and finite, got m = {m}, s = {s}")]
    Domain { m: f64, s: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("length mismatch: {predicted} predicted vs {actual} actual")]
    LengthMismatch { predicted: usize, actual: usize },
    #[error("no values to compare")]
    Empty,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingObservation {
    /// Millions of parameters.
    pub m: f64,
    /// Optimizer steps.
    pub s: f64,
    pub loss: f64,
}

impl ScalingObservation {
    pub fn new(m: f64, s: f64, loss: f64) -> Result<Self, ScalingError> {
        if !(m > 0.0 && s > 0.0 && m.is_finite() && s.is_finite()) {
            return Err(ScalingError::Domain { m, s });
        }
        Ok(ScalingObservation { m, s, loss })
    }

    /// Compute proxy `m * s`.
    pub fn c(&self) -> f64 {
        self.m * self.s
    }
}

/// Fitted coefficients and diagnostics. The JSON form has exactly the six
/// coefficients plus `residual` and `converged`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingLawFit {
    pub alpha_m: f64,
    pub beta_m: f64,
    pub alpha_s: f64,
    pub beta_s: f64,
    pub alpha_c: f64,
    pub beta_c: f64,
    /// Euclidean norm of the residual vector.
    #[serde(default)]
    pub residual: f64,
    #[serde(default = "yes")]
    pub converged: bool,
    #[serde(skip)]
    pub iterations: usize,
}

fn yes() -> bool {
    true
}

impl ScalingLawFit {
    pub fn from_coefficients(alpha: [f64; 3], beta: [f64; 3]) -> Self {
        ScalingLawFit {
            alpha_m: alpha[0],
            beta_m: beta[0],
            alpha_s: alpha[1],
            beta_s: beta[1],
            alpha_c: alpha[2],
            beta_c: beta[2],
            residual: 0.0,
            converged: true,
            iterations: 0,
        }
    }

    /// Contributions of the m, s and c terms.
    pub fn terms(&self, m: f64, s: f64) -> [f64; 3] {
        [
            self.alpha_m * m.powf(self.beta_m),
            self.alpha_s * s.powf(self.beta_s),
            self.alpha_c * (m * s).powf(self.beta_c),
        ]
    }

    /// True when every exponent is negative, the physically sensible regime.
    pub fn is_decreasing(&self) -> bool {
        self.beta_m < 0.0 && self.beta_s < 0.0 && self.beta_c < 0.0
    }
}

pub fn evaluate(fit: &ScalingLawFit, m: f64, s: f64) -> Result<f64, ScalingError> {
    if !(m > 0.0 && s > 0.0 && m.is_finite() && s.is_finite()) {
        return Err(ScalingError::Domain { m, s });
    }
    Ok(fit.terms(m, s).iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn published() -> ScalingLawFit {
        ScalingLawFit::from_coefficients([2.660, 1.848, 0.588], [-1.137, -0.225, -1.479])
    }

    #[test]
    fn forecast_anchors() {
        let f = published();
        let big = evaluate(&f, 1100.0, 810_000.0).unwrap();
        let mid = evaluate(&f, 570.0, 810_000.0).unwrap();
        let small = evaluate(&f, 84.0, 810_000.0).unwrap();
        assert!((big - 0.0875).abs() <= 5e-4, "{big}");
        assert!((big - 0.0871).abs() <= 1e-3, "{big}");
        assert!((mid - 0.0885).abs() <= 5e-4, "{mid}");
        assert!((mid - 0.088).abs() <= 1e-3, "{mid}");
        assert!((small - 0.104).abs() <= 2e-3, "{small}");
    }

    #[test]
    fn term_oracle() {
        let f = published();
        let (m, s) = (42.0f64, 300_000.0f64);
        let expected = 2.660 * (-1.137 * m.ln()).exp()
            + 1.848 * (-0.225 * s.ln()).exp()
            + 0.588 * (-1.479 * (m * s).ln()).exp();
        assert!((evaluate(&f, m, s).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_alphas_give_zero() {
        let f = ScalingLawFit::from_coefficients([0.0; 3], [-1.0, -0.5, -0.2]);
        assert_eq!(evaluate(&f, 3.0, 1e5).unwrap(), 0.0);
    }

    #[test]
    fn domain_errors() {
        let f = published();
        for (m, s) in [
            (0.0, 1.0),
            (1.0, 0.0),
            (-1.0, 5.0),
            (f64::NAN, 1.0),
            (1.0, f64::INFINITY),
        ] {
            assert!(matches!(
                evaluate(&f, m, s),
                Err(ScalingError::Domain { .. })
            ));
        }
    }

    #[test]
    fn json_has_spec_keys() {
        let text = serde_json::to_string(&published()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "alpha_c",
                "alpha_m",
                "alpha_s",
                "beta_c",
                "beta_m",
                "beta_s",
                "converged",
                "residual"
            ]
        );
        let bare: ScalingLawFit = serde_json::from_str(
            r#"{"alpha_m":1,"beta_m":-1,"alpha_s":1,"beta_s":-1,"alpha_c":1,"beta_c":-1}"#,
        )
        .unwrap();
        assert!(bare.converged);
    }

    proptest! {
        #[test]
        fn decreasing_in_m_and_s(
            m in 1.0f64..2000.0, s in 1.0f64..1e6, dm in 0.1f64..100.0, ds in 1.0f64..1e5,
            b in proptest::array::uniform3(-2.0f64..-0.01), a in proptest::array::uniform3(0.01f64..5.0),
        ) {
            let f = ScalingLawFit::from_coefficients(a, b);
            let base = evaluate(&f, m, s).unwrap();
            prop_assert!(evaluate(&f, m + dm, s).unwrap() < base);
            prop_assert!(evaluate(&f, m, s + ds).unwrap() < base);
        }
    }
}
