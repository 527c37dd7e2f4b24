//! Power-law fits of item degrees and the fraction of items a robust
//! aggregator with breakdown point α cannot protect against ñ attackers.
//!
//! An item with degree `d` receives `d` benign and up to `ñ` malicious
//! gradients, so the attackers form more than an α share once
//! `d < (1−α)/α · ñ`. Under a continuous power law `p(x) = C x^(−β)` on
//! `[x_min, ∞)` the share of such items is `1 − C/(β−1) · t^(1−β)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest sample accepted by [`fit_power_law`].
pub const MIN_FIT_SAMPLES: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("need at least {required} degrees >= x_min, got {found}")]
    TooFewSamples { found: usize, required: usize },
    #[error("all degrees are equal; the exponent is undefined")]
    Degenerate,
    #[error("x_min must be finite and > 0, got {0}")]
    InvalidXMin(f64),
    #[error("breakdown point must lie in (0, 0.5], got {0}")]
    InvalidBreakdownPoint(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub normalization: f64,
    pub x_min: f64,
}

impl PowerLawFit {
    /// Fit with the normalizing constant implied by `exponent` and `x_min`.
    pub fn new(exponent: f64, x_min: f64) -> Self {
        PowerLawFit {
            exponent,
            normalization: (exponent - 1.0) * x_min.powf(exponent - 1.0),
            x_min,
        }
    }

    /// `P(X ≥ x)` under the fitted density, ignoring the clamp at `x_min`.
    pub fn tail(&self, x: f64) -> f64 {
        self.normalization / (self.exponent - 1.0) * x.powf(1.0 - self.exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakdownQuery {
    pub breakdown_point: f64,
    pub malicious_count: usize,
}

impl BreakdownQuery {
    pub fn new(breakdown_point: f64, malicious_count: usize) -> Result<Self, AnalysisError> {
        if !(breakdown_point > 0.0 && breakdown_point <= 0.5) {
            return Err(AnalysisError::InvalidBreakdownPoint(breakdown_point));
        }
        Ok(BreakdownQuery {
            breakdown_point,
            malicious_count,
        })
    }

    /// Degree below which attackers exceed the breakdown share of an item.
    pub fn degree_threshold(&self) -> f64 {
        let a = self.breakdown_point;
        (1.0 - a) / a * self.malicious_count as f64
    }
}

pub fn fit_power_law(degrees: &[f64]) -> Result<PowerLawFit, AnalysisError> {
    fit_power_law_with_xmin(degrees, 1.0)
}

/// Continuous maximum-likelihood fit over the degrees `>= x_min`.
pub fn fit_power_law_with_xmin(degrees: &[f64], x_min: f64) -> Result<PowerLawFit, AnalysisError> {
    if !(x_min > 0.0 && x_min.is_finite()) {
        return Err(AnalysisError::InvalidXMin(x_min));
    }
    let mut n = 0usize;
    let mut log_sum = 0.0;
    let mut first = None;
    let mut all_equal = true;
    for &x in degrees.iter().filter(|&&x| x >= x_min) {
        n += 1;
        log_sum += (x / x_min).ln();
        all_equal &= *first.get_or_insert(x) == x;
    }
    if n < MIN_FIT_SAMPLES {
        return Err(AnalysisError::TooFewSamples {
            found: n,
            required: MIN_FIT_SAMPLES,
        });
    }
    if all_equal || !(log_sum > 0.0) {
        return Err(AnalysisError::Degenerate);
    }
    Ok(PowerLawFit::new(1.0 + n as f64 / log_sum, x_min))
}

pub fn predicted_breakdown_fraction(fit: &PowerLawFit, query: &BreakdownQuery) -> f64 {
    if query.malicious_count == 0 {
        return 0.0;
    }
    let p = 1.0 - fit.tail(query.degree_threshold());
    if p.is_nan() {
        return 0.0;
    }
    p.clamp(0.0, 1.0)
}

pub fn empirical_breakdown_fraction(degrees: &[f64], query: &BreakdownQuery) -> f64 {
    if degrees.is_empty() {
        return 0.0;
    }
    let t = query.degree_threshold();
    degrees.iter().filter(|&&d| d < t).count() as f64 / degrees.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(alpha: f64, n: usize) -> BreakdownQuery {
        BreakdownQuery::new(alpha, n).unwrap()
    }

    #[test]
    fn predicted_closed_form() {
        let fit = PowerLawFit {
            exponent: 2.0,
            normalization: 1.0,
            x_min: 1.0,
        };
        assert!((predicted_breakdown_fraction(&fit, &q(0.5, 10)) - 0.9).abs() < 1e-12);
        assert_eq!(predicted_breakdown_fraction(&fit, &q(0.5, 0)), 0.0);
    }

    #[test]
    fn empirical_hand_count() {
        let d = [1.0, 1.0, 5.0, 300.0];
        assert_eq!(empirical_breakdown_fraction(&d, &q(0.5, 10)), 0.75);
        assert_eq!(empirical_breakdown_fraction(&d, &q(0.5, 0)), 0.0);
        // strict: an item exactly at the threshold is not counted
        assert_eq!(empirical_breakdown_fraction(&[10.0], &q(0.5, 10)), 0.0);
    }

    #[test]
    fn fit_errors() {
        assert_eq!(fit_power_law(&[3.0; 50]).unwrap_err(), AnalysisError::Degenerate);
        assert_eq!(fit_power_law(&[1.0; 50]).unwrap_err(), AnalysisError::Degenerate);
        assert!(matches!(
            fit_power_law(&[2.0, 3.0, 4.0]),
            Err(AnalysisError::TooFewSamples { found: 3, .. })
        ));
        assert!(matches!(
            fit_power_law(&[0.0; 40]),
            Err(AnalysisError::TooFewSamples { found: 0, .. })
        ));
        assert!(fit_power_law_with_xmin(&[2.0; 40], 0.0).is_err());
    }

    #[test]
    fn normalization_integrates_to_one() {
        for (beta, x_min) in [(2.5, 1.0), (1.3, 4.0), (3.7, 0.5)] {
            let fit = PowerLawFit::new(beta, x_min);
            // ∫_{x_min}^∞ C x^{-β} dx = C x_min^{1-β} / (β-1)
            assert!((fit.tail(x_min) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn query_validation() {
        assert!(BreakdownQuery::new(0.0, 1).is_err());
        assert!(BreakdownQuery::new(0.6, 1).is_err());
        assert!(BreakdownQuery::new(f64::NAN, 1).is_err());
        assert!(BreakdownQuery::new(0.5, 1).is_ok());
    }

    #[test]
    fn clamped_for_extreme_fits() {
        let wild = PowerLawFit {
            exponent: 1.01,
            normalization: 50.0,
            x_min: 1.0,
        };
        let p = predicted_breakdown_fraction(&wild, &q(0.5, 3));
        assert_eq!(p, 0.0);
        let steep = PowerLawFit::new(40.0, 1.0);
        assert_eq!(predicted_breakdown_fraction(&steep, &q(0.1, 1000)), 1.0);
    }
}
