//! Surrogate losses, margin error and the boosting distribution.
//!
//! Losses are written as functions of `1 - y f(x)`: the objective evaluates
//! `Phi(1 - y f)`, so larger margins mean smaller arguments.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::kernel::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateLoss {
    /// `Phi(x) = e^x`
    Exponential,
    /// `Phi(x) = log(1 + e^x)`
    Logistic,
}

impl std::str::FromStr for SurrogateLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(SurrogateLoss::Exponential),
            "logistic" => Ok(SurrogateLoss::Logistic),
            other => Err(invalid_param(format!("unknown loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for SurrogateLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SurrogateLoss::Exponential => "exponential",
            SurrogateLoss::Logistic => "logistic",
        })
    }
}

impl SurrogateLoss {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            SurrogateLoss::Exponential => x.exp(),
            SurrogateLoss::Logistic => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            SurrogateLoss::Exponential => x.exp(),
            SurrogateLoss::Logistic => sigmoid(x),
        }
    }

    /// `(Phi(x), Phi'(x))`.
    #[inline]
    pub fn surrogate(self, x: f64) -> (f64, f64) {
        match self {
            SurrogateLoss::Exponential => {
                let e = x.exp();
                (e, e)
            }
            SurrogateLoss::Logistic => (self.value(x), sigmoid(x)),
        }
    }
}

/// Fraction of examples with `y_i f(x_i) <= rho`.
pub fn margin_error(scores: &[f64], labels: &[f64], rho: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid_input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(invalid_input("margin error of an empty sample"));
    }
    let bad = scores
        .iter()
        .zip(labels)
        .filter(|(f, y)| *y * *f <= rho)
        .count();
    Ok(bad as f64 / scores.len() as f64)
}

/// Fraction of examples with `y_i f(x_i) > 0`.
pub fn accuracy(scores: &[f64], labels: &[f64]) -> Result<f64> {
    margin_error(scores, labels, 0.0).map(|e| 1.0 - e)
}

/// Example weights `D(i) = Phi'(1 - y_i f(x_i)) / S`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDistribution {
    pub weights: Vec<f64>,
    pub normalizer: f64,
}

pub fn boosting_distribution(
    loss: SurrogateLoss,
    scores: &[f64],
    labels: &[f64],
) -> Result<SampleDistribution> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(invalid_input(
            "scores and labels must be non-empty and aligned",
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid_input("non-finite score"));
    }
    let mut weights: Vec<f64> = scores
        .iter()
        .zip(labels)
        .map(|(f, y)| loss.derivative(1.0 - y * f))
        .collect();
    let normalizer: f64 = weights.iter().sum();
    if !(normalizer.is_finite() && normalizer > 0.0) {
        return Err(Error::Numeric(format!(
            "boosting distribution normalizer is {normalizer}"
        )));
    }
    weights.iter_mut().for_each(|w| *w /= normalizer);
    Ok(SampleDistribution {
        weights,
        normalizer,
    })
}
