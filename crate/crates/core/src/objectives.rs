//! Pipeline-level aggregation objectives and their closed-form responses.
//!
//! Every objective is separable and concave (after a log transform for the
//! product forms), so for a fixed dual price `lambda` each phase's optimal
//! budget has a closed form:
//!
//! | objective    | aggregate                 | response `x(lambda)`                    | starved when            |
//! |--------------|---------------------------|-----------------------------------------|-------------------------|
//! | `Additive`   | `sum f_i(x_i)`            | `ln(a b / lambda) / b`                  | `lambda >= a b`         |
//! | `MultOffset` | `prod g_i(x_i)`           | `ln(a (b + lambda) / lambda) / b`       | `lambda >= a b / (1-a)` |
//! | `PropOffset` | `prod g_i(x_i)^w_i`       | `ln(a (w b + lambda) / lambda) / b`     | `lambda >= a w b/(1-a)` |
//!
//! Responses are clamped to `[0, cap]`. Internally they are evaluated from
//! `ln lambda` so the dual search can range over prices far outside the
//! representable exponent range of `lambda` itself.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::curves::PhaseCurve;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Additive,
    MultOffset,
    PropOffset,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Additive => "additive",
            ObjectiveKind::MultOffset => "mult-offset",
            ObjectiveKind::PropOffset => "prop-offset",
        }
    }

    pub fn is_product(self) -> bool {
        !matches!(self, ObjectiveKind::Additive)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    /// Accepts `additive`, `mult-offset`, `prop-offset`, their `zebra-` prefixed
    /// strategy names, and underscore spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        match norm.strip_prefix("zebra-").unwrap_or(&norm) {
            "additive" => Ok(ObjectiveKind::Additive),
            "mult-offset" => Ok(ObjectiveKind::MultOffset),
            "prop-offset" => Ok(ObjectiveKind::PropOffset),
            _ => Err(Error::validation("objective", format!("unknown objective '{s}'"))),
        }
    }
}

/// An aggregation objective, with per-phase weights for `PropOffset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Objective {
    pub fn additive() -> Self {
        Self {
            kind: ObjectiveKind::Additive,
            weights: None,
        }
    }

    pub fn mult_offset() -> Self {
        Self {
            kind: ObjectiveKind::MultOffset,
            weights: None,
        }
    }

    pub fn prop_offset(weights: Vec<f64>) -> Result<Self> {
        let obj = Self {
            kind: ObjectiveKind::PropOffset,
            weights: Some(weights),
        };
        obj.check_weights()?;
        Ok(obj)
    }

    /// Propagation weights set to each phase's quality ceiling.
    pub fn prop_offset_from_ceilings(curves: &[PhaseCurve]) -> Self {
        Self {
            kind: ObjectiveKind::PropOffset,
            weights: Some(curves.iter().map(|c| c.ceiling_a).collect()),
        }
    }

    /// Objective of the given kind; `PropOffset` takes its weights from the curves.
    pub fn for_curves(kind: ObjectiveKind, curves: &[PhaseCurve]) -> Self {
        match kind {
            ObjectiveKind::Additive => Self::additive(),
            ObjectiveKind::MultOffset => Self::mult_offset(),
            ObjectiveKind::PropOffset => Self::prop_offset_from_ceilings(curves),
        }
    }

    fn check_weights(&self) -> Result<()> {
        match (self.kind, &self.weights) {
            (ObjectiveKind::PropOffset, None) => Err(Error::validation(
                "weights",
                "prop-offset objective requires per-phase weights",
            )),
            (ObjectiveKind::PropOffset, Some(w)) => {
                if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
                    return Err(Error::validation(
                        "weights",
                        format!("weight {i} must be finite and > 0, got {v}"),
                    ));
                }
                Ok(())
            }
            (kind, Some(_)) => Err(Error::validation(
                "weights",
                format!("{kind} objective does not take weights"),
            )),
            (_, None) => Ok(()),
        }
    }

    /// Check the objective against a pipeline of `n_phases` phases.
    pub fn validate(&self, n_phases: usize) -> Result<()> {
        self.check_weights()?;
        if let Some(w) = &self.weights {
            if w.len() != n_phases {
                return Err(Error::validation(
                    "weights",
                    format!("{} weights for {} phases", w.len(), n_phases),
                ));
            }
        }
        Ok(())
    }

    /// Weight of phase `i` (1 unless weighted).
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// The same objective restricted to the phases at `indices`.
    pub fn restrict(&self, indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            kind: self.kind,
            weights: self
                .weights
                .as_ref()
                .map(|w| indices.into_iter().map(|i| w[i]).collect()),
        }
    }
}

fn check_weight(kind: ObjectiveKind, weight: f64) -> Result<()> {
    if !(weight.is_finite() && weight > 0.0) {
        return Err(Error::validation("weight", format!("must be > 0, got {weight}")));
    }
    if kind != ObjectiveKind::PropOffset && weight != 1.0 {
        return Err(Error::validation(
            "weight",
            format!("{kind} objective requires weight 1, got {weight}"),
        ));
    }
    Ok(())
}

/// Closed-form budget response of one phase at dual price `lambda`.
pub fn phase_response(
    curve: &PhaseCurve,
    lambda: f64,
    kind: ObjectiveKind,
    weight: f64,
    cap: Option<f64>,
) -> Result<f64> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::Domain(format!("dual price must be > 0, got {lambda}")));
    }
    check_weight(kind, weight)?;
    if let Some(u) = cap {
        if u.is_nan() || u <= 0.0 {
            return Err(Error::validation("cap", format!("must be > 0, got {u}")));
        }
    }
    Ok(response_at_log_price(curve, lambda.ln(), kind, weight, cap))
}

/// Response evaluated from `ln lambda`; inputs are assumed valid.
pub(crate) fn response_at_log_price(
    curve: &PhaseCurve,
    log_lambda: f64,
    kind: ObjectiveKind,
    weight: f64,
    cap: Option<f64>,
) -> f64 {
    if log_lambda >= log_starvation_threshold(curve, kind, weight) {
        return 0.0;
    }
    let a = curve.ceiling_a;
    let b = curve.rate_b;
    let raw = match kind {
        ObjectiveKind::Additive => ((a * b).ln() - log_lambda) / b,
        ObjectiveKind::MultOffset | ObjectiveKind::PropOffset => {
            // ln(a (w b + lambda) / lambda) = ln a + ln(1 + w b / lambda)
            (a.ln() + softplus((weight * b).ln() - log_lambda)) / b
        }
    };
    let x = raw.max(0.0);
    match cap {
        Some(u) => x.min(u),
        None => x,
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 40.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Price at or above which the phase receives no budget.
///
/// `a b` for `Additive`, `a w b / (1 - a)` for the product objectives
/// (`+inf` when `a = 1`).
pub fn starvation_threshold(curve: &PhaseCurve, kind: ObjectiveKind, weight: f64) -> f64 {
    let ab = curve.ceiling_a * curve.rate_b;
    match kind {
        ObjectiveKind::Additive => ab,
        ObjectiveKind::MultOffset | ObjectiveKind::PropOffset => {
            if curve.ceiling_a >= 1.0 {
                f64::INFINITY
            } else {
                ab * weight / (1.0 - curve.ceiling_a)
            }
        }
    }
}

pub(crate) fn log_starvation_threshold(curve: &PhaseCurve, kind: ObjectiveKind, weight: f64) -> f64 {
    let log_ab = curve.ceiling_a.ln() + curve.rate_b.ln();
    match kind {
        ObjectiveKind::Additive => log_ab,
        ObjectiveKind::MultOffset | ObjectiveKind::PropOffset => {
            if curve.ceiling_a >= 1.0 {
                f64::INFINITY
            } else {
                log_ab + weight.ln() - (-curve.ceiling_a).ln_1p()
            }
        }
    }
}

/// The marginal the objective equalizes across funded phases:
/// `f'(x)`, `g'(x)/g(x)`, or `w g'(x)/g(x)`.
pub fn marginal(curve: &PhaseCurve, x: f64, kind: ObjectiveKind, weight: f64) -> f64 {
    match kind {
        ObjectiveKind::Additive => curve.f_prime_unchecked(x),
        ObjectiveKind::MultOffset | ObjectiveKind::PropOffset => {
            weight * curve.log_marginal_unchecked(x)
        }
    }
}

/// Value of an objective at an allocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// Linear-domain value (`exp(log_value)` for the product objectives).
    pub value: f64,
    /// `sum w_i ln g_i(x_i)` for the product objectives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_value: Option<f64>,
}

pub fn evaluate(curves: &[PhaseCurve], amounts: &[f64], objective: &Objective) -> Result<ObjectiveValue> {
    if curves.len() != amounts.len() {
        return Err(Error::validation(
            "allocation",
            format!("{} amounts for {} phases", amounts.len(), curves.len()),
        ));
    }
    objective.validate(curves.len())?;
    if let Some((i, x)) = amounts.iter().enumerate().find(|(_, x)| x.is_nan() || **x < 0.0) {
        return Err(Error::Domain(format!("amount {i} must be >= 0, got {x}")));
    }
    Ok(match objective.kind {
        ObjectiveKind::Additive => ObjectiveValue {
            value: curves.iter().zip(amounts).map(|(c, &x)| c.f_unchecked(x)).sum(),
            log_value: None,
        },
        ObjectiveKind::MultOffset | ObjectiveKind::PropOffset => {
            let log_value: f64 = curves
                .iter()
                .zip(amounts)
                .enumerate()
                .map(|(i, (c, &x))| objective.weight(i) * c.ln_g_unchecked(x))
                .sum();
            ObjectiveValue {
                value: log_value.exp(),
                log_value: Some(log_value),
            }
        }
    })
}
