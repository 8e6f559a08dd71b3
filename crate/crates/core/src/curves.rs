//! Saturating-exponential phase utility curves.
//!
//! A phase's expected quality as a function of the budget `x` it receives is
//! modelled as `f(x) = a (1 - exp(-b x))`, where `a` in (0, 1] is the quality
//! ceiling and `b > 0` the saturation rate in inverse currency units. The
//! offset form `g(x) = 1 - a exp(-b x) = (1 - a) + f(x)` is the pass-through
//! quality used by the product objectives.
//!
//! Curves are fitted from two elicited token counts: the output tokens that
//! reach roughly half of the phase's potential quality and the tokens that
//! reach roughly 90% of it. Each implies a rate (`ln 2 / n_basic` and
//! `ln 10 / n_great`); the fitted rate is their geometric mean, then
//! rescaled from tokens to currency with the phase's output-token price.

use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_10, LN_2};

use crate::error::{Error, Result};

/// Lower bound on `tokens_basic` accepted by the controller schema.
pub const TOKENS_BASIC_MIN: u32 = 100;
/// Upper bound on `tokens_basic` accepted by the controller schema.
pub const TOKENS_BASIC_MAX: u32 = 10_000;
/// Upper bound on `tokens_great` accepted by the controller schema.
pub const TOKENS_GREAT_MAX: u32 = 20_000;

/// Two elicited operating points plus the phase's quality ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoints {
    /// Output tokens to reach ~50% of the phase's potential quality.
    pub tokens_basic: u32,
    /// Output tokens to reach ~90% of the phase's potential quality.
    pub tokens_great: u32,
    /// Quality ceiling (criticality) `a`.
    pub ceiling: f64,
}

impl OperatingPoints {
    pub fn new(tokens_basic: u32, tokens_great: u32, ceiling: f64) -> Result<Self> {
        let points = Self {
            tokens_basic,
            tokens_great,
            ceiling,
        };
        points.validate()?;
        Ok(points)
    }

    pub fn validate(&self) -> Result<()> {
        if !(TOKENS_BASIC_MIN..=TOKENS_BASIC_MAX).contains(&self.tokens_basic) {
            return Err(Error::validation(
                "tokens_basic",
                format!(
                    "{} outside [{TOKENS_BASIC_MIN}, {TOKENS_BASIC_MAX}]",
                    self.tokens_basic
                ),
            ));
        }
        if self.tokens_great < self.tokens_basic || self.tokens_great > TOKENS_GREAT_MAX {
            return Err(Error::validation(
                "tokens_great",
                format!(
                    "{} outside [tokens_basic={}, {TOKENS_GREAT_MAX}]",
                    self.tokens_great, self.tokens_basic
                ),
            ));
        }
        validate_ceiling("ceiling", self.ceiling)
    }
}

/// Per-phase token pricing used to move rates from token space to currency space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePricing {
    /// Currency units per output token.
    pub output_price: f64,
    /// Multiplier over the base model's price; 1 means the base model itself.
    #[serde(default = "unit_ratio")]
    pub cost_ratio: f64,
    /// Accepted for completeness; fitting uses output pricing only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_price: Option<f64>,
}

fn unit_ratio() -> f64 {
    1.0
}

impl PhasePricing {
    pub fn new(output_price: f64) -> Result<Self> {
        let pricing = Self {
            output_price,
            cost_ratio: 1.0,
            input_price: None,
        };
        pricing.validate()?;
        Ok(pricing)
    }

    pub fn with_cost_ratio(mut self, cost_ratio: f64) -> Result<Self> {
        self.cost_ratio = cost_ratio;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.output_price.is_finite() && self.output_price > 0.0) {
            return Err(Error::validation(
                "output_price",
                format!("must be finite and > 0, got {}", self.output_price),
            ));
        }
        if !(self.cost_ratio.is_finite() && self.cost_ratio >= 1.0) {
            return Err(Error::validation(
                "cost_ratio",
                format!("must be finite and >= 1, got {}", self.cost_ratio),
            ));
        }
        if let Some(p) = self.input_price {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::validation(
                    "input_price",
                    format!("must be finite and >= 0, got {p}"),
                ));
            }
        }
        Ok(())
    }

    /// Currency per output token after applying the cost ratio.
    pub fn effective_price(&self) -> f64 {
        self.output_price * self.cost_ratio
    }

    /// Warning to surface when an input price was supplied but not used.
    pub fn warning(&self) -> Option<String> {
        self.input_price
            .map(|p| format!("input_price {p} ignored; curves are fitted on output-token cost only"))
    }
}

/// Fitted utility curve for one phase, in currency units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCurve {
    pub label: String,
    #[serde(rename = "a")]
    pub ceiling_a: f64,
    #[serde(rename = "b")]
    pub rate_b: f64,
}

impl PhaseCurve {
    pub fn new(label: impl Into<String>, ceiling_a: f64, rate_b: f64) -> Result<Self> {
        let curve = Self {
            label: label.into(),
            ceiling_a,
            rate_b,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        validate_ceiling("ceiling_a", self.ceiling_a)?;
        if !(self.rate_b.is_finite() && self.rate_b > 0.0) {
            return Err(Error::validation(
                "rate_b",
                format!("must be finite and > 0, got {}", self.rate_b),
            ));
        }
        Ok(())
    }

    /// `f(x) = a (1 - exp(-b x))`.
    pub fn f(&self, x: f64) -> Result<f64> {
        check_amount(x)?;
        Ok(self.f_unchecked(x))
    }

    /// `f'(x) = a b exp(-b x)`.
    pub fn f_prime(&self, x: f64) -> Result<f64> {
        check_amount(x)?;
        Ok(self.f_prime_unchecked(x))
    }

    /// `g(x) = 1 - a exp(-b x)`.
    pub fn g(&self, x: f64) -> Result<f64> {
        check_amount(x)?;
        Ok(self.g_unchecked(x))
    }

    /// Marginal at zero, `a b`.
    pub fn marginal_at_zero(&self) -> f64 {
        self.ceiling_a * self.rate_b
    }

    pub(crate) fn f_unchecked(&self, x: f64) -> f64 {
        -self.ceiling_a * (-self.rate_b * x).exp_m1()
    }

    pub(crate) fn f_prime_unchecked(&self, x: f64) -> f64 {
        self.ceiling_a * self.rate_b * (-self.rate_b * x).exp()
    }

    pub(crate) fn g_unchecked(&self, x: f64) -> f64 {
        1.0 - self.ceiling_a * (-self.rate_b * x).exp()
    }

    /// `ln g(x)`, accurate when `g` is close to 1. Returns `-inf` when `g(x) = 0`.
    pub(crate) fn ln_g_unchecked(&self, x: f64) -> f64 {
        (-self.ceiling_a * (-self.rate_b * x).exp()).ln_1p()
    }

    /// `g'(x) / g(x)`, the log-marginal of the offset curve.
    pub(crate) fn log_marginal_unchecked(&self, x: f64) -> f64 {
        let decay = self.ceiling_a * (-self.rate_b * x).exp();
        self.rate_b * decay / (1.0 - decay)
    }
}

/// Fit a curve from two operating points using the phase's pricing.
///
/// `b = sqrt((ln 2 / tokens_basic) (ln 10 / tokens_great)) / (output_price * cost_ratio)`.
pub fn fit_two_point(
    label: impl Into<String>,
    points: &OperatingPoints,
    pricing: &PhasePricing,
) -> Result<PhaseCurve> {
    points.validate()?;
    pricing.validate()?;
    let token_rate = token_space_rate(points);
    PhaseCurve::new(label, points.ceiling, token_rate / pricing.effective_price())
}

/// Geometric mean of the two rates implied by the operating points, per token.
pub fn token_space_rate(points: &OperatingPoints) -> f64 {
    let b_basic = LN_2 / f64::from(points.tokens_basic);
    let b_great = LN_10 / f64::from(points.tokens_great);
    (b_basic * b_great).sqrt()
}

pub fn eval_f(curve: &PhaseCurve, x: f64) -> Result<f64> {
    curve.f(x)
}

pub fn eval_f_prime(curve: &PhaseCurve, x: f64) -> Result<f64> {
    curve.f_prime(x)
}

pub fn eval_g(curve: &PhaseCurve, x: f64) -> Result<f64> {
    curve.g(x)
}

fn validate_ceiling(field: &str, a: f64) -> Result<()> {
    if a.is_finite() && a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must lie in (0, 1], got {a}")))
    }
}

fn check_amount(x: f64) -> Result<()> {
    if x >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("budget amount must be >= 0, got {x}")))
    }
}
