//! Allocation policies behind one interface.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::curves::PhaseCurve;
use crate::error::{Error, Result};
use crate::estimator::ExternalAllocationDocument;
use crate::objectives::{Objective, ObjectiveKind};
use crate::solver::{self, Allocation, SolveConfig};

/// Even split over four phases.
pub const UNIFORM_FOUR_PHASE: [f64; 4] = [0.25, 0.25, 0.25, 0.25];
/// Mean per-phase share of the additive solver on the four-phase coding pipeline
/// (plan / decompose / implement / refine).
pub const FIXED_AVERAGE_FOUR_PHASE: [f64; 4] = [0.113, 0.140, 0.241, 0.506];

const RATIO_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum StrategySpec {
    ZebraAdditive,
    ZebraMultOffset,
    ZebraPropOffset,
    Uniform,
    FixedRatio { ratio: Vec<f64> },
    External { allocation: ExternalAllocationDocument },
}

impl StrategySpec {
    /// Stable identifier used by the CLI and in reports.
    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::ZebraAdditive => "zebra-additive",
            StrategySpec::ZebraMultOffset => "zebra-mult-offset",
            StrategySpec::ZebraPropOffset => "zebra-prop-offset",
            StrategySpec::Uniform => "uniform",
            StrategySpec::FixedRatio { .. } => "fixed-ratio",
            StrategySpec::External { .. } => "external",
        }
    }

    /// Objective solved by the dual-search strategies.
    pub fn objective_kind(&self) -> Option<ObjectiveKind> {
        match self {
            StrategySpec::ZebraAdditive => Some(ObjectiveKind::Additive),
            StrategySpec::ZebraMultOffset => Some(ObjectiveKind::MultOffset),
            StrategySpec::ZebraPropOffset => Some(ObjectiveKind::PropOffset),
            _ => None,
        }
    }

    pub fn fixed_ratio(ratio: Vec<f64>) -> Result<Self> {
        check_ratio(&ratio)?;
        Ok(StrategySpec::FixedRatio { ratio })
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategySpec {
    type Err = Error;

    /// Parses the parameter-free strategies. `fixed-ratio` maps to the
    /// four-phase fixed-average preset; `external` needs a document and is rejected.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zebra-additive" => Ok(StrategySpec::ZebraAdditive),
            "zebra-mult-offset" => Ok(StrategySpec::ZebraMultOffset),
            "zebra-prop-offset" => Ok(StrategySpec::ZebraPropOffset),
            "uniform" => Ok(StrategySpec::Uniform),
            "fixed-ratio" => Ok(StrategySpec::FixedRatio {
                ratio: FIXED_AVERAGE_FOUR_PHASE.to_vec(),
            }),
            "external" => Err(Error::validation("strategy", "external strategy requires an allocation document")),
            other => Err(Error::validation("strategy", format!("unknown strategy '{other}'"))),
        }
    }
}

fn check_ratio(ratio: &[f64]) -> Result<()> {
    if let Some((i, r)) = ratio.iter().enumerate().find(|(_, r)| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::validation("ratio", format!("fraction {i} must be >= 0, got {r}")));
    }
    let total: f64 = ratio.iter().sum();
    if (total - 1.0).abs() > RATIO_SUM_TOLERANCE {
        return Err(Error::validation("ratio", format!("fractions sum to {total}, expected 1")));
    }
    Ok(())
}

/// Total budget as a fraction `alpha` of a reference (unconstrained) cost.
pub fn budget_from_alpha(alpha: f64, reference_cost: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::validation("alpha", format!("must lie in (0, 1], got {alpha}")));
    }
    if !(reference_cost.is_finite() && reference_cost > 0.0) {
        return Err(Error::validation(
            "reference_cost",
            format!("must be finite and > 0, got {reference_cost}"),
        ));
    }
    Ok(alpha * reference_cost)
}

/// Produce an allocation of `budget` under `spec`, scored by `evaluation`.
///
/// `config.budget` is overwritten by `budget`; its tolerance, iteration
/// limit, and caps apply to the dual-search strategies.
pub fn allocate(
    spec: &StrategySpec,
    curves: &[PhaseCurve],
    budget: f64,
    config: &SolveConfig,
    evaluation: &Objective,
) -> Result<Allocation> {
    if curves.is_empty() {
        return Err(Error::validation("curves", format!("strategy {spec} needs at least one phase curve")));
    }
    if !(budget.is_finite() && budget > 0.0) {
        return Err(Error::validation("budget", format!("must be finite and > 0, got {budget}")));
    }
    let n = curves.len();
    let allocation = match spec {
        StrategySpec::ZebraAdditive | StrategySpec::ZebraMultOffset | StrategySpec::ZebraPropOffset => {
            let kind = spec.objective_kind().expect("dual-search strategy");
            let objective = Objective::for_curves(kind, curves);
            let mut cfg = config.clone();
            cfg.budget = budget;
            let mut a = solver::solve(curves, &objective, &cfg)?;
            a.objective_value = None;
            a.log_objective_value = None;
            a
        }
        StrategySpec::Uniform => Allocation::from_amounts(vec![budget / n as f64; n]),
        StrategySpec::FixedRatio { ratio } => {
            check_ratio(ratio)?;
            if ratio.len() != n {
                return Err(Error::validation(
                    "ratio",
                    format!("{} fractions for {} phases", ratio.len(), n),
                ));
            }
            Allocation::from_amounts(ratio.iter().map(|r| r * budget).collect())
        }
        StrategySpec::External { allocation } => {
            let labels: Vec<&str> = curves.iter().map(|c| c.label.as_str()).collect();
            let doc = if allocation.phases.iter().map(|p| p.0.as_str()).eq(labels.iter().copied()) {
                allocation.clone()
            } else {
                allocation.aligned(&labels)?
            };
            doc.rescaled(budget)?
        }
    };
    allocation.evaluated(curves, evaluation)
}
