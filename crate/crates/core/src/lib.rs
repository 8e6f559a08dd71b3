//! Budget allocation across the phases of a multi-step pipeline.
//!
//! Each phase gets a saturating utility curve `f(x) = a (1 - exp(-b x))`
//! fitted from two elicited token counts. The budget split that maximizes
//! the pipeline objective (a sum of phase utilities, or a product of
//! pass-through qualities) is found by water-filling: bisection on the
//! dual price of the budget, with a closed-form response per phase.
//!
//! Modules:
//! - [`curves`]: curve types, two-point fitting, evaluation.
//! - [`objectives`]: aggregation objectives, closed-form responses, starvation thresholds.
//! - [`solver`]: dual bisection, re-allocation, grid oracle.
//! - [`estimator`]: estimate/allocation documents, noise injection, stub estimates.
//! - [`strategies`]: uniform interface over allocation policies.
//! - [`simulator`]: synthetic pipelines, strategy sweeps and retention reports.

pub mod curves;
pub mod error;
pub mod estimator;
pub mod objectives;
pub mod simulator;
pub mod solver;
pub mod strategies;

pub use curves::{fit_two_point, OperatingPoints, PhaseCurve, PhasePricing};
pub use error::{Error, Result};
pub use objectives::{evaluate, Objective, ObjectiveKind, ObjectiveValue};
pub use solver::{grid_oracle, reallocate, solve, total_response, Allocation, SolveConfig};
pub use estimator::{
    inject_noise, parse_estimate, parse_external_allocation, stub_estimate, EstimateDocument,
    ExternalAllocationDocument, NoiseSpec, PricingTable,
};
pub use simulator::{
    hybrid_run, nb_reference, simulate_run, sweep, sweep_tasks, ExperimentConfig, SpendModel, SweepReport,
    SyntheticPipeline,
};
pub use strategies::{allocate, budget_from_alpha, StrategySpec};
