//! Synthetic-pipeline experiments.
//!
//! A [`SyntheticPipeline`] holds ground-truth curves and the aggregation law
//! that scores an allocation. Strategies see a noisy copy of the curves;
//! quality is always measured against the clean ones, so the only source of
//! run-to-run variation is the estimation noise.
//!
//! Per-run seeds are `mix_seed(config.seed, [task, alpha index, strategy
//! index, run index])`, where [`mix_seed`] folds each index into the state
//! with the SplitMix64 finalizer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::curves::PhaseCurve;
use crate::error::{Error, Result};
use crate::estimator::{inject_noise, NoiseSpec};
use crate::objectives::{evaluate, Objective};
use crate::solver::{self, SolveConfig};
use crate::strategies::{allocate, budget_from_alpha, StrategySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPipeline {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub phases: Vec<PhaseCurve>,
    /// True quality law.
    pub aggregation: Objective,
    /// Mean unconstrained cost.
    pub reference_cost: f64,
}

impl SyntheticPipeline {
    pub fn new(phases: Vec<PhaseCurve>, aggregation: Objective, reference_cost: f64) -> Result<Self> {
        let p = Self {
            name: None,
            phases,
            aggregation,
            reference_cost,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::validation("phases", "pipeline needs at least one phase"));
        }
        self.phases.iter().try_for_each(PhaseCurve::validate)?;
        self.aggregation.validate(self.phases.len())?;
        if !(self.reference_cost.is_finite() && self.reference_cost > 0.0) {
            return Err(Error::validation(
                "reference_cost",
                format!("must be finite and > 0, got {}", self.reference_cost),
            ));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<&str> {
        self.phases.iter().map(|c| c.label.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    pub runs: usize,
    /// Relative noise on the curves strategies see.
    #[serde(default)]
    pub sigma: f64,
    pub strategies: Vec<StrategySpec>,
    #[serde(default)]
    pub seed: u64,
    /// Solver tolerance override (absolute); default is relative to each budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

fn default_alphas() -> Vec<f64> {
    vec![0.3, 0.5, 0.8]
}

impl ExperimentConfig {
    pub fn new(alphas: Vec<f64>, runs: usize, sigma: f64, strategies: Vec<StrategySpec>, seed: u64) -> Self {
        Self {
            alphas,
            runs,
            sigma,
            strategies,
            seed,
            tolerance: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::validation("runs", "must be >= 1"));
        }
        if self.alphas.is_empty() {
            return Err(Error::validation("alphas", "at least one budget level is required"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::validation("alphas", format!("{a} outside (0, 1]")));
        }
        if self.strategies.is_empty() {
            return Err(Error::validation("strategies", "at least one strategy is required"));
        }
        NoiseSpec::new(self.sigma, 0).map(|_| ())
    }
}

/// Outcome of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: usize,
    pub alpha: f64,
    pub strategy: String,
    pub run: usize,
    pub seed: u64,
    pub budget: f64,
    pub budget_used: f64,
    pub amounts: Vec<f64>,
    pub fractions: Vec<f64>,
    /// Ground-truth quality of the allocation.
    pub quality: f64,
    /// Objective value under the curves the strategy saw.
    pub perceived_quality: Option<f64>,
    pub lambda_star: Option<f64>,
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and cell coordinates.
pub fn mix_seed(base: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(base), |h, &c| splitmix64(h ^ splitmix64(c.wrapping_add(0x632B_E59B_D9B4_E019))))
}

fn solve_config(budget: f64, tolerance: Option<f64>) -> SolveConfig {
    let cfg = SolveConfig::new(budget);
    match tolerance {
        Some(t) => cfg.with_tolerance(t),
        None => cfg,
    }
}

/// Allocate with perceived (noisy) curves, score against ground truth.
pub fn simulate_run(
    pipeline: &SyntheticPipeline,
    strategy: &StrategySpec,
    alpha: f64,
    noise: &NoiseSpec,
) -> Result<RunRecord> {
    simulate_run_with(pipeline, strategy, alpha, noise, None)
}

fn simulate_run_with(
    pipeline: &SyntheticPipeline,
    strategy: &StrategySpec,
    alpha: f64,
    noise: &NoiseSpec,
    tolerance: Option<f64>,
) -> Result<RunRecord> {
    pipeline.validate()?;
    let perceived = inject_noise(&pipeline.phases, noise)?;
    let budget = budget_from_alpha(alpha, pipeline.reference_cost)?;
    let allocation = allocate(
        strategy,
        &perceived,
        budget,
        &solve_config(budget, tolerance),
        &pipeline.aggregation,
    )?;
    let quality = evaluate(&pipeline.phases, &allocation.amounts, &pipeline.aggregation)?.value;
    Ok(RunRecord {
        task: 0,
        alpha,
        strategy: strategy.name().to_string(),
        run: 0,
        seed: noise.seed,
        budget,
        budget_used: allocation.budget_used,
        fractions: allocation.fractions(),
        amounts: allocation.amounts,
        quality,
        perceived_quality: allocation.objective_value,
        lambda_star: allocation.lambda_star,
    })
}

/// Quality of the optimal allocation at the unconstrained reference cost.
pub fn nb_reference(pipeline: &SyntheticPipeline) -> Result<f64> {
    pipeline.validate()?;
    let allocation = solver::solve(
        &pipeline.phases,
        &pipeline.aggregation,
        &SolveConfig::new(pipeline.reference_cost),
    )?;
    Ok(evaluate(&pipeline.phases, &allocation.amounts, &pipeline.aggregation)?.value)
}

/// Aggregates for one (alpha, strategy) cell across tasks and runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub alpha: f64,
    pub strategy: String,
    pub runs: usize,
    pub mean_quality: f64,
    /// Mean quality over all runs divided by mean reference quality over tasks.
    pub retention_ratio_of_means: f64,
    /// Mean over tasks of (task mean quality / task reference quality).
    pub retention_mean_of_ratios: f64,
    pub mean_fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub phase_labels: Vec<String>,
    pub nb_references: Vec<f64>,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunRecord>,
}

impl SweepReport {
    pub fn cell(&self, alpha: f64, strategy: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.alpha == alpha && c.strategy == strategy)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse {
            offset: 0,
            message: e.to_string(),
        })
    }

    /// One row per run. Floats use 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| Error::Parse {
            offset: 0,
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = [
            "task", "alpha", "strategy", "run", "seed", "budget", "budget_used", "quality", "nb_reference",
            "retention",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.phase_labels.iter().map(|l| format!("fraction_{l}")));
        w.write_record(&header).map_err(io)?;
        for r in &self.runs {
            let nb = self.nb_references[r.task];
            let mut row = vec![
                r.task.to_string(),
                fmt17(r.alpha),
                r.strategy.clone(),
                r.run.to_string(),
                r.seed.to_string(),
                fmt17(r.budget),
                fmt17(r.budget_used),
                fmt17(r.quality),
                fmt17(nb),
                fmt17(r.quality / nb),
            ];
            row.extend(r.fractions.iter().map(|&f| fmt17(f)));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Parse {
            offset: 0,
            message: e.to_string(),
        })
    }
}

/// Format with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Run every (alpha, strategy, run) cell on one pipeline.
pub fn sweep(pipeline: &SyntheticPipeline, config: &ExperimentConfig) -> Result<SweepReport> {
    sweep_tasks(std::slice::from_ref(pipeline), config)
}

/// Run every (task, alpha, strategy, run) cell. Tasks must share a phase count.
pub fn sweep_tasks(pipelines: &[SyntheticPipeline], config: &ExperimentConfig) -> Result<SweepReport> {
    config.validate()?;
    let first = pipelines
        .first()
        .ok_or_else(|| Error::validation("pipelines", "at least one pipeline is required"))?;
    let n_phases = first.phases.len();
    for (t, p) in pipelines.iter().enumerate() {
        p.validate()?;
        if p.phases.len() != n_phases {
            return Err(Error::validation(
                format!("pipelines[{t}]"),
                format!("{} phases, expected {n_phases}", p.phases.len()),
            ));
        }
    }
    let nb_references = pipelines.iter().map(nb_reference).collect::<Result<Vec<_>>>()?;

    let n_alpha = config.alphas.len();
    let n_strat = config.strategies.len();
    let cells: Vec<(usize, usize, usize, usize)> = (0..pipelines.len())
        .flat_map(|t| {
            (0..n_alpha).flat_map(move |ai| (0..n_strat).flat_map(move |si| (0..config.runs).map(move |r| (t, ai, si, r))))
        })
        .collect();
    let runs = cells
        .par_iter()
        .map(|&(t, ai, si, r)| {
            let seed = mix_seed(config.seed, &[t as u64, ai as u64, si as u64, r as u64]);
            let noise = NoiseSpec {
                sigma: config.sigma,
                seed,
            };
            let mut rec = simulate_run_with(
                &pipelines[t],
                &config.strategies[si],
                config.alphas[ai],
                &noise,
                config.tolerance,
            )?;
            rec.task = t;
            rec.run = r;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summaries = Vec::with_capacity(n_alpha * n_strat);
    for (ai, &alpha) in config.alphas.iter().enumerate() {
        for (si, strategy) in config.strategies.iter().enumerate() {
            let cell_runs: Vec<&RunRecord> = runs
                .iter()
                .zip(&cells)
                .filter(|(_, &(_, a, s, _))| a == ai && s == si)
                .map(|(rec, _)| rec)
                .collect();
            summaries.push(summarize(alpha, strategy.name(), &cell_runs, &nb_references, n_phases));
        }
    }

    Ok(SweepReport {
        config: config.clone(),
        phase_labels: if pipelines.iter().all(|p| p.labels() == first.labels()) {
            first.phases.iter().map(|c| c.label.clone()).collect()
        } else {
            (0..n_phases).map(|i| format!("phase{i}")).collect()
        },
        nb_references,
        cells: summaries,
        runs,
    })
}

fn summarize(alpha: f64, strategy: &str, runs: &[&RunRecord], nb: &[f64], n_phases: usize) -> CellSummary {
    let count = runs.len() as f64;
    let mean_quality = runs.iter().map(|r| r.quality).sum::<f64>() / count;
    let mean_nb = nb.iter().sum::<f64>() / nb.len() as f64;
    let per_task: Vec<f64> = (0..nb.len())
        .map(|t| {
            let qs: Vec<f64> = runs.iter().filter(|r| r.task == t).map(|r| r.quality).collect();
            qs.iter().sum::<f64>() / qs.len() as f64 / nb[t]
        })
        .collect();
    let mut mean_fractions = vec![0.0; n_phases];
    for r in runs {
        for (m, f) in mean_fractions.iter_mut().zip(&r.fractions) {
            *m += f / count;
        }
    }
    CellSummary {
        alpha,
        strategy: strategy.to_string(),
        runs: runs.len(),
        mean_quality,
        retention_ratio_of_means: mean_quality / mean_nb,
        retention_mean_of_ratios: per_task.iter().sum::<f64>() / per_task.len() as f64,
        mean_fractions,
    }
}

/// How much of each upstream allocation is actually spent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpendModel {
    /// Realized spend equals the allocation.
    #[default]
    Exact,
    /// Realized spend is `factor` times the allocation, capped at the budget.
    Scaled { factor: f64 },
}

impl SpendModel {
    fn realize(&self, allocated: &[f64], budget: f64) -> Result<Vec<f64>> {
        let realized: Vec<f64> = match *self {
            SpendModel::Exact => allocated.to_vec(),
            SpendModel::Scaled { factor } => {
                if !(factor.is_finite() && factor >= 0.0) {
                    return Err(Error::validation("spend_model.factor", format!("must be >= 0, got {factor}")));
                }
                allocated.iter().map(|x| x * factor).collect()
            }
        };
        let total: f64 = realized.iter().sum();
        Ok(if total > budget {
            realized.iter().map(|x| x / total * budget).collect()
        } else {
            realized
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridRecord {
    pub budget: f64,
    /// Up-front allocation over all phases.
    pub one_shot: Vec<f64>,
    /// Realized spend of the first `split_after` phases.
    pub spent: f64,
    /// Realized upstream amounts followed by the re-solved downstream amounts.
    pub amounts: Vec<f64>,
    pub one_shot_quality: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridOptions {
    pub split_after: usize,
    #[serde(default)]
    pub spend_model: SpendModel,
    /// Draw fresh noise for the downstream curves before re-solving.
    #[serde(default)]
    pub renoise: bool,
}

/// Allocate up front, realize spend for the first `split_after` phases,
/// then re-solve the remaining phases on the leftover budget.
pub fn hybrid_run(
    pipeline: &SyntheticPipeline,
    strategy: &StrategySpec,
    alpha: f64,
    options: &HybridOptions,
    noise: &NoiseSpec,
) -> Result<HybridRecord> {
    pipeline.validate()?;
    let n = pipeline.phases.len();
    let split = options.split_after;
    if split == 0 || split >= n {
        return Err(Error::validation(
            "split_after",
            format!("must lie in 1..{n}, got {split}"),
        ));
    }
    let kind = strategy.objective_kind().ok_or_else(|| {
        Error::validation("strategy", format!("hybrid re-allocation needs a dual-search strategy, got {strategy}"))
    })?;
    let budget = budget_from_alpha(alpha, pipeline.reference_cost)?;
    let perceived = inject_noise(&pipeline.phases, noise)?;
    let cfg = SolveConfig::new(budget);
    let up_front = allocate(strategy, &perceived, budget, &cfg, &pipeline.aggregation)?;

    let realized = options.spend_model.realize(&up_front.amounts[..split], budget)?;
    let spent: f64 = realized.iter().sum::<f64>().min(budget);

    let downstream = if options.renoise {
        inject_noise(
            &pipeline.phases[split..],
            &NoiseSpec {
                sigma: noise.sigma,
                seed: mix_seed(noise.seed, &[1]),
            },
        )?
    } else {
        perceived[split..].to_vec()
    };
    let objective = Objective::for_curves(kind, &downstream);
    let rest = solver::reallocate(&downstream, &objective, spent, &cfg)?;

    let mut amounts = realized;
    amounts.extend(rest.amounts);
    let quality = evaluate(&pipeline.phases, &amounts, &pipeline.aggregation)?.value;
    let one_shot_quality = evaluate(&pipeline.phases, &up_front.amounts, &pipeline.aggregation)?.value;
    Ok(HybridRecord {
        budget,
        one_shot: up_front.amounts,
        spent,
        amounts,
        one_shot_quality,
        quality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn walkthrough_pipeline(aggregation: Objective) -> SyntheticPipeline {
        SyntheticPipeline::new(
            vec![
                PhaseCurve::new("plan", 0.8, 4963.0).unwrap(),
                PhaseCurve::new("decompose", 0.7, 3722.0).unwrap(),
                PhaseCurve::new("implement", 0.9, 1922.0).unwrap(),
                PhaseCurve::new("refine", 0.6, 148.6).unwrap(),
            ],
            aggregation,
            0.0359,
        )
        .unwrap()
    }

    fn exact() -> NoiseSpec {
        NoiseSpec { sigma: 0.0, seed: 0 }
    }

    #[test]
    fn noiseless_quality_equals_solver_objective() {
        let p = walkthrough_pipeline(Objective::additive());
        let rec = simulate_run(&p, &StrategySpec::ZebraAdditive, 0.5, &exact()).unwrap();
        assert_eq!(Some(rec.quality), rec.perceived_quality);
        let direct = solver::solve(&p.phases, &Objective::additive(), &SolveConfig::new(0.5 * 0.0359)).unwrap();
        assert_eq!(rec.quality, direct.objective_value.unwrap());
    }

    #[test]
    fn larger_budget_never_hurts() {
        let p = walkthrough_pipeline(Objective::mult_offset());
        for s in [StrategySpec::ZebraAdditive, StrategySpec::ZebraMultOffset, StrategySpec::Uniform] {
            let lo = simulate_run(&p, &s, 0.5, &exact()).unwrap().quality;
            let hi = simulate_run(&p, &s, 1.0, &exact()).unwrap().quality;
            assert!(hi >= lo);
        }
    }

    #[test]
    fn nb_reference_cases() {
        let single = SyntheticPipeline::new(vec![PhaseCurve::new("p", 0.7, 40.0).unwrap()], Objective::additive(), 0.05)
            .unwrap();
        assert_relative_eq!(nb_reference(&single).unwrap(), single.phases[0].f(0.05).unwrap(), max_relative = 1e-12);
        let single_g = SyntheticPipeline {
            aggregation: Objective::mult_offset(),
            ..single.clone()
        };
        assert_relative_eq!(nb_reference(&single_g).unwrap(), single.phases[0].g(0.05).unwrap(), max_relative = 1e-12);
        let twins = SyntheticPipeline::new(vec![PhaseCurve::new("p", 0.7, 40.0).unwrap(); 3], Objective::mult_offset(), 0.09)
            .unwrap();
        let g = twins.phases[0].g(0.03).unwrap();
        assert_relative_eq!(nb_reference(&twins).unwrap(), g.powi(3), max_relative = 1e-9);
    }

    #[test]
    fn nb_reference_matches_frozen_grid_value() {
        // 201-point simplex grid maximum of the additive walkthrough pipeline at
        // B = 0.0359, computed offline by brute force.
        const GRID_VALUE: f64 = 2.9900088530929083;
        let p = walkthrough_pipeline(Objective::additive());
        let nb = nb_reference(&p).unwrap();
        let bound = solver::grid_gap_bound(&p.phases, &p.aggregation, p.reference_cost, 201);
        assert!(nb >= GRID_VALUE - 1e-12, "{nb}");
        assert!(nb - GRID_VALUE <= bound);
        let grid = solver::grid_oracle(&p.phases, &p.aggregation, &SolveConfig::new(p.reference_cost), 201).unwrap();
        assert_relative_eq!(grid.objective_value.unwrap(), GRID_VALUE, max_relative = 1e-12);
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(mix_seed(1, &[0, 0, 0, 0]), mix_seed(1, &[0, 0, 0, 0]));
        assert_ne!(mix_seed(1, &[0, 0, 0, 0]), mix_seed(1, &[0, 0, 0, 1]));
        assert_ne!(mix_seed(1, &[0, 0, 1, 0]), mix_seed(1, &[0, 1, 0, 0]));
        assert_ne!(mix_seed(1, &[0]), mix_seed(2, &[0]));
    }

    fn config(strategies: Vec<StrategySpec>, sigma: f64, runs: usize) -> ExperimentConfig {
        ExperimentConfig::new(vec![0.3, 0.5, 0.8, 1.0], runs, sigma, strategies, 42)
    }

    #[test]
    fn sweep_is_deterministic_and_consistent() {
        let p = walkthrough_pipeline(Objective::additive());
        let cfg = config(vec![StrategySpec::Uniform, StrategySpec::ZebraAdditive], 0.3, 4);
        let r1 = sweep(&p, &cfg).unwrap();
        let r2 = sweep(&p, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.runs.len(), 4 * 2 * 4);
        for rec in &r1.runs {
            assert!((rec.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (f, x) in rec.fractions.iter().zip(&rec.amounts) {
                assert!((f * rec.budget_used - x).abs() <= 1e-9 * rec.budget_used.max(1.0));
            }
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        r1.write_csv(&mut a).unwrap();
        r2.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("task,alpha,strategy,run,seed,budget,budget_used,quality,nb_reference,retention,fraction_plan"));
        assert_eq!(text.lines().count(), 1 + r1.runs.len());
    }

    #[test]
    fn adding_a_strategy_leaves_other_cells_untouched() {
        let p = walkthrough_pipeline(Objective::additive());
        let small = sweep(&p, &config(vec![StrategySpec::ZebraAdditive], 0.5, 3)).unwrap();
        let big = sweep(&p, &config(vec![StrategySpec::ZebraAdditive, StrategySpec::Uniform], 0.5, 3)).unwrap();
        for alpha in [0.3, 0.5, 0.8, 1.0] {
            assert_eq!(small.cell(alpha, "zebra-additive"), big.cell(alpha, "zebra-additive"));
        }
    }

    #[test]
    fn noiseless_retention_endpoints() {
        let p = walkthrough_pipeline(Objective::additive());
        let report = sweep(&p, &config(vec![StrategySpec::ZebraAdditive], 0.0, 1)).unwrap();
        let ret: Vec<f64> = [0.3, 0.5, 0.8, 1.0]
            .iter()
            .map(|&a| report.cell(a, "zebra-additive").unwrap().retention_ratio_of_means)
            .collect();
        assert!((ret[3] - 1.0).abs() <= 1e-9);
        assert!(ret.windows(2).all(|w| w[0] <= w[1]));
        assert!(ret.iter().all(|&r| r <= 1.0 + 1e-12));
    }

    #[test]
    fn retention_definitions_differ_across_tasks() {
        let p1 = walkthrough_pipeline(Objective::additive());
        let mut p2 = p1.clone();
        p2.reference_cost = 0.01;
        let report = sweep_tasks(&[p1, p2], &config(vec![StrategySpec::Uniform], 0.0, 1)).unwrap();
        let c = report.cell(0.5, "uniform").unwrap();
        assert!((c.retention_ratio_of_means - c.retention_mean_of_ratios).abs() > 1e-6);
    }

    #[test]
    fn sweep_validation() {
        let p = walkthrough_pipeline(Objective::additive());
        assert!(sweep(&p, &config(vec![], 0.0, 1)).is_err());
        assert!(sweep(&p, &config(vec![StrategySpec::Uniform], 0.0, 0)).is_err());
        let mut bad = config(vec![StrategySpec::Uniform], 0.0, 1);
        bad.alphas = vec![1.5];
        assert!(sweep(&p, &bad).is_err());
        bad.alphas = vec![];
        assert!(sweep(&p, &bad).is_err());
    }

    #[test]
    fn hybrid_exact_spend_is_idempotent() {
        for agg in [Objective::additive(), Objective::mult_offset()] {
            let p = walkthrough_pipeline(agg);
            for s in [StrategySpec::ZebraAdditive, StrategySpec::ZebraMultOffset] {
                let opts = HybridOptions {
                    split_after: 2,
                    spend_model: SpendModel::Exact,
                    renoise: false,
                };
                let h = hybrid_run(&p, &s, 0.5, &opts, &exact()).unwrap();
                let tol = 1e-9 * h.budget;
                for (x, y) in h.amounts.iter().zip(&h.one_shot) {
                    assert!((x - y).abs() <= 10.0 * tol, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn hybrid_under_spend_funds_downstream_more() {
        let p = walkthrough_pipeline(Objective::additive());
        let opts = HybridOptions {
            split_after: 2,
            spend_model: SpendModel::Scaled { factor: 0.8 },
            renoise: false,
        };
        let h = hybrid_run(&p, &StrategySpec::ZebraAdditive, 0.5, &opts, &exact()).unwrap();
        for i in 2..4 {
            assert!(h.amounts[i] > h.one_shot[i]);
        }
        let direct = solver::solve(&p.phases[2..], &Objective::additive(), &SolveConfig::new(h.budget - h.spent)).unwrap();
        for (x, y) in h.amounts[2..].iter().zip(&direct.amounts) {
            assert_relative_eq!(*x, *y, max_relative = 1e-12);
        }
    }

    #[test]
    fn hybrid_full_upstream_spend_leaves_nothing() {
        let p = walkthrough_pipeline(Objective::additive());
        let opts = HybridOptions {
            split_after: 2,
            spend_model: SpendModel::Scaled { factor: 1e6 },
            renoise: false,
        };
        let h = hybrid_run(&p, &StrategySpec::ZebraAdditive, 0.5, &opts, &exact()).unwrap();
        assert_relative_eq!(h.spent, h.budget, max_relative = 1e-12);
        assert_eq!(&h.amounts[2..], &[0.0, 0.0]);
    }

    #[test]
    fn hybrid_validation() {
        let p = walkthrough_pipeline(Objective::additive());
        let mut opts = HybridOptions {
            split_after: 0,
            spend_model: SpendModel::Exact,
            renoise: false,
        };
        assert!(hybrid_run(&p, &StrategySpec::ZebraAdditive, 0.5, &opts, &exact()).is_err());
        opts.split_after = 4;
        assert!(hybrid_run(&p, &StrategySpec::ZebraAdditive, 0.5, &opts, &exact()).is_err());
        opts.split_after = 2;
        assert!(hybrid_run(&p, &StrategySpec::Uniform, 0.5, &opts, &exact()).is_err());
        opts.renoise = true;
        let h = hybrid_run(&p, &StrategySpec::ZebraAdditive, 0.5, &opts, &NoiseSpec { sigma: 0.3, seed: 5 }).unwrap();
        assert_relative_eq!(h.amounts.iter().sum::<f64>(), h.budget, max_relative = 1e-9);
    }
}
