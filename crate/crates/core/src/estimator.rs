//! Controller estimate documents, external allocations, and curve noise.
//!
//! Estimate documents are JSON objects mapping each phase label to
//! `{"tokens_basic": int, "tokens_great": int, "a": number}`. External
//! allocation documents map each phase label to a currency amount. Phase
//! order is taken from an explicit order list when one is supplied, and
//! from document order otherwise.
//!
//! Noise draws use ChaCha8 seeded with `seed_from_u64`, and standard normals
//! from `rand_distr::StandardNormal`; for each curve in order, the draw for
//! `a` precedes the draw for `b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeMap;

use crate::curves::{
    fit_two_point, OperatingPoints, PhaseCurve, PhasePricing, TOKENS_BASIC_MAX, TOKENS_BASIC_MIN,
    TOKENS_GREAT_MAX,
};
use crate::error::{Error, Result};
use crate::solver::Allocation;

/// Lower clip applied to noisy ceilings.
pub const NOISY_CEILING_MIN: f64 = 0.01;
/// Lower clip applied to noisy rates.
pub const NOISY_RATE_MIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatePhase {
    pub label: String,
    pub points: OperatingPoints,
}

/// Per-phase operating points as emitted by a controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateDocument {
    pub phases: Vec<EstimatePhase>,
    pub source: String,
    /// Clamping notes recorded while parsing.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EstimateDocument {
    pub fn labels(&self) -> Vec<&str> {
        self.phases.iter().map(|p| p.label.as_str()).collect()
    }

    /// Serialize back to the controller schema.
    pub fn to_json(&self) -> String {
        let mut root = Map::new();
        for p in &self.phases {
            let mut o = Map::new();
            o.insert("tokens_basic".into(), Value::from(p.points.tokens_basic));
            o.insert("tokens_great".into(), Value::from(p.points.tokens_great));
            o.insert("a".into(), Value::from(p.points.ceiling));
            root.insert(p.label.clone(), Value::Object(o));
        }
        Value::Object(root).to_string()
    }

    /// Fit every phase with its pricing. Returns curves plus pricing warnings.
    pub fn fit(&self, pricing: &PricingTable) -> Result<(Vec<PhaseCurve>, Vec<String>)> {
        let mut warnings = Vec::new();
        let curves = self
            .phases
            .iter()
            .map(|p| {
                let price = pricing.for_phase(&p.label)?;
                if let Some(w) = price.warning() {
                    warnings.push(format!("{}: {w}", p.label));
                }
                fit_two_point(p.label.clone(), &p.points, &price)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((curves, warnings))
    }
}

/// Pricing per phase label, with an optional fallback for unlisted phases.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PricingTable {
    #[serde(default = "default_currency")]
    pub currency: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<PhasePricing>,
    #[serde(default)]
    pub phases: BTreeMap<String, PhasePricing>,
}

fn default_currency() -> String {
    "USD".into()
}

impl PricingTable {
    pub fn uniform(pricing: PhasePricing) -> Self {
        Self {
            currency: default_currency(),
            default: Some(pricing),
            phases: BTreeMap::new(),
        }
    }

    pub fn with_phase(mut self, label: impl Into<String>, pricing: PhasePricing) -> Self {
        self.phases.insert(label.into(), pricing);
        self
    }

    pub fn for_phase(&self, label: &str) -> Result<PhasePricing> {
        self.phases
            .get(label)
            .or(self.default.as_ref())
            .copied()
            .ok_or_else(|| Error::validation(format!("pricing.{label}"), "no pricing for phase"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
        if let Some(d) = &table.default {
            d.validate()?;
        }
        table.phases.values().try_for_each(PhasePricing::validate)?;
        Ok(table)
    }
}

/// A currency amount per phase, as produced by a direct allocator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalAllocationDocument {
    pub phases: Vec<(String, f64)>,
}

impl ExternalAllocationDocument {
    pub fn new(phases: Vec<(String, f64)>) -> Result<Self> {
        let doc = Self { phases };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((label, x)) = self.phases.iter().find(|(_, x)| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::validation(label.clone(), format!("amount must be finite and >= 0, got {x}")));
        }
        if !self.phases.iter().any(|(_, x)| *x > 0.0) {
            return Err(Error::validation("allocation", "at least one amount must be positive"));
        }
        Ok(())
    }

    /// Amounts rescaled to sum to `budget`.
    pub fn rescaled(&self, budget: f64) -> Result<Allocation> {
        self.validate()?;
        if !(budget.is_finite() && budget > 0.0) {
            return Err(Error::validation("budget", format!("must be finite and > 0, got {budget}")));
        }
        let total: f64 = self.phases.iter().map(|(_, x)| x).sum();
        let amounts = self.phases.iter().map(|(_, x)| x / total * budget).collect();
        Ok(Allocation::from_amounts(amounts))
    }

    /// Reorder to match `labels`; every label must be present and no others.
    pub fn aligned(&self, labels: &[&str]) -> Result<Self> {
        Ok(Self {
            phases: align(&self.phases, labels, |p| &p.0)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Relative standard deviation of the multiplicative noise.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        let spec = Self { sigma, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_finite() && self.sigma >= 0.0 {
            Ok(())
        } else {
            Err(Error::validation("sigma", format!("must be finite and >= 0, got {}", self.sigma)))
        }
    }
}

pub fn parse_estimate(text: &str, order: Option<&[&str]>, source: &str) -> Result<EstimateDocument> {
    let root = parse_root_object(text)?;
    let mut warnings = Vec::new();
    let mut phases = Vec::with_capacity(root.len());
    for (label, value) in &root {
        if label.trim().is_empty() {
            return Err(Error::validation("label", "phase labels must be non-empty"));
        }
        let obj = value
            .as_object()
            .ok_or_else(|| Error::validation(label.clone(), "phase entry must be an object"))?;
        let points = read_points(label, obj, &mut warnings)?;
        phases.push(EstimatePhase {
            label: label.clone(),
            points,
        });
    }
    if phases.is_empty() {
        return Err(Error::validation("phases", "document lists no phases"));
    }
    let phases = match order {
        Some(labels) => align(&phases, labels, |p| &p.label)?,
        None => phases,
    };
    Ok(EstimateDocument {
        phases,
        source: source.to_string(),
        warnings,
    })
}

fn read_points(label: &str, obj: &Map<String, Value>, warnings: &mut Vec<String>) -> Result<OperatingPoints> {
    let number = |field: &str| -> Result<f64> {
        let v = obj
            .get(field)
            .ok_or_else(|| Error::validation(format!("{label}.{field}"), "missing"))?;
        v.as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::validation(format!("{label}.{field}"), format!("not a number: {v}")))
    };
    let raw_basic = number("tokens_basic")?;
    let raw_great = number("tokens_great")?;
    let a = number("a")?;
    if raw_great < raw_basic {
        return Err(Error::validation(
            format!("{label}.tokens_great"),
            format!("{raw_great} is below tokens_basic {raw_basic}"),
        ));
    }
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::validation(format!("{label}.a"), format!("must lie in (0, 1], got {a}")));
    }
    let mut clamp = |field: &str, raw: f64, lo: u32, hi: u32| -> u32 {
        let rounded = raw.round();
        let clamped = rounded.clamp(f64::from(lo), f64::from(hi));
        if clamped != raw {
            warnings.push(format!("{label}.{field}: {raw} clamped to {clamped}"));
        }
        clamped as u32
    };
    let basic = clamp("tokens_basic", raw_basic, TOKENS_BASIC_MIN, TOKENS_BASIC_MAX);
    let great = clamp("tokens_great", raw_great, basic, TOKENS_GREAT_MAX);
    OperatingPoints::new(basic, great, a)
}

/// Parse an external allocation document.
pub fn parse_external_document(text: &str, order: Option<&[&str]>) -> Result<ExternalAllocationDocument> {
    let root = parse_root_object(text)?;
    let phases = root
        .iter()
        .map(|(label, v)| {
            v.as_f64()
                .map(|x| (label.clone(), x))
                .ok_or_else(|| Error::validation(label.clone(), format!("not a number: {v}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = ExternalAllocationDocument::new(phases)?;
    match order {
        Some(labels) => doc.aligned(labels),
        None => Ok(doc),
    }
}

/// Parse an external allocation and rescale it to sum to `budget`.
pub fn parse_external_allocation(text: &str, budget: f64, order: Option<&[&str]>) -> Result<Allocation> {
    parse_external_document(text, order)?.rescaled(budget)
}

/// Perturb `a` and `b` of every curve by `(1 + N(0, sigma))`, then clip
/// `a` to `[0.01, 1]` and `b` to `[0.01, inf)`.
pub fn inject_noise(curves: &[PhaseCurve], spec: &NoiseSpec) -> Result<Vec<PhaseCurve>> {
    spec.validate()?;
    if spec.sigma == 0.0 {
        return Ok(curves.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(curves
        .iter()
        .map(|c| {
            let za: f64 = rng.sample(StandardNormal);
            let zb: f64 = rng.sample(StandardNormal);
            let a = (c.ceiling_a * (1.0 + spec.sigma * za)).clamp(NOISY_CEILING_MIN, 1.0);
            let b = (c.rate_b * (1.0 + spec.sigma * zb)).max(NOISY_RATE_MIN);
            PhaseCurve {
                label: c.label.clone(),
                ceiling_a: a,
                rate_b: if b.is_finite() { b } else { f64::MAX },
            }
        })
        .collect())
}

/// Fit every document and average `a` and `b` per phase.
pub fn average_estimates(documents: &[EstimateDocument], pricing: &PricingTable) -> Result<Vec<PhaseCurve>> {
    let first = documents
        .first()
        .ok_or_else(|| Error::validation("documents", "at least one document is required"))?;
    let labels = first.labels();
    let mut sums: Vec<(f64, f64)> = vec![(0.0, 0.0); labels.len()];
    for (d, doc) in documents.iter().enumerate() {
        if doc.labels() != labels {
            return Err(Error::validation(
                format!("documents[{d}]"),
                format!("phase labels {:?} differ from {:?}", doc.labels(), labels),
            ));
        }
        let (curves, _) = doc.fit(pricing)?;
        for (s, c) in sums.iter_mut().zip(&curves) {
            s.0 += c.ceiling_a;
            s.1 += c.rate_b;
        }
    }
    let n = documents.len() as f64;
    labels
        .iter()
        .zip(sums)
        .map(|(label, (a, b))| PhaseCurve::new(*label, a / n, b / n))
        .collect()
}

/// Deterministic stand-in for a live controller.
///
/// `tokens_basic` is log-uniform on `[100, 5000]`, `tokens_great` is
/// `tokens_basic` times a factor uniform on `[1.5, 4]` (capped at 20000),
/// and `a` is uniform on `[0.3, 1.0]` rounded to two decimals.
pub fn stub_estimate<S: AsRef<str>>(labels: &[S], seed: u64) -> Result<EstimateDocument> {
    if labels.is_empty() {
        return Err(Error::validation("phases", "at least one phase descriptor is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases = labels
        .iter()
        .map(|label| {
            let log_basic = rng.random_range(100f64.ln()..=5000f64.ln());
            let basic = (log_basic.exp().round() as u32).clamp(TOKENS_BASIC_MIN, TOKENS_BASIC_MAX);
            let factor = rng.random_range(1.5..=4.0);
            let great = ((f64::from(basic) * factor).round() as u32).clamp(basic, TOKENS_GREAT_MAX);
            let a = (rng.random_range(0.3..=1.0f64) * 100.0).round() / 100.0;
            Ok(EstimatePhase {
                label: label.as_ref().to_string(),
                points: OperatingPoints::new(basic, great, a)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimateDocument {
        phases,
        source: format!("stub:seed={seed}"),
        warnings: Vec::new(),
    })
}

fn parse_root_object(text: &str) -> Result<Map<String, Value>> {
    let value: Value = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
    match value {
        Value::Object(map) => Ok(map),
        other => Err(Error::Parse {
            offset: 0,
            message: format!("expected a JSON object, found {}", json_type(&other)),
        }),
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Convert a serde_json error position (line, column) to a byte offset.
pub(crate) fn json_error(text: &str, err: &serde_json::Error) -> Error {
    let line = err.line().max(1);
    let offset: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum::<usize>()
        + err.column().saturating_sub(1);
    Error::Parse {
        offset: offset.min(text.len()),
        message: err.to_string(),
    }
}

fn align<T: Clone>(items: &[T], labels: &[&str], key: impl Fn(&T) -> &String) -> Result<Vec<T>> {
    for item in items {
        if !labels.contains(&key(item).as_str()) {
            return Err(Error::validation(key(item).clone(), "phase not in the phase order"));
        }
    }
    labels
        .iter()
        .map(|label| {
            items
                .iter()
                .find(|it| key(it) == label)
                .cloned()
                .ok_or_else(|| Error::validation(label.to_string(), "phase missing from document"))
        })
        .collect()
}
