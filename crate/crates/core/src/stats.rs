//! One-sided empirical significance of a region's target-concept score
//! against the same region's scores on baseline concepts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    ActivationGen,
    ActivationMeas,
    CausalGen,
    CausalMeas,
    CausalEdits,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::ActivationGen,
        Criterion::ActivationMeas,
        Criterion::CausalGen,
        Criterion::CausalMeas,
        Criterion::CausalEdits,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::ActivationGen => "ActivationGen",
            Criterion::ActivationMeas => "ActivationMeas",
            Criterion::CausalGen => "CausalGen",
            Criterion::CausalMeas => "CausalMeas",
            Criterion::CausalEdits => "CausalEdits",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion {s:?}")))
    }
}

/// `(1 + #{b >= target}) / (1 + N)`. Ties count against the target.
pub fn empirical_p_value(target: f64, baselines: &[f64]) -> f64 {
    let at_least = baselines.iter().filter(|&&b| b >= target).count();
    (1 + at_least) as f64 / (1 + baselines.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub criterion: Criterion,
    pub target_score: f64,
    pub baseline_scores: Vec<f64>,
    pub p_value: f64,
    pub passed: bool,
}

impl SignificanceResult {
    pub fn new(criterion: Criterion, target_score: f64, baseline_scores: Vec<f64>, alpha: f64) -> Self {
        let p_value = empirical_p_value(target_score, &baseline_scores);
        SignificanceResult {
            criterion,
            target_score,
            baseline_scores,
            p_value,
            passed: p_value <= alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub passed: bool,
    pub alpha: f64,
    pub required: Vec<Criterion>,
    pub failing: Vec<Criterion>,
}

/// Passes iff every required criterion has `p <= alpha`.
pub fn significance_gate(results: &[SignificanceResult], alpha: f64, required: &[Criterion]) -> Result<GateDecision> {
    let mut by_criterion: BTreeMap<Criterion, &SignificanceResult> = BTreeMap::new();
    for r in results {
        if by_criterion.insert(r.criterion, r).is_some() && required.contains(&r.criterion) {
            return Err(Error::DuplicateCriterion(r.criterion.to_string()));
        }
    }
    let mut failing = Vec::new();
    for c in required {
        let r = by_criterion
            .get(c)
            .ok_or_else(|| Error::CriterionUnavailable(c.to_string()))?;
        if r.p_value > alpha {
            failing.push(*c);
        }
    }
    Ok(GateDecision {
        passed: failing.is_empty(),
        alpha,
        required: required.to_vec(),
        failing,
    })
}

/// CSV of (concept, criterion, target, n_baselines, p, passed).
pub fn write_results_csv<W: Write>(w: W, concept: &str, results: &[SignificanceResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["concept", "criterion", "target", "n_baselines", "p", "passed"])?;
    for r in results {
        wtr.write_record([
            concept.to_string(),
            r.criterion.to_string(),
            r.target_score.to_string(),
            r.baseline_scores.len().to_string(),
            r.p_value.to_string(),
            r.passed.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
