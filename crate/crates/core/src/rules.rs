//! The fixed repository of eight weight-generation rules.
//!
//! Every rule maps branch statistics to one score per branch. Scores are
//! min-max normalized into `[0, 1]`, halved, and offset by the base weight,
//! so every weight lies in `[0.5, 1.0]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{BranchStats, StatsHistory};

pub const RULE_COUNT: u8 = 8;
pub const W_BASE: f64 = 0.5;
pub const W_RANGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleError {
    #[error("unknown rule id {0} (valid ids are 1..=8)")]
    UnknownRule(i64),
    #[error("branch statistics contain non-finite values")]
    NonFiniteStats,
    #[error("history entry has {found} branches, current stats have {expected}")]
    BranchMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_var: f64,
    pub epsilon: f64,
}

impl Default for RuleParams {
    fn default() -> Self {
        RuleParams {
            alpha: 1.0,
            beta: 0.5,
            lambda_var: 0.5,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleSpec {
    pub id: u8,
    pub name: &'static str,
    pub title: &'static str,
    pub formula: &'static str,
    /// Text shown to the selector, verbatim.
    pub description: &'static str,
}

const RULES: [RuleSpec; 8] = [
    RuleSpec {
        id: 1,
        name: "MeanOnly",
        title: "Mean Returns Only",
        formula: "s_k = m_k",
        description: "Generate weights based on the mean returns of each reward component.\n\
                      Prioritize components with higher mean returns.",
    },
    RuleSpec {
        id: 2,
        name: "VarianceOnly",
        title: "Variance Returns Only",
        formula: "s_k = v_k",
        description: "Generate weights based on the variance returns of each reward component.\n\
                      Prioritize components with higher variance returns.",
    },
    RuleSpec {
        id: 3,
        name: "MeanPlusVariance",
        title: "Combined Mean and Variance Returns",
        formula: "s_k = m_k + v_k",
        description: "Use both mean and variance returns to generate weights:\n\
                      weight = mean_returns + var_returns",
    },
    RuleSpec {
        id: 4,
        name: "ImprovementRate",
        title: "Improvement Rate Only",
        formula: "s_k = (m_k - mean(hist_k)) / (|mean(hist_k)| + eps); 0 without history",
        description: "Compare the current mean return of each component with its average over the historical epochs.\n\
                      weight = (mean_returns - hist_mean_returns) / (|hist_mean_returns| + eps)\n\
                      Prioritize components that are improving fastest relative to their history.",
    },
    RuleSpec {
        id: 5,
        name: "LogSmoothed",
        title: "Logarithmic Means and Adjusted Variances",
        formula: "s_k = sign(m_k)*log(1+|m_k|) - lambda_var*log(1+v_k)",
        description: "Compress extreme values with logarithms and penalize unstable components:\n\
                      weight = sign(mean_returns)*log(1+|mean_returns|) - lambda_var*log(1+var_returns), lambda_var = 0.5",
    },
    RuleSpec {
        id: 6,
        name: "MeanVarTradeoff",
        title: "Mean-Variance Tradeoff",
        formula: "s_k = alpha*(m_k - beta*v_k)",
        description: "Balance average return against variance to favour stable, high-performing components:\n\
                      weight = alpha*(mean_returns - beta*var_returns), alpha = 1.0, beta = 0.5",
    },
    RuleSpec {
        id: 7,
        name: "InverseVariance",
        title: "Inverse-Variance Scaled Mean",
        formula: "s_k = m_k / (1 + v_k)",
        description: "Scale each mean return down by its variance:\n\
                      weight = mean_returns / (1 + var_returns)\n\
                      Prioritize components that are both rewarding and consistent.",
    },
    RuleSpec {
        id: 8,
        name: "RecentMomentum",
        title: "Recent Momentum",
        formula: "s_k = m_k - m_prev_k; 0 without history",
        description: "Use the change in mean return since the previous evaluation:\n\
                      weight = mean_returns - previous_mean_returns\n\
                      Prioritize components whose returns are accumulating fastest.",
    },
];

pub fn list_rules() -> &'static [RuleSpec] {
    &RULES
}

pub fn rule(id: i64) -> Result<&'static RuleSpec, RuleError> {
    if (1..=RULE_COUNT as i64).contains(&id) {
        Ok(&RULES[(id - 1) as usize])
    } else {
        Err(RuleError::UnknownRule(id))
    }
}

/// Numbered rule list as it appears in the selection prompt.
pub fn rules_prompt_block() -> String {
    let mut out = String::new();
    for r in &RULES {
        out.push_str(&format!("{}.{}:\n{}\n", r.id, r.title, r.description));
    }
    out
}

/// Human-readable catalog: id, name, formula, description.
pub fn catalog_text() -> String {
    let mut out = String::new();
    for r in &RULES {
        out.push_str(&format!("[{}] {}\n  formula: {}\n", r.id, r.name, r.formula));
        for line in r.description.lines() {
            out.push_str(&format!("  | {line}\n"));
        }
    }
    out
}

/// Per-branch priority weights in `[0.5, 1.0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    /// `None` for weights that did not come from a rule (baseline or direct).
    pub rule_id: Option<u8>,
    pub epoch: u64,
}

impl WeightVector {
    pub fn uniform(branches: usize, value: f64, epoch: u64) -> Self {
        WeightVector {
            weights: vec![value; branches],
            rule_id: None,
            epoch,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// History entries strictly older than `stats`, so the result does not depend
/// on whether the current entry was already pushed.
fn past<'a>(stats: &BranchStats, history: &'a StatsHistory) -> Result<Vec<&'a BranchStats>, RuleError> {
    let mut out = Vec::new();
    for h in history.iter().filter(|h| h.epoch < stats.epoch) {
        if h.branches() != stats.branches() {
            return Err(RuleError::BranchMismatch {
                expected: stats.branches(),
                found: h.branches(),
            });
        }
        out.push(h);
    }
    Ok(out)
}

pub fn rule_scores(
    rule_id: i64,
    stats: &BranchStats,
    history: &StatsHistory,
    params: &RuleParams,
) -> Result<Vec<f64>, RuleError> {
    let spec = rule(rule_id)?;
    if !stats.is_finite() || stats.means.len() != stats.vars.len() {
        return Err(RuleError::NonFiniteStats);
    }
    let m = &stats.means;
    let v = &stats.vars;
    let b = m.len();
    let scores: Vec<f64> = match spec.id {
        1 => m.clone(),
        2 => v.clone(),
        3 => (0..b).map(|k| m[k] + v[k]).collect(),
        4 => {
            let past = past(stats, history)?;
            if past.is_empty() {
                vec![0.0; b]
            } else {
                (0..b)
                    .map(|k| {
                        let hist = past.iter().map(|h| h.means[k]).sum::<f64>() / past.len() as f64;
                        (m[k] - hist) / (hist.abs() + params.epsilon)
                    })
                    .collect()
            }
        }
        5 => (0..b)
            .map(|k| m[k].signum() * m[k].abs().ln_1p() - params.lambda_var * v[k].ln_1p())
            .collect(),
        6 => (0..b).map(|k| params.alpha * (m[k] - params.beta * v[k])).collect(),
        7 => (0..b).map(|k| m[k] / (1.0 + v[k])).collect(),
        8 => match past(stats, history)?.last() {
            Some(prev) => (0..b).map(|k| m[k] - prev.means[k]).collect(),
            None => vec![0.0; b],
        },
        _ => unreachable!("rule() validated the id"),
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(RuleError::NonFiniteStats);
    }
    Ok(scores)
}

/// Min-max normalization into `w_base + w_range * n_k`; a spread within
/// `epsilon` maps every branch to the midpoint.
pub fn scores_to_weights(scores: &[f64], epsilon: f64) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    scores
        .iter()
        .map(|&s| {
            let n = if spread <= epsilon || !spread.is_finite() {
                0.5
            } else {
                ((s - lo) / spread).clamp(0.0, 1.0)
            };
            W_BASE + W_RANGE * n
        })
        .collect()
}

pub fn compute_weights_with(
    rule_id: i64,
    stats: &BranchStats,
    history: &StatsHistory,
    params: &RuleParams,
) -> Result<WeightVector, RuleError> {
    let scores = rule_scores(rule_id, stats, history, params)?;
    Ok(WeightVector {
        weights: scores_to_weights(&scores, params.epsilon),
        rule_id: Some(rule_id as u8),
        epoch: stats.epoch,
    })
}

pub fn compute_weights(rule_id: i64, stats: &BranchStats, history: &StatsHistory) -> Result<WeightVector, RuleError> {
    compute_weights_with(rule_id, stats, history, &RuleParams::default())
}
