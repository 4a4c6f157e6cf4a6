//! Per-branch GAE, advantage normalization and branch return statistics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

/// Default length of the statistics history queue.
pub const HISTORY_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input in {0}")]
    NonFiniteInput(&'static str),
    #[error("gamma and lambda must lie in [0, 1] (got {gamma}, {lambda})")]
    InvalidDiscount { gamma: f64, lambda: f64 },
    #[error("no completed episodes in the evaluation window")]
    EmptyWindow,
    #[error("epoch {new} does not follow the last stored epoch {last}")]
    NonMonotonicEpoch { last: u64, new: u64 },
}

/// One contiguous trajectory segment from a single environment.
///
/// Rows of `values` are `V_k(s_t)` for `t = 0..=T`; the last row is the
/// bootstrap value of the observation following the final transition.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub logprobs_old: Vec<f64>,
    pub rewards: Matrix,
    pub values: Matrix,
    pub dones: Vec<bool>,
    pub advantages: Option<Matrix>,
    pub returns_target: Option<Matrix>,
    /// Undiscounted per-branch sums of episodes completed inside this segment.
    pub episode_returns: Matrix,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.dones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dones.is_empty()
    }

    pub fn branches(&self) -> usize {
        self.rewards.cols()
    }
}

/// Backward GAE recursion applied to every branch column independently.
///
/// Returns `(advantages, returns_target)`, both `T x B`.
pub fn gae(
    rewards: &Matrix,
    values: &Matrix,
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Matrix, Matrix), EstimationError> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(EstimationError::InvalidDiscount { gamma, lambda });
    }
    let (t_len, b) = (rewards.rows(), rewards.cols());
    if dones.len() != t_len {
        return Err(EstimationError::ShapeMismatch(format!(
            "{} dones for {t_len} reward rows",
            dones.len()
        )));
    }
    if values.rows() != t_len + 1 || values.cols() != b {
        return Err(EstimationError::ShapeMismatch(format!(
            "values are {}x{}, expected {}x{b}",
            values.rows(),
            values.cols(),
            t_len + 1
        )));
    }
    if !rewards.all_finite() {
        return Err(EstimationError::NonFiniteInput("rewards"));
    }
    if !values.all_finite() {
        return Err(EstimationError::NonFiniteInput("values"));
    }

    let mut adv = Matrix::zeros(t_len, b);
    let mut ret = Matrix::zeros(t_len, b);
    let mut running = vec![0.0; b];
    for t in (0..t_len).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        for k in 0..b {
            let v_t = values[(t, k)];
            let delta = rewards[(t, k)] + gamma * not_done * values[(t + 1, k)] - v_t;
            running[k] = delta + gamma * lambda * not_done * running[k];
            adv[(t, k)] = running[k];
            ret[(t, k)] = running[k] + v_t;
        }
    }
    Ok((adv, ret))
}

pub fn compute_gae_per_branch(batch: &mut RolloutBatch, gamma: f64, lambda: f64) -> Result<(), EstimationError> {
    let (adv, ret) = gae(&batch.rewards, &batch.values, &batch.dones, gamma, lambda)?;
    batch.advantages = Some(adv);
    batch.returns_target = Some(ret);
    Ok(())
}

/// Standardizes each column to zero mean and unit population std.
/// Columns whose std falls below `1e-8` become all zeros.
pub fn normalize_advantages(adv: &Matrix) -> Matrix {
    let (rows, cols) = (adv.rows(), adv.cols());
    let mut out = Matrix::zeros(rows, cols);
    if rows == 0 {
        return out;
    }
    for k in 0..cols {
        let mean = (0..rows).map(|t| adv[(t, k)]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|t| (adv[(t, k)] - mean).powi(2)).sum::<f64>() / rows as f64;
        let std = var.sqrt();
        if std < 1e-8 {
            continue;
        }
        for t in 0..rows {
            out[(t, k)] = (adv[(t, k)] - mean) / std;
        }
    }
    out
}

/// Means and population variances of per-episode branch returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub epoch: u64,
}

impl BranchStats {
    pub fn branches(&self) -> usize {
        self.means.len()
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().chain(&self.vars).all(|v| v.is_finite())
    }
}

pub fn summarize_branches(episode_returns: &Matrix, epoch: u64) -> Result<BranchStats, EstimationError> {
    let (e, b) = (episode_returns.rows(), episode_returns.cols());
    if e == 0 {
        return Err(EstimationError::EmptyWindow);
    }
    let mut means = vec![0.0; b];
    let mut vars = vec![0.0; b];
    for k in 0..b {
        let mean = (0..e).map(|i| episode_returns[(i, k)]).sum::<f64>() / e as f64;
        means[k] = mean;
        vars[k] = (0..e).map(|i| (episode_returns[(i, k)] - mean).powi(2)).sum::<f64>() / e as f64;
    }
    Ok(BranchStats { means, vars, epoch })
}

/// Bounded FIFO of past [`BranchStats`], oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsHistory {
    queue: VecDeque<BranchStats>,
    capacity: usize,
}

impl Default for StatsHistory {
    fn default() -> Self {
        StatsHistory::with_capacity(HISTORY_LEN)
    }
}

impl StatsHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity >= 1, "history capacity must be positive");
        StatsHistory {
            queue: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &BranchStats> + ExactSizeIterator {
        self.queue.iter()
    }

    pub fn newest(&self) -> Option<&BranchStats> {
        self.queue.back()
    }

    pub fn push(&mut self, stats: BranchStats) -> Result<(), EstimationError> {
        if let Some(last) = self.queue.back() {
            if stats.epoch <= last.epoch {
                return Err(EstimationError::NonMonotonicEpoch {
                    last: last.epoch,
                    new: stats.epoch,
                });
            }
        }
        self.queue.push_back(stats);
        while self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
        Ok(())
    }
}

pub fn push_history(mut history: StatsHistory, stats: BranchStats) -> Result<StatsHistory, EstimationError> {
    history.push(stats)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(epoch: u64) -> BranchStats {
        BranchStats { means: vec![epoch as f64], vars: vec![0.0], epoch }
    }

    #[test]
    fn single_terminal_step() {
        let r = Matrix::from_rows(&[vec![2.0, -1.0]]);
        let v = Matrix::from_rows(&[vec![0.5, 0.25], vec![100.0, 100.0]]);
        let (adv, ret) = gae(&r, &v, &[true], 0.99, 0.95).unwrap();
        assert_eq!(adv.row(0), &[1.5, -1.25]);
        assert_eq!(ret.row(0), &[2.0, -1.0]);
    }

    #[test]
    fn lambda_zero_is_td_error() {
        let r = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let v = Matrix::from_rows(&[vec![0.1], vec![0.2], vec![0.3], vec![0.4]]);
        let (adv, _) = gae(&r, &v, &[false, false, false], 0.9, 0.0).unwrap();
        assert_eq!(adv[(0, 0)], 1.0 + 0.9 * 0.2 - 0.1);
        assert_eq!(adv[(2, 0)], 3.0 + 0.9 * 0.4 - 0.3);
    }

    #[test]
    fn gae_rejects_bad_inputs() {
        let r = Matrix::from_rows(&[vec![1.0]]);
        let v = Matrix::from_rows(&[vec![0.0]]);
        assert!(matches!(gae(&r, &v, &[true], 0.9, 0.9), Err(EstimationError::ShapeMismatch(_))));
        let v = Matrix::from_rows(&[vec![f64::NAN], vec![0.0]]);
        assert!(matches!(gae(&r, &v, &[true], 0.9, 0.9), Err(EstimationError::NonFiniteInput(_))));
        let v = Matrix::from_rows(&[vec![0.0], vec![0.0]]);
        assert!(matches!(gae(&r, &v, &[true], 1.5, 0.9), Err(EstimationError::InvalidDiscount { .. })));
    }

    #[test]
    fn normalize_cases() {
        let m = Matrix::from_rows(&[vec![3.0, -1.0], vec![3.0, 1.0]]);
        let n = normalize_advantages(&m);
        assert_eq!(n.col(0), vec![0.0, 0.0]);
        assert_eq!(n.col(1), vec![-1.0, 1.0]);

        let m = Matrix::from_rows(&[vec![1.0, 10.0], vec![5.0, -3.0], vec![2.5, 7.0], vec![-4.0, 0.0]]);
        let n = normalize_advantages(&m);
        for k in 0..2 {
            let c = n.col(k);
            let mean = c.iter().sum::<f64>() / 4.0;
            let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn summarize_cases() {
        let s = summarize_branches(&Matrix::from_rows(&[vec![4.0, -2.0]]), 3).unwrap();
        assert_eq!(s.vars, vec![0.0, 0.0]);
        assert_eq!(s.epoch, 3);
        let s = summarize_branches(&Matrix::from_rows(&[vec![1.0], vec![3.0]]), 1).unwrap();
        assert_eq!((s.means[0], s.vars[0]), (2.0, 1.0));
        let p = summarize_branches(&Matrix::from_rows(&[vec![3.0], vec![1.0]]), 1).unwrap();
        assert_eq!(s, p);
        assert_eq!(summarize_branches(&Matrix::zeros(0, 2), 1), Err(EstimationError::EmptyWindow));
    }

    #[test]
    fn history_evicts_oldest() {
        let mut h = StatsHistory::new();
        assert!(h.is_empty());
        h.push(stats(1)).unwrap();
        assert_eq!(h.len(), 1);
        for e in 2..=6 {
            h = push_history(h, stats(e * 10)).unwrap();
        }
        assert_eq!(h.len(), 5);
        assert_eq!(h.iter().next().unwrap().epoch, 20);
        assert_eq!(h.newest().unwrap().epoch, 60);
    }

    #[test]
    fn history_rejects_non_monotonic() {
        let mut h = StatsHistory::new();
        h.push(stats(5)).unwrap();
        assert_eq!(h.push(stats(5)), Err(EstimationError::NonMonotonicEpoch { last: 5, new: 5 }));
        assert_eq!(h.len(), 1);
    }
}
