//! Task losses and the task/expert mutual-information routing regularizer.
//!
//! The regularizer rewards routing that makes experts predictable from the
//! task: with `P(e|t)` the batch-mean activation distribution of task `t`
//! and a task prior `P(t)`, the loss is `-I(T;E)` where
//! `I = sum_{t,e} P(t)P(e|t) log(P(e|t) / P(e))` and `0 log 0 := 0`.
//! Minimizing it maximizes the mutual information, encouraging sparse,
//! task-specific expert use.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid routing stats: {0}")]
    InvalidStats(String),
    #[error("mi_weight must be nonnegative, got {0}")]
    NegativeMiWeight(f64),
    #[error("total_loss needs at least one task loss")]
    NoTaskLosses,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskLossKind {
    Mse,
}

/// Mean squared error between prediction and target.
pub fn task_loss<F: Scalar>(
    prediction: &Tensor<F>,
    target: &Tensor<F>,
    kind: TaskLossKind,
) -> Result<Tensor<F>, LossError> {
    match kind {
        TaskLossKind::Mse => {
            let diff = prediction.sub(target)?;
            Ok(diff.mul(&diff)?.mean()?)
        }
    }
}

/// Per-task expert-activation distributions over one batch.
///
/// Row `t` is `P(e|t)`: nonnegative, summing to one, with never-activated
/// experts at exactly zero. Rows may be graph-tracked, in which case the
/// mutual-information loss is differentiable through them.
#[derive(Clone, Debug)]
pub struct RoutingStats<F: Scalar> {
    rows: Vec<Tensor<F>>,
    prior: Vec<f64>,
}

impl<F: Scalar> RoutingStats<F> {
    /// Distributions with a uniform task prior.
    pub fn new(rows: Vec<Tensor<F>>) -> Result<Self, LossError> {
        let t = rows.len();
        if t == 0 {
            return Err(LossError::InvalidStats("no task rows".to_string()));
        }
        Self::with_prior(rows, vec![1.0 / t as f64; t])
    }

    pub fn with_prior(rows: Vec<Tensor<F>>, prior: Vec<f64>) -> Result<Self, LossError> {
        if rows.len() != prior.len() {
            return Err(LossError::InvalidStats(format!(
                "{} rows but {} prior entries",
                rows.len(),
                prior.len()
            )));
        }
        let n = rows[0].numel();
        let prior_sum: f64 = prior.iter().sum();
        if (prior_sum - 1.0).abs() > 1e-9 || prior.iter().any(|p| *p < 0.0) {
            return Err(LossError::InvalidStats(
                "task prior must be a distribution".to_string(),
            ));
        }
        for (t, row) in rows.iter().enumerate() {
            if row.numel() != n || row.shape().len() != 1 {
                return Err(LossError::InvalidStats(format!(
                    "row {t} has shape {:?}, expected [{n}]",
                    row.shape()
                )));
            }
            let mut sum = F::zero();
            for &p in row.data() {
                if p < F::zero() {
                    return Err(LossError::InvalidStats(format!(
                        "row {t} has a negative entry"
                    )));
                }
                sum += p;
            }
            if (sum.to_f64() - 1.0).abs() > 1e-9 {
                return Err(LossError::InvalidStats(format!(
                    "row {t} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { rows, prior })
    }

    /// Normalize accumulated per-expert weight sums into distributions.
    /// Stays differentiable: the division is composed as
    /// `exp(-log(sum))`.
    pub fn from_weight_sums(sums: Vec<Tensor<F>>) -> Result<Self, LossError> {
        let rows = sums
            .iter()
            .map(|s| normalize_distribution(s))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rows)
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn n_experts(&self) -> usize {
        self.rows[0].numel()
    }

    pub fn rows(&self) -> &[Tensor<F>] {
        &self.rows
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }
}

/// Scale a nonnegative vector to sum to one via `exp(-log(sum))`, keeping
/// the gradient path intact.
pub fn normalize_distribution<F: Scalar>(sums: &Tensor<F>) -> Result<Tensor<F>, LossError> {
    let total = sums.sum()?;
    if total.item()? <= F::zero() {
        return Err(LossError::InvalidStats(
            "cannot normalize an all-zero weight sum".to_string(),
        ));
    }
    let inv = total.log()?.scale_const(-F::one())?.exp()?;
    Ok(sums.scale(&inv)?)
}

/// Negative mutual information `-I(T;E)` between tasks and experts.
///
/// Zero entries contribute nothing (their activation mask is treated as
/// constant), so degenerate rows are handled without special casing.
pub fn mutual_information_loss<F: Scalar>(
    stats: &RoutingStats<F>,
) -> Result<Tensor<F>, LossError> {
    let n = stats.n_experts();

    // P(e) = sum_t P(t) P(e|t)
    let mut p_e: Option<Tensor<F>> = None;
    for (row, &pt) in stats.rows().iter().zip(stats.prior()) {
        let weighted = row.scale_const(F::from_f64(pt))?;
        p_e = Some(match p_e {
            None => weighted,
            Some(acc) => acc.add(&weighted)?,
        });
    }
    let p_e = p_e.expect("at least one row");

    // I = sum_t P(t) * KL(P(e|t) || P(e)), restricted to activated experts.
    let mut info: Option<Tensor<F>> = None;
    for (row, &pt) in stats.rows().iter().zip(stats.prior()) {
        if pt == 0.0 {
            continue;
        }
        let active: Vec<usize> = (0..n).filter(|&e| row.data()[e] > F::zero()).collect();
        if active.is_empty() {
            continue;
        }
        let p = row.gather_rows(&active)?;
        let q = p_e.gather_rows(&active)?;
        let log_ratio = p.log()?.sub(&q.log()?)?;
        let contrib = p.mul(&log_ratio)?.sum()?.scale_const(F::from_f64(pt))?;
        info = Some(match info {
            None => contrib,
            Some(acc) => acc.add(&contrib)?,
        });
    }
    let info = info.ok_or_else(|| LossError::InvalidStats("empty stats".to_string()))?;
    Ok(info.scale_const(-F::one())?)
}

/// Mean of the per-task losses plus `mi_weight` times the routing loss.
pub fn total_loss<F: Scalar>(
    task_losses: &[Tensor<F>],
    mi_loss: Option<&Tensor<F>>,
    mi_weight: F,
) -> Result<Tensor<F>, LossError> {
    if task_losses.is_empty() {
        return Err(LossError::NoTaskLosses);
    }
    if mi_weight < F::zero() {
        return Err(LossError::NegativeMiWeight(mi_weight.to_f64()));
    }
    let refs: Vec<&Tensor<F>> = task_losses.iter().collect();
    let mut total = Tensor::concat(&refs)?.mean()?;
    if let Some(mi) = mi_loss {
        total = total.add(&mi.scale_const(mi_weight)?)?;
    }
    Ok(total)
}
