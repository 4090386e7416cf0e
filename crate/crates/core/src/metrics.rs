//! Multi-task metric arithmetic and expert-activation telemetry.
//!
//! `delta_m` is the average relative performance change of a multi-task
//! model against per-task single-task baselines, sign-adjusted per metric
//! direction and reported in percent. The activation sink tallies which
//! experts fire per (epoch, layer, task) and exports heatmap rows and the
//! per-epoch mean shared-gate weight.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::moe::{GatingDecision, GatingVariant};
use crate::scalar::Scalar;
use crate::util::fmt_f64;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("task sets differ: {0}")]
    TaskSetMismatch(String),
    #[error("baseline metric for task {task} is zero; relative change undefined")]
    ZeroBaseline { task: usize },
    #[error("activation index {index} out of range for {n_experts} experts")]
    IndexOutOfRange { index: usize, n_experts: usize },
    #[error("no activation records for epoch {0}")]
    EmptyEpoch(usize),
    #[error("no activation records")]
    NoRecords,
    #[error("shared-gate trajectory requires adaptive-shared records, found {0}")]
    NonAseRecords(GatingVariant),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One task's evaluation value plus its direction: `lower_better` is true
/// for error-style metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskMetric {
    pub task: usize,
    pub value: f64,
    pub lower_better: bool,
}

impl TaskMetric {
    pub fn higher_better(task: usize, value: f64) -> Self {
        Self {
            task,
            value,
            lower_better: false,
        }
    }

    pub fn lower_better(task: usize, value: f64) -> Self {
        Self {
            task,
            value,
            lower_better: true,
        }
    }
}

/// Average relative performance change, in percent:
/// `100/T * sum_t s_t (M_t - B_t) / B_t` with `s_t = -1` when lower is
/// better. Positive means the multi-task model beats the baselines on
/// average.
pub fn delta_m(mtl: &[TaskMetric], stl: &[TaskMetric]) -> Result<f64, MetricsError> {
    if mtl.len() != stl.len() {
        return Err(MetricsError::TaskSetMismatch(format!(
            "{} vs {} tasks",
            mtl.len(),
            stl.len()
        )));
    }
    let mut acc = 0.0;
    for (m, b) in mtl.iter().zip(stl.iter()) {
        if m.task != b.task {
            return Err(MetricsError::TaskSetMismatch(format!(
                "task {} paired with task {}",
                m.task, b.task
            )));
        }
        if m.lower_better != b.lower_better {
            return Err(MetricsError::TaskSetMismatch(format!(
                "task {} directions disagree",
                m.task
            )));
        }
        if b.value == 0.0 {
            return Err(MetricsError::ZeroBaseline { task: b.task });
        }
        let sign = if m.lower_better { -1.0 } else { 1.0 };
        acc += sign * (m.value - b.value) / b.value;
    }
    Ok(100.0 * acc / mtl.len() as f64)
}

#[derive(Clone, Debug, Default)]
struct Tally {
    counts: Vec<u64>,
    weight_sums: Vec<f64>,
    tokens: u64,
}

/// Accumulates activation counts and gating-weight sums per
/// (epoch, task, layer). Single writer per training run.
#[derive(Clone, Debug)]
pub struct ActivationSink {
    n_experts: usize,
    n_shared: usize,
    variant: Option<GatingVariant>,
    records: BTreeMap<(usize, usize, usize), Tally>,
}

impl ActivationSink {
    pub fn new(n_experts: usize, n_shared: usize) -> Self {
        Self {
            n_experts,
            n_shared,
            variant: None,
            records: BTreeMap::new(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    /// Tally one decision: the selected sparse experts plus every shared
    /// expert (shared experts fire on every token).
    pub fn record<F: Scalar>(
        &mut self,
        epoch: usize,
        layer: usize,
        task: usize,
        decision: &GatingDecision<F>,
    ) -> Result<(), MetricsError> {
        self.variant.get_or_insert(decision.variant);
        let tally = self
            .records
            .entry((epoch, task, layer))
            .or_insert_with(|| Tally {
                counts: vec![0; self.n_experts],
                weight_sums: vec![0.0; self.n_experts],
                tokens: 0,
            });
        for (slot, &si) in decision.sparse_indices.iter().enumerate() {
            let idx = self.n_shared + si;
            if idx >= self.n_experts {
                return Err(MetricsError::IndexOutOfRange {
                    index: idx,
                    n_experts: self.n_experts,
                });
            }
            tally.counts[idx] += 1;
            tally.weight_sums[idx] += decision.sparse_weights()[slot].to_f64();
        }
        for (i, w) in decision.shared_weights().into_iter().enumerate() {
            tally.counts[i] += 1;
            tally.weight_sums[i] += w.to_f64();
        }
        tally.tokens += 1;
        Ok(())
    }

    pub fn epochs(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.records.keys().map(|k| k.0).collect();
        out.dedup();
        out
    }

    fn tasks_in_epoch(&self, epoch: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .records
            .keys()
            .filter(|k| k.0 == epoch)
            .map(|k| k.1)
            .collect();
        out.dedup();
        out
    }

    /// Normalized activation frequencies for one epoch, one row per
    /// (task, layer, expert). Frequency is `count / tokens`; mean weight
    /// is the average gating weight over the tokens that activated the
    /// expert (zero if never activated).
    pub fn export_heatmap(&self, epoch: usize) -> Result<Vec<HeatmapRow>, MetricsError> {
        let mut rows = Vec::new();
        for ((e, task, layer), tally) in &self.records {
            if *e != epoch {
                continue;
            }
            for expert in 0..self.n_experts {
                let count = tally.counts[expert];
                rows.push(HeatmapRow {
                    task: *task,
                    epoch,
                    layer: *layer,
                    expert_index: expert,
                    is_shared: expert < self.n_shared,
                    frequency: count as f64 / tally.tokens as f64,
                    mean_weight: if count == 0 {
                        0.0
                    } else {
                        tally.weight_sums[expert] / count as f64
                    },
                });
            }
        }
        if rows.is_empty() {
            return Err(MetricsError::EmptyEpoch(epoch));
        }
        Ok(rows)
    }

    /// Heatmap rows for one epoch restricted to one task.
    pub fn export_heatmap_for_task(
        &self,
        epoch: usize,
        task: usize,
    ) -> Result<Vec<HeatmapRow>, MetricsError> {
        let rows: Vec<HeatmapRow> = self
            .export_heatmap(epoch)?
            .into_iter()
            .filter(|r| r.task == task)
            .collect();
        if rows.is_empty() {
            return Err(MetricsError::EmptyEpoch(epoch));
        }
        Ok(rows)
    }

    /// Per-epoch mean shared gating weight (per shared expert, averaged
    /// over tokens and tasks), per layer plus the layer average. Only
    /// defined for adaptive-shared runs: the point of the trajectory is
    /// watching the learned shared weight move.
    pub fn shared_gate_trajectory(&self) -> Result<Vec<TrajectoryPoint>, MetricsError> {
        match self.variant {
            None => return Err(MetricsError::NoRecords),
            Some(GatingVariant::Ase) => {}
            Some(other) => return Err(MetricsError::NonAseRecords(other)),
        }
        let mut out = Vec::new();
        for epoch in self.epochs() {
            // layer -> (shared weight sum, token count)
            let mut per_layer: BTreeMap<usize, (f64, u64)> = BTreeMap::new();
            for task in self.tasks_in_epoch(epoch) {
                for ((e, t, layer), tally) in &self.records {
                    if *e != epoch || *t != task {
                        continue;
                    }
                    let shared_sum: f64 = tally.weight_sums[..self.n_shared].iter().sum();
                    let entry = per_layer.entry(*layer).or_insert((0.0, 0));
                    entry.0 += shared_sum;
                    entry.1 += tally.tokens;
                }
            }
            let layers: Vec<(usize, f64)> = per_layer
                .into_iter()
                .map(|(layer, (sum, tokens))| {
                    (layer, sum / (tokens as f64 * self.n_shared as f64))
                })
                .collect();
            let mean = layers.iter().map(|(_, m)| m).sum::<f64>() / layers.len() as f64;
            out.push(TrajectoryPoint {
                epoch,
                per_layer: layers,
                mean,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRow {
    pub task: usize,
    pub epoch: usize,
    pub layer: usize,
    pub expert_index: usize,
    pub is_shared: bool,
    pub frequency: f64,
    pub mean_weight: f64,
}

#[derive(Clone, Debug)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub per_layer: Vec<(usize, f64)>,
    pub mean: f64,
}

pub const HEATMAP_HEADER: &str = "task,epoch,layer,expert_index,is_shared,frequency,mean_weight";

pub fn write_heatmap_csv(rows: &[HeatmapRow], path: &Path) -> Result<(), MetricsError> {
    let mut out = String::new();
    out.push_str(HEATMAP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task,
            r.epoch,
            r.layer,
            r.expert_index,
            r.is_shared,
            fmt_f64(r.frequency),
            fmt_f64(r.mean_weight)
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn write_trajectory_csv(points: &[TrajectoryPoint], path: &Path) -> Result<(), MetricsError> {
    let mut out = String::from("epoch,layer,mean_shared_weight\n");
    for p in points {
        for (layer, value) in &p.per_layer {
            out.push_str(&format!("{},{},{}\n", p.epoch, layer, fmt_f64(*value)));
        }
        out.push_str(&format!("{},avg,{}\n", p.epoch, fmt_f64(p.mean)));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
