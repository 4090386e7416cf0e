//! Deterministic synthetic multi-task regression data.
//!
//! All tasks observe the same inputs (one input, one annotation per task).
//! Targets come from a shared nonlinear teacher `tanh(G x + c)` with a
//! small rank-1 per-task perturbation of `G` and a per-task linear head,
//! so tasks are related but not identical. The R-squared task metric makes
//! single-task baselines cheap and relative comparisons well defined.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::metrics::TaskMetric;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::fmt_f64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("targets have zero variance; R-squared undefined")]
    ZeroVarianceTargets,
    #[error("dataset file format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sizes and noise level for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub tasks: usize,
    pub sigma: f64,
    /// Frobenius norm of each task perturbation relative to the shared map.
    pub pert_scale: f64,
    pub val_fraction: f64,
}

impl GeneratorConfig {
    fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_samples < 2 {
            return fail("need at least 2 samples");
        }
        if self.tasks < 2 {
            return fail("need at least 2 tasks");
        }
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 {
            return fail("dimensions must be positive");
        }
        if self.sigma < 0.0 {
            return fail("sigma must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return fail("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Ground-truth generator: shared map `G`, bias `c`, per-task rank-1
/// perturbations `P_t` with `||P_t|| = pert_scale * ||G||`, per-task heads
/// `Q_t`.
#[derive(Clone, Debug)]
pub struct TeacherModel<F: Scalar> {
    pub shared_map: Tensor<F>,
    pub bias: Tensor<F>,
    pub heads: Vec<Tensor<F>>,
    pub perturbations: Vec<Tensor<F>>,
}

impl<F: Scalar> TeacherModel<F> {
    /// Sample a teacher. Draw order is fixed: shared map, bias, then per
    /// task head and perturbation.
    pub fn random(
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        tasks: usize,
        pert_scale: f64,
    ) -> Self {
        let normal = |rng: &mut ChaCha8Rng, n: usize, std: f64| -> Vec<F> {
            (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    F::from_f64(z * std)
                })
                .collect()
        };
        let g_std = 1.0 / (d_in as f64).sqrt();
        let g = Tensor::matrix(d_hidden, d_in, normal(rng, d_hidden * d_in, g_std)).unwrap();
        let bias = Tensor::from_vec(normal(rng, d_hidden, 0.3));
        let g_norm = frobenius(&g);

        let mut heads = Vec::with_capacity(tasks);
        let mut perturbations = Vec::with_capacity(tasks);
        let q_std = 1.0 / (d_hidden as f64).sqrt();
        for _ in 0..tasks {
            heads.push(Tensor::matrix(d_out, d_hidden, normal(rng, d_out * d_hidden, q_std)).unwrap());
            let u = normal(rng, d_hidden, 1.0);
            let v = normal(rng, d_in, 1.0);
            let mut p = vec![F::zero(); d_hidden * d_in];
            for i in 0..d_hidden {
                for j in 0..d_in {
                    p[i * d_in + j] = u[i] * v[j];
                }
            }
            let pt = Tensor::matrix(d_hidden, d_in, p).unwrap();
            let scale = if pert_scale == 0.0 {
                F::zero()
            } else {
                F::from_f64(pert_scale * g_norm / frobenius(&pt).max(1e-300))
            };
            let scaled = pt.scale_const(scale).unwrap();
            perturbations.push(scaled);
        }
        Self {
            shared_map: g,
            bias,
            heads,
            perturbations,
        }
    }

    pub fn tasks(&self) -> usize {
        self.heads.len()
    }

    /// Shared hidden representation for task `t`: `tanh((G + P_t) x + c)`.
    pub fn hidden(&self, x: &[F], task: usize) -> Vec<F> {
        let d_hidden = self.bias.numel();
        let d_in = x.len();
        let g = self.shared_map.data();
        let p = self.perturbations[task].data();
        let c = self.bias.data();
        (0..d_hidden)
            .map(|i| {
                let mut acc = c[i];
                for j in 0..d_in {
                    acc += (g[i * d_in + j] + p[i * d_in + j]) * x[j];
                }
                acc.tanh()
            })
            .collect()
    }

    /// Noise-free target for task `t`.
    pub fn eval_task(&self, x: &[F], task: usize) -> Vec<F> {
        let h = self.hidden(x, task);
        let q = self.heads[task].data();
        let d_out = self.heads[task].shape()[0];
        (0..d_out)
            .map(|i| {
                let mut acc = F::zero();
                for (j, hj) in h.iter().enumerate() {
                    acc += q[i * h.len() + j] * *hj;
                }
                acc
            })
            .collect()
    }
}

fn frobenius<F: Scalar>(t: &Tensor<F>) -> f64 {
    t.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
}

/// Disjoint train/validation index partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Inputs shared across tasks, per-task targets, and the split.
#[derive(Clone, Debug)]
pub struct Dataset<F: Scalar> {
    pub seed: u64,
    pub n_samples: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub tasks: usize,
    pub sigma: f64,
    inputs: Vec<F>,
    targets: Vec<Vec<F>>,
    pub split: DatasetSplit,
}

impl<F: Scalar> Dataset<F> {
    pub fn input(&self, i: usize) -> &[F] {
        &self.inputs[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn input_tensor(&self, i: usize) -> Tensor<F> {
        Tensor::from_vec(self.input(i).to_vec())
    }

    pub fn target(&self, task: usize, i: usize) -> &[F] {
        &self.targets[task][i * self.d_out..(i + 1) * self.d_out]
    }

    pub fn target_tensor(&self, task: usize, i: usize) -> Tensor<F> {
        Tensor::from_vec(self.target(task, i).to_vec())
    }

    /// All targets of one task, row-major `[n, d_out]`.
    pub fn task_targets(&self, task: usize) -> &[F] {
        &self.targets[task]
    }

    /// Write the dataset as a versioned text file; floats carry 17
    /// significant digits so the import is bit-exact.
    pub fn export(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        out.push_str("asemoe-dataset v1\n");
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("n {}\n", self.n_samples));
        out.push_str(&format!("d_in {}\n", self.d_in));
        out.push_str(&format!("d_hidden {}\n", self.d_hidden));
        out.push_str(&format!("d_out {}\n", self.d_out));
        out.push_str(&format!("tasks {}\n", self.tasks));
        out.push_str(&format!("sigma {}\n", fmt_f64(self.sigma)));
        let idx_line = |name: &str, idx: &[usize]| {
            let items: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            format!("{name} {}\n", items.join(" "))
        };
        out.push_str(&idx_line("train", &self.split.train));
        out.push_str(&idx_line("val", &self.split.val));
        out.push_str("inputs\n");
        for i in 0..self.n_samples {
            let row: Vec<String> = self.input(i).iter().map(|v| fmt_f64(v.to_f64())).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        for t in 0..self.tasks {
            out.push_str(&format!("targets {t}\n"));
            for i in 0..self.n_samples {
                let row: Vec<String> =
                    self.target(t, i).iter().map(|v| fmt_f64(v.to_f64())).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn import(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let mut next = || -> Result<String, DataError> {
            lines
                .next()
                .ok_or_else(|| DataError::Format("unexpected end of file".to_string()))?
                .map_err(DataError::from)
        };
        let header = next()?;
        if header != "asemoe-dataset v1" {
            return Err(DataError::Format(format!("unknown header {header:?}")));
        }
        let mut field = |name: &str| -> Result<String, DataError> {
            let line = next()?;
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| DataError::Format(format!("bad line {line:?}")))?;
            if key != name {
                return Err(DataError::Format(format!("expected {name}, got {key}")));
            }
            Ok(value.to_string())
        };
        let parse_usize = |s: String| -> Result<usize, DataError> {
            s.trim().parse().map_err(|_| DataError::Format(format!("bad integer {s:?}")))
        };
        let seed: u64 = field("seed")?
            .trim()
            .parse()
            .map_err(|_| DataError::Format("bad seed".to_string()))?;
        let n_samples = parse_usize(field("n")?)?;
        let d_in = parse_usize(field("d_in")?)?;
        let d_hidden = parse_usize(field("d_hidden")?)?;
        let d_out = parse_usize(field("d_out")?)?;
        let tasks = parse_usize(field("tasks")?)?;
        let sigma: f64 = field("sigma")?
            .trim()
            .parse()
            .map_err(|_| DataError::Format("bad sigma".to_string()))?;
        let parse_indices = |s: String| -> Result<Vec<usize>, DataError> {
            s.split_whitespace()
                .map(|x| x.parse().map_err(|_| DataError::Format(format!("bad index {x:?}"))))
                .collect()
        };
        let train = parse_indices(field("train")?)?;
        let val = parse_indices(field("val")?)?;

        let parse_rows = |next: &mut dyn FnMut() -> Result<String, DataError>,
                          rows: usize,
                          cols: usize|
         -> Result<Vec<F>, DataError> {
            let mut out = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next()?;
                let values: Result<Vec<f64>, DataError> = line
                    .split_whitespace()
                    .map(|x| {
                        x.parse()
                            .map_err(|_| DataError::Format(format!("bad float {x:?}")))
                    })
                    .collect();
                let values = values?;
                if values.len() != cols {
                    return Err(DataError::Format(format!(
                        "expected {cols} values per row, got {}",
                        values.len()
                    )));
                }
                out.extend(values.into_iter().map(F::from_f64));
            }
            Ok(out)
        };

        if next()? != "inputs" {
            return Err(DataError::Format("expected inputs section".to_string()));
        }
        let inputs = parse_rows(&mut next, n_samples, d_in)?;
        let mut targets = Vec::with_capacity(tasks);
        for t in 0..tasks {
            let line = next()?;
            if line != format!("targets {t}") {
                return Err(DataError::Format(format!("expected targets {t}, got {line:?}")));
            }
            targets.push(parse_rows(&mut next, n_samples, d_out)?);
        }
        Ok(Self {
            seed,
            n_samples,
            d_in,
            d_hidden,
            d_out,
            tasks,
            sigma,
            inputs,
            targets,
            split: DatasetSplit { train, val },
        })
    }
}

/// Generate a dataset: standard-normal inputs, teacher targets with
/// additive noise, and a shuffled train/val partition. Fully determined
/// by the config.
pub fn generate<F: Scalar>(cfg: &GeneratorConfig) -> Result<Dataset<F>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let teacher: TeacherModel<F> = TeacherModel::random(
        &mut rng,
        cfg.d_in,
        cfg.d_hidden,
        cfg.d_out,
        cfg.tasks,
        cfg.pert_scale,
    );
    generate_with_teacher(cfg, &teacher, &mut rng)
}

/// Generation with an explicit teacher; `rng` continues the caller's
/// stream (inputs first, then noise task by task, then the split).
pub fn generate_with_teacher<F: Scalar>(
    cfg: &GeneratorConfig,
    teacher: &TeacherModel<F>,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset<F>, DataError> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let inputs: Vec<F> = (0..n * cfg.d_in)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            F::from_f64(z)
        })
        .collect();
    let mut targets = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let mut rows = Vec::with_capacity(n * cfg.d_out);
        for i in 0..n {
            let x = &inputs[i * cfg.d_in..(i + 1) * cfg.d_in];
            let clean = teacher.eval_task(x, t);
            for v in clean {
                let eps: f64 = rng.sample(StandardNormal);
                rows.push(v + F::from_f64(eps * cfg.sigma));
            }
        }
        targets.push(rows);
    }

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((n as f64) * cfg.val_fraction).round().max(1.0) as usize;
    let n_val = n_val.min(n - 1);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();

    Ok(Dataset {
        seed: cfg.seed,
        n_samples: n,
        d_in: cfg.d_in,
        d_hidden: cfg.d_hidden,
        d_out: cfg.d_out,
        tasks: cfg.tasks,
        sigma: cfg.sigma,
        inputs,
        targets,
        split: DatasetSplit { train, val },
    })
}

/// R-squared (coefficient of determination), pooled over samples and
/// output dimensions with per-dimension centering. Higher is better.
pub fn task_metric<F: Scalar>(
    task: usize,
    predictions: &[F],
    targets: &[F],
    d_out: usize,
) -> Result<TaskMetric, DataError> {
    if predictions.len() != targets.len() || targets.len() % d_out != 0 {
        return Err(DataError::ShapeMismatch(format!(
            "{} predictions vs {} targets (d_out {})",
            predictions.len(),
            targets.len(),
            d_out
        )));
    }
    let n = targets.len() / d_out;
    let mut means = vec![0.0f64; d_out];
    for i in 0..n {
        for j in 0..d_out {
            means[j] += targets[i * d_out + j].to_f64();
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut ss_res = 0.0f64;
    let mut ss_tot = 0.0f64;
    for i in 0..n {
        for j in 0..d_out {
            let t = targets[i * d_out + j].to_f64();
            let p = predictions[i * d_out + j].to_f64();
            ss_res += (t - p) * (t - p);
            ss_tot += (t - means[j]) * (t - means[j]);
        }
    }
    if ss_tot == 0.0 {
        return Err(DataError::ZeroVarianceTargets);
    }
    Ok(TaskMetric::higher_better(task, 1.0 - ss_res / ss_tot))
}
