//! LoRA experts, routers, and gating.
//!
//! Three gating variants are implemented:
//!
//! - **baseline**: softmax over all `N` sparse experts, keep the top-k
//!   entries unrenormalized (their sum stays below one),
//! - **naive shared**: top-k over the sparse experts plus `S` shared
//!   experts added with fixed weight 1, so the shared contribution always
//!   totals exactly `S` and dominates the mixture,
//! - **adaptive shared (ASE)**: separate logits for sparse and shared
//!   experts, top-(k-S) sparse selection, and one joint softmax over the
//!   selected sparse and all shared logits, so every activated weight sum
//!   is exactly one.
//!
//! Experts in a [`MoeLayer`] are ordered shared-first: indices `0..S` are
//! shared, `S..N` are sparse. A [`GatingDecision`] stores sparse indices in
//! sparse-expert space (offset by `S` to get the layer index).

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MoeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid expert config ({n}/{k}/{s}/{rank}): {reason}")]
    InvalidConfig {
        n: usize,
        k: usize,
        s: usize,
        rank: usize,
        reason: String,
    },
    #[error("top-k count {k} out of range for {len} logits")]
    TopKOutOfRange { k: usize, len: usize },
    #[error("{variant:?} gating requires {requirement}")]
    VariantRequirement {
        variant: GatingVariant,
        requirement: String,
    },
    #[error("gating decision ({decision:?}) does not match layer variant expectations: {reason}")]
    VariantMismatch {
        decision: GatingVariant,
        reason: String,
    },
    #[error("lora shapes A{a:?} / B{b:?} are not a rank factorization: {reason}")]
    BadLoraShapes {
        a: Vec<usize>,
        b: Vec<usize>,
        reason: String,
    },
    #[error("router shapes do not match config: {0}")]
    BadRouterShapes(String),
    #[error("moe layer: {0}")]
    BadLayer(String),
}

/// Which gating rule a decision or run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatingVariant {
    Baseline,
    NaiveShared,
    Ase,
}

impl GatingVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GatingVariant::Baseline => "baseline",
            GatingVariant::NaiveShared => "naive-shared",
            GatingVariant::Ase => "ase",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(GatingVariant::Baseline),
            "naive-shared" => Some(GatingVariant::NaiveShared),
            "ase" => Some(GatingVariant::Ase),
            _ => None,
        }
    }
}

impl std::fmt::Display for GatingVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The (N/k/S/r) tuple: total experts, activated experts, shared experts,
/// LoRA rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertConfig {
    pub n_total: usize,
    pub top_k: usize,
    pub n_shared: usize,
    pub rank: usize,
}

impl ExpertConfig {
    pub fn new(
        n_total: usize,
        top_k: usize,
        n_shared: usize,
        rank: usize,
    ) -> Result<Self, MoeError> {
        let cfg = Self {
            n_total,
            top_k,
            n_shared,
            rank,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural invariants: `N > S >= 0` and `N - S >= k - S >= 1`.
    pub fn validate(&self) -> Result<(), MoeError> {
        let fail = |reason: &str| MoeError::InvalidConfig {
            n: self.n_total,
            k: self.top_k,
            s: self.n_shared,
            rank: self.rank,
            reason: reason.to_string(),
        };
        if self.n_total <= self.n_shared {
            return Err(fail("need at least one sparse expert (N > S)"));
        }
        if self.top_k <= self.n_shared {
            return Err(fail("need at least one selectable sparse expert (k - S >= 1)"));
        }
        if self.top_k > self.n_total {
            return Err(fail("cannot activate more experts than exist (k <= N)"));
        }
        if self.rank == 0 {
            return Err(fail("rank must be at least 1"));
        }
        Ok(())
    }

    /// Variant-specific requirements on top of [`validate`](Self::validate).
    pub fn validate_for(&self, variant: GatingVariant) -> Result<(), MoeError> {
        self.validate()?;
        match variant {
            GatingVariant::Baseline if self.n_shared != 0 => Err(MoeError::VariantRequirement {
                variant,
                requirement: "S = 0 (all experts sparse)".to_string(),
            }),
            GatingVariant::NaiveShared if self.n_shared == 0 => {
                Err(MoeError::VariantRequirement {
                    variant,
                    requirement: "S >= 1".to_string(),
                })
            }
            GatingVariant::NaiveShared if self.top_k > self.n_sparse() => {
                Err(MoeError::VariantRequirement {
                    variant,
                    requirement: format!(
                        "k <= N - S ({} sparse experts, k = {})",
                        self.n_sparse(),
                        self.top_k
                    ),
                })
            }
            GatingVariant::Ase if self.n_shared == 0 => Err(MoeError::VariantRequirement {
                variant,
                requirement: "S >= 1".to_string(),
            }),
            _ => Ok(()),
        }
    }

    pub fn n_sparse(&self) -> usize {
        self.n_total - self.n_shared
    }

    /// How many sparse experts a decision selects: `k` for baseline and
    /// naive shared, `k - S` for ASE (keeping k experts active in total).
    pub fn sparse_selected(&self, variant: GatingVariant) -> usize {
        match variant {
            GatingVariant::Baseline | GatingVariant::NaiveShared => self.top_k,
            GatingVariant::Ase => self.top_k - self.n_shared,
        }
    }
}

impl std::fmt::Display for ExpertConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}/{}/{}/{})",
            self.n_total, self.top_k, self.n_shared, self.rank
        )
    }
}

/// One low-rank expert: `E(x) = B (A x)` with `A: [r, d_in]`,
/// `B: [d_out, r]`, so the realized update matrix is `B A`.
#[derive(Clone, Debug)]
pub struct LoraExpert<F: Scalar> {
    pub a: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> LoraExpert<F> {
    pub fn new(a: Tensor<F>, b: Tensor<F>) -> Result<Self, MoeError> {
        let bad = |reason: &str| MoeError::BadLoraShapes {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
            reason: reason.to_string(),
        };
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(bad("A and B must be matrices"));
        }
        let (r, d_in) = (a.shape()[0], a.shape()[1]);
        let (d_out, rb) = (b.shape()[0], b.shape()[1]);
        if r != rb {
            return Err(bad("inner ranks of A and B differ"));
        }
        if r == 0 {
            return Err(bad("rank must be at least 1"));
        }
        if r >= d_in.min(d_out) {
            return Err(bad("rank must stay below min(d_in, d_out)"));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// Trainable parameters: `r * (d_in + d_out)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.d_in() + self.d_out())
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>, MoeError> {
        Ok(self.b.matmul(&self.a.matmul(x)?)?)
    }

    pub(crate) fn tracked(&self, graph: &crate::tensor::Graph<F>) -> Self {
        Self {
            a: graph.var(&self.a),
            b: graph.var(&self.b),
        }
    }
}

/// Low-rank expert application, `B (A x)`.
pub fn lora_forward<F: Scalar>(
    expert: &LoraExpert<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>, MoeError> {
    expert.forward(x)
}

/// Per-task router weights: sparse logits from `w_sparse: [N-S, d_in]`,
/// shared logits from `w_shared: [S, d_in]` (zero rows when S = 0).
#[derive(Clone, Debug)]
pub struct Router<F: Scalar> {
    pub w_sparse: Tensor<F>,
    pub w_shared: Tensor<F>,
}

impl<F: Scalar> Router<F> {
    pub fn new(
        w_sparse: Tensor<F>,
        w_shared: Tensor<F>,
        config: &ExpertConfig,
    ) -> Result<Self, MoeError> {
        if w_sparse.shape().len() != 2 || w_sparse.shape()[0] != config.n_sparse() {
            return Err(MoeError::BadRouterShapes(format!(
                "w_sparse {:?} must have {} rows",
                w_sparse.shape(),
                config.n_sparse()
            )));
        }
        if w_shared.shape().len() != 2 || w_shared.shape()[0] != config.n_shared {
            return Err(MoeError::BadRouterShapes(format!(
                "w_shared {:?} must have {} rows",
                w_shared.shape(),
                config.n_shared
            )));
        }
        if w_shared.shape()[1] != w_sparse.shape()[1] {
            return Err(MoeError::BadRouterShapes(
                "w_sparse and w_shared disagree on input width".to_string(),
            ));
        }
        Ok(Self { w_sparse, w_shared })
    }

    pub fn zeros(config: &ExpertConfig, d_in: usize) -> Self {
        Self {
            w_sparse: Tensor::zeros(vec![config.n_sparse(), d_in]),
            w_shared: Tensor::zeros(vec![config.n_shared, d_in]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_sparse.shape()[1]
    }

    pub(crate) fn tracked(&self, graph: &crate::tensor::Graph<F>) -> Self {
        Self {
            w_sparse: graph.var(&self.w_sparse),
            w_shared: graph.var(&self.w_shared),
        }
    }
}

/// Indices of the `k` largest values; ties broken toward the lowest index.
/// Returned sorted ascending.
pub fn top_k_select<F: PartialOrd + Copy>(values: &[F], k: usize) -> Result<Vec<usize>, MoeError> {
    if k == 0 || k > values.len() {
        return Err(MoeError::TopKOutOfRange {
            k,
            len: values.len(),
        });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort by descending value keeps the lowest index first on ties.
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Selected experts and their weights for one input.
///
/// `weights` holds the tracked weight entries: selected sparse weights
/// first (aligned with `sparse_indices`), then, for ASE, the `S` shared
/// weights. Naive-shared decisions carry no shared entries because those
/// weights are fixed to exactly 1.
#[derive(Clone, Debug)]
pub struct GatingDecision<F: Scalar> {
    pub variant: GatingVariant,
    pub sparse_indices: Vec<usize>,
    weights: Tensor<F>,
    n_shared: usize,
}

impl<F: Scalar> GatingDecision<F> {
    pub fn n_shared(&self) -> usize {
        self.n_shared
    }

    /// Weights of the selected sparse experts, aligned with
    /// `sparse_indices`.
    pub fn sparse_weights(&self) -> Vec<F> {
        self.weights.data()[..self.sparse_indices.len()].to_vec()
    }

    /// Weights of the shared experts: softmax entries for ASE, exactly 1
    /// for naive shared, empty for baseline.
    pub fn shared_weights(&self) -> Vec<F> {
        match self.variant {
            GatingVariant::Baseline => Vec::new(),
            GatingVariant::NaiveShared => vec![F::one(); self.n_shared],
            GatingVariant::Ase => self.weights.data()[self.sparse_indices.len()..].to_vec(),
        }
    }

    /// Sum of every activated weight (sparse plus shared).
    pub fn total_weight(&self) -> F {
        let mut acc = F::zero();
        for w in self.sparse_weights() {
            acc += w;
        }
        for w in self.shared_weights() {
            acc += w;
        }
        acc
    }

    /// Tracked single-element weight for the `slot`-th selected sparse
    /// expert.
    pub fn sparse_weight_tensor(&self, slot: usize) -> Result<Tensor<F>, MoeError> {
        Ok(self.weights.gather_rows(&[slot])?)
    }

    /// Tracked single-element weight for shared expert `i`; a constant 1
    /// under naive sharing.
    pub fn shared_weight_tensor(&self, i: usize) -> Result<Tensor<F>, MoeError> {
        match self.variant {
            GatingVariant::Baseline => Err(MoeError::VariantMismatch {
                decision: self.variant,
                reason: "baseline gating has no shared experts".to_string(),
            }),
            GatingVariant::NaiveShared => Ok(Tensor::scalar(F::one())),
            GatingVariant::Ase => Ok(self
                .weights
                .gather_rows(&[self.sparse_indices.len() + i])?),
        }
    }
}

/// Baseline sparse gating: softmax over all `N` logits, keep the top-k
/// entries without renormalizing.
pub fn gate_baseline<F: Scalar>(
    x: &Tensor<F>,
    router: &Router<F>,
    config: &ExpertConfig,
) -> Result<GatingDecision<F>, MoeError> {
    config.validate_for(GatingVariant::Baseline)?;
    let logits = router.w_sparse.matmul(x)?;
    let scores = logits.softmax()?;
    let selected = top_k_select(scores.data(), config.top_k)?;
    let weights = scores.gather_rows(&selected)?;
    Ok(GatingDecision {
        variant: GatingVariant::Baseline,
        sparse_indices: selected,
        weights,
        n_shared: 0,
    })
}

/// Naive shared gating: baseline over the `N - S` sparse experts, shared
/// experts pinned at weight 1.
pub fn gate_naive_shared<F: Scalar>(
    x: &Tensor<F>,
    router: &Router<F>,
    config: &ExpertConfig,
) -> Result<GatingDecision<F>, MoeError> {
    config.validate_for(GatingVariant::NaiveShared)?;
    let logits = router.w_sparse.matmul(x)?;
    let scores = logits.softmax()?;
    let selected = top_k_select(scores.data(), config.top_k)?;
    let weights = scores.gather_rows(&selected)?;
    Ok(GatingDecision {
        variant: GatingVariant::NaiveShared,
        sparse_indices: selected,
        weights,
        n_shared: config.n_shared,
    })
}

/// Adaptive shared gating: select the top-(k-S) sparse logits, then one
/// softmax over the selected sparse logits together with all shared
/// logits, so activated weights sum to one.
pub fn gate_ase<F: Scalar>(
    x: &Tensor<F>,
    router: &Router<F>,
    config: &ExpertConfig,
) -> Result<GatingDecision<F>, MoeError> {
    config.validate_for(GatingVariant::Ase)?;
    let sparse_logits = router.w_sparse.matmul(x)?;
    let shared_logits = router.w_shared.matmul(x)?;
    let selected = top_k_select(sparse_logits.data(), config.sparse_selected(GatingVariant::Ase))?;
    let picked = sparse_logits.gather_rows(&selected)?;
    let joint = Tensor::concat(&[&picked, &shared_logits])?;
    let weights = joint.softmax()?;
    Ok(GatingDecision {
        variant: GatingVariant::Ase,
        sparse_indices: selected,
        weights,
        n_shared: config.n_shared,
    })
}

/// Dispatch on the gating variant.
pub fn gate<F: Scalar>(
    variant: GatingVariant,
    x: &Tensor<F>,
    router: &Router<F>,
    config: &ExpertConfig,
) -> Result<GatingDecision<F>, MoeError> {
    match variant {
        GatingVariant::Baseline => gate_baseline(x, router, config),
        GatingVariant::NaiveShared => gate_naive_shared(x, router, config),
        GatingVariant::Ase => gate_ase(x, router, config),
    }
}

/// One mixture layer: frozen square base weight plus `N` LoRA experts,
/// shared experts first.
#[derive(Clone, Debug)]
pub struct MoeLayer<F: Scalar> {
    pub w0: Tensor<F>,
    pub experts: Vec<LoraExpert<F>>,
    pub config: ExpertConfig,
}

impl<F: Scalar> MoeLayer<F> {
    pub fn new(
        w0: Tensor<F>,
        experts: Vec<LoraExpert<F>>,
        config: ExpertConfig,
    ) -> Result<Self, MoeError> {
        config.validate()?;
        if w0.shape().len() != 2 || w0.shape()[0] != w0.shape()[1] {
            return Err(MoeError::BadLayer(format!(
                "base weight must be square for the residual path, got {:?}",
                w0.shape()
            )));
        }
        if experts.len() != config.n_total {
            return Err(MoeError::BadLayer(format!(
                "expected {} experts, got {}",
                config.n_total,
                experts.len()
            )));
        }
        let d = w0.shape()[0];
        for e in &experts {
            if e.d_in() != d || e.d_out() != d {
                return Err(MoeError::BadLayer(format!(
                    "expert dims {}x{} do not match layer width {}",
                    e.d_out(),
                    e.d_in(),
                    d
                )));
            }
        }
        Ok(Self {
            w0,
            experts,
            config,
        })
    }

    pub fn width(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn shared_experts(&self) -> &[LoraExpert<F>] {
        &self.experts[..self.config.n_shared]
    }

    pub fn sparse_expert(&self, sparse_index: usize) -> &LoraExpert<F> {
        &self.experts[self.config.n_shared + sparse_index]
    }

    /// Full forward with the frozen base:
    /// `y = x + W0 x + sum_i g_i E_i(x) [+ shared terms]`.
    pub fn forward(
        &self,
        x: &Tensor<F>,
        decision: &GatingDecision<F>,
    ) -> Result<Tensor<F>, MoeError> {
        self.check_decision(decision)?;
        let mut y = x.add(&self.w0.matmul(x)?)?;
        y = self.add_mixture(y, x, decision)?;
        Ok(y)
    }

    /// Forward without the base term: `y = x + sum_i g_i E_i(x)`.
    /// Only meaningful for baseline decisions.
    pub fn forward_pure(
        &self,
        x: &Tensor<F>,
        decision: &GatingDecision<F>,
    ) -> Result<Tensor<F>, MoeError> {
        if decision.variant != GatingVariant::Baseline {
            return Err(MoeError::VariantMismatch {
                decision: decision.variant,
                reason: "pure mixture form is defined for baseline gating".to_string(),
            });
        }
        self.check_decision(decision)?;
        self.add_mixture(x.clone(), x, decision)
    }

    fn add_mixture(
        &self,
        mut y: Tensor<F>,
        x: &Tensor<F>,
        decision: &GatingDecision<F>,
    ) -> Result<Tensor<F>, MoeError> {
        for (slot, &si) in decision.sparse_indices.iter().enumerate() {
            let out = self.sparse_expert(si).forward(x)?;
            let w = decision.sparse_weight_tensor(slot)?;
            y = y.add(&out.scale(&w)?)?;
        }
        for (i, expert) in self.shared_experts().iter().enumerate() {
            let out = expert.forward(x)?;
            let term = match decision.variant {
                // Fixed unit weight: add the expert output directly.
                GatingVariant::NaiveShared => out,
                _ => out.scale(&decision.shared_weight_tensor(i)?)?,
            };
            y = y.add(&term)?;
        }
        Ok(y)
    }

    fn check_decision(&self, decision: &GatingDecision<F>) -> Result<(), MoeError> {
        let mismatch = |reason: String| MoeError::VariantMismatch {
            decision: decision.variant,
            reason,
        };
        if decision.n_shared != self.config.n_shared
            && decision.variant != GatingVariant::Baseline
        {
            return Err(mismatch(format!(
                "decision has {} shared experts, layer has {}",
                decision.n_shared, self.config.n_shared
            )));
        }
        if decision.variant == GatingVariant::Baseline && self.config.n_shared != 0 {
            return Err(mismatch(
                "baseline decision applied to a layer with shared experts".to_string(),
            ));
        }
        let expected = self.config.sparse_selected(decision.variant);
        if decision.sparse_indices.len() != expected {
            return Err(mismatch(format!(
                "decision selects {} sparse experts, layer expects {}",
                decision.sparse_indices.len(),
                expected
            )));
        }
        if let Some(&max) = decision.sparse_indices.iter().max() {
            if max >= self.config.n_sparse() {
                return Err(mismatch(format!(
                    "sparse index {} out of range for {} sparse experts",
                    max,
                    self.config.n_sparse()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn tracked(&self, graph: &crate::tensor::Graph<F>) -> Self {
        Self {
            // The base weight stays untracked: it is frozen and receives
            // no gradient updates.
            w0: self.w0.clone(),
            experts: self.experts.iter().map(|e| e.tracked(graph)).collect(),
            config: self.config,
        }
    }
}

/// Layer forward: dispatches on the decision variant.
pub fn moe_layer_forward<F: Scalar>(
    layer: &MoeLayer<F>,
    x: &Tensor<F>,
    decision: &GatingDecision<F>,
) -> Result<Tensor<F>, MoeError> {
    layer.forward(x, decision)
}

/// Length-`n_total` activation vector for one decision: gating weight at
/// each activated expert's layer index (shared first), zero elsewhere.
/// Built from tracked weights so routing regularizers stay differentiable.
pub fn activation_vector<F: Scalar>(
    decision: &GatingDecision<F>,
    n_total: usize,
    n_shared: usize,
) -> Result<Tensor<F>, MoeError> {
    let mut acc = Tensor::zeros(vec![n_total]);
    let one_hot = |idx: usize| {
        let mut data = vec![F::zero(); n_total];
        data[idx] = F::one();
        Tensor::from_vec(data)
    };
    for (slot, &si) in decision.sparse_indices.iter().enumerate() {
        let w = decision.sparse_weight_tensor(slot)?;
        acc = acc.add(&one_hot(n_shared + si).scale(&w)?)?;
    }
    for i in 0..decision.n_shared() {
        let w = decision.shared_weight_tensor(i)?;
        acc = acc.add(&one_hot(i).scale(&w)?)?;
    }
    Ok(acc)
}
