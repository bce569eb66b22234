//! Sparse-dense mixture-of-experts adapter.
//!
//! A layer has two branches that share the same input tokens:
//!
//! * a sparse branch: a softmax router picks the top-K of N gated specific
//!   experts per token, and only the picked experts run;
//! * a dense-shared branch: one shared down-projection feeds M single-matrix
//!   sub-experts whose outputs are mixed by a low-dimensional router and
//!   lifted back through one shared up-projection.
//!
//! Both branch outputs are added residually to the input tokens.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Parameterized, RngStream, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SdMoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    /// Down-projection factor G: hidden width is `model_dim / reduction`.
    pub reduction: usize,
    pub n_shared: usize,
    pub model_dim: usize,
}

impl SdMoeConfig {
    /// N = 4, K = 1, G = 12, M = 4.
    pub fn with_dim(model_dim: usize) -> Self {
        Self {
            n_experts: 4,
            top_k: 1,
            reduction: 12,
            n_shared: 4,
            model_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.n_shared == 0 || self.reduction == 0 || self.model_dim == 0 {
            return Err(Error::Config(format!("all SDMoE sizes must be positive: {self:?}")));
        }
        if self.top_k == 0 || self.top_k >= self.n_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= K < N, got K={} N={}",
                self.top_k, self.n_experts
            )));
        }
        if !self.model_dim.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by reduction {}",
                self.model_dim, self.reduction
            )));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.model_dim / self.reduction
    }

    /// Parameter count of one layer, written out term by term.
    pub fn closed_form_param_count(&self) -> usize {
        let (n, d, h, m) = (self.n_experts, self.model_dim, self.hidden_dim(), self.n_shared);
        n * 3 * d * h + 2 * d * h + m * h * h + h * m + d * n
    }
}

/// Routing outcome for a batch of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    /// Softmax scores `[T, N]`.
    pub scores: Tensor,
    /// Top-K expert indices per token, highest score first.
    pub selected: Vec<Vec<usize>>,
    /// Scores of the selected experts, `[T, K]`.
    pub gate: Tensor,
}

impl RouterDecision {
    /// Top-K selection over score rows; ties go to the lower expert index.
    pub fn from_scores(scores: Tensor, top_k: usize) -> Result<Self> {
        if scores.rank() != 2 {
            return Err(Error::contract(format!(
                "router scores must be [T, N], got {:?}",
                scores.shape()
            )));
        }
        let n = scores.cols();
        if top_k == 0 || top_k > n {
            return Err(Error::Config(format!("top_k {top_k} invalid for {n} experts")));
        }
        let mut selected = Vec::with_capacity(scores.rows());
        let mut gate = Vec::with_capacity(scores.rows() * top_k);
        for t in 0..scores.rows() {
            let row = scores.row(t);
            let mut order: Vec<usize> = (0..n).collect();
            // Stable sort keeps lower indices first among equal scores.
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            order.truncate(top_k);
            gate.extend(order.iter().map(|&e| row[e]));
            selected.push(order);
        }
        let gate = Tensor::new([scores.rows(), top_k], gate)?;
        Ok(Self { scores, selected, gate })
    }

    /// Rebuilds a decision from fresh scores while keeping a previously made
    /// selection, so a perturbed forward pass stays on the same routing piece.
    pub fn with_selection(scores: Tensor, selected: Vec<Vec<usize>>) -> Result<Self> {
        let k = selected.first().map_or(0, Vec::len);
        if scores.rank() != 2 || selected.len() != scores.rows() || k == 0 {
            return Err(Error::contract(format!(
                "selection for {} tokens does not fit scores {:?}",
                selected.len(),
                scores.shape()
            )));
        }
        let n = scores.cols();
        let mut gate = Vec::with_capacity(selected.len() * k);
        for (t, sel) in selected.iter().enumerate() {
            if sel.len() != k || sel.iter().any(|&e| e >= n) {
                return Err(Error::contract(format!("bad selection {sel:?} for token {t}")));
            }
            gate.extend(sel.iter().map(|&e| scores.at(t, e)));
        }
        let gate = Tensor::new([selected.len(), k], gate)?;
        Ok(Self { scores, selected, gate })
    }

    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn n_experts(&self) -> usize {
        self.scores.cols()
    }

    pub fn top_k(&self) -> usize {
        self.gate.cols()
    }

    /// Number of (token, slot) assignments per expert.
    pub fn usage(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_experts()];
        for sel in &self.selected {
            for &e in sel {
                counts[e] += 1;
            }
        }
        counts
    }
}

/// A routing decision together with its score node on the tape.
pub struct Route {
    pub scores: Var,
    pub decision: RouterDecision,
}

pub fn route(g: &mut Graph, tokens: Var, w_router: Var, cfg: &SdMoeConfig) -> Result<Route> {
    route_with(g, tokens, w_router, cfg, None)
}

/// Like [`route`], but reuses `forced` as the top-K selection when given.
pub fn route_with(
    g: &mut Graph,
    tokens: Var,
    w_router: Var,
    cfg: &SdMoeConfig,
    forced: Option<&[Vec<usize>]>,
) -> Result<Route> {
    let w_shape = g.shape(w_router);
    if w_shape != [cfg.model_dim, cfg.n_experts] {
        return Err(Error::dim("route", g.shape(tokens), w_shape));
    }
    let logits = g.matmul(tokens, w_router)?;
    let scores = g.softmax(logits, 1)?;
    let values = g.value(scores).clone();
    let decision = match forced {
        Some(sel) => RouterDecision::with_selection(values, sel.to_vec())?,
        None => RouterDecision::from_scores(values, cfg.top_k)?,
    };
    Ok(Route { scores, decision })
}

/// Load statistics behind the expert-level balance loss.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceStats {
    /// Assignment frequency scaled by `N / (K·T)`.
    pub f: Vec<f64>,
    /// Mean routing probability per expert.
    pub p: Vec<f64>,
    pub token_count: usize,
}

impl BalanceStats {
    pub fn compute(decision: &RouterDecision) -> Result<Self> {
        let t = decision.tokens();
        if t == 0 {
            return Err(Error::contract("balance loss over zero tokens"));
        }
        let (n, k) = (decision.n_experts(), decision.top_k());
        let scale = n as f64 / (k * t) as f64;
        let f = decision.usage().iter().map(|&c| scale * c as f64).collect();
        let mut p = vec![0.0; n];
        for row in 0..t {
            for (acc, &s) in p.iter_mut().zip(decision.scores.row(row)) {
                *acc += s;
            }
        }
        p.iter_mut().for_each(|v| *v /= t as f64);
        Ok(Self { f, p, token_count: t })
    }

    pub fn loss(&self) -> f64 {
        self.f.iter().zip(&self.p).map(|(f, p)| f * p).sum()
    }
}

/// `Σ_n f_n · P_n`. The counts `f` are constants on the tape, so gradient
/// reaches the router only through the mean scores `P`.
pub fn balance_loss(g: &mut Graph, route: &Route) -> Result<(Var, BalanceStats)> {
    let stats = BalanceStats::compute(&route.decision)?;
    let p = g.mean_rows(route.scores);
    let f = g.constant(Tensor::new([1, stats.f.len()], stats.f.clone())?);
    let weighted = g.mul(p, f)?;
    Ok((g.sum(weighted), stats))
}

/// Gated down/up projection: `(silu(x·W_gate) ⊙ (x·W_down)) · W_up`.
#[derive(Clone, Debug)]
pub struct SpecificExpertParams {
    pub w_down: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
}

impl SpecificExpertParams {
    /// Down and gate weights are drawn uniformly; the up-projection starts at zero.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &SdMoeConfig, rng: &mut RngStream) -> Result<Self> {
        let (d, h) = (cfg.model_dim, cfg.hidden_dim());
        Ok(Self {
            w_down: store.add_weight(format!("{prefix}.w_down"), d, h, rng, true)?,
            w_gate: store.add_weight(format!("{prefix}.w_gate"), d, h, rng, true)?,
            w_up: store.add_zeros(format!("{prefix}.w_up"), [h, d], true)?,
        })
    }
}

impl Parameterized for SpecificExpertParams {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_down, self.w_gate, self.w_up]
    }
}

pub fn specific_expert(g: &mut Graph, tokens: Var, p: &SpecificExpertParams) -> Result<Var> {
    let (w_down, w_gate, w_up) = (g.param(p.w_down), g.param(p.w_gate), g.param(p.w_up));
    let gate_pre = g.matmul(tokens, w_gate)?;
    let gate = g.silu(gate_pre);
    let down = g.matmul(tokens, w_down)?;
    let hidden = g.mul(gate, down)?;
    g.matmul(hidden, w_up)
}

pub struct SparseMoeOutput {
    pub output: Var,
    pub balance: Var,
    pub stats: BalanceStats,
    pub decision: RouterDecision,
    /// Token rows pushed through specific experts in this call.
    pub expert_evaluations: usize,
}

/// Top-K dispatch: each expert runs once on the rows routed to it, scaled by
/// the router score, and the results are scattered back to token order.
pub fn sparse_moe(
    g: &mut Graph,
    tokens: Var,
    experts: &[SpecificExpertParams],
    w_router: ParamId,
    cfg: &SdMoeConfig,
) -> Result<SparseMoeOutput> {
    sparse_moe_with(g, tokens, experts, w_router, cfg, None)
}

pub fn sparse_moe_with(
    g: &mut Graph,
    tokens: Var,
    experts: &[SpecificExpertParams],
    w_router: ParamId,
    cfg: &SdMoeConfig,
    forced: Option<&[Vec<usize>]>,
) -> Result<SparseMoeOutput> {
    if experts.len() != cfg.n_experts {
        return Err(Error::Config(format!(
            "expected {} specific experts, got {}",
            cfg.n_experts,
            experts.len()
        )));
    }
    let wr = g.param(w_router);
    let rt = route_with(g, tokens, wr, cfg, forced)?;
    let (balance, stats) = balance_loss(g, &rt)?;

    let t_count = g.value(tokens).rows();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_experts];
    for (t, sel) in rt.decision.selected.iter().enumerate() {
        for &e in sel {
            buckets[e].push(t);
        }
    }

    let mut output: Option<Var> = None;
    let mut evaluations = 0;
    for (e, rows) in buckets.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        evaluations += rows.len();
        let x = g.gather_rows(tokens, rows)?;
        let y = specific_expert(g, x, &experts[e])?;
        let picks: Vec<(usize, usize)> = rows.iter().map(|&t| (t, e)).collect();
        let gate = g.pick(rt.scores, &picks)?;
        let y = g.mul_col(y, gate)?;
        let y = g.scatter_rows(y, rows, t_count)?;
        output = Some(match output {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    Ok(SparseMoeOutput {
        output: output.expect("every token selects at least one expert"),
        balance,
        stats,
        decision: rt.decision,
        expert_evaluations: evaluations,
    })
}

/// Serial-parallel shared branch: shared down-projection, M parallel
/// single-matrix sub-experts mixed by a router, shared up-projection.
#[derive(Clone, Debug)]
pub struct DenseSharedParams {
    pub w_down: ParamId,
    pub sub: Vec<ParamId>,
    pub w_router: ParamId,
    pub w_up: ParamId,
}

impl DenseSharedParams {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &SdMoeConfig, rng: &mut RngStream) -> Result<Self> {
        let (d, h) = (cfg.model_dim, cfg.hidden_dim());
        let w_down = store.add_weight(format!("{prefix}.w_down"), d, h, rng, true)?;
        let sub = (0..cfg.n_shared)
            .map(|m| store.add_weight(format!("{prefix}.sub{m}"), h, h, rng, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            w_down,
            sub,
            w_router: store.add_weight(format!("{prefix}.w_router"), h, cfg.n_shared, rng, true)?,
            w_up: store.add_zeros(format!("{prefix}.w_up"), [h, d], true)?,
        })
    }
}

impl Parameterized for DenseSharedParams {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_down];
        ids.extend(&self.sub);
        ids.push(self.w_router);
        ids.push(self.w_up);
        ids
    }
}

pub fn dense_shared_moe(g: &mut Graph, tokens: Var, p: &DenseSharedParams) -> Result<Var> {
    let w_down = g.param(p.w_down);
    let h = g.matmul(tokens, w_down)?;
    let wr = g.param(p.w_router);
    let logits = g.matmul(h, wr)?;
    let r = g.softmax(logits, 1)?;
    let mut mixed: Option<Var> = None;
    for (m, &sub) in p.sub.iter().enumerate() {
        let w = g.param(sub);
        let y = g.matmul(h, w)?;
        let weight = g.slice_cols(r, m, 1)?;
        let y = g.mul_col(y, weight)?;
        mixed = Some(match mixed {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    let mixed = mixed.ok_or_else(|| Error::Config("dense-shared branch needs M >= 1".into()))?;
    let w_up = g.param(p.w_up);
    g.matmul(mixed, w_up)
}

/// One adapter layer: router, N specific experts and the dense-shared branch.
#[derive(Clone, Debug)]
pub struct SdMoeLayer {
    pub cfg: SdMoeConfig,
    pub router: ParamId,
    pub experts: Vec<SpecificExpertParams>,
    pub shared: DenseSharedParams,
}

pub struct SdMoeOutput {
    pub output: Var,
    pub balance: Var,
    pub stats: BalanceStats,
    pub decision: RouterDecision,
    pub expert_evaluations: usize,
}

impl SdMoeLayer {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: SdMoeConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let router = store.add_weight(format!("{prefix}.router"), cfg.model_dim, cfg.n_experts, rng, true)?;
        let experts = (0..cfg.n_experts)
            .map(|n| SpecificExpertParams::init(store, &format!("{prefix}.expert{n}"), &cfg, rng))
            .collect::<Result<_>>()?;
        let shared = DenseSharedParams::init(store, &format!("{prefix}.shared"), &cfg, rng)?;
        Ok(Self {
            cfg,
            router,
            experts,
            shared,
        })
    }

    /// `tokens + sparse_moe(tokens) + dense_shared_moe(tokens)`.
    pub fn forward(&self, g: &mut Graph, tokens: Var) -> Result<SdMoeOutput> {
        self.forward_with(g, tokens, None)
    }

    pub fn forward_with(&self, g: &mut Graph, tokens: Var, forced: Option<&[Vec<usize>]>) -> Result<SdMoeOutput> {
        let d = g.shape(tokens).last().copied().unwrap_or(0);
        if g.value(tokens).rank() != 2 || d != self.cfg.model_dim {
            return Err(Error::dim("sdmoe_forward", g.shape(tokens), &[self.cfg.model_dim]));
        }
        let sparse = sparse_moe_with(g, tokens, &self.experts, self.router, &self.cfg, forced)?;
        let shared = dense_shared_moe(g, tokens, &self.shared)?;
        let delta = g.add(sparse.output, shared)?;
        let output = g.add(tokens, delta)?;
        Ok(SdMoeOutput {
            output,
            balance: sparse.balance,
            stats: sparse.stats,
            decision: sparse.decision,
            expert_evaluations: sparse.expert_evaluations,
        })
    }
}

impl Parameterized for SdMoeLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.router];
        for e in &self.experts {
            ids.extend(e.param_ids());
        }
        ids.extend(self.shared.param_ids());
        ids
    }
}
