//! Graph mixture-of-experts layers with entropy-blended routing, sparse top-k
//! activation, zero-computation experts and the load-balance regularizer.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffmath::{softmax_rows, Array, Csr, Tape, Var};
use crate::error::{Error, Result};
use crate::mxtt;
use crate::params::{Bound, Init, ParamId, ParamStore, Side};
use crate::stea::{affine, layer_norm_affine};
use crate::trafficgen::STEPS_PER_DAY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Graph,
    Identity,
    Constant,
    Null,
}

impl ExpertKind {
    pub fn is_zero_computation(self) -> bool {
        self != ExpertKind::Graph
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    pub layers: usize,
    pub n_graph: usize,
    pub n_null: usize,
    pub n_identity: usize,
    pub n_constant: usize,
    pub k: usize,
    /// Adjacency power used for the shared neighborhood context.
    pub m: usize,
    /// Load-loss type weight of zero-computation experts.
    pub zero_expert_weight: f64,
    /// Blend external and local routers by local entropy; otherwise route on
    /// the local context alone.
    pub hierarchical: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            n_graph: 12,
            n_null: 1,
            n_identity: 1,
            n_constant: 2,
            k: 2,
            m: 8,
            zero_expert_weight: 0.5,
            hierarchical: true,
        }
    }
}

impl MoeConfig {
    pub fn kinds(&self) -> Vec<ExpertKind> {
        let mut k = vec![ExpertKind::Graph; self.n_graph];
        k.extend(std::iter::repeat_n(ExpertKind::Null, self.n_null));
        k.extend(std::iter::repeat_n(ExpertKind::Identity, self.n_identity));
        k.extend(std::iter::repeat_n(ExpertKind::Constant, self.n_constant));
        k
    }

    pub fn n_experts(&self) -> usize {
        self.n_graph + self.n_null + self.n_identity + self.n_constant
    }

    /// Type weights ξ: 1 for graph experts, `zero_expert_weight` otherwise.
    pub fn xi(&self) -> Vec<f64> {
        self.kinds()
            .iter()
            .map(|k| if k.is_zero_computation() { self.zero_expert_weight } else { 1.0 })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_experts();
        if self.k == 0 || self.k > n {
            return Err(Error::Config(format!("top-k {} must be in 1..={n}", self.k)));
        }
        if self.m == 0 {
            return Err(Error::Config("adjacency power m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp2 {
    pub fn init(store: &mut ParamStore, init: &mut Init, prefix: &str, dims: [usize; 3], side: Side) -> Self {
        let [i, h, o] = dims;
        Self {
            w1: store.add(format!("{prefix}.w1"), side, init.glorot(i, h)),
            b1: store.add(format!("{prefix}.b1"), side, Array::zeros(1, h)),
            w2: store.add(format!("{prefix}.w2"), side, init.glorot(h, o)),
            b2: store.add(format!("{prefix}.b2"), side, Array::zeros(1, o)),
        }
    }

    /// `relu(x W1 + b1) W2 + b2`.
    pub fn forward(&self, t: &mut Tape, x: Var, b: &Bound) -> Result<Var> {
        let h = affine(t, x, b[self.w1], b[self.b1])?;
        let h = t.relu(h);
        affine(t, h, b[self.w2], b[self.b2])
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Expert {
    Graph(Mlp2),
    Identity,
    Constant(ParamId),
    Null,
}

impl Expert {
    pub fn kind(&self) -> ExpertKind {
        match self {
            Expert::Graph(_) => ExpertKind::Graph,
            Expert::Identity => ExpertKind::Identity,
            Expert::Constant(_) => ExpertKind::Constant,
            Expert::Null => ExpertKind::Null,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpertPool {
    pub experts: Vec<Expert>,
}

impl ExpertPool {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn kinds(&self) -> Vec<ExpertKind> {
        self.experts.iter().map(Expert::kind).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RouterParams {
    pub g_ex: Mlp2,
    pub g_loc: Mlp2,
    pub gamma: ParamId,
    pub mu: ParamId,
    pub k: usize,
    pub hierarchical: bool,
}

#[derive(Clone, Debug)]
pub struct MoeLayerParams {
    pub pool: ExpertPool,
    pub router: RouterParams,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub xi: Vec<f64>,
}

impl MoeLayerParams {
    pub fn init(store: &mut ParamStore, init: &mut Init, cfg: &MoeConfig, d: usize, layer: usize) -> Result<Self> {
        cfg.validate()?;
        let n_e = cfg.n_experts();
        let p = format!("moe{layer}");
        let experts = cfg
            .kinds()
            .into_iter()
            .enumerate()
            .map(|(i, k)| match k {
                ExpertKind::Graph => Expert::Graph(Mlp2::init(store, init, &format!("{p}.expert{i}"), [d, d, d], Side::Link)),
                ExpertKind::Identity => Expert::Identity,
                ExpertKind::Null => Expert::Null,
                ExpertKind::Constant => {
                    Expert::Constant(store.add(format!("{p}.expert{i}.c"), Side::Link, init.uniform(1, d, 0.1)))
                }
            })
            .collect();
        let router = RouterParams {
            g_ex: Mlp2::init(store, init, &format!("{p}.g_ex"), [d, d, n_e], Side::Link),
            g_loc: Mlp2::init(store, init, &format!("{p}.g_loc"), [d, d, n_e], Side::Link),
            gamma: store.add(format!("{p}.gamma"), Side::Link, Array::scalar(1.0)),
            mu: store.add(format!("{p}.mu"), Side::Link, Array::scalar(0.0)),
            k: cfg.k,
            hierarchical: cfg.hierarchical,
        };
        Ok(Self {
            pool: ExpertPool { experts },
            router,
            ln_gamma: store.add(format!("{p}.ln_gamma"), Side::Link, Array::full(1, d, 1.0)),
            ln_beta: store.add(format!("{p}.ln_beta"), Side::Link, Array::zeros(1, d)),
            xi: cfg.xi(),
        })
    }
}

/// Â^m-weighted neighborhood mean of every row.
pub fn local_context(t: &mut Tape, h_moe: Var, adjm: &Arc<Csr>) -> Result<Var> {
    t.spmm(Arc::clone(adjm), h_moe)
}

pub struct Logits {
    pub logits: Var,
    /// Blend weight per row, `[N × 1]`.
    pub alpha: Var,
    /// Entropy of the local routing distribution per row, `[N × 1]`.
    pub entropy: Var,
}

/// `g = α·g_ex(h_ex) + (1−α)·g_loc(ctx)` with `α = sigmoid(γ S + μ)` and `S`
/// the entropy of `softmax(g_loc(ctx))`. Without hierarchical routing the
/// logits are `g_loc(ctx)` and `α` is zero.
pub fn hierarchical_logits(t: &mut Tape, ctx: Var, h_ex: Var, r: &RouterParams, b: &Bound) -> Result<Logits> {
    let g_loc = r.g_loc.forward(t, ctx, b)?;
    let p = t.softmax(g_loc);
    let lp = t.log_softmax(g_loc);
    let plp = t.mul(p, lp)?;
    let neg_s = t.row_sums(plp);
    let entropy = t.neg(neg_s);
    if !r.hierarchical {
        let [n, _] = t.shape(ctx);
        let alpha = t.constant(Array::zeros(n, 1));
        return Ok(Logits {
            logits: g_loc,
            alpha,
            entropy,
        });
    }
    let g_ex = r.g_ex.forward(t, h_ex, b)?;
    let gs = t.mul(entropy, b[r.gamma])?;
    let z = t.add(gs, b[r.mu])?;
    let alpha = t.sigmoid(z);
    let diff = t.sub(g_ex, g_loc)?;
    let blend = t.mul(alpha, diff)?;
    let logits = t.add(g_loc, blend)?;
    Ok(Logits { logits, alpha, entropy })
}

/// Indices of the `k` largest entries of each row, largest first, ties to
/// the lowest index.
pub fn topk_select(logits: &Array, k: usize) -> Vec<Vec<usize>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect()
}

/// Array-level top-k gate.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKGate {
    pub selected: Vec<Vec<usize>>,
    /// Gate values scattered into `[N × N_e]`, zero where not selected.
    pub g: Array,
    pub dense_probs: Array,
    pub counts: Vec<usize>,
}

pub fn topk_gate(logits: &Array, k: usize) -> Result<TopKGate> {
    let n_e = logits.cols();
    if k == 0 || k > n_e {
        return Err(Error::InvalidArgument(format!("top-k {k} must be in 1..={n_e}")));
    }
    let selected = topk_select(logits, k);
    let mut g = Array::zeros(logits.rows(), n_e);
    let mut counts = vec![0; n_e];
    for (r, sel) in selected.iter().enumerate() {
        let kept: Vec<f64> = sel.iter().map(|&c| logits.get(r, c)).collect();
        let p = softmax_rows(&Array::row_vector(kept)?);
        for (j, &c) in sel.iter().enumerate() {
            g.set(r, c, p.data()[j]);
            counts[c] += 1;
        }
    }
    Ok(TopKGate {
        selected,
        g,
        dense_probs: softmax_rows(logits),
        counts,
    })
}

/// Per-link routing outcome of one layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub selected: Vec<Vec<usize>>,
    pub probs: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub struct LayerOutput {
    pub out: Var,
    pub record: RoutingRecord,
    /// Full softmax over all experts, `[N × N_e]`.
    pub dense_probs: Var,
    pub counts: Vec<usize>,
}

/// One layer: `LN(Σ_n G_n E_n + h_moe)`. Only selected experts are evaluated;
/// graph experts read the shared context `Â^m h_moe`, the identity expert the
/// raw row.
pub fn layer_forward(
    t: &mut Tape,
    h_moe: Var,
    h_ex: Var,
    adjm: &Arc<Csr>,
    p: &MoeLayerParams,
    b: &Bound,
) -> Result<LayerOutput> {
    layer_forward_routed(t, h_moe, h_ex, adjm, p, b, None)
}

/// [`layer_forward`] with an optional fixed expert selection per row that
/// replaces the top-k choice; gate values are still the softmax over the
/// chosen logits.
pub fn layer_forward_routed(
    t: &mut Tape,
    h_moe: Var,
    h_ex: Var,
    adjm: &Arc<Csr>,
    p: &MoeLayerParams,
    b: &Bound,
    forced: Option<&[Vec<usize>]>,
) -> Result<LayerOutput> {
    let [n, d] = t.shape(h_moe);
    if adjm.rows() != n || adjm.cols() != n {
        return Err(Error::Shape(format!(
            "adjacency [{}, {}] for {n} links",
            adjm.rows(),
            adjm.cols()
        )));
    }
    let n_e = p.pool.n_experts();
    let ctx = local_context(t, h_moe, adjm)?;
    let lg = hierarchical_logits(t, ctx, h_ex, &p.router, b)?;
    let selected = match forced {
        Some(sel) => {
            if sel.len() != n || sel.iter().any(|s| s.is_empty() || s.iter().any(|&e| e >= n_e)) {
                return Err(Error::InvalidArgument("forced routing must pick valid experts for every row".into()));
            }
            sel.to_vec()
        }
        None => topk_select(t.value(lg.logits), p.router.k),
    };
    let width = selected[0].len();
    if selected.iter().any(|s| s.len() != width) {
        return Err(Error::InvalidArgument("forced routing rows must have equal length".into()));
    }
    let flat: Vec<usize> = selected
        .iter()
        .enumerate()
        .flat_map(|(r, s)| s.iter().map(move |&c| r * n_e + c))
        .collect();
    let kept = t.gather_elems(lg.logits, &flat, n, width)?;
    let gate = t.softmax(kept);
    let dense_probs = t.softmax(lg.logits);

    let mut counts = vec![0usize; n_e];
    let mut rows_of: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_e];
    for (r, s) in selected.iter().enumerate() {
        for (j, &c) in s.iter().enumerate() {
            counts[c] += 1;
            rows_of[c].push((r, r * width + j));
        }
    }

    let mut parts = Vec::new();
    for (e, expert) in p.pool.experts.iter().enumerate() {
        let hits = &rows_of[e];
        if hits.is_empty() || matches!(expert, Expert::Null) {
            continue;
        }
        let rows: Vec<usize> = hits.iter().map(|&(r, _)| r).collect();
        let pos: Vec<usize> = hits.iter().map(|&(_, q)| q).collect();
        let w = t.gather_elems(gate, &pos, rows.len(), 1)?;
        let y = match expert {
            Expert::Graph(mlp) => {
                let c = t.gather_rows(ctx, &rows)?;
                mlp.forward(t, c, b)?
            }
            Expert::Identity => t.gather_rows(h_moe, &rows)?,
            Expert::Constant(c) => b[*c],
            Expert::Null => unreachable!(),
        };
        let weighted = t.mul(w, y)?;
        parts.push(t.scatter_add_rows(weighted, &rows, n)?);
    }
    let mut acc = h_moe;
    for part in parts {
        acc = t.add(acc, part)?;
    }
    debug_assert_eq!(t.shape(acc), [n, d]);
    let out = layer_norm_affine(t, acc, b[p.ln_gamma], b[p.ln_beta])?;

    let gv = t.value(gate);
    let record = RoutingRecord {
        probs: (0..n).map(|r| gv.row(r).to_vec()).collect(),
        selected,
        entropy: t.value(lg.entropy).data().to_vec(),
        alpha: t.value(lg.alpha).data().to_vec(),
    };
    Ok(LayerOutput {
        out,
        record,
        dense_probs,
        counts,
    })
}

/// `N_e · Σ_n ξ_n · mean_i(P_{n,i}) · C_n / (N·k)` with `P` the full softmax.
pub fn load_balance_loss(t: &mut Tape, dense_probs: Var, counts: &[usize], k: usize, xi: &[f64]) -> Result<Var> {
    let [n, n_e] = t.shape(dense_probs);
    if counts.len() != n_e || xi.len() != n_e {
        return Err(Error::Shape(format!(
            "load loss: {n_e} experts, {} counts, {} type weights",
            counts.len(),
            xi.len()
        )));
    }
    let denom = (n * k) as f64;
    let w: Vec<f64> = counts
        .iter()
        .zip(xi)
        .map(|(&c, &x)| n_e as f64 * x * c as f64 / denom)
        .collect();
    let w = t.constant(Array::row_vector(w)?);
    let mean = t.col_means(dense_probs);
    let prod = t.mul(mean, w)?;
    Ok(t.sum(prod))
}

/// Assignment tensor `[288 × N × N_e]`: the gate probability where an expert
/// was selected at a step, zero elsewhere. Every step of the day must be
/// present.
pub fn record_assignments(records: &BTreeMap<usize, RoutingRecord>, n_links: usize, n_experts: usize) -> Result<Vec<f32>> {
    let missing: Vec<usize> = (0..STEPS_PER_DAY).filter(|s| !records.contains_key(s)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingSteps(missing));
    }
    let mut out = vec![0.0f32; STEPS_PER_DAY * n_links * n_experts];
    for (&step, rec) in records.range(0..STEPS_PER_DAY) {
        if rec.selected.len() != n_links {
            return Err(Error::Shape(format!(
                "record at step {step} covers {} links, expected {n_links}",
                rec.selected.len()
            )));
        }
        for (i, (sel, pr)) in rec.selected.iter().zip(&rec.probs).enumerate() {
            for (&e, &p) in sel.iter().zip(pr) {
                if e >= n_experts {
                    return Err(Error::Shape(format!("expert {e} out of range {n_experts}")));
                }
                out[(step * n_links + i) * n_experts + e] = p as f32;
            }
        }
    }
    Ok(out)
}

pub fn export_assignments(path: &Path, tensor: &[f32], n_links: usize, n_experts: usize) -> Result<()> {
    mxtt::save(path, [STEPS_PER_DAY, n_links, n_experts], tensor)
}
