//! Slice encoding and external attention: retrieval against learned memory
//! units, optionally at the level of soft-clustered semantic tokens.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore, Side};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteaMode {
    Flat,
    Hierarchical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteaConfig {
    pub d: usize,
    pub heads: usize,
    pub u_ex: usize,
    pub u_in: usize,
    pub lookback: usize,
    pub channels: usize,
    /// Separate key and value memories instead of projecting one memory.
    pub separate_kv: bool,
    /// Softmax temperature; `None` means `sqrt(d / heads)`.
    pub temp: Option<f64>,
    pub mode: SteaMode,
}

impl Default for SteaConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 8,
            u_ex: 128,
            u_in: 32,
            lookback: 12,
            channels: crate::trafficgen::N_CHANNELS,
            separate_kv: false,
            temp: None,
            mode: SteaMode::Hierarchical,
        }
    }
}

impl SteaConfig {
    pub fn temperature(&self) -> f64 {
        self.temp.unwrap_or_else(|| ((self.d / self.heads.max(1)) as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} not divisible by {} heads", self.d, self.heads)));
        }
        if self.u_ex == 0 || self.u_in == 0 || self.lookback == 0 || self.channels == 0 {
            return Err(Error::Config("memory units, clusters, lookback and channels must be positive".into()));
        }
        if !(self.temperature() > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature())));
        }
        Ok(())
    }
}

/// Learned memory `M` and, with `separate_kv`, distinct key/value memories.
#[derive(Clone, Copy, Debug)]
pub struct ExternalMemory {
    pub m: ParamId,
    pub m_k: Option<ParamId>,
    pub m_v: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct SteaParams {
    pub cfg: SteaConfig,
    pub enc_w1: ParamId,
    pub enc_b1: ParamId,
    pub enc_w2: ParamId,
    pub enc_b2: ParamId,
    pub mem: ExternalMemory,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_sc: ParamId,
    pub w_proj: ParamId,
    pub sa_q: ParamId,
    pub sa_k: ParamId,
    pub sa_v: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl SteaParams {
    pub fn init(store: &mut ParamStore, init: &mut Init, cfg: &SteaConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let tc = cfg.lookback * cfg.channels;
        let mut add = |name: &str, a: Array| store.add(format!("stea.{name}"), Side::Link, a);
        let enc_w1 = add("enc_w1", init.glorot(tc, d));
        let enc_b1 = add("enc_b1", Array::zeros(1, d));
        let enc_w2 = add("enc_w2", init.glorot(d, d));
        let enc_b2 = add("enc_b2", Array::zeros(1, d));
        let m = add("mem", init.uniform(cfg.u_ex, d, 1.0));
        let (m_k, m_v) = if cfg.separate_kv {
            (
                Some(add("mem_k", init.uniform(cfg.u_ex, d, 1.0))),
                Some(add("mem_v", init.uniform(cfg.u_ex, d, 1.0))),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            cfg: cfg.clone(),
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            mem: ExternalMemory { m, m_k, m_v },
            w_q: add("w_q", init.glorot(d, d)),
            w_k: add("w_k", init.glorot(d, d)),
            w_v: add("w_v", init.glorot(d, d)),
            w_sc: add("w_sc", init.glorot(d, cfg.u_in)),
            w_proj: add("w_proj", init.glorot(d, d)),
            sa_q: add("sa_q", init.glorot(d, d)),
            sa_k: add("sa_k", init.glorot(d, d)),
            sa_v: add("sa_v", init.glorot(d, d)),
            ln_gamma: add("ln_gamma", Array::full(1, d, 1.0)),
            ln_beta: add("ln_beta", Array::zeros(1, d)),
        })
    }
}

/// `x W + b` with a broadcast bias row.
pub fn affine(t: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = t.matmul(x, w)?;
    t.add(y, b)
}

/// Layer norm followed by the learned per-feature scale and shift.
pub fn layer_norm_affine(t: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = t.layer_norm(x, LN_EPS);
    let s = t.mul(n, gamma)?;
    t.add(s, beta)
}

/// Per-link two-layer perceptron over the flattened `[lookback × channels]`
/// window: `x: [N × T·C] -> [N × d]`.
pub fn encode_slices(t: &mut Tape, x: Var, p: &SteaParams, b: &Bound) -> Result<Var> {
    let want = p.cfg.lookback * p.cfg.channels;
    let [_, w] = t.shape(x);
    if w != want {
        return Err(Error::Shape(format!(
            "slice window has width {w}, expected lookback {} × channels {} = {want}",
            p.cfg.lookback, p.cfg.channels
        )));
    }
    let h = affine(t, x, b[p.enc_w1], b[p.enc_b1])?;
    let h = t.relu(h);
    affine(t, h, b[p.enc_w2], b[p.enc_b2])
}

/// External knowledge retrieval:
/// `softmax((H W_Q)(M W_K)ᵀ / temp)(M W_V)`, split over the configured heads.
/// With separate memories, `M_K` and `M_V` stand in for the projected keys
/// and values.
pub fn ekr(t: &mut Tape, h_in: Var, p: &SteaParams, b: &Bound) -> Result<Var> {
    let q = t.matmul(h_in, b[p.w_q])?;
    let (k, v) = match (p.mem.m_k, p.mem.m_v) {
        (Some(mk), Some(mv)) => (b[mk], b[mv]),
        _ => {
            let m = b[p.mem.m];
            (t.matmul(m, b[p.w_k])?, t.matmul(m, b[p.w_v])?)
        }
    };
    t.attention(q, k, v, p.cfg.heads, 1.0 / p.cfg.temperature(), None)
}

/// `alpha = softmax(H W_sc)` and semantic tokens `H_se = alphaᵀ (H W_proj)`.
pub fn soft_cluster(t: &mut Tape, h: Var, p: &SteaParams, b: &Bound) -> Result<(Var, Var)> {
    let logits = t.matmul(h, b[p.w_sc])?;
    let alpha = t.softmax(logits);
    let proj = t.matmul(h, b[p.w_proj])?;
    let h_se = t.matmul_t(alpha, true, proj, false)?;
    Ok((alpha, h_se))
}

/// Row `i` of the output is `Σ_j alpha_ij · tokens_j`.
pub fn broadcast(t: &mut Tape, alpha: Var, tokens: Var) -> Result<Var> {
    t.matmul(alpha, tokens)
}

/// Multi-head self-attention among semantic tokens.
pub fn semantic_self_attention(t: &mut Tape, h_se: Var, p: &SteaParams, b: &Bound) -> Result<Var> {
    let q = t.matmul(h_se, b[p.sa_q])?;
    let k = t.matmul(h_se, b[p.sa_k])?;
    let v = t.matmul(h_se, b[p.sa_v])?;
    let scale = 1.0 / ((p.cfg.d / p.cfg.heads) as f64).sqrt();
    t.attention(q, k, v, p.cfg.heads, scale, None)
}

/// Flat: `LN(EKR(H) + H)`. Hierarchical:
/// `LN(BC(SelfAttn(H_se) + EKR(H_se)) + H)`.
pub fn stea_forward(t: &mut Tape, h: Var, p: &SteaParams, b: &Bound, mode: SteaMode) -> Result<Var> {
    let mixed = match mode {
        SteaMode::Flat => ekr(t, h, p, b)?,
        SteaMode::Hierarchical => {
            let (alpha, h_se) = soft_cluster(t, h, p, b)?;
            let sa = semantic_self_attention(t, h_se, p, b)?;
            let ex = ekr(t, h_se, p, b)?;
            let tokens = t.add(sa, ex)?;
            broadcast(t, alpha, tokens)?
        }
    };
    let r = t.add(mixed, h)?;
    layer_norm_affine(t, r, b[p.ln_gamma], b[p.ln_beta])
}
