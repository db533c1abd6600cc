//! Route-level predictor: hashed wide features, a deep perceptron over dense
//! trip features, and a self-attention encoder over the in-route links
//! enriched with link embeddings.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, AttnBlock, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{HotLinkSet, LinkId, TrafficNetwork};
use crate::params::{Bound, Init, ParamId, ParamStore, Side};
use crate::stea::{affine, layer_norm_affine};
use crate::trafficgen::{TrafficSliceTensor, TripRecord, CH_CONGESTION, STEPS_PER_DAY, STEP_SECONDS};

pub const WIDE_BUCKETS: usize = 1 << 18;
pub const N_WIDE: usize = 10;
pub const N_DENSE: usize = 10;
/// Static and traffic features per in-route link, before the embedding.
pub const N_TOKEN_BASE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteConfig {
    /// Width of the deep and sequence modules.
    pub d_r: usize,
    pub seq_layers: usize,
    pub seq_heads: usize,
    /// Seconds represented by one unit of the softplus head.
    pub time_scale: f64,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self {
            d_r: 256,
            seq_layers: 2,
            seq_heads: 8,
            time_scale: 600.0,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bucket of a named wide feature.
pub fn wide_bucket(feature: &str) -> usize {
    (fnv1a(feature.as_bytes()) % WIDE_BUCKETS as u64) as usize
}

/// Per-link time-averaged traversal seconds, accumulated per day so means
/// only use days strictly before a query day.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkHistory {
    /// `cum[d][l]`: summed traversal seconds over days `< d`.
    cum: Vec<Vec<f64>>,
    free_flow: Vec<f64>,
}

impl LinkHistory {
    pub fn new(net: &TrafficNetwork, traffic: &TrafficSliceTensor) -> Self {
        let n = net.n_links();
        let free_flow: Vec<f64> = net.attrs().iter().map(|a| a.free_flow_time()).collect();
        let mut cum = vec![vec![0.0; n]];
        for day in 0..traffic.days() {
            let mut next = cum[day].clone();
            for s in day * STEPS_PER_DAY..(day + 1) * STEPS_PER_DAY {
                for (l, acc) in next.iter_mut().enumerate() {
                    *acc += free_flow[l] / traffic.ratio(s, l);
                }
            }
            cum.push(next);
        }
        Self { cum, free_flow }
    }

    /// Mean traversal seconds of `link` over days before `day`; the
    /// free-flow time when no earlier day exists.
    pub fn mean_before(&self, day: usize, link: LinkId) -> f64 {
        let d = day.min(self.cum.len() - 1);
        if d == 0 {
            return self.free_flow[link];
        }
        self.cum[d][link] / (d * STEPS_PER_DAY) as f64
    }

    /// Historical-average estimate: the sum of prior-day link means.
    pub fn route_estimate(&self, trip: &TripRecord) -> f64 {
        trip.route.iter().map(|&l| self.mean_before(trip.day(), l)).sum()
    }
}

/// Inputs of the route model for a batch of trips sharing one start step.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteBatch {
    pub wide: Vec<usize>,
    pub dense: Array,
    pub tokens: Array,
    /// Position of each token's link among the hot links, or `None` if cold.
    pub token_hot: Vec<Option<usize>>,
    pub token_pos: Vec<usize>,
    pub token_trip: Vec<usize>,
    pub spans: Vec<std::ops::Range<usize>>,
}

impl RouteBatch {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

fn wide_ids(net: &TrafficNetwork, trip: &TripRecord) -> [usize; N_WIDE] {
    let tod = (trip.start_step % STEPS_PER_DAY) * 24 / STEPS_PER_DAY;
    let dow = trip.day() % 7;
    let length: f64 = trip.route.iter().map(|&l| net.attrs()[l].length_m).sum();
    let lb = (length.max(1.0).log2() * 2.0).floor() as i64;
    let (o, d) = (trip.origin, trip.destination);
    [
        format!("o:{o}"),
        format!("d:{d}"),
        format!("tod:{tod}"),
        format!("dow:{dow}"),
        format!("len:{lb}"),
        format!("o:{o}|tod:{tod}"),
        format!("d:{d}|tod:{tod}"),
        format!("tod:{tod}|dow:{dow}"),
        format!("len:{lb}|tod:{tod}"),
        format!("o:{o}|d:{d}"),
    ]
    .map(|f| wide_bucket(&f))
}

/// Assembles a batch. Every trip must start at `step`-consistent data in
/// `traffic`; links outside `hot` get no embedding.
pub fn build_batch(
    net: &TrafficNetwork,
    traffic: &TrafficSliceTensor,
    history: &LinkHistory,
    hot: &HotLinkSet,
    trips: &[&TripRecord],
) -> Result<RouteBatch> {
    if trips.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut wide = Vec::with_capacity(trips.len() * N_WIDE);
    let mut dense = Vec::with_capacity(trips.len() * N_DENSE);
    let mut tokens = Vec::new();
    let mut token_hot = Vec::new();
    let mut token_pos = Vec::new();
    let mut token_trip = Vec::new();
    let mut spans = Vec::with_capacity(trips.len());
    for (ti, trip) in trips.iter().enumerate() {
        if trip.route.is_empty() {
            return Err(Error::EmptyRoute);
        }
        if let Some(&bad) = trip.route.iter().find(|&&l| l >= net.n_links()) {
            return Err(Error::UnknownLink(bad));
        }
        let step = trip.start_step.min(traffic.steps() - 1);
        let day = trip.day();
        wide.extend(wide_ids(net, trip));

        let start = token_hot.len();
        let (mut len, mut hist, mut ff, mut ratio, mut cong) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (pos, &l) in trip.route.iter().enumerate() {
            let a = &net.attrs()[l];
            let h = history.mean_before(day, l);
            let f = traffic.features(step, l);
            len += a.length_m;
            hist += h;
            ff += a.free_flow_time();
            ratio += f[0] as f64;
            cong += f[CH_CONGESTION] as f64;
            let mut class = [0.0; 3];
            class[(a.road_class as usize).min(2)] = 1.0;
            tokens.extend([a.length_m / 500.0, class[0], class[1], class[2], a.free_flow_speed / 10.0, h / 60.0]);
            for (c, &v) in f.iter().take(4).enumerate() {
                tokens.push(if c == CH_CONGESTION { v as f64 / 3.0 } else { v as f64 });
            }
            for _ in f.len().min(4)..4 {
                tokens.push(0.0);
            }
            token_hot.push(hot.index_of(l));
            token_pos.push(pos);
            token_trip.push(ti);
        }
        let k = trip.route.len() as f64;
        let phase = 2.0 * std::f64::consts::PI * (trip.start_step % STEPS_PER_DAY) as f64 / STEPS_PER_DAY as f64;
        dense.extend([
            len / 1000.0,
            k / 10.0,
            hist / 600.0,
            ff / 600.0,
            ratio / k,
            cong / (3.0 * k),
            phase.sin(),
            phase.cos(),
            if day % 7 >= 5 { 1.0 } else { 0.0 },
            (trip.start_step as f64 * STEP_SECONDS % 86400.0) / 86400.0,
        ]);
        spans.push(start..token_hot.len());
    }
    let n_tok = token_hot.len();
    Ok(RouteBatch {
        wide,
        dense: Array::from_vec(trips.len(), N_DENSE, dense)?,
        tokens: Array::from_vec(n_tok, N_TOKEN_BASE, tokens)?,
        token_hot,
        token_pos,
        token_trip,
        spans,
    })
}

#[derive(Clone, Debug)]
pub struct SeqLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct RouteParams {
    pub cfg: RouteConfig,
    pub emb_dim: usize,
    pub wide_table: ParamId,
    pub wide_bias: ParamId,
    pub deep: [(ParamId, ParamId); 3],
    pub seq_in_w: ParamId,
    pub seq_in_b: ParamId,
    pub seq: Vec<SeqLayer>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl RouteParams {
    pub fn init(store: &mut ParamStore, init: &mut Init, cfg: &RouteConfig, emb_dim: usize) -> Result<Self> {
        let dr = cfg.d_r;
        if dr == 0 || cfg.seq_heads == 0 || dr % cfg.seq_heads != 0 {
            return Err(Error::Config(format!("route width {dr} not divisible by {} heads", cfg.seq_heads)));
        }
        if !(cfg.time_scale > 0.0) {
            return Err(Error::Config("time_scale must be positive".into()));
        }
        let r = Side::Route;
        let mut add = |name: String, a: Array| store.add(format!("route.{name}"), r, a);
        let wide_table = add("wide_table".into(), Array::zeros(WIDE_BUCKETS, 1));
        let wide_bias = add("wide_bias".into(), Array::scalar(0.0));
        let dims = [N_DENSE, dr, dr, dr];
        let deep = [0, 1, 2].map(|i| {
            (
                add(format!("deep{i}.w"), init.glorot(dims[i], dims[i + 1])),
                add(format!("deep{i}.b"), Array::zeros(1, dims[i + 1])),
            )
        });
        let seq_in_w = add("seq_in.w".into(), init.glorot(N_TOKEN_BASE + emb_dim, dr));
        let seq_in_b = add("seq_in.b".into(), Array::zeros(1, dr));
        let seq = (0..cfg.seq_layers)
            .map(|l| SeqLayer {
                w_q: add(format!("seq{l}.w_q"), init.glorot(dr, dr)),
                w_k: add(format!("seq{l}.w_k"), init.glorot(dr, dr)),
                w_v: add(format!("seq{l}.w_v"), init.glorot(dr, dr)),
                w_o: add(format!("seq{l}.w_o"), init.glorot(dr, dr)),
                ln1_g: add(format!("seq{l}.ln1_g"), Array::full(1, dr, 1.0)),
                ln1_b: add(format!("seq{l}.ln1_b"), Array::zeros(1, dr)),
                ff1_w: add(format!("seq{l}.ff1_w"), init.glorot(dr, dr)),
                ff1_b: add(format!("seq{l}.ff1_b"), Array::zeros(1, dr)),
                ff2_w: add(format!("seq{l}.ff2_w"), init.glorot(dr, dr)),
                ff2_b: add(format!("seq{l}.ff2_b"), Array::zeros(1, dr)),
                ln2_g: add(format!("seq{l}.ln2_g"), Array::full(1, dr, 1.0)),
                ln2_b: add(format!("seq{l}.ln2_b"), Array::zeros(1, dr)),
            })
            .collect();
        let out_w = add("out.w".into(), init.glorot(2 * dr, 1));
        let out_b = add("out.b".into(), Array::scalar(0.0));
        Ok(Self {
            cfg: cfg.clone(),
            emb_dim,
            wide_table,
            wide_bias,
            deep,
            seq_in_w,
            seq_in_b,
            seq,
            out_w,
            out_b,
        })
    }
}

/// Bias plus the summed bucket weights of each trip's wide features, `[B × 1]`.
pub fn wide_forward(t: &mut Tape, wide: &[usize], n_trips: usize, p: &RouteParams, b: &Bound) -> Result<Var> {
    if wide.len() != n_trips * N_WIDE {
        return Err(Error::Shape(format!("{} wide ids for {n_trips} trips", wide.len())));
    }
    let w = t.gather_elems(b[p.wide_table], wide, n_trips, N_WIDE)?;
    let s = t.row_sums(w);
    t.add(s, b[p.wide_bias])
}

/// Three relu layers of width `d_r`.
pub fn deep_forward(t: &mut Tape, dense: Var, p: &RouteParams, b: &Bound, dropout: f64) -> Result<Var> {
    let mut x = dense;
    for (i, &(w, bias)) in p.deep.iter().enumerate() {
        x = affine(t, x, b[w], b[bias])?;
        x = t.relu(x);
        if i < 2 {
            x = t.dropout(x, dropout)?;
        }
    }
    Ok(x)
}

/// Sinusoidal position encoding of one position, `width` values.
pub fn position_encoding(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let a = pos as f64 * rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Which keys each in-route link may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqMask {
    /// Every link of the same trip.
    Trip,
    /// Only itself.
    Identity,
}

/// Token embeddings for a batch: base features concatenated with each
/// link's embedding row, zero for cold links.
pub fn token_inputs(t: &mut Tape, batch: &RouteBatch, emb: Option<Var>, emb_dim: usize) -> Result<Var> {
    let base = t.constant(batch.tokens.clone());
    if emb_dim == 0 {
        return Ok(base);
    }
    let n_tok = batch.token_hot.len();
    let e = match emb {
        Some(e) => {
            let [n_hot, w] = t.shape(e);
            if w != emb_dim {
                return Err(Error::Shape(format!("embedding width {w}, expected {emb_dim}")));
            }
            let zero = t.constant(Array::zeros(1, emb_dim));
            let table = t.concat_rows(&[e, zero])?;
            let idx: Vec<usize> = batch.token_hot.iter().map(|h| h.unwrap_or(n_hot)).collect();
            t.gather_rows(table, &idx)?
        }
        None => t.constant(Array::zeros(n_tok, emb_dim)),
    };
    t.concat_cols(&[base, e])
}

/// Self-attention encoder over each trip's links, mean-pooled per trip:
/// `[B × d_r]`.
pub fn sequence_forward(
    t: &mut Tape,
    batch: &RouteBatch,
    tokens: Var,
    p: &RouteParams,
    b: &Bound,
    dropout: f64,
    mask: SeqMask,
) -> Result<Var> {
    if batch.spans.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyRoute);
    }
    let dr = p.cfg.d_r;
    let n_tok = batch.token_hot.len();
    let x = affine(t, tokens, b[p.seq_in_w], b[p.seq_in_b])?;
    let mut pe = Vec::with_capacity(n_tok * dr);
    for &pos in &batch.token_pos {
        pe.extend(position_encoding(pos, dr));
    }
    let pe = t.constant(Array::from_vec(n_tok, dr, pe)?);
    let mut x = t.add(x, pe)?;
    let blocks: Vec<AttnBlock> = match mask {
        SeqMask::Trip => batch
            .spans
            .iter()
            .map(|s| AttnBlock {
                q: s.clone(),
                k: s.clone(),
            })
            .collect(),
        SeqMask::Identity => (0..n_tok).map(|i| AttnBlock { q: i..i + 1, k: i..i + 1 }).collect(),
    };
    let scale = 1.0 / ((dr / p.cfg.seq_heads) as f64).sqrt();
    for l in &p.seq {
        let q = t.matmul(x, b[l.w_q])?;
        let k = t.matmul(x, b[l.w_k])?;
        let v = t.matmul(x, b[l.w_v])?;
        let a = t.attention(q, k, v, p.cfg.seq_heads, scale, Some(blocks.clone()))?;
        let a = t.matmul(a, b[l.w_o])?;
        let a = t.dropout(a, dropout)?;
        let r = t.add(x, a)?;
        x = layer_norm_affine(t, r, b[l.ln1_g], b[l.ln1_b])?;
        let f = affine(t, x, b[l.ff1_w], b[l.ff1_b])?;
        let f = t.relu(f);
        let f = affine(t, f, b[l.ff2_w], b[l.ff2_b])?;
        let f = t.dropout(f, dropout)?;
        let r = t.add(x, f)?;
        x = layer_norm_affine(t, r, b[l.ln2_g], b[l.ln2_b])?;
    }
    let pooled = t.scatter_add_rows(x, &batch.token_trip, batch.len())?;
    let inv: Vec<f64> = batch.spans.iter().map(|s| 1.0 / s.len() as f64).collect();
    let inv = t.constant(Array::from_vec(batch.len(), 1, inv)?);
    t.mul(pooled, inv)
}

/// `ŷ = time_scale · softplus(wide + [deep ⊕ sequence] w + b)`, `[B × 1]`.
pub fn predict_batch(
    t: &mut Tape,
    batch: &RouteBatch,
    emb: Option<Var>,
    p: &RouteParams,
    b: &Bound,
    dropout: f64,
) -> Result<Var> {
    let wide = wide_forward(t, &batch.wide, batch.len(), p, b)?;
    let dense = t.constant(batch.dense.clone());
    let deep = deep_forward(t, dense, p, b, dropout)?;
    let tokens = token_inputs(t, batch, emb, p.emb_dim)?;
    let seq = sequence_forward(t, batch, tokens, p, b, dropout, SeqMask::Trip)?;
    let both = t.concat_cols(&[deep, seq])?;
    let z = affine(t, both, b[p.out_w], b[p.out_b])?;
    let z = t.add(z, wide)?;
    let y = t.softplus(z);
    Ok(t.scale(y, p.cfg.time_scale))
}
