//! The full model: link encoder (slice encoding, external attention, MoE
//! layers) feeding cached link embeddings into the route predictor.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, Csr, Tape, Var};
use crate::error::{Error, Result};
use crate::esgmoe::{layer_forward, load_balance_loss, MoeConfig, MoeLayerParams, RoutingRecord};
use crate::network::{adjacency_power, normalize_adjacency, HotLinkSet, TrafficNetwork};
use crate::params::{Bound, Init, ParamStore};
use crate::routemodel::{predict_batch, RouteBatch, RouteConfig, RouteParams};
use crate::stea::{encode_slices, stea_forward, SteaConfig, SteaMode, SteaParams};
use crate::trafficgen::TrafficSliceTensor;

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Skip external attention; the slice encoding stands in for its output
    /// and routing uses the local router only.
    pub no_external_attention: bool,
    /// Route on the local context alone.
    pub no_hierarchical_routing: bool,
    /// Drop the MoE layers; the second half of each embedding is zero.
    pub no_moe: bool,
    /// Graph experts only.
    pub no_zero_experts: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stea: SteaConfig,
    pub moe: MoeConfig,
    pub route: RouteConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// MoE settings after applying the ablation switches.
    pub fn effective_moe(&self) -> MoeConfig {
        let mut m = self.moe.clone();
        if self.ablation.no_hierarchical_routing || self.ablation.no_external_attention {
            m.hierarchical = false;
        }
        if self.ablation.no_zero_experts {
            m.n_null = 0;
            m.n_identity = 0;
            m.n_constant = 0;
        }
        if self.ablation.no_moe {
            m.layers = 0;
        }
        m
    }

    /// Width of a link embedding: twice the link model width.
    pub fn emb_dim(&self) -> usize {
        2 * self.stea.d
    }
}

/// Hot links of the network and the `m`-th power of their induced,
/// row-normalized adjacency.
#[derive(Clone, Debug)]
pub struct LinkContext {
    pub hot: HotLinkSet,
    pub adjm: Arc<Csr>,
}

impl LinkContext {
    pub fn new(net: &TrafficNetwork, hot: HotLinkSet, m: usize) -> Result<Self> {
        if hot.is_empty() {
            return Err(Error::InvalidArgument("hot-link set is empty".into()));
        }
        let adj = normalize_adjacency(net)?.induced(hot.members());
        let adjm = adjacency_power(&adj, m)?;
        Ok(Self {
            hot,
            adjm: Arc::clone(adjm.matrix()),
        })
    }
}

pub struct LinkForward {
    /// `[N_hot × 2d]`.
    pub emb: Var,
    pub load_losses: Vec<Var>,
    pub records: Vec<RoutingRecord>,
}

#[derive(Clone, Debug)]
pub struct MixTte {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub stea: SteaParams,
    pub layers: Vec<MoeLayerParams>,
    pub route: RouteParams,
}

impl MixTte {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let stea = SteaParams::init(&mut store, &mut init, &cfg.stea)?;
        let moe = cfg.effective_moe();
        let layers = (0..moe.layers)
            .map(|l| MoeLayerParams::init(&mut store, &mut init, &moe, cfg.stea.d, l))
            .collect::<Result<Vec<_>>>()?;
        let route = RouteParams::init(&mut store, &mut init, &cfg.route, cfg.emb_dim())?;
        Ok(Self {
            cfg,
            store,
            stea,
            layers,
            route,
        })
    }

    /// Encoder input for the hot links at `step`.
    pub fn link_input(&self, traffic: &TrafficSliceTensor, ctx: &LinkContext, step: usize) -> Result<Array> {
        traffic.lookback_features(step, self.cfg.stea.lookback, ctx.hot.members())
    }

    /// Link embeddings `concat(H_ex, H_moe)` and per-layer load losses.
    pub fn link_forward(&self, t: &mut Tape, b: &Bound, x: Var, adjm: &Arc<Csr>) -> Result<LinkForward> {
        let h = encode_slices(t, x, &self.stea, b)?;
        let h_ex = if self.cfg.ablation.no_external_attention {
            h
        } else {
            stea_forward(t, h, &self.stea, b, self.cfg.stea.mode)?
        };
        let mut load_losses = Vec::with_capacity(self.layers.len());
        let mut records = Vec::with_capacity(self.layers.len());
        let mut cur = h;
        for layer in &self.layers {
            let out = layer_forward(t, cur, h_ex, adjm, layer, b)?;
            load_losses.push(load_balance_loss(t, out.dense_probs, &out.counts, layer.router.k, &layer.xi)?);
            records.push(out.record);
            cur = out.out;
        }
        let second = if self.layers.is_empty() {
            let [n, d] = t.shape(h);
            t.constant(Array::zeros(n, d))
        } else {
            cur
        };
        let emb = t.concat_cols(&[h_ex, second])?;
        Ok(LinkForward {
            emb,
            load_losses,
            records,
        })
    }

    /// Evaluation-mode embeddings for the hot links at `step`.
    pub fn embed(&self, traffic: &TrafficSliceTensor, ctx: &LinkContext, step: usize) -> Result<(Array, Vec<RoutingRecord>)> {
        let mut t = Tape::no_grad();
        let b = self.store.bind(&mut t);
        let x = t.constant(self.link_input(traffic, ctx, step)?);
        let lf = self.link_forward(&mut t, &b, x, &ctx.adjm)?;
        Ok((t.value(lf.emb).clone(), lf.records))
    }

    /// Route predictions for a batch given precomputed embeddings.
    pub fn predict_with_embeddings(&self, batch: &RouteBatch, emb: Option<&Array>) -> Result<Vec<f64>> {
        let mut t = Tape::no_grad();
        let b = self.store.bind(&mut t);
        let e = emb.map(|e| t.constant(e.clone()));
        let y = predict_batch(&mut t, batch, e, &self.route, &b, 0.0)?;
        Ok(t.value(y).data().to_vec())
    }

    /// End-to-end evaluation pass: link forward and route prediction on one
    /// tape.
    pub fn predict_direct(
        &self,
        traffic: &TrafficSliceTensor,
        ctx: &LinkContext,
        step: usize,
        batch: &RouteBatch,
    ) -> Result<Vec<f64>> {
        let mut t = Tape::no_grad();
        let b = self.store.bind(&mut t);
        let x = t.constant(self.link_input(traffic, ctx, step)?);
        let lf = self.link_forward(&mut t, &b, x, &ctx.adjm)?;
        let y = predict_batch(&mut t, batch, Some(lf.emb), &self.route, &b, 0.0)?;
        Ok(t.value(y).data().to_vec())
    }

    pub fn stea_mode(&self) -> SteaMode {
        self.cfg.stea.mode
    }
}
