//! Losses, time-specific batching, the daily replay set and masked AdamW
//! training.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{LinkContext, MixTte};
use crate::network::TrafficNetwork;
use crate::params::{ParamStore, TrainMask};
use crate::routemodel::{build_batch, predict_batch, LinkHistory};
use crate::trafficgen::{TrafficSliceTensor, TripRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Weight α of the summed per-layer load-balance losses.
    pub load_loss_weight: f64,
    pub max_batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-7,
            dropout: 0.3,
            epochs: 2,
            load_loss_weight: 1000.0,
            max_batch: 256,
            seed: 7,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.adam_eps];
        if positive.iter().any(|v| !(*v > 0.0)) || self.weight_decay < 0.0 || self.load_loss_weight < 0.0 {
            return Err(Error::Config("learning rate, decay and loss weight must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if self.max_batch == 0 {
            return Err(Error::Config("max_batch must be positive".into()));
        }
        Ok(())
    }
}

/// `Σ |ŷ − y|` over a `[B × 1]` prediction.
pub fn regression_loss(t: &mut Tape, pred: Var, truth: &[f64]) -> Result<Var> {
    let [r, c] = t.shape(pred);
    if r == 0 || truth.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if c != 1 || r != truth.len() {
        return Err(Error::Shape(format!("predictions [{r}, {c}] vs {} truths", truth.len())));
    }
    let y = t.constant(Array::from_vec(r, 1, truth.to_vec())?);
    let e = t.sub(pred, y)?;
    let a = t.abs(e);
    Ok(t.sum(a))
}

/// Value-level `Σ |ŷ − y|`.
pub fn regression_loss_values(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions vs {} truths", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum())
}

/// `L_reg + α Σ_l L_load^(l)`.
pub fn total_loss(t: &mut Tape, l_reg: Var, load: &[Var], alpha: f64) -> Result<Var> {
    let mut acc = l_reg;
    for &l in load {
        let s = t.scale(l, alpha);
        acc = t.add(acc, s)?;
    }
    Ok(acc)
}

/// Trips grouped by start step, groups split into chunks of at most
/// `max_batch` and shuffled by `seed`. Returns indices into `trips`.
pub fn time_specific_batches(trips: &[TripRecord], seed: u64, max_batch: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in trips.iter().enumerate() {
        groups.entry(t.start_step).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = groups
        .into_values()
        .flat_map(|g| g.chunks(max_batch.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches
}

/// Days `s − delay, s − 7, …, s − 7F` (the first only once if it coincides).
pub fn replay_days(s: i64, delay: i64, f: usize) -> Result<Vec<i64>> {
    if !(0..7).contains(&delay) {
        return Err(Error::InvalidArgument(format!("preprocessing delay {delay} must be in 0..7")));
    }
    let mut days = vec![s - delay];
    days.extend((1..=f as i64).map(|w| s - 7 * w).filter(|&d| d != s - delay));
    Ok(days)
}

/// `D_{s−delay} ∪ D_{s−7} ∪ … ∪ D_{s−7F}` from a buffer of daily trip sets.
pub fn daily_replay_dataset(
    s: i64,
    buffer: &BTreeMap<i64, Vec<TripRecord>>,
    delay: i64,
    f: usize,
) -> Result<Vec<TripRecord>> {
    let mut out = Vec::new();
    for d in replay_days(s, delay, f)? {
        out.extend(buffer.get(&d).ok_or(Error::MissingDay(d))?.iter().cloned());
    }
    Ok(out)
}

/// Static inputs shared by training and evaluation.
pub struct TrainData<'a> {
    pub net: &'a TrafficNetwork,
    pub traffic: &'a TrafficSliceTensor,
    pub history: &'a LinkHistory,
    pub ctx: &'a LinkContext,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mae: f64,
    pub mean_load_loss: f64,
    pub batches: usize,
    pub link_forward_calls: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Scalars the optimizer was allowed to update.
    pub trainable_params: usize,
}

struct AdamW {
    m: HashMap<usize, Array>,
    v: HashMap<usize, Array>,
    step: i32,
}

impl AdamW {
    fn new() -> Self {
        Self {
            m: HashMap::new(),
            v: HashMap::new(),
            step: 0,
        }
    }

    fn update(&mut self, store: &mut ParamStore, grads: &mut Gradients, vars: &[Var], mask: TrainMask, scale: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !mask.selects(store.side(id)) {
                continue;
            }
            let Some(g) = grads.take(vars[id.index()]) else {
                continue;
            };
            let i = id.index();
            let p = store.value_mut(id);
            let m = self.m.entry(i).or_insert_with(|| Array::zeros(p.rows(), p.cols()));
            let v = self.v.entry(i).or_insert_with(|| Array::zeros(p.rows(), p.cols()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                let gj = gj * scale;
                md[j] = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * gj;
                vd[j] = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * pd[j]);
            }
        }
    }
}

/// Trains `model` on `trips` for the configured epochs, updating only the
/// arrays selected by `mask`. Each batch holds trips of one start step, so
/// the link encoder runs once per batch. Gradients are scaled by the batch
/// size before the optimizer step.
pub fn train(
    model: &mut MixTte,
    trips: &[TripRecord],
    data: &TrainData,
    cfg: &TrainConfig,
    mask: TrainMask,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog {
        epochs: Vec::new(),
        trainable_params: model.store.count(mask),
    };
    if mask == TrainMask::None || trips.is_empty() {
        return Ok(log);
    }
    let link_trainable = mask.selects(crate::params::Side::Link);
    let mut opt = AdamW::new();
    for epoch in 0..cfg.epochs {
        let batches = time_specific_batches(trips, cfg.seed.wrapping_add(epoch as u64), cfg.max_batch);
        let (mut abs_err, mut count, mut load_sum, mut calls) = (0.0, 0usize, 0.0, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let batch_trips: Vec<&TripRecord> = idx.iter().map(|&i| &trips[i]).collect();
            let step = batch_trips[0].start_step;
            let batch = build_batch(data.net, data.traffic, data.history, &data.ctx.hot, &batch_trips)?;
            let truth: Vec<f64> = batch_trips.iter().map(|t| t.true_duration).collect();

            let tape_seed = cfg.seed ^ ((epoch as u64) << 48) ^ bi as u64;
            let mut t = Tape::training(tape_seed);
            let b = model.store.bind(&mut t);
            let x = model.link_input(data.traffic, data.ctx, step)?;
            let (emb, load) = if link_trainable {
                let x = t.constant(x);
                let lf = model.link_forward(&mut t, &b, x, &data.ctx.adjm)?;
                (lf.emb, lf.load_losses)
            } else {
                let mut nt = Tape::no_grad();
                let nb = model.store.bind(&mut nt);
                let xv = nt.constant(x);
                let lf = model.link_forward(&mut nt, &nb, xv, &data.ctx.adjm)?;
                (t.constant(nt.value(lf.emb).clone()), Vec::new())
            };
            calls += 1;
            let pred = predict_batch(&mut t, &batch, Some(emb), &model.route, &b, cfg.dropout)?;
            let l_reg = regression_loss(&mut t, pred, &truth)?;
            let loss = total_loss(&mut t, l_reg, &load, cfg.load_loss_weight)?;
            abs_err += t.value(l_reg).item();
            count += truth.len();
            load_sum += load.iter().map(|&l| t.value(l).item()).sum::<f64>();
            let mut grads = t.backward(loss);
            let scale = 1.0 / truth.len() as f64;
            let vars = b.vars().to_vec();
            drop(t);
            opt.update(&mut model.store, &mut grads, &vars, mask, scale, cfg);
        }
        log.epochs.push(EpochLog {
            epoch,
            mae: abs_err / count.max(1) as f64,
            mean_load_loss: load_sum / batches.len().max(1) as f64,
            batches: batches.len(),
            link_forward_calls: calls,
        });
    }
    Ok(log)
}

/// Evaluation-mode predictions for `trips`, grouped by start step so each
/// step's embeddings are computed once. Output order matches `trips`.
pub fn predict_trips(model: &MixTte, trips: &[TripRecord], data: &TrainData) -> Result<Vec<f64>> {
    let mut out = vec![0.0; trips.len()];
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in trips.iter().enumerate() {
        groups.entry(t.start_step).or_default().push(i);
    }
    for (step, idx) in groups {
        let (emb, _) = model.embed(data.traffic, data.ctx, step)?;
        for chunk in idx.chunks(256) {
            let refs: Vec<&TripRecord> = chunk.iter().map(|&i| &trips[i]).collect();
            let batch = build_batch(data.net, data.traffic, data.history, &data.ctx.hot, &refs)?;
            let y = model.predict_with_embeddings(&batch, Some(&emb))?;
            for (&i, v) in chunk.iter().zip(y) {
                out[i] = v;
            }
        }
    }
    Ok(out)
}
