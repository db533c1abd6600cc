//! Drift-gated incremental learning: per-(link, step-of-day) embedding
//! statistics from a frozen shadow encoder, Mahalanobis anomaly detection,
//! quantile-thresholded update decisions and side-selective hourly updates.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::Array;
use crate::error::{Error, Result};
use crate::model::{LinkContext, MixTte};
use crate::network::LinkId;
use crate::params::TrainMask;
use crate::trafficgen::{TrafficSliceTensor, TripRecord, STEPS_PER_DAY};
use crate::trainer::{train, TrainConfig, TrainData, TrainLog};

const STATS_MAGIC: &[u8; 4] = b"MXDS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    /// Samples kept per (link, step-of-day), one per day.
    pub samples: usize,
    /// Variance floor.
    pub eps: f64,
    /// Threshold on the per-dimension distance `d / sqrt(D)`.
    pub delta_d_link: f64,
    pub delta_l: f64,
    pub delta_r: f64,
    /// Rolling history of hourly proportions.
    pub window: usize,
    /// Decisions that are forced to `NoUpdate` while the history fills.
    pub bootstrap: usize,
    /// Samples a (link, step) needs before it counts as covered.
    pub min_samples: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            samples: 4,
            eps: 1e-4,
            delta_d_link: 3.0,
            delta_l: 0.75,
            delta_r: 0.9,
            window: 168,
            bootstrap: 24,
            min_samples: 3,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || !(self.eps > 0.0) || !(self.delta_d_link >= 0.0) {
            return Err(Error::Config("drift samples, eps and threshold must be positive".into()));
        }
        if !(0.0 < self.delta_l && self.delta_l < self.delta_r && self.delta_r <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < delta_l ({}) < delta_r ({}) <= 1",
                self.delta_l, self.delta_r
            )));
        }
        if self.window == 0 || self.min_samples == 0 || self.min_samples > self.samples {
            return Err(Error::Config("window and min_samples must be positive, min_samples <= samples".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatEntry {
    pub samples: VecDeque<Vec<f64>>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Sample mean and unbiased per-dimension variance, floored at `eps`.
pub fn mean_var(samples: &VecDeque<Vec<f64>>, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let dim = samples.front().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; dim];
    if n > 1 {
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    }
    var.iter_mut().for_each(|v| *v = v.max(eps));
    (mean, var)
}

/// Rolling embedding statistics, tied to one shadow-encoder version.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkDriftStats {
    version: u64,
    capacity: usize,
    eps: f64,
    entries: BTreeMap<(LinkId, usize), StatEntry>,
}

impl LinkDriftStats {
    pub fn new(version: u64, capacity: usize, eps: f64) -> Self {
        Self {
            version,
            capacity: capacity.max(1),
            eps,
            entries: BTreeMap::new(),
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, link: LinkId, step_of_day: usize) -> Option<&StatEntry> {
        self.entries.get(&(link, step_of_day))
    }

    fn check_version(&self, version: u64) -> Result<()> {
        if version != self.version {
            return Err(Error::ShadowVersionMismatch {
                stats: self.version,
                embeddings: version,
            });
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.entries.values().next().map_or(0, |e| e.mean.len());
        let keys: Vec<(LinkId, usize, usize)> = self
            .entries
            .iter()
            .map(|(&(l, s), e)| (l, s, e.samples.len()))
            .collect();
        let header = serde_json::to_vec(&serde_json::json!({
            "version": self.version,
            "capacity": self.capacity,
            "eps": self.eps,
            "dim": dim,
            "keys": keys,
        }))?;
        w.write_all(STATS_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for e in self.entries.values() {
            for v in e.mean.iter().chain(&e.var).chain(e.samples.iter().flatten()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u64,
            capacity: usize,
            eps: f64,
            dim: usize,
            keys: Vec<(LinkId, usize, usize)>,
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATS_MAGIC {
            return Err(Error::Format("not a drift-stats file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: Header = serde_json::from_slice(&header)?;
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let mut entries = BTreeMap::new();
        for (link, sod, count) in h.keys {
            let mean = read_vec(h.dim)?;
            let var = read_vec(h.dim)?;
            let samples = (0..count).map(|_| read_vec(h.dim)).collect::<Result<VecDeque<_>>>()?;
            entries.insert((link, sod), StatEntry { samples, mean, var });
        }
        Ok(Self {
            version: h.version,
            capacity: h.capacity,
            eps: h.eps,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Adds one sample per link (row `i` of `emb` belongs to `links[i]`) at
/// `step_of_day`, dropping the oldest beyond capacity, and recomputes the
/// statistics. Embeddings must come from the shadow version the statistics
/// were built with.
pub fn update_link_stats(
    stats: &mut LinkDriftStats,
    version: u64,
    links: &[LinkId],
    emb: &Array,
    step_of_day: usize,
) -> Result<()> {
    stats.check_version(version)?;
    if emb.rows() != links.len() {
        return Err(Error::Shape(format!("{} embedding rows for {} links", emb.rows(), links.len())));
    }
    for (i, &link) in links.iter().enumerate() {
        let e = stats.entries.entry((link, step_of_day)).or_insert_with(|| StatEntry {
            samples: VecDeque::new(),
            mean: Vec::new(),
            var: Vec::new(),
        });
        if e.samples.front().is_some_and(|s| s.len() != emb.cols()) {
            return Err(Error::Shape(format!(
                "embedding width {} differs from stored {}",
                emb.cols(),
                e.samples[0].len()
            )));
        }
        e.samples.push_back(emb.row(i).to_vec());
        while e.samples.len() > stats.capacity {
            e.samples.pop_front();
        }
        let (mean, var) = mean_var(&e.samples, stats.eps);
        e.mean = mean;
        e.var = var;
    }
    Ok(())
}

/// `sqrt(Σ_j (h_j − μ_j)² / σ²_j)`.
pub fn mahalanobis(h: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    assert!(h.len() == mu.len() && h.len() == var.len(), "mahalanobis: length mismatch");
    h.iter()
        .zip(mu)
        .zip(var)
        .map(|((x, m), v)| (x - m) * (x - m) / v)
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub anomalous: Vec<LinkId>,
    pub covered: usize,
}

impl Detection {
    pub fn proportion(&self) -> f64 {
        if self.covered == 0 {
            0.0
        } else {
            self.anomalous.len() as f64 / self.covered as f64
        }
    }
}

/// Flags covered links whose per-dimension distance `d / sqrt(D)` exceeds
/// `delta`. Links without at least `min_samples` samples are skipped.
pub fn detect_anomalies(
    stats: &LinkDriftStats,
    version: u64,
    links: &[LinkId],
    emb: &Array,
    step_of_day: usize,
    delta: f64,
    min_samples: usize,
) -> Result<Detection> {
    stats.check_version(version)?;
    if emb.rows() != links.len() {
        return Err(Error::Shape(format!("{} embedding rows for {} links", emb.rows(), links.len())));
    }
    let norm = (emb.cols() as f64).sqrt();
    let mut out = Detection::default();
    for (i, &link) in links.iter().enumerate() {
        let Some(e) = stats.get(link, step_of_day) else { continue };
        if e.samples.len() < min_samples {
            continue;
        }
        out.covered += 1;
        if mahalanobis(emb.row(i), &e.mean, &e.var) / norm > delta {
            out.anomalous.push(link);
        }
    }
    if out.covered == 0 {
        return Err(Error::NoCoveredLinks);
    }
    Ok(out)
}

/// Anomaly proportion pooled over several detections (the steps of an hour).
pub fn pooled_proportion(detections: &[Detection]) -> Result<f64> {
    let covered: usize = detections.iter().map(|d| d.covered).sum();
    if covered == 0 {
        return Err(Error::NoCoveredLinks);
    }
    let hits: usize = detections.iter().map(|d| d.anomalous.len()).sum();
    Ok(hits as f64 / covered as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Decision {
    NoUpdate,
    LinkOnly,
    LinkAndRoute,
}

impl Decision {
    pub fn mask(self) -> TrainMask {
        match self {
            Decision::NoUpdate => TrainMask::None,
            Decision::LinkOnly => TrainMask::Link,
            Decision::LinkAndRoute => TrainMask::All,
        }
    }
}

/// Nearest-rank empirical quantile: the `ceil(q·n)`-th smallest value.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    Some(s[rank - 1])
}

/// Decision for `p` against a fixed history: `(decision, q_l, q_r)`.
pub fn decide_update(p: f64, history: &[f64], delta_l: f64, delta_r: f64) -> (Decision, Option<f64>, Option<f64>) {
    let (Some(ql), Some(qr)) = (
        nearest_rank_quantile(history, delta_l),
        nearest_rank_quantile(history, delta_r),
    ) else {
        return (Decision::NoUpdate, None, None);
    };
    let d = if p <= ql {
        Decision::NoUpdate
    } else if p <= qr {
        Decision::LinkOnly
    } else {
        Decision::LinkAndRoute
    };
    (d, Some(ql), Some(qr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub p_t: f64,
    pub q_l: Option<f64>,
    pub q_r: Option<f64>,
    pub decision: Decision,
}

/// Quantile thresholds over a rolling history of anomaly proportions.
#[derive(Clone, Debug)]
pub struct UpdatePolicy {
    pub delta_l: f64,
    pub delta_r: f64,
    pub window: usize,
    pub bootstrap: usize,
    history: VecDeque<f64>,
}

impl UpdatePolicy {
    pub fn new(cfg: &DriftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            delta_l: cfg.delta_l,
            delta_r: cfg.delta_r,
            window: cfg.window,
            bootstrap: cfg.bootstrap,
            history: VecDeque::new(),
        })
    }

    pub fn history(&self) -> Vec<f64> {
        self.history.iter().copied().collect()
    }

    /// Decides for `p`, then appends it to the history. Until `bootstrap`
    /// proportions have been seen the decision is always `NoUpdate`.
    pub fn decide(&mut self, p: f64) -> DecisionRecord {
        let hist: Vec<f64> = self.history.iter().copied().collect();
        let (mut decision, q_l, q_r) = decide_update(p, &hist, self.delta_l, self.delta_r);
        if self.history.len() < self.bootstrap {
            decision = Decision::NoUpdate;
        }
        self.history.push_back(p);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        DecisionRecord { p_t: p, q_l, q_r, decision }
    }
}

/// Frozen copy of the model taken at a daily update; only its link side is
/// used.
#[derive(Clone, Debug)]
pub struct Shadow {
    pub version: u64,
    pub model: MixTte,
}

impl Shadow {
    pub fn new(version: u64, model: &MixTte) -> Self {
        Self {
            version,
            model: model.clone(),
        }
    }

    pub fn embed(&self, traffic: &TrafficSliceTensor, ctx: &LinkContext, step: usize) -> Result<Array> {
        Ok(self.model.embed(traffic, ctx, step)?.0)
    }

    /// Statistics over the `cfg.samples` days before `day`, one sample per
    /// day at every step of the day. Steps without enough lookback are
    /// skipped.
    pub fn build_stats(
        &self,
        traffic: &TrafficSliceTensor,
        ctx: &LinkContext,
        day: usize,
        cfg: &DriftConfig,
    ) -> Result<LinkDriftStats> {
        let mut stats = LinkDriftStats::new(self.version, cfg.samples, cfg.eps);
        let lookback = self.model.cfg.stea.lookback;
        for past in day.saturating_sub(cfg.samples)..day {
            for sod in 0..STEPS_PER_DAY {
                let step = past * STEPS_PER_DAY + sod;
                if step + 1 < lookback || step >= traffic.steps() {
                    continue;
                }
                let emb = self.embed(traffic, ctx, step)?;
                update_link_stats(&mut stats, self.version, ctx.hot.members(), &emb, sod)?;
            }
        }
        Ok(stats)
    }

    /// Detection at one absolute step.
    pub fn detect(
        &self,
        stats: &LinkDriftStats,
        traffic: &TrafficSliceTensor,
        ctx: &LinkContext,
        step: usize,
        cfg: &DriftConfig,
    ) -> Result<Detection> {
        let emb = self.embed(traffic, ctx, step)?;
        detect_anomalies(
            stats,
            self.version,
            ctx.hot.members(),
            &emb,
            step % STEPS_PER_DAY,
            cfg.delta_d_link,
            cfg.min_samples,
        )
    }
}

/// Trips completed within `[from_s, to_s)` seconds.
pub fn completed_between(trips: &[TripRecord], from_s: f64, to_s: f64) -> Vec<TripRecord> {
    trips
        .iter()
        .filter(|t| {
            let e = t.end_time();
            e >= from_s && e < to_s
        })
        .cloned()
        .collect()
}

/// One hourly update on the trips completed in the last hour, with the mask
/// implied by `decision`. Returns `None` when there is nothing to train on.
pub fn incremental_step(
    model: &mut MixTte,
    last_hour: &[TripRecord],
    decision: Decision,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<Option<TrainLog>> {
    if decision == Decision::NoUpdate {
        return Err(Error::InvalidArgument("incremental_step called with NoUpdate".into()));
    }
    if last_hour.is_empty() {
        return Ok(None);
    }
    train(model, last_hour, data, cfg, decision.mask()).map(Some)
}
