//! Logical-clock serving simulator: periodic link-embedding refreshes into a
//! snapshot cache, and route-side inference against the latest snapshot.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffmath::Array;
use crate::error::{Error, Result};
use crate::model::{LinkContext, MixTte};
use crate::network::TrafficNetwork;
use crate::routemodel::{build_batch, LinkHistory};
use crate::trafficgen::{TrafficSliceTensor, TripRecord};

/// Embeddings of every hot link from one refresh.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub generation: u64,
    pub valid_at_step: usize,
    pub emb: Array,
}

/// Single-writer, many-reader store of the latest snapshot. Readers clone
/// the `Arc` and keep a consistent table for the whole query.
#[derive(Debug)]
pub struct EmbeddingCache {
    current: RwLock<Option<Arc<Snapshot>>>,
    pub refresh_interval_steps: usize,
}

impl EmbeddingCache {
    pub fn new(refresh_interval_steps: usize) -> Result<Self> {
        if refresh_interval_steps == 0 {
            return Err(Error::InvalidArgument("refresh interval must be at least one step".into()));
        }
        Ok(Self {
            current: RwLock::new(None),
            refresh_interval_steps,
        })
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.current.read().expect("cache lock poisoned").clone()
    }

    fn install(&self, emb: Array, step: usize) -> Arc<Snapshot> {
        let mut cur = self.current.write().expect("cache lock poisoned");
        let generation = cur.as_ref().map_or(0, |s| s.generation + 1);
        let snap = Arc::new(Snapshot {
            generation,
            valid_at_step: step,
            emb,
        });
        *cur = Some(Arc::clone(&snap));
        snap
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshInfo {
    pub generation: u64,
    pub latency_us: u64,
}

/// Full link-side forward over the hot links at `step`, swapped into the
/// cache as a new snapshot.
pub fn refresh_embeddings(
    model: &MixTte,
    traffic: &TrafficSliceTensor,
    ctx: &LinkContext,
    step: usize,
    cache: &EmbeddingCache,
) -> Result<RefreshInfo> {
    let start = Instant::now();
    let (emb, _) = model.embed(traffic, ctx, step)?;
    let latency_us = start.elapsed().as_micros() as u64;
    let snap = cache.install(emb, step);
    Ok(RefreshInfo {
        generation: snap.generation,
        latency_us,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub prediction: f64,
    pub staleness_steps: usize,
    pub generation: u64,
}

/// Static inputs a query needs besides the cache.
pub struct ServeData<'a> {
    pub net: &'a TrafficNetwork,
    pub traffic: &'a TrafficSliceTensor,
    pub history: &'a LinkHistory,
    pub ctx: &'a LinkContext,
}

/// Route-model prediction for `query` using the snapshot current at its
/// start step.
pub fn answer_query(query: &TripRecord, cache: &EmbeddingCache, model: &MixTte, data: &ServeData) -> Result<Answer> {
    let snap = cache.snapshot().ok_or(Error::CacheCold(query.start_step))?;
    if snap.valid_at_step > query.start_step {
        return Err(Error::CacheCold(query.start_step));
    }
    let batch = build_batch(data.net, data.traffic, data.history, &data.ctx.hot, &[query])?;
    let y = model.predict_with_embeddings(&batch, Some(&snap.emb))?;
    Ok(Answer {
        prediction: y[0],
        staleness_steps: query.start_step - snap.valid_at_step,
        generation: snap.generation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Refresh,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimLogEntry {
    pub step: usize,
    pub kind: EventKind,
    pub latency_us: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub staleness: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<f64>,
    pub generation: u64,
}

/// Event queue ordered by step, refreshes before queries at the same step,
/// then by insertion order.
#[derive(Debug, Default)]
pub struct ServeClock {
    events: BTreeMap<(usize, EventKind, usize), ()>,
    seq: usize,
    now: usize,
}

impl ServeClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: usize, kind: EventKind) -> usize {
        let id = self.seq;
        self.seq += 1;
        self.events.insert((step, kind, id), ());
        id
    }

    pub fn now(&self) -> usize {
        self.now
    }

    pub fn pop(&mut self) -> Option<(usize, EventKind, usize)> {
        let (key, ()) = self.events.pop_first()?;
        self.now = key.0;
        Some(key)
    }
}

/// Replays `queries` with refreshes every `interval` steps, starting at the
/// first step with enough lookback at or before the first query. Runs in a
/// single thread, so the log is deterministic apart from latencies.
pub fn simulate(
    model: &MixTte,
    data: &ServeData,
    queries: &[TripRecord],
    interval: usize,
) -> Result<Vec<SimLogEntry>> {
    let cache = EmbeddingCache::new(interval)?;
    let Some(first) = queries.iter().map(|q| q.start_step).min() else {
        return Ok(Vec::new());
    };
    let last = queries.iter().map(|q| q.start_step).max().unwrap_or(first);
    let lookback = model.cfg.stea.lookback;
    let start = first.max(lookback - 1);
    let mut clock = ServeClock::new();
    let mut step = start;
    while step <= last {
        clock.push(step, EventKind::Refresh);
        step += interval;
    }
    let mut query_of = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        let id = clock.push(q.start_step, EventKind::Query);
        query_of.insert(id, i);
    }
    let mut log = Vec::with_capacity(queries.len() + (last - start) / interval + 1);
    while let Some((step, kind, id)) = clock.pop() {
        match kind {
            EventKind::Refresh => {
                let info = refresh_embeddings(model, data.traffic, data.ctx, step, &cache)?;
                log.push(SimLogEntry {
                    step,
                    kind,
                    latency_us: info.latency_us,
                    staleness: None,
                    query: None,
                    prediction: None,
                    generation: info.generation,
                });
            }
            EventKind::Query => {
                let qi = query_of[&id];
                let t0 = Instant::now();
                let a = answer_query(&queries[qi], &cache, model, data)?;
                log.push(SimLogEntry {
                    step,
                    kind,
                    latency_us: t0.elapsed().as_micros() as u64,
                    staleness: Some(a.staleness_steps),
                    query: Some(qi),
                    prediction: Some(a.prediction),
                    generation: a.generation,
                });
            }
        }
    }
    Ok(log)
}
