//! Experiment orchestration: synthetic benchmark construction, full
//! retraining and ablations, the hourly incremental-learning loop, the
//! serving simulation, expert-assignment reports and run manifests.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asil::{
    completed_between, incremental_step, pooled_proportion, Decision, DriftConfig, Shadow, UpdatePolicy,
};
use crate::error::{Error, Result};
use crate::esgmoe::{export_assignments, record_assignments, RoutingRecord};
use crate::metrics::{compute_metrics, longtail_report, LongtailReport, MetricsReport, StepOfWeekMean};
use crate::model::{Ablation, LinkContext, MixTte, ModelConfig};
use crate::network::{select_from_degrees, threshold_for_fraction, window_degrees, HotLinkSet, LinkId, TrafficNetwork};
use crate::params::TrainMask;
use crate::routemodel::LinkHistory;
use crate::serving::{simulate, ServeData, SimLogEntry};
use crate::trafficgen::{
    generate_network, generate_trips_with, inject_shift, read_trips, simulate_traffic_with, NetworkKind,
    TrafficConfig, TrafficSliceTensor, TripConfig, TripRecord, STEPS_PER_DAY,
};
use crate::trainer::{daily_replay_dataset, predict_trips, train, TrainConfig, TrainData, TrainLog};

const STEPS_PER_HOUR: usize = STEPS_PER_DAY / 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    FullRetrain,
    IlLoop,
    ServeSim,
    Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub network: NetworkKind,
    pub width: usize,
    pub train_days: usize,
    pub test_days: usize,
    pub trips_per_day: usize,
    /// Share of links selected as hot before neighbor expansion.
    pub hot_fraction: f64,
    pub traffic: TrafficConfig,
    pub trips: TripConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            network: NetworkKind::Grid,
            width: 12,
            train_days: 30,
            test_days: 3,
            trips_per_day: 2000,
            hot_fraction: 0.08,
            traffic: TrafficConfig::default(),
            trips: TripConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlConfig {
    pub days: usize,
    /// Days of initial full training before the hourly loop starts.
    pub warmup_days: usize,
    pub shift_day: usize,
    pub shift_hour: usize,
    /// Speed-ratio multiplier inside the shifted region.
    pub shift_severity: f64,
    pub shift_region_links: usize,
    pub inject_shift: bool,
    pub traffic: TrafficConfig,
    pub daily_update: bool,
    pub preprocessing_delay: i64,
    pub replay_weeks: usize,
    /// Train both sides every hour regardless of the drift decision.
    pub always_full_update: bool,
    /// Also track a model that only receives the daily updates.
    pub compare_frozen: bool,
    pub drift: DriftConfig,
}

impl Default for IlConfig {
    fn default() -> Self {
        Self {
            days: 10,
            warmup_days: 4,
            shift_day: 8,
            shift_hour: 8,
            shift_severity: 0.4,
            shift_region_links: 40,
            inject_shift: true,
            traffic: TrafficConfig {
                weekly_pattern: false,
                ..TrafficConfig::quiet()
            },
            daily_update: true,
            preprocessing_delay: 1,
            replay_weeks: 1,
            always_full_update: false,
            compare_frozen: true,
            drift: DriftConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub queries: usize,
    pub refresh_interval: usize,
    /// Parameters to serve; trained from the data config when absent.
    pub checkpoint: Option<PathBuf>,
    /// JSON Lines trip file replacing the default test-trip queries.
    pub queries_file: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            queries: 1000,
            refresh_interval: 1,
            checkpoint: None,
            queries_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: [
                "full",
                "no-external-attention",
                "no-hierarchical-routing",
                "no-moe",
                "no-zero-experts",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub il: IlConfig,
    pub serve: ServeConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::FullRetrain,
            seed: 7,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            il: IlConfig::default(),
            serve: ServeConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.stea.validate()?;
        self.model.effective_moe().validate()?;
        self.train.validate()?;
        self.il.drift.validate()?;
        let d = &self.data;
        if d.train_days == 0 || d.test_days == 0 || d.trips_per_day == 0 {
            return Err(Error::Config("train_days, test_days and trips_per_day must be positive".into()));
        }
        if !(d.hot_fraction > 0.0 && d.hot_fraction <= 1.0) {
            return Err(Error::Config(format!("hot_fraction {} must be in (0, 1]", d.hot_fraction)));
        }
        let il = &self.il;
        if il.warmup_days == 0 || il.warmup_days >= il.days {
            return Err(Error::Config("il warmup_days must be in 1..days".into()));
        }
        if il.inject_shift && (il.shift_day >= il.days || il.shift_hour >= 24) {
            return Err(Error::Config("shift must fall inside the run".into()));
        }
        for v in &self.ablation.variants {
            variant_ablation(v)?;
        }
        Ok(())
    }

    /// Training settings with the experiment seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// Ablation switches for a variant name.
pub fn variant_ablation(name: &str) -> Result<Ablation> {
    let mut a = Ablation::default();
    match name {
        "full" => {}
        "no-external-attention" => a.no_external_attention = true,
        "no-hierarchical-routing" => a.no_hierarchical_routing = true,
        "no-moe" => a.no_moe = true,
        "no-zero-experts" => a.no_zero_experts = true,
        other => return Err(Error::Config(format!("unknown variant {other:?}"))),
    }
    Ok(a)
}

/// Variant name for a set of ablation switches, flags joined by `+`.
pub fn ablation_name(a: &Ablation) -> String {
    let mut parts = Vec::new();
    if a.no_external_attention {
        parts.push("no-external-attention");
    }
    if a.no_hierarchical_routing {
        parts.push("no-hierarchical-routing");
    }
    if a.no_moe {
        parts.push("no-moe");
    }
    if a.no_zero_experts {
        parts.push("no-zero-experts");
    }
    if parts.is_empty() {
        "full".into()
    } else {
        parts.join("+")
    }
}

/// Trips whose start step has a full lookback window.
pub fn with_lookback(trips: &[TripRecord], lookback: usize) -> Vec<TripRecord> {
    trips.iter().filter(|t| t.start_step + 1 >= lookback).cloned().collect()
}

/// Generated world plus the hot links and history derived from its training
/// span.
pub struct Benchmark {
    pub net: TrafficNetwork,
    pub traffic: TrafficSliceTensor,
    pub train: Vec<TripRecord>,
    pub test: Vec<TripRecord>,
    pub ctx: LinkContext,
    pub history: LinkHistory,
    /// Hot degree windows over the training trips.
    pub degree_windows: Vec<Vec<f64>>,
}

impl Benchmark {
    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            net: &self.net,
            traffic: &self.traffic,
            history: &self.history,
            ctx: &self.ctx,
        }
    }

    pub fn serve_data(&self) -> ServeData<'_> {
        ServeData {
            net: &self.net,
            traffic: &self.traffic,
            history: &self.history,
            ctx: &self.ctx,
        }
    }
}

fn hot_links(net: &TrafficNetwork, trips: &[TripRecord], traffic: &TrafficSliceTensor, fraction: f64) -> (HotLinkSet, Vec<Vec<f64>>) {
    let windows = window_degrees(net, trips, traffic);
    let th = threshold_for_fraction(&windows, net.n_links(), fraction);
    (select_from_degrees(net, &windows, th), windows)
}

fn assemble(
    cfg: &ExperimentConfig,
    net: TrafficNetwork,
    traffic: TrafficSliceTensor,
    trips: Vec<TripRecord>,
    train_days: usize,
) -> Result<Benchmark> {
    let (train, test): (Vec<_>, Vec<_>) = trips.into_iter().partition(|t| t.day() < train_days);
    let train = with_lookback(&train, cfg.model.stea.lookback);
    let (hot, windows) = hot_links(&net, &train, &traffic, cfg.data.hot_fraction);
    let ctx = LinkContext::new(&net, hot, cfg.model.moe.m)?;
    let history = LinkHistory::new(&net, &traffic);
    Ok(Benchmark {
        net,
        traffic,
        train,
        test,
        ctx,
        history,
        degree_windows: windows,
    })
}

/// The train/test benchmark of the data config.
pub fn build_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    let d = &cfg.data;
    let net = generate_network(d.network, d.width, cfg.seed)?;
    let traffic = simulate_traffic_with(&net, d.train_days + d.test_days, cfg.seed, &d.traffic)?;
    let trips = generate_trips_with(&net, &traffic, d.trips_per_day, cfg.seed, &d.trips)?;
    assemble(cfg, net, traffic, trips, d.train_days)
}

/// Writes the network, traffic tensor, trips and hot links into `dir`.
pub fn write_benchmark(bench: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    bench.net.write_csv(dir)?;
    bench.traffic.save(&dir.join("traffic.mxtt"))?;
    crate::trafficgen::write_trips(&dir.join("trips_train.jsonl"), &bench.train)?;
    crate::trafficgen::write_trips(&dir.join("trips_test.jsonl"), &bench.test)?;
    bench.ctx.hot.write(&dir.join("hot_links.txt"))
}

/// Breadth-first ball of `size` links around `center`, following links in
/// both directions.
pub fn link_region(net: &TrafficNetwork, center: LinkId, size: usize) -> Vec<LinkId> {
    let mut seen = vec![false; net.n_links()];
    let mut queue = std::collections::VecDeque::from([center]);
    seen[center] = true;
    let mut out = Vec::new();
    while let Some(l) = queue.pop_front() {
        if out.len() >= size {
            break;
        }
        out.push(l);
        for &nb in net.successors(l).iter().chain(net.predecessors(l)) {
            if !seen[nb] {
                seen[nb] = true;
                queue.push_back(nb);
            }
        }
    }
    out.sort_unstable();
    out
}

/// World for the incremental-learning loop: `il.days` of traffic with an
/// optional shift around the hottest warmup link. The training span is the
/// warmup; every later trip is in `test`.
pub fn build_il_benchmark(cfg: &ExperimentConfig) -> Result<(Benchmark, Option<usize>)> {
    let il = &cfg.il;
    let net = generate_network(cfg.data.network, cfg.data.width, cfg.seed)?;
    let mut traffic = simulate_traffic_with(&net, il.days, cfg.seed, &il.traffic)?;
    let mut shift_step = None;
    if il.inject_shift {
        let base_trips = generate_trips_with(&net, &traffic, cfg.data.trips_per_day, cfg.seed, &cfg.data.trips)?;
        let warm: Vec<TripRecord> = base_trips.into_iter().filter(|t| t.day() < il.warmup_days).collect();
        let (hot, _) = hot_links(&net, &warm, &traffic, cfg.data.hot_fraction);
        let deg = hot.hot_degree();
        let center = (0..net.n_links())
            .max_by(|&a, &b| deg[a].total_cmp(&deg[b]).then(b.cmp(&a)))
            .ok_or(Error::EmptyGraph)?;
        let region = link_region(&net, center, il.shift_region_links);
        let step = il.shift_day * STEPS_PER_DAY + il.shift_hour * STEPS_PER_HOUR;
        traffic = inject_shift(&net, &traffic, step, &region, il.shift_severity)?;
        shift_step = Some(step);
    }
    let trips = generate_trips_with(&net, &traffic, cfg.data.trips_per_day, cfg.seed, &cfg.data.trips)?;
    Ok((assemble(cfg, net, traffic, trips, il.warmup_days)?, shift_step))
}

pub fn train_variant(bench: &Benchmark, cfg: &ExperimentConfig, ablation: Ablation) -> Result<(MixTte, TrainLog)> {
    let mut mc = cfg.model.clone();
    mc.ablation = ablation;
    let mut model = MixTte::new(mc, cfg.seed)?;
    let log = train(&mut model, &bench.train, &bench.data(), &cfg.train_config(), TrainMask::All)?;
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub metrics: MetricsReport,
    pub train_log: TrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub seed: u64,
    pub train_trips: usize,
    pub test_trips: usize,
    pub hot_links: usize,
    pub baseline: MetricsReport,
    pub variants: Vec<VariantResult>,
}

impl RetrainReport {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Trains each named variant on the benchmark, evaluates it and the
/// historical-average baseline on the test trips and writes the reports
/// into `dir`.
pub fn run_retrain(cfg: &ExperimentConfig, variants: &[String], dir: &Path) -> Result<RetrainReport> {
    fs::create_dir_all(dir)?;
    let bench = build_benchmark(cfg)?;
    let truths: Vec<f64> = bench.test.iter().map(|t| t.true_duration).collect();
    let baseline_preds: Vec<f64> = bench.test.iter().map(|t| bench.history.route_estimate(t)).collect();
    let baseline = compute_metrics(&baseline_preds, &truths)?;
    let hist_mean = StepOfWeekMean::new(&bench.traffic, cfg.data.train_days * STEPS_PER_DAY);

    let mut results = Vec::new();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let mut longtail: Vec<(String, LongtailReport)> = Vec::new();
    for name in variants {
        let ablation = variant_ablation(name)?;
        let (model, log) = train_variant(&bench, cfg, ablation)?;
        let preds = predict_trips(&model, &bench.test, &bench.data())?;
        let metrics = compute_metrics(&preds, &truths)?;
        let meta = serde_json::json!({
            "variant": name,
            "model": model.cfg,
            "seed": cfg.seed,
            "train_days": [0, cfg.data.train_days],
        });
        model.store.save_checkpoint(&dir.join(format!("checkpoint_{name}.mxck")), &meta)?;
        longtail.push((
            name.clone(),
            longtail_report(&bench.net, &bench.traffic, &hist_mean, &bench.test, &baseline_preds, &preds)?,
        ));
        columns.push((name.clone(), preds));
        results.push(VariantResult {
            name: name.clone(),
            metrics,
            train_log: log,
        });
    }
    let report = RetrainReport {
        seed: cfg.seed,
        train_trips: bench.train.len(),
        test_trips: bench.test.len(),
        hot_links: bench.ctx.hot.len(),
        baseline,
        variants: results,
    };
    write_json(&dir.join("metrics.json"), &report)?;

    let mut w = csv::Writer::from_path(dir.join("predictions.csv")).map_err(csv_err)?;
    let mut header = vec!["trip".to_string(), "start_step".into(), "truth".into(), "baseline".into()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for (i, t) in bench.test.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            t.start_step.to_string(),
            t.true_duration.to_string(),
            baseline_preds[i].to_string(),
        ];
        row.extend(columns.iter().map(|(_, p)| p[i].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("longtail.csv")).map_err(csv_err)?;
    w.write_record(["metric", "variant", "bin", "lo", "hi", "count", "mae_baseline", "mae_variant", "gain"])
        .map_err(csv_err)?;
    for (name, lt) in &longtail {
        for (metric, bins) in [("cdd", &lt.cdd), ("nrd", &lt.nrd)] {
            for (k, b) in bins.iter().enumerate() {
                w.write_record([
                    metric.to_string(),
                    name.clone(),
                    k.to_string(),
                    b.lo.to_string(),
                    b.hi.to_string(),
                    b.count.to_string(),
                    b.mae_a.to_string(),
                    b.mae_b.to_string(),
                    b.gain.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlHourLog {
    pub hour: usize,
    /// Step at which the decision is taken (end of the hour).
    pub step: usize,
    pub p_t: f64,
    pub q_l: Option<f64>,
    pub q_r: Option<f64>,
    pub decision: Decision,
    pub applied: TrainMask,
    pub trips_trained: usize,
    pub trainable_params: usize,
    pub next_hour_trips: usize,
    pub mae: Option<f64>,
    pub mae_frozen: Option<f64>,
    pub post_shift: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IlSummary {
    pub hours: usize,
    pub shift_hour: Option<usize>,
    pub pre_shift_hours: usize,
    pub pre_shift_no_update: usize,
    pub first_update_after_shift: Option<usize>,
    pub link_only: usize,
    pub link_and_route: usize,
    pub updates_applied: usize,
    pub trainable_params_total: usize,
    /// Post-shift hours where the updated model beats the daily-only model.
    pub post_shift_wins: usize,
    pub post_shift_compared: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlOutcome {
    pub hours: Vec<IlHourLog>,
    pub summary: IlSummary,
}

fn mae_of(model: &MixTte, trips: &[TripRecord], data: &TrainData) -> Result<Option<f64>> {
    if trips.is_empty() {
        return Ok(None);
    }
    let preds = predict_trips(model, trips, data)?;
    let truths: Vec<f64> = trips.iter().map(|t| t.true_duration).collect();
    Ok(Some(compute_metrics(&preds, &truths)?.mae))
}

fn daily_update(model: &mut MixTte, buffer: &BTreeMap<i64, Vec<TripRecord>>, day: usize, data: &TrainData, cfg: &ExperimentConfig) -> Result<()> {
    let il = &cfg.il;
    let s = day as i64;
    let weeks = (0..=il.replay_weeks).rev().find(|&w| s - 7 * w as i64 >= 0).unwrap_or(0);
    let set = daily_replay_dataset(s, buffer, il.preprocessing_delay, weeks)?;
    let set = with_lookback(&set, model.cfg.stea.lookback);
    train(model, &set, data, &cfg.train_config(), TrainMask::All)?;
    Ok(())
}

/// Hourly detect → decide → update → evaluate loop after a warmup of full
/// training, with daily updates that also refresh the shadow encoder.
pub fn run_il_loop(cfg: &ExperimentConfig) -> Result<IlOutcome> {
    cfg.validate()?;
    let il = &cfg.il;
    let drift = &il.drift;
    let (bench, shift_step) = build_il_benchmark(cfg)?;
    let data = bench.data();
    let all: Vec<TripRecord> = bench.train.iter().chain(&bench.test).cloned().collect();
    let mut buffer: BTreeMap<i64, Vec<TripRecord>> = BTreeMap::new();
    for d in 0..il.days {
        buffer.insert(d as i64, Vec::new());
    }
    for t in &all {
        buffer.entry(t.day() as i64).or_default().push(t.clone());
    }

    let (mut model, _) = train_variant(&bench, cfg, cfg.model.ablation)?;
    let mut frozen = il.compare_frozen.then(|| model.clone());
    let mut version = 0;
    let mut shadow = Shadow::new(version, &model);
    let mut stats = shadow.build_stats(&bench.traffic, &bench.ctx, il.warmup_days, drift)?;
    let mut policy = UpdatePolicy::new(drift)?;
    let shift_hour = shift_step.map(|s| s / STEPS_PER_HOUR);

    let mut hours = Vec::new();
    for hour in il.warmup_days * 24..il.days * 24 {
        let day = hour / 24;
        if hour % 24 == 0 && day > il.warmup_days && il.daily_update {
            daily_update(&mut model, &buffer, day, &data, cfg)?;
            if let Some(f) = frozen.as_mut() {
                daily_update(f, &buffer, day, &data, cfg)?;
            }
            version += 1;
            shadow = Shadow::new(version, &model);
            stats = shadow.build_stats(&bench.traffic, &bench.ctx, day, drift)?;
        }
        let first = hour * STEPS_PER_HOUR;
        // steps whose statistics are still too thin are left out of the hour
        let detections = (first..first + STEPS_PER_HOUR)
            .filter_map(|s| match shadow.detect(&stats, &bench.traffic, &bench.ctx, s, drift) {
                Err(Error::NoCoveredLinks) => None,
                r => Some(r),
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = policy.decide(pooled_proportion(&detections)?);
        let applied = if il.always_full_update {
            Decision::LinkAndRoute
        } else {
            rec.decision
        };
        let last_hour = completed_between(&all, (hour * 3600) as f64, ((hour + 1) * 3600) as f64);
        let mut trainable = 0;
        let mut trained = 0;
        if applied != Decision::NoUpdate {
            if let Some(log) = incremental_step(&mut model, &last_hour, applied, &data, &cfg.train_config())? {
                trainable = log.trainable_params;
                trained = last_hour.len();
            }
        }
        let next_lo = (hour + 1) * STEPS_PER_HOUR;
        let next: Vec<TripRecord> = all
            .iter()
            .filter(|t| (next_lo..next_lo + STEPS_PER_HOUR).contains(&t.start_step))
            .cloned()
            .collect();
        let mae = mae_of(&model, &next, &data)?;
        let mae_frozen = match &frozen {
            Some(f) => mae_of(f, &next, &data)?,
            None => None,
        };
        hours.push(IlHourLog {
            hour,
            step: first + STEPS_PER_HOUR,
            p_t: rec.p_t,
            q_l: rec.q_l,
            q_r: rec.q_r,
            decision: rec.decision,
            applied: applied.mask(),
            trips_trained: trained,
            trainable_params: trainable,
            next_hour_trips: next.len(),
            mae,
            mae_frozen,
            post_shift: shift_hour.is_some_and(|s| hour >= s),
        });
    }

    let pre: Vec<&IlHourLog> = hours.iter().filter(|h| shift_hour.is_some_and(|s| h.hour < s)).collect();
    let post: Vec<&IlHourLog> = hours.iter().filter(|h| h.post_shift).collect();
    let compared: Vec<&&IlHourLog> = post.iter().filter(|h| h.mae.is_some() && h.mae_frozen.is_some()).collect();
    let summary = IlSummary {
        hours: hours.len(),
        shift_hour,
        pre_shift_hours: pre.len(),
        pre_shift_no_update: pre.iter().filter(|h| h.decision == Decision::NoUpdate).count(),
        first_update_after_shift: post.iter().find(|h| h.decision != Decision::NoUpdate).map(|h| h.hour),
        link_only: hours.iter().filter(|h| h.decision == Decision::LinkOnly).count(),
        link_and_route: hours.iter().filter(|h| h.decision == Decision::LinkAndRoute).count(),
        updates_applied: hours.iter().filter(|h| h.trainable_params > 0).count(),
        trainable_params_total: hours.iter().map(|h| h.trainable_params).sum(),
        post_shift_wins: compared.iter().filter(|h| h.mae < h.mae_frozen).count(),
        post_shift_compared: compared.len(),
    };
    Ok(IlOutcome { hours, summary })
}

pub fn write_il(dir: &Path, outcome: &IlOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("decisions.jsonl"), &outcome.hours)?;
    write_json(&dir.join("il_summary.json"), &outcome.summary)?;
    let mut w = csv::Writer::from_path(dir.join("il_hourly.csv")).map_err(csv_err)?;
    w.write_record(["hour", "p_t", "decision", "trainable_params", "mae", "mae_frozen"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for h in &outcome.hours {
        w.write_record([
            h.hour.to_string(),
            h.p_t.to_string(),
            format!("{:?}", h.decision),
            h.trainable_params.to_string(),
            opt(h.mae),
            opt(h.mae_frozen),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeSummary {
    pub queries: usize,
    pub refreshes: usize,
    pub max_staleness: usize,
    pub refresh_interval: usize,
    pub mean_refresh_latency_us: f64,
    pub mean_query_latency_us: f64,
}

pub fn summarize_serving(log: &[SimLogEntry], interval: usize) -> ServeSummary {
    use crate::serving::EventKind;
    let mean = |k: EventKind| {
        let v: Vec<f64> = log.iter().filter(|e| e.kind == k).map(|e| e.latency_us as f64).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    ServeSummary {
        queries: log.iter().filter(|e| e.kind == EventKind::Query).count(),
        refreshes: log.iter().filter(|e| e.kind == EventKind::Refresh).count(),
        max_staleness: log.iter().filter_map(|e| e.staleness).max().unwrap_or(0),
        refresh_interval: interval,
        mean_refresh_latency_us: mean(EventKind::Refresh),
        mean_query_latency_us: mean(EventKind::Query),
    }
}

/// Model for serving and reports: loaded from `checkpoint` when given,
/// otherwise trained on the benchmark.
pub fn obtain_model(cfg: &ExperimentConfig, bench: &Benchmark, checkpoint: Option<&Path>) -> Result<MixTte> {
    match checkpoint {
        Some(p) => {
            let mut m = MixTte::new(cfg.model.clone(), cfg.seed)?;
            m.store.load_checkpoint(p)?;
            Ok(m)
        }
        None => Ok(train_variant(bench, cfg, cfg.model.ablation)?.0),
    }
}

pub fn run_serve_sim(cfg: &ExperimentConfig, dir: &Path) -> Result<ServeSummary> {
    fs::create_dir_all(dir)?;
    let bench = build_benchmark(cfg)?;
    let model = obtain_model(cfg, &bench, cfg.serve.checkpoint.as_deref())?;
    let queries = match &cfg.serve.queries_file {
        Some(p) => read_trips(p)?,
        None => {
            let mut q = bench.test.clone();
            q.truncate(cfg.serve.queries);
            q
        }
    };
    let log = simulate(&model, &bench.serve_data(), &queries, cfg.serve.refresh_interval)?;
    write_jsonl(&dir.join("serve_log.jsonl"), &log)?;
    let summary = summarize_serving(&log, cfg.serve.refresh_interval);
    write_json(&dir.join("serve_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertUsage {
    pub layer: usize,
    pub expert: usize,
    pub kind: String,
    /// Mean gate weight per (link, step) among recurring pairs.
    pub recurring: f64,
    pub non_recurring: f64,
}

/// Routes every step of `day` through the model, exports one assignment
/// tensor per layer and the per-expert gate mass split by whether the
/// (link, step) deviates from its step-of-week mean beyond the 0.9 quantile.
pub fn experts_report(model: &MixTte, bench: &Benchmark, train_days: usize, day: usize, dir: &Path) -> Result<Vec<ExpertUsage>> {
    fs::create_dir_all(dir)?;
    let layers = model.layers.len();
    let n = bench.ctx.hot.len();
    let mut per_layer: Vec<BTreeMap<usize, RoutingRecord>> = vec![BTreeMap::new(); layers];
    for sod in 0..STEPS_PER_DAY {
        let (_, records) = model.embed(&bench.traffic, &bench.ctx, day * STEPS_PER_DAY + sod)?;
        for (l, r) in records.into_iter().enumerate() {
            per_layer[l].insert(sod, r);
        }
    }
    let hist = StepOfWeekMean::new(&bench.traffic, train_days * STEPS_PER_DAY);
    let mut dev = Vec::with_capacity(STEPS_PER_DAY * n);
    for sod in 0..STEPS_PER_DAY {
        let step = day * STEPS_PER_DAY + sod;
        for &link in bench.ctx.hot.members() {
            let x: Vec<f64> = (0..bench.traffic.channels()).map(|c| bench.traffic.get(step, link, c) as f64).collect();
            let d = hist.get(step, link).map_or(0.0, |m| {
                x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            });
            dev.push(d);
        }
    }
    let cutoff = crate::asil::nearest_rank_quantile(&dev, 0.9).unwrap_or(0.0);
    let mut usage = Vec::new();
    for (l, recs) in per_layer.iter().enumerate() {
        let kinds = model.layers[l].pool.kinds();
        let n_e = kinds.len();
        let tensor = record_assignments(recs, n, n_e)?;
        export_assignments(&dir.join(format!("assignments_layer{l}.mxtt")), &tensor, n, n_e)?;
        let mut rec = vec![0.0; n_e];
        let mut non = vec![0.0; n_e];
        let (mut n_rec, mut n_non) = (0usize, 0usize);
        for sod in 0..STEPS_PER_DAY {
            for i in 0..n {
                let row = &tensor[(sod * n + i) * n_e..(sod * n + i + 1) * n_e];
                let (acc, cnt) = if dev[sod * n + i] > cutoff {
                    (&mut non, &mut n_non)
                } else {
                    (&mut rec, &mut n_rec)
                };
                *cnt += 1;
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
        }
        for e in 0..n_e {
            usage.push(ExpertUsage {
                layer: l,
                expert: e,
                kind: format!("{:?}", kinds[e]).to_lowercase(),
                recurring: rec[e] / n_rec.max(1) as f64,
                non_recurring: non[e] / n_non.max(1) as f64,
            });
        }
    }
    let mut w = csv::Writer::from_path(dir.join("expert_usage.csv")).map_err(csv_err)?;
    for u in &usage {
        w.serialize(u).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(usage)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// `manifest.json` listing the scenario, seed, inputs and the SHA-256 of
/// every other file in `dir`.
pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<()> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                files.insert(rel, sha256_file(&p)?);
            }
        }
    }
    let mut input_hashes = BTreeMap::new();
    for p in inputs {
        input_hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = serde_json::json!({
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "config_sha256": hex::encode(Sha256::digest(cfg.to_toml()?.as_bytes())),
        "inputs": input_hashes,
        "files": files,
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Creates `root/run-<UTC timestamp>[-k]`.
pub fn create_run_dir(root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let mut dir = root.join(format!("run-{stamp}"));
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("run-{stamp}-{k}"));
        k += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

/// Runs the configured scenario inside `dir` and writes its manifest.
pub fn run_in_dir(cfg: &ExperimentConfig, dir: &Path, inputs: &[PathBuf]) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    match cfg.scenario {
        Scenario::FullRetrain => {
            run_retrain(cfg, &[ablation_name(&cfg.model.ablation)], dir)?;
        }
        Scenario::Ablation => {
            let base = ExperimentConfig {
                model: ModelConfig {
                    ablation: Ablation::default(),
                    ..cfg.model.clone()
                },
                ..cfg.clone()
            };
            run_retrain(&base, &cfg.ablation.variants, dir)?;
        }
        Scenario::IlLoop => write_il(dir, &run_il_loop(cfg)?)?,
        Scenario::ServeSim => {
            run_serve_sim(cfg, dir)?;
        }
    }
    write_manifest(dir, cfg, inputs)
}

/// Runs the configured scenario in a fresh timestamped directory under
/// `root` and returns it.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path, inputs: &[PathBuf]) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = create_run_dir(root)?;
    run_in_dir(cfg, &dir, inputs)?;
    Ok(dir)
}
