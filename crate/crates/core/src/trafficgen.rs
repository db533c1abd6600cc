//! Synthetic road networks, link speed process, trips with exact travel times,
//! and distribution-shift injection.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::diffmath::Array;
use crate::error::{Error, Result};
use crate::mxtt;
use crate::network::{LinkAttrs, LinkId, TrafficNetwork};

pub const STEP_SECONDS: f64 = 300.0;
pub const STEPS_PER_DAY: usize = 288;
pub const N_CHANNELS: usize = 4;
pub const CH_RATIO: usize = 0;
pub const CH_CONGESTION: usize = 1;
pub const CH_DENSITY: usize = 2;
pub const CH_NEIGHBOR_DENSITY: usize = 3;
/// Speed ratios never drop below this.
pub const MIN_RATIO: f64 = 0.05;

/// Congestion level from the speed ratio with breakpoints 0.75 / 0.5 / 0.25.
pub fn congestion_level(ratio: f64) -> u8 {
    [0.75, 0.5, 0.25].iter().filter(|&&b| ratio < b).count() as u8
}

/// Link features over time, laid out `[step][link][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSliceTensor {
    steps: usize,
    n_links: usize,
    channels: usize,
    values: Vec<f32>,
}

impl TrafficSliceTensor {
    pub fn new(steps: usize, n_links: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != steps * n_links * channels {
            return Err(Error::Shape(format!(
                "traffic tensor [{steps}, {n_links}, {channels}] with {} values",
                values.len()
            )));
        }
        if channels < 2 {
            return Err(Error::Shape(format!("traffic tensor needs at least 2 channels, got {channels}")));
        }
        Ok(Self {
            steps,
            n_links,
            channels,
            values,
        })
    }

    /// Every link at a constant speed ratio on an isolated graph.
    pub fn filled(steps: usize, n_links: usize, ratio: f64) -> Self {
        let mut t = Self {
            steps,
            n_links,
            channels: N_CHANNELS,
            values: vec![0.0; steps * n_links * N_CHANNELS],
        };
        for s in 0..steps {
            for i in 0..n_links {
                t.set_ratio(s, i, ratio as f32, 1.0 - ratio as f32);
            }
        }
        t
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n_links(&self) -> usize {
        self.n_links
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Whole days covered.
    pub fn days(&self) -> usize {
        self.steps / STEPS_PER_DAY
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn idx(&self, step: usize, link: usize, ch: usize) -> usize {
        (step * self.n_links + link) * self.channels + ch
    }

    pub fn get(&self, step: usize, link: usize, ch: usize) -> f32 {
        self.values[self.idx(step, link, ch)]
    }

    pub fn ratio(&self, step: usize, link: usize) -> f64 {
        self.get(step, link, CH_RATIO) as f64
    }

    /// All channels of one link at one step.
    pub fn features(&self, step: usize, link: usize) -> &[f32] {
        let i = self.idx(step, link, 0);
        &self.values[i..i + self.channels]
    }

    fn set_ratio(&mut self, step: usize, link: usize, ratio: f32, neighbor_density: f32) {
        let i = self.idx(step, link, 0);
        let c = self.channels;
        let v = &mut self.values[i..i + c];
        v[CH_RATIO] = ratio;
        v[CH_CONGESTION] = congestion_level(ratio as f64) as f32;
        if c > CH_DENSITY {
            v[CH_DENSITY] = 1.0 - ratio;
        }
        if c > CH_NEIGHBOR_DENSITY {
            v[CH_NEIGHBOR_DENSITY] = neighbor_density;
        }
    }

    fn refresh_neighbor_density(&mut self, net: &TrafficNetwork, step: usize) {
        if self.channels <= CH_NEIGHBOR_DENSITY {
            return;
        }
        for i in 0..self.n_links {
            let v = neighbor_density(net, i, |j| 1.0 - self.get(step, j, CH_RATIO));
            let k = self.idx(step, i, CH_NEIGHBOR_DENSITY);
            self.values[k] = v;
        }
    }

    /// Encoder input for `links`: one row per link holding the flattened
    /// `[lookback × channels]` window ending at `step`, with the congestion
    /// level scaled to [0, 1].
    pub fn lookback_features(&self, step: usize, lookback: usize, links: &[LinkId]) -> Result<Array> {
        if lookback == 0 || step + 1 < lookback || step >= self.steps {
            return Err(Error::InsufficientLookback { step, lookback });
        }
        let c = self.channels;
        let width = lookback * c;
        let mut data = Vec::with_capacity(links.len() * width);
        for &l in links {
            if l >= self.n_links {
                return Err(Error::UnknownLink(l));
            }
            for s in step + 1 - lookback..=step {
                for (ch, &v) in self.features(s, l).iter().enumerate() {
                    let v = v as f64;
                    data.push(if ch == CH_CONGESTION { v / 3.0 } else { v });
                }
            }
        }
        Array::from_vec(links.len(), width, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        mxtt::save(path, [self.steps, self.n_links, self.channels], &self.values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ([t, n, c], data) = mxtt::load(path)?;
        Self::new(t, n, c, data)
    }
}

fn neighbor_density(net: &TrafficNetwork, i: LinkId, density: impl Fn(LinkId) -> f32) -> f32 {
    let nb = net.successors(i).iter().chain(net.predecessors(i));
    let (sum, count) = nb.fold((0.0f32, 0usize), |(s, k), &j| (s + density(j), k + 1));
    if count == 0 {
        density(i)
    } else {
        sum / count as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Grid,
    Ring,
}

const CLASS_SPEED: [f64; 3] = [10.0, 7.5, 5.5];

/// Deterministic synthetic network. A grid of width `w` has `w × w`
/// intersections and one link per direction of every lattice segment; links
/// connect when the first ends where the second starts, and U-turns are only
/// allowed at intersections with at most two segments. A ring of width `n`
/// is `n` links in one directed cycle.
pub fn generate_network(kind: NetworkKind, width: usize, seed: u64) -> Result<TrafficNetwork> {
    if width < 2 {
        return Err(Error::InvalidArgument(format!("network width must be at least 2, got {width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        NetworkKind::Ring => {
            let attrs = (0..width).map(|_| random_attrs(&mut rng, 1)).collect();
            let edges = (0..width).map(|i| (i, (i + 1) % width)).collect();
            TrafficNetwork::new(attrs, edges)
        }
        NetworkKind::Grid => {
            let node = |r: usize, c: usize| r * width + c;
            let mut segments = Vec::new();
            for r in 0..width {
                for c in 0..width {
                    if c + 1 < width {
                        segments.push((node(r, c), node(r, c + 1), r % 4 == 0));
                    }
                    if r + 1 < width {
                        segments.push((node(r, c), node(r + 1, c), c % 4 == 0));
                    }
                }
            }
            let mut ends = Vec::new();
            let mut attrs = Vec::new();
            for &(a, b, arterial) in &segments {
                let class = if arterial { 0 } else { rng.random_range(1..=2u8) };
                let length = rng.random_range(50.0..=500.0f64);
                let length = (length * 100.0).round() / 100.0;
                for (u, v) in [(a, b), (b, a)] {
                    ends.push((u, v));
                    attrs.push(LinkAttrs {
                        length_m: length,
                        road_class: class,
                        free_flow_speed: CLASS_SPEED[class as usize],
                    });
                }
            }
            let mut degree = vec![0usize; width * width];
            let mut starting_at = vec![Vec::new(); width * width];
            for (l, &(u, _)) in ends.iter().enumerate() {
                degree[u] += 1;
                starting_at[u].push(l);
            }
            let mut edges = Vec::new();
            for (l, &(u, v)) in ends.iter().enumerate() {
                for &m in &starting_at[v] {
                    let (_, w) = ends[m];
                    if w != u || degree[v] <= 2 {
                        edges.push((l, m));
                    }
                }
            }
            TrafficNetwork::new(attrs, edges)
        }
    }
}

fn random_attrs(rng: &mut ChaCha8Rng, class: u8) -> LinkAttrs {
    LinkAttrs {
        length_m: (rng.random_range(50.0..=500.0f64) * 100.0).round() / 100.0,
        road_class: class,
        free_flow_speed: CLASS_SPEED[class as usize],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    /// Stationary standard deviation of the AR(1) log-speed noise.
    pub noise_sigma: f64,
    pub noise_ar: f64,
    /// Expected congestion events per link per day.
    pub event_rate: f64,
    pub event_severity: (f64, f64),
    pub event_duration_steps: (usize, usize),
    pub spread_delay_steps: usize,
    /// Fraction of an event's slowdown felt by 1-hop neighbors.
    pub spread_factor: f64,
    pub rush_depth: f64,
    /// Weekend days get a flatter midday profile instead of rush hours.
    pub weekly_pattern: bool,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            noise_ar: 0.9,
            event_rate: 0.05,
            event_severity: (0.25, 0.6),
            event_duration_steps: (6, 30),
            spread_delay_steps: 2,
            spread_factor: 0.5,
            rush_depth: 0.4,
            weekly_pattern: true,
        }
    }
}

impl TrafficConfig {
    pub fn quiet() -> Self {
        Self {
            noise_sigma: 0.0,
            event_rate: 0.0,
            ..Self::default()
        }
    }
}

struct LinkProfile {
    factor: f64,
    morning: f64,
    evening: f64,
    shift_h: f64,
}

fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp()
}

fn base_ratio(p: &LinkProfile, step: usize, cfg: &TrafficConfig) -> f64 {
    let day = step / STEPS_PER_DAY;
    let h = (step % STEPS_PER_DAY) as f64 * STEP_SECONDS / 3600.0;
    let weekend = cfg.weekly_pattern && day % 7 >= 5;
    let dip = if weekend {
        0.5 * (p.morning + p.evening) * 0.5 * gauss(h, 14.0 + p.shift_h, 2.5)
    } else {
        p.morning * gauss(h, 8.0 + p.shift_h, 0.9) + p.evening * gauss(h, 17.5 + p.shift_h, 1.1)
    };
    p.factor * (1.0 - cfg.rush_depth * dip)
}

pub fn simulate_traffic(net: &TrafficNetwork, days: usize, seed: u64) -> Result<TrafficSliceTensor> {
    simulate_traffic_with(net, days, seed, &TrafficConfig::default())
}

/// Speed ratio = diurnal profile × link factor × AR(1) log-noise × active
/// event multipliers, clamped to `[MIN_RATIO, 1]`.
pub fn simulate_traffic_with(
    net: &TrafficNetwork,
    days: usize,
    seed: u64,
    cfg: &TrafficConfig,
) -> Result<TrafficSliceTensor> {
    if days == 0 {
        return Err(Error::InvalidArgument("days must be at least 1".into()));
    }
    let (lo, hi) = cfg.event_severity;
    let (dmin, dmax) = cfg.event_duration_steps;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) || dmin == 0 || dmin > dmax {
        return Err(Error::Config(format!(
            "event severity {:?} / duration {:?} out of range",
            cfg.event_severity, cfg.event_duration_steps
        )));
    }
    let n = net.n_links();
    let steps = days * STEPS_PER_DAY;

    let mut prof_rng = ChaCha8Rng::seed_from_u64(seed);
    prof_rng.set_stream(0);
    let profiles: Vec<LinkProfile> = net
        .attrs()
        .iter()
        .map(|a| {
            let boost = if a.road_class == 0 { 1.3 } else { 1.0 };
            LinkProfile {
                factor: prof_rng.random_range(0.8..=1.0),
                morning: boost * prof_rng.random_range(0.3..=1.2),
                evening: boost * prof_rng.random_range(0.3..=1.2),
                shift_h: prof_rng.random_range(-0.5..=0.5),
            }
        })
        .collect();

    let mut mult = vec![1.0f64; steps * n];
    if cfg.event_rate > 0.0 {
        let mut ev_rng = ChaCha8Rng::seed_from_u64(seed);
        ev_rng.set_stream(2);
        let pois = Poisson::new(cfg.event_rate).map_err(|e| Error::Config(format!("event rate: {e}")))?;
        for day in 0..days {
            for i in 0..n {
                let k = pois.sample(&mut ev_rng) as usize;
                for _ in 0..k {
                    let start = day * STEPS_PER_DAY + ev_rng.random_range(0..STEPS_PER_DAY);
                    let dur = ev_rng.random_range(dmin..=dmax);
                    let sev = ev_rng.random_range(lo..=hi);
                    let end = (start + dur).min(steps);
                    for t in start..end {
                        mult[t * n + i] *= sev;
                    }
                    let nb_sev = 1.0 - cfg.spread_factor * (1.0 - sev);
                    let nb_start = (start + cfg.spread_delay_steps).min(end);
                    for &j in net.successors(i).iter().chain(net.predecessors(i)) {
                        for t in nb_start..end {
                            mult[t * n + j] *= nb_sev;
                        }
                    }
                }
            }
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let innov = Normal::new(0.0, cfg.noise_sigma * (1.0 - cfg.noise_ar * cfg.noise_ar).max(0.0).sqrt())
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut z = vec![0.0f64; n];
    if cfg.noise_sigma > 0.0 {
        let init = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(format!("noise: {e}")))?;
        z.iter_mut().for_each(|v| *v = init.sample(&mut noise_rng));
    }

    let mut out = TrafficSliceTensor {
        steps,
        n_links: n,
        channels: N_CHANNELS,
        values: vec![0.0; steps * n * N_CHANNELS],
    };
    for t in 0..steps {
        for (i, p) in profiles.iter().enumerate() {
            if cfg.noise_sigma > 0.0 && t > 0 {
                z[i] = cfg.noise_ar * z[i] + innov.sample(&mut noise_rng);
            }
            let r = base_ratio(p, t, cfg) * z[i].exp() * mult[t * n + i];
            out.set_ratio(t, i, r.clamp(MIN_RATIO, 1.0) as f32, 0.0);
        }
        out.refresh_neighbor_density(net, t);
    }
    Ok(out)
}

/// Multiplies speed ratios of `region` by `severity` from `start_step` on and
/// re-derives the dependent channels.
pub fn inject_shift(
    net: &TrafficNetwork,
    traffic: &TrafficSliceTensor,
    start_step: usize,
    region: &[LinkId],
    severity: f64,
) -> Result<TrafficSliceTensor> {
    if region.is_empty() {
        return Err(Error::InvalidArgument("shift region is empty".into()));
    }
    if !(severity > 0.0 && severity < 1.0) {
        return Err(Error::InvalidArgument(format!("shift severity must be in (0, 1), got {severity}")));
    }
    if start_step >= traffic.steps {
        return Err(Error::InvalidArgument(format!(
            "shift start {start_step} outside {} steps",
            traffic.steps
        )));
    }
    if let Some(&bad) = region.iter().find(|&&l| l >= traffic.n_links) {
        return Err(Error::UnknownLink(bad));
    }
    let mut out = traffic.clone();
    for t in start_step..out.steps {
        for &l in region {
            let r = (out.ratio(t, l) * severity).max(MIN_RATIO) as f32;
            out.set_ratio(t, l, r, 0.0);
        }
        out.refresh_neighbor_density(net, t);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub origin: LinkId,
    pub destination: LinkId,
    pub start_step: usize,
    pub route: Vec<LinkId>,
    pub true_duration: f64,
}

impl TripRecord {
    pub fn day(&self) -> usize {
        self.start_step / STEPS_PER_DAY
    }

    /// Completion time in seconds from the start of the simulation.
    pub fn end_time(&self) -> f64 {
        self.start_step as f64 * STEP_SECONDS + self.true_duration
    }
}

/// Result of driving a route through the traffic tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Traversal {
    /// Unrounded total seconds.
    pub seconds: f64,
    /// Step containing the clock when each link is entered.
    pub arrival_steps: Vec<usize>,
}

/// Drives `route` from the start of `start_step`. Each link takes
/// `length / (free_flow_speed × ratio)` with the ratio read at the step that
/// contains the running clock (clamped to the last step).
pub fn traverse(
    net: &TrafficNetwork,
    traffic: &TrafficSliceTensor,
    route: &[LinkId],
    start_step: usize,
) -> Result<Traversal> {
    if route.is_empty() {
        return Err(Error::EmptyRoute);
    }
    let mut clock = start_step as f64 * STEP_SECONDS;
    let mut total = 0.0;
    let mut arrival_steps = Vec::with_capacity(route.len());
    for &l in route {
        let a = net.link(l)?;
        let step = ((clock / STEP_SECONDS).floor() as usize).min(traffic.steps - 1);
        arrival_steps.push(step);
        let dt = a.length_m / (a.free_flow_speed * traffic.ratio(step, l));
        total += dt;
        clock += dt;
    }
    Ok(Traversal {
        seconds: total,
        arrival_steps,
    })
}

pub fn round_centis(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripConfig {
    /// Routes shorter than this many links are resampled.
    pub min_route_links: usize,
    /// Log-normal sigma of per-link population weights.
    pub population_sigma: f64,
}

impl Default for TripConfig {
    fn default() -> Self {
        Self {
            min_route_links: 10,
            population_sigma: 0.8,
        }
    }
}

pub fn generate_trips(
    net: &TrafficNetwork,
    traffic: &TrafficSliceTensor,
    trips_per_day: usize,
    seed: u64,
) -> Result<Vec<TripRecord>> {
    generate_trips_with(net, traffic, trips_per_day, seed, &TripConfig::default())
}

/// Trips for every whole day of `traffic`, sorted by start step. Origins and
/// destinations are drawn from population weights, start steps from a
/// diurnal demand curve, and routes are free-flow shortest paths.
pub fn generate_trips_with(
    net: &TrafficNetwork,
    traffic: &TrafficSliceTensor,
    trips_per_day: usize,
    seed: u64,
    cfg: &TripConfig,
) -> Result<Vec<TripRecord>> {
    let days = traffic.days();
    if days == 0 {
        return Err(Error::InvalidArgument("traffic covers no whole day".into()));
    }
    if net.n_links() != traffic.n_links() {
        return Err(Error::Shape(format!(
            "network has {} links, traffic {}",
            net.n_links(),
            traffic.n_links()
        )));
    }
    if net.n_links() < 2 {
        return Err(Error::InvalidArgument("need at least two links for trips".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pop = LogNormal::new(0.0, cfg.population_sigma).map_err(|e| Error::Config(format!("population: {e}")))?;
    let weights: Vec<f64> = (0..net.n_links()).map(|_| pop.sample(&mut rng)).collect();
    let od = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("population: {e}")))?;
    let demand: Vec<f64> = (0..STEPS_PER_DAY)
        .map(|s| {
            let h = s as f64 * STEP_SECONDS / 3600.0;
            0.15 + gauss(h, 8.0, 1.2) + 0.9 * gauss(h, 17.5, 1.5) + 0.5 * gauss(h, 13.0, 3.0)
        })
        .collect();
    let when = WeightedIndex::new(&demand).map_err(|e| Error::Config(format!("demand: {e}")))?;

    let mut trees: HashMap<LinkId, Vec<Option<LinkId>>> = HashMap::new();
    let mut trips = Vec::with_capacity(days * trips_per_day);
    let max_attempts = 1000 * trips_per_day.max(1);
    for day in 0..days {
        let mut day_trips = Vec::with_capacity(trips_per_day);
        let mut attempts = 0;
        while day_trips.len() < trips_per_day {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::InvalidArgument(format!(
                    "could not sample {trips_per_day} reachable trips of at least {} links",
                    cfg.min_route_links
                )));
            }
            let o = od.sample(&mut rng);
            let d = od.sample(&mut rng);
            let start_step = day * STEPS_PER_DAY + when.sample(&mut rng);
            if o == d {
                continue;
            }
            let parent = trees.entry(o).or_insert_with(|| shortest_path_tree(net, o));
            let Some(route) = path_to(parent, o, d) else {
                continue;
            };
            if route.len() < cfg.min_route_links {
                continue;
            }
            let tr = traverse(net, traffic, &route, start_step)?;
            day_trips.push(TripRecord {
                origin: o,
                destination: d,
                start_step,
                route,
                true_duration: round_centis(tr.seconds),
            });
        }
        day_trips.sort_by_key(|t| t.start_step);
        trips.extend(day_trips);
    }
    Ok(trips)
}

#[derive(PartialEq)]
struct HeapEntry(f64, LinkId);

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over links where entering a link costs its free-flow time.
fn shortest_path_tree(net: &TrafficNetwork, origin: LinkId) -> Vec<Option<LinkId>> {
    let n = net.n_links();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[origin] = net.attrs()[origin].free_flow_time();
    heap.push(HeapEntry(dist[origin], origin));
    while let Some(HeapEntry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &v in net.successors(u) {
            let nd = d + net.attrs()[v].free_flow_time();
            if nd < dist[v] {
                dist[v] = nd;
                parent[v] = Some(u);
                heap.push(HeapEntry(nd, v));
            }
        }
    }
    parent
}

fn path_to(parent: &[Option<LinkId>], origin: LinkId, dest: LinkId) -> Option<Vec<LinkId>> {
    let mut path = vec![dest];
    let mut cur = dest;
    while cur != origin {
        cur = parent[cur]?;
        path.push(cur);
    }
    path.reverse();
    Some(path)
}

pub fn write_trips(path: &Path, trips: &[TripRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trips {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trips(path: &Path) -> Result<Vec<TripRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
