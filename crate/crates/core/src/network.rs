//! Road-network graph, adjacency normalization and hot-link selection.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, Csr};
use crate::error::{Error, Result};
use crate::trafficgen::{TrafficSliceTensor, TripRecord, CH_CONGESTION, STEPS_PER_DAY};

pub type LinkId = usize;

/// Entries smaller than this are dropped while powering the adjacency.
pub const POWER_DROP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkAttrs {
    pub length_m: f64,
    pub road_class: u8,
    pub free_flow_speed: f64,
}

impl LinkAttrs {
    pub fn free_flow_time(&self) -> f64 {
        self.length_m / self.free_flow_speed
    }
}

/// Directed graph whose nodes are road links; an edge `a -> b` means traffic
/// leaving `a` can enter `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficNetwork {
    attrs: Vec<LinkAttrs>,
    edges: Vec<(LinkId, LinkId)>,
    out_adj: Vec<Vec<LinkId>>,
    in_adj: Vec<Vec<LinkId>>,
}

impl TrafficNetwork {
    pub fn new(attrs: Vec<LinkAttrs>, edges: Vec<(LinkId, LinkId)>) -> Result<Self> {
        let n = attrs.len();
        for (i, a) in attrs.iter().enumerate() {
            if !(a.length_m > 0.0 && a.length_m.is_finite()) {
                return Err(Error::InvalidNetwork(format!("link {i} has length {}", a.length_m)));
            }
            if !(a.free_flow_speed > 0.0 && a.free_flow_speed.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "link {i} has free-flow speed {}",
                    a.free_flow_speed
                )));
            }
        }
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for &(s, d) in &edges {
            if s >= n || d >= n {
                return Err(Error::InvalidNetwork(format!("edge ({s}, {d}) references a missing link")));
            }
            if s == d {
                return Err(Error::InvalidNetwork(format!("self-edge on link {s}")));
            }
            if !seen.insert((s, d)) {
                return Err(Error::InvalidNetwork(format!("duplicate edge ({s}, {d})")));
            }
            out_adj[s].push(d);
            in_adj[d].push(s);
        }
        Ok(Self {
            attrs,
            edges,
            out_adj,
            in_adj,
        })
    }

    pub fn n_links(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn attrs(&self) -> &[LinkAttrs] {
        &self.attrs
    }

    pub fn link(&self, id: LinkId) -> Result<&LinkAttrs> {
        self.attrs.get(id).ok_or(Error::UnknownLink(id))
    }

    pub fn edges(&self) -> &[(LinkId, LinkId)] {
        &self.edges
    }

    pub fn successors(&self, id: LinkId) -> &[LinkId] {
        &self.out_adj[id]
    }

    pub fn predecessors(&self, id: LinkId) -> &[LinkId] {
        &self.in_adj[id]
    }

    pub fn has_edge(&self, s: LinkId, d: LinkId) -> bool {
        self.out_adj.get(s).is_some_and(|o| o.contains(&d))
    }

    /// Writes `links.csv` and `edges.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("links.csv")).map_err(csv_err)?;
        w.write_record(["link_id", "length_m", "road_class", "free_flow_speed"])
            .map_err(csv_err)?;
        for (i, a) in self.attrs.iter().enumerate() {
            w.write_record([
                i.to_string(),
                a.length_m.to_string(),
                a.road_class.to_string(),
                a.free_flow_speed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("edges.csv")).map_err(csv_err)?;
        w.write_record(["src", "dst"]).map_err(csv_err)?;
        for &(s, d) in &self.edges {
            w.write_record([s.to_string(), d.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct LinkRow {
            link_id: usize,
            length_m: f64,
            road_class: u8,
            free_flow_speed: f64,
        }
        #[derive(Deserialize)]
        struct EdgeRow {
            src: usize,
            dst: usize,
        }
        let mut r = csv::Reader::from_path(dir.join("links.csv")).map_err(csv_err)?;
        let mut attrs = Vec::new();
        for (i, row) in r.deserialize::<LinkRow>().enumerate() {
            let row = row.map_err(csv_err)?;
            if row.link_id != i {
                return Err(Error::Format(format!("links.csv: expected link_id {i}, found {}", row.link_id)));
            }
            attrs.push(LinkAttrs {
                length_m: row.length_m,
                road_class: row.road_class,
                free_flow_speed: row.free_flow_speed,
            });
        }
        let mut r = csv::Reader::from_path(dir.join("edges.csv")).map_err(csv_err)?;
        let mut edges = Vec::new();
        for row in r.deserialize::<EdgeRow>() {
            let row = row.map_err(csv_err)?;
            edges.push((row.src, row.dst));
        }
        Self::new(attrs, edges)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Row-stochastic sparse adjacency together with the power it represents.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: Arc<Csr>,
    power_order: usize,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Arc<Csr> {
        &self.matrix
    }

    pub fn power_order(&self) -> usize {
        self.power_order
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn to_dense(&self) -> Array {
        self.matrix.to_dense()
    }

    /// Restricts to the induced subgraph on `keep` and renormalizes rows.
    pub fn induced(&self, keep: &[LinkId]) -> NormalizedAdjacency {
        let mut m = self.matrix.submatrix(keep);
        m.renormalize_rows();
        NormalizedAdjacency {
            matrix: Arc::new(m),
            power_order: self.power_order,
        }
    }
}

/// Â = D⁻¹(A + I) with D the out-degree-plus-one diagonal.
pub fn normalize_adjacency(net: &TrafficNetwork) -> Result<NormalizedAdjacency> {
    if net.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let rows = (0..net.n_links())
        .map(|i| {
            let succ = net.successors(i);
            let w = 1.0 / (succ.len() + 1) as f64;
            let mut row: Vec<(usize, f64)> = succ.iter().map(|&j| (j, w)).collect();
            row.push((i, w));
            row
        })
        .collect();
    Ok(NormalizedAdjacency {
        matrix: Arc::new(Csr::from_row_lists(net.n_links(), rows)?),
        power_order: 1,
    })
}

/// Â^m by repeated sparse products, dropping entries below 1e-12 and
/// renormalizing rows.
pub fn adjacency_power(adj: &NormalizedAdjacency, m: usize) -> Result<NormalizedAdjacency> {
    adjacency_power_with(adj, m, POWER_DROP)
}

/// [`adjacency_power`] with an explicit drop threshold; `0.0` keeps every entry.
pub fn adjacency_power_with(adj: &NormalizedAdjacency, m: usize, drop_below: f64) -> Result<NormalizedAdjacency> {
    if m == 0 {
        return Err(Error::InvalidArgument("adjacency power must be at least 1".into()));
    }
    if m == 1 {
        return Ok(adj.clone());
    }
    let mut acc = (*adj.matrix).clone();
    for _ in 1..m {
        acc = acc.matmul(&adj.matrix, drop_below)?;
        if drop_below > 0.0 {
            acc.renormalize_rows();
        }
    }
    Ok(NormalizedAdjacency {
        matrix: Arc::new(acc),
        power_order: adj.power_order * m,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HotLinkSet {
    members: Vec<LinkId>,
    hot_degree: Vec<f64>,
}

impl HotLinkSet {
    pub fn new(mut members: Vec<LinkId>, hot_degree: Vec<f64>) -> Self {
        members.sort_unstable();
        members.dedup();
        Self { members, hot_degree }
    }

    pub fn all(n: usize) -> Self {
        Self::new((0..n).collect(), vec![0.0; n])
    }

    /// Sorted member ids.
    pub fn members(&self) -> &[LinkId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: LinkId) -> bool {
        self.members.binary_search(&id).is_ok()
    }

    /// Position of `id` among the members.
    pub fn index_of(&self, id: LinkId) -> Option<usize> {
        self.members.binary_search(&id).ok()
    }

    /// Largest per-window degree seen for each link.
    pub fn hot_degree(&self) -> &[f64] {
        &self.hot_degree
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text: String = self.members.iter().map(|m| format!("{m}\n")).collect();
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let members = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.parse().map_err(|_| Error::Format(format!("hot-link file: bad id {l:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(members, Vec::new()))
    }
}

pub const WEEK_STEPS: usize = 7 * STEPS_PER_DAY;
/// Number of trailing weekly windows whose selections are unioned.
pub const HOT_WINDOWS: usize = 4;

/// Per-window hot degrees `count × (1 + mean congestion)`, one vector per
/// weekly window, covering the last four weeks that contain trips.
pub fn window_degrees(net: &TrafficNetwork, trips: &[TripRecord], traffic: &TrafficSliceTensor) -> Vec<Vec<f64>> {
    let n = net.n_links();
    let Some(last_week) = trips.iter().map(|t| t.start_step / WEEK_STEPS).max() else {
        return Vec::new();
    };
    let first_week = (last_week + 1).saturating_sub(HOT_WINDOWS);
    let mut out = Vec::new();
    for week in first_week..=last_week {
        let mut counts = vec![0usize; n];
        for trip in trips.iter().filter(|t| t.start_step / WEEK_STEPS == week) {
            for &l in &trip.route {
                if l < n {
                    counts[l] += 1;
                }
            }
        }
        let lo = week * WEEK_STEPS;
        let hi = ((week + 1) * WEEK_STEPS).min(traffic.steps());
        let mut cong = vec![0.0; n];
        if hi > lo {
            for t in lo..hi {
                for (i, c) in cong.iter_mut().enumerate() {
                    *c += traffic.get(t, i, CH_CONGESTION) as f64;
                }
            }
            cong.iter_mut().for_each(|c| *c /= (hi - lo) as f64);
        }
        out.push(counts.iter().zip(&cong).map(|(&k, &c)| k as f64 * (1.0 + c)).collect());
    }
    out
}

/// Links whose hot degree reaches `degree_threshold` in any of the last four
/// weekly windows, plus their 1-hop in- and out-neighbors.
pub fn select_hot_links(
    net: &TrafficNetwork,
    trips: &[TripRecord],
    traffic: &TrafficSliceTensor,
    degree_threshold: f64,
) -> HotLinkSet {
    let windows = window_degrees(net, trips, traffic);
    select_from_degrees(net, &windows, degree_threshold)
}

pub fn select_from_degrees(net: &TrafficNetwork, windows: &[Vec<f64>], degree_threshold: f64) -> HotLinkSet {
    let n = net.n_links();
    let mut best = vec![0.0f64; n];
    let mut core = BTreeSet::new();
    for w in windows {
        for (i, &d) in w.iter().enumerate() {
            best[i] = best[i].max(d);
            if d > 0.0 && d >= degree_threshold {
                core.insert(i);
            }
        }
    }
    let mut members: BTreeSet<LinkId> = core.clone();
    for &i in &core {
        members.extend(net.successors(i));
        members.extend(net.predecessors(i));
    }
    HotLinkSet::new(members.into_iter().collect(), best)
}

/// Smallest threshold whose core selection (before neighbor expansion) covers
/// at most `fraction` of the links.
pub fn threshold_for_fraction(windows: &[Vec<f64>], n_links: usize, fraction: f64) -> f64 {
    let mut best = vec![0.0f64; n_links];
    for w in windows {
        for (b, &d) in best.iter_mut().zip(w) {
            *b = b.max(d);
        }
    }
    best.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * n_links as f64).floor() as usize).clamp(1, n_links);
    // Ties at the cut would overshoot; step just above them.
    let cut = best[k - 1];
    if k < n_links && best[k] == cut {
        let above = best[..k].iter().rev().find(|&&v| v > cut).copied();
        return above.unwrap_or(f64::INFINITY);
    }
    cut.max(f64::MIN_POSITIVE)
}
