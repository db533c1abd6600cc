//! Accuracy metrics and long-tail grouping by en-route condition deviation
//! (CDD) and non-recurrence (NRD).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{TrafficNetwork, WEEK_STEPS};
use crate::trafficgen::{traverse, TrafficSliceTensor, TripRecord};

/// Absolute error above which a trip can be a bad case, in seconds.
pub const BAD_CASE_SECONDS: f64 = 300.0;
/// Relative error above which a trip can be a bad case.
pub const BAD_CASE_RATIO: f64 = 0.20;
pub const LONGTAIL_BINS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// Seconds.
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    /// Percent of trips that are bad cases.
    pub bcr: f64,
}

pub fn compute_metrics(preds: &[f64], truths: &[f64]) -> Result<MetricsReport> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions vs {} truths", preds.len(), truths.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some((index, &value)) = truths.iter().enumerate().find(|(_, &y)| !(y > 0.0)) {
        return Err(Error::NonPositiveTruth { index, value });
    }
    let n = preds.len() as f64;
    let (mut ae, mut ape, mut bad) = (0.0, 0.0, 0usize);
    for (p, y) in preds.iter().zip(truths) {
        let e = (p - y).abs();
        ae += e;
        ape += e / y;
        if e > BAD_CASE_SECONDS && e / y > BAD_CASE_RATIO {
            bad += 1;
        }
    }
    Ok(MetricsReport {
        n: preds.len(),
        mae: ae / n,
        mape: ape / n * 100.0,
        bcr: bad as f64 / n * 100.0,
    })
}

/// Per-(step-of-week, link, channel) feature means over a span of steps.
#[derive(Clone, Debug)]
pub struct StepOfWeekMean {
    n_links: usize,
    channels: usize,
    means: Vec<f64>,
    counts: Vec<u32>,
}

impl StepOfWeekMean {
    /// Means over steps `[0, span_steps)` of `traffic`.
    pub fn new(traffic: &TrafficSliceTensor, span_steps: usize) -> Self {
        let (n, c) = (traffic.n_links(), traffic.channels());
        let mut means = vec![0.0; WEEK_STEPS * n * c];
        let mut counts = vec![0u32; WEEK_STEPS];
        for t in 0..span_steps.min(traffic.steps()) {
            let w = t % WEEK_STEPS;
            counts[w] += 1;
            for l in 0..n {
                for ch in 0..c {
                    means[(w * n + l) * c + ch] += traffic.get(t, l, ch) as f64;
                }
            }
        }
        for w in 0..WEEK_STEPS {
            if counts[w] > 0 {
                let k = counts[w] as f64;
                means[w * n * c..(w + 1) * n * c].iter_mut().for_each(|v| *v /= k);
            }
        }
        Self {
            n_links: n,
            channels: c,
            means,
            counts,
        }
    }

    /// Mean feature vector of `link` at the step-of-week of `step`, if that
    /// step-of-week was observed.
    pub fn get(&self, step: usize, link: usize) -> Option<&[f64]> {
        let w = step % WEEK_STEPS;
        if self.counts[w] == 0 {
            return None;
        }
        let o = (w * self.n_links + link) * self.channels;
        Some(&self.means[o..o + self.channels])
    }
}

fn features(traffic: &TrafficSliceTensor, step: usize, link: usize) -> Vec<f64> {
    (0..traffic.channels()).map(|c| traffic.get(step, link, c) as f64).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over route links of `‖x_v(arrival) − x_v(departure)‖`.
pub fn condition_deviation(net: &TrafficNetwork, traffic: &TrafficSliceTensor, trip: &TripRecord) -> Result<f64> {
    let tr = traverse(net, traffic, &trip.route, trip.start_step)?;
    let start = trip.start_step.min(traffic.steps() - 1);
    let total: f64 = trip
        .route
        .iter()
        .zip(&tr.arrival_steps)
        .map(|(&l, &a)| dist(&features(traffic, a, l), &features(traffic, start, l)))
        .sum();
    Ok(total / trip.route.len() as f64)
}

/// Mean over route links of `‖x_v(arrival) − x̄_v(arrival)‖`; links whose
/// step-of-week was never observed contribute zero.
pub fn non_recurrence(
    net: &TrafficNetwork,
    traffic: &TrafficSliceTensor,
    hist: &StepOfWeekMean,
    trip: &TripRecord,
) -> Result<f64> {
    let tr = traverse(net, traffic, &trip.route, trip.start_step)?;
    let total: f64 = trip
        .route
        .iter()
        .zip(&tr.arrival_steps)
        .map(|(&l, &a)| hist.get(a, l).map_or(0.0, |m| dist(&features(traffic, a, l), m)))
        .sum();
    Ok(total / trip.route.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongtailBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mae_a: f64,
    pub mae_b: f64,
    /// `(mae_a − mae_b) / mae_a`; zero for empty bins or a zero baseline.
    pub gain: f64,
}

/// Index of each value in `bins` equal-width bins over its range.
pub fn equal_width_bins(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let idx = values
        .iter()
        .map(|&v| {
            if !(width > 0.0) {
                0
            } else {
                (((v - lo) / width).floor() as usize).min(bins - 1)
            }
        })
        .collect();
    (lo, hi, idx)
}

fn grouped(values: &[f64], truths: &[f64], a: &[f64], b: &[f64]) -> Vec<LongtailBin> {
    if values.is_empty() {
        return Vec::new();
    }
    let (lo, hi, idx) = equal_width_bins(values, LONGTAIL_BINS);
    let width = (hi - lo) / LONGTAIL_BINS as f64;
    (0..LONGTAIL_BINS)
        .map(|k| {
            let members: Vec<usize> = (0..values.len()).filter(|&i| idx[i] == k).collect();
            let mae = |p: &[f64]| {
                if members.is_empty() {
                    0.0
                } else {
                    members.iter().map(|&i| (p[i] - truths[i]).abs()).sum::<f64>() / members.len() as f64
                }
            };
            let (ma, mb) = (mae(a), mae(b));
            LongtailBin {
                lo: lo + width * k as f64,
                hi: lo + width * (k + 1) as f64,
                count: members.len(),
                mae_a: ma,
                mae_b: mb,
                gain: if ma > 0.0 { (ma - mb) / ma } else { 0.0 },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongtailReport {
    pub cdd: Vec<LongtailBin>,
    pub nrd: Vec<LongtailBin>,
}

/// Groups trips into equal-width CDD and NRD bins and reports the MAE gain
/// of model B over model A in each.
pub fn longtail_report(
    net: &TrafficNetwork,
    traffic: &TrafficSliceTensor,
    hist: &StepOfWeekMean,
    trips: &[TripRecord],
    preds_a: &[f64],
    preds_b: &[f64],
) -> Result<LongtailReport> {
    if preds_a.len() != trips.len() || preds_b.len() != trips.len() {
        return Err(Error::Shape(format!(
            "{} trips vs {} / {} predictions",
            trips.len(),
            preds_a.len(),
            preds_b.len()
        )));
    }
    let truths: Vec<f64> = trips.iter().map(|t| t.true_duration).collect();
    let cdd = trips
        .iter()
        .map(|t| condition_deviation(net, traffic, t))
        .collect::<Result<Vec<_>>>()?;
    let nrd = trips
        .iter()
        .map(|t| non_recurrence(net, traffic, hist, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(LongtailReport {
        cdd: grouped(&cdd, &truths, preds_a, preds_b),
        nrd: grouped(&nrd, &truths, preds_a, preds_b),
    })
}
