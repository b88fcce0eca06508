//! Discrimination (Harrell's C) and calibration, with bootstrap uncertainty and
//! paired model comparison.
//!
//! Risk orientation: a higher score means shorter expected survival. Cox models
//! are scored by their linear predictor, the forest by its mortality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{bootstrap_percentile, paired_bootstrap_delta, BootstrapCI};

/// Harrell's concordance index.
///
/// A pair `(i, j)` is comparable when `t_i < t_j` and subject `i` had the event;
/// it is concordant when `risk_i > risk_j` and scores half when the risks tie.
/// Runs in `O(n log n)` using a Fenwick tree over risk ranks.
pub fn concordance(time: &[f64], event: &[u8], risk: &[f64]) -> Result<f64> {
    let n = time.len();
    if event.len() != n || risk.len() != n {
        return Err(Error::Shape(format!(
            "concordance: time {n}, event {}, risk {}",
            event.len(),
            risk.len()
        )));
    }
    let (num, comparable) = concordance_counts(time, event, risk);
    if comparable == 0.0 {
        return Err(Error::UndefinedMetric("no comparable pairs".into()));
    }
    Ok(num / comparable)
}

/// Concordance restricted to (possibly repeated) row indices.
pub fn concordance_on(time: &[f64], event: &[u8], risk: &[f64], idx: &[usize]) -> Result<f64> {
    let t: Vec<f64> = idx.iter().map(|&i| time[i]).collect();
    let e: Vec<u8> = idx.iter().map(|&i| event[i]).collect();
    let r: Vec<f64> = idx.iter().map(|&i| risk[i]).collect();
    concordance(&t, &e, &r)
}

fn concordance_counts(time: &[f64], event: &[u8], risk: &[f64]) -> (f64, f64) {
    let n = time.len();
    let mut sorted_risk: Vec<f64> = risk.to_vec();
    sorted_risk.sort_by(f64::total_cmp);
    sorted_risk.dedup();
    let rank = |r: f64| sorted_risk.partition_point(|&v| v < r) + 1;

    let mut tree = Fenwick::new(sorted_risk.len());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));

    let (mut concordant, mut ties, mut comparable) = (0u64, 0u64, 0u64);
    let mut inserted = 0u64;
    let mut start = 0;
    while start < n {
        let t = time[order[start]];
        let mut end = start;
        while end < n && time[order[end]] == t {
            end += 1;
        }
        for &i in &order[start..end] {
            if event[i] == 1 {
                let r = rank(risk[i]);
                let below = tree.prefix(r - 1);
                let at = tree.prefix(r) - below;
                concordant += below;
                ties += at;
                comparable += inserted;
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(risk[i]));
            inserted += 1;
        }
        start = end;
    }
    (concordant as f64 + 0.5 * ties as f64, comparable as f64)
}

struct Fenwick {
    counts: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            counts: vec![0; n + 1],
        }
    }

    fn add(&mut self, mut i: usize) {
        while i < self.counts.len() {
            self.counts[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    fn prefix(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.counts[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub observed: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub slope: f64,
    pub intercept: f64,
    pub horizon: f64,
    pub bins: Vec<CalibrationBin>,
    /// Indices of bins whose Kaplan–Meier estimate is undefined at the horizon.
    pub dropped_bins: Vec<usize>,
}

/// Kaplan–Meier survival at `horizon` and the number still at risk there.
pub fn kaplan_meier_at(time: &[f64], event: &[u8], horizon: f64) -> (f64, usize) {
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut surv = 1.0;
    let mut at_risk = time.len();
    let mut k = 0;
    while k < order.len() && time[order[k]] <= horizon {
        let t = time[order[k]];
        let mut d = 0;
        let mut leaving = 0;
        while k < order.len() && time[order[k]] == t {
            d += event[order[k]] as usize;
            leaving += 1;
            k += 1;
        }
        if d > 0 {
            surv *= 1.0 - d as f64 / at_risk as f64;
        }
        at_risk -= leaving;
    }
    (surv, time.iter().filter(|&&t| t >= horizon).count())
}

/// Count-weighted least squares of observed on predicted risk across bins.
pub fn calibration_line(bins: &[CalibrationBin]) -> Result<(f64, f64)> {
    if bins.len() < 2 {
        return Err(Error::Calibration(format!("need at least 2 bins, got {}", bins.len())));
    }
    let w_total: f64 = bins.iter().map(|b| b.count as f64).sum();
    let x_bar = bins.iter().map(|b| b.count as f64 * b.mean_predicted).sum::<f64>() / w_total;
    let y_bar = bins.iter().map(|b| b.count as f64 * b.observed).sum::<f64>() / w_total;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for b in bins {
        let w = b.count as f64;
        let dx = b.mean_predicted - x_bar;
        sxy += w * dx * (b.observed - y_bar);
        sxx += w * dx * dx;
    }
    if sxx <= 0.0 {
        return Err(Error::Calibration("predicted risks do not vary across bins".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, y_bar - slope * x_bar))
}

/// Equal-count bins of predicted event probability at `horizon`; observed risk
/// per bin is `1 − KM(horizon)`.
///
/// A bin is dropped when nobody in it is still at risk at the horizon and its
/// Kaplan–Meier curve has not reached zero, since the estimate is undefined there.
pub fn calibration(
    predicted: &[f64],
    time: &[f64],
    event: &[u8],
    horizon: f64,
    n_bins: usize,
) -> Result<Calibration> {
    let n = predicted.len();
    if time.len() != n || event.len() != n {
        return Err(Error::Shape("calibration inputs differ in length".into()));
    }
    if let Some(p) = predicted.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Argument(format!("predicted probability {p} outside [0,1]")));
    }
    let max_t = time.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(horizon > 0.0 && horizon <= max_t) {
        return Err(Error::Argument(format!(
            "horizon {horizon} outside (0, {max_t}]"
        )));
    }
    if n_bins == 0 || n < n_bins {
        return Err(Error::Argument(format!("{n} rows cannot fill {n_bins} bins")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| predicted[a].total_cmp(&predicted[b]).then(a.cmp(&b)));

    let mut bins = Vec::new();
    let mut dropped_bins = Vec::new();
    for k in 0..n_bins {
        let rows = &order[k * n / n_bins..(k + 1) * n / n_bins];
        let t: Vec<f64> = rows.iter().map(|&i| time[i]).collect();
        let e: Vec<u8> = rows.iter().map(|&i| event[i]).collect();
        let (surv, at_risk) = kaplan_meier_at(&t, &e, horizon);
        if rows.is_empty() || (at_risk == 0 && surv > 0.0) {
            dropped_bins.push(k);
            continue;
        }
        bins.push(CalibrationBin {
            mean_predicted: rows.iter().map(|&i| predicted[i]).sum::<f64>() / rows.len() as f64,
            observed: 1.0 - surv,
            count: rows.len(),
        });
    }
    let (slope, intercept) = calibration_line(&bins)?;
    Ok(Calibration {
        slope,
        intercept,
        horizon,
        bins,
        dropped_bins,
    })
}

/// Median of the observed event times.
pub fn median_event_time(time: &[f64], event: &[u8]) -> Option<f64> {
    let mut t: Vec<f64> = time
        .iter()
        .zip(event)
        .filter(|(_, &e)| e == 1)
        .map(|(&t, _)| t)
        .collect();
    if t.is_empty() {
        return None;
    }
    t.sort_by(f64::total_cmp);
    let m = t.len();
    Some(if m % 2 == 1 {
        t[m / 2]
    } else {
        0.5 * (t[m / 2 - 1] + t[m / 2])
    })
}

/// Test-set predictions of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPredictions {
    pub model_id: String,
    /// Higher means shorter expected survival.
    pub risk: Vec<f64>,
    /// Predicted probability of an event by the evaluation horizon.
    pub event_probability: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub c_index: BootstrapCI,
    pub calibration_slope: f64,
    pub calibration_intercept: f64,
    pub horizon: f64,
    pub bin_table: Vec<CalibrationBin>,
    pub dropped_bins: Vec<usize>,
}

/// C-index with a test-set percentile bootstrap (models are not refit) plus
/// point-estimate calibration on the full test set.
pub fn evaluate_model(
    preds: &ModelPredictions,
    time: &[f64],
    event: &[u8],
    horizon: f64,
    n_bins: usize,
    b: usize,
    seed: u64,
) -> Result<EvaluationReport> {
    let n = time.len();
    if preds.risk.len() != n || preds.event_probability.len() != n {
        return Err(Error::Shape(format!(
            "{}: predictions do not align with {n} test rows",
            preds.model_id
        )));
    }
    let c_index = bootstrap_percentile(
        n,
        |idx| concordance_on(time, event, &preds.risk, idx).ok(),
        b,
        seed,
    )?;
    let cal = calibration(&preds.event_probability, time, event, horizon, n_bins)?;
    Ok(EvaluationReport {
        model_id: preds.model_id.clone(),
        c_index,
        calibration_slope: cal.slope,
        calibration_intercept: cal.intercept,
        horizon,
        bin_table: cal.bins,
        dropped_bins: cal.dropped_bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_id: String,
    pub augmented_id: String,
    /// Interval over `C(augmented) − C(baseline)`.
    pub delta_c: BootstrapCI,
    pub p_value: f64,
}

/// Paired-bootstrap difference in C-index on shared test-set resamples.
pub fn compare(
    baseline: &ModelPredictions,
    augmented: &ModelPredictions,
    time: &[f64],
    event: &[u8],
    b: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let n = time.len();
    if baseline.risk.len() != n || augmented.risk.len() != n {
        return Err(Error::Shape("compared predictions must align with test rows".into()));
    }
    let paired = paired_bootstrap_delta(
        n,
        |idx| concordance_on(time, event, &baseline.risk, idx).ok(),
        |idx| concordance_on(time, event, &augmented.risk, idx).ok(),
        b,
        seed,
    )?;
    Ok(ComparisonReport {
        baseline_id: baseline.model_id.clone(),
        augmented_id: augmented.model_id.clone(),
        delta_c: paired.delta,
        p_value: paired.p_value,
    })
}
