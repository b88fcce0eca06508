//! Turns cohort attributions into feature exclusions, quadratic terms and
//! pairwise interactions for the Cox model.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{explain_cohort, AttributionMatrix, CoalitionModel, ExplainerConfig, ReferencePoint, ReferenceProvenance};
use crate::cox::{ordered_pair, ModelPlan};
use crate::data::{FeatureKind, Schema};
use crate::error::{Error, Result};
use crate::stats::{mean, normal_mean_ci, pearson, sample_sd, wilcoxon_rank_sum, RankSumMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecommenderConfig {
    /// Cohort margin as a multiple of the prediction SD.
    pub k_margin: f64,
    /// Stratifiers scanned per cohort, ranked by mean |α|.
    pub top_k: usize,
    pub min_stratum_size: usize,
    pub alpha: f64,
    pub bonferroni: bool,
    /// Exclusion threshold as a multiple of the SD of per-feature mean |α|.
    pub exclusion_factor: f64,
    pub nonlinear_r: f64,
    /// Continuous features with at most this many distinct values stratify by value.
    pub low_cardinality: usize,
    /// Pinned pattern-A cutoffs per feature.
    pub cutoff_overrides: BTreeMap<String, f64>,
    /// Optional second margin applied within each stratum before re-explaining.
    pub margin_per_stratum: Option<f64>,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        Self {
            k_margin: 0.05,
            top_k: 10,
            min_stratum_size: 30,
            alpha: 0.05,
            bonferroni: false,
            exclusion_factor: 0.05,
            nonlinear_r: 0.1,
            low_cardinality: 5,
            cutoff_overrides: BTreeMap::new(),
            margin_per_stratum: None,
        }
    }
}

impl RecommenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_margin > 0.0) {
            return Err(Error::Argument("k_margin must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Argument(format!("alpha {} outside (0,1)", self.alpha)));
        }
        if self.min_stratum_size < 2 {
            return Err(Error::Argument("min_stratum_size must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Low,
    High,
}

impl Cohort {
    pub fn name(self) -> &'static str {
        match self {
            Cohort::Low => "low",
            Cohort::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSelection {
    pub low_risk: Vec<usize>,
    pub high_risk: Vec<usize>,
    pub margin: f64,
    pub mean_nonevent: f64,
    pub mean_event: f64,
    pub prediction_sd: f64,
    pub warnings: Vec<String>,
}

/// Rows whose prediction lies within `k · sd` of the non-event (low) or event
/// (high) mean prediction. A row near both means goes to the nearer one.
pub fn select_extreme_cohorts(predictions: &[f64], events: &[u8], k: f64) -> Result<CohortSelection> {
    if predictions.len() != events.len() {
        return Err(Error::Shape("predictions and events differ in length".into()));
    }
    let pick = |e: u8| -> Vec<f64> {
        predictions
            .iter()
            .zip(events)
            .filter(|(_, &ev)| ev == e)
            .map(|(&p, _)| p)
            .collect()
    };
    let (non, ev) = (pick(0), pick(1));
    if non.is_empty() || ev.is_empty() {
        return Err(Error::Argument("cohort selection needs both events and non-events".into()));
    }
    let mean_nonevent = mean(&non);
    let mean_event = mean(&ev);
    let prediction_sd = sample_sd(predictions);
    let margin = k * prediction_sd;
    let mut low_risk = Vec::new();
    let mut high_risk = Vec::new();
    for (i, &p) in predictions.iter().enumerate() {
        let dl = (p - mean_nonevent).abs();
        let dh = (p - mean_event).abs();
        match (dl < margin, dh < margin) {
            (true, true) if dh < dl => high_risk.push(i),
            (true, _) => low_risk.push(i),
            (false, true) => high_risk.push(i),
            (false, false) => {}
        }
    }
    let mut warnings = Vec::new();
    for (list, name) in [(&low_risk, "low"), (&high_risk, "high")] {
        if list.is_empty() {
            warnings.push(format!("{name}-risk cohort is empty (margin {margin:.3e})"));
        }
    }
    Ok(CohortSelection {
        low_risk,
        high_risk,
        margin,
        mean_nonevent,
        mean_event,
        prediction_sd,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionEvidence {
    pub feature: String,
    pub ci_upper_low: Option<f64>,
    pub ci_upper_high: Option<f64>,
    /// The larger of the two cohort thresholds.
    pub threshold: f64,
    pub threshold_low: Option<f64>,
    pub threshold_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearEvidence {
    pub feature: String,
    pub r_low: Option<f64>,
    pub p_low: Option<f64>,
    pub r_high: Option<f64>,
    pub p_high: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    #[serde(rename = "A_sign")]
    Sign,
    #[serde(rename = "B_value")]
    Value,
    #[serde(rename = "C_cluster")]
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvidence {
    pub a: String,
    pub b: String,
    pub stratifier: String,
    pub pattern: Pattern,
    pub p: f64,
    pub cohort: Cohort,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecommendationSet {
    pub exclusions: Vec<ExclusionEvidence>,
    pub nonlinear: Vec<NonlinearEvidence>,
    pub interactions: Vec<InteractionEvidence>,
}

impl RecommendationSet {
    pub fn excluded(&self) -> BTreeSet<String> {
        self.exclusions.iter().map(|e| e.feature.clone()).collect()
    }

    pub fn nonlinear_features(&self) -> BTreeSet<String> {
        self.nonlinear.iter().map(|e| e.feature.clone()).collect()
    }

    pub fn pairs(&self) -> BTreeSet<(String, String)> {
        self.interactions.iter().map(|e| ordered_pair(&e.a, &e.b)).collect()
    }
}

/// Per-feature mean |α| with its normal 95% CI upper bound, plus the cohort threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortImportance {
    pub mean_abs: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub threshold: f64,
}

pub fn cohort_importance(att: &AttributionMatrix, factor: f64) -> Option<CohortImportance> {
    if att.n_rows() < 3 {
        return None;
    }
    let mut mean_abs = Vec::new();
    let mut ci_upper = Vec::new();
    for col in att.alpha.columns() {
        let abs: Vec<f64> = col.iter().map(|v| v.abs()).collect();
        let (m, _, hi) = normal_mean_ci(&abs);
        mean_abs.push(m);
        ci_upper.push(hi);
    }
    let threshold = factor * sample_sd(&mean_abs);
    Some(CohortImportance {
        mean_abs,
        ci_upper,
        threshold,
    })
}

/// Features whose CI upper bound of mean |α| does not exceed the threshold in
/// every cohort where the rule can be evaluated.
pub fn recommend_exclusions(
    att_low: Option<&AttributionMatrix>,
    att_high: Option<&AttributionMatrix>,
    factor: f64,
    warnings: &mut Vec<String>,
) -> Result<Vec<ExclusionEvidence>> {
    let names = match (att_low, att_high) {
        (Some(a), Some(b)) if a.feature_names != b.feature_names => {
            return Err(Error::Shape("cohort attributions cover different features".into()))
        }
        (Some(a), _) | (None, Some(a)) => a.feature_names.clone(),
        (None, None) => return Ok(Vec::new()),
    };
    let mut imp = |att: Option<&AttributionMatrix>, cohort: &str| {
        let out = att.and_then(|a| cohort_importance(a, factor));
        if att.is_some() && out.is_none() {
            warnings.push(format!("{cohort}-risk cohort has fewer than 3 rows; exclusion rule skipped"));
        }
        if let Some(c) = &out {
            if c.threshold <= 0.0 {
                warnings.push(format!(
                    "{cohort}-risk cohort: attribution magnitudes do not vary across features; no exclusions"
                ));
            }
        }
        out
    };
    let low = imp(att_low, "low");
    let high = imp(att_high, "high");
    let active: Vec<&CohortImportance> = [&low, &high].into_iter().flatten().collect();
    if active.is_empty() || active.iter().any(|c| c.threshold <= 0.0) {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (j, name) in names.iter().enumerate() {
        if active.iter().all(|c| c.ci_upper[j] <= c.threshold) {
            out.push(ExclusionEvidence {
                feature: name.clone(),
                ci_upper_low: low.as_ref().map(|c| c.ci_upper[j]),
                ci_upper_high: high.as_ref().map(|c| c.ci_upper[j]),
                threshold: active.iter().map(|c| c.threshold).fold(f64::NEG_INFINITY, f64::max),
                threshold_low: low.as_ref().map(|c| c.threshold),
                threshold_high: high.as_ref().map(|c| c.threshold),
            });
        }
    }
    Ok(out)
}

/// Attributions paired with the source values of the rows they explain.
#[derive(Debug, Clone, Copy)]
pub struct CohortView<'a> {
    pub cohort: Cohort,
    pub att: &'a AttributionMatrix,
    /// Source rows indexed by `att.subject_index`.
    pub source: ArrayView2<'a, f64>,
}

impl CohortView<'_> {
    fn values(&self, feature: usize) -> Vec<f64> {
        self.att
            .subject_index
            .iter()
            .map(|&i| self.source[[i, feature]])
            .collect()
    }
}

/// Continuous or ordinal retained features whose values correlate weakly with
/// their attributions in either cohort.
pub fn recommend_nonlinear(
    schema: &Schema,
    cohorts: &[CohortView<'_>],
    excluded: &BTreeSet<String>,
    r_limit: f64,
    warnings: &mut Vec<String>,
) -> Vec<NonlinearEvidence> {
    let mut out = Vec::new();
    for (j, spec) in schema.features().iter().enumerate() {
        if excluded.contains(&spec.name) || !matches!(spec.kind, FeatureKind::Continuous | FeatureKind::Ordinal) {
            continue;
        }
        let mut ev = NonlinearEvidence {
            feature: spec.name.clone(),
            r_low: None,
            p_low: None,
            r_high: None,
            p_high: None,
        };
        let mut flagged = false;
        for view in cohorts {
            let alpha = view.att.alpha.column(j).to_vec();
            match pearson(&view.values(j), &alpha) {
                Ok(res) => {
                    flagged |= res.r.abs() < r_limit;
                    match view.cohort {
                        Cohort::Low => (ev.r_low, ev.p_low) = (Some(res.r), Some(res.p_value)),
                        Cohort::High => (ev.r_high, ev.p_high) = (Some(res.r), Some(res.p_value)),
                    }
                }
                Err(e) => warnings.push(format!(
                    "{}-risk cohort: non-linearity check skipped for `{}`: {e}",
                    view.cohort.name(),
                    spec.name
                )),
            }
        }
        if flagged {
            out.push(ev);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationFinding {
    pub feature: String,
    pub pattern: Pattern,
    pub cohort: Cohort,
    /// Feature cutoff (pattern A) or attribution cutoff (pattern C).
    pub cutoff: Option<f64>,
    /// Level labels on each side for value-stratified features.
    pub partition: Option<(Vec<String>, Vec<String>)>,
    pub strata_sizes: (usize, usize),
    /// Subject ids in each stratum.
    #[serde(skip)]
    pub strata: (Vec<usize>, Vec<usize>),
}

/// Scan the top-K retained features of one cohort for stratifying patterns.
pub fn detect_patterns(
    schema: &Schema,
    view: &CohortView<'_>,
    excluded: &BTreeSet<String>,
    config: &RecommenderConfig,
) -> Vec<StratificationFinding> {
    let Some(imp) = cohort_importance(view.att, config.exclusion_factor) else {
        return Vec::new();
    };
    let mut ranked: Vec<usize> = (0..schema.len())
        .filter(|&j| !excluded.contains(&schema.features()[j].name))
        .collect();
    ranked.sort_by(|&a, &b| imp.mean_abs[b].total_cmp(&imp.mean_abs[a]).then(a.cmp(&b)));
    ranked.truncate(config.top_k);

    let ids = &view.att.subject_index;
    let min = config.min_stratum_size;
    let mut out = Vec::new();
    for j in ranked {
        let spec = &schema.features()[j];
        let x = view.values(j);
        let alpha: Vec<f64> = view.att.alpha.column(j).to_vec();
        let finding = |pattern, cutoff, partition, left: Vec<usize>, right: Vec<usize>| StratificationFinding {
            feature: spec.name.clone(),
            pattern,
            cohort: view.cohort,
            cutoff,
            partition,
            strata_sizes: (left.len(), right.len()),
            strata: (
                left.iter().map(|&r| ids[r]).collect(),
                right.iter().map(|&r| ids[r]).collect(),
            ),
        };
        let distinct = {
            let mut v = x.clone();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.len()
        };
        if spec.kind != FeatureKind::Continuous || distinct <= config.low_cardinality {
            if let Some((left_levels, right_levels, left, right)) = value_partition(&x, &alpha, min) {
                let label = |v: f64| match spec.kind {
                    FeatureKind::Continuous => v.to_string(),
                    _ if spec.levels.is_empty() => v.to_string(),
                    _ => spec.levels[v.round() as usize].clone(),
                };
                let partition = Some((
                    left_levels.into_iter().map(label).collect(),
                    right_levels.into_iter().map(label).collect(),
                ));
                out.push(finding(Pattern::Value, None, partition, left, right));
            }
            continue;
        }
        let sign = match config.cutoff_overrides.get(&spec.name) {
            Some(&c) => {
                let (l, r): (Vec<usize>, Vec<usize>) = (0..x.len()).partition(|&i| x[i] <= c);
                (l.len() >= min && r.len() >= min).then_some((c, l, r))
            }
            None => sign_crossing(&x, &alpha, min, imp.threshold),
        };
        if let Some((cutoff, l, r)) = sign {
            out.push(finding(Pattern::Sign, Some(cutoff), None, l, r));
        }
        if let Some((cutoff, l, r)) = two_means(&alpha, min) {
            out.push(finding(Pattern::Cluster, Some(cutoff), None, l, r));
        }
    }
    out
}

/// Two-way split of the observed values, grouped by mean α, at the largest gap
/// that leaves both sides with at least `min` rows.
#[allow(clippy::type_complexity)]
fn value_partition(x: &[f64], alpha: &[f64], min: usize) -> Option<(Vec<f64>, Vec<f64>, Vec<usize>, Vec<usize>)> {
    let mut groups: BTreeMap<i64, (f64, Vec<usize>)> = BTreeMap::new();
    for (i, &v) in x.iter().enumerate() {
        let key = (v * 1e9).round() as i64;
        groups.entry(key).or_insert((v, Vec::new())).1.push(i);
    }
    if groups.len() < 2 {
        return None;
    }
    let mut levels: Vec<(f64, f64, Vec<usize>)> = groups
        .into_values()
        .map(|(v, rows)| {
            let m = rows.iter().map(|&i| alpha[i]).sum::<f64>() / rows.len() as f64;
            (m, v, rows)
        })
        .collect();
    levels.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let total = x.len();
    let mut best: Option<(f64, usize)> = None;
    let mut left = 0;
    for c in 1..levels.len() {
        left += levels[c - 1].2.len();
        if left < min || total - left < min {
            continue;
        }
        let gap = levels[c].0 - levels[c - 1].0;
        if best.is_none_or(|(g, _)| gap > g) {
            best = Some((gap, c));
        }
    }
    let (_, c) = best?;
    let (lo, hi) = levels.split_at(c);
    let mut lv: Vec<f64> = lo.iter().map(|l| l.1).collect();
    let mut hv: Vec<f64> = hi.iter().map(|l| l.1).collect();
    lv.sort_by(f64::total_cmp);
    hv.sort_by(f64::total_cmp);
    let mut lr: Vec<usize> = lo.iter().flat_map(|l| l.2.iter().copied()).collect();
    let mut hr: Vec<usize> = hi.iter().flat_map(|l| l.2.iter().copied()).collect();
    lr.sort_unstable();
    hr.sort_unstable();
    Some((lv, hv, lr, hr))
}

/// First zero crossing of the running mean of α along sorted feature values
/// that leaves both sides with `min` rows and mean |α| at least `threshold`.
fn sign_crossing(x: &[f64], alpha: &[f64], min: usize, threshold: f64) -> Option<(f64, Vec<usize>, Vec<usize>)> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let w = 25usize.max(n / 20);
    let half = w / 2;
    let mut prefix = vec![0.0; n + 1];
    for (k, &i) in order.iter().enumerate() {
        prefix[k + 1] = prefix[k] + alpha[i];
    }
    let running: Vec<f64> = (0..n)
        .map(|k| {
            let lo = k.saturating_sub(half);
            let hi = (k + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();
    let mean_abs = |rows: &[usize]| rows.iter().map(|&i| alpha[i].abs()).sum::<f64>() / rows.len() as f64;
    for b in min.max(1)..=n.saturating_sub(min) {
        let (v0, v1) = (x[order[b - 1]], x[order[b]]);
        if v0 == v1 || running[b - 1] * running[b] >= 0.0 {
            continue;
        }
        let left: Vec<usize> = order[..b].to_vec();
        let right: Vec<usize> = order[b..].to_vec();
        if mean_abs(&left) >= threshold && mean_abs(&right) >= threshold {
            let mut l = left;
            let mut r = right;
            l.sort_unstable();
            r.sort_unstable();
            return Some((0.5 * (v0 + v1), l, r));
        }
    }
    None
}

/// Optimal 1-D two-means split of α, kept when the centre gap reaches the
/// pooled within-cluster SD.
fn two_means(alpha: &[f64], min: usize) -> Option<(f64, Vec<usize>, Vec<usize>)> {
    let n = alpha.len();
    if n < 2 * min || n < 3 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| alpha[a].total_cmp(&alpha[b]).then(a.cmp(&b)));
    let v: Vec<f64> = order.iter().map(|&i| alpha[i]).collect();
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for k in 0..n {
        s1[k + 1] = s1[k] + v[k];
        s2[k + 1] = s2[k] + v[k] * v[k];
    }
    let ss = |lo: usize, hi: usize| {
        let m = (hi - lo) as f64;
        let s = s1[hi] - s1[lo];
        (s2[hi] - s2[lo] - s * s / m).max(0.0)
    };
    let mut best: Option<(f64, usize)> = None;
    for b in 1..n {
        if v[b - 1] == v[b] {
            continue;
        }
        let w = ss(0, b) + ss(b, n);
        if best.is_none_or(|(bw, _)| w < bw) {
            best = Some((w, b));
        }
    }
    let (ssw, b) = best?;
    if b < min || n - b < min {
        return None;
    }
    let gap = (s1[n] - s1[b]) / (n - b) as f64 - s1[b] / b as f64;
    let pooled = (ssw / (n - 2) as f64).sqrt();
    if gap < pooled {
        return None;
    }
    let mut l: Vec<usize> = order[..b].to_vec();
    let mut r: Vec<usize> = order[b..].to_vec();
    l.sort_unstable();
    r.sort_unstable();
    Some((0.5 * (v[b - 1] + v[b]), l, r))
}

/// Everything needed to re-explain strata.
pub struct StratumContext<'a, F: ?Sized> {
    pub model_fn: &'a F,
    pub model_id: &'a str,
    pub schema: &'a Schema,
    /// Full training source matrix; strata hold row ids into it.
    pub source: ArrayView2<'a, f64>,
    /// Training predictions, used only for the optional per-stratum margin.
    pub predictions: &'a [f64],
    pub prediction_sd: f64,
    pub explainer: &'a ExplainerConfig,
}

/// Re-explain each stratum against its own mean and test every other retained
/// feature for a shift in attributions between strata.
pub fn recommend_interactions<F>(
    ctx: &StratumContext<'_, F>,
    findings: &[StratificationFinding],
    excluded: &BTreeSet<String>,
    config: &RecommenderConfig,
    warnings: &mut Vec<String>,
) -> Result<Vec<InteractionEvidence>>
where
    F: CoalitionModel + Sync + ?Sized,
{
    let names = ctx.schema.names();
    let retained: Vec<usize> = (0..names.len()).filter(|&j| !excluded.contains(&names[j])).collect();
    let results: Vec<Result<(Vec<InteractionEvidence>, Vec<String>)>> = findings
        .par_iter()
        .map(|finding| test_finding(ctx, finding, &retained, config))
        .collect();

    let mut best: BTreeMap<(String, String), InteractionEvidence> = BTreeMap::new();
    for r in results {
        let (evidence, notes) = r?;
        warnings.extend(notes);
        for ev in evidence {
            let key = ordered_pair(&ev.a, &ev.b);
            match best.get(&key) {
                Some(prev) if prev.p <= ev.p => {}
                _ => {
                    best.insert(key, ev);
                }
            }
        }
    }
    Ok(best.into_values().collect())
}

fn test_finding<F>(
    ctx: &StratumContext<'_, F>,
    finding: &StratificationFinding,
    retained: &[usize],
    config: &RecommenderConfig,
) -> Result<(Vec<InteractionEvidence>, Vec<String>)>
where
    F: CoalitionModel + Sync + ?Sized,
{
    let mut notes = Vec::new();
    let restrict = |rows: &[usize]| -> Vec<usize> {
        match config.margin_per_stratum {
            None => rows.to_vec(),
            Some(k) => {
                let m = rows.iter().map(|&i| ctx.predictions[i]).sum::<f64>() / rows.len() as f64;
                rows.iter()
                    .copied()
                    .filter(|&i| (ctx.predictions[i] - m).abs() < k * ctx.prediction_sd)
                    .collect()
            }
        }
    };
    let s1 = restrict(&finding.strata.0);
    let s2 = restrict(&finding.strata.1);
    if s1.len() < config.min_stratum_size || s2.len() < config.min_stratum_size {
        notes.push(format!(
            "{}-risk `{}` ({:?}): strata {}+{} below minimum {}; skipped",
            finding.cohort.name(),
            finding.feature,
            finding.pattern,
            s1.len(),
            s2.len(),
            config.min_stratum_size
        ));
        return Ok((Vec::new(), notes));
    }
    let names = ctx.schema.names();
    let explain = |rows: &[usize]| -> Result<AttributionMatrix> {
        let sub: Array2<f64> = ctx.source.select(Axis(0), rows);
        let reference = ReferencePoint::mean_of(ctx.schema, sub.view(), ReferenceProvenance::StratumMean)?;
        explain_cohort(ctx.model_fn, ctx.model_id, &names, sub.view(), rows, &reference, ctx.explainer)
    };
    let (a1, a2) = rayon::join(|| explain(&s1), || explain(&s2));
    let (a1, a2) = (a1?, a2?);

    let stratifier = ctx.schema.index_of(&finding.feature).expect("finding names a schema feature");
    let partners: Vec<usize> = retained.iter().copied().filter(|&j| j != stratifier).collect();
    let level = if config.bonferroni && !partners.is_empty() {
        config.alpha / partners.len() as f64
    } else {
        config.alpha
    };
    let mut out = Vec::new();
    for j in partners {
        let x = a1.alpha.column(j).to_vec();
        let y = a2.alpha.column(j).to_vec();
        let test = wilcoxon_rank_sum(&x, &y, RankSumMode::Auto)?;
        if test.p_value < level {
            let (a, b) = ordered_pair(&finding.feature, &names[j]);
            out.push(InteractionEvidence {
                a,
                b,
                stratifier: finding.feature.clone(),
                pattern: finding.pattern,
                p: test.p_value,
                cohort: finding.cohort,
            });
        }
    }
    Ok((out, notes))
}

/// Baseline features minus exclusions, with quadratic and pairwise terms added.
pub fn compile_plan(baseline: &ModelPlan, recs: &RecommendationSet) -> ModelPlan {
    let excluded = recs.excluded();
    ModelPlan {
        included_features: baseline
            .included_features
            .iter()
            .filter(|f| !excluded.contains(*f))
            .cloned()
            .collect(),
        quadratic_terms: recs.nonlinear_features(),
        interaction_pairs: recs.pairs(),
    }
}

/// All recommender outputs for one exploratory model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecommenderOutput {
    pub selection: CohortSelection,
    pub attributions_low: Option<AttributionMatrix>,
    pub attributions_high: Option<AttributionMatrix>,
    pub findings: Vec<StratificationFinding>,
    pub recommendations: RecommendationSet,
    pub warnings: Vec<String>,
}

impl RecommenderOutput {
    pub fn both_cohorts_empty(&self) -> bool {
        self.selection.low_risk.is_empty() && self.selection.high_risk.is_empty()
    }
}

/// Run cohort selection, cohort attribution and all three recommendation rules.
pub fn recommend<F>(
    ctx: &StratumContext<'_, F>,
    events: &[u8],
    config: &RecommenderConfig,
) -> Result<RecommenderOutput>
where
    F: CoalitionModel + Sync + ?Sized,
{
    config.validate()?;
    let selection = select_extreme_cohorts(ctx.predictions, events, config.k_margin)?;
    let mut warnings = selection.warnings.clone();
    let names = ctx.schema.names();
    let explain = |rows: &[usize]| -> Result<Option<AttributionMatrix>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let sub: Array2<f64> = ctx.source.select(Axis(0), rows);
        let reference = ReferencePoint::mean_of(ctx.schema, sub.view(), ReferenceProvenance::GlobalMean)?;
        explain_cohort(ctx.model_fn, ctx.model_id, &names, sub.view(), rows, &reference, ctx.explainer).map(Some)
    };
    let attributions_low = explain(&selection.low_risk)?;
    let attributions_high = explain(&selection.high_risk)?;
    let mut out = RecommenderOutput {
        selection,
        attributions_low,
        attributions_high,
        findings: Vec::new(),
        recommendations: RecommendationSet::default(),
        warnings: Vec::new(),
    };
    if out.both_cohorts_empty() {
        warnings.push("both extreme cohorts are empty; no recommendations produced".into());
        out.warnings = warnings;
        return Ok(out);
    }

    let exclusions = recommend_exclusions(
        out.attributions_low.as_ref(),
        out.attributions_high.as_ref(),
        config.exclusion_factor,
        &mut warnings,
    )?;
    let excluded: BTreeSet<String> = exclusions.iter().map(|e| e.feature.clone()).collect();
    let views: Vec<CohortView<'_>> = [
        (Cohort::Low, out.attributions_low.as_ref()),
        (Cohort::High, out.attributions_high.as_ref()),
    ]
    .into_iter()
    .filter_map(|(cohort, att)| {
        att.map(|att| CohortView {
            cohort,
            att,
            source: ctx.source,
        })
    })
    .collect();
    let nonlinear = recommend_nonlinear(ctx.schema, &views, &excluded, config.nonlinear_r, &mut warnings);
    let findings: Vec<StratificationFinding> = views
        .iter()
        .flat_map(|v| detect_patterns(ctx.schema, v, &excluded, config))
        .collect();
    let interactions = recommend_interactions(ctx, &findings, &excluded, config, &mut warnings)?;
    out.findings = findings;
    out.recommendations = RecommendationSet {
        exclusions,
        nonlinear,
        interactions,
    };
    out.warnings = warnings;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpec;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(alpha: Array2<f64>) -> AttributionMatrix {
        let (n, m) = alpha.dim();
        AttributionMatrix {
            subject_index: (0..n).collect(),
            feature_names: (0..m).map(|j| format!("x{}", j + 1)).collect(),
            alpha,
            reference: ReferencePoint::user_supplied(vec![0.0; m]).unwrap(),
            model_id: "test".into(),
            f_x: vec![0.0; n],
            f_ref: 0.0,
            completeness_residual: vec![0.0; n],
            exact: true,
            regularized_rows: Vec::new(),
        }
    }

    fn continuous_schema(m: usize) -> Schema {
        Schema::new((0..m).map(|j| FeatureSpec::continuous(format!("x{}", j + 1))).collect()).unwrap()
    }

    #[test]
    fn cohort_selection_example() {
        let p = [0.50, 0.52, 2.00, 2.05];
        let sel = select_extreme_cohorts(&p, &[0, 0, 1, 1], 0.05).unwrap();
        assert_eq!(sel.low_risk, vec![0, 1]);
        assert_eq!(sel.high_risk, vec![2, 3]);
        let m = p.iter().sum::<f64>() / 4.0;
        let sd = (p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert_abs_diff_eq!(sel.margin, 0.05 * sd, epsilon = 1e-15);
        assert_abs_diff_eq!(sel.margin, 0.0437, epsilon = 5e-5);
        assert!(sel.warnings.is_empty());
    }

    #[test]
    fn constant_predictions_give_empty_cohorts() {
        let sel = select_extreme_cohorts(&[1.0; 5], &[0, 1, 0, 1, 0], 0.05).unwrap();
        assert!(sel.low_risk.is_empty() && sel.high_risk.is_empty());
        assert_eq!(sel.warnings.len(), 2);
        assert!(select_extreme_cohorts(&[1.0, 2.0], &[0, 0], 0.05).is_err());
    }

    #[test]
    fn overlapping_margins_go_to_nearer_mean() {
        // means 1.0 and 1.2; sd large enough that 1.15 is within both margins
        let p = [0.0, 2.0, 1.15, 0.4, 2.0, 0.0];
        let e = [0, 0, 1, 1, 1, 0];
        let sel = select_extreme_cohorts(&p, &e, 1.0).unwrap();
        assert!(sel.high_risk.contains(&2));
        assert!(!sel.low_risk.contains(&2));
        assert!(sel.low_risk.iter().all(|i| !sel.high_risk.contains(i)));
    }

    fn varied_alpha(n: usize, zero_col: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 4), |(_, j)| {
            if j == zero_col {
                0.0
            } else {
                (j as f64 + 1.0) * rng.random_range(-1.0..1.0)
            }
        })
    }

    #[test]
    fn zero_attribution_feature_is_excluded_and_rule_scales() {
        let low = matrix(varied_alpha(40, 2, 1));
        let high = matrix(varied_alpha(30, 2, 2));
        let mut w = Vec::new();
        let ex = recommend_exclusions(Some(&low), Some(&high), 0.05, &mut w).unwrap();
        assert_eq!(ex.iter().map(|e| e.feature.as_str()).collect::<Vec<_>>(), vec!["x3"]);
        assert!(w.is_empty());

        let scaled = |m: &AttributionMatrix| matrix(m.alpha.mapv(|v| 7.5 * v));
        let ex2 = recommend_exclusions(Some(&scaled(&low)), Some(&scaled(&high)), 0.05, &mut w).unwrap();
        assert_eq!(ex.len(), ex2.len());
        assert_eq!(ex[0].feature, ex2[0].feature);
    }

    #[test]
    fn exclusion_degenerate_cases() {
        let mut w = Vec::new();
        let flat = matrix(Array2::ones((10, 3)));
        assert!(recommend_exclusions(Some(&flat), Some(&flat), 0.05, &mut w).unwrap().is_empty());
        assert!(w.iter().any(|m| m.contains("do not vary")));

        let mut w = Vec::new();
        let tiny = matrix(varied_alpha(2, 0, 3));
        let big = matrix(varied_alpha(50, 0, 4));
        let ex = recommend_exclusions(Some(&tiny), Some(&big), 0.05, &mut w).unwrap();
        assert!(w.iter().any(|m| m.contains("fewer than 3")));
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].ci_upper_low, None);
    }

    #[test]
    fn nonlinearity_rule() {
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / 10.0 - 3.0).collect();
        let source = Array2::from_shape_fn((n, 2), |(i, _)| x[i]);
        let alpha = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { 2.0 * x[i] } else { x[i] * x[i] - 3.0 });
        let att = matrix(alpha);
        let schema = continuous_schema(2);
        let view = CohortView {
            cohort: Cohort::High,
            att: &att,
            source: source.view(),
        };
        let mut w = Vec::new();
        let nl = recommend_nonlinear(&schema, &[view], &BTreeSet::new(), 0.1, &mut w);
        assert_eq!(nl.len(), 1);
        assert_eq!(nl[0].feature, "x2");
        assert!(nl[0].r_high.unwrap().abs() < 0.1 && nl[0].r_low.is_none());

        let excluded: BTreeSet<String> = ["x2".to_string()].into();
        assert!(recommend_nonlinear(&schema, &[view], &excluded, 0.1, &mut w).is_empty());

        let att2 = matrix(att.alpha.mapv(|v| 3.0 * v + 1.0));
        let source2 = source.mapv(|v| 0.5 * v - 4.0);
        let view2 = CohortView {
            cohort: Cohort::High,
            att: &att2,
            source: source2.view(),
        };
        let nl2 = recommend_nonlinear(&schema, &[view2], &BTreeSet::new(), 0.1, &mut w);
        assert_eq!(nl2.len(), 1);
        assert_abs_diff_eq!(nl2[0].r_high.unwrap(), nl[0].r_high.unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn sign_crossing_and_single_cloud() {
        let n = 120;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let source = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { x[i] } else { (i % 7) as f64 * 1.3 });
        let alpha = Array2::from_shape_fn((n, 2), |(i, j)| {
            if j == 0 {
                if x[i] < 70.0 { -1.0 } else { 1.0 }
            } else {
                0.5
            }
        });
        let att = matrix(alpha);
        let view = CohortView {
            cohort: Cohort::Low,
            att: &att,
            source: source.view(),
        };
        let config = RecommenderConfig {
            low_cardinality: 2,
            ..RecommenderConfig::default()
        };
        let found = detect_patterns(&continuous_schema(2), &view, &BTreeSet::new(), &config);
        let sign: Vec<_> = found.iter().filter(|f| f.pattern == Pattern::Sign).collect();
        assert_eq!(sign.len(), 1);
        assert_eq!(sign[0].feature, "x1");
        assert_eq!(sign[0].cutoff, Some(69.5));
        assert_eq!(sign[0].strata_sizes, (70, 50));
        assert!(found.iter().all(|f| f.feature == "x1"));
    }

    #[test]
    fn binary_feature_stratifies_by_value() {
        let schema = Schema::new(vec![FeatureSpec::binary("drug"), FeatureSpec::continuous("x")]).unwrap();
        let n = 80;
        let source = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { (i % 2) as f64 } else { i as f64 });
        let alpha = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { (i % 2) as f64 - 0.3 } else { 0.01 });
        let att = matrix(alpha);
        let view = CohortView {
            cohort: Cohort::High,
            att: &att,
            source: source.view(),
        };
        let found = detect_patterns(&schema, &view, &BTreeSet::new(), &RecommenderConfig::default());
        let b = found.iter().find(|f| f.feature == "drug").unwrap();
        assert_eq!(b.pattern, Pattern::Value);
        assert_eq!(b.partition, Some((vec!["0".to_string()], vec!["1".to_string()])));
        assert_eq!(b.strata_sizes, (40, 40));
    }

    #[test]
    fn two_means_needs_separation() {
        let sep: Vec<f64> = (0..60).map(|i| if i < 30 { -1.0 + 0.01 * i as f64 } else { 2.0 + 0.01 * i as f64 }).collect();
        let (_, l, r) = two_means(&sep, 30).unwrap();
        assert_eq!((l.len(), r.len()), (30, 30));
        assert!(two_means(&[0.5; 60], 30).is_none());
        assert!(two_means(&sep[..50], 30).is_none());
    }

    #[test]
    fn stratified_tests_find_planted_interaction() {
        let schema = continuous_schema(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let source = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        // the stratifier flips the sign of a skewed contribution of x2
        let f = |x: &[f64]| Ok(2.0 * x[0] * x[1] * x[1] + x[2]);
        let explainer = ExplainerConfig::default();
        let preds = vec![0.0; n];
        let ctx = StratumContext {
            model_fn: &f,
            model_id: "toy",
            schema: &schema,
            source: source.view(),
            predictions: &preds,
            prediction_sd: 1.0,
            explainer: &explainer,
        };
        let (lo, hi): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| source[[i, 0]] <= 0.0);
        let finding = StratificationFinding {
            feature: "x1".into(),
            pattern: Pattern::Sign,
            cohort: Cohort::Low,
            cutoff: Some(0.0),
            partition: None,
            strata_sizes: (lo.len(), hi.len()),
            strata: (lo, hi),
        };
        let mut w = Vec::new();
        let pairs = recommend_interactions(&ctx, &[finding.clone()], &BTreeSet::new(), &RecommenderConfig::default(), &mut w).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].a.as_str(), pairs[0].b.as_str()), ("x1", "x2"));
        assert!(pairs[0].p < 1e-6);

        let small = RecommenderConfig {
            min_stratum_size: 150,
            ..RecommenderConfig::default()
        };
        assert!(recommend_interactions(&ctx, &[finding], &BTreeSet::new(), &small, &mut w).unwrap().is_empty());
        assert!(w.iter().any(|m| m.contains("below minimum")));
    }

    #[test]
    fn plan_compilation() {
        let schema = continuous_schema(4);
        let base = ModelPlan::baseline(&schema);
        assert_eq!(compile_plan(&base, &RecommendationSet::default()), base);

        let recs = RecommendationSet {
            exclusions: vec![ExclusionEvidence {
                feature: "x4".into(),
                ci_upper_low: Some(0.0),
                ci_upper_high: Some(0.0),
                threshold: 0.1,
                threshold_low: Some(0.1),
                threshold_high: Some(0.1),
            }],
            nonlinear: vec![NonlinearEvidence {
                feature: "x1".into(),
                r_low: Some(0.01),
                p_low: Some(0.9),
                r_high: None,
                p_high: None,
            }],
            interactions: vec![InteractionEvidence {
                a: "x2".into(),
                b: "x4".into(),
                stratifier: "x4".into(),
                pattern: Pattern::Value,
                p: 0.01,
                cohort: Cohort::High,
            }],
        };
        let plan = compile_plan(&base, &recs);
        assert_eq!(plan.included_features.len(), 3);
        assert!(plan.quadratic_terms.contains("x1"));
        assert!(plan.interaction_pairs.contains(&("x2".to_string(), "x4".to_string())));
        let json = serde_json::to_value(&recs).unwrap();
        assert_eq!(json["interactions"][0]["pattern"], "B_value");
        assert_eq!(json["interactions"][0]["cohort"], "high");
        let empty = serde_json::to_string(&RecommendationSet::default()).unwrap();
        assert_eq!(empty, r#"{"exclusions":[],"nonlinear":[],"interactions":[]}"#);
    }
}
