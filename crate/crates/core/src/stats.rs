//! Statistical kernels: Pearson correlation, Wilcoxon rank-sum and the
//! percentile bootstrap (plain and paired).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Product-moment correlation with a two-sided t-test on `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!(
            "pearson: lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Argument(format!("pearson: need n >= 3, got {n}")));
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateVariance("pearson: constant input".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if 1.0 - r.abs() <= 1e-12 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(CorrelationResult { r, p_value, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSumMode {
    Exact,
    NormalApprox,
    /// Exact when `n1 + n2 <= 12` and there are no ties, otherwise normal.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann–Whitney U of the first sample.
    pub u_statistic: f64,
    pub z: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub exact: bool,
}

/// Largest pooled size for which [`RankSumMode::Exact`] enumerates assignments.
pub const EXACT_RANK_SUM_LIMIT: usize = 24;

/// Two-sided Wilcoxon rank-sum (Mann–Whitney) test with midranks.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64], mode: RankSumMode) -> Result<RankSumResult> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::Argument("rank-sum test needs two non-empty groups".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let n = pooled.len();
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;

    let tie_sum = tie_term(&pooled);
    let has_ties = tie_sum > 0.0;
    let n1f = n1 as f64;
    let n2f = n2 as f64;
    let nf = n as f64;
    let mu = n1f * n2f / 2.0;
    let var = n1f * n2f / 12.0 * ((nf + 1.0) - tie_sum / (nf * (nf - 1.0)).max(1.0));
    let z = if var > 0.0 {
        let d = u - mu;
        d.signum() * (d.abs() - 0.5).max(0.0) / var.sqrt()
    } else {
        0.0
    };

    let use_exact = match mode {
        RankSumMode::Exact => {
            if n > EXACT_RANK_SUM_LIMIT {
                return Err(Error::Argument(format!(
                    "exact rank-sum limited to {EXACT_RANK_SUM_LIMIT} pooled values, got {n}"
                )));
            }
            true
        }
        RankSumMode::NormalApprox => false,
        RankSumMode::Auto => n <= 12 && !has_ties,
    };

    let p_value = if use_exact {
        exact_rank_sum_p(&ranks, n1, r1)
    } else if var > 0.0 {
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * (1.0 - std.cdf(z.abs()))).clamp(0.0, 1.0)
    } else {
        1.0
    };

    Ok(RankSumResult {
        u_statistic: u,
        z,
        p_value,
        n1,
        n2,
        exact: use_exact,
    })
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

fn tie_term(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && sorted[end] == sorted[start] {
            end += 1;
        }
        let t = (end - start) as f64;
        sum += t * t * t - t;
        start = end;
    }
    sum
}

/// Enumerates every way of assigning the pooled ranks to the first group and
/// returns `min(1, 2·min(P(R ≤ r1), P(R ≥ r1)))`.
fn exact_rank_sum_p(ranks: &[f64], n1: usize, r1: f64) -> f64 {
    let n = ranks.len();
    let eps = 1e-9;
    let (mut total, mut le, mut ge) = (0u64, 0u64, 0u64);
    let mut chosen: Vec<usize> = (0..n1).collect();
    loop {
        let s: f64 = chosen.iter().map(|&k| ranks[k]).sum();
        total += 1;
        if s <= r1 + eps {
            le += 1;
        }
        if s >= r1 - eps {
            ge += 1;
        }
        // next combination in lexicographic order
        let mut i = n1;
        loop {
            if i == 0 {
                let tail = le.min(ge) as f64 / total as f64;
                return (2.0 * tail).min(1.0);
            }
            i -= 1;
            if chosen[i] < n - n1 + i {
                chosen[i] += 1;
                for k in i + 1..n1 {
                    chosen[k] = chosen[k - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    /// Resamples on which the statistic was defined.
    pub n_resamples: usize,
    /// Resamples dropped because the statistic was undefined.
    pub n_dropped: usize,
    pub seed: u64,
}

impl BootstrapCI {
    /// Degenerate interval for a statistic with no sampling variability.
    pub fn point(estimate: f64, seed: u64) -> Self {
        Self {
            estimate,
            lower: estimate,
            upper: estimate,
            n_resamples: 0,
            n_dropped: 0,
            seed,
        }
    }
}

/// Row indices of bootstrap resample `b`.
///
/// Each resample owns an independent ChaCha stream keyed by `(seed, b)`, so the
/// draws do not depend on how resamples are scheduled across threads.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn check_bootstrap_args(n: usize, b: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Argument(format!("bootstrap needs n >= 2, got {n}")));
    }
    if b < 100 {
        return Err(Error::Argument(format!("bootstrap needs B >= 100, got {b}")));
    }
    Ok(())
}

fn interval(estimate: f64, mut draws: Vec<f64>, dropped: usize, seed: u64) -> Result<BootstrapCI> {
    if draws.is_empty() {
        return Err(Error::UndefinedMetric(
            "statistic undefined on every bootstrap resample".into(),
        ));
    }
    draws.sort_by(f64::total_cmp);
    Ok(BootstrapCI {
        estimate,
        lower: percentile_sorted(&draws, 0.025),
        upper: percentile_sorted(&draws, 0.975),
        n_resamples: draws.len(),
        n_dropped: dropped,
        seed,
    })
}

/// 95% percentile bootstrap of `statistic` over `b` size-`n` resamples.
///
/// The statistic receives a multiset of row indices and returns `None` when it
/// is undefined on that resample; such resamples are dropped and counted.
pub fn bootstrap_percentile<F>(n: usize, statistic: F, b: usize, seed: u64) -> Result<BootstrapCI>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    check_bootstrap_args(n, b)?;
    let identity: Vec<usize> = (0..n).collect();
    let estimate = statistic(&identity).ok_or_else(|| {
        Error::UndefinedMetric("statistic undefined on the original sample".into())
    })?;
    let draws: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|k| statistic(&resample_indices(n, seed, k)))
        .collect();
    let dropped = draws.iter().filter(|d| d.is_none()).count();
    interval(estimate, draws.into_iter().flatten().collect(), dropped, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedBootstrap {
    /// Interval over `metric_b − metric_a`.
    pub delta: BootstrapCI,
    pub p_value: f64,
}

/// Paired bootstrap of `metric_b − metric_a` on shared resamples.
///
/// `p = 2·min(P(Δ* ≤ 0), P(Δ* ≥ 0))`, clamped to `[2/B, 1]` where `B` counts the
/// resamples on which both metrics were defined.
pub fn paired_bootstrap_delta<A, B>(
    n: usize,
    metric_a: A,
    metric_b: B,
    b: usize,
    seed: u64,
) -> Result<PairedBootstrap>
where
    A: Fn(&[usize]) -> Option<f64> + Sync,
    B: Fn(&[usize]) -> Option<f64> + Sync,
{
    check_bootstrap_args(n, b)?;
    let identity: Vec<usize> = (0..n).collect();
    let (Some(a0), Some(b0)) = (metric_a(&identity), metric_b(&identity)) else {
        return Err(Error::UndefinedMetric(
            "metric undefined on the original sample".into(),
        ));
    };
    let draws: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let idx = resample_indices(n, seed, k);
            Some(metric_b(&idx)? - metric_a(&idx)?)
        })
        .collect();
    let dropped = draws.iter().filter(|d| d.is_none()).count();
    let deltas: Vec<f64> = draws.into_iter().flatten().collect();
    let valid = deltas.len();
    let le = deltas.iter().filter(|&&d| d <= 0.0).count() as f64;
    let ge = deltas.iter().filter(|&&d| d >= 0.0).count() as f64;
    let delta = interval(b0 - a0, deltas, dropped, seed)?;
    let raw_p = 2.0 * le.min(ge) / valid as f64;
    let p_value = raw_p.clamp(2.0 / valid as f64, 1.0);
    Ok(PairedBootstrap { delta, p_value })
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); 0 for fewer than two values.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (x.len() - 1) as f64).sqrt()
}

/// `(mean, lower, upper)` of the normal-approximation 95% CI of a mean.
pub fn normal_mean_ci(x: &[f64]) -> (f64, f64, f64) {
    let m = mean(x);
    let half = Z_975 * sample_sd(x) / (x.len() as f64).sqrt();
    (m, m - half, m + half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        assert_abs_diff_eq!(pearson(&[1., 2., 3.], &[1., 2., 3.]).unwrap().r, 1.0, epsilon = 1e-12);
        // hand evaluation: sxy = 3, sxx = 2, syy = 14/3
        let r = pearson(&[1., 2., 3.], &[1., 2., 4.]).unwrap().r;
        assert_abs_diff_eq!(r, 3.0 / (2.0f64 * 14.0 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.9820, epsilon = 5e-5);
        let res = pearson(&[1., 2., 3., 4.], &[4., 3., 2., 1.]).unwrap();
        assert_abs_diff_eq!(res.r, -1.0, epsilon = 1e-12);
        assert_eq!(res.p_value, 0.0);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson(&[1., 1., 1.], &[1., 2., 3.]),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(pearson(&[1., 2.], &[1., 2.]).is_err());
        assert!(pearson(&[1., 2., 3.], &[1., 2.]).is_err());
    }

    #[test]
    fn pearson_p_value_matches_t_table() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let noise = [1., -1., 1., -1., 1., -1., 1., -1., 1., -1., 1., -1.];
        let res = pearson(&x, &x.iter().zip(noise).map(|(a, b)| a + 6.0 * b).collect::<Vec<_>>()).unwrap();
        let df = 10.0;
        let t = res.r * (df / (1.0 - res.r * res.r)).sqrt();
        let expected = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()));
        assert_abs_diff_eq!(res.p_value, expected, epsilon = 1e-12);
    }

    #[test]
    fn rank_sum_examples() {
        let r = wilcoxon_rank_sum(&[1., 2.], &[3., 4.], RankSumMode::Auto).unwrap();
        assert!(r.exact);
        assert_eq!(r.u_statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 1.0 / 3.0, epsilon = 1e-12);

        let r = wilcoxon_rank_sum(&[1., 2., 3.], &[4., 5., 6.], RankSumMode::Auto).unwrap();
        assert_eq!(r.u_statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 0.1, epsilon = 1e-12);

        let r = wilcoxon_rank_sum(&[5., 5., 5.], &[5., 5., 5.], RankSumMode::Auto).unwrap();
        assert!(!r.exact);
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn rank_sum_normal_with_ties_matches_hand_value() {
        // a = (1,2,2), b = (2,3,4): ranks 1,3,3 | 3,5,6; U = 7 − 6 = 1
        // tie term 24 ⇒ var = 9/12·(7 − 24/30) = 4.65; z = −(3.5 − 0.5)/√4.65
        let r = wilcoxon_rank_sum(&[1., 2., 2.], &[2., 3., 4.], RankSumMode::Auto).unwrap();
        assert_eq!(r.u_statistic, 1.0);
        assert_abs_diff_eq!(r.z, -3.0 / 4.65f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn rank_sum_empty_group() {
        assert!(wilcoxon_rank_sum(&[], &[1.0], RankSumMode::Auto).is_err());
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3., 1., 3., 2.]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn bootstrap_constant_and_determinism() {
        let ci = bootstrap_percentile(5, |_| Some(2.5), 200, 3).unwrap();
        assert_eq!((ci.lower, ci.upper, ci.estimate), (2.5, 2.5, 2.5));

        let data = [0.0, 0.0, 0.0, 10.0];
        let stat = |idx: &[usize]| Some(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64);
        let a = bootstrap_percentile(4, stat, 1000, 9).unwrap();
        let b = bootstrap_percentile(4, stat, 1000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.lower >= 0.0 && a.lower <= 2.5 && a.upper >= 2.5);
        assert_eq!(a.estimate, 2.5);
    }

    #[test]
    fn bootstrap_drops_undefined_resamples() {
        let ci = bootstrap_percentile(
            3,
            |idx: &[usize]| if idx.contains(&0) { Some(1.0) } else { None },
            500,
            1,
        )
        .unwrap();
        assert!(ci.n_dropped > 0);
        assert_eq!(ci.n_dropped + ci.n_resamples, 500);
        assert!(bootstrap_percentile(3, |_| Some(1.0), 50, 1).is_err());
    }

    #[test]
    fn paired_examples() {
        let f = |idx: &[usize]| Some(idx.iter().sum::<usize>() as f64);
        let same = paired_bootstrap_delta(10, f, f, 400, 2).unwrap();
        assert_eq!(same.delta.estimate, 0.0);
        assert_eq!(same.p_value, 1.0);

        let g = |idx: &[usize]| f(idx).map(|v| v + 0.01);
        let shift = paired_bootstrap_delta(10, f, g, 400, 2).unwrap();
        assert_abs_diff_eq!(shift.delta.lower, 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(shift.delta.upper, 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(shift.p_value, 2.0 / 400.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..40),
            scale in 0.1f64..10.0,
            shift in -100.0f64..100.0,
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let (Ok(a), Ok(b)) = (pearson(&x, &y), pearson(&y, &x)) {
                prop_assert!((a.r - b.r).abs() < 1e-12);
                let xs: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
                let c = pearson(&xs, &y).unwrap();
                prop_assert!((a.r - c.r).abs() < 1e-9);
            }
        }

        #[test]
        fn rank_sum_monotone_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 1..15),
            b in prop::collection::vec(-5.0f64..5.0, 1..15),
        ) {
            let base = wilcoxon_rank_sum(&a, &b, RankSumMode::Auto).unwrap();
            let f = |v: &f64| v.exp() * 3.0 + 1.0;
            let ta: Vec<f64> = a.iter().map(f).collect();
            let tb: Vec<f64> = b.iter().map(f).collect();
            let t = wilcoxon_rank_sum(&ta, &tb, RankSumMode::Auto).unwrap();
            prop_assert_eq!(base.u_statistic, t.u_statistic);
            prop_assert!((base.p_value - t.p_value).abs() < 1e-12);
            prop_assert!(base.u_statistic >= 0.0 && base.u_statistic <= (a.len() * b.len()) as f64);
        }
    }
}
