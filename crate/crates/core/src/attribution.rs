//! Shapley attributions against a single reference point.
//!
//! Masking works on source features: a row holds one value per schema feature,
//! and the model function is responsible for encoding the hybrid row.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, Schema};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceProvenance {
    GlobalMean,
    StratumMean,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub x_tilde: Vec<f64>,
    pub provenance: ReferenceProvenance,
}

impl ReferencePoint {
    /// Feature-wise mean of `rows`; nominal features take their modal level,
    /// with ties going to the lowest level index.
    pub fn mean_of(schema: &Schema, rows: ArrayView2<'_, f64>, provenance: ReferenceProvenance) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::Argument("reference over an empty set of rows".into()));
        }
        if rows.ncols() != schema.len() {
            return Err(Error::Shape(format!(
                "rows have {} features, schema has {}",
                rows.ncols(),
                schema.len()
            )));
        }
        let x_tilde = schema
            .features()
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let col = rows.column(j);
                if f.kind == FeatureKind::Nominal {
                    let mut counts = vec![0usize; f.levels.len()];
                    for &v in col {
                        counts[v.round() as usize] += 1;
                    }
                    let best = counts.iter().copied().max().unwrap_or(0);
                    counts.iter().position(|&c| c == best).unwrap_or(0) as f64
                } else {
                    col.sum() / col.len() as f64
                }
            })
            .collect();
        Ok(Self {
            x_tilde,
            provenance,
        })
    }

    pub fn user_supplied(x_tilde: Vec<f64>) -> Result<Self> {
        if x_tilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("reference values must be finite".into()));
        }
        Ok(Self {
            x_tilde,
            provenance: ReferenceProvenance::UserSupplied,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMode {
    /// Exact when `M <= exact_threshold`, kernel otherwise.
    #[default]
    Auto,
    Exact,
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub mode: ExplainMode,
    pub exact_threshold: usize,
    /// Kernel-mode coalition budget; `None` means `2M + 2048`.
    pub n_coalitions: Option<usize>,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            mode: ExplainMode::Auto,
            exact_threshold: 13,
            n_coalitions: None,
            seed: 0,
            tolerance: 1e-6,
        }
    }
}

impl ExplainerConfig {
    pub fn budget(&self, m: usize) -> usize {
        self.n_coalitions.unwrap_or(2 * m + 2048)
    }

    fn use_exact(&self, m: usize) -> bool {
        match self.mode {
            ExplainMode::Exact => true,
            ExplainMode::Kernel => false,
            ExplainMode::Auto => m <= self.exact_threshold,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !self.use_exact(m) && self.budget(m) < 2 * m {
            return Err(Error::Argument(format!(
                "n_coalitions {} below 2M = {}",
                self.budget(m),
                2 * m
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Argument("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// A model seen as a function of source-feature vectors.
pub trait CoalitionModel {
    fn value(&self, z: &[f64]) -> Result<f64>;

    /// Values at every hybrid of `x` and `reference`, indexed by coalition
    /// bitmask (bit `j` set takes feature `j` from `x`).
    fn all_coalitions(&self, x: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
        let m = x.len();
        let mut hybrid = reference.to_vec();
        (0..1usize << m)
            .map(|s| {
                for j in 0..m {
                    hybrid[j] = if s >> j & 1 == 1 { x[j] } else { reference[j] };
                }
                self.value(&hybrid)
            })
            .collect()
    }
}

impl<F> CoalitionModel for F
where
    F: Fn(&[f64]) -> Result<f64> + ?Sized,
{
    fn value(&self, z: &[f64]) -> Result<f64> {
        self(z)
    }
}

/// Output at the hybrid row taking `x` on coalition `mask` and the reference elsewhere.
pub fn masked_eval<F>(model_fn: &F, x: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64>
where
    F: CoalitionModel + ?Sized,
{
    let hybrid: Vec<f64> = mask
        .iter()
        .zip(x.iter().zip(reference))
        .map(|(&on, (&a, &b))| if on { a } else { b })
        .collect();
    model_fn.value(&hybrid)
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley values by full enumeration of the `2^M` coalitions.
pub fn exact_shapley<F>(model_fn: &F, x: &[f64], reference: &[f64], exact_threshold: usize) -> Result<Vec<f64>>
where
    F: CoalitionModel + ?Sized,
{
    let m = x.len();
    check_dims(x, reference)?;
    if m > exact_threshold {
        return Err(Error::Mode(format!(
            "{m} features exceed the exact enumeration limit {exact_threshold}; use kernel mode"
        )));
    }
    let values = model_fn.all_coalitions(x, reference)?;
    let weight: Vec<f64> = (0..m)
        .map(|s| factorial(s) * factorial(m - s - 1) / factorial(m))
        .collect();
    let mut alpha = vec![0.0; m];
    for s in 0..1usize << m {
        let size = s.count_ones() as usize;
        for (i, a) in alpha.iter_mut().enumerate() {
            if s >> i & 1 == 0 {
                *a += weight[size] * (values[s | 1 << i] - values[s]);
            }
        }
    }
    Ok(alpha)
}

fn check_dims(x: &[f64], reference: &[f64]) -> Result<()> {
    if x.len() != reference.len() {
        return Err(Error::Shape(format!(
            "row has {} features, reference {}",
            x.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// Kernel SHAP estimate together with whether the regularized fallback was used.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEstimate {
    pub alpha: Vec<f64>,
    pub regularized: bool,
    pub rank: usize,
}

/// Shapley kernel weight for a coalition of size `s` out of `m`.
pub fn shapley_kernel_weight(m: usize, s: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

/// Constrained weighted least squares over coalitions.
///
/// All `2^M − 2` proper coalitions are used when `M <= exact_threshold`;
/// otherwise coalitions are drawn in complementary pairs, fully enumerating the
/// smallest sizes that fit the budget and sampling the rest.
pub fn kernel_shap<F>(
    model_fn: &F,
    x: &[f64],
    reference: &[f64],
    config: &ExplainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<KernelEstimate>
where
    F: CoalitionModel + ?Sized,
{
    let m = x.len();
    check_dims(x, reference)?;
    if m < 2 {
        return Err(Error::Argument("kernel SHAP needs at least 2 features".into()));
    }
    let f_x = model_fn.value(x)?;
    let f_ref = model_fn.value(reference)?;
    if m <= config.exact_threshold {
        let values = model_fn.all_coalitions(x, reference)?;
        let rows: Vec<(u64, f64, f64)> = (1..(1u64 << m) - 1)
            .map(|s| {
                let w = shapley_kernel_weight(m, s.count_ones() as usize);
                (s, w, values[s as usize] - f_ref)
            })
            .collect();
        return Ok(solve_constrained(m, &rows, f_x - f_ref));
    }
    let coalitions = sample_coalitions(m, config.budget(m), rng)?;
    let mut mask = vec![false; m];
    let mut rows = Vec::with_capacity(coalitions.len());
    for &(s, w) in &coalitions {
        for (j, b) in mask.iter_mut().enumerate() {
            *b = s >> j & 1 == 1;
        }
        rows.push((s, w, masked_eval(model_fn, x, reference, &mask)? - f_ref));
    }
    Ok(solve_constrained(m, &rows, f_x - f_ref))
}

/// Solve `min Σ w (y − z·φ)²` subject to `Σ φ = delta` by eliminating the last coordinate.
fn solve_constrained(m: usize, rows: &[(u64, f64, f64)], delta: f64) -> KernelEstimate {
    let q = m - 1;
    let mut ata = DMatrix::<f64>::zeros(q, q);
    let mut atb = DVector::<f64>::zeros(q);
    let mut z = vec![0.0; q];
    for &(s, w, y) in rows {
        let last = (s >> q & 1) as f64;
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = (s >> j & 1) as f64 - last;
        }
        let target = y - last * delta;
        for a in 0..q {
            if z[a] == 0.0 {
                continue;
            }
            atb[a] += w * z[a] * target;
            for b in 0..q {
                ata[(a, b)] += w * z[a] * z[b];
            }
        }
    }
    let rank = ata.rank(1e-12 * ata.amax().max(1e-300));
    let (phi, regularized) = match (rank == q).then(|| ata.clone().cholesky()).flatten() {
        Some(chol) => (chol.solve(&atb), false),
        None => {
            let mut reg = ata;
            for j in 0..q {
                reg[(j, j)] += 1e-8;
            }
            let phi = reg
                .clone()
                .cholesky()
                .map(|c| c.solve(&atb))
                .or_else(|| reg.lu().solve(&atb))
                .unwrap_or_else(|| DVector::zeros(q));
            (phi, true)
        }
    };
    let mut alpha: Vec<f64> = phi.iter().copied().collect();
    alpha.push(delta - alpha.iter().sum::<f64>());
    KernelEstimate {
        alpha,
        regularized,
        rank,
    }
}

fn sample_coalitions(m: usize, budget: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(u64, f64)>> {
    if m >= 64 {
        return Err(Error::Mode(format!("kernel sampling supports at most 63 features, got {m}")));
    }
    let full = (1u64 << m) - 1;
    let n_sizes = (m - 1).div_ceil(2);
    let n_paired = (m - 1) / 2;
    let mut size_weight: Vec<f64> = (1..=n_sizes)
        .map(|s| {
            let w = (m - 1) as f64 / (s * (m - s)) as f64;
            if s <= n_paired {
                2.0 * w
            } else {
                w
            }
        })
        .collect();
    let total: f64 = size_weight.iter().sum();
    size_weight.iter_mut().for_each(|w| *w /= total);

    let mut out: Vec<(u64, f64)> = Vec::new();
    let mut left = budget as f64;
    let mut weight_left = 1.0;
    let mut first_sampled = n_sizes;
    for (k, s) in (1..=n_sizes).enumerate() {
        let paired = s <= n_paired;
        let count = binomial(m, s) * if paired { 2.0 } else { 1.0 };
        let share = size_weight[k] / weight_left;
        if left * share / count < 1.0 - 1e-8 {
            first_sampled = k;
            break;
        }
        let w = size_weight[k] / count;
        for mask in subsets_of_size(m, s) {
            out.push((mask, w));
            if paired {
                out.push((full ^ mask, w));
            }
        }
        left -= count;
        weight_left -= size_weight[k];
    }

    if first_sampled < n_sizes && left >= 2.0 {
        let rest = &size_weight[first_sampled..];
        let rest_total: f64 = rest.iter().sum();
        let mut counts: HashMap<u64, f64> = HashMap::new();
        let mut order: Vec<u64> = Vec::new();
        let mut drawn = 0.0;
        let mut attempts = 0usize;
        while drawn < left && attempts < 100 * budget {
            attempts += 1;
            let mut u = rng.random::<f64>() * rest_total;
            let mut k = 0;
            while k + 1 < rest.len() && u >= rest[k] {
                u -= rest[k];
                k += 1;
            }
            let s = first_sampled + k + 1;
            let mask = random_subset(m, s, rng);
            let paired = s <= n_paired;
            for c in if paired { vec![mask, full ^ mask] } else { vec![mask] } {
                match counts.get_mut(&c) {
                    Some(v) => *v += 1.0,
                    None => {
                        counts.insert(c, 1.0);
                        order.push(c);
                        drawn += 1.0;
                    }
                }
            }
        }
        let total_count: f64 = counts.values().sum();
        for c in order {
            out.push((c, counts[&c] / total_count * weight_left));
        }
    }
    Ok(out)
}

fn subsets_of_size(m: usize, s: usize) -> Vec<u64> {
    (0..1u64 << m).filter(|v| v.count_ones() as usize == s).collect()
}

fn random_subset(m: usize, s: usize, rng: &mut ChaCha8Rng) -> u64 {
    rand::seq::index::sample(rng, m, s)
        .into_iter()
        .fold(0u64, |acc, j| acc | 1 << j)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub subject_index: Vec<usize>,
    pub feature_names: Vec<String>,
    /// `n × M` Shapley values.
    pub alpha: Array2<f64>,
    pub reference: ReferencePoint,
    pub model_id: String,
    pub f_x: Vec<f64>,
    pub f_ref: f64,
    /// `f_x − f_ref − Σ α` per row.
    pub completeness_residual: Vec<f64>,
    pub exact: bool,
    /// Rows whose kernel system needed the ridge fallback.
    pub regularized_rows: Vec<usize>,
}

impl AttributionMatrix {
    pub fn n_rows(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.feature_names.iter().position(|n| n == name)?;
        Some(self.alpha.column(j).to_vec())
    }

    /// One row per subject: feature attributions, then `f_x` and `f_ref`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = self.feature_names.clone();
        header.push("f_x".into());
        header.push("f_ref".into());
        w.write_record(&header)?;
        for (i, row) in self.alpha.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.f_x[i].to_string());
            rec.push(self.f_ref.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Attributions for every row of a cohort, in parallel with per-row RNG streams.
pub fn explain_cohort<F>(
    model_fn: &F,
    model_id: &str,
    feature_names: &[String],
    rows: ArrayView2<'_, f64>,
    subject_index: &[usize],
    reference: &ReferencePoint,
    config: &ExplainerConfig,
) -> Result<AttributionMatrix>
where
    F: CoalitionModel + Sync + ?Sized,
{
    let m = rows.ncols();
    if feature_names.len() != m || reference.x_tilde.len() != m {
        return Err(Error::Shape(format!(
            "cohort has {m} features, names {}, reference {}",
            feature_names.len(),
            reference.x_tilde.len()
        )));
    }
    if subject_index.len() != rows.nrows() {
        return Err(Error::Shape("subject ids do not match cohort rows".into()));
    }
    config.validate(m)?;
    let exact = config.use_exact(m);
    let f_ref = model_fn.value(&reference.x_tilde)?;

    let results: Vec<Result<(Vec<f64>, f64, bool)>> = (0..rows.nrows())
        .into_par_iter()
        .map(|i| {
            let x = rows.row(i).to_vec();
            let f_x = model_fn.value(&x)?;
            if exact {
                let alpha = exact_shapley(model_fn, &x, &reference.x_tilde, config.exact_threshold)?;
                Ok((alpha, f_x, false))
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(subject_index[i] as u64);
                let est = kernel_shap(model_fn, &x, &reference.x_tilde, config, &mut rng)?;
                Ok((est.alpha, f_x, est.regularized))
            }
        })
        .collect();

    let n = rows.nrows();
    let mut alpha = Array2::zeros((n, m));
    let mut f_x = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(n);
    let mut regularized_rows = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (a, fx, reg) = r?;
        let res = fx - f_ref - a.iter().sum::<f64>();
        if exact && res.abs() > config.tolerance {
            return Err(Error::Internal(format!(
                "completeness violated for subject {}: residual {res:e}",
                subject_index[i]
            )));
        }
        alpha.row_mut(i).assign(&ndarray::ArrayView1::from(&a));
        f_x.push(fx);
        residual.push(res);
        if reg {
            regularized_rows.push(subject_index[i]);
        }
    }
    Ok(AttributionMatrix {
        subject_index: subject_index.to_vec(),
        feature_names: feature_names.to_vec(),
        alpha,
        reference: reference.clone(),
        model_id: model_id.into(),
        f_x,
        f_ref,
        completeness_residual: residual,
        exact,
        regularized_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpec;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn ok<G: Fn(&[f64]) -> f64>(g: G) -> impl Fn(&[f64]) -> Result<f64> {
        move |x| Ok(g(x))
    }

    fn wavy(x: &[f64]) -> f64 {
        let m = x.len();
        let mut v = 0.3 * x[0] * x[m - 1] + (x[1] - 0.5).powi(2);
        for j in 0..m {
            v += (j as f64 + 1.0) * 0.1 * x[j] + 0.2 * (x[j] * x[(j + 2) % m]).sin();
        }
        v + if x[0] > 0.4 { 1.0 } else { 0.0 }
    }

    #[test]
    fn masked_eval_examples() {
        let f = ok(|x| x[0] * x[1]);
        assert_eq!(masked_eval(&f, &[2., 3.], &[0., 0.], &[true, false]).unwrap(), 0.0);
        assert_eq!(masked_eval(&f, &[2., 3.], &[1., 1.], &[true, true]).unwrap(), 6.0);
        assert_eq!(masked_eval(&f, &[2., 3.], &[1., 1.], &[false, false]).unwrap(), 1.0);
    }

    #[test]
    fn exact_hand_games() {
        let a = exact_shapley(&ok(|x| 2.0 * x[0] + 3.0 * x[1]), &[1., 1.], &[0., 0.], 13).unwrap();
        assert_eq!(a, vec![2.0, 3.0]);
        let a = exact_shapley(&ok(|x| x[0] * x[1]), &[2., 3.], &[0., 0.], 13).unwrap();
        assert_eq!(a, vec![3.0, 3.0]);
        let a = exact_shapley(&ok(|_| 7.0), &[2., 3., 4.], &[0., 0., 0.], 13).unwrap();
        assert_eq!(a, vec![0.0; 3]);
        let a = exact_shapley(&ok(|x| x[0] * x[1] * x[2]), &[1.; 3], &[0.; 3], 13).unwrap();
        for v in a {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert!(matches!(
            exact_shapley(&ok(|_| 0.0), &[0.; 14], &[0.; 14], 13),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn kernel_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = kernel_shap(&ok(|x| x[0] * x[1] * x[2]), &[1.; 3], &[0.; 3], &ExplainerConfig::default(), &mut rng).unwrap();
        for v in est.alpha {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
        assert!(!est.regularized);
    }

    #[test]
    fn kernel_enumeration_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in 2..=10 {
            let x: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let r: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let exact = exact_shapley(&ok(wavy), &x, &r, 13).unwrap();
            let kern = kernel_shap(&ok(wavy), &x, &r, &ExplainerConfig::default(), &mut rng).unwrap();
            for (a, b) in exact.iter().zip(&kern.alpha) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn sampled_kernel_recovers_additive_games() {
        let m = 16;
        let w: Vec<f64> = (0..m).map(|j| j as f64 - 7.5).collect();
        let f = ok(|x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum());
        let x: Vec<f64> = (0..m).map(|j| (j as f64).sin()).collect();
        let r = vec![0.25; m];
        for budget in [2 * m, 100, 2 * m + 2048] {
            let config = ExplainerConfig {
                n_coalitions: Some(budget),
                ..ExplainerConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(budget as u64);
            let est = kernel_shap(&f, &x, &r, &config, &mut rng).unwrap();
            for j in 0..m {
                assert_abs_diff_eq!(est.alpha[j], w[j] * (x[j] - r[j]), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn sampled_kernel_with_full_budget_is_exact() {
        let m = 14;
        let x: Vec<f64> = (0..m).map(|j| 0.1 * j as f64).collect();
        let r = vec![0.5; m];
        let config = ExplainerConfig {
            n_coalitions: Some((1 << m) - 2),
            ..ExplainerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = kernel_shap(&ok(wavy), &x, &r, &config, &mut rng).unwrap();
        let exact = exact_shapley(&ok(wavy), &x, &r, 14).unwrap();
        for (a, b) in exact.iter().zip(&est.alpha) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn sampled_kernel_is_close_to_exact() {
        let m = 14;
        let x: Vec<f64> = (0..m).map(|j| 0.07 * j as f64).collect();
        let r = vec![0.5; m];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est = kernel_shap(&ok(wavy), &x, &r, &ExplainerConfig::default(), &mut rng).unwrap();
        let exact = exact_shapley(&ok(wavy), &x, &r, 14).unwrap();
        let sum: f64 = est.alpha.iter().sum();
        assert_abs_diff_eq!(sum, exact.iter().sum::<f64>(), epsilon = 1e-9);
        for (a, b) in exact.iter().zip(&est.alpha) {
            assert_abs_diff_eq!(a, b, epsilon = 0.05);
        }
    }

    proptest! {
        #[test]
        fn symmetry_null_and_reference_shift(
            x in proptest::collection::vec(-2.0f64..2.0, 5),
            r in proptest::collection::vec(-2.0f64..2.0, 5),
        ) {
            // x0 and x1 enter symmetrically, x4 is ignored
            let f = ok(|v: &[f64]| (v[0] + v[1]).powi(2) + v[0] * v[1] * v[2] + v[3].exp());
            let mut xs = x.clone();
            xs[1] = xs[0];
            let mut rs = r.clone();
            rs[1] = rs[0];
            let a = exact_shapley(&f, &xs, &rs, 13).unwrap();
            prop_assert!((a[0] - a[1]).abs() < 1e-10);
            prop_assert_eq!(a[4], 0.0);
            let total: f64 = a.iter().sum();
            prop_assert!((total - (f(&xs).unwrap() - f(&rs).unwrap())).abs() < 1e-9);
            let zero = exact_shapley(&f, &x, &x, 13).unwrap();
            prop_assert!(zero.iter().all(|v| *v == 0.0));
        }
    }

    fn schema3() -> Schema {
        Schema::new(vec![
            FeatureSpec::continuous("a"),
            FeatureSpec::binary("b"),
            FeatureSpec::with_levels("c", FeatureKind::Nominal, &["x", "y", "z"]),
        ])
        .unwrap()
    }

    #[test]
    fn reference_means_and_modal_level() {
        let rows = array![[1.0, 1.0, 2.0], [3.0, 0.0, 2.0], [5.0, 0.0, 1.0], [7.0, 1.0, 0.0]];
        let r = ReferencePoint::mean_of(&schema3(), rows.view(), ReferenceProvenance::GlobalMean).unwrap();
        assert_eq!(r.x_tilde, vec![4.0, 0.5, 2.0]);
        let tie = array![[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]];
        let r = ReferencePoint::mean_of(&schema3(), tie.view(), ReferenceProvenance::StratumMean).unwrap();
        assert_eq!(r.x_tilde[2], 1.0);
        assert!(ReferencePoint::user_supplied(vec![f64::NAN]).is_err());
    }

    #[test]
    fn cohort_explanations() {
        let schema = schema3();
        let f = |src: &[f64]| {
            let e = schema.encode_source(src);
            Ok(e[0] * e[1] + 2.0 * e[2] - e[3] + e[0] * e[3])
        };
        let rows = array![[1.0, 1.0, 2.0], [3.0, 0.0, 1.0], [3.0, 0.0, 1.0], [0.5, 1.0, 0.0]];
        let reference = ReferencePoint::mean_of(&schema, rows.view(), ReferenceProvenance::GlobalMean).unwrap();
        let names = schema.names();
        let ids = [10, 11, 12, 13];
        let m = explain_cohort(&f, "toy", &names, rows.view(), &ids, &reference, &ExplainerConfig::default()).unwrap();
        assert!(m.exact);
        assert_eq!(m.alpha.row(1), m.alpha.row(2));
        assert!(m.completeness_residual.iter().all(|r| r.abs() <= 1e-12));
        let single = exact_shapley(&f, &rows.row(0).to_vec(), &reference.x_tilde, 13).unwrap();
        assert_eq!(m.alpha.row(0).to_vec(), single);

        let kernel = ExplainerConfig {
            mode: ExplainMode::Kernel,
            ..ExplainerConfig::default()
        };
        let one = explain_cohort(&f, "toy", &names, rows.slice(ndarray::s![0..1, ..]), &ids[..1], &reference, &kernel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        rng.set_stream(10);
        let direct = kernel_shap(&f, &rows.row(0).to_vec(), &reference.x_tilde, &kernel, &mut rng).unwrap();
        assert_eq!(one.alpha.row(0).to_vec(), direct.alpha);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "a,b,c,f_x,f_ref");
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn broken_masking_is_caught() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        // output drifts between calls, so the coalition values are inconsistent
        let f = |x: &[f64]| Ok(x[0] + calls.fetch_add(1, Ordering::Relaxed) as f64 * 1e-3);
        let rows = array![[1.0, 2.0]];
        let reference = ReferencePoint::user_supplied(vec![0.0, 0.0]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let err = explain_cohort(&f, "drift", &names, rows.view(), &[0], &reference, &ExplainerConfig::default());
        assert!(matches!(err, Err(Error::Internal(_))));
    }
}
