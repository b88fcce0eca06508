use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, Schema, SurvivalDataset};
use crate::error::{Error, Result};

/// Which covariates, squared terms and pairwise products enter a Cox model.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelPlan {
    pub included_features: BTreeSet<String>,
    pub quadratic_terms: BTreeSet<String>,
    /// Unordered pairs, stored with the lexicographically smaller name first.
    pub interaction_pairs: BTreeSet<(String, String)>,
}

impl ModelPlan {
    /// All schema features, no extra terms.
    pub fn baseline(schema: &Schema) -> Self {
        Self {
            included_features: schema.names().into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn add_pair(&mut self, a: &str, b: &str) {
        self.interaction_pairs.insert(ordered_pair(a, b));
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let known = |name: &str| {
            schema
                .feature(name)
                .ok_or_else(|| Error::Plan(format!("unknown feature `{name}`")))
        };
        for f in &self.included_features {
            known(f)?;
        }
        for f in &self.quadratic_terms {
            let spec = known(f)?;
            if !matches!(spec.kind, FeatureKind::Continuous | FeatureKind::Ordinal) {
                return Err(Error::Plan(format!(
                    "quadratic term on {:?} feature `{f}`; only continuous or ordinal allowed",
                    spec.kind
                )));
            }
        }
        for (a, b) in &self.interaction_pairs {
            known(a)?;
            known(b)?;
            if a == b {
                return Err(Error::Plan(format!("interaction pair repeats `{a}`")));
            }
        }
        Ok(())
    }
}

pub fn ordered_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Base,
    Quadratic,
    Interaction,
}

/// One design column and how to rebuild it from encoded dataset columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub kind: TermKind,
    /// Schema features the term derives from.
    pub sources: Vec<String>,
    /// Encoded dataset columns multiplied together (one for base, the same
    /// column twice for quadratic, two for interaction).
    pub factors: Vec<String>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// Expanded, z-scored covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    terms: Vec<Term>,
    raw: Array2<f64>,
    values: Array2<f64>,
    standardization: Vec<Standardization>,
    dropped_constant: Vec<String>,
}

impl DesignMatrix {
    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.label.clone()).collect()
    }

    /// Unstandardized `n × q` values.
    pub fn raw(&self) -> &Array2<f64> {
        &self.raw
    }

    /// Standardized `n × q` values.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn standardization(&self) -> &[Standardization] {
        &self.standardization
    }

    /// Columns removed because they were constant on the data the design was built from.
    pub fn dropped_constant(&self) -> &[String] {
        &self.dropped_constant
    }

    pub fn n_rows(&self) -> usize {
        self.raw.nrows()
    }

    /// Re-evaluate this design's terms on another dataset, standardizing with
    /// this design's statistics. Used to score held-out rows.
    pub fn rebuild_on(&self, dataset: &SurvivalDataset) -> Result<DesignMatrix> {
        let raw = evaluate_terms(dataset, &self.terms)?;
        let values = standardize(&raw, &self.standardization);
        Ok(DesignMatrix {
            terms: self.terms.clone(),
            raw,
            values,
            standardization: self.standardization.clone(),
            dropped_constant: Vec::new(),
        })
    }
}

/// Expand `dataset` according to `plan`.
///
/// Column order is base, quadratic, interaction, each group sorted by label.
/// Interaction products are formed from unstandardized encoded values; for
/// categorical sources every indicator combination gets its own column. A pair
/// that touches an excluded feature contributes only its product columns.
pub fn build_design(dataset: &SurvivalDataset, plan: &ModelPlan) -> Result<DesignMatrix> {
    let schema = dataset.schema();
    plan.validate(schema)?;
    let columns_of = |feature: &str| -> Vec<String> {
        dataset
            .columns()
            .iter()
            .filter(|c| c.feature == feature)
            .map(|c| c.label.clone())
            .collect()
    };

    let mut base = Vec::new();
    for f in &plan.included_features {
        for col in columns_of(f) {
            base.push(Term {
                kind: TermKind::Base,
                sources: vec![f.clone()],
                factors: vec![col.clone()],
                label: col,
            });
        }
    }
    let mut quad = Vec::new();
    for f in &plan.quadratic_terms {
        for col in columns_of(f) {
            quad.push(Term {
                kind: TermKind::Quadratic,
                sources: vec![f.clone()],
                factors: vec![col.clone(), col.clone()],
                label: format!("{col}^2"),
            });
        }
    }
    let mut inter = Vec::new();
    for (a, b) in &plan.interaction_pairs {
        for ca in columns_of(a) {
            for cb in columns_of(b) {
                inter.push(Term {
                    kind: TermKind::Interaction,
                    sources: vec![a.clone(), b.clone()],
                    factors: vec![ca.clone(), cb.clone()],
                    label: format!("{ca}:{cb}"),
                });
            }
        }
    }
    for group in [&mut base, &mut quad, &mut inter] {
        group.sort_by(|x, y| x.label.cmp(&y.label));
    }
    let all_terms: Vec<Term> = base.into_iter().chain(quad).chain(inter).collect();

    let raw_all = evaluate_terms(dataset, &all_terms)?;
    let n = raw_all.nrows();
    let mut keep = Vec::new();
    let mut stats = Vec::new();
    let mut dropped_constant = Vec::new();
    for (j, term) in all_terms.iter().enumerate() {
        let col = raw_all.column(j);
        let mean = if n > 0 { col.sum() / n as f64 } else { 0.0 };
        let var = if n > 1 {
            col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            dropped_constant.push(term.label.clone());
        } else {
            keep.push(j);
            stats.push(Standardization { mean, sd });
        }
    }
    let terms: Vec<Term> = keep.iter().map(|&j| all_terms[j].clone()).collect();
    let raw = raw_all.select(ndarray::Axis(1), &keep);
    let values = standardize(&raw, &stats);
    Ok(DesignMatrix {
        terms,
        raw,
        values,
        standardization: stats,
        dropped_constant,
    })
}

fn evaluate_terms(dataset: &SurvivalDataset, terms: &[Term]) -> Result<Array2<f64>> {
    let labels = dataset.column_labels();
    let index = |label: &str| {
        labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Shape(format!("dataset has no column `{label}`")))
    };
    let factor_idx: Vec<Vec<usize>> = terms
        .iter()
        .map(|t| t.factors.iter().map(|f| index(f)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let x = dataset.values();
    let n = dataset.n_rows();
    let mut out = Array2::zeros((n, terms.len()));
    for i in 0..n {
        for (j, idx) in factor_idx.iter().enumerate() {
            out[[i, j]] = idx.iter().map(|&c| x[[i, c]]).product();
        }
    }
    Ok(out)
}

fn standardize(raw: &Array2<f64>, stats: &[Standardization]) -> Array2<f64> {
    let mut values = raw.clone();
    for (mut col, s) in values.columns_mut().into_iter().zip(stats) {
        col.mapv_inplace(|v| s.apply(v));
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpec;

    fn two_continuous() -> SurvivalDataset {
        let schema = Schema::new(vec![FeatureSpec::continuous("x1"), FeatureSpec::continuous("x2")]).unwrap();
        let source = ndarray::array![[2.0, 3.0], [1.0, 0.5], [0.0, -1.0], [4.0, 2.0]];
        SurvivalDataset::from_source(schema, source, vec![1.0, 2.0, 3.0, 4.0], vec![1, 0, 1, 1]).unwrap()
    }

    #[test]
    fn quadratic_and_interaction_raw_values() {
        let ds = two_continuous();
        let mut plan = ModelPlan::baseline(ds.schema());
        plan.quadratic_terms.insert("x1".into());
        plan.add_pair("x2", "x1");
        let d = build_design(&ds, &plan).unwrap();
        assert_eq!(d.labels(), vec!["x1", "x2", "x1^2", "x1:x2"]);
        assert_eq!(d.raw()[[0, 2]], 4.0);
        assert_eq!(d.raw()[[0, 3]], 6.0);
        for j in 0..4 {
            let col = d.values().column(j);
            assert!(col.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn interaction_with_excluded_feature_keeps_only_product() {
        let ds = two_continuous();
        let mut plan = ModelPlan::baseline(ds.schema());
        plan.included_features.remove("x2");
        plan.add_pair("x1", "x2");
        let d = build_design(&ds, &plan).unwrap();
        assert_eq!(d.labels(), vec!["x1", "x1:x2"]);
    }

    #[test]
    fn nominal_interaction_expands_dummies_and_quadratic_rejected() {
        let schema = Schema::new(vec![
            FeatureSpec::continuous("age"),
            FeatureSpec::with_levels("race", FeatureKind::Nominal, &["a", "b", "c"]),
        ])
        .unwrap();
        let source = ndarray::array![[30.0, 0.0], [40.0, 1.0], [50.0, 2.0], [35.0, 1.0]];
        let ds = SurvivalDataset::from_source(schema, source, vec![1.0; 4], vec![1; 4]).unwrap();
        let mut plan = ModelPlan::baseline(ds.schema());
        plan.add_pair("age", "race");
        let d = build_design(&ds, &plan).unwrap();
        assert_eq!(d.labels(), vec!["age", "race=b", "race=c", "age:race=b", "age:race=c"]);
        assert_eq!(d.raw().column(3).to_vec(), vec![0.0, 40.0, 0.0, 35.0]);

        plan.quadratic_terms.insert("race".into());
        assert!(matches!(build_design(&ds, &plan), Err(Error::Plan(_))));
    }

    #[test]
    fn constant_columns_dropped() {
        let schema = Schema::new(vec![FeatureSpec::continuous("x"), FeatureSpec::continuous("c")]).unwrap();
        let source = ndarray::array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let ds = SurvivalDataset::from_source(schema, source, vec![1.0; 3], vec![1; 3]).unwrap();
        let d = build_design(&ds, &ModelPlan::baseline(ds.schema())).unwrap();
        assert_eq!(d.labels(), vec!["x"]);
        assert_eq!(d.dropped_constant(), &["c".to_string()]);
    }

    #[test]
    fn rebuild_uses_training_standardization() {
        let ds = two_continuous();
        let d = build_design(&ds, &ModelPlan::baseline(ds.schema())).unwrap();
        let test = ds.subset(&[0]);
        let t = d.rebuild_on(&test).unwrap();
        assert_eq!(t.values().row(0), d.values().row(0));
    }
}
