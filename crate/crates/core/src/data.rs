//! Tabular time-to-event data: schema, encoding and train/test splits.
//!
//! Every dataset carries two views of its covariates. The *source* view has one
//! numeric code per schema feature (continuous value, binary 0/1, ordinal level
//! index, nominal level index). The *encoded* view is what models consume:
//! nominal features expand into drop-first indicator columns. Attribution masks
//! operate on the source view so that all indicators of a nominal feature move
//! together.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Binary,
    Ordinal,
    Nominal,
}

impl FeatureKind {
    pub fn is_categorical(self) -> bool {
        matches!(self, FeatureKind::Ordinal | FeatureKind::Nominal)
    }
}

/// One predictor as declared in the schema sidecar.
///
/// Binary features may optionally name their two labels (`["no", "yes"]`), in
/// which case the first maps to 0 and the second to 1. Without labels the raw
/// column must already hold 0/1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Continuous,
            levels: Vec::new(),
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Binary,
            levels: Vec::new(),
        }
    }

    pub fn with_levels(name: impl Into<String>, kind: FeatureKind, levels: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            levels: levels.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn level_index(&self, raw: &str) -> Option<usize> {
        let raw = raw.trim();
        self.levels.iter().position(|l| l == raw)
    }
}

/// Ordered, validated list of feature specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureSpec>", into = "Vec<FeatureSpec>")]
pub struct Schema {
    features: Vec<FeatureSpec>,
}

impl TryFrom<Vec<FeatureSpec>> for Schema {
    type Error = Error;

    fn try_from(features: Vec<FeatureSpec>) -> Result<Self> {
        Schema::new(features)
    }
}

impl From<Schema> for Vec<FeatureSpec> {
    fn from(schema: Schema) -> Self {
        schema.features
    }
}

impl Schema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{}`", f.name)));
            }
            match f.kind {
                FeatureKind::Continuous if !f.levels.is_empty() => {
                    return Err(Error::Schema(format!(
                        "continuous feature `{}` must not declare levels",
                        f.name
                    )))
                }
                FeatureKind::Binary if !(f.levels.is_empty() || f.levels.len() == 2) => {
                    return Err(Error::Schema(format!(
                        "binary feature `{}` declares {} labels; expected none or 2",
                        f.name,
                        f.levels.len()
                    )))
                }
                FeatureKind::Ordinal | FeatureKind::Nominal if f.levels.len() < 2 => {
                    return Err(Error::Schema(format!(
                        "categorical feature `{}` needs at least 2 levels",
                        f.name
                    )))
                }
                _ => {}
            }
            let distinct: BTreeSet<_> = f.levels.iter().collect();
            if distinct.len() != f.levels.len() {
                return Err(Error::Schema(format!("feature `{}` repeats a level", f.name)));
            }
        }
        Ok(Self { features })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let features: Vec<FeatureSpec> = serde_json::from_reader(std::io::BufReader::new(file))?;
        Schema::new(features)
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    /// Encoded column layout implied by this schema.
    pub fn columns(&self) -> Vec<ColumnDescriptor> {
        let mut cols = Vec::new();
        for f in &self.features {
            match f.kind {
                FeatureKind::Continuous | FeatureKind::Binary => cols.push(ColumnDescriptor {
                    label: f.name.clone(),
                    feature: f.name.clone(),
                    role: EncodingRole::Value,
                }),
                FeatureKind::Ordinal => cols.push(ColumnDescriptor {
                    label: f.name.clone(),
                    feature: f.name.clone(),
                    role: EncodingRole::LevelIndex,
                }),
                FeatureKind::Nominal => {
                    for level in &f.levels[1..] {
                        cols.push(ColumnDescriptor {
                            label: format!("{}={}", f.name, level),
                            feature: f.name.clone(),
                            role: EncodingRole::Indicator {
                                level: level.clone(),
                            },
                        });
                    }
                }
            }
        }
        cols
    }

    /// Number of encoded columns.
    pub fn encoded_width(&self) -> usize {
        self.features
            .iter()
            .map(|f| match f.kind {
                FeatureKind::Nominal => f.levels.len() - 1,
                _ => 1,
            })
            .sum()
    }

    /// Map one source-coded row (one value per feature) onto the encoded layout.
    ///
    /// Nominal codes are rounded to the nearest level index; a code outside the
    /// level range produces an all-zero indicator block.
    pub fn encode_source_into(&self, source: &[f64], out: &mut [f64]) {
        debug_assert_eq!(source.len(), self.features.len());
        debug_assert_eq!(out.len(), self.encoded_width());
        let mut c = 0;
        for (f, &v) in self.features.iter().zip(source) {
            match f.kind {
                FeatureKind::Nominal => {
                    let width = f.levels.len() - 1;
                    out[c..c + width].iter_mut().for_each(|x| *x = 0.0);
                    let idx = v.round();
                    if idx >= 1.0 && (idx as usize) < f.levels.len() {
                        out[c + idx as usize - 1] = 1.0;
                    }
                    c += width;
                }
                _ => {
                    out[c] = v;
                    c += 1;
                }
            }
        }
    }

    pub fn encode_source(&self, source: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.encoded_width()];
        self.encode_source_into(source, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum EncodingRole {
    /// Continuous or binary value passed through.
    Value,
    /// Ordinal feature as its zero-based level index.
    LevelIndex,
    /// Drop-first one-hot indicator for a nominal level.
    Indicator { level: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDescriptor {
    pub label: String,
    pub feature: String,
    #[serde(flatten)]
    pub role: EncodingRole,
}

/// Raw string-valued covariates plus outcome columns, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    /// Column name followed by its cells, one entry per schema feature.
    pub columns: Vec<(String, Vec<String>)>,
    pub time: Vec<f64>,
    pub event: Vec<u8>,
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.time.len()
    }
}

/// Encoded covariates with outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    schema: Schema,
    columns: Vec<ColumnDescriptor>,
    values: Array2<f64>,
    source: Array2<f64>,
    time: Vec<f64>,
    event: Vec<u8>,
    /// 1-based data-row numbers skipped for a missing time or event.
    rejected_rows: Vec<usize>,
}

impl SurvivalDataset {
    /// Build from source codes. Validates outcomes and finiteness.
    pub fn from_source(
        schema: Schema,
        source: Array2<f64>,
        time: Vec<f64>,
        event: Vec<u8>,
    ) -> Result<Self> {
        let n = time.len();
        if source.nrows() != n || event.len() != n {
            return Err(Error::Shape(format!(
                "source has {} rows, time {}, event {}",
                source.nrows(),
                n,
                event.len()
            )));
        }
        if source.ncols() != schema.len() {
            return Err(Error::Shape(format!(
                "source has {} columns but schema has {} features",
                source.ncols(),
                schema.len()
            )));
        }
        for (i, (&t, &e)) in time.iter().zip(&event).enumerate() {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Validation(format!("row {}: time {t} is not positive", i + 1)));
            }
            if e > 1 {
                return Err(Error::Validation(format!("row {}: event {e} not in {{0,1}}", i + 1)));
            }
        }
        if let Some(((i, j), v)) = source.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "row {}: feature `{}` is not finite ({v})",
                i + 1,
                schema.features()[j].name
            )));
        }
        let columns = schema.columns();
        let p = columns.len();
        let mut values = Array2::zeros((n, p));
        for (i, mut row) in values.rows_mut().into_iter().enumerate() {
            let src: Vec<f64> = source.row(i).to_vec();
            schema.encode_source_into(&src, row.as_slice_mut().expect("standard layout"));
        }
        Ok(Self {
            schema,
            columns,
            values,
            source,
            time,
            event,
            rejected_rows: Vec::new(),
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn columns(&self) -> &[ColumnDescriptor] {
        &self.columns
    }

    pub fn column_labels(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.label.clone()).collect()
    }

    /// Encoded `n × p` matrix.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Source-coded `n × M` matrix, one column per schema feature.
    pub fn source(&self) -> &Array2<f64> {
        &self.source
    }

    pub fn source_row(&self, i: usize) -> Vec<f64> {
        self.source.row(i).to_vec()
    }

    pub fn source_column(&self, feature: usize) -> ArrayView1<'_, f64> {
        self.source.column(feature)
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn event(&self) -> &[u8] {
        &self.event
    }

    pub fn n_rows(&self) -> usize {
        self.time.len()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e == 1).count()
    }

    pub fn rejected_rows(&self) -> &[usize] {
        &self.rejected_rows
    }

    /// Indices of encoded columns belonging to `feature`.
    pub fn columns_of(&self, feature: &str) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.feature == feature)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rows selected by `indices`, in that order (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let select = |m: &Array2<f64>| m.select(ndarray::Axis(0), indices);
        Self {
            schema: self.schema.clone(),
            columns: self.columns.clone(),
            values: select(&self.values),
            source: select(&self.source),
            time: indices.iter().map(|&i| self.time[i]).collect(),
            event: indices.iter().map(|&i| self.event[i]).collect(),
            rejected_rows: Vec::new(),
        }
    }

    /// String view of the covariates; `encode(&ds.to_raw(), schema)` rebuilds `ds`.
    pub fn to_raw(&self) -> RawTable {
        let columns = self
            .schema
            .features()
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let cells = self
                    .source
                    .column(j)
                    .iter()
                    .map(|&v| match f.kind {
                        FeatureKind::Continuous => format!("{v}"),
                        FeatureKind::Binary if f.levels.is_empty() => format!("{v}"),
                        _ => f.levels[v as usize].clone(),
                    })
                    .collect();
                (f.name.clone(), cells)
            })
            .collect();
        RawTable {
            columns,
            time: self.time.clone(),
            event: self.event.clone(),
        }
    }
}

/// Encode raw string columns according to `schema`.
///
/// Continuous and binary values pass through, ordinal values become their level
/// index, nominal values expand to drop-first indicators.
pub fn encode(raw: &RawTable, schema: &Schema) -> Result<SurvivalDataset> {
    let n = raw.n_rows();
    let m = schema.len();
    let mut source = Array2::zeros((n, m));
    for (j, spec) in schema.features().iter().enumerate() {
        let (_, cells) = raw
            .columns
            .iter()
            .find(|(name, _)| *name == spec.name)
            .ok_or_else(|| Error::Schema(format!("missing column `{}`", spec.name)))?;
        if cells.len() != n {
            return Err(Error::Shape(format!(
                "column `{}` has {} cells, expected {n}",
                spec.name,
                cells.len()
            )));
        }
        for (i, cell) in cells.iter().enumerate() {
            source[[i, j]] = source_code(spec, cell, i + 1)?;
        }
    }
    SurvivalDataset::from_source(schema.clone(), source, raw.time.clone(), raw.event.clone())
}

fn source_code(spec: &FeatureSpec, cell: &str, row: usize) -> Result<f64> {
    let cell = cell.trim();
    let unseen = || Error::Encoding {
        feature: spec.name.clone(),
        value: cell.to_string(),
    };
    match spec.kind {
        FeatureKind::Continuous => {
            if is_missing(cell) {
                return Err(Error::Validation(format!(
                    "row {row}: continuous feature `{}` is missing",
                    spec.name
                )));
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: spec.name.clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "row {row}: feature `{}` is not finite",
                    spec.name
                )));
            }
            Ok(v)
        }
        FeatureKind::Binary if !spec.levels.is_empty() => {
            spec.level_index(cell).map(|i| i as f64).ok_or_else(unseen)
        }
        FeatureKind::Binary => match cell.parse::<f64>() {
            Ok(v) if v == 0.0 || v == 1.0 => Ok(v),
            _ => Err(unseen()),
        },
        FeatureKind::Ordinal | FeatureKind::Nominal => {
            spec.level_index(cell).map(|i| i as f64).ok_or_else(unseen)
        }
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
}

/// Read a header-bearing CSV and encode it.
///
/// Rows whose time or event cell is empty are skipped and reported through
/// [`SurvivalDataset::rejected_rows`].
pub fn load_table(
    path: impl AsRef<Path>,
    schema: &Schema,
    time_col: &str,
    event_col: &str,
) -> Result<SurvivalDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let time_idx = find(time_col)?;
    let event_idx = find(event_col)?;
    let feature_idx: Vec<usize> = schema
        .features()
        .iter()
        .map(|f| find(&f.name))
        .collect::<Result<_>>()?;

    let mut columns: Vec<(String, Vec<String>)> = schema
        .features()
        .iter()
        .map(|f| (f.name.clone(), Vec::new()))
        .collect();
    let mut time = Vec::new();
    let mut event = Vec::new();
    let mut rejected = Vec::new();

    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let t_cell = record.get(time_idx).unwrap_or("").trim();
        let e_cell = record.get(event_idx).unwrap_or("").trim();
        if is_missing(t_cell) || is_missing(e_cell) {
            rejected.push(row);
            continue;
        }
        let t: f64 = t_cell.parse().map_err(|_| Error::Parse {
            row,
            column: time_col.to_string(),
            message: format!("`{t_cell}` is not a number"),
        })?;
        let e = match e_cell.parse::<f64>() {
            Ok(v) if v == 0.0 => 0,
            Ok(v) if v == 1.0 => 1,
            _ => {
                return Err(Error::Validation(format!(
                    "row {row}: event value `{e_cell}` not in {{0,1}}"
                )))
            }
        };
        time.push(t);
        event.push(e);
        for ((_, cells), &idx) in columns.iter_mut().zip(&feature_idx) {
            cells.push(record.get(idx).unwrap_or("").to_string());
        }
    }

    let raw = RawTable {
        columns,
        time,
        event,
    };
    let mut ds = encode(&raw, schema)?;
    ds.rejected_rows = rejected;
    Ok(ds)
}

/// Disjoint train/test row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Uniform random partition with `round(fraction · n)` training rows, clamped so
/// both sides are non-empty. Both index lists are returned sorted.
pub fn split(n: usize, fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!("split fraction {fraction} outside (0,1)")));
    }
    if n < 2 {
        return Err(Error::Argument(format!("cannot split {n} rows")));
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn gbsg_like_schema() -> Schema {
        Schema::new(vec![
            FeatureSpec::continuous("age"),
            FeatureSpec::with_levels("horTh", FeatureKind::Binary, &["no", "yes"]),
            FeatureSpec::with_levels("tgrade", FeatureKind::Ordinal, &["I", "II", "III"]),
            FeatureSpec::with_levels("site", FeatureKind::Nominal, &["A", "B", "C"]),
        ])
        .unwrap()
    }

    fn raw(rows: &[(&str, &str, &str, &str)]) -> RawTable {
        let col = |k: usize| {
            rows.iter()
                .map(|r| [r.0, r.1, r.2, r.3][k].to_string())
                .collect::<Vec<_>>()
        };
        RawTable {
            columns: vec![
                ("age".into(), col(0)),
                ("horTh".into(), col(1)),
                ("tgrade".into(), col(2)),
                ("site".into(), col(3)),
            ],
            time: vec![1.0; rows.len()],
            event: vec![1; rows.len()],
        }
    }

    #[test]
    fn encoding_conventions() {
        let ds = encode(&raw(&[("50", "yes", "III", "B"), ("61", "no", "I", "A")]), &gbsg_like_schema()).unwrap();
        assert_eq!(
            ds.column_labels(),
            vec!["age", "horTh", "tgrade", "site=B", "site=C"]
        );
        assert_eq!(ds.values().row(0).to_vec(), vec![50.0, 1.0, 2.0, 1.0, 0.0]);
        assert_eq!(ds.values().row(1).to_vec(), vec![61.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn unseen_category_names_feature_and_value() {
        let err = encode(&raw(&[("50", "maybe", "I", "A")]), &gbsg_like_schema()).unwrap_err();
        match err {
            Error::Encoding { feature, value } => {
                assert_eq!(feature, "horTh");
                assert_eq!(value, "maybe");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_invariants() {
        assert!(Schema::new(vec![FeatureSpec::continuous("a"), FeatureSpec::continuous("a")]).is_err());
        assert!(Schema::new(vec![FeatureSpec::with_levels("a", FeatureKind::Nominal, &["x"])]).is_err());
        assert!(Schema::new(vec![FeatureSpec::with_levels("a", FeatureKind::Continuous, &["x", "y"])]).is_err());
        let parsed: Schema =
            serde_json::from_str(r#"[{"name":"g","kind":"ordinal","levels":["I","II"]}]"#).unwrap();
        assert_eq!(parsed.features()[0].kind, FeatureKind::Ordinal);
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_table_errors() {
        let schema = Schema::new(vec![FeatureSpec::continuous("x")]).unwrap();

        let f = write_csv("x,time,status\n1,2,1\n");
        let err = load_table(f.path(), &schema, "time", "event").unwrap_err();
        assert!(err.to_string().contains("`event`"), "{err}");

        let f = write_csv("x,time,event\n1,2,1\n1,abc,0\n");
        match load_table(f.path(), &schema, "time", "event").unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }

        let f = write_csv("x,time,event\n1,2,2\n");
        assert!(matches!(
            load_table(f.path(), &schema, "time", "event").unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn load_table_empty_and_missing_outcomes() {
        let schema = Schema::new(vec![FeatureSpec::continuous("x")]).unwrap();
        let f = write_csv("x,time,event\n");
        let ds = load_table(f.path(), &schema, "time", "event").unwrap();
        assert_eq!(ds.n_rows(), 0);

        let f = write_csv("x,time,event\n1,2,1\n3,,1\n4,5,0\n");
        let ds = load_table(f.path(), &schema, "time", "event").unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.rejected_rows(), &[2]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split(10, 0.8, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let s = split(686, 0.8, 7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (549, 137));
        assert_eq!(split(686, 0.8, 7).unwrap(), s);
        assert!(split(10, 1.0, 0).is_err());
        assert!(split(10, 0.0, 0).is_err());
        assert!(split(1, 0.5, 0).is_err());
    }

    #[test]
    fn split_partitions_rows() {
        let s = split(97, 0.3, 11).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..97).collect::<Vec<_>>());
    }
}
