//! Synthetic proportional-hazards data with planted structure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Exp, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSpec, Schema, SurvivalDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case")]
pub enum Generator {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    Bernoulli { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFeature {
    pub name: String,
    #[serde(flatten)]
    pub generator: Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub features: Vec<SyntheticFeature>,
    #[serde(default)]
    pub linear: BTreeMap<String, f64>,
    #[serde(default)]
    pub quadratic: BTreeMap<String, f64>,
    #[serde(default)]
    pub interactions: Vec<(String, String, f64)>,
    pub baseline_hazard: f64,
    /// Target fraction of censored rows.
    pub censoring: f64,
}

impl SyntheticSpec {
    /// Four standard-normal features with log-hazard
    /// `0.8 x1 + 0.8 x2 + x1 x2 + 0.8 x3²` and a pure-noise `x4`.
    pub fn planted(n: usize) -> Self {
        let features = (1..=4)
            .map(|j| SyntheticFeature {
                name: format!("x{j}"),
                generator: Generator::Normal { mean: 0.0, sd: 1.0 },
            })
            .collect();
        Self {
            n,
            features,
            linear: [("x1".into(), 0.8), ("x2".into(), 0.8), ("x4".into(), 0.0)].into(),
            quadratic: [("x3".into(), 0.8)].into(),
            interactions: vec![("x1".into(), "x2".into(), 1.0)],
            baseline_hazard: 0.1,
            censoring: 0.3,
        }
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::new(
            self.features
                .iter()
                .map(|f| match f.generator {
                    Generator::Bernoulli { .. } => FeatureSpec::binary(&f.name),
                    _ => FeatureSpec::continuous(&f.name),
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Argument("synthetic n must be >= 2".into()));
        }
        if !(0.0..=0.95).contains(&self.censoring) {
            return Err(Error::Argument(format!(
                "censoring target {} outside [0, 0.95]",
                self.censoring
            )));
        }
        if !(self.baseline_hazard > 0.0 && self.baseline_hazard.is_finite()) {
            return Err(Error::Argument("baseline hazard must be positive".into()));
        }
        let schema = self.schema()?;
        let known = |name: &String| {
            schema
                .index_of(name)
                .ok_or_else(|| Error::Argument(format!("coefficient for unknown feature `{name}`")))
        };
        for name in self.linear.keys().chain(self.quadratic.keys()) {
            known(name)?;
        }
        for (a, b, _) in &self.interactions {
            known(a)?;
            known(b)?;
        }
        Ok(())
    }

    fn log_hazard(&self, schema: &Schema, row: &[f64]) -> f64 {
        let v = |name: &str| row[schema.index_of(name).expect("validated")];
        let mut eta: f64 = self.linear.iter().map(|(k, b)| b * v(k)).sum();
        eta += self.quadratic.iter().map(|(k, b)| b * v(k) * v(k)).sum::<f64>();
        eta += self.interactions.iter().map(|(a, b, g)| g * v(a) * v(b)).sum::<f64>();
        eta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    pub log_hazard: Vec<f64>,
    /// Exponential censoring rate chosen to hit the target.
    pub censoring_rate: f64,
    pub realized_censoring: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: SurvivalDataset,
    pub truth: GroundTruth,
}

/// Expected censored fraction `mean(μ / (μ + λ_i))` under exponential censoring.
fn expected_censoring(mu: f64, rates: &[f64]) -> f64 {
    rates.iter().map(|l| mu / (mu + l)).sum::<f64>() / rates.len() as f64
}

/// Bisection on `log μ` for the censoring rate that yields `target`.
pub fn calibrate_censoring(rates: &[f64], target: f64) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    if rates.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::Calibration("event rates must be finite and positive".into()));
    }
    let scale = rates.iter().sum::<f64>() / rates.len() as f64;
    let (mut lo, mut hi) = ((scale * 1e-12).ln(), (scale * 1e12).ln());
    if expected_censoring(lo.exp(), rates) > target || expected_censoring(hi.exp(), rates) < target {
        return Err(Error::Calibration(format!("censoring target {target} unreachable")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_censoring(mid.exp(), rates) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = (0.5 * (lo + hi)).exp();
    if (expected_censoring(mu, rates) - target).abs() > 1e-6 {
        return Err(Error::Calibration(format!("censoring target {target} unreachable")));
    }
    Ok(mu)
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n;
    let m = spec.features.len();
    let mut source = Array2::zeros((n, m));
    for (j, f) in spec.features.iter().enumerate() {
        let bad = |what: &str| Error::Argument(format!("feature `{}`: invalid {what}", f.name));
        match f.generator {
            Generator::Normal { mean, sd } => {
                let d = Normal::new(mean, sd).map_err(|_| bad("normal parameters"))?;
                source.column_mut(j).iter_mut().for_each(|v| *v = d.sample(&mut rng));
            }
            Generator::Uniform { low, high } => {
                let d = Uniform::new(low, high).map_err(|_| bad("uniform range"))?;
                source.column_mut(j).iter_mut().for_each(|v| *v = d.sample(&mut rng));
            }
            Generator::Bernoulli { p } => {
                let d = Bernoulli::new(p).map_err(|_| bad("probability"))?;
                source
                    .column_mut(j)
                    .iter_mut()
                    .for_each(|v| *v = f64::from(u8::from(d.sample(&mut rng))));
            }
        }
    }
    let log_hazard: Vec<f64> = (0..n)
        .map(|i| spec.log_hazard(&schema, source.row(i).as_slice().expect("standard layout")))
        .collect();
    let rates: Vec<f64> = log_hazard.iter().map(|e| spec.baseline_hazard * e.exp()).collect();
    let mu = calibrate_censoring(&rates, spec.censoring)?;

    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for &rate in &rates {
        let t = Exp::new(rate)
            .map_err(|_| Error::Calibration(format!("event rate {rate} invalid")))?
            .sample(&mut rng);
        let c = if mu > 0.0 {
            Exp::new(mu).expect("positive rate").sample(&mut rng)
        } else {
            f64::INFINITY
        };
        time.push(t.min(c).max(f64::MIN_POSITIVE));
        event.push(u8::from(t <= c));
    }
    let realized_censoring = event.iter().filter(|&&e| e == 0).count() as f64 / n as f64;
    let dataset = SurvivalDataset::from_source(schema, source, time, event)?;
    Ok(SyntheticData {
        dataset,
        truth: GroundTruth {
            spec: spec.clone(),
            log_hazard,
            censoring_rate: mu,
            realized_censoring,
        },
    })
}

/// Write a dataset as CSV with its feature columns (source coding), `time` and `event`.
pub fn write_dataset_csv(dataset: &SurvivalDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let raw = dataset.to_raw();
    let mut header: Vec<&str> = raw.columns.iter().map(|(n, _)| n.as_str()).collect();
    header.extend(["time", "event"]);
    w.write_record(&header)?;
    for i in 0..raw.n_rows() {
        let mut rec: Vec<String> = raw.columns.iter().map(|(_, v)| v[i].clone()).collect();
        rec.push(raw.time[i].to_string());
        rec.push(raw.event[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write `synthetic.csv`, `synthetic.schema.json` and `ground_truth.json` into `dir`.
pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("synthetic.csv");
    write_dataset_csv(&data.dataset, &csv_path)?;
    let mut written = vec![csv_path];
    let json = [
        ("synthetic.schema.json", serde_json::to_string_pretty(data.dataset.schema())?),
        ("ground_truth.json", serde_json::to_string_pretty(&data.truth)?),
    ];
    for (name, text) in json {
        let p = dir.join(name);
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}
