//! End-to-end orchestration: load, split, baseline, explore, recommend,
//! augment, evaluate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{AttributionMatrix, ExplainerConfig};
use crate::cox::{build_design, fit_cox, linear_predictor, survival_at, CoxFit, CoxOptions, ModelPlan};
use crate::data::{load_table, split, Schema, SurvivalDataset};
use crate::error::{Error, Result};
use crate::evaluation::{compare, evaluate_model, median_event_time, ComparisonReport, EvaluationReport, ModelPredictions};
use crate::forest::{fit_rsf, ForestConfig, ForestModel, SourceForest};
use crate::recommender::{
    compile_plan, recommend, RecommendationSet, RecommenderConfig, StratificationFinding, StratumContext,
};
use crate::synth::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        schema: PathBuf,
        time_column: String,
        event_column: String,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Calibration horizon; defaults to the median training event time.
    pub horizon: Option<f64>,
    pub bootstrap: usize,
    pub bins: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            bootstrap: 1000,
            bins: 10,
        }
    }
}

fn default_fraction() -> f64 {
    0.8
}

/// Pipeline configuration. The seeds inside `forest` and `explainer` are
/// replaced by seeds derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: DataSource,
    #[serde(default = "default_fraction")]
    pub split_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default)]
    pub explainer: ExplainerConfig,
    #[serde(default)]
    pub recommender: RecommenderConfig,
    #[serde(default)]
    pub cox: CoxOptions,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub save_forest: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Directory that relative data paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split_fraction {} outside (0, 1)", self.split_fraction)));
        }
        if self.evaluation.bootstrap < 100 || self.evaluation.bins == 0 {
            return Err(Error::Config("evaluation needs bootstrap >= 100 and bins >= 1".into()));
        }
        if let Some(h) = self.evaluation.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("horizon {h} must be positive")));
            }
        }
        self.recommender.validate().map_err(cfg)?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(cfg)?;
        }
        Ok(())
    }

    /// SHA-256 of the serialized configuration without its output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for a named stage, derived from the master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(master.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub const SEED_LABELS: [&str; 5] = ["split", "forest", "shap", "bootstrap", "synth"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Split,
    Baseline,
    Explore,
    Recommend,
    Augment,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Split => "split",
            Stage::Baseline => "baseline",
            Stage::Explore => "explore",
            Stage::Recommend => "recommend",
            Stage::Augment => "augment",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    TerminatedEarly,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub features: Vec<String>,
    pub n_rows: usize,
    pub rejected_rows: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub events_train: usize,
    pub events_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub low_size: usize,
    pub high_size: usize,
    pub margin: f64,
    pub mean_nonevent: f64,
    pub mean_event: f64,
    pub prediction_sd: f64,
    pub exact_attribution: bool,
    pub max_completeness_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: String,
    pub plan: Option<ModelPlan>,
    pub n_terms: usize,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub monotone_columns: Vec<String>,
    pub dropped_columns: Vec<String>,
    /// SHA-256 of the serialized model document.
    pub model_hash: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub timestamp_unix: u64,
    pub total_seconds: f64,
    pub stage_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub crate_version: String,
    pub config_hash: String,
    pub horizon: Option<f64>,
    /// The only part of the report that changes between identical runs.
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub status: RunStatus,
    pub last_stage: Option<Stage>,
    pub dataset: DatasetSummary,
    pub baseline: Option<EvaluationReport>,
    pub exploratory: Option<EvaluationReport>,
    pub oob_concordance: Option<f64>,
    pub cohorts: Option<CohortSummary>,
    pub recommendations: Option<RecommendationSet>,
    pub findings: Vec<StratificationFinding>,
    /// Independent variants keyed by `exclusion_only`, `nonlinear_only`, `interaction_only`.
    pub augmented: BTreeMap<String, EvaluationReport>,
    pub cumulative: Option<EvaluationReport>,
    pub comparisons: Vec<ComparisonReport>,
    pub models: BTreeMap<String, ModelSummary>,
    pub warnings: Vec<String>,
    pub error: Option<StageError>,
    pub provenance: Provenance,
}

/// Report plus the in-memory artifacts written next to it.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub config: PipelineConfig,
    pub attributions_low: Option<AttributionMatrix>,
    pub attributions_high: Option<AttributionMatrix>,
    pub cox_fits: BTreeMap<String, CoxFit>,
    pub forest: Option<ForestModel>,
}

impl PipelineRun {
    pub fn evaluation(&self, model_id: &str) -> Option<&EvaluationReport> {
        let r = &self.report;
        r.baseline
            .iter()
            .chain(&r.exploratory)
            .chain(r.augmented.values())
            .chain(&r.cumulative)
            .find(|e| e.model_id == model_id)
    }
}

pub const AUGMENTED_IDS: [&str; 3] = ["exclusion_only", "nonlinear_only", "interaction_only"];

fn load_dataset(config: &PipelineConfig, synth_seed: u64) -> Result<(SurvivalDataset, String)> {
    match &config.data {
        DataSource::Csv {
            path,
            schema,
            time_column,
            event_column,
        } => {
            let schema = Schema::from_json_file(config.resolve(schema))?;
            let ds = load_table(config.resolve(path), &schema, time_column, event_column)?;
            Ok((ds, path.display().to_string()))
        }
        DataSource::Synthetic(spec) => {
            let data = generate_synthetic(spec, synth_seed)?;
            Ok((data.dataset, format!("synthetic(n={})", spec.n)))
        }
    }
}

struct CoxModel {
    fit: CoxFit,
    preds: ModelPredictions,
}

fn fit_and_predict(
    id: &str,
    plan: &ModelPlan,
    train: &SurvivalDataset,
    test: &SurvivalDataset,
    options: &CoxOptions,
    horizon: f64,
) -> Result<CoxModel> {
    let design = build_design(train, plan)?;
    let fit = fit_cox(&design, train.time(), train.event(), options)?;
    let lp = linear_predictor(&fit, &design.rebuild_on(test)?)?;
    let event_probability = lp
        .iter()
        .map(|&l| survival_at(&fit, l, horizon).map(|s| 1.0 - s.probability))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoxModel {
        fit,
        preds: ModelPredictions {
            model_id: id.into(),
            risk: lp,
            event_probability,
        },
    })
}

fn cox_summary(plan: &ModelPlan, fit: &CoxFit) -> ModelSummary {
    let doc = serde_json::to_string(fit).expect("fit serializes");
    ModelSummary {
        kind: "cox".into(),
        plan: Some(plan.clone()),
        n_terms: fit.terms.len(),
        converged: Some(fit.converged),
        iterations: Some(fit.iterations),
        monotone_columns: fit.monotone_columns.clone(),
        dropped_columns: fit.dropped_columns.clone(),
        model_hash: hex(&Sha256::digest(doc.as_bytes())),
        warnings: fit.warnings.clone(),
    }
}

fn forest_summary(forest: &ForestModel) -> ModelSummary {
    let doc = serde_json::to_string(forest).expect("forest serializes");
    ModelSummary {
        kind: "random_survival_forest".into(),
        plan: None,
        n_terms: forest.n_features,
        converged: None,
        iterations: None,
        monotone_columns: Vec::new(),
        dropped_columns: Vec::new(),
        model_hash: hex(&Sha256::digest(doc.as_bytes())),
        warnings: Vec::new(),
    }
}

/// Run stages up to and including `until`. Configuration problems are
/// returned as errors; stage failures are recorded in the report.
pub fn run_pipeline(config: &PipelineConfig, until: Stage) -> Result<PipelineRun> {
    config.validate()?;
    let started = Instant::now();
    let master = config.seed;
    let seeds: BTreeMap<String, u64> = SEED_LABELS
        .iter()
        .map(|l| (l.to_string(), derive_seed(master, l)))
        .collect();
    let mut run = PipelineRun {
        report: PipelineReport {
            status: RunStatus::Completed,
            last_stage: None,
            dataset: DatasetSummary::default(),
            baseline: None,
            exploratory: None,
            oob_concordance: None,
            cohorts: None,
            recommendations: None,
            findings: Vec::new(),
            augmented: BTreeMap::new(),
            cumulative: None,
            comparisons: Vec::new(),
            models: BTreeMap::new(),
            warnings: Vec::new(),
            error: None,
            provenance: Provenance {
                master_seed: master,
                seeds: seeds.clone(),
                crate_version: env!("CARGO_PKG_VERSION").into(),
                config_hash: config.hash(),
                horizon: None,
                timing: Timing {
                    timestamp_unix: SystemTime::now()
                        .duration_since(UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0),
                    ..Timing::default()
                },
            },
        },
        config: config.clone(),
        attributions_low: None,
        attributions_high: None,
        cox_fits: BTreeMap::new(),
        forest: None,
    };
    let outcome = execute(config, until, &seeds, &mut run);
    let report = &mut run.report;
    match outcome {
        Ok(()) => {}
        Err(StageFailure::Config(e)) => return Err(e),
        Err(StageFailure::Stage(stage, e)) => {
            report.status = RunStatus::Failed;
            report.error = Some(StageError {
                stage: stage.name().into(),
                message: e.to_string(),
            });
        }
    }
    report.provenance.timing.total_seconds = started.elapsed().as_secs_f64();
    Ok(run)
}

/// [`run_pipeline`] inside a thread pool of `workers` threads.
pub fn run_pipeline_with_workers(config: &PipelineConfig, until: Stage, workers: usize) -> Result<PipelineRun> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {workers} workers: {e}")))?;
    pool.install(|| run_pipeline(config, until))
}

enum StageFailure {
    Config(Error),
    Stage(Stage, Error),
}

fn execute(
    config: &PipelineConfig,
    until: Stage,
    seeds: &BTreeMap<String, u64>,
    run: &mut PipelineRun,
) -> std::result::Result<(), StageFailure> {
    let mut clock = Instant::now();
    let mut finish = |run: &mut PipelineRun, stage: Stage| {
        run.report
            .provenance
            .timing
            .stage_seconds
            .insert(stage.name().into(), clock.elapsed().as_secs_f64());
        run.report.last_stage = Some(stage);
        clock = Instant::now();
        stage < until
    };
    let fail = |stage: Stage| move |e: Error| StageFailure::Stage(stage, e);

    let (dataset, source) = load_dataset(config, seeds["synth"]).map_err(fail(Stage::Load))?;
    let schema = dataset.schema().clone();
    let m = schema.len();
    let mut forest_cfg = config.forest.clone();
    forest_cfg.seed = seeds["forest"];
    forest_cfg
        .validate(dataset.n_columns())
        .map_err(|e| StageFailure::Config(Error::Config(e.to_string())))?;
    let mut explainer = config.explainer.clone();
    explainer.seed = seeds["shap"];
    explainer
        .validate(m)
        .map_err(|e| StageFailure::Config(Error::Config(e.to_string())))?;
    run.report.dataset = DatasetSummary {
        source,
        features: schema.names(),
        n_rows: dataset.n_rows(),
        rejected_rows: dataset.rejected_rows().len(),
        ..DatasetSummary::default()
    };
    if !finish(run, Stage::Load) {
        return Ok(());
    }

    let s = split(dataset.n_rows(), config.split_fraction, seeds["split"]).map_err(fail(Stage::Split))?;
    let train = dataset.subset(&s.train);
    let test = dataset.subset(&s.test);
    let d = &mut run.report.dataset;
    d.n_train = train.n_rows();
    d.n_test = test.n_rows();
    d.events_train = train.n_events();
    d.events_test = test.n_events();
    let horizon = match config.evaluation.horizon {
        Some(h) => h,
        None => median_event_time(train.time(), train.event())
            .ok_or_else(|| StageFailure::Stage(Stage::Split, Error::Fit("training split has no events".into())))?,
    };
    run.report.provenance.horizon = Some(horizon);
    if !finish(run, Stage::Split) {
        return Ok(());
    }

    let eval = &config.evaluation;
    let boot = seeds["bootstrap"];
    let (tt, te) = (test.time(), test.event());
    let evaluate = |p: &ModelPredictions| evaluate_model(p, tt, te, horizon, eval.bins, eval.bootstrap, boot);

    let base_plan = ModelPlan::baseline(&schema);
    let baseline = fit_and_predict("baseline", &base_plan, &train, &test, &config.cox, horizon)
        .map_err(fail(Stage::Baseline))?;
    run.report.baseline = Some(evaluate(&baseline.preds).map_err(fail(Stage::Baseline))?);
    run.report.models.insert("baseline".into(), cox_summary(&base_plan, &baseline.fit));
    run.report.warnings.extend(baseline.fit.warnings.iter().map(|w| format!("baseline: {w}")));
    run.cox_fits.insert("baseline".into(), baseline.fit.clone());
    if !finish(run, Stage::Baseline) {
        return Ok(());
    }

    let forest = fit_rsf(&train, &forest_cfg).map_err(fail(Stage::Explore))?;
    let rsf_test = forest.predict_risk_matrix(test.values()).map_err(fail(Stage::Explore))?;
    let rsf_prob = (0..test.n_rows())
        .map(|i| {
            forest
                .predict_chf(&test.values().row(i).to_vec(), horizon)
                .map(|h| 1.0 - (-h).exp())
        })
        .collect::<Result<Vec<_>>>()
        .map_err(fail(Stage::Explore))?;
    let rsf_preds = ModelPredictions {
        model_id: "rsf".into(),
        risk: rsf_test,
        event_probability: rsf_prob,
    };
    run.report.exploratory = Some(evaluate(&rsf_preds).map_err(fail(Stage::Explore))?);
    run.report.oob_concordance = forest.oob_concordance;
    run.report.models.insert("rsf".into(), forest_summary(&forest));
    let rsf_cmp = compare(&baseline.preds, &rsf_preds, tt, te, eval.bootstrap, boot).map_err(fail(Stage::Explore))?;
    run.report.comparisons.push(rsf_cmp);
    run.forest = Some(forest);
    if !finish(run, Stage::Explore) {
        return Ok(());
    }

    let forest = run.forest.as_ref().expect("explore stage ran");
    let model = SourceForest::new(forest, &schema).map_err(fail(Stage::Recommend))?;
    let train_risk = forest.predict_risk_matrix(train.values()).map_err(fail(Stage::Recommend))?;
    let prediction_sd = crate::stats::sample_sd(&train_risk);
    let ctx = StratumContext {
        model_fn: &model,
        model_id: "rsf",
        schema: &schema,
        source: train.source().view(),
        predictions: &train_risk,
        prediction_sd,
        explainer: &explainer,
    };
    let out = recommend(&ctx, train.event(), &config.recommender).map_err(fail(Stage::Recommend))?;
    let atts = [&out.attributions_low, &out.attributions_high];
    run.report.cohorts = Some(CohortSummary {
        low_size: out.selection.low_risk.len(),
        high_size: out.selection.high_risk.len(),
        margin: out.selection.margin,
        mean_nonevent: out.selection.mean_nonevent,
        mean_event: out.selection.mean_event,
        prediction_sd: out.selection.prediction_sd,
        exact_attribution: atts.iter().filter_map(|a| a.as_ref()).all(|a| a.exact),
        max_completeness_residual: atts
            .iter()
            .filter_map(|a| a.as_ref())
            .flat_map(|a| a.completeness_residual.iter().map(|r| r.abs()))
            .fold(0.0, f64::max),
    });
    run.report.warnings.extend(out.warnings.iter().cloned());
    let both_empty = out.both_cohorts_empty();
    let recs = out.recommendations.clone();
    run.report.recommendations = Some(recs.clone());
    run.report.findings = out.findings;
    run.attributions_low = out.attributions_low;
    run.attributions_high = out.attributions_high;
    if both_empty {
        run.report.status = RunStatus::TerminatedEarly;
        run.report.warnings.push(
            "exploratory model gives no extreme-risk cohorts; pipeline stopped after the recommend stage".into(),
        );
        finish(run, Stage::Recommend);
        return Ok(());
    }
    if !finish(run, Stage::Recommend) {
        return Ok(());
    }

    let excluded = recs.excluded();
    let mut plans: BTreeMap<String, ModelPlan> = BTreeMap::new();
    let mut p = base_plan.clone();
    p.included_features.retain(|f| !excluded.contains(f));
    plans.insert("exclusion_only".into(), p);
    let mut p = base_plan.clone();
    p.quadratic_terms = recs.nonlinear_features();
    plans.insert("nonlinear_only".into(), p);
    let mut p = base_plan.clone();
    p.interaction_pairs = recs.pairs();
    plans.insert("interaction_only".into(), p);
    plans.insert("cumulative".into(), compile_plan(&base_plan, &recs));

    let mut fitted: BTreeMap<String, CoxModel> = BTreeMap::new();
    for (id, plan) in &plans {
        let model = fit_and_predict(id, plan, &train, &test, &config.cox, horizon).map_err(fail(Stage::Augment))?;
        run.report.models.insert(id.clone(), cox_summary(plan, &model.fit));
        run.report.warnings.extend(model.fit.warnings.iter().map(|w| format!("{id}: {w}")));
        run.cox_fits.insert(id.clone(), model.fit.clone());
        fitted.insert(id.clone(), model);
    }
    if !finish(run, Stage::Augment) {
        return Ok(());
    }

    for (id, model) in &fitted {
        let ev = evaluate(&model.preds).map_err(fail(Stage::Evaluate))?;
        if id == "cumulative" {
            run.report.cumulative = Some(ev);
        } else {
            run.report.augmented.insert(id.clone(), ev);
        }
    }
    for id in AUGMENTED_IDS.iter().copied().chain(["cumulative"]) {
        let c = compare(&baseline.preds, &fitted[id].preds, tt, te, eval.bootstrap, boot).map_err(fail(Stage::Evaluate))?;
        run.report.comparisons.push(c);
    }
    finish(run, Stage::Evaluate);
    Ok(())
}
