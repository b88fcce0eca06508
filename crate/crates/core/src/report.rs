//! Writing a pipeline run to disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::EvaluationReport;
use crate::pipeline::{PipelineReport, PipelineRun, RunStatus};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_calibration(path: &Path, ev: &EvaluationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin", "mean_predicted", "observed", "count", "dropped"])?;
    let mut kept = ev.bin_table.iter();
    let n_bins = ev.bin_table.len() + ev.dropped_bins.len();
    for b in 0..n_bins {
        if ev.dropped_bins.contains(&b) {
            w.write_record([b.to_string(), String::new(), String::new(), String::new(), "1".into()])?;
        } else if let Some(bin) = kept.next() {
            w.write_record([
                b.to_string(),
                bin.mean_predicted.to_string(),
                bin.observed.to_string(),
                bin.count.to_string(),
                "0".into(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt_eval(out: &mut String, label: &str, ev: &EvaluationReport) {
    let c = &ev.c_index;
    let _ = writeln!(
        out,
        "  {label:<18} C {:.3} ({:.3}-{:.3})  slope {:.3}  intercept {:.3}",
        c.estimate, c.lower, c.upper, ev.calibration_slope, ev.calibration_intercept
    );
}

/// Human-readable digest of a report.
pub fn summary_text(report: &PipelineReport) -> String {
    let mut s = String::new();
    let d = &report.dataset;
    let _ = writeln!(s, "dataset: {} ({} rows, {} train / {} test)", d.source, d.n_rows, d.n_train, d.n_test);
    let _ = writeln!(s, "status: {:?}", report.status);
    if let Some(e) = &report.error {
        let _ = writeln!(s, "error in {}: {}", e.stage, e.message);
    }
    let _ = writeln!(s, "config hash: {}", report.provenance.config_hash);
    if let Some(h) = report.provenance.horizon {
        let _ = writeln!(s, "calibration horizon: {h}");
    }
    let _ = writeln!(s, "\nmodels:");
    if let Some(ev) = &report.baseline {
        fmt_eval(&mut s, "baseline", ev);
    }
    if let Some(ev) = &report.exploratory {
        fmt_eval(&mut s, "rsf", ev);
    }
    for (id, ev) in &report.augmented {
        fmt_eval(&mut s, id, ev);
    }
    if let Some(ev) = &report.cumulative {
        fmt_eval(&mut s, "cumulative", ev);
    }
    if !report.comparisons.is_empty() {
        let _ = writeln!(s, "\npaired comparisons against baseline:");
        for c in &report.comparisons {
            let _ = writeln!(
                s,
                "  {:<18} dC {:+.4} ({:+.4} to {:+.4})  p {:.3}",
                c.augmented_id, c.delta_c.estimate, c.delta_c.lower, c.delta_c.upper, c.p_value
            );
        }
    }
    if let Some(c) = &report.cohorts {
        let _ = writeln!(s, "\ncohorts: low {} / high {} (margin {:.4})", c.low_size, c.high_size, c.margin);
    }
    if let Some(r) = &report.recommendations {
        let join = |v: Vec<String>| if v.is_empty() { "-".to_string() } else { v.join(", ") };
        let _ = writeln!(s, "\nrecommendations:");
        let _ = writeln!(s, "  exclude:     {}", join(r.excluded().into_iter().collect()));
        let _ = writeln!(s, "  quadratic:   {}", join(r.nonlinear_features().into_iter().collect()));
        let pairs = r.pairs().into_iter().map(|(a, b)| format!("{a}:{b}")).collect();
        let _ = writeln!(s, "  interaction: {}", join(pairs));
    }
    if !report.warnings.is_empty() {
        let _ = writeln!(s, "\nwarnings:");
        for w in &report.warnings {
            let _ = writeln!(s, "  - {w}");
        }
    }
    s
}

/// Write every artifact of `run` into `dir` and return the paths written.
pub fn emit_report(run: &PipelineRun, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    let report = &run.report;

    write_json(&out("pipeline_report.json"), report)?;
    write_json(&out("recommendations.json"), &report.recommendations.clone().unwrap_or_default())?;
    write_json(&out("config.json"), &run.config)?;
    if let Some(a) = &run.attributions_low {
        a.write_csv(&out("attributions_low.csv"))?;
    }
    if let Some(a) = &run.attributions_high {
        a.write_csv(&out("attributions_high.csv"))?;
    }
    let evals = report
        .baseline
        .iter()
        .chain(&report.exploratory)
        .chain(report.augmented.values())
        .chain(&report.cumulative);
    for ev in evals {
        write_calibration(&out(&format!("calibration_{}.csv", ev.model_id)), ev)?;
    }
    if !run.cox_fits.is_empty() {
        let models = dir.join("models");
        fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
        for (id, fit) in &run.cox_fits {
            write_json(&out(&format!("models/cox_{id}.json")), fit)?;
        }
        if let (true, Some(forest)) = (run.config.save_forest, &run.forest) {
            write_json(&out("models/forest.json"), forest)?;
        }
    }
    let p = out("summary.txt");
    fs::write(&p, summary_text(report)).map_err(|e| Error::io(&p, e))?;
    Ok(written)
}

/// Process exit code for a finished run.
pub fn exit_code(report: &PipelineReport) -> i32 {
    match report.status {
        RunStatus::Completed | RunStatus::TerminatedEarly => 0,
        RunStatus::Failed => 1,
    }
}
