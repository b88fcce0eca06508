use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::design::{DesignMatrix, Standardization, Term};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoxOptions {
    pub ties: Ties,
    /// Relative change in penalized log partial likelihood.
    pub tol: f64,
    /// Max-norm of the penalized score.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// L2 penalty `ridge/2 · ‖β‖²` on standardized coefficients.
    pub ridge: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            ties: Ties::Efron,
            tol: 1e-9,
            grad_tol: 1e-6,
            max_iter: 100,
            ridge: 1e-6,
        }
    }
}

/// Log partial likelihood with its score and observed information.
#[derive(Debug, Clone)]
pub struct LikelihoodEval {
    pub loglik: f64,
    pub score: Vec<f64>,
    /// Negative Hessian, row-major `q × q`.
    pub information: Vec<f64>,
}

/// Unpenalized log partial likelihood at `beta`.
///
/// Rows are processed from the latest time backwards so risk-set sums can be
/// accumulated; all subjects sharing a time join the risk set together.
pub fn partial_likelihood(
    x: &Array2<f64>,
    time: &[f64],
    event: &[u8],
    beta: &[f64],
    ties: Ties,
) -> LikelihoodEval {
    let (n, q) = x.dim();
    let eta: Vec<f64> = (0..n)
        .map(|i| (0..q).map(|j| x[[i, j]] * beta[j]).sum())
        .collect();
    let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };
    let w: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));

    let mut s0 = 0.0;
    let mut s1 = vec![0.0; q];
    let mut s2 = vec![0.0; q * q];
    let mut loglik = 0.0;
    let mut score = vec![0.0; q];
    let mut info = vec![0.0; q * q];

    let mut start = 0;
    while start < n {
        let t = time[order[start]];
        let mut end = start;
        while end < n && time[order[end]] == t {
            end += 1;
        }
        let group = &order[start..end];
        let mut d = 0usize;
        let mut e0 = 0.0;
        let mut e1 = vec![0.0; q];
        let mut e2 = vec![0.0; q * q];
        for &i in group {
            let xi = x.row(i);
            s0 += w[i];
            for a in 0..q {
                s1[a] += w[i] * xi[a];
                for b in 0..=a {
                    s2[a * q + b] += w[i] * xi[a] * xi[b];
                }
            }
            if event[i] == 1 {
                d += 1;
                loglik += eta[i];
                e0 += w[i];
                for a in 0..q {
                    score[a] += xi[a];
                    e1[a] += w[i] * xi[a];
                    for b in 0..=a {
                        e2[a * q + b] += w[i] * xi[a] * xi[b];
                    }
                }
            }
        }
        if d > 0 {
            let df = d as f64;
            let steps: Vec<f64> = match ties {
                Ties::Breslow => vec![0.0; d],
                Ties::Efron => (0..d).map(|l| l as f64 / df).collect(),
            };
            for f in steps {
                let d0 = s0 - f * e0;
                loglik -= d0.ln() + shift;
                for a in 0..q {
                    let m_a = (s1[a] - f * e1[a]) / d0;
                    score[a] -= m_a;
                    for b in 0..=a {
                        let m_b = (s1[b] - f * e1[b]) / d0;
                        let second = (s2[a * q + b] - f * e2[a * q + b]) / d0;
                        info[a * q + b] += second - m_a * m_b;
                    }
                }
            }
        }
        start = end;
    }
    for a in 0..q {
        for b in 0..a {
            info[b * q + a] = info[a * q + b];
        }
    }
    LikelihoodEval {
        loglik,
        score,
        information: info,
    }
}

/// Fitted Cox model on standardized design columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub terms: Vec<Term>,
    pub standardization: Vec<Standardization>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub log_partial_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_max_norm: f64,
    /// Columns removed as (near-)duplicates of an earlier column.
    pub dropped_columns: Vec<String>,
    /// Columns whose coefficient diverged (monotone likelihood).
    pub monotone_columns: Vec<String>,
    /// Breslow cumulative baseline hazard as `(time, H₀)` steps.
    pub baseline: Vec<(f64, f64)>,
    /// Largest training time; beyond it survival is extrapolated flat.
    pub max_time: f64,
    pub ridge: f64,
    pub ties: Ties,
    pub warnings: Vec<String>,
}

/// Newton–Raphson with step halving on the ridge-penalized log partial likelihood.
pub fn fit_cox(design: &DesignMatrix, time: &[f64], event: &[u8], options: &CoxOptions) -> Result<CoxFit> {
    let n = design.n_rows();
    if time.len() != n || event.len() != n {
        return Err(Error::Shape(format!(
            "design has {n} rows, time {}, event {}",
            time.len(),
            event.len()
        )));
    }
    if !event.iter().any(|&e| e == 1) {
        return Err(Error::Fit("no observed events".into()));
    }

    let (keep, dropped) = collinearity_filter(design.values());
    let dropped_columns: Vec<String> = dropped
        .iter()
        .map(|&j| design.terms()[j].label.clone())
        .collect();
    if keep.is_empty() {
        return Err(Error::Fit("design has no usable columns".into()));
    }
    let x = design.values().select(ndarray::Axis(1), &keep);
    let terms: Vec<Term> = keep.iter().map(|&j| design.terms()[j].clone()).collect();
    let standardization: Vec<Standardization> =
        keep.iter().map(|&j| design.standardization()[j]).collect();
    let q = keep.len();
    let ridge = options.ridge.max(0.0);
    let mut warnings = Vec::new();

    let penalized = |beta: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let mut ev = partial_likelihood(&x, time, event, beta, options.ties);
        let mut obj = ev.loglik;
        for j in 0..q {
            obj -= 0.5 * ridge * beta[j] * beta[j];
            ev.score[j] -= ridge * beta[j];
            ev.information[j * q + j] += ridge;
        }
        (obj, ev.score, ev.information)
    };

    let mut beta = vec![0.0; q];
    let mut prev_beta = beta.clone();
    let (mut obj, mut grad, mut info) = penalized(&beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;

    while iterations < options.max_iter {
        let gmax = max_abs(&grad);
        if gmax <= options.grad_tol && last_change <= options.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match newton_step(&info, &grad, q) {
            Some(s) => s,
            None => {
                warnings.push(format!("iteration {iterations}: information matrix singular"));
                break;
            }
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let (c_obj, c_grad, c_info) = penalized(&candidate);
            if c_obj.is_finite() && c_obj >= obj - 1e-12 * obj.abs().max(1.0) {
                accepted = Some((candidate, c_obj, c_grad, c_info));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, c_obj, c_grad, c_info)) = accepted else {
            warnings.push(format!("iteration {iterations}: step halving failed to improve"));
            break;
        };
        last_change = (c_obj - obj).abs() / obj.abs().max(1e-300);
        prev_beta = std::mem::replace(&mut beta, candidate);
        obj = c_obj;
        grad = c_grad;
        info = c_info;
    }
    if !converged && max_abs(&grad) <= options.grad_tol && last_change <= options.tol {
        converged = true;
    }
    if !converged {
        warnings.push(format!(
            "did not converge after {iterations} iterations (score max-norm {:.3e})",
            max_abs(&grad)
        ));
    }

    let monotone_columns: Vec<String> = (0..q)
        .filter(|&j| beta[j].abs() > 20.0 && beta[j].abs() > prev_beta[j].abs())
        .map(|j| terms[j].label.clone())
        .collect();
    for label in &monotone_columns {
        warnings.push(format!("monotone likelihood: coefficient of `{label}` diverging"));
    }

    let se = match invert(&info, q) {
        Some(inv) => (0..q).map(|j| inv[(j, j)].max(0.0).sqrt()).collect(),
        None => {
            warnings.push("information matrix singular; standard errors unavailable".into());
            vec![f64::NAN; q]
        }
    };
    let loglik = partial_likelihood(&x, time, event, &beta, options.ties).loglik;
    let lp: Vec<f64> = (0..n)
        .map(|i| (0..q).map(|j| x[[i, j]] * beta[j]).sum())
        .collect();
    let baseline = breslow_baseline(time, event, &lp);
    let max_time = time.iter().cloned().fold(0.0, f64::max);

    Ok(CoxFit {
        terms,
        standardization,
        beta,
        se,
        log_partial_likelihood: loglik,
        iterations,
        converged,
        gradient_max_norm: max_abs(&grad),
        dropped_columns,
        monotone_columns,
        baseline,
        max_time,
        ridge,
        ties: options.ties,
        warnings,
    })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn newton_step(info: &[f64], grad: &[f64], q: usize) -> Option<Vec<f64>> {
    let h = DMatrix::from_row_slice(q, q, info);
    let g = DVector::from_column_slice(grad);
    if let Some(chol) = h.clone().cholesky() {
        return Some(chol.solve(&g).iter().copied().collect());
    }
    h.lu().solve(&g).map(|s| s.iter().copied().collect())
}

fn invert(info: &[f64], q: usize) -> Option<DMatrix<f64>> {
    let h = DMatrix::from_row_slice(q, q, info);
    match h.clone().cholesky() {
        Some(chol) => Some(chol.inverse()),
        None => h.try_inverse(),
    }
}

/// Greedy left-to-right filter dropping columns whose absolute correlation with
/// an already kept column exceeds `1 − 1e-10`.
fn collinearity_filter(x: &Array2<f64>) -> (Vec<usize>, Vec<usize>) {
    let (n, q) = x.dim();
    let mut keep: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    let norm = |j: usize| x.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
    for j in 0..q {
        let nj = norm(j);
        if nj == 0.0 {
            dropped.push(j);
            continue;
        }
        let dup = keep.iter().any(|&k| {
            let dot: f64 = (0..n).map(|i| x[[i, j]] * x[[i, k]]).sum();
            (dot / (nj * norm(k))).abs() > 1.0 - 1e-10
        });
        if dup {
            dropped.push(j);
        } else {
            keep.push(j);
        }
    }
    (keep, dropped)
}

fn breslow_baseline(time: &[f64], event: &[u8], lp: &[f64]) -> Vec<(f64, f64)> {
    let n = time.len();
    let shift = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|e| (e - shift).exp()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let mut steps = Vec::new();
    let mut risk = 0.0;
    let mut start = 0;
    while start < n {
        let t = time[order[start]];
        let mut end = start;
        let mut d = 0.0;
        while end < n && time[order[end]] == t {
            risk += w[order[end]];
            if event[order[end]] == 1 {
                d += 1.0;
            }
            end += 1;
        }
        if d > 0.0 {
            steps.push((t, d / risk * (-shift).exp()));
        }
        start = end;
    }
    steps.reverse();
    let mut cum = 0.0;
    for s in steps.iter_mut() {
        cum += s.1;
        s.1 = cum;
    }
    steps
}

impl CoxFit {
    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.label.clone()).collect()
    }

    /// Cumulative baseline hazard, right-continuous, `H₀(0) = 0`.
    pub fn baseline_hazard(&self, t: f64) -> f64 {
        let k = self.baseline.partition_point(|&(s, _)| s <= t);
        if k == 0 {
            0.0
        } else {
            self.baseline[k - 1].1
        }
    }
}

/// `S(t | lp)` together with whether `t` lies past the training follow-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalEstimate {
    pub probability: f64,
    pub extrapolated: bool,
}

pub fn survival_at(fit: &CoxFit, lp: f64, t: f64) -> Result<SurvivalEstimate> {
    if !(t >= 0.0) {
        return Err(Error::Argument(format!("survival time {t} must be >= 0")));
    }
    let h = fit.baseline_hazard(t);
    let probability = if h == 0.0 { 1.0 } else { (-h * lp.exp()).exp() }.clamp(0.0, 1.0);
    Ok(SurvivalEstimate {
        probability,
        extrapolated: t > fit.max_time,
    })
}

/// `lp_i = Σ_j β_j · (x_ij − mean_j) / sd_j` with the fit's training standardization.
pub fn linear_predictor(fit: &CoxFit, design: &DesignMatrix) -> Result<Vec<f64>> {
    let design_labels = design.labels();
    let mut idx = Vec::with_capacity(fit.terms.len());
    let mut missing = Vec::new();
    for term in &fit.terms {
        match design_labels.iter().position(|l| *l == term.label) {
            Some(j) => idx.push(j),
            None => missing.push(term.label.clone()),
        }
    }
    let fit_labels = fit.labels();
    let extra: Vec<String> = design_labels
        .iter()
        .filter(|l| !fit_labels.contains(l) && !fit.dropped_columns.contains(l))
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Shape(format!(
            "design terms do not match fit: missing {missing:?}, extra {extra:?}"
        )));
    }
    let raw = design.raw();
    Ok((0..design.n_rows())
        .map(|i| {
            idx.iter()
                .zip(&fit.beta)
                .zip(&fit.standardization)
                .map(|((&j, b), s)| b * s.apply(raw[[i, j]]))
                .sum()
        })
        .collect())
}
