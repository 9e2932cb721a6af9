//! Both sides of the override inequality, dose-response sweeps, the
//! logistic fit and per-question minimum-β search.

use std::io::Write;

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::storage::Owned;
use nalgebra::{DVector, Dyn, OMatrix, Vector4, U4};
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterTransform;
use crate::bench::{match_answer, ConflictQuestion, Dimension};
use crate::error::{Error, ProviderError, Result};
use crate::provider::{GenerationRequest, Provider, TokenAggregation};

pub const DEFAULT_BETA_GRID: [f64; 8] = [1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0];

fn logit_at(logits: &[f64], token: usize) -> Result<f64> {
    logits.get(token).copied().ok_or_else(|| {
        Error::UnknownToken(format!("id {token} outside vocabulary of {}", logits.len()))
    })
}

/// `l(y_pre) - l(y_doc)` under the base model.
pub fn prior_margin(base_logits: &[f64], y_pre: usize, y_doc: usize) -> Result<f64> {
    Ok(logit_at(base_logits, y_pre)? - logit_at(base_logits, y_doc)?)
}

/// Shift of the doc-over-pre gap induced by the adapter.
pub fn lora_margin(
    base_logits: &[f64],
    adapted_logits: &[f64],
    y_pre: usize,
    y_doc: usize,
) -> Result<f64> {
    if base_logits.len() != adapted_logits.len() {
        return Err(Error::Shape(format!(
            "base logits have {} entries, adapted {}",
            base_logits.len(),
            adapted_logits.len()
        )));
    }
    let doc_shift = logit_at(adapted_logits, y_doc)? - logit_at(base_logits, y_doc)?;
    let pre_shift = logit_at(adapted_logits, y_pre)? - logit_at(base_logits, y_pre)?;
    Ok(doc_shift - pre_shift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub question_id: String,
    pub delta_prior: f64,
    pub delta_lora: f64,
    pub predicted_override: bool,
    /// Adapted doc logit strictly above adapted pre logit.
    pub observed_override: bool,
    /// Adapted top token is the document answer, when the provider reports it.
    pub full_vocab_override: Option<bool>,
}

/// The four answer logits a margin record is built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogits {
    pub base_pre: f64,
    pub base_doc: f64,
    pub adapted_pre: f64,
    pub adapted_doc: f64,
}

impl MarginRecord {
    pub fn from_logits(question_id: impl Into<String>, l: PairLogits) -> Self {
        let delta_prior = l.base_pre - l.base_doc;
        let delta_lora = (l.adapted_doc - l.base_doc) - (l.adapted_pre - l.base_pre);
        Self {
            question_id: question_id.into(),
            delta_prior,
            delta_lora,
            predicted_override: delta_lora > delta_prior,
            observed_override: l.adapted_doc > l.adapted_pre,
            full_vocab_override: None,
        }
    }
}

fn provider_err(question: &ConflictQuestion) -> impl Fn(ProviderError) -> Error + '_ {
    move |source| Error::Provider {
        question: question.id.clone(),
        source,
    }
}

/// Measure a conflict question's margins with and without the adapter
/// produced by `transform`.
pub fn measure_margins(
    provider: &dyn Provider,
    question: &ConflictQuestion,
    transform: &AdapterTransform,
    aggregation: TokenAggregation,
) -> Result<MarginRecord> {
    let y_pre = question.pretrained_answer.as_deref().ok_or_else(|| {
        Error::InvalidParameter(format!("{}: margins need a pretrained answer", question.id))
    })?;
    let y_doc = question.expected_answer.as_str();
    let plan = question.plan(transform.clone());
    let err = provider_err(question);
    let logit = |adapter, answer| -> Result<f64> {
        provider
            .answer_logit(&question.prompt, adapter, answer, aggregation)
            .map_err(&err)?
            .ok_or_else(|| {
                err(ProviderError::Capability(
                    "provider does not expose logits".into(),
                ))
            })
    };
    let logits = PairLogits {
        base_pre: logit(None, y_pre)?,
        base_doc: logit(None, y_doc)?,
        adapted_pre: logit(Some(&plan), y_pre)?,
        adapted_doc: logit(Some(&plan), y_doc)?,
    };
    let mut record = MarginRecord::from_logits(&question.id, logits);
    record.full_vocab_override = provider
        .top_token(&question.prompt, Some(&plan))
        .map_err(&err)?
        .map(|top| top.eq_ignore_ascii_case(y_doc));
    Ok(record)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Predicted override against observed override.
pub fn confusion_matrix(records: &[MarginRecord]) -> Confusion {
    let mut c = Confusion::default();
    for r in records {
        match (r.predicted_override, r.observed_override) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// CSV with columns `question_id,delta_prior,delta_lora,predicted,observed`.
pub fn write_margin_csv<W: Write>(writer: W, records: &[MarginRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "question_id",
        "delta_prior",
        "delta_lora",
        "predicted",
        "observed",
    ])?;
    for r in records {
        w.write_record([
            r.question_id.clone(),
            r.delta_prior.to_string(),
            r.delta_lora.to_string(),
            r.predicted_override.to_string(),
            r.observed_override.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Greedy answer to `question` with its document adapter under `transform`.
pub fn answer_under(
    provider: &dyn Provider,
    question: &ConflictQuestion,
    transform: &AdapterTransform,
    max_tokens: usize,
) -> Result<bool> {
    let plan = question.plan(transform.clone());
    let response = provider
        .generate(
            &GenerationRequest::greedy(&question.prompt, max_tokens),
            Some(&plan),
        )
        .map_err(provider_err(question))?;
    Ok(match_answer(&response.text, &question.expected_answer))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseResponsePoint {
    pub beta: f64,
    /// `None` when the set has no conflict questions.
    pub conflict_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
}

fn check_grid(grid: &[f64], must_start_at_one: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("beta grid".into()));
    }
    if must_start_at_one && grid[0] != 1.0 {
        return Err(Error::InvalidParameter(format!(
            "beta grid must start at 1.0, got {}",
            grid[0]
        )));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidParameter(
            "beta grid must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Accuracy on conflict (C) and novel (A) questions at each β under
/// selective boosting of the top `k%` layers.
pub fn dose_response(
    provider: &dyn Provider,
    questions: &[ConflictQuestion],
    grid: &[f64],
    k: f64,
    max_tokens: usize,
) -> Result<Vec<DoseResponsePoint>> {
    check_grid(grid, true)?;
    let accuracy = |dimension: Dimension, transform: &AdapterTransform| -> Result<Option<f64>> {
        let subset: Vec<&ConflictQuestion> = questions
            .iter()
            .filter(|q| q.dimension == dimension)
            .collect();
        if subset.is_empty() {
            return Ok(None);
        }
        let mut correct = 0usize;
        for q in &subset {
            correct += usize::from(answer_under(provider, q, transform, max_tokens)?);
        }
        Ok(Some(correct as f64 / subset.len() as f64))
    };
    grid.iter()
        .map(|&beta| {
            let transform = AdapterTransform::selective(k, beta);
            Ok(DoseResponsePoint {
                beta,
                conflict_accuracy: accuracy(Dimension::C, &transform)?,
                novel_accuracy: accuracy(Dimension::A, &transform)?,
            })
        })
        .collect()
}

/// `b + a * sigmoid((beta - beta_0) / s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub amplitude: f64,
    pub midpoint: f64,
    pub slope: f64,
    pub floor: f64,
    pub rss: f64,
    /// Constant or non-increasing input; amplitude is 0 and floor the mean.
    pub degenerate: bool,
}

impl LogisticFit {
    pub fn predict(&self, beta: f64) -> f64 {
        self.floor + self.amplitude * sigmoid((beta - self.midpoint) / self.slope)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameters are `(a, beta_0, ln s, b)`.
struct LogisticProblem<'a> {
    xs: &'a [f64],
    ys: &'a [f64],
    p: Vector4<f64>,
}

impl LeastSquaresProblem<f64, Dyn, U4> for LogisticProblem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U4>;
    type ParameterStorage = Owned<f64, U4>;

    fn set_params(&mut self, p: &Vector4<f64>) {
        self.p = *p;
    }

    fn params(&self) -> Vector4<f64> {
        self.p
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let (a, m, ls, b) = (self.p[0], self.p[1], self.p[2], self.p[3]);
        let s = ls.exp();
        Some(DVector::from_iterator(
            self.xs.len(),
            self.xs
                .iter()
                .zip(self.ys)
                .map(|(x, y)| b + a * sigmoid((x - m) / s) - y),
        ))
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U4>> {
        let (a, m, ls) = (self.p[0], self.p[1], self.p[2]);
        let s = ls.exp();
        let mut j = OMatrix::<f64, Dyn, U4>::zeros(self.xs.len());
        for (i, x) in self.xs.iter().enumerate() {
            let z = (x - m) / s;
            let g = sigmoid(z);
            let dg = g * (1.0 - g);
            j[(i, 0)] = g;
            j[(i, 1)] = -a * dg / s;
            j[(i, 2)] = -a * dg * z;
            j[(i, 3)] = 1.0;
        }
        Some(j)
    }
}

fn rss_of(xs: &[f64], ys: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    xs.iter().zip(ys).map(|(x, y)| (f(*x) - y).powi(2)).sum()
}

/// Least-squares logistic fit to `(beta, accuracy)` points, multi-started
/// over a grid of midpoints and slopes.
pub fn fit_logistic(points: &[(f64, f64)]) -> Result<LogisticFit> {
    if points.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "logistic fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidParameter("non-finite point".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let flat = LogisticFit {
        amplitude: 0.0,
        midpoint: xs.iter().sum::<f64>() / xs.len() as f64,
        slope: 1.0,
        floor: mean,
        rss: rss_of(&xs, &ys, |_| mean),
        degenerate: true,
    };
    let (y_min, y_max) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
            (lo.min(y), hi.max(y))
        });
    if y_max - y_min < 1e-12 {
        return Ok(flat);
    }
    let (x_min, x_max) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let span = (x_max - x_min).max(1e-6);

    let solver = LevenbergMarquardt::new().with_tol(1e-14).with_patience(400);
    let mut best: Option<LogisticFit> = None;
    for mi in 0..=6 {
        for &sf in &[0.02, 0.08, 0.25, 0.7] {
            let start = Vector4::new(
                y_max - y_min,
                x_min + span * mi as f64 / 6.0,
                (span * sf).ln(),
                y_min,
            );
            let (fitted, _) = solver.minimize(LogisticProblem {
                xs: &xs,
                ys: &ys,
                p: start,
            });
            let p = fitted.p;
            if !p.iter().all(|v| v.is_finite()) || p[0] < 0.0 {
                continue;
            }
            let fit = LogisticFit {
                amplitude: p[0],
                midpoint: p[1],
                slope: p[2].exp(),
                floor: p[3],
                rss: 0.0,
                degenerate: false,
            };
            let fit = LogisticFit {
                rss: rss_of(&xs, &ys, |x| fit.predict(x)),
                ..fit
            };
            if best.as_ref().is_none_or(|b| fit.rss < b.rss) {
                best = Some(fit);
            }
        }
    }
    Ok(best.filter(|b| b.slope > 0.0).unwrap_or(flat))
}

/// Residual sum of squares of the ordinary least-squares line.
pub fn linear_fit_rss(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter(
            "linear fit needs at least 2 points".into(),
        ));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(points
        .iter()
        .map(|p| (my + slope * (p.0 - mx) - p.1).powi(2))
        .sum())
}

/// Smallest grid β at which selective boosting of the top `k%` layers makes
/// the model produce the document answer.
pub fn min_beta_search(
    provider: &dyn Provider,
    question: &ConflictQuestion,
    grid: &[f64],
    k: f64,
    max_tokens: usize,
) -> Result<Option<f64>> {
    check_grid(grid, false)?;
    for &beta in grid {
        if answer_under(
            provider,
            question,
            &AdapterTransform::selective(k, beta),
            max_tokens,
        )? {
            return Ok(Some(beta));
        }
    }
    Ok(None)
}
