//! Running a method over a question set and aggregating the report.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analysis::{
    bin_by_prior, phrasing_consistency, rolling_accuracy, sort_by_prior, ConsistencyCounts,
    PriorBin, PriorOutcome, PriorScheme,
};
use super::question::{ConflictQuestion, Dimension, Tier};
use super::stats::{bootstrap_ci, match_answer, wilson_interval, Interval};
use crate::adapter::{AdapterTransform, BoostTarget, LayerSelection};
use crate::error::{Error, ProviderError, Result};
use crate::gate::{fnv1a, gate_decide, GateConfig, GateDecision};
use crate::margin::{confusion_matrix, measure_margins, Confusion, MarginRecord};
use crate::provider::{GenerationRequest, Provider, TokenAggregation};
use crate::router::{route, BoostParams, ProbeConfig, RouteDecision};

/// How the document adapter is used for each question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// No adapter at all.
    Base,
    /// The document adapter as generated.
    Baseline,
    Slb {
        k: f64,
        beta: f64,
        #[serde(default)]
        target: BoostTarget,
        #[serde(default)]
        selection: LayerSelection,
    },
    Global {
        beta: f64,
        #[serde(default)]
        target: BoostTarget,
    },
    Ca {
        #[serde(default)]
        probe: ProbeConfig,
        #[serde(default = "standard_params")]
        standard: BoostParams,
        #[serde(default = "strong_params")]
        strong: BoostParams,
    },
    /// Relevance gate in front of conflict-aware routing.
    RgCa {
        gate: GateConfig,
        #[serde(default)]
        probe: ProbeConfig,
        #[serde(default = "standard_params")]
        standard: BoostParams,
        #[serde(default = "strong_params")]
        strong: BoostParams,
    },
    /// Relevance gate in front of a fixed transform.
    Gated {
        gate: GateConfig,
        #[serde(default)]
        transform: AdapterTransform,
    },
}

fn standard_params() -> BoostParams {
    BoostParams::STANDARD
}

fn strong_params() -> BoostParams {
    BoostParams::STRONG
}

impl Method {
    pub fn slb(k: f64, beta: f64) -> Self {
        Method::Slb {
            k,
            beta,
            target: BoostTarget::A,
            selection: LayerSelection::Top,
        }
    }

    pub fn ca(probe: ProbeConfig) -> Self {
        Method::Ca {
            probe,
            standard: BoostParams::STANDARD,
            strong: BoostParams::STRONG,
        }
    }

    pub fn rg_ca(gate: GateConfig, probe: ProbeConfig) -> Self {
        Method::RgCa {
            gate,
            probe,
            standard: BoostParams::STANDARD,
            strong: BoostParams::STRONG,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Baseline => "baseline",
            Method::Slb { .. } => "slb",
            Method::Global { .. } => "global",
            Method::Ca { .. } => "ca",
            Method::RgCa { .. } => "rg_ca",
            Method::Gated { .. } => "gated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Count provider failures as incorrect instead of excluding them.
    pub strict: bool,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
    pub aggregation: TokenAggregation,
    pub prior_scheme: PriorScheme,
    pub rolling_window: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_tokens: 64,
            temperature: 0.0,
            seed: 0,
            jobs: 0,
            strict: true,
            bootstrap_resamples: 1000,
            confidence: 0.95,
            aggregation: TokenAggregation::FirstToken,
            prior_scheme: PriorScheme::Quartiles,
            rolling_window: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub question_id: String,
    pub knowledge_point_id: String,
    pub dimension: Dimension,
    pub tier: Option<Tier>,
    pub response: String,
    pub correct: bool,
    /// Base-model mean log-probability of the pretrained answer.
    pub prior_logprob: Option<f64>,
    pub margins: Option<MarginRecord>,
    /// Reference of the adapter applied, `None` when the base model answered.
    pub adapter: Option<String>,
    pub route: Option<RouteDecision>,
    pub gate: Option<GateDecision>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub n: usize,
    pub correct: usize,
    pub failures: usize,
    /// Denominator after the strictness rule.
    pub scored: usize,
    pub accuracy: Option<f64>,
    pub wilson: Option<Interval>,
    pub bootstrap: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub method: Method,
    pub options: EvalOptions,
    pub n_questions: usize,
    /// Caller-supplied run configuration.
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: ReportHeader,
    /// Keyed by `all`, `dimension=C`, `dimension=C/tier=deep`, ...
    pub accuracy: BTreeMap<String, GroupAccuracy>,
    pub consistency: ConsistencyCounts,
    /// Conflict questions binned by prior strength.
    pub prior_bins: Option<Vec<PriorBin>>,
    /// Conflict correctness along ascending prior, when enough questions.
    pub rolling: Option<Vec<f64>>,
    pub confusion: Option<Confusion>,
    pub results: Vec<EvalResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "question_id",
            "knowledge_point_id",
            "dimension",
            "tier",
            "correct",
            "response",
            "prior_logprob",
            "delta_prior",
            "delta_lora",
            "predicted",
            "observed",
            "adapter",
            "error",
        ])?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.results {
            let m = r.margins.as_ref();
            w.write_record([
                r.question_id.clone(),
                r.knowledge_point_id.clone(),
                r.dimension.to_string(),
                opt(r.tier.map(|t| t.to_string())),
                r.correct.to_string(),
                r.response.clone(),
                opt(r.prior_logprob.map(|v| v.to_string())),
                opt(m.map(|m| m.delta_prior.to_string())),
                opt(m.map(|m| m.delta_lora.to_string())),
                opt(m.map(|m| m.predicted_override.to_string())),
                opt(m.map(|m| m.observed_override.to_string())),
                opt(r.adapter.clone()),
                opt(r.error.clone()),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn group(&self, key: &str) -> Option<&GroupAccuracy> {
        self.accuracy.get(key)
    }
}

/// What to do with one question before generating.
struct Plan {
    transform: Option<AdapterTransform>,
    route: Option<RouteDecision>,
    gate: Option<GateDecision>,
}

fn plan_question(
    method: &Method,
    provider: &dyn Provider,
    q: &ConflictQuestion,
) -> Result<Plan, PlanError> {
    let fixed = |transform| Plan {
        transform: Some(transform),
        route: None,
        gate: None,
    };
    let routed = |probe: &ProbeConfig,
                  standard: BoostParams,
                  strong: BoostParams|
     -> Result<Plan, PlanError> {
        let (decision, transform) = route(provider, &q.prompt, probe, standard, strong)?;
        Ok(Plan {
            transform: Some(transform),
            route: Some(decision),
            gate: None,
        })
    };
    match method {
        Method::Base => Ok(Plan {
            transform: None,
            route: None,
            gate: None,
        }),
        Method::Baseline => Ok(fixed(AdapterTransform::Identity)),
        Method::Slb {
            k,
            beta,
            target,
            selection,
        } => Ok(fixed(AdapterTransform::Boost {
            k: *k,
            beta: *beta,
            target: *target,
            selection: *selection,
        })),
        Method::Global { beta, target } => Ok(fixed(AdapterTransform::Global {
            beta: *beta,
            target: *target,
        })),
        Method::Ca {
            probe,
            standard,
            strong,
        } => routed(probe, *standard, *strong),
        Method::RgCa {
            gate,
            probe,
            standard,
            strong,
        } => {
            let decision =
                gate_decide(&q.prompt, &q.document, q.relevant, gate).map_err(PlanError::Fatal)?;
            let mut plan = if decision.pass {
                routed(probe, *standard, *strong)?
            } else {
                Plan {
                    transform: None,
                    route: None,
                    gate: None,
                }
            };
            plan.gate = Some(decision);
            Ok(plan)
        }
        Method::Gated { gate, transform } => {
            let decision =
                gate_decide(&q.prompt, &q.document, q.relevant, gate).map_err(PlanError::Fatal)?;
            Ok(Plan {
                transform: decision.pass.then(|| transform.clone()),
                route: None,
                gate: Some(decision),
            })
        }
    }
}

/// Provider failures are recorded per question; anything else aborts the run.
enum PlanError {
    Provider(ProviderError),
    Fatal(Error),
}

impl From<ProviderError> for PlanError {
    fn from(e: ProviderError) -> Self {
        PlanError::Provider(e)
    }
}

impl From<Error> for PlanError {
    fn from(e: Error) -> Self {
        match e {
            Error::Provider { source, .. } => PlanError::Provider(source),
            other => PlanError::Fatal(other),
        }
    }
}

fn evaluate_question(
    method: &Method,
    provider: &dyn Provider,
    q: &ConflictQuestion,
    options: &EvalOptions,
) -> Result<EvalResult> {
    let mut result = EvalResult {
        question_id: q.id.clone(),
        knowledge_point_id: q.knowledge_point_id.clone(),
        dimension: q.dimension,
        tier: q.tier,
        response: String::new(),
        correct: false,
        prior_logprob: None,
        margins: None,
        adapter: None,
        route: None,
        gate: None,
        error: None,
    };
    let outcome = (|| -> Result<(), PlanError> {
        let plan = plan_question(method, provider, q)?;
        result.route = plan.route;
        result.gate = plan.gate;
        let adapter = plan.transform.as_ref().map(|t| q.plan(t.clone()));
        result.adapter = adapter.as_ref().map(|a| a.reference());
        let request = GenerationRequest {
            prompt: q.prompt.clone(),
            max_tokens: options.max_tokens,
            temperature: options.temperature,
            seed: options.seed ^ fnv1a(&[&q.id]),
            want_logprobs: false,
            adapter_ref: None,
        };
        let response = provider.generate(&request, adapter.as_ref())?;
        result.correct = match_answer(&response.text, &q.expected_answer);
        result.response = response.text;
        if let Some(pre) = &q.pretrained_answer {
            result.prior_logprob = provider.answer_logprob(&q.prompt, pre)?;
            if let (Some(t), true) = (&plan.transform, provider.capabilities().logits) {
                result.margins = Some(measure_margins(provider, q, t, options.aggregation)?);
            }
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => Ok(result),
        Err(PlanError::Provider(e)) => {
            result.correct = false;
            result.error = Some(e.to_string());
            Ok(result)
        }
        Err(PlanError::Fatal(e)) => Err(e),
    }
}

fn summarize(results: &[&EvalResult], options: &EvalOptions) -> Result<GroupAccuracy> {
    let failures = results.iter().filter(|r| r.error.is_some()).count();
    let scored: Vec<bool> = results
        .iter()
        .filter(|r| options.strict || r.error.is_none())
        .map(|r| r.correct)
        .collect();
    let correct = scored.iter().filter(|&&c| c).count();
    let (accuracy, wilson, bootstrap) = if scored.is_empty() {
        (None, None, None)
    } else {
        (
            Some(correct as f64 / scored.len() as f64),
            Some(wilson_interval(
                correct as u64,
                scored.len() as u64,
                options.confidence,
            )?),
            (options.bootstrap_resamples > 0)
                .then(|| {
                    bootstrap_ci(
                        &scored,
                        options.bootstrap_resamples,
                        options.confidence,
                        options.seed,
                    )
                })
                .transpose()?,
        )
    };
    Ok(GroupAccuracy {
        n: results.len(),
        correct,
        failures,
        scored: scored.len(),
        accuracy,
        wilson,
        bootstrap,
    })
}

/// Aggregate per-question results into a report.
pub fn build_report(
    method: &Method,
    options: &EvalOptions,
    config: Option<serde_json::Value>,
    results: Vec<EvalResult>,
) -> Result<EvalReport> {
    let mut groups: BTreeMap<String, Vec<&EvalResult>> = BTreeMap::new();
    for r in &results {
        groups.entry("all".into()).or_default().push(r);
        let dim = format!("dimension={}", r.dimension);
        if let Some(tier) = r.tier {
            groups
                .entry(format!("{dim}/tier={tier}"))
                .or_default()
                .push(r);
        }
        groups.entry(dim).or_default().push(r);
    }
    let accuracy = groups
        .iter()
        .map(|(k, v)| Ok((k.clone(), summarize(v, options)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let (consistency, _) = phrasing_consistency(
        results
            .iter()
            .map(|r| (r.knowledge_point_id.as_str(), r.correct)),
    );

    let priors: Vec<PriorOutcome> = results
        .iter()
        .filter(|r| r.dimension == Dimension::C && (options.strict || r.error.is_none()))
        .filter_map(|r| {
            r.prior_logprob.map(|p| PriorOutcome {
                prior_logprob: p,
                correct: r.correct,
            })
        })
        .collect();
    let prior_bins = if priors.is_empty() {
        None
    } else {
        Some(bin_by_prior(&priors, &options.prior_scheme)?)
    };
    let rolling = if options.rolling_window > 0 && priors.len() >= options.rolling_window {
        let sorted: Vec<bool> = sort_by_prior(&priors).iter().map(|o| o.correct).collect();
        Some(rolling_accuracy(&sorted, options.rolling_window)?)
    } else {
        None
    };
    let records: Vec<MarginRecord> = results.iter().filter_map(|r| r.margins.clone()).collect();
    let confusion = (!records.is_empty()).then(|| confusion_matrix(&records));

    Ok(EvalReport {
        header: ReportHeader {
            method: method.clone(),
            options: options.clone(),
            n_questions: results.len(),
            config,
        },
        accuracy,
        consistency,
        prior_bins,
        rolling,
        confusion,
        results,
    })
}

/// Run `method` over every question. Results keep question order whatever
/// the completion order of the workers.
pub fn evaluate_results(
    method: &Method,
    questions: &[ConflictQuestion],
    provider: &dyn Provider,
    options: &EvalOptions,
) -> Result<Vec<EvalResult>> {
    if questions.is_empty() {
        return Err(Error::EmptyInput("question set".into()));
    }
    for q in questions {
        q.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| {
        questions
            .par_iter()
            .map(|q| evaluate_question(method, provider, q, options))
            .collect()
    })
}

pub fn evaluate_method(
    method: &Method,
    questions: &[ConflictQuestion],
    provider: &dyn Provider,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let results = evaluate_results(method, questions, provider, options)?;
    build_report(method, options, None, results)
}
