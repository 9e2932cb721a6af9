//! Generation providers: the in-process desk model and an HTTP endpoint.
//!
//! Adapters are described by an [`AdapterPlan`]. The desk provider
//! internalizes the plan's document and applies its transform locally; the
//! HTTP provider only forwards the plan's reference string as `adapter_ref`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterTransform};
use crate::desk::{argmax, internalize, AdapterProfile, DeskModel};
use crate::error::ProviderError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub want_logprobs: bool,
    #[serde(default)]
    pub adapter_ref: Option<String>,
}

impl GenerationRequest {
    pub fn greedy(prompt: impl Into<String>, max_tokens: usize) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            seed: 0,
            want_logprobs: false,
            adapter_ref: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.max_tokens == 0 {
            return Err(ProviderError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub first_token_top_prob: Option<f64>,
}

/// Which document adapter to use and how to post-process it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPlan {
    pub document_id: String,
    pub document: String,
    pub transform: AdapterTransform,
}

impl AdapterPlan {
    /// Wire name for remote providers: `<document_id>@<transform>`.
    pub fn reference(&self) -> String {
        format!("{}@{}", self.document_id, self.transform)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub logprobs: bool,
    /// Exposes per-token logits, enabling direct margin measurement.
    pub logits: bool,
}

/// How a multi-token answer is reduced to one logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenAggregation {
    #[default]
    FirstToken,
    /// Mean of the teacher-forced logits of every answer token.
    MeanOverTokens,
}

pub trait Provider: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn generate(
        &self,
        request: &GenerationRequest,
        adapter: Option<&AdapterPlan>,
    ) -> Result<GenerationResponse, ProviderError>;

    /// Logit of `answer` after `prompt`, if the provider exposes logits.
    fn answer_logit(
        &self,
        _prompt: &str,
        _adapter: Option<&AdapterPlan>,
        _answer: &str,
        _aggregation: TokenAggregation,
    ) -> Result<Option<f64>, ProviderError> {
        Ok(None)
    }

    /// Highest-logit next token, if the provider exposes logits.
    fn top_token(
        &self,
        _prompt: &str,
        _adapter: Option<&AdapterPlan>,
    ) -> Result<Option<String>, ProviderError> {
        Ok(None)
    }

    /// Mean per-token log-probability of `answer` under the base model.
    fn answer_logprob(&self, _prompt: &str, _answer: &str) -> Result<Option<f64>, ProviderError> {
        Ok(None)
    }
}

/// Convenience wrapper matching the request/response contract.
pub fn generate_via_provider(
    provider: &dyn Provider,
    request: &GenerationRequest,
    adapter: Option<&AdapterPlan>,
) -> Result<GenerationResponse, ProviderError> {
    request.validate()?;
    provider.generate(request, adapter)
}

/// In-process provider backed by a [`DeskModel`].
#[derive(Debug, Clone)]
pub struct DeskProvider {
    model: DeskModel,
    profile: AdapterProfile,
    answer_budget: usize,
}

fn model_err(e: crate::Error) -> ProviderError {
    ProviderError::Model(e.to_string())
}

impl DeskProvider {
    /// Desk answers are single tokens, so generation is clamped to one token
    /// unless [`DeskProvider::with_answer_budget`] says otherwise.
    pub fn new(model: DeskModel, profile: AdapterProfile) -> Self {
        Self {
            model,
            profile,
            answer_budget: 1,
        }
    }

    pub fn with_answer_budget(mut self, budget: usize) -> Self {
        self.answer_budget = budget.max(1);
        self
    }

    pub fn model(&self) -> &DeskModel {
        &self.model
    }

    pub fn profile(&self) -> &AdapterProfile {
        &self.profile
    }

    /// The document adapter before any transform.
    pub fn raw_adapter(&self, document: &str) -> Result<Adapter, ProviderError> {
        internalize(&self.model, &self.profile, document).map_err(model_err)
    }

    pub fn resolve(&self, plan: &AdapterPlan) -> Result<Adapter, ProviderError> {
        let raw = self.raw_adapter(&plan.document)?;
        plan.transform.apply(&raw).map_err(model_err)
    }

    fn resolve_opt(&self, plan: Option<&AdapterPlan>) -> Result<Option<Adapter>, ProviderError> {
        plan.map(|p| self.resolve(p)).transpose()
    }

    pub fn logits(
        &self,
        prompt: &str,
        plan: Option<&AdapterPlan>,
    ) -> Result<Vec<f64>, ProviderError> {
        let adapter = self.resolve_opt(plan)?;
        self.model
            .logits(prompt, adapter.as_ref())
            .map_err(model_err)
    }
}

impl Provider for DeskProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            logprobs: true,
            logits: true,
        }
    }

    fn generate(
        &self,
        request: &GenerationRequest,
        adapter: Option<&AdapterPlan>,
    ) -> Result<GenerationResponse, ProviderError> {
        request.validate()?;
        let adapter = self.resolve_opt(adapter)?;
        let budget = request.max_tokens.min(self.answer_budget);
        let trace = self
            .model
            .generate(
                &request.prompt,
                adapter.as_ref(),
                budget,
                request.temperature,
                request.seed,
            )
            .map_err(model_err)?;
        Ok(GenerationResponse {
            text: trace.tokens.join(" "),
            token_logprobs: request.want_logprobs.then(|| trace.logprobs.clone()),
            tokens: trace.tokens,
            first_token_top_prob: Some(trace.first_token_top_prob),
        })
    }

    fn answer_logit(
        &self,
        prompt: &str,
        adapter: Option<&AdapterPlan>,
        answer: &str,
        aggregation: TokenAggregation,
    ) -> Result<Option<f64>, ProviderError> {
        let adapter = self.resolve_opt(adapter)?;
        let mut ids = self.model.encode(prompt).map_err(model_err)?;
        let answer_ids = self.model.encode(answer).map_err(model_err)?;
        let steps = match aggregation {
            TokenAggregation::FirstToken => 1,
            TokenAggregation::MeanOverTokens => answer_ids.len(),
        };
        let mut total = 0.0;
        for &a in &answer_ids[..steps] {
            let logits = self
                .model
                .logits_for_ids(&ids, adapter.as_ref())
                .map_err(model_err)?;
            total += logits[a];
            ids.push(a);
        }
        Ok(Some(total / steps as f64))
    }

    fn top_token(
        &self,
        prompt: &str,
        adapter: Option<&AdapterPlan>,
    ) -> Result<Option<String>, ProviderError> {
        let logits = self.logits(prompt, adapter)?;
        Ok(Some(self.model.vocab()[argmax(&logits)].clone()))
    }

    fn answer_logprob(&self, prompt: &str, answer: &str) -> Result<Option<f64>, ProviderError> {
        self.model
            .answer_logprob(prompt, answer, None)
            .map(Some)
            .map_err(model_err)
    }
}

pub const DEFAULT_HTTP_TIMEOUT: Duration = Duration::from_secs(30);

/// Text provider speaking JSON over `POST {base_url}/generate`. No retries.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    base_url: String,
    bearer_token: Option<String>,
    supports_logprobs: bool,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_timeout(base_url, DEFAULT_HTTP_TIMEOUT)
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            bearer_token: None,
            supports_logprobs: false,
            agent,
        }
    }

    pub fn with_bearer_token(mut self, token: impl Into<String>) -> Self {
        self.bearer_token = Some(token.into());
        self
    }

    /// Declare that the endpoint returns `token_logprobs` on request.
    pub fn with_logprobs(mut self, supported: bool) -> Self {
        self.supports_logprobs = supported;
        self
    }
}

fn map_ureq(err: ureq::Error) -> ProviderError {
    match err {
        ureq::Error::StatusCode(code) => ProviderError::Status(code),
        ureq::Error::Timeout(_) => ProviderError::Timeout,
        ureq::Error::Json(e) => ProviderError::Malformed(e.to_string()),
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => ProviderError::Timeout,
        other => ProviderError::Transport(other.to_string()),
    }
}

impl Provider for HttpProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            logprobs: self.supports_logprobs,
            logits: false,
        }
    }

    fn generate(
        &self,
        request: &GenerationRequest,
        adapter: Option<&AdapterPlan>,
    ) -> Result<GenerationResponse, ProviderError> {
        request.validate()?;
        if request.want_logprobs && !self.supports_logprobs {
            return Err(ProviderError::Capability(format!(
                "{} does not return token logprobs",
                self.base_url
            )));
        }
        let mut body = request.clone();
        if body.adapter_ref.is_none() {
            body.adapter_ref = adapter.map(AdapterPlan::reference);
        }
        let url = format!("{}/generate", self.base_url);
        let mut call = self.agent.post(&url);
        if let Some(token) = &self.bearer_token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call.send_json(&body).map_err(map_ureq)?;
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        let parsed: GenerationResponse =
            serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        match &parsed.token_logprobs {
            Some(lp) if lp.len() != parsed.tokens.len() => {
                return Err(ProviderError::Malformed(format!(
                    "{} logprobs for {} tokens",
                    lp.len(),
                    parsed.tokens.len()
                )))
            }
            None if request.want_logprobs => {
                return Err(ProviderError::Malformed(
                    "requested logprobs missing from response".into(),
                ))
            }
            _ => {}
        }
        Ok(parsed)
    }
}
