//! Conflict-aware routing: probe the base model without the document, then
//! apply the adapter unchanged when the model is unsure and boosted when it
//! answers confidently.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterTransform};
use crate::error::{Error, ProviderError, Result};
use crate::provider::{GenerationRequest, Provider};

pub const DEFAULT_MARKERS: [&str; 8] = [
    "don't know",
    "not sure",
    "unfortunately",
    "cannot",
    "no information",
    "please provide",
    "not available",
    "i need",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Uncertain when the probe answer contains a marker phrase.
    Lexical,
    /// Uncertain when the first-token max softmax probability is below threshold.
    MaxProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub markers: Vec<String>,
    pub threshold: f64,
    pub probe_budget: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Lexical,
            markers: DEFAULT_MARKERS.iter().map(|m| m.to_string()).collect(),
            threshold: 0.35,
            probe_budget: 20,
        }
    }
}

impl ProbeConfig {
    pub fn max_prob(threshold: f64) -> Self {
        Self {
            mode: ProbeMode::MaxProb,
            threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ProbeMode::Lexical if self.markers.is_empty() => {
                return Err(Error::InvalidParameter(
                    "lexical probe needs at least one marker".into(),
                ))
            }
            ProbeMode::MaxProb if !(self.threshold > 0.0 && self.threshold < 1.0) => {
                return Err(Error::InvalidParameter(format!(
                    "probe threshold must be in (0, 1), got {}",
                    self.threshold
                )))
            }
            _ => {}
        }
        if self.probe_budget == 0 {
            return Err(Error::InvalidParameter(
                "probe budget must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One marker phrase per line; blank lines are skipped.
pub fn load_markers(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let markers: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect();
    if markers.is_empty() {
        return Err(Error::format(path, "no markers"));
    }
    Ok(markers)
}

pub fn contains_marker(answer: &str, markers: &[String]) -> bool {
    let answer = answer.to_lowercase();
    markers.iter().any(|m| answer.contains(&m.to_lowercase()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub uncertain: bool,
    pub answer: String,
    pub max_prob: Option<f64>,
}

/// Query the base model with the bare question: no adapter, no document.
pub fn probe_uncertain(
    provider: &dyn Provider,
    question: &str,
    config: &ProbeConfig,
) -> std::result::Result<ProbeOutcome, ProviderError> {
    config
        .validate()
        .map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
    let request = GenerationRequest::greedy(question, config.probe_budget);
    let response = provider.generate(&request, None)?;
    let uncertain = match config.mode {
        ProbeMode::Lexical => contains_marker(&response.text, &config.markers),
        ProbeMode::MaxProb => {
            let p = response.first_token_top_prob.ok_or_else(|| {
                ProviderError::Capability("max-prob probe needs first-token probabilities".into())
            })?;
            p < config.threshold
        }
    };
    Ok(ProbeOutcome {
        uncertain,
        answer: response.text,
        max_prob: response.first_token_top_prob,
    })
}

/// Layer fraction and multiplier for one routing path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub k: f64,
    pub beta: f64,
}

impl BoostParams {
    pub const STANDARD: BoostParams = BoostParams { k: 25.0, beta: 1.0 };
    pub const STRONG: BoostParams = BoostParams { k: 33.0, beta: 2.0 };

    /// `beta = 1` leaves the adapter untouched.
    pub fn transform(&self) -> AdapterTransform {
        if self.beta == 1.0 {
            AdapterTransform::Identity
        } else {
            AdapterTransform::selective(self.k, self.beta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutePath {
    Standard,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub path: RoutePath,
    /// Kept for logging only.
    pub probe_answer: String,
    /// The probe flagged uncertainty.
    pub fired: bool,
    pub max_prob: Option<f64>,
}

impl RouteDecision {
    pub fn from_probe(probe: ProbeOutcome) -> Self {
        Self {
            path: if probe.uncertain {
                RoutePath::Standard
            } else {
                RoutePath::Strong
            },
            probe_answer: probe.answer,
            fired: probe.uncertain,
            max_prob: probe.max_prob,
        }
    }

    pub fn transform(&self, standard: BoostParams, strong: BoostParams) -> AdapterTransform {
        match self.path {
            RoutePath::Standard => standard.transform(),
            RoutePath::Strong => strong.transform(),
        }
    }

    pub fn apply(
        &self,
        adapter: &Adapter,
        standard: BoostParams,
        strong: BoostParams,
    ) -> Result<Adapter> {
        self.transform(standard, strong).apply(adapter)
    }
}

/// Probe and pick the adapter transform for `question`.
pub fn route(
    provider: &dyn Provider,
    question: &str,
    config: &ProbeConfig,
    standard: BoostParams,
    strong: BoostParams,
) -> std::result::Result<(RouteDecision, AdapterTransform), ProviderError> {
    let decision = RouteDecision::from_probe(probe_uncertain(provider, question, config)?);
    let transform = decision.transform(standard, strong);
    Ok((decision, transform))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// `None` when every label has the same class.
    pub auc: Option<f64>,
}

/// One labelled probe observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeObservation {
    /// The router chose the strong path.
    pub strong: bool,
    /// The question actually needs boosting.
    pub needs_boost: bool,
    /// Confidence score; higher means more likely to need boosting.
    pub score: f64,
}

/// Precision and recall of strong-path routing against `needs_boost`, and
/// the rank-statistic AUC of `score`.
pub fn probe_metrics(observations: &[ProbeObservation]) -> ProbeMetrics {
    let tp = observations
        .iter()
        .filter(|o| o.strong && o.needs_boost)
        .count();
    let predicted = observations.iter().filter(|o| o.strong).count();
    let actual = observations.iter().filter(|o| o.needs_boost).count();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    ProbeMetrics {
        precision: ratio(tp, predicted),
        recall: ratio(tp, actual),
        auc: rank_auc(observations),
    }
}

fn rank_auc(observations: &[ProbeObservation]) -> Option<f64> {
    let n_pos = observations.iter().filter(|o| o.needs_boost).count();
    let n_neg = observations.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..observations.len()).collect();
    order.sort_by(|&a, &b| observations[a].score.total_cmp(&observations[b].score));
    // midranks for ties
    let mut ranks = vec![0.0; observations.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len()
            && observations[order[j + 1]].score == observations[order[i]].score
        {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = observations
        .iter()
        .zip(&ranks)
        .filter(|(o, _)| o.needs_boost)
        .map(|(_, r)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{Capabilities, GenerationResponse};
    use proptest::prelude::*;

    struct Canned {
        text: String,
        top_prob: Option<f64>,
    }

    impl Provider for Canned {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }

        fn generate(
            &self,
            request: &GenerationRequest,
            adapter: Option<&crate::provider::AdapterPlan>,
        ) -> std::result::Result<GenerationResponse, ProviderError> {
            assert!(adapter.is_none(), "probe must run without an adapter");
            assert_eq!(request.max_tokens, 20);
            Ok(GenerationResponse {
                text: self.text.clone(),
                tokens: vec![self.text.clone()],
                token_logprobs: None,
                first_token_top_prob: self.top_prob,
            })
        }
    }

    fn canned(text: &str, top_prob: Option<f64>) -> Canned {
        Canned {
            text: text.into(),
            top_prob,
        }
    }

    #[test]
    fn lexical_probe() {
        let cfg = ProbeConfig::default();
        let p = probe_uncertain(&canned("I don't know the answer.", None), "q", &cfg).unwrap();
        assert!(p.uncertain);
        let p = probe_uncertain(&canned("Paris.", None), "q", &cfg).unwrap();
        assert!(!p.uncertain);
        let p = probe_uncertain(&canned("UNFORTUNATELY no", None), "q", &cfg).unwrap();
        assert!(p.uncertain);
    }

    #[test]
    fn max_prob_probe() {
        let cfg = ProbeConfig::max_prob(0.3);
        assert!(
            probe_uncertain(&canned("x", Some(0.25)), "q", &cfg)
                .unwrap()
                .uncertain
        );
        assert!(
            !probe_uncertain(&canned("x", Some(0.3)), "q", &cfg)
                .unwrap()
                .uncertain
        );
        assert!(matches!(
            probe_uncertain(&canned("x", None), "q", &cfg),
            Err(ProviderError::Capability(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ProbeConfig::default();
        cfg.markers.clear();
        assert!(cfg.validate().is_err());
        assert!(ProbeConfig::max_prob(1.0).validate().is_err());
        assert!(ProbeConfig::max_prob(0.0).validate().is_err());
    }

    #[test]
    fn route_paths() {
        let (d, t) = route(
            &canned("not sure", None),
            "q",
            &ProbeConfig::default(),
            BoostParams::STANDARD,
            BoostParams::STRONG,
        )
        .unwrap();
        assert_eq!(d.path, RoutePath::Standard);
        assert!(d.fired);
        assert_eq!(t, AdapterTransform::Identity);
        let (d, t) = route(
            &canned("Lyon", None),
            "q",
            &ProbeConfig::default(),
            BoostParams::STANDARD,
            BoostParams::STRONG,
        )
        .unwrap();
        assert_eq!(d.path, RoutePath::Strong);
        assert!(!d.fired);
        assert_eq!(t, AdapterTransform::selective(33.0, 2.0));
    }

    #[test]
    fn marker_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "Cannot\n\nno idea\n").unwrap();
        assert_eq!(load_markers(&path).unwrap(), vec!["cannot", "no idea"]);
        fs::write(&path, "\n").unwrap();
        assert!(load_markers(&path).is_err());
    }

    #[test]
    fn metrics_simple() {
        let obs: Vec<ProbeObservation> = (0..4)
            .map(|i| ProbeObservation {
                strong: true,
                needs_boost: i % 2 == 0,
                score: 1.0,
            })
            .collect();
        let m = probe_metrics(&obs);
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.auc, Some(0.5));
        let single: Vec<_> = obs
            .iter()
            .map(|o| ProbeObservation {
                needs_boost: true,
                ..*o
            })
            .collect();
        assert_eq!(probe_metrics(&single).auc, None);
    }

    fn pairwise_auc(obs: &[ProbeObservation]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for p in obs.iter().filter(|o| o.needs_boost) {
            for n in obs.iter().filter(|o| !o.needs_boost) {
                pairs += 1.0;
                if p.score > n.score {
                    wins += 1.0;
                } else if p.score == n.score {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(items in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let obs: Vec<ProbeObservation> = items
                .iter()
                .map(|&(s, y)| ProbeObservation { strong: s > 2, needs_boost: y, score: f64::from(s) })
                .collect();
            let has_both = obs.iter().any(|o| o.needs_boost) && obs.iter().any(|o| !o.needs_boost);
            match probe_metrics(&obs).auc {
                Some(auc) => {
                    prop_assert!(has_both);
                    prop_assert!((auc - pairwise_auc(&obs)).abs() < 1e-12);
                }
                None => prop_assert!(!has_both),
            }
        }

        #[test]
        fn adding_marker_keeps_uncertain(answer in "[a-z ']{0,30}", extra in "[a-z ]{1,8}") {
            let base: Vec<String> = DEFAULT_MARKERS.iter().map(|m| m.to_string()).collect();
            let mut more = base.clone();
            more.push(extra);
            prop_assert!(!contains_marker(&answer, &base) || contains_marker(&answer, &more));
        }
    }
}
