//! Deterministic document-to-adapter generator for desk scenarios.
//!
//! Desk documents are sentences of the form `<key tokens> is <answer>.`.
//! Each sentence becomes one rank slot whose contribution at layer `l` adds
//! exactly `gain * weight_l` to the answer logit on the sentence's own key
//! prompt. Unused rank slots carry small random factors that write into the
//! answer block only. Without `gain_spread` the adapter margin is the same
//! for every document, whatever the strength of the prior it contradicts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::DeskModel;
use crate::adapter::{Adapter, LayerFactors};
use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterProfile {
    pub rank: usize,
    pub alpha: f64,
    /// Total logit push toward the document answer, summed over layers.
    pub gain: f64,
    /// Relative contribution of each layer; normalised to sum to one.
    pub layer_weights: Vec<f64>,
    /// Std of the filler factors in unused rank slots.
    pub noise_std: f64,
    /// Log-normal spread of the per-document gain multiplier.
    #[serde(default)]
    pub gain_spread: f64,
    pub seed: u64,
}

impl AdapterProfile {
    /// `peak_share` of the gain spread evenly over `peak_layers`, the rest
    /// spread evenly over the remaining layers.
    pub fn localized(n_layers: usize, peak_layers: &[usize], peak_share: f64, gain: f64) -> Self {
        let n_peak = peak_layers.len().max(1) as f64;
        let n_rest = (n_layers - peak_layers.len()).max(1) as f64;
        let layer_weights = (0..n_layers)
            .map(|l| {
                if peak_layers.contains(&l) {
                    peak_share / n_peak
                } else {
                    (1.0 - peak_share) / n_rest
                }
            })
            .collect();
        Self {
            rank: 8,
            alpha: 45.25,
            gain,
            layer_weights,
            noise_std: 0.03,
            gain_spread: 0.0,
            seed: 0,
        }
    }

    fn normalized_weights(&self, n_layers: usize) -> Result<Vec<f64>> {
        if self.layer_weights.len() != n_layers {
            return Err(Error::Shape(format!(
                "profile has {} layer weights, model has {n_layers} layers",
                self.layer_weights.len()
            )));
        }
        if self
            .layer_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidParameter(
                "layer weights must be non-negative".into(),
            ));
        }
        let total: f64 = self.layer_weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("layer weights sum to zero".into()));
        }
        Ok(self.layer_weights.iter().map(|w| w / total).collect())
    }
}

/// One `<key> is <answer>` statement of a desk document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentFact {
    pub key: Vec<String>,
    pub answer: String,
}

pub fn parse_document(document: &str) -> Result<Vec<DocumentFact>> {
    let mut facts = Vec::new();
    for sentence in document.split('.') {
        let tokens: Vec<&str> = sentence.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let split = tokens.iter().rposition(|t| *t == "is").ok_or_else(|| {
            Error::InvalidParameter(format!("desk sentence without `is`: `{}`", sentence.trim()))
        })?;
        let key = &tokens[..split];
        let answer = &tokens[split + 1..];
        if key.is_empty() || answer.len() != 1 {
            return Err(Error::InvalidParameter(format!(
                "desk sentence must read `<key> is <answer>`: `{}`",
                sentence.trim()
            )));
        }
        facts.push(DocumentFact {
            key: key.iter().map(|s| s.to_string()).collect(),
            answer: answer[0].to_string(),
        });
    }
    if facts.is_empty() {
        return Err(Error::EmptyInput("document".into()));
    }
    Ok(facts)
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Builds the adapter for `document` against `model`.
pub fn internalize(model: &DeskModel, profile: &AdapterProfile, document: &str) -> Result<Adapter> {
    let facts = parse_document(document)?;
    let rank = profile.rank;
    if facts.len() > rank {
        return Err(Error::InvalidParameter(format!(
            "document has {} statements but adapter rank is {rank}",
            facts.len()
        )));
    }
    let n_layers = model.n_layers();
    let weights = profile.normalized_weights(n_layers)?;
    let d_model = model.d_model();
    let key_w = model.config().key_width();

    let mut signals = Vec::with_capacity(facts.len());
    for f in &facts {
        let hidden = model.hidden_activations(&f.key.join(" "))?;
        let answer = model.token_id(&f.answer)?;
        signals.push((hidden, model.unembedding(answer).to_vec()));
    }

    let doc_seed = profile.seed ^ fnv1a(document);
    let mut rng = ChaCha8Rng::seed_from_u64(doc_seed);
    let spread: f64 = ChaCha8Rng::seed_from_u64(!doc_seed).sample(StandardNormal);
    let gain = profile.gain * (profile.gain_spread * spread).exp();
    let coeff = rank as f64 / profile.alpha;
    let mut layers = Vec::with_capacity(n_layers);
    for (l, &weight) in weights.iter().enumerate() {
        let d_in = model.hidden_width(l);
        let mut a = Matrix::zeros(rank, d_in);
        let mut b = Matrix::zeros(d_model, rank);
        for (slot, (hidden, unembed)) in signals.iter().enumerate() {
            let z = &hidden[l];
            let z_norm = norm(z);
            let g = gain * weight;
            if g <= 0.0 || z_norm == 0.0 {
                continue;
            }
            let c = (g * coeff / z_norm).sqrt();
            for (j, v) in z.iter().enumerate() {
                a.set(slot, j, v / z_norm * c);
            }
            for (i, u) in unembed.iter().enumerate() {
                b.set(i, slot, u * c);
            }
        }
        for slot in signals.len()..rank {
            for j in 0..d_in {
                a.set(
                    slot,
                    j,
                    profile.noise_std * rng.sample::<f64, _>(StandardNormal),
                );
            }
            for i in key_w..d_model {
                b.set(
                    i,
                    slot,
                    profile.noise_std * rng.sample::<f64, _>(StandardNormal),
                );
            }
        }
        layers.push(LayerFactors::new(l, a, b)?);
    }
    Adapter::new(layers, rank, profile.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::desk::{build_scenario, ScenarioSpec};

    #[test]
    fn parses_statements() {
        let facts = parse_document("capital zorbia is lyon. currency vexlo is mark.").unwrap();
        assert_eq!(facts.len(), 2);
        assert_eq!(facts[1].key, vec!["currency", "vexlo"]);
        assert_eq!(facts[1].answer, "mark");
        assert!(parse_document("capital zorbia lyon").is_err());
        assert!(parse_document("is lyon").is_err());
        assert!(parse_document("capital is big lyon").is_err());
        assert!(parse_document(" . ").is_err());
    }

    #[test]
    fn own_prompt_receives_the_full_gain() {
        let (spec, qs) = build_scenario(&ScenarioSpec::standard(4, 2, vec![2.0], 3)).unwrap();
        let model = spec.build().unwrap();
        let mut profile = spec.adapter_profile.clone();
        profile.noise_std = 0.0;
        for q in &qs {
            let ad = internalize(&model, &profile, &q.document).unwrap();
            let base = model.logits(&q.prompt, None).unwrap();
            let with = model.logits(&q.prompt, Some(&ad)).unwrap();
            let t = model.token_id(&q.expected_answer).unwrap();
            assert!((with[t] - base[t] - profile.gain).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_and_rank_bounded() {
        let (spec, qs) = build_scenario(&ScenarioSpec::standard(2, 0, vec![2.0], 3)).unwrap();
        let model = spec.build().unwrap();
        let a = internalize(&model, &spec.adapter_profile, &qs[0].document).unwrap();
        let b = internalize(&model, &spec.adapter_profile, &qs[0].document).unwrap();
        assert_eq!(a, b);
        let mut small = spec.adapter_profile.clone();
        small.rank = 1;
        let two = format!("{} {}", qs[0].document, qs[1].document);
        assert!(internalize(&model, &small, &two).is_err());
        small.layer_weights.pop();
        assert!(internalize(&model, &small, &qs[0].document).is_err());
    }
}
