//! Generator for desk fixtures: a model spec plus a matching question set.

use serde::{Deserialize, Serialize};

use super::internalizer::AdapterProfile;
use super::model::{DeskModelConfig, PlantedFact};
use super::DeskSpec;
use crate::bench::{ConflictQuestion, Dimension, Tier};
use crate::error::{Error, Result};

const RELATIONS: [&str; 8] = [
    "capital", "currency", "founder", "language", "anthem", "mascot", "river", "summit",
];
const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "v"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Pronounceable alphabetic names, unique per index, at least six letters.
fn name(index: usize) -> String {
    let syllables = ONSETS.len() * VOWELS.len();
    let mut s = String::new();
    let mut rest = index;
    for _ in 0..3 {
        let syl = rest % syllables;
        rest /= syllables;
        s.push_str(ONSETS[syl % ONSETS.len()]);
        s.push_str(VOWELS[syl / ONSETS.len()]);
    }
    while rest > 0 {
        s.push_str(ONSETS[rest % ONSETS.len()]);
        rest /= ONSETS.len();
    }
    s.push('s');
    s
}

fn default_phrasings() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n_layers: usize,
    pub n_conflicts: usize,
    pub n_novel: usize,
    #[serde(default)]
    pub n_retention: usize,
    /// `log10` prior frequencies, cycled over the conflict questions.
    pub conflict_log10_freqs: Vec<f64>,
    #[serde(default)]
    pub retention_log10_freq: f64,
    /// Layers holding planted facts and most of the adapter's gain.
    pub peak_layers: Vec<usize>,
    pub peak_share: f64,
    pub gain: f64,
    /// Log-normal spread of the per-document adapter gain.
    #[serde(default)]
    pub gain_spread: f64,
    #[serde(default = "default_phrasings")]
    pub phrasings: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    /// 12 layers, facts and adapter mass localized on layers 5-7.
    pub fn standard(
        n_conflicts: usize,
        n_novel: usize,
        conflict_log10_freqs: Vec<f64>,
        seed: u64,
    ) -> Self {
        Self {
            n_layers: 12,
            n_conflicts,
            n_novel,
            n_retention: 0,
            conflict_log10_freqs,
            retention_log10_freq: 3.0,
            peak_layers: vec![5, 6, 7],
            peak_share: 0.85,
            gain: 3.0,
            gain_spread: 0.0,
            phrasings: 1,
            seed,
        }
    }
}

pub fn tier_for(log10_freq: f64) -> Tier {
    if log10_freq < 1.5 {
        Tier::Light
    } else if log10_freq < 3.0 {
        Tier::Medium
    } else {
        Tier::Deep
    }
}

const N_ANSWERS: usize = 16;

/// Builds the desk spec and the questions that exercise it.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<(DeskSpec, Vec<ConflictQuestion>)> {
    if spec.n_conflicts > 0 && spec.conflict_log10_freqs.is_empty() {
        return Err(Error::InvalidParameter(
            "conflicts need at least one log10 frequency".into(),
        ));
    }
    if spec.peak_layers.is_empty() || spec.peak_layers.iter().any(|&l| l >= spec.n_layers) {
        return Err(Error::InvalidParameter(
            "peak layers must be non-empty and inside the model".into(),
        ));
    }
    if !(1..=2).contains(&spec.phrasings) {
        return Err(Error::InvalidParameter("phrasings must be 1 or 2".into()));
    }
    let n_prompts = spec.n_conflicts + spec.n_novel + spec.n_retention;
    if n_prompts == 0 {
        return Err(Error::EmptyInput("scenario has no questions".into()));
    }
    let n_subjects = n_prompts.div_ceil(RELATIONS.len());
    let subjects: Vec<String> = (0..n_subjects).map(name).collect();
    let answers: Vec<String> = (n_subjects..n_subjects + N_ANSWERS).map(name).collect();

    let mut vocab: Vec<String> = RELATIONS.iter().map(|s| s.to_string()).collect();
    vocab.extend(subjects.iter().cloned());
    vocab.extend(answers.iter().cloned());
    let d_model = 2 * vocab.len().max(8);

    let prompt_tokens = |i: usize| -> (String, String) {
        (
            RELATIONS[i % RELATIONS.len()].to_string(),
            subjects[i / RELATIONS.len()].clone(),
        )
    };

    let mut facts = Vec::new();
    let mut questions = Vec::new();
    let push_phrasings =
        |questions: &mut Vec<ConflictQuestion>, base: ConflictQuestion, rel: &str, subj: &str| {
            for p in 0..spec.phrasings {
                let mut q = base.clone();
                q.phrasing_index = p;
                q.prompt = if p == 0 {
                    format!("{rel} {subj}")
                } else {
                    format!("{subj} {rel}")
                };
                q.id = format!("{}-p{p}", base.knowledge_point_id);
                questions.push(q);
            }
        };

    let mut conflict_docs = Vec::with_capacity(spec.n_conflicts);
    for i in 0..spec.n_conflicts {
        let (rel, subj) = prompt_tokens(i);
        let log_f = spec.conflict_log10_freqs[i % spec.conflict_log10_freqs.len()];
        let pre = &answers[i % N_ANSWERS];
        let doc_answer = &answers[(i * 7 + 3) % N_ANSWERS];
        let doc_answer = if doc_answer == pre {
            &answers[(i + 1) % N_ANSWERS]
        } else {
            doc_answer
        };
        facts.push(PlantedFact {
            context_key: vec![rel.clone(), subj.clone()],
            answer_token: pre.clone(),
            frequency: 10f64.powf(log_f),
            layer_id: spec.peak_layers[i % spec.peak_layers.len()],
        });
        let document = format!("{rel} {subj} is {doc_answer}.");
        conflict_docs.push(document.clone());
        let q = ConflictQuestion {
            id: String::new(),
            knowledge_point_id: format!("c{i:03}"),
            dimension: Dimension::C,
            tier: Some(tier_for(log_f)),
            prompt: String::new(),
            document,
            expected_answer: doc_answer.clone(),
            pretrained_answer: Some(pre.clone()),
            phrasing_index: 0,
            relevant: Some(true),
        };
        push_phrasings(&mut questions, q, &rel, &subj);
    }
    for j in 0..spec.n_novel {
        let i = spec.n_conflicts + j;
        let (rel, subj) = prompt_tokens(i);
        let ans = &answers[(j * 5 + 1) % N_ANSWERS];
        let q = ConflictQuestion {
            id: String::new(),
            knowledge_point_id: format!("a{j:03}"),
            dimension: Dimension::A,
            tier: None,
            prompt: String::new(),
            document: format!("{rel} {subj} is {ans}."),
            expected_answer: ans.clone(),
            pretrained_answer: None,
            phrasing_index: 0,
            relevant: Some(true),
        };
        push_phrasings(&mut questions, q, &rel, &subj);
    }
    for j in 0..spec.n_retention {
        let i = spec.n_conflicts + spec.n_novel + j;
        let (rel, subj) = prompt_tokens(i);
        let ans = &answers[(j * 3 + 2) % N_ANSWERS];
        facts.push(PlantedFact {
            context_key: vec![rel.clone(), subj.clone()],
            answer_token: ans.clone(),
            frequency: 10f64.powf(spec.retention_log10_freq),
            layer_id: spec.peak_layers[j % spec.peak_layers.len()],
        });
        let document = if conflict_docs.is_empty() {
            format!("{} {} is {}.", RELATIONS[0], subjects[0], answers[0])
        } else {
            conflict_docs[j % conflict_docs.len()].clone()
        };
        let q = ConflictQuestion {
            id: String::new(),
            knowledge_point_id: format!("r{j:03}"),
            dimension: Dimension::R,
            tier: None,
            prompt: String::new(),
            document,
            expected_answer: ans.clone(),
            pretrained_answer: None,
            phrasing_index: 0,
            relevant: Some(false),
        };
        push_phrasings(&mut questions, q, &rel, &subj);
    }

    let config = DeskModelConfig::new(spec.n_layers, d_model, vocab, spec.seed);
    let mut profile =
        AdapterProfile::localized(spec.n_layers, &spec.peak_layers, spec.peak_share, spec.gain);
    profile.seed = spec.seed;
    profile.gain_spread = spec.gain_spread;
    Ok((
        DeskSpec {
            config,
            facts,
            adapter_profile: profile,
        },
        questions,
    ))
}
