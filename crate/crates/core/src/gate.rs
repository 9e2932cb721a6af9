//! Lexical relevance gate: decide per query whether the document adapter
//! applies at all.
//!
//! Content tokens are lowercase alphabetic runs of at least `min_token_len`
//! characters that are not stopwords. Under the acronym-aware policy, known
//! short forms also contribute the tokens of their expansion (the short
//! form itself is kept), and 4+ character substring hits between query and
//! document count as a match.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");
const DEFAULT_ACRONYMS: &str = include_str!("../data/acronyms.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePolicy {
    /// Always apply the adapter.
    None,
    Strict4,
    Acronym3,
    /// Bernoulli pass with probability `random_p`.
    Random,
    /// Ground-truth relevance label.
    Oracle,
}

impl fmt::Display for GatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatePolicy::None => "none",
            GatePolicy::Strict4 => "strict4",
            GatePolicy::Acronym3 => "acronym3",
            GatePolicy::Random => "random",
            GatePolicy::Oracle => "oracle",
        })
    }
}

impl FromStr for GatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GatePolicy::None),
            "strict4" => Ok(GatePolicy::Strict4),
            "acronym3" => Ok(GatePolicy::Acronym3),
            "random" => Ok(GatePolicy::Random),
            "oracle" => Ok(GatePolicy::Oracle),
            other => Err(Error::InvalidParameter(format!(
                "unknown gate policy `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub policy: GatePolicy,
    pub min_token_len: usize,
    pub stopwords: BTreeSet<String>,
    pub acronym_map: BTreeMap<String, String>,
    pub random_p: f64,
    pub seed: u64,
}

pub fn default_stopwords() -> BTreeSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

pub fn default_acronyms() -> BTreeMap<String, String> {
    parse_acronyms(DEFAULT_ACRONYMS).expect("bundled acronym table is well formed")
}

fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

fn parse_acronyms(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (short, expansion) = line
            .split_once('\t')
            .ok_or_else(|| Error::InvalidParameter(format!("acronym line {} has no tab", n + 1)))?;
        map.insert(short.trim().to_string(), expansion.trim().to_string());
    }
    Ok(map)
}

/// One word per line.
pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>> {
    Ok(parse_stopwords(
        &fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// `SHORT<TAB>expansion` per line.
pub fn load_acronyms(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_acronyms(&text).map_err(|e| Error::format(path, e.to_string()))
}

impl GateConfig {
    fn base(policy: GatePolicy, min_token_len: usize) -> Self {
        Self {
            policy,
            min_token_len,
            stopwords: default_stopwords(),
            acronym_map: BTreeMap::new(),
            random_p: 0.5,
            seed: 0,
        }
    }

    pub fn none() -> Self {
        Self::base(GatePolicy::None, 4)
    }

    pub fn strict4() -> Self {
        Self::base(GatePolicy::Strict4, 4)
    }

    pub fn acronym3() -> Self {
        Self {
            acronym_map: default_acronyms(),
            ..Self::base(GatePolicy::Acronym3, 3)
        }
    }

    pub fn random(p: f64, seed: u64) -> Self {
        Self {
            random_p: p,
            seed,
            ..Self::base(GatePolicy::Random, 4)
        }
    }

    pub fn oracle() -> Self {
        Self::base(GatePolicy::Oracle, 4)
    }

    pub fn for_policy(policy: GatePolicy) -> Self {
        match policy {
            GatePolicy::None => Self::none(),
            GatePolicy::Strict4 => Self::strict4(),
            GatePolicy::Acronym3 => Self::acronym3(),
            GatePolicy::Random => Self::random(0.5, 0),
            GatePolicy::Oracle => Self::oracle(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.policy {
            GatePolicy::Strict4 if self.min_token_len != 4 => Err(Error::InvalidParameter(
                "strict4 requires min_token_len = 4".into(),
            )),
            GatePolicy::Acronym3 if self.min_token_len != 3 || self.acronym_map.is_empty() => {
                Err(Error::InvalidParameter(
                    "acronym3 requires min_token_len = 3 and a non-empty acronym map".into(),
                ))
            }
            GatePolicy::Random if !(0.0..=1.0).contains(&self.random_p) => {
                Err(Error::InvalidParameter("random_p must be in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    /// `true` applies the adapter; `false` bypasses it.
    pub pass: bool,
    pub shared_tokens: Vec<String>,
    pub policy_used: GatePolicy,
}

fn alphabetic_runs(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
}

/// Content-token set of `text` under `config`.
pub fn content_tokens(text: &str, config: &GateConfig) -> BTreeSet<String> {
    let expand = config.policy == GatePolicy::Acronym3;
    let mut words: Vec<String> = Vec::new();
    for raw in alphabetic_runs(text) {
        words.push(raw.to_lowercase());
        if expand {
            if let Some(expansion) = config.acronym_map.get(raw) {
                words.extend(alphabetic_runs(expansion).map(str::to_lowercase));
            }
        }
    }
    words
        .into_iter()
        .filter(|w| w.chars().count() >= config.min_token_len && !config.stopwords.contains(w))
        .collect()
}

pub(crate) fn fnv1a(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0u8)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Gate decision for one query against one document. `relevant` is the
/// ground-truth label consumed by the oracle policy.
pub fn gate_decide(
    query: &str,
    document: &str,
    relevant: Option<bool>,
    config: &GateConfig,
) -> Result<GateDecision> {
    config.validate()?;
    let decision = |pass, shared_tokens| GateDecision {
        pass,
        shared_tokens,
        policy_used: config.policy,
    };
    match config.policy {
        GatePolicy::None => Ok(decision(true, Vec::new())),
        GatePolicy::Oracle => {
            let label = relevant.ok_or_else(|| {
                Error::InvalidParameter("oracle gate needs a relevance label on the query".into())
            })?;
            Ok(decision(label, Vec::new()))
        }
        GatePolicy::Random => {
            // seeded per (query, document) so decisions replay in any order
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(&[query, document]));
            let pass = rng.random::<f64>() < config.random_p;
            Ok(decision(pass, Vec::new()))
        }
        GatePolicy::Strict4 | GatePolicy::Acronym3 => {
            let q = content_tokens(query, config);
            let d = content_tokens(document, config);
            let mut shared: BTreeSet<String> = q.intersection(&d).cloned().collect();
            if config.policy == GatePolicy::Acronym3 {
                let q_text = query.to_lowercase();
                let d_text = document.to_lowercase();
                shared.extend(
                    d.iter()
                        .filter(|t| t.chars().count() >= 4 && q_text.contains(t.as_str()))
                        .cloned(),
                );
                shared.extend(
                    q.iter()
                        .filter(|t| t.chars().count() >= 4 && d_text.contains(t.as_str()))
                        .cloned(),
                );
            }
            Ok(decision(!shared.is_empty(), shared.into_iter().collect()))
        }
    }
}
