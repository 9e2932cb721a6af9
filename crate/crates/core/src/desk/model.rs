use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

fn default_d_ff() -> usize {
    16
}

fn default_key_threshold() -> f64 {
    0.75
}

fn default_base_std() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab: Vec<String>,
    /// Value magnitude gain per unit of `ln f`.
    pub freq_gain: f64,
    /// Value magnitude offset.
    pub freq_offset: f64,
    pub seed: u64,
    /// Width of the randomly initialised background block of every layer.
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    /// Cosine a prompt must exceed against a planted key before the fact fires.
    #[serde(default = "default_key_threshold")]
    pub key_threshold: f64,
    /// Std of the background down-projection weights.
    #[serde(default = "default_base_std")]
    pub base_std: f64,
}

impl DeskModelConfig {
    pub fn new(n_layers: usize, d_model: usize, vocab: Vec<String>, seed: u64) -> Self {
        Self {
            n_layers,
            d_model,
            vocab,
            freq_gain: 0.5,
            freq_offset: 1.0,
            seed,
            d_ff: default_d_ff(),
            key_threshold: default_key_threshold(),
            base_std: default_base_std(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::InvalidParameter(
                "desk model needs at least 2 layers".into(),
            ));
        }
        if self.d_model < 4 {
            return Err(Error::InvalidParameter("d_model must be at least 4".into()));
        }
        if self.vocab.is_empty() {
            return Err(Error::EmptyInput("vocabulary".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.vocab {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidParameter(format!(
                    "invalid vocab token `{t}`"
                )));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate vocab token `{t}`"
                )));
            }
        }
        if !(self.key_threshold >= 0.0 && self.key_threshold < 1.0) {
            return Err(Error::InvalidParameter(
                "key_threshold must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Width of the block holding input embeddings; the rest holds unembeddings.
    pub fn key_width(&self) -> usize {
        self.d_model / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedFact {
    pub context_key: Vec<String>,
    pub answer_token: String,
    pub frequency: f64,
    pub layer_id: usize,
}

#[derive(Debug, Clone)]
struct DeskLayer {
    read: Matrix,
    bias: Vec<f64>,
    down: Matrix,
}

/// Embeddings, `L` blocks of `relu(read * h + bias)` followed by a
/// down-projection written back into the residual, then unembedding.
///
/// Input embeddings occupy the first `d_model / 2` coordinates and
/// unembeddings the rest. Reads see only the first block and base writes
/// land only in the second, so planted keys match exactly at every depth.
#[derive(Debug, Clone)]
pub struct DeskModel {
    config: DeskModelConfig,
    facts: Vec<PlantedFact>,
    token_index: HashMap<String, usize>,
    embed: Matrix,
    unembed: Matrix,
    layers: Vec<DeskLayer>,
}

/// Result of a decoding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub token_ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Log-probability of each emitted token under the untempered distribution.
    pub logprobs: Vec<f64>,
    /// Largest softmax probability at the first generated position.
    pub first_token_top_prob: f64,
}

/// Unit rows spanning `cols` columns starting at `offset`; orthonormal when
/// there are no more rows than columns.
fn token_table(
    rng: &mut ChaCha8Rng,
    n: usize,
    d_model: usize,
    offset: usize,
    width: usize,
) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        if rows.len() < width {
            for prev in &rows {
                let p = dot(&v, prev);
                for (x, y) in v.iter_mut().zip(prev) {
                    *x -= p * y;
                }
            }
        }
        let len = norm(&v);
        v.iter_mut().for_each(|x| *x /= len);
        rows.push(v);
    }
    let mut m = Matrix::zeros(n, d_model);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m.set(i, offset + j, v);
        }
    }
    m
}

impl DeskModel {
    /// Builds base weights from `config.seed` and writes each planted fact
    /// into its layer as a rank-1 key/value pair with value magnitude
    /// `freq_offset + freq_gain * ln(frequency)`.
    pub fn build(config: DeskModelConfig, facts: Vec<PlantedFact>) -> Result<Self> {
        config.validate()?;
        let token_index: HashMap<String, usize> = config
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for f in &facts {
            if f.layer_id >= config.n_layers {
                return Err(Error::InvalidParameter(format!(
                    "fact targets layer {} but model has {}",
                    f.layer_id, config.n_layers
                )));
            }
            if !(f.frequency.is_finite() && f.frequency > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "fact frequency must be positive, got {}",
                    f.frequency
                )));
            }
            if !token_index.contains_key(&f.answer_token) {
                return Err(Error::UnknownToken(f.answer_token.clone()));
            }
            if f.context_key.is_empty() {
                return Err(Error::EmptyInput("fact context key".into()));
            }
            for t in &f.context_key {
                if !token_index.contains_key(t) {
                    return Err(Error::UnknownToken(t.clone()));
                }
            }
        }

        let d_model = config.d_model;
        let key_w = config.key_width();
        let ans_w = d_model - key_w;
        let n_vocab = config.vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = token_table(&mut rng, n_vocab, d_model, 0, key_w);
        let unembed = token_table(&mut rng, n_vocab, d_model, key_w, ans_w);

        let read_std = 1.0 / (key_w as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let read = Matrix::from_fn(config.d_ff, d_model, |_, j| {
                if j < key_w {
                    read_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                }
            });
            let down = Matrix::from_fn(d_model, config.d_ff, |i, _| {
                if i >= key_w {
                    config.base_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                }
            });
            layers.push(DeskLayer {
                read,
                bias: vec![0.0; config.d_ff],
                down,
            });
        }

        let mut model = Self {
            config,
            facts: Vec::new(),
            token_index,
            embed,
            unembed,
            layers,
        };
        for fact in &facts {
            model.plant(fact)?;
        }
        model.facts = facts;
        Ok(model)
    }

    fn plant(&mut self, fact: &PlantedFact) -> Result<()> {
        let ids = self.encode_tokens(&fact.context_key)?;
        let key = self.embed_prompt(&ids);
        let key_norm = norm(&key);
        let theta = self.config.key_threshold;
        // activation is relu((cos(h, key) * |h| / |key| - theta) / (1 - theta)),
        // which is 1 on the key itself.
        let read_row: Vec<f64> = key
            .iter()
            .map(|v| v / (key_norm * key_norm * (1.0 - theta)))
            .collect();
        let bias = -theta / (1.0 - theta);
        let magnitude = self.config.freq_offset + self.config.freq_gain * fact.frequency.ln();
        let answer = self.token_index[&fact.answer_token];
        let value: Vec<f64> = self
            .unembed
            .row(answer)
            .iter()
            .map(|u| magnitude * u)
            .collect();

        let layer = &mut self.layers[fact.layer_id];
        let d_model = self.config.d_model;
        let old_h = layer.read.rows();
        let mut read = Matrix::zeros(old_h + 1, d_model);
        let mut down = Matrix::zeros(d_model, old_h + 1);
        for i in 0..old_h {
            for j in 0..d_model {
                read.set(i, j, layer.read.get(i, j));
                down.set(j, i, layer.down.get(j, i));
            }
        }
        for j in 0..d_model {
            read.set(old_h, j, read_row[j]);
            down.set(j, old_h, value[j]);
        }
        layer.read = read;
        layer.down = down;
        layer.bias.push(bias);
        Ok(())
    }

    pub fn config(&self) -> &DeskModelConfig {
        &self.config
    }

    pub fn facts(&self) -> &[PlantedFact] {
        &self.facts
    }

    pub fn vocab(&self) -> &[String] {
        &self.config.vocab
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Input width of layer `l`'s down-projection (background plus planted units).
    pub fn hidden_width(&self, layer_id: usize) -> usize {
        self.layers[layer_id].read.rows()
    }

    pub fn token_id(&self, token: &str) -> Result<usize> {
        self.token_index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    /// Unit unembedding vector of a token.
    pub fn unembedding(&self, token_id: usize) -> &[f64] {
        self.unembed.row(token_id)
    }

    fn encode_tokens(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.token_id(t)).collect()
    }

    /// Whitespace tokenization against the vocabulary; unknown tokens are errors.
    pub fn encode(&self, prompt: &str) -> Result<Vec<usize>> {
        let ids = prompt
            .split_whitespace()
            .map(|t| self.token_id(t))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("prompt".into()));
        }
        Ok(ids)
    }

    fn embed_prompt(&self, ids: &[usize]) -> Vec<f64> {
        let mut x = vec![0.0; self.config.d_model];
        for &id in ids {
            for (xi, e) in x.iter_mut().zip(self.embed.row(id)) {
                *xi += e;
            }
        }
        let n = ids.len() as f64;
        x.iter_mut().for_each(|v| *v /= n);
        x
    }

    /// Checks that an adapter fits this model's down-projections.
    pub fn check_adapter(&self, adapter: &Adapter) -> Result<()> {
        for l in adapter.layers() {
            if l.layer_id >= self.layers.len() {
                return Err(Error::Shape(format!(
                    "adapter layer {} beyond model depth {}",
                    l.layer_id,
                    self.layers.len()
                )));
            }
            let want = (self.config.d_model, self.hidden_width(l.layer_id));
            if (l.d_out(), l.d_in()) != want {
                return Err(Error::Shape(format!(
                    "adapter layer {} is {}x{}, model expects {}x{}",
                    l.layer_id,
                    l.d_out(),
                    l.d_in(),
                    want.0,
                    want.1
                )));
            }
        }
        Ok(())
    }

    /// Runs the blocks and returns the hidden activation of every layer
    /// together with the final residual.
    fn forward(&self, ids: &[usize], adapter: Option<&Adapter>) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut h = self.embed_prompt(ids);
        let mut hidden = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let z: Vec<f64> = layer
                .read
                .apply(&h)
                .iter()
                .zip(&layer.bias)
                .map(|(v, b)| (v + b).max(0.0))
                .collect();
            let mut out = layer.down.apply(&z);
            if let Some(factors) = adapter.and_then(|a| a.layer(l).ok()) {
                let ad = adapter.expect("checked above");
                let coeff = ad.scale() / ad.rank() as f64;
                let low = factors.a_matrix.apply(&z);
                let delta = factors.b_matrix.apply(&low);
                for (o, d) in out.iter_mut().zip(delta) {
                    *o += coeff * d;
                }
            }
            for (hi, o) in h.iter_mut().zip(out) {
                *hi += o;
            }
            hidden.push(z);
        }
        (hidden, h)
    }

    /// Hidden activations (inputs to each down-projection) of the base model.
    pub fn hidden_activations(&self, prompt: &str) -> Result<Vec<Vec<f64>>> {
        let ids = self.encode(prompt)?;
        Ok(self.forward(&ids, None).0)
    }

    pub fn logits_for_ids(&self, ids: &[usize], adapter: Option<&Adapter>) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("prompt".into()));
        }
        if let Some(ad) = adapter {
            self.check_adapter(ad)?;
        }
        let (_, h) = self.forward(ids, adapter);
        Ok(self.unembed.apply(&h))
    }

    /// Next-token logits over the vocabulary.
    pub fn logits(&self, prompt: &str, adapter: Option<&Adapter>) -> Result<Vec<f64>> {
        let ids = self.encode(prompt)?;
        self.logits_for_ids(&ids, adapter)
    }

    /// Greedy decoding at `temperature == 0`, seeded softmax sampling otherwise.
    /// Each step conditions on the prompt plus the tokens generated so far.
    pub fn generate(
        &self,
        prompt: &str,
        adapter: Option<&Adapter>,
        budget: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<GenerationTrace> {
        if budget == 0 {
            return Err(Error::InvalidParameter("budget must be at least 1".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be finite and non-negative, got {temperature}"
            )));
        }
        let mut ids = self.encode(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trace = GenerationTrace {
            token_ids: Vec::with_capacity(budget),
            tokens: Vec::with_capacity(budget),
            logprobs: Vec::with_capacity(budget),
            first_token_top_prob: 0.0,
        };
        for step in 0..budget {
            let logits = self.logits_for_ids(&ids, adapter)?;
            let logp = log_softmax(&logits);
            if step == 0 {
                trace.first_token_top_prob =
                    logp.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
            }
            let next = if temperature == 0.0 {
                argmax(&logits)
            } else {
                sample_tempered(&logits, temperature, &mut rng)
            };
            trace.token_ids.push(next);
            trace.tokens.push(self.config.vocab[next].clone());
            trace.logprobs.push(logp[next]);
            ids.push(next);
        }
        Ok(trace)
    }

    /// Mean per-token log-probability of `answer` given `prompt`, teacher-forced.
    pub fn answer_logprob(
        &self,
        prompt: &str,
        answer: &str,
        adapter: Option<&Adapter>,
    ) -> Result<f64> {
        let mut ids = self.encode(prompt)?;
        let answer_ids = self.encode(answer)?;
        let mut total = 0.0;
        for &a in &answer_ids {
            let logp = log_softmax(&self.logits_for_ids(&ids, adapter)?);
            total += logp[a];
            ids.push(a);
        }
        Ok(total / answer_ids.len() as f64)
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

fn sample_tempered(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).iter().map(|v| v.exp()).collect();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
