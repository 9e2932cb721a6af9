//! Per-layer low-rank adapters and the transformations applied to them.
//!
//! An adapter holds one `(A_l, B_l)` pair per target layer, with `A_l` of
//! shape `r x d_in` and `B_l` of shape `d_out x r`. Its contribution to the
//! frozen weight of layer `l` is `(alpha / r) * B_l * A_l`.
//!
//! Every transformation returns a new [`Adapter`]; inputs are never mutated.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFactors {
    pub layer_id: usize,
    /// `r x d_in`
    pub a_matrix: Matrix,
    /// `d_out x r`
    pub b_matrix: Matrix,
}

impl LayerFactors {
    pub fn new(layer_id: usize, a_matrix: Matrix, b_matrix: Matrix) -> Result<Self> {
        if a_matrix.rows() != b_matrix.cols() {
            return Err(Error::Shape(format!(
                "layer {layer_id}: A has {} rows but B has {} columns",
                a_matrix.rows(),
                b_matrix.cols()
            )));
        }
        if !a_matrix.is_finite() || !b_matrix.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "layer {layer_id}: non-finite factor entries"
            )));
        }
        Ok(Self {
            layer_id,
            a_matrix,
            b_matrix,
        })
    }

    pub fn rank(&self) -> usize {
        self.a_matrix.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a_matrix.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b_matrix.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    layers: Vec<LayerFactors>,
    rank: usize,
    scale: f64,
}

impl Adapter {
    /// Validates that every layer shares `rank`, ids are unique, and
    /// `scale` is positive. Layers are stored sorted by id.
    pub fn new(mut layers: Vec<LayerFactors>, rank: usize, scale: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidParameter("rank must be positive".into()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        layers.sort_by_key(|l| l.layer_id);
        for pair in layers.windows(2) {
            if pair[0].layer_id == pair[1].layer_id {
                return Err(Error::InvalidParameter(format!(
                    "duplicate layer id {}",
                    pair[0].layer_id
                )));
            }
        }
        for l in &layers {
            if l.rank() != rank || l.b_matrix.cols() != rank {
                return Err(Error::Shape(format!(
                    "layer {} has rank {} but adapter rank is {rank}",
                    l.layer_id,
                    l.rank()
                )));
            }
        }
        Ok(Self {
            layers,
            rank,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The LoRA scale `alpha`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn layers(&self) -> &[LayerFactors] {
        &self.layers
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().map(|l| l.layer_id)
    }

    pub fn layer(&self, layer_id: usize) -> Result<&LayerFactors> {
        self.layers
            .binary_search_by_key(&layer_id, |l| l.layer_id)
            .map(|i| &self.layers[i])
            .map_err(|_| Error::MissingLayer(layer_id))
    }

    /// Same layers, ranks and shapes with every factor set to zero.
    pub fn zeroed(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerFactors {
                layer_id: l.layer_id,
                a_matrix: l.a_matrix.zeros_like(),
                b_matrix: l.b_matrix.zeros_like(),
            })
            .collect();
        Self {
            layers,
            rank: self.rank,
            scale: self.scale,
        }
    }

    fn map_layers(&self, mut f: impl FnMut(&LayerFactors) -> LayerFactors) -> Self {
        Self {
            layers: self.layers.iter().map(&mut f).collect(),
            rank: self.rank,
            scale: self.scale,
        }
    }

    fn check_ids(&self, ids: &BTreeSet<usize>) -> Result<()> {
        for &id in ids {
            self.layer(id)?;
        }
        Ok(())
    }
}

/// `(alpha / r) * B_l * A_l`, shape `d_out x d_in`.
pub fn effective_delta(adapter: &Adapter, layer_id: usize) -> Result<Matrix> {
    let layer = adapter.layer(layer_id)?;
    let product = layer.b_matrix.matmul(&layer.a_matrix)?;
    Ok(product.scaled(adapter.scale / adapter.rank as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_id: usize,
    pub score: f64,
}

/// Adapter activity at a layer: `||A_l||_F * ||B_l||_F`.
pub fn layer_score(adapter: &Adapter, layer_id: usize) -> Result<LayerScore> {
    let layer = adapter.layer(layer_id)?;
    Ok(LayerScore {
        layer_id,
        score: layer.a_matrix.frobenius_norm() * layer.b_matrix.frobenius_norm(),
    })
}

/// Scores for every layer, in layer order.
pub fn layer_scores(adapter: &Adapter) -> Vec<LayerScore> {
    adapter
        .layers
        .iter()
        .map(|l| LayerScore {
            layer_id: l.layer_id,
            score: l.a_matrix.frobenius_norm() * l.b_matrix.frobenius_norm(),
        })
        .collect()
}

/// Number of layers covered by `k` percent of `n_layers`:
/// `max(1, round_half_up(k * L / 100))`.
pub fn selection_size(n_layers: usize, k: f64) -> Result<usize> {
    if n_layers == 0 {
        return Err(Error::EmptyInput("layer score list".into()));
    }
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "k must be in (0, 100], got {k}"
        )));
    }
    let exact = k * n_layers as f64 / 100.0;
    let rounded = (exact + 0.5).floor() as usize;
    Ok(rounded.clamp(1, n_layers))
}

/// The top `k%` of layers by score; ties go to the lower layer id.
/// Returned ids are ascending.
pub fn select_top_layers(scores: &[LayerScore], k: f64) -> Result<BTreeSet<usize>> {
    let n = selection_size(scores.len(), k)?;
    let mut ranked: Vec<&LayerScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.layer_id.cmp(&b.layer_id))
    });
    Ok(ranked.iter().take(n).map(|s| s.layer_id).collect())
}

/// The bottom `k%` of layers by score; ties go to the lower layer id.
pub fn select_bottom_layers(scores: &[LayerScore], k: f64) -> Result<BTreeSet<usize>> {
    let n = selection_size(scores.len(), k)?;
    let mut ranked: Vec<&LayerScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.layer_id.cmp(&b.layer_id))
    });
    Ok(ranked.iter().take(n).map(|s| s.layer_id).collect())
}

/// A uniformly random `k%` of layers, reproducible per seed.
pub fn select_random_layers(scores: &[LayerScore], k: f64, seed: u64) -> Result<BTreeSet<usize>> {
    let n = selection_size(scores.len(), k)?;
    let mut ids: Vec<usize> = scores.iter().map(|s| s.layer_id).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, ids.len(), n)
        .into_iter()
        .map(|i| ids[i])
        .collect())
}

/// How the boosted layer set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSelection {
    #[default]
    Top,
    Bottom,
    Random {
        seed: u64,
    },
}

impl LayerSelection {
    pub fn select(&self, scores: &[LayerScore], k: f64) -> Result<BTreeSet<usize>> {
        match *self {
            LayerSelection::Top => select_top_layers(scores, k),
            LayerSelection::Bottom => select_bottom_layers(scores, k),
            LayerSelection::Random { seed } => select_random_layers(scores, k, seed),
        }
    }
}

/// Which factor a boost multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostTarget {
    /// `A_l <- beta * A_l`
    #[default]
    A,
    /// `B_l <- beta * B_l`
    B,
    /// Both factors by `sqrt(beta)`; the product gains `beta`.
    BothSqrt,
    /// Both factors by `beta`; the product gains `beta^2`.
    BothFull,
}

impl BoostTarget {
    fn factors(self, beta: f64) -> (f64, f64) {
        match self {
            BoostTarget::A => (beta, 1.0),
            BoostTarget::B => (1.0, beta),
            BoostTarget::BothSqrt => (beta.sqrt(), beta.sqrt()),
            BoostTarget::BothFull => (beta, beta),
        }
    }
}

impl fmt::Display for BoostTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoostTarget::A => "a",
            BoostTarget::B => "b",
            BoostTarget::BothSqrt => "both_sqrt",
            BoostTarget::BothFull => "both_full",
        })
    }
}

impl FromStr for BoostTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(BoostTarget::A),
            "b" => Ok(BoostTarget::B),
            "both_sqrt" | "both-sqrt" => Ok(BoostTarget::BothSqrt),
            "both_full" | "both-full" => Ok(BoostTarget::BothFull),
            other => Err(Error::InvalidParameter(format!(
                "unknown boost target `{other}`"
            ))),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !beta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "beta must be finite, got {beta}"
        )));
    }
    Ok(())
}

/// Scale the chosen factor on the listed layers by `beta`.
pub fn boost_layers(
    adapter: &Adapter,
    layer_ids: &BTreeSet<usize>,
    beta: f64,
    target: BoostTarget,
) -> Result<Adapter> {
    check_beta(beta)?;
    adapter.check_ids(layer_ids)?;
    let (fa, fb) = target.factors(beta);
    Ok(adapter.map_layers(|l| {
        if layer_ids.contains(&l.layer_id) {
            LayerFactors {
                layer_id: l.layer_id,
                a_matrix: l.a_matrix.scaled(fa),
                b_matrix: l.b_matrix.scaled(fb),
            }
        } else {
            l.clone()
        }
    }))
}

/// Selective Layer Boosting: scale the top `k%` of layers by `s_l`.
pub fn boost_selective(
    adapter: &Adapter,
    k: f64,
    beta: f64,
    target: BoostTarget,
) -> Result<Adapter> {
    boost_with_selection(adapter, k, beta, target, LayerSelection::Top)
}

/// Boost a `k%` layer set chosen by `selection` (top, bottom, or random).
pub fn boost_with_selection(
    adapter: &Adapter,
    k: f64,
    beta: f64,
    target: BoostTarget,
    selection: LayerSelection,
) -> Result<Adapter> {
    check_beta(beta)?;
    let ids = selection.select(&layer_scores(adapter), k)?;
    boost_layers(adapter, &ids, beta, target)
}

/// Boost every layer equally.
pub fn boost_global(adapter: &Adapter, beta: f64, target: BoostTarget) -> Result<Adapter> {
    let ids = adapter.layer_ids().collect();
    boost_layers(adapter, &ids, beta, target)
}

/// Remove the adapter contribution of the listed layers.
pub fn zero_layers(adapter: &Adapter, layer_ids: &BTreeSet<usize>) -> Result<Adapter> {
    adapter.check_ids(layer_ids)?;
    Ok(adapter.map_layers(|l| {
        if layer_ids.contains(&l.layer_id) {
            LayerFactors {
                layer_id: l.layer_id,
                a_matrix: l.a_matrix.zeros_like(),
                b_matrix: l.b_matrix.zeros_like(),
            }
        } else {
            l.clone()
        }
    }))
}

/// Factor-wise linear interpolation between two adapters of identical layout.
pub fn interpolate(first: &Adapter, second: &Adapter, t: f64) -> Result<Adapter> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!(
            "t must be in [0, 1], got {t}"
        )));
    }
    if first.rank != second.rank {
        return Err(Error::Shape(format!(
            "rank mismatch: {} vs {}",
            first.rank, second.rank
        )));
    }
    if first.scale != second.scale {
        return Err(Error::Shape(format!(
            "scale mismatch: {} vs {}",
            first.scale, second.scale
        )));
    }
    if first.layers.len() != second.layers.len() {
        return Err(Error::Shape("adapters cover different layer sets".into()));
    }
    let layers = first
        .layers
        .iter()
        .zip(&second.layers)
        .map(|(l1, l2)| {
            if l1.layer_id != l2.layer_id {
                return Err(Error::Shape(format!(
                    "layer sets differ at {} vs {}",
                    l1.layer_id, l2.layer_id
                )));
            }
            Ok(LayerFactors {
                layer_id: l1.layer_id,
                a_matrix: l1.a_matrix.lerp(&l2.a_matrix, t)?,
                b_matrix: l1.b_matrix.lerp(&l2.b_matrix, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Adapter {
        layers,
        rank: first.rank,
        scale: first.scale,
    })
}

/// A serializable adapter post-processing step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterTransform {
    #[default]
    Identity,
    /// Boost a `k%` layer set chosen by `selection`.
    Boost {
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
    Zero {
        layers: BTreeSet<usize>,
    },
}

impl AdapterTransform {
    /// Selective Layer Boosting on the top `k%` layers, scaling `A`.
    pub fn selective(k: f64, beta: f64) -> Self {
        AdapterTransform::Boost {
            k,
            beta,
            target: BoostTarget::A,
            selection: LayerSelection::Top,
        }
    }

    pub fn apply(&self, adapter: &Adapter) -> Result<Adapter> {
        match self {
            AdapterTransform::Identity => Ok(adapter.clone()),
            AdapterTransform::Boost {
                k,
                beta,
                target,
                selection,
            } => boost_with_selection(adapter, *k, *beta, *target, *selection),
            AdapterTransform::Global { beta, target } => boost_global(adapter, *beta, *target),
            AdapterTransform::Zero { layers } => zero_layers(adapter, layers),
        }
    }
}

impl fmt::Display for AdapterTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterTransform::Identity => f.write_str("identity"),
            AdapterTransform::Boost {
                k,
                beta,
                target,
                selection,
            } => {
                let sel = match selection {
                    LayerSelection::Top => "top".to_string(),
                    LayerSelection::Bottom => "bottom".to_string(),
                    LayerSelection::Random { seed } => format!("random{seed}"),
                };
                write!(f, "boost:k={k},beta={beta},target={target},select={sel}")
            }
            AdapterTransform::Global { beta, target } => {
                write!(f, "global:beta={beta},target={target}")
            }
            AdapterTransform::Zero { layers } => {
                let ids: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
                write!(f, "zero:{}", ids.join(","))
            }
        }
    }
}
