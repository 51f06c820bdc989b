//! Model hyperparameters, parameter layout and initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Activation, Array, ParameterStore, Partition};

/// How the decoder's hidden state is advanced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderHidden {
    /// Hidden state is the GRU update from `(X, h_prev)`.
    Gru,
    /// Hidden state ignores `X`: the GRU is fed a zero input.
    InputFree,
}

/// Target-sharpening formula used for the clustering targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpenRule {
    /// `c^2/f` normalized over the squared terms; rows sum to 1.
    Normalized,
    /// Denominator `sum_j c_j / f_j` as printed; rows need not sum to 1.
    Literal,
}

/// Which support transitions contribute to the support loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportTerms {
    /// Targets `I_2 .. I_{K-1}`: at least one term for every `K >= 3`.
    FromSecond,
    /// Targets `I_3 .. I_{K-1}`: empty when `K = 3`.
    FromThird,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_items: usize,
    /// Embedding width `D`.
    pub dim: usize,
    /// Episode length `K`.
    pub shots: usize,
    /// Number of autoencoders / clusters `M`.
    pub clusters: usize,
    pub use_clustering: bool,
    /// Neighbors kept per user in the relation graph.
    pub n_adj: usize,
    /// Weight of the shared-item term in the relation score.
    pub sigma: f64,
    /// Mixing weight between GCN state and autoencoder layers.
    pub epsilon: f64,
    /// Ranking margin.
    pub margin: f64,
    pub gcn_activation: GcnActivation,
    pub decoder_hidden: DecoderHidden,
    pub output_softmax: bool,
    pub sharpen_rule: SharpenRule,
    pub support_terms: SupportTerms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnActivation {
    Relu,
    Tanh,
    Linear,
}

impl From<GcnActivation> for Activation {
    fn from(a: GcnActivation) -> Self {
        match a {
            GcnActivation::Relu => Activation::Relu,
            GcnActivation::Tanh => Activation::Tanh,
            GcnActivation::Linear => Activation::Linear,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_items: 0,
            dim: 16,
            shots: 3,
            clusters: 4,
            use_clustering: true,
            n_adj: 5,
            sigma: 0.1,
            epsilon: 0.5,
            margin: 1.0,
            gcn_activation: GcnActivation::Relu,
            decoder_hidden: DecoderHidden::Gru,
            output_softmax: true,
            sharpen_rule: SharpenRule::Normalized,
            support_terms: SupportTerms::FromSecond,
        }
    }
}

/// Encoder depth of every autoencoder; the decoder mirrors it.
pub const AE_ENCODER_LAYERS: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_items == 0 {
            return bad("item vocabulary is empty".into());
        }
        if self.dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if self.shots < 3 {
            return bad(format!("K must be at least 3, got {}", self.shots));
        }
        if self.use_clustering && self.clusters < 2 {
            return bad(format!("need at least 2 clusters, got {}", self.clusters));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if self.n_adj == 0 {
            return bad("n_adj must be at least 1".into());
        }
        if !(self.margin > 0.0) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        Ok(())
    }

    /// Layer widths `D, D/2, D/4, D/2, D` of each autoencoder (never below 1).
    pub fn ae_widths(&self) -> Vec<usize> {
        let d = self.dim;
        let mut enc = vec![d];
        for l in 1..=AE_ENCODER_LAYERS {
            enc.push((d >> l).max(1));
        }
        let mut widths = enc.clone();
        widths.extend(enc.iter().rev().skip(1));
        widths
    }

    /// Copies the structural sizes implied by a parameter store's shapes.
    pub fn with_shapes_from(&self, store: &ParameterStore) -> Result<ModelConfig> {
        let emb = store.value(names::ITEM_EMB)?;
        if emb.rank() != 2 {
            return Err(Error::Compatibility("item table is not a matrix".into()));
        }
        let fc1 = store.value(&names::linear_w("fc1"))?;
        let clusters = (0..)
            .take_while(|j| store.contains(&names::ae_w(*j, 0)))
            .count();
        let use_clustering = store.contains(&names::linear_w(names::FILM_GAMMA));
        let mut cfg = self.clone();
        cfg.n_items = emb.shape()[0];
        cfg.dim = emb.shape()[1];
        cfg.shots = fc1.shape()[1];
        cfg.use_clustering = use_clustering;
        if use_clustering {
            cfg.clusters = clusters;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter naming scheme.
pub mod names {
    pub const ITEM_EMB: &str = "item_emb";
    pub const ENCODER: &str = "enc";
    pub const DECODER: &str = "dec";
    pub const FILM_GAMMA: &str = "film.gamma";
    pub const FILM_BETA: &str = "film.beta";
    pub const GRU_PARTS: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wn", "un", "bn"];

    pub fn gru(prefix: &str, part: &str) -> String {
        format!("{prefix}.{part}")
    }

    pub fn linear_w(prefix: &str) -> String {
        format!("{prefix}.w")
    }

    pub fn linear_b(prefix: &str) -> String {
        format!("{prefix}.b")
    }

    pub fn ae_layer(j: usize, l: usize) -> String {
        format!("ae{j}.layer{l}")
    }

    pub fn ae_w(j: usize, l: usize) -> String {
        linear_w(&ae_layer(j, l))
    }

    pub fn ae_b(j: usize, l: usize) -> String {
        linear_b(&ae_layer(j, l))
    }

    pub fn gcn_w(l: usize) -> String {
        format!("gcn{l}.w")
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Fresh parameters: weights uniform in `±1/sqrt(D)`, biases zero, except the
/// FiLM scale bias which starts at one so conditioning begins as identity.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParameterStore> {
    cfg.validate()?;
    let d = cfg.dim;
    let bound = 1.0 / (d as f64).sqrt();
    let mut raw: Vec<(String, Array)> = Vec::new();

    raw.push((names::ITEM_EMB.into(), uniform(rng, &[cfg.n_items, d], bound)));
    for prefix in [names::ENCODER, names::DECODER] {
        for part in names::GRU_PARTS {
            let value = if part.starts_with('b') {
                Array::zeros(&[d])
            } else {
                uniform(rng, &[d, d], bound)
            };
            raw.push((names::gru(prefix, part), value));
        }
    }
    for (prefix, fan_in, fan_out) in [("fc1", 2 * d, cfg.shots), ("fc2", 2 * d, d), ("fc3", d, d)] {
        raw.push((names::linear_w(prefix), uniform(rng, &[fan_in, fan_out], bound)));
        raw.push((names::linear_b(prefix), Array::zeros(&[fan_out])));
    }

    if cfg.use_clustering {
        let widths = cfg.ae_widths();
        for j in 0..cfg.clusters {
            for l in 0..widths.len() - 1 {
                raw.push((names::ae_w(j, l), uniform(rng, &[widths[l], widths[l + 1]], bound)));
                raw.push((names::ae_b(j, l), Array::zeros(&[widths[l + 1]])));
            }
        }
        for l in 0..AE_ENCODER_LAYERS {
            raw.push((names::gcn_w(l), uniform(rng, &[widths[l], widths[l + 1]], bound)));
        }
        raw.push((
            names::gcn_w(AE_ENCODER_LAYERS),
            uniform(rng, &[widths[AE_ENCODER_LAYERS], cfg.clusters], bound),
        ));
        raw.push((names::linear_w(names::FILM_GAMMA), uniform(rng, &[cfg.clusters, d], bound)));
        raw.push((names::linear_b(names::FILM_GAMMA), Array::filled(&[d], 1.0)));
        raw.push((names::linear_w(names::FILM_BETA), uniform(rng, &[cfg.clusters, d], bound)));
        raw.push((names::linear_b(names::FILM_BETA), Array::zeros(&[d])));
    }

    let mut store = ParameterStore::new();
    for (name, value) in raw {
        // relabeled below
        store.insert(name, value, Partition::Shared);
    }
    crate::meta::partition_parameters(&mut store)?;
    Ok(store)
}

/// Adds independent uniform noise in `±scale` to every entry. Moves
/// zero-initialized biases off activation and hinge kinks before
/// finite-difference checks.
pub fn perturb<R: Rng + ?Sized>(store: &mut ParameterStore, rng: &mut R, scale: f64) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ae_widths_halve_then_mirror() {
        let cfg = ModelConfig { dim: 16, ..Default::default() };
        assert_eq!(cfg.ae_widths(), vec![16, 8, 4, 8, 16]);
        let cfg = ModelConfig { dim: 2, ..Default::default() };
        assert_eq!(cfg.ae_widths(), vec![2, 1, 1, 1, 2]);
    }

    #[test]
    fn shapes_round_trip_through_store() {
        let cfg = ModelConfig {
            n_items: 11,
            dim: 4,
            shots: 4,
            clusters: 3,
            ..Default::default()
        };
        let store = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let inferred = ModelConfig::default().with_shapes_from(&store).unwrap();
        assert_eq!(inferred.n_items, 11);
        assert_eq!(inferred.dim, 4);
        assert_eq!(inferred.shots, 4);
        assert_eq!(inferred.clusters, 3);
        assert!(inferred.use_clustering);

        let plain = ModelConfig { use_clustering: false, ..cfg };
        let store = init_params(&plain, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!ModelConfig::default().with_shapes_from(&store).unwrap().use_clustering);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let base = ModelConfig { n_items: 5, ..Default::default() };
        assert!(ModelConfig { epsilon: 1.5, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { clusters: 1, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { n_adj: 0, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { margin: 0.0, ..base.clone() }.validate().is_err());
        assert!(base.validate().is_ok());
    }
}
