//! Parameter partition, per-user adaptation, the outer meta-update, the
//! training loop and checkpoints.

mod checkpoint;
mod step;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use step::{adapt, meta_gradient, meta_objective, meta_step, MetaGradient, StepLog};
pub use train::{train, EpochLog, TrainOptions, TrainReport};

use crate::clustering::ClusterVars;
use crate::error::{Error, Result};
use crate::model::{init_params, names, ModelConfig};
use crate::numcore::{Bindings, ParameterStore, Partition};
use crate::transition::TransitionVars;

const ADAPTED_PREFIXES: [&str; 5] = [names::ENCODER, names::DECODER, "fc1", "fc2", "fc3"];

fn has_prefix(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix)
        .is_some_and(|rest| rest.starts_with('.'))
}

/// Partition label for a parameter name, if it belongs to the model.
pub fn partition_of(name: &str) -> Option<Partition> {
    if ADAPTED_PREFIXES.iter().any(|p| has_prefix(name, p)) {
        return Some(Partition::Adapted);
    }
    let numbered = |stem: &str| {
        name.strip_prefix(stem).is_some_and(|rest| {
            let digits = rest.chars().take_while(char::is_ascii_digit).count();
            digits > 0 && rest[digits..].starts_with('.')
        })
    };
    if name == names::ITEM_EMB
        || numbered("ae")
        || numbered("gcn")
        || has_prefix(name, names::FILM_GAMMA)
        || has_prefix(name, names::FILM_BETA)
    {
        return Some(Partition::Shared);
    }
    None
}

/// Labels the transition model as adapted and the item table plus the
/// clustering module as shared.
pub fn partition_parameters(store: &mut ParameterStore) -> Result<()> {
    let unknown: Vec<&String> = store.names().filter(|n| partition_of(n).is_none()).collect();
    if !unknown.is_empty() {
        let list: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
        return Err(Error::Config(format!(
            "cannot partition parameters: {}",
            list.join(", ")
        )));
    }
    for (name, p) in store.iter_mut() {
        p.partition = partition_of(name).expect("checked above");
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner (per-user) learning rate.
    pub alpha: f64,
    /// Outer (meta) learning rate.
    pub beta: f64,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.05,
            beta: 0.005,
            inner_steps: 1,
            batch_size: 64,
            epochs: 10,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be positive and beta non-negative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Hyperparameters plus the full parameter store `θ = ω ∪ Φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng)?;
        Ok(Model { config, params })
    }

    /// Wraps a loaded store; structural sizes are taken from its shapes.
    pub fn from_params(config: &ModelConfig, mut params: ParameterStore) -> Result<Model> {
        partition_parameters(&mut params)?;
        let config = config.with_shapes_from(&params)?;
        Ok(Model { config, params })
    }

    pub fn omega(&self) -> ParameterStore {
        self.params.subset(Partition::Adapted)
    }

    pub fn phi(&self) -> ParameterStore {
        self.params.subset(Partition::Shared)
    }
}

/// Resolves the model's named variables from a set of bindings.
pub fn resolve_vars(
    b: &Bindings,
    cfg: &ModelConfig,
) -> Result<(TransitionVars, Option<ClusterVars>)> {
    let transition = TransitionVars::resolve(b)?;
    let cluster = if cfg.use_clustering {
        Some(ClusterVars::resolve(b, cfg)?)
    } else {
        None
    };
    Ok((transition, cluster))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        assert_eq!(partition_of("fc2.w"), Some(Partition::Adapted));
        assert_eq!(partition_of("enc.wz"), Some(Partition::Adapted));
        assert_eq!(partition_of("ae0.layer1.w"), Some(Partition::Shared));
        assert_eq!(partition_of("gcn2.w"), Some(Partition::Shared));
        assert_eq!(partition_of("item_emb"), Some(Partition::Shared));
        assert_eq!(partition_of("film.beta.b"), Some(Partition::Shared));
        assert_eq!(partition_of("fc22.w"), None);
        assert_eq!(partition_of("aeX.w"), None);
        assert_eq!(partition_of("encoder"), None);
    }

    #[test]
    fn unlabeled_names_are_listed() {
        let mut m = Model::new(
            ModelConfig {
                n_items: 4,
                dim: 4,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        m.params
            .insert("mystery", crate::numcore::Array::scalar(1.0), Partition::Shared);
        match partition_parameters(&mut m.params) {
            Err(Error::Config(msg)) => assert!(msg.contains("mystery")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let m = Model::new(
            ModelConfig {
                n_items: 4,
                dim: 4,
                clusters: 3,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let (o, p) = (m.omega(), m.phi());
        assert_eq!(o.len() + p.len(), m.params.len());
        assert!(o.names().all(|n| !p.contains(n)));
        assert_eq!(o.len(), 18 + 6);
    }

    #[test]
    fn meta_config_bounds() {
        assert!(MetaConfig::default().validate().is_ok());
        assert!(MetaConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(MetaConfig { inner_steps: 0, ..Default::default() }.validate().is_err());
        assert!(MetaConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(MetaConfig { beta: 0.0, ..Default::default() }.validate().is_ok());
    }
}
