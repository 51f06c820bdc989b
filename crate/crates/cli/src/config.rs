use std::fs;
use std::path::{Path, PathBuf};

use clusterseq::eval::EvalConfig;
use clusterseq::meta::MetaConfig;
use clusterseq::model::ModelConfig;
use clusterseq::synthgen::PlantedSpec;
use clusterseq::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a command can be configured with. Loaded from one JSON file;
/// command-line flags override it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Raw `user,item,timestamp` CSV.
    pub data: Option<PathBuf>,
    /// Preprocessed corpus cache.
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub test_fraction: f64,
    /// Minimum interactions per user; defaults to `K`.
    pub min_len: Option<usize>,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
    pub planted: PlantedSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            cache: None,
            checkpoint: None,
            out: None,
            test_fraction: 0.1,
            min_len: None,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            meta: MetaConfig::default(),
            eval: EvalConfig::default(),
            planted: PlantedSpec::default(),
        }
    }
}

/// Flag values that override the loaded configuration.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub k: Option<usize>,
    pub clusters: Option<usize>,
    pub no_clustering: bool,
    pub test_fraction: Option<f64>,
    pub out: Option<PathBuf>,
}

pub const DEFAULT_OUT: &str = "out";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// `--seed` drives model initialization, episode sampling, evaluation
    /// negatives and synthetic generation alike.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.meta.seed = seed;
            self.eval.seed = seed;
            self.planted.seed = seed;
        }
        if let Some(e) = o.epochs {
            self.meta.epochs = e;
        }
        if let Some(k) = o.k {
            self.model.shots = k;
        }
        if let Some(m) = o.clusters {
            self.model.clusters = m;
        }
        if o.no_clustering {
            self.model.use_clustering = false;
        }
        if let Some(f) = o.test_fraction {
            self.test_fraction = f;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }

    pub fn min_len(&self) -> usize {
        self.min_len.unwrap_or(self.model.shots)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"epoch": 3}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"model": {"clusterz": 3}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flags_override_file_values() {
        let mut c = RunConfig::from_json(r#"{"meta": {"epochs": 3, "seed": 1}, "test_fraction": 0.3}"#).unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            epochs: Some(5),
            no_clustering: true,
            ..Default::default()
        });
        assert_eq!((c.meta.epochs, c.meta.seed, c.eval.seed, c.planted.seed), (5, 9, 9, 9));
        assert!(!c.model.use_clustering);
        assert_eq!(c.test_fraction, 0.3);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.model.clusters = 6;
        c.out = Some("runs/a".into());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
