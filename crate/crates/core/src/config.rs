//! Run configuration shared by the CLI subcommands, read from TOML.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/toy"
//!
//! [dataset]
//! manifest = "data/manifest.tsv"   # or a [dataset.synthetic] table
//!
//! [model]
//! use_parse = true
//! identity_labels = ["head", "arms", "legs"]
//!
//! [train]
//! epochs = 100
//!
//! [eval]
//! protocol = "cc"
//! ```
//! Every table and key is optional; missing ones take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_samples, load_dataset, DatasetManifest, SampleRecord, SyntheticGenConfig};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::{ModelConfig, Scorer};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSource {
    /// On-disk dataset; takes precedence over `synthetic`.
    pub manifest: Option<PathBuf>,
    /// Generated in memory when no manifest is given.
    pub synthetic: SyntheticGenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Defaults to the match scorer when the matcher is enabled.
    pub scorer: Option<Scorer>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Cc,
            scorer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds both the synthetic generator and training.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    /// Reads a config file; relative manifest paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.dataset.manifest, path.parent()) {
            if m.is_relative() {
                cfg.dataset.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.dataset.synthetic.seed = seed;
    }

    pub fn scorer(&self) -> Scorer {
        self.eval.scorer.unwrap_or_else(|| self.model.default_scorer())
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.height, self.model.width)?;
        if self.scorer() == Scorer::Match && !self.model.matcher.enabled {
            return Err(Error::Config("scorer 'match' needs the matcher enabled".into()));
        }
        match &self.dataset.manifest {
            Some(path) => {
                let manifest = DatasetManifest::read(path)?;
                self.model.identity_labels.check_range(manifest.num_classes)?;
            }
            None => {
                let syn = &self.dataset.synthetic;
                syn.validate()?;
                if (syn.height, syn.width) != (self.model.height, self.model.width) {
                    return Err(Error::Config(format!(
                        "synthetic images are {}x{} but the model expects {}x{}",
                        syn.height, syn.width, self.model.height, self.model.width
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads or generates all samples and checks their resolution.
    pub fn samples(&self) -> Result<Vec<SampleRecord>> {
        let samples = match &self.dataset.manifest {
            Some(path) => load_dataset(&DatasetManifest::read(path)?)?,
            None => generate_samples(&self.dataset.synthetic)?,
        };
        let want = (self.model.height, self.model.width);
        if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != want) {
            return Err(Error::Validation(format!(
                "sample of size {}x{} but the model expects {}x{}",
                s.height(),
                s.width(),
                want.0,
                want.1
            )));
        }
        Ok(samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig::from_toml("seed = 7").unwrap();
        assert_eq!((cfg.train.seed, cfg.dataset.synthetic.seed), (7, 7));
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
            output_dir = "out"
            [model]
            use_parse = false
            use_fusion = false
            identity_labels = ["head", 3]
            [model.matcher]
            enabled = false
            [train]
            epochs = 2
            batch_size = 8
            p = 4
            k = 2
            [eval]
            protocol = "sc"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.eval.protocol, Protocol::Sc);
        assert_eq!(cfg.scorer(), Scorer::Embedding);
        cfg.validate().unwrap();
    }

    #[test]
    fn inconsistent_configs_rejected() {
        for text in [
            "[train]\nbatch_size = 30",
            "[dataset.synthetic]\nheight = 128",
            "[model.matcher]\nenabled = false\n[eval]\nscorer = \"match\"",
            "[model]\nidentity_labels = []",
        ] {
            let res = RunConfig::from_toml(text).and_then(|c| c.validate());
            assert!(res.as_ref().is_err_and(|e| e.is_validation()), "{text}: {res:?}");
        }
        assert!(RunConfig::from_toml("unknown_key = 1").is_err());
        assert!(RunConfig::from_toml("[eval]\nprotocol = \"xx\"").is_err());
    }
}
