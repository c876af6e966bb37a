//! Run configuration: one TOML file holding every path, dimension, switch and
//! hyperparameter of a run. Every key is optional and defaults to the
//! reference setting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::LabelScheme;
use crate::error::{Error, Result};
use crate::external::FinetuneConfig;
use crate::model::{ModelConfig, Switches};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every random stream of the run is derived from this seed.
    pub seed: u64,
    pub switches: Switches,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub pos: PosConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub external: ExternalConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            switches: Switches::FINAL,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            pos: PosConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            external: ExternalConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// CoNLL file with every labeled sentence; it is split by `split`.
    pub path: Option<PathBuf>,
    /// Label scheme (`open`, `dnrti`, `malwaretextdb`). Defaults to the
    /// scheme named like the dataset, or `open`.
    pub scheme: Option<String>,
    /// Reject malformed BIO sequences instead of repairing them.
    pub strict: bool,
    pub split: [f64; 3],
    pub vocab_min_count: usize,
    /// Pretrained word vectors in word2vec text format.
    pub word_vectors: Option<PathBuf>,
    /// Unlabeled text (one whitespace-tokenized sentence per line) for the
    /// domain embeddings. Without it the surface text of the labeled corpus
    /// is used.
    pub domain_corpus: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "dnrti".into(),
            path: None,
            scheme: None,
            strict: false,
            split: [0.7, 0.15, 0.15],
            vocab_min_count: 1,
            word_vectors: None,
            domain_corpus: None,
        }
    }
}

impl DatasetConfig {
    pub fn label_scheme(&self) -> Result<LabelScheme> {
        let scheme = match &self.scheme {
            Some(s) => LabelScheme::by_name(s)?,
            None => LabelScheme::by_name(&self.name).unwrap_or_else(|_| LabelScheme::open()),
        };
        Ok(scheme.strict(self.strict))
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

/// CBOW settings for the POS tag embeddings; the width is
/// `model.features.pos_pretrain_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosConfig {
    pub window: usize,
    pub epochs: usize,
    pub negative: usize,
}

impl Default for PosConfig {
    fn default() -> Self {
        PosConfig {
            window: 3,
            epochs: 5,
            negative: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Deterministic pseudo-random vectors; for tests and smoke runs.
    Stub,
    /// Hidden states read from a file written beforehand.
    Precomputed,
    /// A finetuned transformer run through the Python helper.
    #[default]
    Lm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalConfig {
    pub provider: ProviderKind,
    pub stub_dim: usize,
    pub precomputed: Option<PathBuf>,
    /// An already finetuned model directory. When unset, `train` finetunes
    /// `finetune.base_model` first.
    pub model_dir: Option<PathBuf>,
    pub finetune: FinetuneConfig,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            provider: ProviderKind::Lm,
            stub_dim: 768,
            precomputed: None,
            model_dir: None,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Leave `O` tokens out of token accuracy.
    pub accuracy_excludes_o: bool,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub switches: Option<Switches>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("{}: {e}", origin.display())))
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let d = &mut self.dataset;
        for p in [&mut d.path, &mut d.word_vectors, &mut d.domain_corpus] {
            p.as_mut().map(fix);
        }
        let e = &mut self.external;
        for p in [&mut e.precomputed, &mut e.model_dir, &mut e.finetune.base_model] {
            p.as_mut().map(fix);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(name) = &o.dataset {
            self.dataset.name = name.clone();
        }
        if let Some(s) = o.switches {
            self.switches = s;
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
    }

    /// Cross-field checks that do not need any data.
    pub fn validate(&self) -> Result<()> {
        self.model.features.validate()?;
        self.train.validate()?;
        self.dataset.label_scheme()?;
        if self.switches.internal != crate::internal::InternalMode::None
            && self.model.internal.dim != self.model.encoder.output_dim()
        {
            return Err(Error::config(format!(
                "model.internal.dim = {} must equal the encoder output width {}",
                self.model.internal.dim,
                self.model.encoder.output_dim()
            )));
        }
        if !self.external.finetune.frozen {
            return Err(Error::config(
                "external.finetune.frozen = false is not supported; the external model is finetuned \
                 separately and kept fixed during main training",
            ));
        }
        if self.switches.external {
            match self.external.provider {
                ProviderKind::Precomputed if self.external.precomputed.is_none() => {
                    return Err(Error::config("external.provider = \"precomputed\" needs external.precomputed"))
                }
                ProviderKind::Lm
                    if self.external.model_dir.is_none() && self.external.finetune.base_model.is_none() =>
                {
                    return Err(Error::config(
                        "external.provider = \"lm\" needs external.model_dir or external.finetune.base_model",
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let c = RunConfig::parse("", Path::new("mem")).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.weight_decay, 1e-5);
        assert_eq!(c.train.min_lr, 5e-5);
        assert_eq!(c.train.lr_decay, 1e-5);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.model.encoder.locked_dropout, 0.3);
        assert_eq!(c.model.internal.k, 5);
        assert_eq!(c.model.features.word_dim, 50);
        assert_eq!(c.model.features.pos_dim, 10);
        assert_eq!(c.external.finetune.lr, 5e-5);
        assert_eq!(c.external.finetune.dropout, 0.5);
        assert_eq!(c.external.finetune.warmup, 0.002);
        assert_eq!(c.external.finetune.batch_size, 32);
        assert_eq!(c.external.finetune.epochs, 100);
        assert_eq!(c.switches, Switches::FINAL);
        assert_eq!(c.dataset.split, [0.7, 0.15, 0.15]);
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let text = r#"
seed = 7
switches = "base+hsa"
[dataset]
name = "smoke"
path = "data/x.conll"
[train]
epochs = 3
[model.internal]
k = 3
"#;
        let mut c = RunConfig::parse(text, Path::new("mem")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.internal.k, 3);
        assert_eq!(c.switches.label(), "base+HSA");
        let back = RunConfig::parse(&c.to_toml().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.dataset.path.as_deref(), Some(Path::new("/cfg/data/x.conll")));
        c.apply(&Overrides {
            seed: Some(9),
            switches: Some(Switches::BASE),
            ..Default::default()
        });
        assert_eq!((c.seed, c.switches), (9, Switches::BASE));
    }

    #[test]
    fn unknown_keys_and_bad_combinations_are_rejected() {
        assert!(RunConfig::parse("lr = 1", Path::new("mem")).is_err());
        assert!(RunConfig::parse("[train]\nlearning_rate = 1", Path::new("mem")).is_err());
        let mut c = RunConfig::default();
        c.external.finetune.frozen = false;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.lr = 1e-6;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.external.provider = ProviderKind::Stub;
        c.validate().unwrap();
    }
}
