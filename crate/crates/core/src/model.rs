//! The full tagger: mixed input, context encoder, optional internal and
//! external augmentation, gated fusion and classifier.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::corpus::{LabelSet, Sentence, Vocabulary};
use crate::encoder::{ContextEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::external::{external_fc, ExternalProvider};
use crate::features::{FeatureConfig, MixedInput, PosEmbeddingTable, TokenFeatures, WordEmbeddingTable};
use crate::fusion::{decode, FusionConfig, FusionDecoder};
use crate::internal::{neighbor_matrices, ssa_augment, DomainEmbeddingModel, HsaTable, InternalConfig, InternalMode, NeighborCache, SsaParams};
use crate::nn::{derive_seed, ForwardCtx, Linear};

/// Which augmentation channels are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Switches {
    pub internal: InternalMode,
    pub external: bool,
}

impl Switches {
    pub const fn new(internal: InternalMode, external: bool) -> Self {
        Switches { internal, external }
    }

    pub const BASE: Switches = Switches::new(InternalMode::None, false);
    pub const FINAL: Switches = Switches::new(InternalMode::Hsa, true);

    /// The six ablation configurations in reporting order.
    pub const ABLATION: [Switches; 6] = [
        Switches::new(InternalMode::None, false),
        Switches::new(InternalMode::Ssa, false),
        Switches::new(InternalMode::Hsa, false),
        Switches::new(InternalMode::None, true),
        Switches::new(InternalMode::Ssa, true),
        Switches::new(InternalMode::Hsa, true),
    ];

    /// Display name, e.g. `base+BERT+HSA`.
    pub fn label(&self) -> String {
        let mut s = "base".to_string();
        if self.external {
            s.push_str("+BERT");
        }
        match self.internal {
            InternalMode::None => {}
            InternalMode::Hsa => s.push_str("+HSA"),
            InternalMode::Ssa => s.push_str("+SSA"),
        }
        s
    }
}

impl fmt::Display for Switches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Switches {
    type Err = Error;

    /// Accepts `base`, `+hsa`, `base+ext+ssa`, `base+BERT+HSA` and similar.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Switches::BASE;
        let mut internal_set = false;
        for part in s.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "base" => {}
                "ext" | "external" | "bert" => out.external = true,
                "hsa" | "ssa" if internal_set => {
                    return Err(Error::config(format!("switches {s:?}: choose one of hsa or ssa")));
                }
                "hsa" => {
                    out.internal = InternalMode::Hsa;
                    internal_set = true;
                }
                "ssa" => {
                    out.internal = InternalMode::Ssa;
                    internal_set = true;
                }
                other => {
                    return Err(Error::config(format!(
                        "unknown switch {other:?} (expected base, hsa, ssa, ext)"
                    )))
                }
            }
        }
        Ok(out)
    }
}

impl Serialize for Switches {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Switches {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub internal: InternalConfig,
    pub fusion: FusionConfig,
}

/// Non-trainable resources behind the augmentation channels.
#[derive(Clone, Default)]
pub struct Augmentation {
    pub hsa: Option<Arc<HsaTable>>,
    pub ssa: Option<(Arc<DomainEmbeddingModel>, Arc<NeighborCache>)>,
    pub external: Option<Arc<dyn ExternalProvider>>,
}

impl Augmentation {
    pub fn check(&self, switches: Switches) -> Result<()> {
        let missing = match switches.internal {
            InternalMode::Hsa if self.hsa.is_none() => Some("HSA table"),
            InternalMode::Ssa if self.ssa.is_none() => Some("neighbour cache"),
            _ if switches.external && self.external.is_none() => Some("external provider"),
            _ => None,
        };
        match missing {
            Some(what) => Err(Error::config(format!("{switches} needs a {what}"))),
            None => Ok(()),
        }
    }
}

/// Parameter-free inputs of one sentence, computed once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sentence: Sentence,
    pub features: TokenFeatures,
    pub gold: Option<Vec<usize>>,
}

pub struct NerModel {
    pub store: ParamStore,
    pub input: MixedInput,
    pub encoder: ContextEncoder,
    pub ssa: Option<SsaParams>,
    pub external_fc: Option<Linear>,
    pub decoder: FusionDecoder,
    pub switches: Switches,
    pub labels: LabelSet,
    pub vocab: Vocabulary,
    pub words: WordEmbeddingTable,
    pub config: ModelConfig,
}

impl NerModel {
    /// Builds a freshly initialized model. `external_dim` is the provider
    /// width and is required when the external channel is on.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: &ModelConfig,
        switches: Switches,
        vocab: Vocabulary,
        labels: LabelSet,
        words: WordEmbeddingTable,
        pos: Option<&PosEmbeddingTable>,
        external_dim: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let mut store = ParamStore::new();
        let input = MixedInput::new(&mut store, &config.features, &vocab, &words, pos, &mut rng)?;
        let encoder = ContextEncoder::new(&mut store, config.features.fused_dim, &config.encoder, &mut rng)?;
        let dim = config.encoder.output_dim();
        let internal = switches.internal != InternalMode::None;
        if internal && config.internal.dim != dim {
            return Err(Error::config(format!(
                "domain embedding dim {} must equal the encoder output dim {dim}",
                config.internal.dim
            )));
        }
        let ssa = (switches.internal == InternalMode::Ssa)
            .then(|| SsaParams::new(&mut store, dim, config.internal.dim, &mut rng));
        let external_fc = if switches.external {
            let h = external_dim.ok_or_else(|| Error::config("external channel on but no provider width"))?;
            Some(external_fc(&mut store, h, dim, &mut rng))
        } else {
            None
        };
        let decoder = FusionDecoder::new(
            &mut store,
            dim,
            labels.len(),
            internal,
            switches.external,
            &config.fusion,
            &mut rng,
        );
        Ok(NerModel {
            store,
            input,
            encoder,
            ssa,
            external_fc,
            decoder,
            switches,
            labels,
            vocab,
            words,
            config: config.clone(),
        })
    }

    pub fn prepare(&self, sentence: &Sentence, with_gold: bool) -> Result<Prepared> {
        let gold = if with_gold {
            let idx = sentence
                .tokens
                .iter()
                .map(|t| {
                    self.labels.index(&t.gold_label).ok_or_else(|| {
                        Error::data(format!("sentence {}: label {:?} not in label set", sentence.id, t.gold_label))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(idx)
        } else {
            None
        };
        Ok(Prepared {
            sentence: sentence.clone(),
            features: self.input.featurize(sentence, &self.vocab, &self.words),
            gold,
        })
    }

    /// Row-wise label probabilities.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        p: &Prepared,
        aug: &Augmentation,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let x = self.input.forward(g, &p.features, ctx);
        let m = self.encoder.forward(g, x, ctx);
        let words: Vec<&str> = p.sentence.words().collect();
        let w_i = match self.switches.internal {
            InternalMode::None => None,
            InternalMode::Hsa => {
                let table = aug.hsa.as_ref().ok_or_else(|| Error::config("HSA table not loaded"))?;
                Some(g.constant(table.sentence(&words).0))
            }
            InternalMode::Ssa => {
                let (model, cache) = aug.ssa.as_ref().ok_or_else(|| Error::config("neighbour cache not loaded"))?;
                let params = self.ssa.expect("SSA parameters exist when SSA is on");
                let neigh = neighbor_matrices(&words, cache, model);
                Some(ssa_augment(g, m, &neigh, params, self.config.internal.ssa_literal_normalizer))
            }
        };
        let w_e = match self.external_fc {
            Some(fc) => {
                let provider = aug.external.as_ref().ok_or_else(|| Error::config("external provider not loaded"))?;
                let v = provider.word_vectors(&p.sentence)?;
                let pooled = g.constant(v);
                Some(fc.forward(g, pooled))
            }
            None => None,
        };
        let eps = self.decoder.fuse_all(g, m, w_i, w_e);
        Ok(self.decoder.classify(g, eps))
    }

    /// Eval-mode probabilities.
    pub fn probabilities(&self, p: &Prepared, aug: &Augmentation) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let mut ctx = ForwardCtx::eval();
        let probs = self.forward(&mut g, p, aug, &mut ctx)?;
        Ok(g.value(probs).to_owned())
    }

    pub fn predict_prepared(&self, p: &Prepared, aug: &Augmentation) -> Result<Vec<String>> {
        let probs = self.probabilities(p, aug)?;
        Ok(decode(probs.view())
            .into_iter()
            .map(|i| self.labels.label(i).to_string())
            .collect())
    }

    pub fn predict(&self, sentences: &[Sentence], aug: &Augmentation) -> Result<Vec<Vec<String>>> {
        if let Some(e) = &aug.external {
            if self.switches.external {
                e.prepare(sentences)?;
            }
        }
        sentences
            .iter()
            .map(|s| self.predict_prepared(&self.prepare(s, false)?, aug))
            .collect()
    }
}
