//! Mixed per-token input embedding: word, character, POS and component
//! channels concatenated and projected by a learned matrix.

pub mod char_cnn;
pub mod component;
pub mod pos;
pub mod word_table;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::corpus::{Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{xavier, ForwardCtx};

pub use char_cnn::{char_cnn_encode, CharCnn};
pub use component::{classify_component, component_one_hot, ComponentClass, COMPONENT_DIM};
pub use pos::{pretrain_pos_embeddings, PosEmbeddingTable};
pub use word_table::{oov_bound, Provenance, WordEmbeddingTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    /// Output width of the character CNN (and its channel count).
    pub morph_dim: usize,
    pub char_kernel: usize,
    pub max_word_chars: usize,
    /// Width of the pretrained POS vectors before projection.
    pub pos_pretrain_dim: usize,
    pub pos_dim: usize,
    pub component_dim: usize,
    pub fused_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            word_dim: 50,
            char_dim: 30,
            morph_dim: 30,
            char_kernel: 3,
            max_word_chars: 32,
            pos_pretrain_dim: 30,
            pos_dim: 10,
            component_dim: COMPONENT_DIM,
            fused_dim: 128,
        }
    }
}

impl FeatureConfig {
    pub fn concat_dim(&self) -> usize {
        self.word_dim + self.morph_dim + self.pos_dim + self.component_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.component_dim != COMPONENT_DIM {
            return Err(Error::config(format!(
                "component_dim must be {COMPONENT_DIM}, got {}",
                self.component_dim
            )));
        }
        if self.char_kernel % 2 == 0 {
            return Err(Error::config("char_kernel must be odd"));
        }
        let dims = [
            self.word_dim,
            self.char_dim,
            self.morph_dim,
            self.max_word_chars,
            self.pos_pretrain_dim,
            self.pos_dim,
            self.fused_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::config("feature dimensions must be positive"));
        }
        Ok(())
    }
}

/// Precomputed, parameter-free inputs of one sentence.
#[derive(Clone, Debug)]
pub struct TokenFeatures {
    /// Trainable-table row per token; `None` for words outside the vocabulary.
    pub word_rows: Vec<Option<usize>>,
    /// Fixed vectors for out-of-vocabulary tokens (zero rows elsewhere).
    pub oov: Mat,
    pub chars: Vec<Vec<usize>>,
    pub pos: Vec<usize>,
    pub components: Mat,
}

impl TokenFeatures {
    pub fn len(&self) -> usize {
        self.word_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_rows.is_empty()
    }
}

/// Trainable part of the mixed input.
#[derive(Clone, Debug)]
pub struct MixedInput {
    pub word_embedding: ParamId,
    pub char_cnn: CharCnn,
    pub pos_embedding: ParamId,
    pub pos_projection: ParamId,
    pub fusion: ParamId,
    pub config: FeatureConfig,
}

impl MixedInput {
    pub fn new(
        store: &mut ParamStore,
        config: &FeatureConfig,
        vocab: &Vocabulary,
        words: &WordEmbeddingTable,
        pos: Option<&PosEmbeddingTable>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if words.dim() != config.word_dim {
            return Err(Error::config(format!(
                "word vectors have dim {}, config says {}",
                words.dim(),
                config.word_dim
            )));
        }
        let word_embedding = store.add("input.word_embedding", words.vectors().clone());
        let char_cnn = CharCnn::new(
            store,
            vocab.chars.len(),
            config.char_dim,
            config.morph_dim,
            config.char_kernel,
            config.max_word_chars,
            rng,
        );
        let pos_init = match pos {
            Some(p) => {
                if p.dim() != config.pos_pretrain_dim {
                    return Err(Error::config(format!(
                        "POS vectors have dim {}, config says pos_pretrain_dim={}",
                        p.dim(),
                        config.pos_pretrain_dim
                    )));
                }
                p.aligned_to(&vocab.pos)
            }
            None => crate::nn::uniform(vocab.pos.len(), config.pos_pretrain_dim, 0.1, rng),
        };
        let pos_embedding = store.add("input.pos_embedding", pos_init);
        let pos_projection = store.add(
            "input.pos_projection",
            xavier(config.pos_pretrain_dim, config.pos_dim, rng),
        );
        let fusion = store.add(
            "input.fusion",
            xavier(config.concat_dim(), config.fused_dim, rng),
        );
        Ok(MixedInput {
            word_embedding,
            char_cnn,
            pos_embedding,
            pos_projection,
            fusion,
            config: config.clone(),
        })
    }

    pub fn featurize(
        &self,
        sentence: &Sentence,
        vocab: &Vocabulary,
        words: &WordEmbeddingTable,
    ) -> TokenFeatures {
        let n = sentence.len();
        let mut oov = Mat::zeros((n, self.config.word_dim));
        let mut word_rows = Vec::with_capacity(n);
        let mut components = Mat::zeros((n, COMPONENT_DIM));
        for (i, t) in sentence.tokens.iter().enumerate() {
            match vocab.words.get(&t.surface) {
                Some(r) => word_rows.push(Some(r)),
                None => {
                    word_rows.push(None);
                    oov.row_mut(i).assign(&words.oov_vector(&t.surface));
                }
            }
            components.row_mut(i).assign(&component_one_hot(&t.surface));
        }
        TokenFeatures {
            word_rows,
            oov,
            chars: sentence
                .tokens
                .iter()
                .map(|t| self.char_cnn.encode_chars(&t.surface, &vocab.chars))
                .collect(),
            pos: sentence
                .tokens
                .iter()
                .map(|t| vocab.pos.get_or_unk(&t.pos_tag))
                .collect(),
            components,
        }
    }

    /// The four channels before concatenation: word, morphology, POS, component.
    pub fn channels(
        &self,
        g: &mut Graph<'_>,
        f: &TokenFeatures,
        ctx: &mut ForwardCtx,
    ) -> [Var; 4] {
        let table = g.param(self.word_embedding);
        let known = g.gather(table, f.word_rows.clone());
        let oov = g.constant(f.oov.clone());
        let word = g.add(known, oov);
        let morph = self.char_cnn.forward(g, &f.chars, ctx);
        let pos_table = g.param(self.pos_embedding);
        let pos = g.gather(pos_table, f.pos.iter().map(|&p| Some(p)).collect());
        let proj = g.param(self.pos_projection);
        let pos = g.matmul(pos, proj);
        let comp = g.constant(f.components.clone());
        [word, morph, pos, comp]
    }

    /// `[word, morph, pos, component] · W_E`, one row per token.
    pub fn forward(&self, g: &mut Graph<'_>, f: &TokenFeatures, ctx: &mut ForwardCtx) -> Var {
        let parts = self.channels(g, f, ctx);
        mix_features(g, &parts, self.fusion)
    }
}

pub fn mix_features(g: &mut Graph<'_>, channels: &[Var], fusion: ParamId) -> Var {
    let concat = g.concat_cols(channels);
    let w = g.param(fusion);
    g.matmul(concat, w)
}

/// Eval-mode mixed embedding for each token of a sentence.
pub fn mixed_embeddings(
    input: &MixedInput,
    store: &ParamStore,
    f: &TokenFeatures,
) -> Vec<Array1<f64>> {
    let mut g = Graph::new(store);
    let mut ctx = ForwardCtx::eval();
    let out = input.forward(&mut g, f, &mut ctx);
    g.value(out).rows().into_iter().map(|r| r.to_owned()).collect()
}
