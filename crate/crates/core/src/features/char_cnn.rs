//! Character-level word encoder: embeddings, two convolution + batch-norm
//! layers, max-pool over positions, ReLU.

use ndarray::Axis;
use rand::Rng;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::corpus::SymbolTable;
use crate::nn::{xavier, uniform, ForwardCtx};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Mat,
    pub var: Mat,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct CharCnn {
    pub embedding: ParamId,
    pub layers: [ConvBn; 2],
    pub running: [RunningStats; 2],
    pub kernel: usize,
    pub max_chars: usize,
}

impl CharCnn {
    pub fn new(
        store: &mut ParamStore,
        n_chars: usize,
        char_dim: usize,
        channels: usize,
        kernel: usize,
        max_chars: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let embedding = store.add(
            "char_cnn.embedding",
            uniform(n_chars, char_dim, (3.0 / char_dim as f64).sqrt(), rng),
        );
        let mut layer = |i: usize, input: usize| ConvBn {
            weight: store.add(format!("char_cnn.conv{i}.weight"), xavier(input * kernel, channels, rng)),
            bias: store.add(format!("char_cnn.conv{i}.bias"), Mat::zeros((1, channels))),
            gamma: store.add(format!("char_cnn.bn{i}.gamma"), Mat::ones((1, channels))),
            beta: store.add(format!("char_cnn.bn{i}.beta"), Mat::zeros((1, channels))),
        };
        let layers = [layer(1, char_dim), layer(2, channels)];
        let fresh = || RunningStats {
            mean: Mat::zeros((1, channels)),
            var: Mat::ones((1, channels)),
        };
        CharCnn {
            embedding,
            layers,
            running: [fresh(), fresh()],
            kernel,
            max_chars,
        }
    }

    pub fn channels(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].bias).ncols()
    }

    /// Maps characters to vocabulary indices, truncating to `max_chars`.
    pub fn encode_chars(&self, word: &str, chars: &SymbolTable) -> Vec<usize> {
        word.chars()
            .take(self.max_chars)
            .map(|c| chars.get_or_unk(c.encode_utf8(&mut [0; 4])))
            .collect()
    }

    /// One output row per word. Batch-norm statistics span every character
    /// position of every word in the call.
    pub fn forward(&self, g: &mut Graph<'_>, words: &[Vec<usize>], ctx: &mut ForwardCtx) -> Var {
        let mut segments = Vec::with_capacity(words.len());
        let mut flat = Vec::new();
        for w in words {
            let w = &w[..w.len().min(self.max_chars)];
            segments.push((flat.len(), w.len()));
            flat.extend(w.iter().map(|&c| Some(c)));
        }
        let table = g.param(self.embedding);
        let mut x = g.gather(table, flat);
        for (layer, running) in self.layers.iter().zip(&self.running) {
            let cols = g.im2col(x, &segments, self.kernel);
            let w = g.param(layer.weight);
            let b = g.param(layer.bias);
            let y = g.matmul(cols, w);
            let y = g.add_row(y, b);
            let normalized = if ctx.train && g.value(y).nrows() > 0 {
                let rows = g.value(y).nrows();
                let (n, mean, var) = g.batch_norm(y, BN_EPS);
                ctx.bn_batches.push((mean, var, rows));
                n
            } else {
                let shift = g.constant(running.mean.mapv(|m| -m));
                let inv = g.constant(running.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt()));
                let c = g.add_row(y, shift);
                g.mul_row(c, inv)
            };
            let gamma = g.param(layer.gamma);
            let beta = g.param(layer.beta);
            let scaled = g.mul_row(normalized, gamma);
            x = g.add_row(scaled, beta);
        }
        let pooled = g.segment_max(x, &segments);
        g.relu(pooled)
    }

    /// Folds batch statistics (in forward order, two per call) into the running averages.
    pub fn update_running(&mut self, batches: &[(Mat, Mat, usize)]) {
        for chunk in batches.chunks(2) {
            for ((mean, var, n), running) in chunk.iter().zip(self.running.iter_mut()) {
                let unbiased = if *n > 1 {
                    var * (*n as f64 / (*n as f64 - 1.0))
                } else {
                    var.clone()
                };
                running.mean = &running.mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
                running.var = &running.var * (1.0 - BN_MOMENTUM) + unbiased * BN_MOMENTUM;
            }
        }
    }
}

/// Encodes a single word in eval mode; empty words give the zero vector.
pub fn char_cnn_encode(
    cnn: &CharCnn,
    store: &ParamStore,
    chars: &SymbolTable,
    word: &str,
) -> ndarray::Array1<f64> {
    let ids = cnn.encode_chars(word, chars);
    let mut g = Graph::new(store);
    let mut ctx = ForwardCtx::eval();
    let out = cnn.forward(&mut g, &[ids], &mut ctx);
    g.value(out).index_axis(Axis(0), 0).to_owned()
}
