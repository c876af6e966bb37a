//! Contextual encoder: stacked BiLSTM, multi-head self-attention and a
//! position-wise feed-forward network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform, ForwardCtx, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden units per LSTM direction.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub heads: usize,
    pub ffnn_hidden: usize,
    /// Locked dropout applied to the output of every BiLSTM layer.
    pub locked_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            lstm_hidden: 128,
            lstm_layers: 2,
            heads: 8,
            ffnn_hidden: 256,
            locked_dropout: 0.3,
        }
    }
}

impl EncoderConfig {
    /// Width of `h_i` and `m_i`.
    pub fn output_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn head_dim(&self) -> usize {
        self.output_dim() / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lstm_hidden == 0 || self.lstm_layers == 0 || self.heads == 0 || self.ffnn_hidden == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.output_dim() % self.heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide the BiLSTM output width {}",
                self.heads,
                self.output_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.locked_dropout) {
            return Err(Error::config("locked_dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One LSTM direction. Gate column blocks are ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmCell {
            w_input: store.add(format!("{name}.w_input"), uniform(input, 4 * hidden, bound, rng)),
            w_hidden: store.add(format!("{name}.w_hidden"), uniform(hidden, 4 * hidden, bound, rng)),
            bias: store.add(format!("{name}.bias"), uniform(1, 4 * hidden, bound, rng)),
            hidden,
        }
    }

    /// Runs over `x` (one row per step) in the given direction; output row `t`
    /// is the hidden state after consuming input row `t`.
    pub fn run(&self, g: &mut Graph<'_>, x: Var, reverse: bool) -> Var {
        let n = g.value(x).nrows();
        let h_dim = self.hidden;
        let wi = g.param(self.w_input);
        let wh = g.param(self.w_hidden);
        let b = g.param(self.bias);
        let projected = g.matmul(x, wi);
        let projected = g.add_row(projected, b);
        let mut h = g.constant(Mat::zeros((1, h_dim)));
        let mut c = g.constant(Mat::zeros((1, h_dim)));
        let mut outputs = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = g.slice_rows(projected, t, 1);
            let rec = g.matmul(h, wh);
            let z = g.add(xt, rec);
            let zi = g.slice_cols(z, 0, h_dim);
            let zf = g.slice_cols(z, h_dim, h_dim);
            let zg = g.slice_cols(z, 2 * h_dim, h_dim);
            let zo = g.slice_cols(z, 3 * h_dim, h_dim);
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let cand = g.tanh(zg);
            let o = g.sigmoid(zo);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            outputs[t] = h;
        }
        g.concat_rows(&outputs)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmLayer {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstmLayer {
    /// `[forward_t ; backward_t]` per step.
    pub fn run(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let f = self.forward.run(g, x, false);
        let b = self.backward.run(g, x, true);
        g.concat_cols(&[f, b])
    }
}

/// Multi-head self-attention. Head `t` uses columns `t*d..(t+1)*d` of the
/// query/key/value projections, so each projection is stored as one
/// `D x D` matrix holding the eight `D x d` head blocks side by side.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let x = |rng: &mut _| crate::nn::xavier(dim, dim, rng);
        MultiHeadAttention {
            query: store.add("encoder.attention.query", x(rng)),
            key: store.add("encoder.attention.key", x(rng)),
            value: store.add("encoder.attention.value", x(rng)),
            output: store.add("encoder.attention.output", x(rng)),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var, key_mask: Option<&[bool]>) -> Var {
        let dim = g.value(h).ncols();
        let d = dim / self.heads;
        let wq = g.param(self.query);
        let wk = g.param(self.key);
        let wv = g.param(self.value);
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let mut heads = Vec::with_capacity(self.heads);
        for t in 0..self.heads {
            let qt = g.slice_cols(q, t * d, d);
            let kt = g.slice_cols(k, t * d, d);
            let vt = g.slice_cols(v, t * d, d);
            heads.push(scaled_dot_attention(g, qt, kt, vt, key_mask));
        }
        let cat = g.concat_cols(&heads);
        let wm = g.param(self.output);
        g.matmul(cat, wm)
    }
}

/// `softmax(Q Kᵀ / sqrt(d)) V` with `d` the key width; masked keys get zero weight.
pub fn scaled_dot_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Var {
    let d = g.value(k).ncols() as f64;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let weights = g.softmax_masked(scores, key_mask);
    g.matmul(weights, v)
}

/// Attention weights only, for inspection.
pub fn attention_weights(q: &Mat, k: &Mat) -> Mat {
    let d = k.ncols() as f64;
    let scores = q.dot(&k.t()) / d.sqrt();
    softmax_rows(scores.view(), None)
}

/// Two-layer feed-forward block: `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub layers: Vec<BiLstmLayer>,
    pub attention: MultiHeadAttention,
    pub ffnn: FeedForward,
    pub config: EncoderConfig,
}

impl ContextEncoder {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let hidden = config.lstm_hidden;
        let out = config.output_dim();
        let mut layers = Vec::with_capacity(config.lstm_layers);
        for l in 0..config.lstm_layers {
            let inp = if l == 0 { input_dim } else { out };
            layers.push(BiLstmLayer {
                forward: LstmCell::new(store, &format!("encoder.lstm{l}.forward"), inp, hidden, rng),
                backward: LstmCell::new(store, &format!("encoder.lstm{l}.backward"), inp, hidden, rng),
            });
        }
        let attention = MultiHeadAttention::new(store, out, config.heads, rng);
        let ffnn = FeedForward {
            hidden: Linear::new(store, "encoder.ffnn.hidden", out, config.ffnn_hidden, true, rng),
            output: Linear::new(store, "encoder.ffnn.output", config.ffnn_hidden, out, true, rng),
        };
        Ok(ContextEncoder {
            layers,
            attention,
            ffnn,
            config: config.clone(),
        })
    }

    pub fn bilstm(&self, g: &mut Graph<'_>, x: Var, ctx: &mut ForwardCtx) -> Var {
        let mut h = x;
        for layer in &self.layers {
            h = layer.run(g, h);
            h = ctx.locked_dropout(g, h, self.config.locked_dropout);
        }
        h
    }

    /// `m = FFNN(MultiHead(BiLSTM(x)))`, one row per token.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, ctx: &mut ForwardCtx) -> Var {
        let h = self.bilstm(g, x, ctx);
        let m = self.attention.forward(g, h, None);
        self.ffnn.forward(g, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn value_of(store: &ParamStore, build: impl FnOnce(&mut Graph<'_>) -> Var) -> Mat {
        let mut g = Graph::new(store);
        let v = build(&mut g);
        g.value(v).to_owned()
    }

    #[test]
    fn hand_case_weights() {
        let q = array![[1.0, 0.0]];
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        let w = attention_weights(&q, &k);
        let a = (1.0f64 / 2f64.sqrt()).exp();
        assert!((w[[0, 0]] - a / (a + 1.0)).abs() < 1e-12);
        assert!((w[[0, 1]] - 1.0 / (a + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn identical_keys_average_values_and_single_key_copies_value() {
        let store = ParamStore::new();
        let out = value_of(&store, |g| {
            let q = g.constant(array![[0.3, -2.0], [5.0, 1.0]]);
            let k = g.constant(array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
            let v = g.constant(array![[1.0, 0.0], [0.0, 3.0], [2.0, 3.0]]);
            scaled_dot_attention(g, q, k, v, None)
        });
        for r in out.rows() {
            assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 2.0).abs() < 1e-12);
        }
        let out = value_of(&store, |g| {
            let q = g.constant(array![[9.0, -4.0]]);
            let k = g.constant(array![[1.0, 2.0]]);
            let v = g.constant(array![[7.0, 8.0]]);
            scaled_dot_attention(g, q, k, v, None)
        });
        assert_eq!(out, array![[7.0, 8.0]]);
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let store = ParamStore::new();
        let out = value_of(&store, |g| {
            let q = g.constant(array![[1.0, 1.0]]);
            let k = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
            let v = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
            scaled_dot_attention(g, q, k, v, Some(&[true, false]))
        });
        assert_eq!(out, array![[1.0, 0.0]]);
    }

    fn encoder(input: usize) -> (ParamStore, ContextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = ContextEncoder::new(&mut store, input, &EncoderConfig::default(), &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn shapes_for_default_config() {
        let (store, enc) = encoder(128);
        assert_eq!(store.get(enc.attention.query).dim(), (256, 256));
        assert_eq!(enc.config.head_dim() * enc.config.heads, 256);
        for n in [1, 4] {
            let out = value_of(&store, |g| {
                let x = g.constant(Mat::from_elem((n, 128), 0.1));
                let mut ctx = ForwardCtx::eval();
                let h = enc.bilstm(g, x, &mut ctx);
                assert_eq!(g.value(h).dim(), (n, 256));
                enc.forward(g, x, &mut ctx)
            });
            assert_eq!(out.dim(), (n, 256));
        }
    }

    #[test]
    fn zero_inputs_and_biases_give_zero_bilstm_output() {
        let (mut store, enc) = encoder(16);
        for l in &enc.layers {
            for c in [l.forward, l.backward] {
                store.get_mut(c.bias).fill(0.0);
            }
        }
        let out = value_of(&store, |g| {
            let x = g.constant(Mat::zeros((3, 16)));
            enc.bilstm(g, x, &mut ForwardCtx::eval())
        });
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_projections_give_zero_attention_output() {
        let (mut store, enc) = encoder(8);
        for id in [enc.attention.query, enc.attention.key, enc.attention.value] {
            store.get_mut(id).fill(0.0);
        }
        let out = value_of(&store, |g| {
            let h = g.constant(Mat::from_shape_fn((5, 256), |(i, j)| ((i * 7 + j) % 5) as f64 - 2.0));
            enc.attention.forward(g, h, None)
        });
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reversing_input_swaps_directions_when_cells_swap() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = BiLstmLayer {
            forward: LstmCell::new(&mut store, "f", 3, 4, &mut rng),
            backward: LstmCell::new(&mut store, "b", 3, 4, &mut rng),
        };
        let swapped = BiLstmLayer {
            forward: layer.backward,
            backward: layer.forward,
        };
        let x = Mat::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let mut xr = x.clone();
        xr.invert_axis(ndarray::Axis(0));
        let a = value_of(&store, |g| {
            let x = g.constant(x.clone());
            layer.run(g, x)
        });
        let b = value_of(&store, |g| {
            let x = g.constant(xr.clone());
            swapped.run(g, x)
        });
        for t in 0..5 {
            for j in 0..4 {
                assert!((a[[t, j]] - b[[4 - t, 4 + j]]).abs() < 1e-12);
                assert!((a[[t, 4 + j]] - b[[4 - t, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_encode_is_deterministic() {
        let (store, enc) = encoder(8);
        let x = Mat::from_shape_fn((4, 8), |(i, j)| ((i + 2 * j) as f64).sin());
        let run = || {
            value_of(&store, |g| {
                let x = g.constant(x.clone());
                enc.forward(g, x, &mut ForwardCtx::eval())
            })
        };
        assert_eq!(run(), run());
    }
}
