//! Small layer helpers shared by the model modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Glorot/Xavier uniform initialization.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rows, cols, bound, rng)
}

/// Per-forward-pass state: train/eval switch, dropout randomness and the
/// batch statistics produced by batch-norm layers in train mode.
pub struct ForwardCtx {
    pub train: bool,
    pub rng: Option<ChaCha8Rng>,
    pub bn_batches: Vec<(Mat, Mat, usize)>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: None,
            bn_batches: Vec::new(),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            train: true,
            rng: Some(rng),
            bn_batches: Vec::new(),
        }
    }

    /// Train mode without dropout; used where deterministic batch-norm
    /// behaviour is wanted (gradient checks).
    pub fn train_deterministic() -> Self {
        ForwardCtx {
            train: true,
            rng: None,
            bn_batches: Vec::new(),
        }
    }

    /// Locked dropout: one mask over the feature dimension shared by every
    /// row (time step) of `x`.
    pub fn locked_dropout(&mut self, g: &mut Graph<'_>, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let cols = g.value(x).ncols();
        let keep = 1.0 - rate;
        let mask = Mat::from_shape_fn((1, cols), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = g.constant(mask);
        g.mul_row(x, m)
    }
}

/// `x W (+ b)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(input, output, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, output))));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stable 64-bit FNV-1a, used to derive per-key seeds.
pub fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in *p {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent seed for a named phase of a run.
pub fn derive_seed(seed: u64, phase: &str) -> u64 {
    fnv1a(&[&seed.to_le_bytes(), phase.as_bytes()])
}
