//! Gated fusion of the contextual representation with the two augmentation
//! channels, followed by the softmax classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::nn::{xavier, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Use one gate matrix for both gate layers.
    pub share_gates: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { share_gates: false }
    }
}

/// Gate matrix acting on the row `[theta, lambda]` (shape `2D x D`).
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub weight: ParamId,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Gate {
            weight: store.add(name, xavier(2 * dim, dim, rng)),
        }
    }
}

/// `f = sigmoid([theta, lambda] W)`, `eps = f * theta + (1 - f) * lambda`, row-wise.
pub fn gate_fuse(g: &mut Graph<'_>, theta: Var, lambda: Var, gate: Gate) -> Var {
    let both = g.concat_cols(&[theta, lambda]);
    let w = g.param(gate.weight);
    let z = g.matmul(both, w);
    let f = g.sigmoid(z);
    let keep = g.mul(f, theta);
    let rest = g.one_minus(f);
    let mixed = g.mul(rest, lambda);
    g.add(keep, mixed)
}

#[derive(Clone, Debug)]
pub struct FusionDecoder {
    pub gate1: Option<Gate>,
    pub gate2: Option<Gate>,
    pub classifier: Linear,
}

impl FusionDecoder {
    /// Gates are created only for enabled channels.
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        n_labels: usize,
        internal: bool,
        external: bool,
        config: &FusionConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (gate1, gate2) = if config.share_gates && internal && external {
            let gate = Gate::new(store, "fusion.gate", dim, rng);
            (Some(gate), Some(gate))
        } else {
            (
                internal.then(|| Gate::new(store, "fusion.gate1", dim, rng)),
                external.then(|| Gate::new(store, "fusion.gate2", dim, rng)),
            )
        };
        let classifier = Linear::new(store, "fusion.output", dim, n_labels, true, rng);
        FusionDecoder {
            gate1,
            gate2,
            classifier,
        }
    }

    /// Gate 1 fuses `(m, w_i)`, gate 2 fuses the result with `w_e`. A missing
    /// channel skips its gate.
    pub fn fuse_all(&self, g: &mut Graph<'_>, m: Var, w_i: Option<Var>, w_e: Option<Var>) -> Var {
        let eps1 = match (self.gate1, w_i) {
            (Some(gate), Some(w)) => gate_fuse(g, m, w, gate),
            _ => m,
        };
        match (self.gate2, w_e) {
            (Some(gate), Some(w)) => gate_fuse(g, eps1, w, gate),
            _ => eps1,
        }
    }

    /// Row-wise label distribution.
    pub fn classify(&self, g: &mut Graph<'_>, eps2: Var) -> Var {
        let logits = self.classifier.forward(g, eps2);
        g.softmax(logits)
    }
}

/// Argmax per row; ties go to the lowest index.
pub fn decode(probs: ndarray::ArrayView2<'_, f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &p) in r.iter().enumerate() {
                if p > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Summed cross-entropy over the tokens of a sentence.
pub fn loss(g: &mut Graph<'_>, probs: Var, gold: &[usize]) -> Var {
    g.nll(probs, gold)
}

/// Eval helper: probabilities for fixed vectors.
pub fn classify_rows(store: &ParamStore, decoder: &FusionDecoder, eps2: &Mat) -> Mat {
    let mut g = Graph::new(store);
    let x = g.constant(eps2.clone());
    let p = decoder.classify(&mut g, x);
    g.value(p).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fuse(store: &ParamStore, gate: Gate, t: &Mat, l: &Mat) -> Mat {
        let mut g = Graph::new(store);
        let (a, b) = (g.constant(t.clone()), g.constant(l.clone()));
        let e = gate_fuse(&mut g, a, b, gate);
        g.value(e).to_owned()
    }

    #[test]
    fn zero_gate_averages_and_equal_inputs_pass_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gate = Gate::new(&mut store, "g", 3, &mut rng);
        let t = array![[1.0, -2.0, 4.0]];
        let l = array![[3.0, 0.0, -4.0]];
        assert!(fuse(&store, gate, &t, &t).iter().zip(&t).all(|(a, b)| (a - b).abs() < 1e-15));
        store.get_mut(gate.weight).fill(0.0);
        assert_eq!(fuse(&store, gate, &t, &l), array![[2.0, -1.0, 0.0]]);
    }

    proptest! {
        #[test]
        fn gate_output_is_convex_combination(seed in 0u64..1000, scale in 0.1f64..5.0) {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gate = Gate::new(&mut store, "g", 6, &mut rng);
            store.get_mut(gate.weight).mapv_inplace(|x| x * scale);
            let t = crate::nn::uniform(4, 6, 3.0, &mut rng);
            let l = crate::nn::uniform(4, 6, 3.0, &mut rng);
            let e = fuse(&store, gate, &t, &l);
            for ((&x, &a), &b) in e.iter().zip(&t).zip(&l) {
                let (lo, hi) = (a.min(b), a.max(b));
                prop_assert!(x >= lo && x <= hi);
                // Unsaturated gates stay strictly inside.
                if scale < 1.0 && hi - lo > 1e-3 {
                    prop_assert!(x > lo && x < hi);
                }
            }
        }

        #[test]
        fn decode_ignores_monotone_rescaling(vals in prop::collection::vec(0.0f64..1.0, 5)) {
            let p = Mat::from_shape_vec((1, 5), vals.clone()).unwrap();
            let q = p.mapv(|x| 3.0 * x.powi(3) + 1.0);
            prop_assert_eq!(decode(p.view()), decode(q.view()));
        }
    }

    #[test]
    fn fuse_all_fixed_point_and_bypass() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = FusionDecoder::new(&mut store, 4, 3, true, true, &FusionConfig::default(), &mut rng);
        let m = crate::nn::uniform(2, 4, 1.0, &mut rng);
        let other = crate::nn::uniform(2, 4, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let mv = g.constant(m.clone());
        let out = full.fuse_all(&mut g, mv, Some(mv), Some(mv));
        assert!(g.value(out).iter().zip(&m).all(|(a, b)| (a - b).abs() < 1e-12));

        let mut store = ParamStore::new();
        let ext_only = FusionDecoder::new(&mut store, 4, 3, false, true, &FusionConfig::default(), &mut rng);
        assert!(ext_only.gate1.is_none());
        assert!(store.id("fusion.gate1").is_none());
        let mut g = Graph::new(&store);
        let mv = g.constant(m.clone());
        let ov = g.constant(other.clone());
        let eps1 = ext_only.fuse_all(&mut g, mv, Some(ov), None);
        assert_eq!(g.value(eps1), m);
        let eps2 = ext_only.fuse_all(&mut g, mv, None, Some(ov));
        assert_eq!(g.value(eps2).dim(), (2, 4));
    }

    #[test]
    fn shared_gates_use_one_matrix() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = FusionConfig { share_gates: true };
        let d = FusionDecoder::new(&mut store, 4, 3, true, true, &cfg, &mut rng);
        assert_eq!(d.gate1.unwrap().weight, d.gate2.unwrap().weight);
        assert_eq!(store.len(), 3);
    }

    #[test]
    fn classifier_examples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = FusionDecoder::new(&mut store, 4, 2, false, false, &FusionConfig::default(), &mut rng);
        store.get_mut(d.classifier.weight).fill(0.0);
        let x = crate::nn::uniform(3, 4, 1.0, &mut rng);
        let p = classify_rows(&store, &d, &x);
        assert!(p.iter().all(|v| (v - 0.5).abs() < 1e-15));
        store.get_mut(d.classifier.bias.unwrap()).assign(&array![[2f64.ln(), 0.0]]);
        let p = classify_rows(&store, &d, &x);
        assert!((p[[0, 0]] - 2.0 / 3.0).abs() < 1e-12 && (p[[0, 1]] - 1.0 / 3.0).abs() < 1e-12);
        // Shifting every logit by a constant changes nothing.
        store.get_mut(d.classifier.bias.unwrap()).mapv_inplace(|b| b + 7.5);
        let q = classify_rows(&store, &d, &x);
        assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(array![[0.1, 0.9]].view()), vec![1]);
        assert_eq!(decode(array![[0.5, 0.5]].view()), vec![0]);
        assert_eq!(decode(array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]].view()), vec![2, 0]);
    }

    #[test]
    fn loss_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let perfect = g.constant(array![[0.0, 1.0], [1.0, 0.0]]);
        let l = loss(&mut g, perfect, &[1, 0]);
        assert_eq!(g.scalar(l), 0.0);
        let uniform = g.constant(Mat::from_elem((1, 13), 1.0 / 13.0));
        let l = loss(&mut g, uniform, &[4]);
        assert!((g.scalar(l) - 13f64.ln()).abs() < 1e-9);
        assert!((g.scalar(l) - 2.5649).abs() < 1e-4);
        let a = g.constant(array![[0.2, 0.8]]);
        let b = g.constant(array![[0.6, 0.4], [0.3, 0.7]]);
        let both = g.constant(array![[0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]);
        let (la, lb, lab) = (loss(&mut g, a, &[1]), loss(&mut g, b, &[0, 1]), loss(&mut g, both, &[1, 0, 1]));
        assert!((g.scalar(la) + g.scalar(lb) - g.scalar(lab)).abs() < 1e-12);
        let zero = g.constant(array![[1.0, 0.0]]);
        let l = loss(&mut g, zero, &[1]);
        assert!((g.scalar(l) - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    fn total_loss(store: &ParamStore, d: &FusionDecoder, m: &Mat, wi: &Mat, we: &Mat, gold: &[usize]) -> (f64, crate::autograd::Gradients) {
        let mut g = Graph::new(store);
        let (a, b, c) = (g.constant(m.clone()), g.constant(wi.clone()), g.constant(we.clone()));
        let e = d.fuse_all(&mut g, a, Some(b), Some(c));
        let p = d.classify(&mut g, e);
        let l = loss(&mut g, p, gold);
        let grads = g.backward(l);
        (g.scalar(l), grads)
    }

    #[test]
    fn gates_and_classifier_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = FusionDecoder::new(&mut store, 8, 5, true, true, &FusionConfig::default(), &mut rng);
        let m = crate::nn::uniform(3, 8, 1.0, &mut rng);
        let wi = crate::nn::uniform(3, 8, 1.0, &mut rng);
        let we = crate::nn::uniform(3, 8, 1.0, &mut rng);
        let gold = [1, 4, 0];
        let (_, grads) = total_loss(&store, &d, &m, &wi, &we, &gold);
        let h = 1e-5;
        let ids = [d.gate1.unwrap().weight, d.gate2.unwrap().weight, d.classifier.weight, d.classifier.bias.unwrap()];
        for id in ids {
            let shape = store.get(id).dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut plus = store.clone();
                    plus.get_mut(id)[[r, c]] += h;
                    let mut minus = store.clone();
                    minus.get_mut(id)[[r, c]] -= h;
                    let fd = (total_loss(&plus, &d, &m, &wi, &we, &gold).0
                        - total_loss(&minus, &d, &m, &wi, &we, &gold).0)
                        / (2.0 * h);
                    let a = grads.get(id).unwrap()[[r, c]];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-4 || (a - fd).abs() < 1e-9, "{} ({r},{c}): {a} vs {fd}", store.name(id));
                }
            }
        }
    }
}
