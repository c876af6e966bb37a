//! Domain-corpus semantic augmentation.
//!
//! A CBOW model trained on the unlabeled experimental corpus supplies, for
//! each word, its `K` nearest neighbours by cosine. Two ways of pooling the
//! neighbour vectors are offered:
//!
//! * **HSA** weights neighbours by a softmax over their cosine scores. It has
//!   no trainable parameters, so every vector is computed once before
//!   training ([`HsaTable`]).
//! * **SSA** weights neighbours by a softmax over the bilinear score
//!   `m_i W_I v_ij` between the encoder output and each neighbour, so the
//!   weights depend on context and are recomputed in every forward pass.
//!
//! Words missing from the domain vocabulary get a zero vector and a cleared
//! mask bit.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::word2vec::{train_cbow, CbowConfig, VectorTable};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InternalMode {
    #[default]
    None,
    Hsa,
    Ssa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InternalConfig {
    pub k: usize,
    pub dim: usize,
    pub window: usize,
    pub min_count: usize,
    pub epochs: usize,
    /// Normalize SSA scores by the plain sum of scores instead of the sum of
    /// their exponentials. Unsafe: the denominator can be zero or negative.
    pub ssa_literal_normalizer: bool,
}

impl Default for InternalConfig {
    fn default() -> Self {
        InternalConfig {
            k: 5,
            dim: 256,
            window: 3,
            min_count: 2,
            epochs: 5,
            ssa_literal_normalizer: false,
        }
    }
}

impl InternalConfig {
    pub fn cbow(&self, seed: u64) -> CbowConfig {
        CbowConfig {
            dim: self.dim,
            window: self.window,
            min_count: self.min_count,
            epochs: self.epochs,
            seed,
            ..CbowConfig::default()
        }
    }
}

/// Embeddings of the domain corpus plus the settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainEmbeddingModel {
    pub vectors: VectorTable,
    pub window: usize,
    pub min_count: usize,
}

impl DomainEmbeddingModel {
    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.vectors.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(DomainEmbeddingModel {
            vectors: VectorTable::load(path)?,
            window: 0,
            min_count: 0,
        })
    }
}

/// CBOW over the unlabeled corpus (surface forms as-is).
pub fn train_domain_embeddings<S: AsRef<str>>(
    corpus: &[Vec<S>],
    config: &CbowConfig,
) -> Result<DomainEmbeddingModel> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::data("domain corpus is empty"));
    }
    let vectors = train_cbow(corpus, config)?;
    Ok(DomainEmbeddingModel {
        vectors,
        window: config.window,
        min_count: config.min_count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub word: String,
    pub index: usize,
    pub score: f64,
}

/// Top-K neighbours for every word of a domain vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborCache {
    pub k: usize,
    entries: Vec<Vec<Neighbor>>,
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl NeighborCache {
    pub fn get(&self, word: &str) -> Option<&[Neighbor]> {
        self.index.get(word).map(|&i| self.entries[i].as_slice())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// One `word: (neighbor,score) (neighbor,score) ...` line per word.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, ns) in self.words.iter().zip(&self.entries) {
            out.push_str(w);
            out.push(':');
            for n in ns {
                out.push_str(&format!(" ({},{})", n.word, n.score));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses the text form; neighbour indices are resolved against `model`.
    pub fn parse(text: &str, model: &DomainEmbeddingModel, origin: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut words = Vec::new();
        let mut entries = Vec::new();
        let mut k = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, rest) = match line.find(": ") {
                Some(p) => (&line[..p], &line[p + 2..]),
                None => match line.strip_suffix(':') {
                    Some(w) => (w, ""),
                    None => return Err(bad(i + 1, "missing ':' separator".into())),
                },
            };
            let mut ns = Vec::new();
            for item in rest.split(' ').filter(|s| !s.is_empty()) {
                let inner = item
                    .strip_prefix('(')
                    .and_then(|s| s.strip_suffix(')'))
                    .ok_or_else(|| bad(i + 1, format!("malformed entry {item:?}")))?;
                let (nw, score) = inner
                    .rsplit_once(',')
                    .ok_or_else(|| bad(i + 1, format!("malformed entry {item:?}")))?;
                let score: f64 = score
                    .parse()
                    .map_err(|e| bad(i + 1, format!("bad score: {e}")))?;
                let index = model
                    .vectors
                    .index(nw)
                    .ok_or_else(|| bad(i + 1, format!("neighbour {nw:?} not in domain model")))?;
                ns.push(Neighbor {
                    word: nw.to_string(),
                    index,
                    score,
                });
            }
            k = k.max(ns.len());
            words.push(word.to_string());
            entries.push(ns);
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(NeighborCache {
            k,
            entries,
            words,
            index,
        })
    }

    pub fn load(path: &Path, model: &DomainEmbeddingModel) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, model, path)
    }
}

/// Exact top-K cosine neighbours for every vocabulary word, excluding the
/// word itself. Ties are broken by ascending vocabulary index.
pub fn knn_neighbors(model: &DomainEmbeddingModel, k: usize) -> Result<NeighborCache> {
    let n = model.vectors.len();
    if k == 0 || k >= n {
        return Err(Error::config(format!(
            "K must satisfy 1 <= K < vocabulary size ({n}), got {k}"
        )));
    }
    let v = model.vectors.vectors();
    let norms: Array1<f64> = v.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let unit = Mat::from_shape_fn(v.dim(), |(i, j)| {
        if norms[i] > 0.0 {
            v[[i, j]] / norms[i]
        } else {
            0.0
        }
    });
    const CHUNK: usize = 512;
    let mut entries = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let scores = unit.slice(ndarray::s![start..end, ..]).dot(&unit.t());
        for (r, row) in scores.rows().into_iter().enumerate() {
            let q = start + r;
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (j, &s) in row.iter().enumerate() {
                if j == q {
                    continue;
                }
                let s = s.clamp(-1.0, 1.0);
                if best.len() == k && !better((s, j), best[k - 1]) {
                    continue;
                }
                let pos = best.partition_point(|&b| better(b, (s, j)));
                best.insert(pos, (s, j));
                best.truncate(k);
            }
            entries.push(
                best.into_iter()
                    .map(|(score, index)| Neighbor {
                        word: model.vectors.words()[index].clone(),
                        index,
                        score,
                    })
                    .collect(),
            );
        }
    }
    let words = model.vectors.words().to_vec();
    let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    Ok(NeighborCache {
        k,
        entries,
        words,
        index,
    })
}

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Softmax over raw cosine scores.
pub fn hsa_weights(scores: &[f64]) -> Vec<f64> {
    let m = Mat::from_shape_vec((1, scores.len()), scores.to_vec()).expect("row");
    softmax_rows(m.view(), None).into_raw_vec_and_offset().0
}

/// HSA vector of `word`, or `None` if the word has no neighbours.
pub fn hsa_augment(word: &str, cache: &NeighborCache, model: &DomainEmbeddingModel) -> Option<Array1<f64>> {
    let ns = cache.get(word)?;
    if ns.is_empty() {
        return None;
    }
    let scores: Vec<f64> = ns.iter().map(|n| n.score).collect();
    let alpha = hsa_weights(&scores);
    let mut out = Array1::zeros(model.dim());
    for (a, n) in alpha.iter().zip(ns) {
        out.scaled_add(*a, &model.vectors.vectors().row(n.index));
    }
    Some(out)
}

/// Precomputed HSA vectors for a whole domain vocabulary.
#[derive(Clone, Debug)]
pub struct HsaTable {
    vectors: HashMap<String, Array1<f64>>,
    dim: usize,
}

impl HsaTable {
    pub fn build(cache: &NeighborCache, model: &DomainEmbeddingModel) -> Self {
        let vectors = cache
            .words()
            .iter()
            .filter_map(|w| hsa_augment(w, cache, model).map(|v| (w.clone(), v)))
            .collect();
        HsaTable {
            vectors,
            dim: model.dim(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&Array1<f64>> {
        self.vectors.get(word)
    }

    /// Rows for a sentence and the mask (true where a vector exists).
    pub fn sentence(&self, words: &[&str]) -> (Mat, Vec<bool>) {
        let mut out = Mat::zeros((words.len(), self.dim));
        let mut mask = vec![false; words.len()];
        for (i, w) in words.iter().enumerate() {
            if let Some(v) = self.get(w) {
                out.row_mut(i).assign(v);
                mask[i] = true;
            }
        }
        (out, mask)
    }
}

/// Neighbour matrices (`K x D`) per token, `None` for words outside the domain vocabulary.
pub fn neighbor_matrices(
    words: &[&str],
    cache: &NeighborCache,
    model: &DomainEmbeddingModel,
) -> Vec<Option<Mat>> {
    words
        .iter()
        .map(|w| {
            let ns = cache.get(w)?;
            if ns.is_empty() {
                return None;
            }
            let idx: Vec<usize> = ns.iter().map(|n| n.index).collect();
            Some(model.vectors.vectors().select(Axis(0), &idx))
        })
        .collect()
}

/// The bilinear attention matrix `W_I`.
#[derive(Clone, Copy, Debug)]
pub struct SsaParams {
    pub bilinear: ParamId,
}

impl SsaParams {
    pub fn new(store: &mut ParamStore, enc_dim: usize, domain_dim: usize, rng: &mut impl Rng) -> Self {
        SsaParams {
            bilinear: store.add("internal.ssa.bilinear", crate::nn::xavier(enc_dim, domain_dim, rng)),
        }
    }
}

/// SSA over a sentence: `m` is the encoder output (`N x D`), `neighbors[i]`
/// the neighbour matrix of token `i`. Tokens without neighbours get zero rows.
pub fn ssa_augment(
    g: &mut Graph<'_>,
    m: Var,
    neighbors: &[Option<Mat>],
    params: SsaParams,
    literal_normalizer: bool,
) -> Var {
    let w = g.param(params.bilinear);
    let projected = g.matmul(m, w);
    let dim = g.value(projected).ncols();
    let rows: Vec<Var> = neighbors
        .iter()
        .enumerate()
        .map(|(i, ns)| match ns {
            None => g.constant(Mat::zeros((1, dim))),
            Some(v) => {
                let mi = g.slice_rows(projected, i, 1);
                let vt = g.constant(v.t().to_owned());
                let scores = g.matmul(mi, vt);
                let beta = if literal_normalizer {
                    let num = g.exp(scores);
                    let den = g.sum_cols(scores);
                    g.div_col(num, den)
                } else {
                    g.softmax(scores)
                };
                let vals = g.constant(v.clone());
                g.matmul(beta, vals)
            }
        })
        .collect();
    g.concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn model_from(words: &[&str], vectors: Mat) -> DomainEmbeddingModel {
        DomainEmbeddingModel {
            vectors: VectorTable::new(words.iter().map(|s| s.to_string()).collect(), vectors).unwrap(),
            window: 3,
            min_count: 2,
        }
    }

    #[test]
    fn duplicate_direction_pair_are_mutual_neighbours() {
        let m = model_from(
            &["x", "y", "z", "x2"],
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [2.0, 0.0, 0.0]],
        );
        let cache = knn_neighbors(&m, 1).unwrap();
        assert_eq!(cache.get("x").unwrap()[0].word, "x2");
        assert_eq!(cache.get("x2").unwrap()[0].word, "x");
        // y's candidates all tie at 0: lowest index wins.
        assert_eq!(cache.get("y").unwrap()[0].word, "x");
        for w in cache.words() {
            assert!(cache.get(w).unwrap().iter().all(|n| &n.word != w));
        }
    }

    #[test]
    fn k_out_of_range() {
        let m = model_from(&["a", "b"], array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(knn_neighbors(&m, 0).is_err());
        assert!(knn_neighbors(&m, 2).is_err());
        assert!(knn_neighbors(&m, 1).is_ok());
    }

    #[test]
    fn hsa_weight_examples() {
        let w = hsa_weights(&[0.4, 0.4, 0.4]);
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let w = hsa_weights(&[1.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn hsa_is_precomputable_and_misses_give_none() {
        let m = model_from(
            &["a", "b", "c"],
            array![[1.0, 0.2], [0.3, 1.0], [-1.0, 0.5]],
        );
        let cache = knn_neighbors(&m, 2).unwrap();
        let a = hsa_augment("a", &cache, &m).unwrap();
        assert_eq!(a, hsa_augment("a", &cache, &m).unwrap());
        assert!(hsa_augment("zzz", &cache, &m).is_none());
        let table = HsaTable::build(&cache, &m);
        let (rows, mask) = table.sentence(&["a", "zzz"]);
        assert_eq!(mask, vec![true, false]);
        assert_eq!(rows.row(0), a);
        assert!(rows.row(1).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn cache_text_roundtrip() {
        let m = model_from(
            &["a:", "b,c", "(d)", "e"],
            array![[1.0, 0.2], [0.3, 1.0], [-1.0, 0.5], [0.1, 0.1]],
        );
        let cache = knn_neighbors(&m, 2).unwrap();
        let text = cache.to_text();
        let back = NeighborCache::parse(&text, &m, &PathBuf::from("mem")).unwrap();
        assert_eq!(back, cache);
    }

    fn ssa_value(store: &ParamStore, params: SsaParams, m: &Mat, ns: &[Option<Mat>]) -> Mat {
        let mut g = Graph::new(store);
        let mv = g.constant(m.clone());
        let out = ssa_augment(&mut g, mv, ns, params, false);
        g.value(out).to_owned()
    }

    #[test]
    fn ssa_zero_matrix_averages_and_single_neighbour_copies() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = SsaParams::new(&mut store, 3, 2, &mut rng);
        let m = array![[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let neigh = vec![Some(array![[1.0, 2.0], [3.0, 0.0]]), Some(array![[4.0, -1.0]])];
        let out = ssa_value(&store, params, &m, &neigh);
        assert!((out[[1, 0]] - 4.0).abs() < 1e-12 && (out[[1, 1]] + 1.0).abs() < 1e-12);
        store.get_mut(params.bilinear).fill(0.0);
        let out = ssa_value(&store, params, &m, &neigh);
        assert!((out[[0, 0]] - 2.0).abs() < 1e-12 && (out[[0, 1]] - 1.0).abs() < 1e-12);
        let out = ssa_value(&store, params, &m, &[None, None]);
        assert!(out.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn knn_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
        let mut v = crate::nn::uniform(50, 16, 1.0, &mut rng);
        // Force exact ties and a duplicate direction.
        let r3 = v.row(3).to_owned();
        v.row_mut(17).assign(&(&r3 * 2.0));
        v.row_mut(18).assign(&r3);
        let m = model_from(&refs, v.clone());
        for k in [1, 3, 5, 49] {
            let cache = knn_neighbors(&m, k).unwrap();
            for q in 0..50 {
                let mut all: Vec<(f64, usize)> = (0..50)
                    .filter(|&j| j != q)
                    .map(|j| {
                        let a = v.row(q).to_vec();
                        let b = v.row(j).to_vec();
                        (crate::word2vec::cosine(&a, &b), j)
                    })
                    .collect();
                all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let got = cache.get(&words[q]).unwrap();
                assert_eq!(got.len(), k);
                for (n, (s, j)) in got.iter().zip(&all) {
                    assert!((n.score - s).abs() < 1e-12);
                    // Ranking agrees except where scores coincide to rounding.
                    if n.index != *j {
                        assert!((v.row(q).dot(&v.row(n.index)) / v.row(n.index).dot(&v.row(n.index)).sqrt()
                            - v.row(q).dot(&v.row(*j)) / v.row(*j).dot(&v.row(*j)).sqrt())
                        .abs() < 1e-9);
                    }
                }
                assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
            }
        }
    }

    #[test]
    fn substitutable_words_end_up_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let filler: Vec<String> = (0..40).map(|i| format!("f{i}")).collect();
        let mut corpus = Vec::new();
        for _ in 0..600 {
            let pick = |rng: &mut ChaCha8Rng| filler[rng.random_range(0..filler.len())].clone();
            let target = if rng.random::<bool>() { "malware" } else { "trojan" };
            let mut s: Vec<String> = vec!["the".into(), "attacker".into(), "dropped".into(), target.into(), "via".into(), "email".into()];
            for _ in 0..4 {
                s.push(pick(&mut rng));
            }
            corpus.push(s);
        }
        corpus.push(vec!["hapax".into(), "f1".into()]);
        let cfg = CbowConfig {
            dim: 256,
            window: 3,
            min_count: 2,
            epochs: 5,
            seed: 3,
            ..CbowConfig::default()
        };
        let m = train_domain_embeddings(&corpus, &cfg).unwrap();
        assert_eq!(m.dim(), 256);
        assert!(m.vectors.index("hapax").is_none());
        let pair = m.vectors.cosine("malware", "trojan").unwrap();
        let mut random_pairs = Vec::new();
        for i in 0..20 {
            random_pairs.push(m.vectors.cosine(&filler[i], &filler[i + 20]).unwrap());
        }
        let mean = random_pairs.iter().sum::<f64>() / random_pairs.len() as f64;
        assert!(pair > mean, "pair {pair} random mean {mean}");
    }

    #[test]
    fn empty_domain_corpus_is_an_error() {
        let corpus: Vec<Vec<String>> = vec![vec![]];
        assert!(train_domain_embeddings(&corpus, &CbowConfig::default()).is_err());
        let corpus = vec![vec!["a", "b", "c"]];
        assert!(train_domain_embeddings(&corpus, &CbowConfig::default()).is_err());
    }

    fn ssa_sum(store: &ParamStore, params: SsaParams, m: &Mat, ns: &[Option<Mat>]) -> (f64, Mat) {
        let mut g = Graph::new(store);
        let mv = g.constant(m.clone());
        let out = ssa_augment(&mut g, mv, ns, params, false);
        let loss = g.sum_all(out);
        let grads = g.backward(loss);
        (g.scalar(loss), grads.get(params.bilinear).unwrap().clone())
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = SsaParams::new(&mut store, 8, 8, &mut rng);
        let m = crate::nn::uniform(3, 8, 1.0, &mut rng);
        let ns = vec![
            Some(crate::nn::uniform(4, 8, 1.0, &mut rng)),
            None,
            Some(crate::nn::uniform(4, 8, 1.0, &mut rng)),
        ];
        let (_, analytic) = ssa_sum(&store, params, &m, &ns);
        let h = 1e-5;
        for r in 0..8 {
            for c in 0..8 {
                let mut plus = store.clone();
                plus.get_mut(params.bilinear)[[r, c]] += h;
                let mut minus = store.clone();
                minus.get_mut(params.bilinear)[[r, c]] -= h;
                let fd = (ssa_sum(&plus, params, &m, &ns).0 - ssa_sum(&minus, params, &m, &ns).0) / (2.0 * h);
                let a = analytic[[r, c]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4 || (a - fd).abs() < 1e-9, "({r},{c}) analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn literal_normalizer_differs_from_softmax() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = SsaParams::new(&mut store, 2, 2, &mut rng);
        *store.get_mut(params.bilinear) = array![[1.0, 0.0], [0.0, 1.0]];
        let m = array![[1.0, 1.0]];
        let ns = vec![Some(array![[1.0, 0.0], [0.0, 2.0]])];
        let mut g = Graph::new(&store);
        let mv = g.constant(m.clone());
        let lit = ssa_augment(&mut g, mv, &ns, params, true);
        // scores (1, 2): weights e^1/3, e^2/3.
        let e = std::f64::consts::E;
        assert!((g.value(lit)[[0, 0]] - e / 3.0).abs() < 1e-12);
        assert!((g.value(lit)[[0, 1]] - 2.0 * e * e / 3.0).abs() < 1e-12);
    }
}
