//! Plain-text word vectors and a CBOW trainer with negative sampling.
//!
//! The text format is one `word v1 v2 ... vd` record per line (GloVe style).
//! A leading `count dim` header, as written by word2vec tools, is accepted on
//! read and never written.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Words with dense vectors, rows aligned with `words`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
}

impl VectorTable {
    pub fn new(words: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if words.len() != vectors.nrows() {
            return Err(Error::data(format!(
                "{} words but {} vectors",
                words.len(),
                vectors.nrows()
            )));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(VectorTable {
            words,
            index,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn index(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn get(&self, word: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index(word).map(|i| self.vectors.row(i))
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        Some(cosine(self.get(a)?.as_slice()?, self.get(b)?.as_slice()?))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, row) in self.words.iter().zip(self.vectors.rows()) {
            out.push_str(w);
            for v in row {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut words = Vec::new();
        let mut data = Vec::new();
        let mut dim: Option<usize> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ').filter(|p| !p.is_empty());
            let word = parts.next().unwrap_or_default();
            let values: Vec<&str> = parts.collect();
            if i == 0 && values.len() == 1 && word.parse::<usize>().is_ok() {
                if values[0].parse::<usize>().is_ok() {
                    continue;
                }
            }
            let parsed = values
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: format!("bad vector component: {e}"),
                })?;
            match dim {
                None => dim = Some(parsed.len()),
                Some(d) if d != parsed.len() => {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line: i + 1,
                        message: format!("expected {d} components, found {}", parsed.len()),
                    })
                }
                _ => {}
            }
            words.push(word.to_string());
            data.extend(parsed);
        }
        let dim = dim.ok_or_else(|| Error::data(format!("{}: no vectors", origin.display())))?;
        let vectors = Array2::from_shape_vec((words.len(), dim), data)
            .map_err(|e| Error::data(e.to_string()))?;
        Self::new(words, vectors)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbowConfig {
    pub dim: usize,
    pub window: usize,
    pub min_count: usize,
    pub negative: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub min_alpha: f64,
    /// Frequent-word downsampling threshold; 0 disables it.
    pub sample: f64,
    pub seed: u64,
}

impl Default for CbowConfig {
    fn default() -> Self {
        CbowConfig {
            dim: 100,
            window: 5,
            min_count: 5,
            negative: 5,
            epochs: 5,
            alpha: 0.025,
            min_alpha: 0.0001,
            sample: 1e-3,
            seed: 1,
        }
    }
}

const UNIGRAM_TABLE: usize = 1_000_000;

/// Trains CBOW input vectors. Returns an error if no word survives `min_count`.
pub fn train_cbow<S: AsRef<str>>(sentences: &[Vec<S>], config: &CbowConfig) -> Result<VectorTable> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sentences {
        for w in s {
            *counts.entry(w.as_ref()).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= config.min_count)
        .collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if vocab.is_empty() {
        return Err(Error::data(format!(
            "vocabulary is empty after min_count={} filtering",
            config.min_count
        )));
    }
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, (w, _))| (*w, i)).collect();
    let n = vocab.len();
    let dim = config.dim;
    let total: usize = vocab.iter().map(|(_, c)| c).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input = Array2::<f64>::zeros((n, dim));
    for v in input.iter_mut() {
        *v = (rng.random::<f64>() - 0.5) / dim as f64;
    }
    let mut output = Array2::<f64>::zeros((n, dim));

    let table = {
        let pow: Vec<f64> = vocab.iter().map(|(_, c)| (*c as f64).powf(0.75)).collect();
        let z: f64 = pow.iter().sum();
        let size = UNIGRAM_TABLE.min(n * 1000).max(n);
        let mut table = Vec::with_capacity(size);
        let mut i = 0;
        let mut cum = pow[0] / z;
        for a in 0..size {
            table.push(i);
            if (a as f64 + 1.0) / size as f64 > cum && i + 1 < n {
                i += 1;
                cum += pow[i] / z;
            }
        }
        table
    };
    let keep_prob: Vec<f64> = vocab
        .iter()
        .map(|(_, c)| {
            if config.sample <= 0.0 {
                1.0
            } else {
                let f = *c as f64 / total as f64;
                let t = config.sample;
                ((f / t).sqrt() + 1.0) * t / f
            }
        })
        .collect();

    let encoded: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.iter().filter_map(|w| index.get(w.as_ref()).copied()).collect())
        .collect();
    let words_per_epoch: usize = encoded.iter().map(Vec::len).sum();
    let total_steps = (words_per_epoch * config.epochs).max(1) as f64;
    let mut step = 0usize;

    let mut hidden = Array1::<f64>::zeros(dim);
    let mut err = Array1::<f64>::zeros(dim);
    for _ in 0..config.epochs {
        for sent in &encoded {
            let kept: Vec<usize> = sent
                .iter()
                .copied()
                .filter(|&w| keep_prob[w] >= 1.0 || rng.random::<f64>() < keep_prob[w])
                .collect();
            for pos in 0..kept.len() {
                let alpha = (config.alpha
                    - (config.alpha - config.min_alpha) * step as f64 / total_steps)
                    .max(config.min_alpha);
                step += 1;
                let lo = pos.saturating_sub(config.window);
                let hi = (pos + config.window + 1).min(kept.len());
                let context: Vec<usize> = (lo..hi).filter(|&j| j != pos).map(|j| kept[j]).collect();
                if context.is_empty() {
                    continue;
                }
                hidden.fill(0.0);
                for &c in &context {
                    hidden += &input.row(c);
                }
                hidden /= context.len() as f64;
                err.fill(0.0);
                let target = kept[pos];
                for d in 0..=config.negative {
                    let (word, label) = if d == 0 {
                        (target, 1.0)
                    } else {
                        let w = table[rng.random_range(0..table.len())];
                        if w == target {
                            continue;
                        }
                        (w, 0.0)
                    };
                    let mut out_row = output.row_mut(word);
                    let f = crate::autograd::sigmoid(hidden.dot(&out_row));
                    let g = (label - f) * alpha;
                    err.scaled_add(g, &out_row);
                    out_row.scaled_add(g, &hidden);
                }
                for &c in &context {
                    input.row_mut(c).scaled_add(1.0, &err);
                }
            }
        }
    }
    VectorTable::new(vocab.iter().map(|(w, _)| w.to_string()).collect(), input)
}
