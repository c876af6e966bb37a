use std::collections::HashMap;
use std::sync::RwLock;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::corpus::{SymbolTable, PAD_INDEX};
use crate::nn::fnv1a;
use crate::word2vec::VectorTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Pretrained,
    OovRandom,
    Padding,
}

/// Open-interval bound for randomly initialized out-of-vocabulary rows.
pub fn oov_bound(word_dim: usize) -> f64 {
    (3.0 / word_dim as f64).sqrt()
}

/// Word vectors aligned with the word vocabulary, plus a per-surface cache
/// for words outside it. OOV vectors are drawn from a generator seeded by
/// `(seed, surface)`, so a surface form always gets the same vector.
#[derive(Debug)]
pub struct WordEmbeddingTable {
    vectors: Mat,
    provenance: Vec<Provenance>,
    index: HashMap<String, usize>,
    seed: u64,
    cache: RwLock<HashMap<String, Array1<f64>>>,
}

impl WordEmbeddingTable {
    /// Rows follow `vocab`; words found in `pretrained` (exact, then
    /// lowercased) copy that vector, the rest are OOV-random.
    pub fn from_vocab(
        vocab: &SymbolTable,
        pretrained: Option<&VectorTable>,
        dim: usize,
        seed: u64,
    ) -> Self {
        let mut vectors = Mat::zeros((vocab.len(), dim));
        let mut provenance = Vec::with_capacity(vocab.len());
        let mut index = HashMap::new();
        for i in 0..vocab.len() {
            let word = vocab.symbol(i);
            if i == PAD_INDEX {
                provenance.push(Provenance::Padding);
                continue;
            }
            index.insert(word.to_string(), i);
            let found = pretrained.and_then(|p| {
                p.get(word)
                    .or_else(|| p.get(&word.to_lowercase()))
                    .filter(|v| v.len() == dim)
            });
            match found {
                Some(v) => {
                    vectors.row_mut(i).assign(&v);
                    provenance.push(Provenance::Pretrained);
                }
                None => {
                    vectors.row_mut(i).assign(&sample_oov(word, dim, seed));
                    provenance.push(Provenance::OovRandom);
                }
            }
        }
        WordEmbeddingTable {
            vectors,
            provenance,
            index,
            seed,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }

    pub fn provenance(&self, row: usize) -> Provenance {
        self.provenance[row]
    }

    pub fn row_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// The table row for a known word, otherwise the cached OOV vector.
    pub fn lookup(&self, word: &str) -> Array1<f64> {
        if let Some(i) = self.row_of(word) {
            return self.vectors.row(i).to_owned();
        }
        self.oov_vector(word)
    }

    pub fn oov_vector(&self, word: &str) -> Array1<f64> {
        if let Some(v) = self.cache.read().expect("oov cache poisoned").get(word) {
            return v.clone();
        }
        let v = sample_oov(word, self.dim(), self.seed);
        self.cache
            .write()
            .expect("oov cache poisoned")
            .entry(word.to_string())
            .or_insert(v)
            .clone()
    }

    pub fn cached_oov_count(&self) -> usize {
        self.cache.read().expect("oov cache poisoned").len()
    }
}

fn sample_oov(word: &str, dim: usize, seed: u64) -> Array1<f64> {
    let bound = oov_bound(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[&seed.to_le_bytes(), word.as_bytes()]));
    Array1::from_shape_fn(dim, |_| loop {
        let x: f64 = rng.random_range(-bound..bound);
        if x.abs() < bound {
            break x;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn vocab() -> SymbolTable {
        SymbolTable::from_symbols(&["apt", "Malware", "zzz"])
    }

    #[test]
    fn bound_for_fifty_dims() {
        assert!((oov_bound(50) - 0.244_948_974).abs() < 1e-8);
    }

    #[test]
    fn known_words_copy_pretrained_rows() {
        let pre = VectorTable::parse("apt 1 2 3\nmalware 4 5 6\n", &PathBuf::from("mem")).unwrap();
        let t = WordEmbeddingTable::from_vocab(&vocab(), Some(&pre), 3, 1);
        assert_eq!(t.lookup("apt").to_vec(), vec![1.0, 2.0, 3.0]);
        // Lowercase fallback.
        assert_eq!(t.lookup("Malware").to_vec(), vec![4.0, 5.0, 6.0]);
        let zzz = t.row_of("zzz").unwrap();
        assert_eq!(t.provenance(zzz), Provenance::OovRandom);
        assert_eq!(t.provenance(0), Provenance::Padding);
    }

    #[test]
    fn oov_rows_inside_open_bound_and_stable() {
        let t = WordEmbeddingTable::from_vocab(&vocab(), None, 50, 9);
        let b = oov_bound(50);
        for w in ["never-seen", "x", "APT41", "zzz"] {
            let v = t.lookup(w);
            assert!(v.iter().all(|x| x.abs() < b));
            assert_eq!(v, t.lookup(w));
        }
        assert_eq!(t.cached_oov_count(), 3);
        let other = WordEmbeddingTable::from_vocab(&vocab(), None, 50, 9);
        assert_eq!(other.lookup("never-seen"), t.lookup("never-seen"));
    }
}
