//! POS-tag embeddings pretrained with CBOW over tag sequences.

use std::path::Path;

use ndarray::{ArrayView1, Axis};

use crate::autograd::Mat;
use crate::corpus::{SymbolTable, PAD_INDEX, UNK_INDEX};
use crate::error::{Error, Result};
use crate::word2vec::{train_cbow, CbowConfig, VectorTable};

/// CBOW settings for tag sequences: window 3, dimension 30.
pub fn pos_cbow_config(seed: u64) -> CbowConfig {
    CbowConfig {
        dim: 30,
        window: 3,
        min_count: 1,
        negative: 5,
        epochs: 5,
        alpha: 0.025,
        min_alpha: 0.0001,
        sample: 0.0,
        seed,
    }
}

/// Tag vectors with reserved rows: `<pad>` is zero, `<unk>` is the mean tag vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEmbeddingTable {
    pub tags: SymbolTable,
    pub vectors: Mat,
}

impl PosEmbeddingTable {
    pub fn from_vectors(table: &VectorTable) -> Self {
        let tags = SymbolTable::from_symbols(table.words());
        let dim = table.dim();
        let mut vectors = Mat::zeros((tags.len(), dim));
        for (i, t) in table.words().iter().enumerate() {
            let row = tags.get(t).expect("tag just inserted");
            vectors.row_mut(row).assign(&table.vectors().row(i));
        }
        if !table.is_empty() {
            let mean = table.vectors().mean_axis(Axis(0)).expect("non-empty");
            vectors.row_mut(UNK_INDEX).assign(&mean);
        }
        vectors.row_mut(PAD_INDEX).fill(0.0);
        PosEmbeddingTable { tags, vectors }
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Unseen tags map to the `<unk>` row.
    pub fn row(&self, tag: &str) -> ArrayView1<'_, f64> {
        self.vectors.row(self.tags.get_or_unk(tag))
    }

    pub fn to_vector_table(&self) -> VectorTable {
        let words = self.tags.symbols().to_vec();
        let rows: Vec<usize> = words.iter().map(|t| self.tags.get(t).unwrap()).collect();
        let vectors = self.vectors.select(Axis(0), &rows);
        VectorTable::new(words, vectors).expect("aligned")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_vector_table().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_vectors(&VectorTable::load(path)?))
    }

    /// Rows aligned to another tag vocabulary (the model's POS vocabulary).
    pub fn aligned_to(&self, vocab: &SymbolTable) -> Mat {
        let mut out = Mat::zeros((vocab.len(), self.dim()));
        for i in 0..vocab.len() {
            if i == PAD_INDEX {
                continue;
            }
            out.row_mut(i).assign(&self.row(vocab.symbol(i)));
        }
        out
    }
}

pub fn pretrain_pos_embeddings<S: AsRef<str>>(
    pos_sequences: &[Vec<S>],
    config: &CbowConfig,
) -> Result<PosEmbeddingTable> {
    let mut distinct = std::collections::BTreeSet::new();
    for s in pos_sequences {
        for t in s {
            distinct.insert(t.as_ref());
        }
    }
    if distinct.len() < 2 {
        return Err(Error::data(format!(
            "POS pretraining needs at least 2 distinct tags, found {}",
            distinct.len()
        )));
    }
    let table = train_cbow(pos_sequences, config)?;
    Ok(PosEmbeddingTable::from_vectors(&table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::word2vec::cosine;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seventeen_tags_give_seventeen_rows_plus_reserved() {
        let tags: Vec<String> = (0..17).map(|i| format!("T{i}")).collect();
        let seqs: Vec<Vec<String>> = (0..30)
            .map(|k| (0..17).map(|i| tags[(i + k) % 17].clone()).collect())
            .collect();
        let t = pretrain_pos_embeddings(&seqs, &pos_cbow_config(1)).unwrap();
        assert_eq!(t.vectors.nrows(), 17 + 2);
        assert_eq!(t.dim(), 30);
        assert_eq!(t.row("never-seen"), t.vectors.row(UNK_INDEX));
    }

    #[test]
    fn single_tag_is_an_error() {
        let seqs = vec![vec!["NN", "NN"]];
        assert!(pretrain_pos_embeddings(&seqs, &pos_cbow_config(1)).is_err());
    }

    #[test]
    fn disjoint_cliques_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = ["A1", "A2", "A3", "A4"];
        let b = ["B1", "B2", "B3", "B4"];
        let mut seqs = Vec::new();
        for k in 0..300 {
            let clique = if k % 2 == 0 { &a } else { &b };
            let mut s: Vec<&str> = (0..8).map(|i| clique[i % 4]).collect();
            s.shuffle(&mut rng);
            seqs.push(s);
        }
        let t = pretrain_pos_embeddings(&seqs, &pos_cbow_config(2)).unwrap();
        let v = |tag: &str| t.row(tag).to_vec();
        let within = cosine(&v("A1"), &v("A2"));
        let across = cosine(&v("A1"), &v("B1"));
        assert!(within > across, "within {within} across {across}");
    }

    #[test]
    fn save_load_roundtrip() {
        let seqs = vec![vec!["NN", "VB", "DT", "NN"]; 5];
        let t = pretrain_pos_embeddings(&seqs, &pos_cbow_config(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pos.txt");
        t.save(&p).unwrap();
        assert_eq!(PosEmbeddingTable::load(&p).unwrap(), t);
    }
}
