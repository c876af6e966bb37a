//! Versioned binary container for model parameters.
//!
//! Layout (little endian): magic `CTINERCK`, `u32` version, `u64` metadata
//! length, metadata JSON, `u32` tensor count, then per tensor a `u32` name
//! length, the UTF-8 name, `u64` rows, `u64` cols and `rows * cols` `f64`
//! values in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::{LabelSet, Vocabulary};
use crate::error::{Error, Result};
use crate::features::WordEmbeddingTable;
use crate::model::{ModelConfig, NerModel, Switches};

pub const MAGIC: &[u8; 8] = b"CTINERCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub switches: Switches,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub oov_seed: u64,
    pub external_dim: Option<usize>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Mat)>,
}

const RUNNING: [&str; 2] = ["running_mean", "running_var"];

impl Checkpoint {
    pub fn from_model(model: &NerModel, oov_seed: u64, external_dim: Option<usize>, best_epoch: usize) -> Self {
        let mut tensors: Vec<(String, Mat)> = model
            .store
            .iter()
            .map(|(_, name, m)| (name.to_string(), m.clone()))
            .collect();
        for (i, r) in model.input.char_cnn.running.iter().enumerate() {
            tensors.push((format!("char_cnn.bn{}.{}", i + 1, RUNNING[0]), r.mean.clone()));
            tensors.push((format!("char_cnn.bn{}.{}", i + 1, RUNNING[1]), r.var.clone()));
        }
        Checkpoint {
            meta: CheckpointMeta {
                config: model.config.clone(),
                switches: model.switches,
                vocab: model.vocab.clone(),
                labels: model.labels.clone(),
                oov_seed,
                external_dim,
                best_epoch,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |what: &str| Error::data(format!("{}: corrupt checkpoint ({what})", origin.display()));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| corrupt("truncated header"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != VERSION {
            return Err(Error::data(format!(
                "{}: checkpoint version {version}, expected {VERSION}",
                origin.display()
            )));
        }
        let meta_len = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let meta = r.take(meta_len).ok_or_else(|| corrupt("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(meta)?;
        let n = r.u32().ok_or_else(|| corrupt("missing tensor count"))?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let len = r.u32().ok_or_else(|| corrupt("truncated tensor"))? as usize;
            let name = r.take(len).ok_or_else(|| corrupt("truncated tensor"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt("tensor name"))?;
            let rows = r.u64().ok_or_else(|| corrupt("truncated tensor"))? as usize;
            let cols = r.u64().ok_or_else(|| corrupt("truncated tensor"))? as usize;
            let count = rows.checked_mul(cols).ok_or_else(|| corrupt("tensor shape"))?;
            let data = r.take(count.checked_mul(8).ok_or_else(|| corrupt("tensor shape"))?)
                .ok_or_else(|| corrupt("truncated tensor data"))?;
            let vals: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Mat::from_shape_vec((rows, cols), vals).expect("shape")));
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the model and copies every tensor into it.
    pub fn into_model(self) -> Result<NerModel> {
        let m = self.meta;
        let words = WordEmbeddingTable::from_vocab(&m.vocab.words, None, m.config.features.word_dim, m.oov_seed);
        let mut model = NerModel::new(&m.config, m.switches, m.vocab, m.labels, words, None, m.external_dim, 0)?;
        let mut seen = vec![false; model.store.len()];
        for (name, t) in self.tensors {
            if let Some(rest) = name.strip_prefix("char_cnn.bn") {
                if let Some((layer, kind)) = rest.split_once('.') {
                    if let (Ok(l), Some(k)) = (layer.parse::<usize>(), RUNNING.iter().position(|r| *r == kind)) {
                        let running = model
                            .input
                            .char_cnn
                            .running
                            .get_mut(l.wrapping_sub(1))
                            .ok_or_else(|| Error::data(format!("checkpoint tensor {name}: no such layer")))?;
                        let slot = if k == 0 { &mut running.mean } else { &mut running.var };
                        if slot.dim() != t.dim() {
                            return Err(Error::data(format!("checkpoint tensor {name}: shape mismatch")));
                        }
                        *slot = t;
                        continue;
                    }
                }
            }
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::data(format!("checkpoint tensor {name} has no matching parameter")))?;
            let p = model.store.get_mut(id);
            if p.dim() != t.dim() {
                return Err(Error::data(format!(
                    "checkpoint tensor {name}: shape {:?}, model expects {:?}",
                    t.dim(),
                    p.dim()
                )));
            }
            *p = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = model.store.name(crate::autograd::ParamId(i)).to_string();
            return Err(Error::data(format!("checkpoint lacks parameter {name}")));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, parse_conll, LabelScheme};
    use crate::model::Augmentation;
    use crate::pos_tagger::RuleTagger;
    use std::path::PathBuf;

    #[test]
    fn roundtrip_restores_predictions_exactly() {
        let c = parse_conll(
            "APT19 B-HackOrg\nused O\nMimikatz B-Tool\n",
            &PathBuf::from("mem"),
            &LabelScheme::open(),
            &RuleTagger,
        )
        .unwrap();
        let vocab = build_vocab(&c, 1);
        let labels = LabelSet::from_types(&c.label_inventory);
        let mut cfg = ModelConfig::default();
        cfg.features.word_dim = 6;
        cfg.features.fused_dim = 8;
        cfg.encoder.lstm_hidden = 4;
        cfg.encoder.heads = 2;
        cfg.encoder.ffnn_hidden = 8;
        let words = WordEmbeddingTable::from_vocab(&vocab.words, None, 6, 9);
        let mut model = NerModel::new(&cfg, Switches::BASE, vocab, labels, words, None, None, 1).unwrap();
        model.input.char_cnn.running[1].mean.fill(0.25);
        let ckpt = Checkpoint::from_model(&model, 9, None, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let restored = loaded.into_model().unwrap();
        let aug = Augmentation::default();
        let mut s = c.sentences.clone();
        s[0].tokens[1].surface = "unseen".into();
        let p = |m: &NerModel| m.probabilities(&m.prepare(&s[0], false).unwrap(), &aug).unwrap();
        assert_eq!(p(&model), p(&restored));
        assert_eq!(restored.input.char_cnn.running[1].mean, model.input.char_cnn.running[1].mean);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(b"", p).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPTxxxxxxxxxxxxxxx", p).is_err());
        let mut bad = MAGIC.to_vec();
        bad.extend_from_slice(&99u32.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
    }
}
