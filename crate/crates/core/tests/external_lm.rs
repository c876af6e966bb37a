//! Runs the Python helper against a tiny randomly initialised BERT. Skipped
//! when `python3` cannot import torch and transformers.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ctiner::corpus::{parse_conll, LabelScheme, LabelSet, LabeledCorpus};
use ctiner::external::{finetune_provider, ContextualLmProvider, ExternalProvider, FinetuneConfig};
use ctiner::pos_tagger::RuleTagger;

const HIDDEN: usize = 16;

const MAKE_MODEL: &str = r###"
import os, sys, torch
from transformers import BertConfig, BertModel, BertTokenizer
torch.manual_seed(0)
out = sys.argv[1]
os.makedirs(out, exist_ok=True)
vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "the", "gp", "##u", "apt", "##19",
         "used", ".", "exe", "pe", "##800", "a", "b", "c"]
with open(os.path.join(out, "vocab.txt"), "w") as f:
    f.write("\n".join(vocab) + "\n")
BertTokenizer(os.path.join(out, "vocab.txt")).save_pretrained(out)
cfg = BertConfig(vocab_size=len(vocab), hidden_size=16, num_hidden_layers=1, num_attention_heads=2,
                 intermediate_size=32, max_position_embeddings=128)
BertModel(cfg).save_pretrained(out)
"###;

fn python_ready() -> bool {
    Command::new("python3")
        .args(["-c", "import torch, transformers"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn tiny_bert(dir: &Path) -> PathBuf {
    let script = dir.join("make_model.py");
    fs::write(&script, MAKE_MODEL).unwrap();
    let model = dir.join("tiny-bert");
    let out = Command::new("python3").arg(&script).arg(&model).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    model
}

fn config() -> FinetuneConfig {
    FinetuneConfig {
        hidden_dim: HIDDEN,
        epochs: 1,
        batch_size: 4,
        max_len: 128,
        ..FinetuneConfig::default()
    }
}

fn corpus(text: &str) -> LabeledCorpus {
    parse_conll(text, Path::new("mem"), &LabelScheme::open(), &RuleTagger).unwrap()
}

#[test]
fn pooled_states_sum_the_word_pieces() {
    if !python_ready() {
        eprintln!("torch/transformers unavailable; skipping");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_bert(tmp.path());
    let work = tmp.path().join("work");
    let provider = ContextualLmProvider::open(&model, &work, &config()).unwrap();
    assert_eq!(provider.dim(), HIDDEN);
    let c = corpus("the O\ngpu B-Tool\nAPT19 B-HackOrg\nused O\nPE800.exe B-Tool\n\n");
    let s = &c.sentences[0];
    let pooled = provider.word_vectors(s).unwrap();
    assert_eq!(pooled.dim(), (5, HIDDEN));
    assert!(pooled.iter().all(|v| v.is_finite()));

    // Recompute the pooling from the raw per-piece states the helper wrote.
    let raw = fs::read_to_string(work.join("encode_states.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(raw.lines().next().unwrap()).unwrap();
    let pieces: Vec<String> = serde_json::from_value(rec["pieces"].clone()).unwrap();
    let word_ids: Vec<usize> = serde_json::from_value(rec["word_ids"].clone()).unwrap();
    let states: Vec<Vec<f64>> = serde_json::from_value(rec["states"].clone()).unwrap();
    assert_eq!(pieces.iter().filter(|p| p.as_str() == "gp" || p.as_str() == "##u").count(), 2);
    for w in 0..5 {
        let rows: Vec<&Vec<f64>> = word_ids.iter().zip(&states).filter(|(&id, _)| id == w).map(|(_, s)| s).collect();
        assert!(!rows.is_empty());
        for d in 0..HIDDEN {
            let sum: f64 = rows.iter().map(|r| r[d]).sum();
            assert!((pooled[[w, d]] - sum).abs() < 1e-9, "word {w} dim {d}");
        }
    }

    // Cached: a second call returns the same matrix.
    assert_eq!(provider.word_vectors(s).unwrap(), pooled);
}

#[test]
fn finetuning_writes_a_usable_model() {
    if !python_ready() {
        eprintln!("torch/transformers unavailable; skipping");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny_bert(tmp.path());
    let train = corpus("the O\ngpu B-Tool\nused O\n\nAPT19 B-HackOrg\nused O\nPE800.exe B-Tool\n\n");
    let valid = corpus("a O\ngpu B-Tool\n\n");
    let labels = LabelSet::from_types(&train.label_inventory);
    let cfg = FinetuneConfig {
        base_model: Some(base),
        ..config()
    };
    let work = tmp.path().join("ft");
    let provider = finetune_provider(&train, &valid, &labels, &cfg, &work, 7).unwrap();
    assert!(provider.model_dir().join("config.json").exists());
    let v = provider.word_vectors(&valid.sentences[0]).unwrap();
    assert_eq!(v.dim(), (2, HIDDEN));
}
