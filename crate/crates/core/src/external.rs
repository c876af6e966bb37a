//! General-domain augmentation from a contextual language model.
//!
//! A provider turns a sentence into one vector per word. The contextual
//! provider sums the hidden states of each word's word pieces; a trainable
//! fully connected layer then maps the pooled vectors to the encoder width.
//!
//! Three providers exist: [`ContextualLmProvider`] (a finetuned BERT-style
//! model driven through an embedded Python helper), [`PrecomputedProvider`]
//! (vectors read from a file) and [`StubProvider`] (hash-seeded vectors, for
//! tests and runs without the language model).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::RwLock;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::corpus::{write_conll, LabelSet, LabeledCorpus, Sentence};
use crate::error::{Error, Result};
use crate::nn::{fnv1a, Linear};

const HELPER_SCRIPT: &str = include_str!("../scripts/finetune_bert.py");
pub const PRECOMPUTED_MAGIC: &str = "#ctiner-precomputed v1";

/// Greedy longest-match-first word-piece tokenizer over a fixed vocabulary.
#[derive(Clone, Debug)]
pub struct WordPieceTokenizer {
    vocab: HashMap<String, usize>,
    pub unk: String,
    pub uncased: bool,
    pub max_chars: usize,
}

impl WordPieceTokenizer {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], uncased: bool) -> Self {
        WordPieceTokenizer {
            vocab: tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.as_ref().to_string(), i))
                .collect(),
            unk: "[UNK]".into(),
            uncased,
            max_chars: 100,
        }
    }

    /// Reads a `vocab.txt` (one piece per line).
    pub fn load(path: &Path, uncased: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        Ok(Self::from_tokens(&tokens, uncased))
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.vocab.contains_key(piece)
    }

    /// Pieces of one word. Punctuation characters split the word into
    /// separate chunks, each tokenized independently.
    pub fn tokenize_word(&self, word: &str) -> Vec<String> {
        let word = if self.uncased {
            word.to_lowercase()
        } else {
            word.to_string()
        };
        let mut chunks: Vec<String> = Vec::new();
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_whitespace() || c.is_control() {
                if !cur.is_empty() {
                    chunks.push(std::mem::take(&mut cur));
                }
            } else if c.is_ascii_punctuation() {
                if !cur.is_empty() {
                    chunks.push(std::mem::take(&mut cur));
                }
                chunks.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            chunks.push(cur);
        }
        chunks.iter().flat_map(|c| self.wordpiece(c)).collect()
    }

    fn wordpiece(&self, chunk: &str) -> Vec<String> {
        let chars: Vec<char> = chunk.chars().collect();
        if chars.len() > self.max_chars {
            return vec![self.unk.clone()];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut s: String = chars[start..end].iter().collect();
                if start > 0 {
                    s.insert_str(0, "##");
                }
                if self.vocab.contains_key(&s) {
                    found = Some(s);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(s) => {
                    pieces.push(s);
                    start = end;
                }
                None => return vec![self.unk.clone()],
            }
        }
        pieces
    }
}

/// Word-to-piece alignment. Indices point into the piece sequence of the
/// sentence with the special begin/end markers removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubtokenAlignment {
    pub pieces: Vec<String>,
    pub words: Vec<Vec<usize>>,
}

impl SubtokenAlignment {
    /// Builds the alignment from a per-piece word index. Words that own no
    /// piece (truncated by the model) get an empty list.
    pub fn from_word_ids(pieces: Vec<String>, word_ids: &[usize], n_words: usize) -> Result<Self> {
        if pieces.len() != word_ids.len() {
            return Err(Error::data(format!(
                "{} pieces but {} word ids",
                pieces.len(),
                word_ids.len()
            )));
        }
        let mut words = vec![Vec::new(); n_words];
        for (p, &w) in word_ids.iter().enumerate() {
            let slot = words
                .get_mut(w)
                .ok_or_else(|| Error::data(format!("word id {w} out of range for {n_words} words")))?;
            slot.push(p);
        }
        Ok(SubtokenAlignment { pieces, words })
    }

    pub fn n_pieces(&self) -> usize {
        self.pieces.len()
    }
}

pub fn tokenize_align(words: &[&str], tokenizer: &WordPieceTokenizer) -> SubtokenAlignment {
    let mut pieces = Vec::new();
    let mut spans = Vec::with_capacity(words.len());
    for w in words {
        let mut p = tokenizer.tokenize_word(w);
        if p.is_empty() {
            log::warn!("word {w:?} produced no word pieces; using {}", tokenizer.unk);
            p.push(tokenizer.unk.clone());
        }
        spans.push((pieces.len()..pieces.len() + p.len()).collect());
        pieces.extend(p);
    }
    SubtokenAlignment {
        pieces,
        words: spans,
    }
}

/// Sums each word's piece states: `N_words x H`.
pub fn pool_subtokens(hidden: ArrayView2<'_, f64>, alignment: &SubtokenAlignment) -> Mat {
    let mut out = Mat::zeros((alignment.words.len(), hidden.ncols()));
    for (i, idx) in alignment.words.iter().enumerate() {
        let mut row = out.row_mut(i);
        for &p in idx {
            row += &hidden.row(p);
        }
    }
    out
}

/// `fc(sum of piece states)` per word.
pub fn pool_and_project(
    g: &mut Graph<'_>,
    hidden: ArrayView2<'_, f64>,
    alignment: &SubtokenAlignment,
    fc: &Linear,
) -> Var {
    let pooled = g.constant(pool_subtokens(hidden, alignment));
    fc.forward(g, pooled)
}

/// The trainable projection from provider width to encoder width.
pub fn external_fc(store: &mut ParamStore, hidden: usize, output: usize, rng: &mut impl Rng) -> Linear {
    Linear::new(store, "external.fc", hidden, output, true, rng)
}

pub trait ExternalProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Width of the vectors returned by [`word_vectors`](Self::word_vectors).
    fn dim(&self) -> usize;

    /// Batch hook called before a corpus is iterated.
    fn prepare(&self, _sentences: &[Sentence]) -> Result<()> {
        Ok(())
    }

    /// Pooled vectors, one row per word.
    fn word_vectors(&self, sentence: &Sentence) -> Result<Mat>;
}

/// Deterministic pseudo-random vector per (word, position).
#[derive(Clone, Debug)]
pub struct StubProvider {
    pub dim: usize,
    pub seed: u64,
}

impl StubProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        StubProvider { dim, seed }
    }
}

impl ExternalProvider for StubProvider {
    fn name(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn word_vectors(&self, sentence: &Sentence) -> Result<Mat> {
        let mut out = Mat::zeros((sentence.len(), self.dim));
        for (i, t) in sentence.tokens.iter().enumerate() {
            let key = fnv1a(&[
                &self.seed.to_le_bytes(),
                t.surface.as_bytes(),
                &(i as u64).to_le_bytes(),
            ]);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            for x in out.row_mut(i).iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        Ok(out)
    }
}

/// Vectors read from a versioned file:
///
/// ```text
/// #ctiner-precomputed v1 dim=4
/// s00000	0	0.1 0.2 0.3 0.4
/// s00000	1	...
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedProvider {
    dim: usize,
    sentences: HashMap<String, Mat>,
}

impl PrecomputedProvider {
    pub fn new(dim: usize, sentences: HashMap<String, Mat>) -> Self {
        PrecomputedProvider { dim, sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let dim: usize = header
            .strip_prefix(PRECOMPUTED_MAGIC)
            .and_then(|r| r.trim().strip_prefix("dim="))
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| bad(1, format!("expected header `{PRECOMPUTED_MAGIC} dim=<n>`")))?;
        let mut rows: HashMap<String, Vec<(usize, Vec<f64>)>> = HashMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(id), Some(idx), Some(vals), None) = (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad(i + 1, "expected `id<TAB>index<TAB>values`".into()));
            };
            let idx: usize = idx.parse().map_err(|e| bad(i + 1, format!("bad token index: {e}")))?;
            let vals: Vec<f64> = vals
                .split(' ')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(i + 1, format!("bad value: {e}")))?;
            if vals.len() != dim {
                return Err(bad(i + 1, format!("expected {dim} values, found {}", vals.len())));
            }
            rows.entry(id.to_string()).or_default().push((idx, vals));
        }
        let mut sentences = HashMap::new();
        for (id, mut toks) in rows {
            toks.sort_by_key(|t| t.0);
            if toks.iter().enumerate().any(|(k, t)| t.0 != k) {
                return Err(Error::data(format!(
                    "{}: sentence {id} has missing or duplicate token indices",
                    origin.display()
                )));
            }
            let mut m = Mat::zeros((toks.len(), dim));
            for (k, (_, v)) in toks.into_iter().enumerate() {
                m.row_mut(k).assign(&ndarray::Array1::from(v));
            }
            sentences.insert(id, m);
        }
        Ok(PrecomputedProvider { dim, sentences })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

impl ExternalProvider for PrecomputedProvider {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn word_vectors(&self, sentence: &Sentence) -> Result<Mat> {
        let m = self.sentences.get(&sentence.id).ok_or_else(|| {
            Error::ExternalUnavailable(format!("no precomputed vectors for sentence {}", sentence.id))
        })?;
        if m.nrows() != sentence.len() {
            return Err(Error::data(format!(
                "precomputed sentence {} has {} tokens, corpus has {}",
                sentence.id,
                m.nrows(),
                sentence.len()
            )));
        }
        Ok(m.clone())
    }
}

/// Writes every sentence's provider vectors in the precomputed format.
pub fn write_precomputed(
    provider: &dyn ExternalProvider,
    sentences: &[Sentence],
    path: &Path,
) -> Result<()> {
    provider.prepare(sentences)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{PRECOMPUTED_MAGIC} dim={}", provider.dim()).map_err(io)?;
    for s in sentences {
        let m = provider.word_vectors(s)?;
        for (k, row) in m.rows().into_iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}\t{k}\t{}", s.id, vals.join(" ")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Directory holding the pretrained base model (HuggingFace layout).
    pub base_model: Option<PathBuf>,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub uncased: bool,
    /// Keep provider weights fixed during main training.
    pub frozen: bool,
    pub max_len: usize,
    pub python: String,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            base_model: None,
            hidden_dim: 768,
            epochs: 100,
            batch_size: 32,
            lr: 5e-5,
            dropout: 0.5,
            warmup: 0.002,
            weight_decay: 1e-5,
            lr_decay: 1e-5,
            uncased: true,
            frozen: true,
            max_len: 512,
            python: "python3".into(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct StateRecord {
    words: Vec<String>,
    pieces: Vec<String>,
    word_ids: Vec<usize>,
    states: Vec<Vec<f64>>,
}

/// A finetuned contextual model. Hidden states are computed in batches by
/// the helper script and cached per distinct word sequence.
pub struct ContextualLmProvider {
    model_dir: PathBuf,
    work_dir: PathBuf,
    config: FinetuneConfig,
    tokenizer: Option<WordPieceTokenizer>,
    cache: RwLock<HashMap<Vec<String>, Mat>>,
}

impl ContextualLmProvider {
    /// Opens a model directory (base or finetuned). `work_dir` receives the
    /// helper script and intermediate files.
    pub fn open(model_dir: &Path, work_dir: &Path, config: &FinetuneConfig) -> Result<Self> {
        let cfg_path = model_dir.join("config.json");
        let text = fs::read_to_string(&cfg_path).map_err(|_| unavailable(model_dir))?;
        let meta: serde_json::Value = serde_json::from_str(&text)?;
        let hidden = meta.get("hidden_size").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        if hidden != config.hidden_dim {
            return Err(Error::config(format!(
                "model at {} has hidden size {hidden}, config says hidden_dim={}",
                model_dir.display(),
                config.hidden_dim
            )));
        }
        let vocab = model_dir.join("vocab.txt");
        let tokenizer = if vocab.exists() {
            Some(WordPieceTokenizer::load(&vocab, config.uncased)?)
        } else {
            None
        };
        fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
        Ok(ContextualLmProvider {
            model_dir: model_dir.to_path_buf(),
            work_dir: work_dir.to_path_buf(),
            config: config.clone(),
            tokenizer,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn model_dir(&self) -> &Path {
        &self.model_dir
    }

    fn pool_record(&self, rec: StateRecord) -> Result<(Vec<String>, Mat)> {
        let h = self.config.hidden_dim;
        if rec.states.len() != rec.pieces.len() || rec.states.iter().any(|s| s.len() != h) {
            return Err(Error::data("hidden-state record has inconsistent shape"));
        }
        let n_words = rec.words.len();
        let alignment = SubtokenAlignment::from_word_ids(rec.pieces, &rec.word_ids, n_words)?;
        if let Some(tok) = &self.tokenizer {
            let refs: Vec<&str> = rec.words.iter().map(|s| s.as_str()).collect();
            let ours = tokenize_align(&refs, tok);
            if ours.pieces != alignment.pieces {
                log::warn!("word-piece split differs from the model tokenizer for {:?}", rec.words);
            }
        }
        let flat: Vec<f64> = rec.states.into_iter().flatten().collect();
        let hidden = Mat::from_shape_vec((alignment.n_pieces(), h), flat).expect("shape checked");
        Ok((rec.words, pool_subtokens(hidden.view(), &alignment)))
    }

    /// Loads a hidden-state file written by the helper into the cache.
    pub fn load_states(&self, path: &Path) -> Result<usize> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut n = 0;
        let mut cache = self.cache.write().expect("cache lock");
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: StateRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let (words, pooled) = self.pool_record(rec)?;
            cache.insert(words, pooled);
            n += 1;
        }
        Ok(n)
    }

    fn encode(&self, sentences: &[&Sentence]) -> Result<()> {
        let input = self.work_dir.join("encode_input.jsonl");
        let output = self.work_dir.join("encode_states.jsonl");
        let mut text = String::new();
        for s in sentences {
            let words: Vec<&str> = s.words().collect();
            text.push_str(&serde_json::json!({"id": s.id, "words": words}).to_string());
            text.push('\n');
        }
        fs::write(&input, text).map_err(|e| Error::io(&input, e))?;
        let mut args = vec![
            "encode".to_string(),
            "--model".into(),
            self.model_dir.display().to_string(),
            "--input".into(),
            input.display().to_string(),
            "--out".into(),
            output.display().to_string(),
            "--batch-size".into(),
            self.config.batch_size.to_string(),
            "--max-len".into(),
            self.config.max_len.to_string(),
        ];
        if !self.config.uncased {
            args.push("--cased".into());
        }
        run_helper(&self.config.python, &self.work_dir, &args)?;
        self.load_states(&output)?;
        Ok(())
    }
}

impl ExternalProvider for ContextualLmProvider {
    fn name(&self) -> &str {
        "contextual-lm"
    }

    fn dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn prepare(&self, sentences: &[Sentence]) -> Result<()> {
        let missing: Vec<&Sentence> = {
            let cache = self.cache.read().expect("cache lock");
            sentences
                .iter()
                .filter(|s| !cache.contains_key(&key(s)))
                .collect()
        };
        if missing.is_empty() {
            return Ok(());
        }
        self.encode(&missing)
    }

    fn word_vectors(&self, sentence: &Sentence) -> Result<Mat> {
        let k = key(sentence);
        if let Some(m) = self.cache.read().expect("cache lock").get(&k) {
            return Ok(m.clone());
        }
        self.encode(&[sentence])?;
        self.cache
            .read()
            .expect("cache lock")
            .get(&k)
            .cloned()
            .ok_or_else(|| Error::ExternalUnavailable("helper returned no states".into()))
    }
}

fn key(s: &Sentence) -> Vec<String> {
    s.words().map(str::to_string).collect()
}

fn unavailable(model: &Path) -> Error {
    Error::ExternalUnavailable(format!(
        "no pretrained model at {}; set external.provider = \"stub\" or \"precomputed\" to run without it",
        model.display()
    ))
}

fn run_helper(python: &str, work_dir: &Path, args: &[String]) -> Result<()> {
    let script = work_dir.join("finetune_bert.py");
    fs::write(&script, HELPER_SCRIPT).map_err(|e| Error::io(&script, e))?;
    log::info!("running {python} {} {}", script.display(), args.join(" "));
    let out = Command::new(python)
        .arg(&script)
        .args(args)
        .output()
        .map_err(|e| Error::ExternalUnavailable(format!("cannot run {python}: {e}")))?;
    for line in String::from_utf8_lossy(&out.stdout).lines() {
        log::info!("{line}");
    }
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        let tail: Vec<&str> = stderr.lines().rev().take(5).collect();
        let tail: Vec<&str> = tail.into_iter().rev().collect();
        return Err(Error::ExternalUnavailable(format!(
            "helper failed ({}): {}",
            out.status,
            tail.join(" | ")
        )));
    }
    Ok(())
}

/// Finetunes the base model for token classification on `train`, keeping
/// the checkpoint with the best validation F1, and returns a provider over it.
pub fn finetune_provider(
    train: &LabeledCorpus,
    valid: &LabeledCorpus,
    labels: &LabelSet,
    config: &FinetuneConfig,
    work_dir: &Path,
    seed: u64,
) -> Result<ContextualLmProvider> {
    let base = config
        .base_model
        .as_deref()
        .ok_or_else(|| unavailable(Path::new("<unset external.finetune.base_model>")))?;
    if !base.join("config.json").exists() {
        return Err(unavailable(base));
    }
    fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = work_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let train_p = write("finetune_train.conll", write_conll(&train.sentences, None))?;
    let valid_p = write("finetune_valid.conll", write_conll(&valid.sentences, None))?;
    let labels_p = write("finetune_labels.txt", labels.labels().join("\n") + "\n")?;
    let out = work_dir.join("finetuned");
    let mut args: Vec<String> = vec![
        "finetune".into(),
        "--model".into(),
        base.display().to_string(),
        "--train".into(),
        train_p.display().to_string(),
        "--valid".into(),
        valid_p.display().to_string(),
        "--labels".into(),
        labels_p.display().to_string(),
        "--out".into(),
        out.display().to_string(),
        "--epochs".into(),
        config.epochs.to_string(),
        "--batch-size".into(),
        config.batch_size.to_string(),
        "--lr".into(),
        config.lr.to_string(),
        "--dropout".into(),
        config.dropout.to_string(),
        "--warmup".into(),
        config.warmup.to_string(),
        "--weight-decay".into(),
        config.weight_decay.to_string(),
        "--lr-decay".into(),
        config.lr_decay.to_string(),
        "--max-len".into(),
        config.max_len.to_string(),
        "--seed".into(),
        (seed % (1 << 31)).to_string(),
    ];
    if !config.uncased {
        args.push("--cased".into());
    }
    run_helper(&config.python, work_dir, &args)?;
    ContextualLmProvider::open(&out, work_dir, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pos_tagger::RuleTagger;
    use ndarray::array;

    fn tok() -> WordPieceTokenizer {
        WordPieceTokenizer::from_tokens(
            &["[PAD]", "[UNK]", "the", "gp", "##u", "apt", "##19", "used", ".", "exe", "pe", "##800"],
            true,
        )
    }

    #[test]
    fn gpu_splits_into_two_pieces_of_one_word() {
        let a = tokenize_align(&["gpu"], &tok());
        assert_eq!(a.pieces, vec!["gp", "##u"]);
        assert_eq!(a.words, vec![vec![0, 1]]);
    }

    #[test]
    fn alignment_partitions_pieces() {
        let a = tokenize_align(&["the", "APT19", "used", "PE800.exe", "zzz", ""], &tok());
        assert_eq!(a.words[0].len(), 1);
        assert_eq!(a.words[1].len(), 2);
        assert_eq!(a.words[3], vec![4, 5, 6, 7]);
        assert_eq!(a.pieces[8], "[UNK]");
        assert_eq!(a.pieces[9], "[UNK]");
        let flat: Vec<usize> = a.words.iter().flatten().copied().collect();
        assert_eq!(flat, (0..a.n_pieces()).collect::<Vec<_>>());
        assert!(a.words.iter().all(|w| !w.is_empty()));
    }

    #[test]
    fn pooling_sums_and_duplicates_double() {
        let h = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let a = SubtokenAlignment {
            pieces: vec!["a".into(), "b".into(), "c".into()],
            words: vec![vec![0, 1], vec![2]],
        };
        let p = pool_subtokens(h.view(), &a);
        assert_eq!(p, array![[4.0, 6.0], [5.0, 6.0]]);
        let dup = SubtokenAlignment {
            words: vec![vec![2, 2]],
            ..a.clone()
        };
        assert_eq!(pool_subtokens(h.view(), &dup), array![[10.0, 12.0]]);
        let perm = SubtokenAlignment {
            words: vec![vec![1, 0], vec![2]],
            ..a
        };
        assert_eq!(pool_subtokens(h.view(), &perm), p);
    }

    #[test]
    fn pool_and_project_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let fc = external_fc(&mut store, 6, 5, &mut rng);
        store.get_mut(fc.bias.unwrap()).assign(&crate::nn::uniform(1, 5, 1.0, &mut rng));
        let hidden = crate::nn::uniform(7, 6, 1.0, &mut rng);
        let a = SubtokenAlignment {
            pieces: (0..7).map(|i| i.to_string()).collect(),
            words: vec![vec![0], vec![1, 2, 3], vec![4], vec![5, 6]],
        };
        let mut g = Graph::new(&store);
        let out = pool_and_project(&mut g, hidden.view(), &a, &fc);
        let w = store.get(fc.weight);
        let b = store.get(fc.bias.unwrap());
        for (i, idx) in a.words.iter().enumerate() {
            for o in 0..5 {
                let mut acc = b[[0, o]];
                for k in 0..6 {
                    let mut s = 0.0;
                    for &p in idx {
                        s += hidden[[p, k]];
                    }
                    acc += s * w[[k, o]];
                }
                assert!((g.value(out)[[i, o]] - acc).abs() < 1e-6);
            }
        }
    }

    fn sentence(words: &[&str]) -> Sentence {
        Sentence::from_words("s00000", words, &RuleTagger)
    }

    #[test]
    fn stub_is_deterministic_per_word_and_position() {
        let p = StubProvider::new(16, 3);
        let a = p.word_vectors(&sentence(&["x", "y", "x"])).unwrap();
        let b = p.word_vectors(&sentence(&["x", "y", "x"])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (3, 16));
        assert_ne!(a.row(0), a.row(2));
        let c = StubProvider::new(16, 4).word_vectors(&sentence(&["x"])).unwrap();
        assert_ne!(a.row(0), c.row(0));
    }

    #[test]
    fn precomputed_roundtrip_is_bit_exact() {
        let stub = StubProvider::new(5, 1);
        let sents = vec![
            sentence(&["a", "b"]),
            Sentence::from_words("s00001", &["c", "d", "e"], &RuleTagger),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.tsv");
        write_precomputed(&stub, &sents, &path).unwrap();
        let pre = PrecomputedProvider::load(&path).unwrap();
        assert_eq!(pre.dim(), 5);
        for s in &sents {
            assert_eq!(pre.word_vectors(s).unwrap(), stub.word_vectors(s).unwrap());
        }
        let missing = Sentence::from_words("nope", &["a"], &RuleTagger);
        assert!(matches!(pre.word_vectors(&missing), Err(Error::ExternalUnavailable(_))));
    }

    #[test]
    fn precomputed_rejects_bad_files() {
        let p = Path::new("mem");
        assert!(PrecomputedProvider::parse("", p).is_err());
        assert!(PrecomputedProvider::parse("#other\n", p).is_err());
        let e = PrecomputedProvider::parse(&format!("{PRECOMPUTED_MAGIC} dim=2\ns\t0\t1 2 3\n"), p);
        assert!(matches!(e, Err(Error::Parse { line: 2, .. })));
        let e = PrecomputedProvider::parse(&format!("{PRECOMPUTED_MAGIC} dim=1\ns\t1\t1\n"), p);
        assert!(e.is_err());
    }

    #[test]
    fn missing_base_model_is_reported_as_unavailable() {
        let c = LabeledCorpus {
            sentences: vec![sentence(&["a"])],
            label_inventory: vec![],
            split: crate::corpus::Split::Train,
        };
        let dir = tempfile::tempdir().unwrap();
        let cfg = FinetuneConfig::default();
        let r = finetune_provider(&c, &c, &LabelSet::from_types::<&str>(&[]), &cfg, dir.path(), 0);
        assert!(matches!(r, Err(Error::ExternalUnavailable(_))));
        let cfg = FinetuneConfig {
            base_model: Some(dir.path().join("absent")),
            ..cfg
        };
        let r = finetune_provider(&c, &c, &LabelSet::from_types::<&str>(&[]), &cfg, dir.path(), 0);
        assert!(matches!(r, Err(Error::ExternalUnavailable(_))));
    }
}
