//! CoNLL-style BIO corpora: loading, label repair, splitting and vocabularies.
//!
//! Files are UTF-8, one token per line, whitespace-separated columns, with
//! blank lines between sentences. Two columns are `surface label`; with three
//! or more the second column is the POS tag and the last is the label.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pos_tagger::{PosTagger, RuleTagger};

pub const DNRTI_TYPES: [&str; 13] = [
    "HackOrg", "OffAct", "SamFile", "SecTeam", "Tool", "Time", "Purp", "Area", "Idus", "Org",
    "Way", "Exp", "Features",
];

pub const MALWARETEXTDB_TYPES: [&str; 3] = ["Action", "Entity", "Modifier"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub pos_tag: String,
    pub gold_label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.surface.as_str())
    }

    pub fn labels(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.gold_label.as_str()).collect()
    }

    /// Builds an unlabeled sentence (all `O`) from raw words.
    pub fn from_words(id: impl Into<String>, words: &[&str], tagger: &dyn PosTagger) -> Self {
        let tags = tagger.tag(words);
        Sentence {
            id: id.into(),
            tokens: words
                .iter()
                .zip(tags)
                .map(|(w, p)| Token {
                    surface: (*w).to_string(),
                    pos_tag: p,
                    gold_label: "O".to_string(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub sentences: Vec<Sentence>,
    /// Entity type names in first-seen (or scheme) order.
    pub label_inventory: Vec<String>,
    pub split: Split,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn entity_count(&self) -> usize {
        self.sentences
            .iter()
            .map(|s| extract_entities(&s.labels()).len())
            .sum()
    }

    fn subset(&self, idx: &[usize], split: Split) -> LabeledCorpus {
        LabeledCorpus {
            sentences: idx.iter().map(|&i| self.sentences[i].clone()).collect(),
            label_inventory: self.label_inventory.clone(),
            split,
        }
    }
}

/// Which entity types are legal and what to do with scheme violations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    /// `None` accepts any type and builds the inventory from the data.
    pub inventory: Option<Vec<String>>,
    /// Errors on unknown types and orphan `I-` labels instead of repairing.
    pub strict: bool,
}

impl LabelScheme {
    pub fn open() -> Self {
        LabelScheme {
            inventory: None,
            strict: false,
        }
    }

    pub fn dnrti() -> Self {
        LabelScheme {
            inventory: Some(DNRTI_TYPES.iter().map(|s| s.to_string()).collect()),
            strict: false,
        }
    }

    pub fn malwaretextdb() -> Self {
        LabelScheme {
            inventory: Some(MALWARETEXTDB_TYPES.iter().map(|s| s.to_string()).collect()),
            strict: false,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "open" => Ok(Self::open()),
            "dnrti" => Ok(Self::dnrti()),
            "malwaretextdb" | "malware" => Ok(Self::malwaretextdb()),
            other => Err(Error::config(format!(
                "unknown label scheme {other:?} (expected open, dnrti or malwaretextdb)"
            ))),
        }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }
}

/// A parsed BIO label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bio<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Bio<'a> {
    pub fn parse(label: &'a str) -> Option<Self> {
        if label == "O" {
            return Some(Bio::Outside);
        }
        let (prefix, ty) = label.split_once('-')?;
        if ty.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(Bio::Begin(ty)),
            "I" => Some(Bio::Inside(ty)),
            _ => None,
        }
    }

    pub fn entity_type(&self) -> Option<&'a str> {
        match self {
            Bio::Outside => None,
            Bio::Begin(t) | Bio::Inside(t) => Some(t),
        }
    }
}

/// Loads a corpus, tagging POS with the bundled rule tagger where the file has no POS column.
pub fn load_conll(path: &Path, scheme: &LabelScheme) -> Result<LabeledCorpus> {
    load_conll_with(path, scheme, &RuleTagger)
}

pub fn load_conll_with(
    path: &Path,
    scheme: &LabelScheme,
    tagger: &dyn PosTagger,
) -> Result<LabeledCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = parse_conll(&text, path, scheme, tagger)?;
    log::info!(
        "loaded {}: {} sentences, {} tokens, {} entities, {} types",
        path.display(),
        corpus.len(),
        corpus.token_count(),
        corpus.entity_count(),
        corpus.label_inventory.len()
    );
    Ok(corpus)
}

/// Parses CoNLL text; `origin` is only used in error messages.
pub fn parse_conll(
    text: &str,
    origin: &Path,
    scheme: &LabelScheme,
    tagger: &dyn PosTagger,
) -> Result<LabeledCorpus> {
    struct Raw {
        surface: String,
        pos: Option<String>,
        label: String,
        line: usize,
    }

    let mut groups: Vec<Vec<Raw>> = Vec::new();
    let mut current: Vec<Raw> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with("-DOCSTART-") {
            if !current.is_empty() {
                groups.push(std::mem::take(&mut current));
            }
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                message: format!("expected at least 2 columns, found {}", cols.len()),
            });
        }
        let label = cols[cols.len() - 1];
        if Bio::parse(label).is_none() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                message: format!("unparseable BIO label {label:?}"),
            });
        }
        current.push(Raw {
            surface: cols[0].to_string(),
            pos: (cols.len() >= 3).then(|| cols[1].to_string()),
            label: label.to_string(),
            line: lineno,
        });
    }
    if !current.is_empty() {
        groups.push(current);
    }
    if groups.is_empty() {
        return Err(Error::NoSentences(origin.to_path_buf()));
    }

    let mut inventory: Vec<String> = scheme.inventory.clone().unwrap_or_default();
    let mut repairs = 0usize;
    let mut sentences = Vec::with_capacity(groups.len());
    for (si, group) in groups.into_iter().enumerate() {
        let mut labels: Vec<String> = group.iter().map(|r| r.label.clone()).collect();
        for (r, label) in group.iter().zip(&labels) {
            let ty = Bio::parse(label).and_then(|b| b.entity_type());
            if let Some(ty) = ty {
                if !inventory.iter().any(|t| t == ty) {
                    if scheme.strict && scheme.inventory.is_some() {
                        return Err(Error::Parse {
                            path: origin.to_path_buf(),
                            line: r.line,
                            message: format!("unknown entity type {ty:?}"),
                        });
                    }
                    if scheme.inventory.is_some() {
                        log::warn!("{}:{}: entity type {ty:?} not in scheme", origin.display(), r.line);
                    }
                    inventory.push(ty.to_string());
                }
            }
        }
        let fixed = repair_bio(&labels);
        for (k, (old, new)) in labels.iter().zip(&fixed).enumerate() {
            if old != new {
                if scheme.strict {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line: group[k].line,
                        message: format!("{old} has no legal predecessor"),
                    });
                }
                repairs += 1;
            }
        }
        labels = fixed;

        let needs_tags = group.iter().any(|r| r.pos.is_none());
        let tagged: Vec<String> = if needs_tags {
            let words: Vec<&str> = group.iter().map(|r| r.surface.as_str()).collect();
            tagger.tag(&words)
        } else {
            Vec::new()
        };
        let tokens = group
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(k, (r, label))| Token {
                surface: r.surface,
                pos_tag: r.pos.unwrap_or_else(|| tagged[k].clone()),
                gold_label: label,
            })
            .collect();
        sentences.push(Sentence {
            id: format!("s{si:05}"),
            tokens,
        });
    }
    if repairs > 0 {
        log::warn!("{}: repaired {repairs} orphan I- labels", origin.display());
    }
    Ok(LabeledCorpus {
        sentences,
        label_inventory: inventory,
        split: Split::Full,
    })
}

/// Rewrites every `I-T` without a legal predecessor (`B-T` or `I-T`) to `B-T`.
pub fn repair_bio<S: AsRef<str>>(labels: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(labels.len());
    for label in labels {
        let label = label.as_ref();
        match Bio::parse(label) {
            Some(Bio::Inside(ty)) => {
                let legal = out
                    .last()
                    .and_then(|p| Bio::parse(p))
                    .and_then(|b| b.entity_type())
                    .is_some_and(|prev| prev == ty);
                if legal {
                    out.push(label.to_string());
                } else {
                    out.push(format!("B-{ty}"));
                }
            }
            _ => out.push(label.to_string()),
        }
    }
    out
}

/// A typed entity span with inclusive token boundaries.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
    pub sentence: String,
}

impl EntitySpan {
    pub fn new(entity_type: impl Into<String>, start: usize, end: usize) -> Self {
        EntitySpan {
            entity_type: entity_type.into(),
            start,
            end,
            sentence: String::new(),
        }
    }

    pub fn in_sentence(mut self, id: impl Into<String>) -> Self {
        self.sentence = id.into();
        self
    }
}

/// Maximal `B`-led runs of one type. `I-T` continues only a run of type `T`;
/// an orphan `I-T` starts a new span (the repaired reading).
pub fn extract_entities<S: AsRef<str>>(labels: &[S]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, label) in labels.iter().enumerate() {
        let bio = Bio::parse(label.as_ref()).unwrap_or(Bio::Outside);
        match bio {
            Bio::Outside => {
                if let Some((ty, start)) = open.take() {
                    spans.push(EntitySpan::new(ty, start, i - 1));
                }
            }
            Bio::Begin(ty) => {
                if let Some((t, start)) = open.take() {
                    spans.push(EntitySpan::new(t, start, i - 1));
                }
                open = Some((ty.to_string(), i));
            }
            Bio::Inside(ty) => match &open {
                Some((t, _)) if t == ty => {}
                _ => {
                    if let Some((t, start)) = open.take() {
                        spans.push(EntitySpan::new(t, start, i - 1));
                    }
                    open = Some((ty.to_string(), i));
                }
            },
        }
    }
    if let Some((ty, start)) = open {
        spans.push(EntitySpan::new(ty, start, labels.len() - 1));
    }
    spans
}

/// Encodes non-overlapping spans as a BIO sequence of length `len`.
pub fn spans_to_bio(spans: &[EntitySpan], len: usize) -> Vec<String> {
    let mut out = vec!["O".to_string(); len];
    for s in spans {
        out[s.start] = format!("B-{}", s.entity_type);
        for label in &mut out[s.start + 1..=s.end] {
            *label = format!("I-{}", s.entity_type);
        }
    }
    out
}

/// Sizes for a `(train, valid, test)` split of `n` items.
///
/// Each part gets `floor(ratio * n)`; leftover items go one at a time to the
/// parts with the largest fractional remainders, ties resolved in the order
/// train, valid, test.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let r = [ratios.0, ratios.1, ratios.2];
    let exact: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut sizes = [0usize; 3];
    for k in 0..3 {
        sizes[k] = exact[k].floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut k = 0;
    while left > 0 {
        sizes[order[k % 3]] += 1;
        left -= 1;
        k += 1;
    }
    sizes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Re-materializes the three parts from the corpus they were cut from.
    pub fn apply(
        &self,
        corpus: &LabeledCorpus,
    ) -> Result<(LabeledCorpus, LabeledCorpus, LabeledCorpus)> {
        let by_id: HashMap<&str, usize> = corpus
            .sentences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let pick = |ids: &[String], split| -> Result<LabeledCorpus> {
            let idx = ids
                .iter()
                .map(|id| {
                    by_id.get(id.as_str()).copied().ok_or_else(|| {
                        Error::data(format!("split manifest references unknown sentence {id}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(corpus.subset(&idx, split))
        };
        Ok((
            pick(&self.train, Split::Train)?,
            pick(&self.valid, Split::Valid)?,
            pick(&self.test, Split::Test)?,
        ))
    }
}

/// Random sentence-level partition, deterministic for a given seed.
pub fn split_corpus(
    corpus: &LabeledCorpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledCorpus, LabeledCorpus, LabeledCorpus)> {
    let manifest = split_manifest(corpus, ratios, seed)?;
    manifest.apply(corpus)
}

pub fn split_manifest(
    corpus: &LabeledCorpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifest> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || [ratios.0, ratios.1, ratios.2].iter().any(|r| *r < 0.0) {
        return Err(Error::config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(Error::data(format!(
            "cannot split a corpus of {n} sentences (need at least 3)"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let [a, b, _] = split_sizes(n, ratios);
    let mut parts = [idx[..a].to_vec(), idx[a..a + b].to_vec(), idx[a + b..].to_vec()];
    for p in &mut parts {
        p.sort_unstable();
    }
    let ids = |p: &[usize]| -> Vec<String> {
        p.iter().map(|&i| corpus.sentences[i].id.clone()).collect()
    };
    Ok(SplitManifest {
        seed,
        ratios,
        train: ids(&parts[0]),
        valid: ids(&parts[1]),
        test: ids(&parts[2]),
    })
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// A symbol table with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "SymbolTableData")]
pub struct SymbolTable {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    counts: Vec<usize>,
}

#[derive(Deserialize)]
struct SymbolTableData {
    symbols: Vec<String>,
    counts: Vec<usize>,
}

impl From<SymbolTableData> for SymbolTable {
    fn from(d: SymbolTableData) -> Self {
        let mut t = SymbolTable {
            symbols: d.symbols,
            index: HashMap::new(),
            counts: d.counts,
        };
        t.rebuild_index();
        t
    }
}

impl Default for SymbolTable {
    fn default() -> Self {
        Self::new()
    }
}

impl SymbolTable {
    pub fn new() -> Self {
        let mut t = SymbolTable {
            symbols: Vec::new(),
            index: HashMap::new(),
            counts: Vec::new(),
        };
        t.insert(PAD, 0);
        t.insert(UNK, 0);
        t
    }

    fn insert(&mut self, symbol: &str, count: usize) -> usize {
        if let Some(&i) = self.index.get(symbol) {
            return i;
        }
        let i = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.counts.push(count);
        self.index.insert(symbol.to_string(), i);
        i
    }

    pub fn from_counts(counts: &BTreeMap<String, usize>, min_count: usize) -> Self {
        let mut t = SymbolTable::new();
        let mut items: Vec<(&String, &usize)> =
            counts.iter().filter(|(_, c)| **c >= min_count).collect();
        items.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        for (s, c) in items {
            t.insert(s, *c);
        }
        t
    }

    pub fn from_symbols<S: AsRef<str>>(symbols: &[S]) -> Self {
        let mut t = SymbolTable::new();
        for s in symbols {
            t.insert(s.as_ref(), 0);
        }
        t
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied().filter(|&i| i > UNK_INDEX)
    }

    pub fn get_or_unk(&self, symbol: &str) -> usize {
        self.get(symbol).unwrap_or(UNK_INDEX)
    }

    pub fn symbol(&self, i: usize) -> &str {
        &self.symbols[i]
    }

    pub fn count(&self, i: usize) -> usize {
        self.counts[i]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= 2
    }

    /// Non-reserved symbols in index order.
    pub fn symbols(&self) -> &[String] {
        &self.symbols[2..]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: SymbolTable,
    pub chars: SymbolTable,
    pub pos: SymbolTable,
}

impl Vocabulary {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Word, character and POS vocabularies over the training split.
pub fn build_vocab(train: &LabeledCorpus, min_count: usize) -> Vocabulary {
    let mut words = BTreeMap::new();
    let mut chars = BTreeMap::new();
    let mut pos = BTreeMap::new();
    for t in train.sentences.iter().flat_map(|s| &s.tokens) {
        *words.entry(t.surface.clone()).or_insert(0) += 1;
        *pos.entry(t.pos_tag.clone()).or_insert(0) += 1;
        for c in t.surface.chars() {
            *chars.entry(c.to_string()).or_insert(0) += 1;
        }
    }
    Vocabulary {
        words: SymbolTable::from_counts(&words, min_count.max(1)),
        chars: SymbolTable::from_counts(&chars, 1),
        pos: SymbolTable::from_counts(&pos, 1),
    }
}

/// The BIO label set: `O` first, then `B-T`, `I-T` per entity type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn from_types<S: AsRef<str>>(types: &[S]) -> Self {
        let mut labels = vec!["O".to_string()];
        for t in types {
            labels.push(format!("B-{}", t.as_ref()));
            labels.push(format!("I-{}", t.as_ref()));
        }
        LabelSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn entity_types(&self) -> Vec<String> {
        self.labels
            .iter()
            .filter_map(|l| l.strip_prefix("B-").map(str::to_string))
            .collect()
    }
}

/// Distinct entity types observed in a set of label sequences.
pub fn observed_types<'a>(labels: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    labels
        .into_iter()
        .filter_map(|l| Bio::parse(l).and_then(|b| b.entity_type()).map(str::to_string))
        .collect()
}

/// `surface pos gold` lines, with a fourth `pred` column when predictions are given.
pub fn write_conll(sentences: &[Sentence], pred: Option<&[Vec<String>]>) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        for (k, t) in s.tokens.iter().enumerate() {
            out.push_str(&t.surface);
            out.push(' ');
            out.push_str(&t.pos_tag);
            out.push(' ');
            out.push_str(&t.gold_label);
            if let Some(p) = pred {
                out.push(' ');
                out.push_str(&p[i][k]);
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
