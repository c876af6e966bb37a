//! Run stages over a run directory, plus an in-memory `Experiment` that
//! bundles every resource a model needs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::checkpoint::Checkpoint;
use crate::config::{ProviderKind, RunConfig};
use crate::corpus::{
    build_vocab, load_conll, split_manifest, LabelSet, LabeledCorpus, Sentence, SplitManifest, Vocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::external::{finetune_provider, ContextualLmProvider, ExternalProvider, PrecomputedProvider, StubProvider};
use crate::features::pos::pos_cbow_config;
use crate::features::{pretrain_pos_embeddings, PosEmbeddingTable, WordEmbeddingTable};
use crate::internal::{knn_neighbors, train_domain_embeddings, DomainEmbeddingModel, HsaTable, InternalMode, NeighborCache};
use crate::model::{Augmentation, NerModel, Switches};
use crate::nn::derive_seed;
use crate::pos_tagger::{PosTagger, RuleTagger};
use crate::training::{
    run_ablation, train_model, write_history, AblationTable, RunManifest, TrainConfig, TrainOutcome,
};
use crate::word2vec::VectorTable;

pub const SPLITS: &str = "splits.json";
pub const VOCAB: &str = "vocab.json";
pub const LABELS: &str = "labels.json";
pub const POS_VECTORS: &str = "pos_vectors.txt";
pub const DOMAIN_VECTORS: &str = "domain_vectors.txt";
pub const NEIGHBORS: &str = "neighbors.txt";
pub const CHECKPOINT: &str = "model.ckpt";
pub const MANIFEST: &str = "manifest.json";
pub const HISTORY: &str = "history.jsonl";
pub const METRICS: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const PREDICTIONS: &str = "predictions.conll";
pub const ABLATION: &str = "ablation.jsonl";
pub const ABLATION_TABLE: &str = "ablation.txt";
const EXTERNAL_DIR: &str = "external";

/// A run's output directory. `hint` holds the flags that reproduce the
/// current invocation and is appended to suggested commands.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub hint: String,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        RunDir {
            root: root.into(),
            hint: hint.into(),
        }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// The artifact path, or a `MissingArtifact` error naming `command`.
    pub fn require(&self, name: &str, command: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                command: format!("ctiner {command} {}", self.hint).trim_end().to_string(),
            })
        }
    }

    pub fn external_dir(&self) -> PathBuf {
        self.path(EXTERNAL_DIR)
    }
}

pub fn load_corpus(cfg: &RunConfig) -> Result<LabeledCorpus> {
    let path = cfg
        .dataset
        .path
        .as_deref()
        .ok_or_else(|| Error::config("dataset.path is not set"))?;
    load_conll(path, &cfg.dataset.label_scheme()?)
}

pub fn make_split(cfg: &RunConfig, corpus: &LabeledCorpus) -> Result<SplitManifest> {
    split_manifest(corpus, cfg.dataset.ratios(), derive_seed(cfg.seed, "split"))
}

pub fn pretrain_pos(cfg: &RunConfig, train: &LabeledCorpus) -> Result<PosEmbeddingTable> {
    let mut c = pos_cbow_config(derive_seed(cfg.seed, "pos"));
    c.dim = cfg.model.features.pos_pretrain_dim;
    c.window = cfg.pos.window;
    c.epochs = cfg.pos.epochs;
    c.negative = cfg.pos.negative;
    let seqs: Vec<Vec<&str>> = train
        .sentences
        .iter()
        .map(|s| s.tokens.iter().map(|t| t.pos_tag.as_str()).collect())
        .collect();
    pretrain_pos_embeddings(&seqs, &c)
}

/// Sentences for the domain embeddings: the configured unlabeled corpus or
/// the surface text of the labeled corpus.
pub fn domain_text(cfg: &RunConfig, corpus: &LabeledCorpus) -> Result<Vec<Vec<String>>> {
    match &cfg.dataset.domain_corpus {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(text
                .lines()
                .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .filter(|s| !s.is_empty())
                .collect())
        }
        None => Ok(corpus
            .sentences
            .iter()
            .map(|s| s.words().map(str::to_string).collect())
            .collect()),
    }
}

pub fn pretrain_domain(cfg: &RunConfig, text: &[Vec<String>]) -> Result<DomainEmbeddingModel> {
    train_domain_embeddings(text, &cfg.model.internal.cbow(derive_seed(cfg.seed, "domain")))
}

pub fn compute_neighbors(cfg: &RunConfig, model: &DomainEmbeddingModel) -> Result<NeighborCache> {
    knn_neighbors(model, cfg.model.internal.k)
}

fn check_cache_k(cfg: &RunConfig, cache: &NeighborCache, dir: Option<&RunDir>) -> Result<()> {
    if cache.k != cfg.model.internal.k {
        let redo = dir
            .map(|d| format!("; rerun `ctiner precompute-neighbors {}`", d.hint))
            .unwrap_or_default();
        return Err(Error::config(format!(
            "neighbour cache holds K = {}, config asks for K = {}{redo}",
            cache.k, cfg.model.internal.k
        )));
    }
    Ok(())
}

/// Opens the configured external provider. The `lm` kind finetunes the base
/// model into `work_dir` unless a finetuned `model_dir` is configured or a
/// previous finetuning result is already there.
pub fn open_external(
    cfg: &RunConfig,
    train: &LabeledCorpus,
    valid: &LabeledCorpus,
    labels: &LabelSet,
    work_dir: &Path,
    allow_finetune: bool,
) -> Result<Arc<dyn ExternalProvider>> {
    let e = &cfg.external;
    Ok(match e.provider {
        ProviderKind::Stub => Arc::new(StubProvider::new(e.stub_dim, derive_seed(cfg.seed, "external"))),
        ProviderKind::Precomputed => {
            let p = e
                .precomputed
                .as_deref()
                .ok_or_else(|| Error::config("external.precomputed is not set"))?;
            Arc::new(PrecomputedProvider::load(p)?)
        }
        ProviderKind::Lm => {
            if let Some(dir) = &e.model_dir {
                Arc::new(ContextualLmProvider::open(dir, work_dir, &e.finetune)?)
            } else {
                let done = work_dir.join("finetuned");
                if done.join("config.json").exists() {
                    Arc::new(ContextualLmProvider::open(&done, work_dir, &e.finetune)?)
                } else if allow_finetune {
                    Arc::new(finetune_provider(
                        train,
                        valid,
                        labels,
                        &e.finetune,
                        work_dir,
                        derive_seed(cfg.seed, "external"),
                    )?)
                } else {
                    return Err(Error::ExternalUnavailable(format!(
                        "no finetuned model at {}; run training first",
                        done.display()
                    )));
                }
            }
        }
    })
}

/// Splits a raw text line into tokens: whitespace first, then leading and
/// trailing punctuation become tokens of their own. Inner punctuation is
/// kept (`CVE-2017-0199`, `evil.exe`, `10.0.0.1`).
pub fn tokenize_raw(line: &str) -> Vec<String> {
    const EDGE: &[char] = &[',', '.', ';', ':', '!', '?', '"', '\'', '(', ')', '[', ']', '{', '}'];
    let mut out = Vec::new();
    for word in line.split_whitespace() {
        let mut rest = word;
        let mut lead = Vec::new();
        while let Some(c) = rest.chars().next().filter(|c| EDGE.contains(c)) {
            lead.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        }
        let mut trail = Vec::new();
        while let Some(c) = rest.chars().last().filter(|c| EDGE.contains(c)) {
            trail.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        }
        out.extend(lead);
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(trail.into_iter().rev());
    }
    out
}

/// Every resource of one run, in memory.
pub struct Experiment {
    pub config: RunConfig,
    pub corpus: LabeledCorpus,
    pub split: SplitManifest,
    pub train: LabeledCorpus,
    pub valid: LabeledCorpus,
    pub test: LabeledCorpus,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub pos: PosEmbeddingTable,
    pub word_vectors: Option<VectorTable>,
    pub domain: Option<Arc<DomainEmbeddingModel>>,
    pub neighbors: Option<Arc<NeighborCache>>,
    pub hsa: Option<Arc<HsaTable>>,
    pub external: Option<Arc<dyn ExternalProvider>>,
    pub work_dir: PathBuf,
}

impl Experiment {
    /// Computes everything from the corpus, including the resources needed
    /// by `config.switches`.
    pub fn in_memory(config: RunConfig, corpus: LabeledCorpus) -> Result<Self> {
        config.validate()?;
        let split = make_split(&config, &corpus)?;
        let (train, valid, test) = split.apply(&corpus)?;
        let vocab = build_vocab(&train, config.dataset.vocab_min_count);
        let labels = LabelSet::from_types(&corpus.label_inventory);
        let pos = pretrain_pos(&config, &train)?;
        let word_vectors = load_word_vectors(&config)?;
        let work_dir = config.out_dir.join(EXTERNAL_DIR);
        let mut exp = Experiment {
            config,
            corpus,
            split,
            train,
            valid,
            test,
            vocab,
            labels,
            pos,
            word_vectors,
            domain: None,
            neighbors: None,
            hsa: None,
            external: None,
            work_dir,
        };
        exp.ensure(exp.config.switches)?;
        Ok(exp)
    }

    /// Loads a prepared run directory. Resources for `switches` must exist
    /// there (the external provider may be finetuned on the spot when
    /// `allow_finetune` is set).
    pub fn from_run_dir(config: RunConfig, dir: &RunDir, switches: Switches, allow_finetune: bool) -> Result<Self> {
        config.validate()?;
        let corpus = load_corpus(&config)?;
        let split = SplitManifest::load(&dir.require(SPLITS, "prepare")?)?;
        let vocab = Vocabulary::load(&dir.require(VOCAB, "prepare")?)?;
        let labels: LabelSet = read_json(&dir.require(LABELS, "prepare")?)?;
        let pos = PosEmbeddingTable::load(&dir.require(POS_VECTORS, "pretrain-pos")?)?;
        let (train, valid, test) = split.apply(&corpus)?;
        let word_vectors = load_word_vectors(&config)?;
        let mut exp = Experiment {
            config,
            corpus,
            split,
            train,
            valid,
            test,
            vocab,
            labels,
            pos,
            word_vectors,
            domain: None,
            neighbors: None,
            hsa: None,
            external: None,
            work_dir: dir.external_dir(),
        };
        if switches.internal != InternalMode::None {
            let domain = DomainEmbeddingModel::load(&dir.require(DOMAIN_VECTORS, "pretrain-domain")?)?;
            let cache = NeighborCache::load(&dir.require(NEIGHBORS, "precompute-neighbors")?, &domain)?;
            check_cache_k(&exp.config, &cache, Some(dir))?;
            exp.set_internal(domain, cache);
        }
        if switches.external {
            exp.external = Some(open_external(
                &exp.config,
                &exp.train,
                &exp.valid,
                &exp.labels,
                &exp.work_dir,
                allow_finetune,
            )?);
        }
        Ok(exp)
    }

    fn set_internal(&mut self, domain: DomainEmbeddingModel, cache: NeighborCache) {
        self.hsa = Some(Arc::new(HsaTable::build(&cache, &domain)));
        self.domain = Some(Arc::new(domain));
        self.neighbors = Some(Arc::new(cache));
    }

    /// Computes any missing resource that `switches` depends on.
    pub fn ensure(&mut self, switches: Switches) -> Result<()> {
        if switches.internal != InternalMode::None && self.neighbors.is_none() {
            let text = domain_text(&self.config, &self.corpus)?;
            let domain = pretrain_domain(&self.config, &text)?;
            let cache = compute_neighbors(&self.config, &domain)?;
            self.set_internal(domain, cache);
        }
        if switches.external && self.external.is_none() {
            self.external = Some(open_external(
                &self.config,
                &self.train,
                &self.valid,
                &self.labels,
                &self.work_dir,
                true,
            )?);
        }
        Ok(())
    }

    pub fn augmentation(&self, switches: Switches) -> Augmentation {
        Augmentation {
            hsa: match switches.internal {
                InternalMode::Hsa => self.hsa.clone(),
                _ => None,
            },
            ssa: match (switches.internal, &self.domain, &self.neighbors) {
                (InternalMode::Ssa, Some(d), Some(n)) => Some((d.clone(), n.clone())),
                _ => None,
            },
            external: if switches.external { self.external.clone() } else { None },
        }
    }

    pub fn word_table(&self) -> WordEmbeddingTable {
        WordEmbeddingTable::from_vocab(
            &self.vocab.words,
            self.word_vectors.as_ref(),
            self.config.model.features.word_dim,
            derive_seed(self.config.seed, "oov"),
        )
    }

    /// A freshly initialized model and its augmentation resources.
    pub fn build(&self, switches: Switches) -> Result<(NerModel, Augmentation)> {
        let aug = self.augmentation(switches);
        aug.check(switches)?;
        let model = NerModel::new(
            &self.config.model,
            switches,
            self.vocab.clone(),
            self.labels.clone(),
            self.word_table(),
            Some(&self.pos),
            aug.external.as_ref().map(|e| e.dim()),
            self.config.seed,
        )?;
        Ok((model, aug))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.config.seed,
            ..self.config.train.clone()
        }
    }

    pub fn train(&self, switches: Switches) -> Result<(NerModel, Augmentation, TrainOutcome)> {
        let (mut model, aug) = self.build(switches)?;
        let outcome = train_model(&mut model, &self.train.sentences, &self.valid.sentences, &aug, &self.train_config())?;
        Ok((model, aug, outcome))
    }

    pub fn manifest(&self, switches: Switches) -> Result<RunManifest> {
        let config = serde_json::to_value(&self.config)?;
        Ok(RunManifest::new(
            self.config.seed,
            switches,
            &self.config.dataset.name,
            &[
                ("train", &self.train.sentences),
                ("valid", &self.valid.sentences),
                ("test", &self.test.sentences),
            ],
            config,
        ))
    }

    pub fn checkpoint(&self, model: &NerModel, best_epoch: usize) -> Checkpoint {
        Checkpoint::from_model(
            model,
            derive_seed(self.config.seed, "oov"),
            model.external_fc.as_ref().and(self.external.as_ref().map(|e| e.dim())),
            best_epoch,
        )
    }

    /// Trains and tests every switch set on this experiment's splits.
    pub fn ablate(&mut self, rows: &[Switches]) -> Result<AblationTable> {
        for &s in rows {
            self.ensure(s)?;
        }
        let this = &*self;
        run_ablation(
            &this.config.dataset.name,
            rows,
            |s| this.build(s),
            &this.train.sentences,
            &this.valid.sentences,
            &this.test.sentences,
            &this.train_config(),
        )
    }
}

fn load_word_vectors(cfg: &RunConfig) -> Result<Option<VectorTable>> {
    cfg.dataset.word_vectors.as_deref().map(VectorTable::load).transpose()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// Stages, one per command.

/// Writes the split manifest, vocabulary and label set.
pub fn stage_prepare(cfg: &RunConfig, dir: &RunDir) -> Result<SplitManifest> {
    cfg.validate()?;
    dir.create()?;
    let corpus = load_corpus(cfg)?;
    let split = make_split(cfg, &corpus)?;
    let (train, _, _) = split.apply(&corpus)?;
    split.save(&dir.path(SPLITS))?;
    build_vocab(&train, cfg.dataset.vocab_min_count).save(&dir.path(VOCAB))?;
    write_json(&dir.path(LABELS), &LabelSet::from_types(&corpus.label_inventory))?;
    Ok(split)
}

fn train_split(cfg: &RunConfig, dir: &RunDir) -> Result<(LabeledCorpus, LabeledCorpus)> {
    let corpus = load_corpus(cfg)?;
    let split = SplitManifest::load(&dir.require(SPLITS, "prepare")?)?;
    let (train, _, _) = split.apply(&corpus)?;
    Ok((corpus, train))
}

pub fn stage_pretrain_pos(cfg: &RunConfig, dir: &RunDir) -> Result<PosEmbeddingTable> {
    let (_, train) = train_split(cfg, dir)?;
    let table = pretrain_pos(cfg, &train)?;
    table.save(&dir.path(POS_VECTORS))?;
    Ok(table)
}

pub fn stage_pretrain_domain(cfg: &RunConfig, dir: &RunDir) -> Result<DomainEmbeddingModel> {
    let (corpus, _) = train_split(cfg, dir)?;
    let model = pretrain_domain(cfg, &domain_text(cfg, &corpus)?)?;
    model.save(&dir.path(DOMAIN_VECTORS))?;
    Ok(model)
}

pub fn stage_precompute_neighbors(cfg: &RunConfig, dir: &RunDir) -> Result<NeighborCache> {
    let domain = DomainEmbeddingModel::load(&dir.require(DOMAIN_VECTORS, "pretrain-domain")?)?;
    let cache = compute_neighbors(cfg, &domain)?;
    cache.save(&dir.path(NEIGHBORS))?;
    Ok(cache)
}

/// Trains `cfg.switches` and writes the checkpoint, manifest and history.
pub fn stage_train(cfg: &RunConfig, dir: &RunDir) -> Result<TrainOutcome> {
    let exp = Experiment::from_run_dir(cfg.clone(), dir, cfg.switches, true)?;
    let (model, _, outcome) = exp.train(cfg.switches)?;
    exp.checkpoint(&model, outcome.best_epoch).save(&dir.path(CHECKPOINT))?;
    exp.manifest(cfg.switches)?.save(&dir.path(MANIFEST))?;
    write_history(&dir.path(HISTORY), &outcome.history)?;
    Ok(outcome)
}

/// A trained model with the resources it was trained with.
pub struct Trained {
    pub experiment: Experiment,
    pub model: NerModel,
    pub augmentation: Augmentation,
}

pub fn load_trained(cfg: &RunConfig, dir: &RunDir) -> Result<Trained> {
    let ckpt = Checkpoint::load(&dir.require(CHECKPOINT, "train")?)?;
    let switches = ckpt.meta.switches;
    let experiment = Experiment::from_run_dir(cfg.clone(), dir, switches, false)?;
    let model = ckpt.into_model()?;
    let augmentation = experiment.augmentation(switches);
    augmentation.check(switches)?;
    Ok(Trained {
        experiment,
        model,
        augmentation,
    })
}

/// Evaluates the checkpoint on the test split; writes metrics and predictions.
pub fn stage_eval(cfg: &RunConfig, dir: &RunDir) -> Result<MetricsReport> {
    let t = load_trained(cfg, dir)?;
    let test = &t.experiment.test.sentences;
    let pred = t.model.predict(test, &t.augmentation)?;
    let report = report_for(test, &pred, &t.model.labels.entity_types(), cfg.eval.accuracy_excludes_o)?;
    write_json(&dir.path(METRICS), &report)?;
    fs::write(dir.path(METRICS_TABLE), report.to_table()).map_err(|e| Error::io(dir.path(METRICS_TABLE), e))?;
    let conll = crate::corpus::write_conll(test, Some(&pred));
    fs::write(dir.path(PREDICTIONS), conll).map_err(|e| Error::io(dir.path(PREDICTIONS), e))?;
    Ok(report)
}

fn report_for(
    sentences: &[Sentence],
    pred: &[Vec<String>],
    inventory: &[String],
    exclude_o: bool,
) -> Result<MetricsReport> {
    let gold: Vec<Vec<&str>> = sentences.iter().map(|s| s.labels()).collect();
    let ids: Vec<&str> = sentences.iter().map(|s| s.id.as_str()).collect();
    evaluate(&ids, &gold, pred, inventory, exclude_o)
}

/// Scores a `token gold pred` file (blank lines between sentences).
pub fn eval_predictions_file(path: &Path, exclude_o: bool) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut gold: Vec<Vec<String>> = vec![];
    let mut pred: Vec<Vec<String>> = vec![];
    let mut open = false;
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            open = false;
            continue;
        }
        if cols.len() < 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `token gold pred`, got {} columns", cols.len()),
            });
        }
        if !open {
            gold.push(vec![]);
            pred.push(vec![]);
            open = true;
        }
        gold.last_mut().unwrap().push(cols[cols.len() - 2].to_string());
        pred.last_mut().unwrap().push(cols[cols.len() - 1].to_string());
    }
    if gold.is_empty() {
        return Err(Error::NoSentences(path.to_path_buf()));
    }
    let inventory: Vec<String> = crate::corpus::observed_types(gold.iter().chain(&pred).flatten().map(|s| s.as_str()))
        .into_iter()
        .collect();
    let ids: Vec<String> = (0..gold.len()).map(|i| format!("s{i}")).collect();
    let ids: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
    let gold: Vec<Vec<&str>> = gold.iter().map(|s| s.iter().map(|x| x.as_str()).collect()).collect();
    evaluate(&ids, &gold, &pred, &inventory, exclude_o)
}

/// Labels raw text lines; returns `(tokens, labels)` per non-empty line.
pub fn tag_lines(t: &Trained, text: &str) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let tagger: &dyn PosTagger = &RuleTagger;
    let mut sentences = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks = tokenize_raw(line);
        if toks.is_empty() {
            continue;
        }
        let refs: Vec<&str> = toks.iter().map(|s| s.as_str()).collect();
        sentences.push(Sentence::from_words(format!("line{}", i + 1), &refs, tagger));
    }
    if let Some(e) = &t.augmentation.external {
        e.prepare(&sentences)?;
    }
    let pred = t.model.predict(&sentences, &t.augmentation)?;
    Ok(sentences
        .into_iter()
        .zip(pred)
        .map(|(s, p)| (s.words().map(str::to_string).collect(), p))
        .collect())
}

/// Runs the six-row ablation matrix on the run's splits.
pub fn stage_ablate(cfg: &RunConfig, dir: &RunDir) -> Result<AblationTable> {
    dir.create()?;
    let corpus = load_corpus(cfg)?;
    let mut exp = Experiment::in_memory(
        RunConfig {
            switches: Switches::BASE,
            out_dir: dir.root.clone(),
            ..cfg.clone()
        },
        corpus,
    )?;
    let table = exp.ablate(&Switches::ABLATION)?;
    crate::training::write_ablation_json(&dir.path(ABLATION), std::slice::from_ref(&table))?;
    let text = crate::training::render_ablation(std::slice::from_ref(&table));
    fs::write(dir.path(ABLATION_TABLE), &text).map_err(|e| Error::io(dir.path(ABLATION_TABLE), e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_tokenizer_splits_edge_punctuation_only() {
        assert_eq!(
            tokenize_raw("We observed APT19 (using CVE-2017-0199), evil.exe."),
            ["We", "observed", "APT19", "(", "using", "CVE-2017-0199", ")", ",", "evil.exe", "."]
        );
        assert!(tokenize_raw("   ").is_empty());
        assert_eq!(tokenize_raw("\"...\""), ["\"", ".", ".", ".", "\""]);
    }

    #[test]
    fn missing_artifact_names_the_command() {
        let d = tempfile::tempdir().unwrap();
        let dir = RunDir::new(d.path(), "--config c.toml");
        match dir.require(NEIGHBORS, "precompute-neighbors") {
            Err(Error::MissingArtifact { command, .. }) => {
                assert_eq!(command, "ctiner precompute-neighbors --config c.toml")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn predictions_file_with_gold_equal_pred_scores_one() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("p.conll");
        fs::write(&p, "APT19 B-HackOrg B-HackOrg\nused O O\n\nMimikatz B-Tool B-Tool\nx O O\n").unwrap();
        let r = eval_predictions_file(&p, false).unwrap();
        assert_eq!(r.micro.f1, 1.0);
        fs::write(&p, "APT19 B-HackOrg O\n").unwrap();
        assert_eq!(eval_predictions_file(&p, false).unwrap().micro.f1, 0.0);
    }
}
