//! Optimization loop, model selection on validation, run manifests and the
//! ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Mat, ParamStore};
use crate::corpus::{write_conll, Sentence};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport, Prf};
use crate::fusion::loss;
use crate::model::{Augmentation, NerModel, Prepared, Switches};
use crate::nn::{derive_seed, ForwardCtx};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub min_lr: f64,
    /// Per-epoch multiplicative decay rate.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Stop once validation F1 reaches this value.
    pub stop_at_valid_f1: Option<f64>,
    /// Set from the run seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            min_lr: 5e-5,
            lr_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 200,
            clip_norm: 5.0,
            stop_at_valid_f1: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < self.min_lr {
            return Err(Error::config(format!("lr {} is below min_lr {}", self.lr, self.min_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::config("lr_decay must lie in [0, 1)"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Learning rate as a function of the (0-based) epoch.
pub trait LrSchedule {
    fn lr(&self, epoch: usize) -> f64;
}

/// `max(min_lr, lr * (1 - decay)^epoch)`.
#[derive(Clone, Copy, Debug)]
pub struct ExponentialDecay {
    pub lr: f64,
    pub decay: f64,
    pub min_lr: f64,
}

impl From<&TrainConfig> for ExponentialDecay {
    fn from(c: &TrainConfig) -> Self {
        ExponentialDecay {
            lr: c.lr,
            decay: c.lr_decay,
            min_lr: c.min_lr,
        }
    }
}

impl LrSchedule for ExponentialDecay {
    fn lr(&self, epoch: usize) -> f64 {
        (self.lr * (1.0 - self.decay).powi(epoch as i32)).max(self.min_lr)
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, _, p)| Mat::zeros(p.dim())).collect();
        Adam {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Batches of sentence indices: shuffle, stable-sort by length, chunk, then
/// shuffle the batch order.
pub fn length_buckets(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    batches.shuffle(rng);
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Prf,
    pub lr: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_f1: f64,
}

impl TrainOutcome {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.history.is_empty() {
            return 0.0;
        }
        self.history.iter().map(|r| r.seconds).sum::<f64>() / self.history.len() as f64
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in history {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Strict micro scores and token accuracy of the model on `sentences`.
pub fn evaluate_model(model: &NerModel, sentences: &[Sentence], aug: &Augmentation) -> Result<MetricsReport> {
    let pred = model.predict(sentences, aug)?;
    let gold: Vec<Vec<&str>> = sentences.iter().map(|s| s.labels()).collect();
    let ids: Vec<&str> = sentences.iter().map(|s| s.id.as_str()).collect();
    evaluate(&ids, &gold, &pred, &model.labels.entity_types(), false)
}

pub fn train_model(
    model: &mut NerModel,
    train: &[Sentence],
    valid: &[Sentence],
    aug: &Augmentation,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_model_with_schedule(model, train, valid, aug, config, &ExponentialDecay::from(config))
}

/// Trains in place and leaves the model at its best validation epoch.
pub fn train_model_with_schedule(
    model: &mut NerModel,
    train: &[Sentence],
    valid: &[Sentence],
    aug: &Augmentation,
    config: &TrainConfig,
    schedule: &dyn LrSchedule,
) -> Result<TrainOutcome> {
    config.validate()?;
    aug.check(model.switches)?;
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    if model.switches.external {
        if let Some(e) = &aug.external {
            e.prepare(train)?;
            e.prepare(valid)?;
        }
    }
    let prepared: Vec<Prepared> = train
        .iter()
        .map(|s| model.prepare(s, true))
        .collect::<Result<_>>()?;
    let lengths: Vec<usize> = train.iter().map(|s| s.len()).collect();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batches"));
    let mut dropout_rng = Some(ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dropout")));
    let mut adam = Adam::new(&model.store, config);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, Vec<crate::features::char_cnn::RunningStats>)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = schedule.lr(epoch);
        let mut epoch_loss = 0.0;
        let mut last_norm = 0.0;
        for batch in length_buckets(&lengths, config.batch_size, &mut batch_rng) {
            let mut grads = Gradients::zeros_like(&model.store);
            let mut bn_batches = Vec::new();
            let mut batch_loss = 0.0;
            for &i in &batch {
                let p = &prepared[i];
                let mut g = Graph::new(&model.store);
                let mut ctx = ForwardCtx::train(dropout_rng.take().expect("rng present"));
                let probs = model.forward(&mut g, p, aug, &mut ctx)?;
                let l = loss(&mut g, probs, p.gold.as_deref().expect("gold prepared"));
                let value = g.scalar(l);
                dropout_rng = ctx.rng.take();
                if !value.is_finite() {
                    return Err(non_finite(epoch, value, &batch, &prepared));
                }
                batch_loss += value;
                grads.accumulate(&g.backward(l));
                bn_batches.extend(ctx.bn_batches);
            }
            grads.scale(1.0 / batch.len() as f64);
            last_norm = grads.clip_global_norm(config.clip_norm);
            if !last_norm.is_finite() {
                return Err(non_finite(epoch, last_norm, &batch, &prepared));
            }
            adam.step(&mut model.store, &grads, lr);
            model.input.char_cnn.update_running(&bn_batches);
            epoch_loss += batch_loss;
        }
        let train_seconds = started.elapsed().as_secs_f64();
        let valid_report = if valid.is_empty() {
            MetricsReport {
                micro: Prf::default(),
                counts: Default::default(),
                accuracy: None,
                per_type: vec![],
            }
        } else {
            evaluate_model(model, valid, aug)?
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / train.len() as f64,
            valid: valid_report.micro,
            lr,
            grad_norm: last_norm,
            seconds: train_seconds,
        };
        log::info!(
            "epoch {} loss {:.4} valid F1 {:.4} lr {:.2e} ({:.2}s)",
            record.epoch,
            record.train_loss,
            record.valid.f1,
            lr,
            train_seconds
        );
        let f1 = record.valid.f1;
        history.push(record);
        if best.as_ref().is_none_or(|b| f1 > b.0) {
            best = Some((f1, epoch + 1, model.store.clone(), model.input.char_cnn.running.to_vec()));
        }
        if config.stop_at_valid_f1.is_some_and(|t| f1 >= t) {
            break;
        }
    }
    let (best_valid_f1, best_epoch) = match best {
        Some((f1, epoch, store, running)) => {
            model.store = store;
            model.input.char_cnn.running = running.try_into().expect("two layers");
            (f1, epoch)
        }
        None => (0.0, 0),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_valid_f1,
    })
}

fn non_finite(epoch: usize, value: f64, batch: &[usize], prepared: &[Prepared]) -> Error {
    let ids: Vec<String> = batch
        .iter()
        .map(|&i| format!("{} ({} tokens)", prepared[i].sentence.id, prepared[i].sentence.len()))
        .collect();
    Error::NonFiniteLoss {
        epoch: epoch + 1,
        diagnostic: format!("value {value}; batch sentences: {}", ids.join(", ")),
    }
}

/// Hex SHA-256 of a split in CoNLL form.
pub fn dataset_hash(sentences: &[Sentence]) -> String {
    hex::encode(Sha256::digest(write_conll(sentences, None).as_bytes()))
}

/// Everything needed to replay a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub switches: Switches,
    pub dataset: String,
    pub dataset_hashes: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

pub const SEED_PHASES: [&str; 8] = ["split", "oov", "pos", "domain", "init", "batches", "dropout", "external"];

impl RunManifest {
    pub fn new(
        seed: u64,
        switches: Switches,
        dataset: &str,
        splits: &[(&str, &[Sentence])],
        config: serde_json::Value,
    ) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            derived_seeds: SEED_PHASES.iter().map(|p| (p.to_string(), derive_seed(seed, p))).collect(),
            switches,
            dataset: dataset.to_string(),
            dataset_hashes: splits.iter().map(|(n, s)| (n.to_string(), dataset_hash(s))).collect(),
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub switches: Switches,
    pub test: Prf,
    pub best_valid_f1: f64,
    pub epochs_run: usize,
    pub mean_epoch_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset: String,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates one model per switch set. `build` returns a fresh
/// model and its augmentation resources for a switch set.
pub fn run_ablation(
    dataset: &str,
    rows: &[Switches],
    mut build: impl FnMut(Switches) -> Result<(NerModel, Augmentation)>,
    train: &[Sentence],
    valid: &[Sentence],
    test: &[Sentence],
    config: &TrainConfig,
) -> Result<AblationTable> {
    let mut out = Vec::with_capacity(rows.len());
    for &s in rows {
        log::info!("ablation row {s}");
        let (mut model, aug) = build(s)?;
        let outcome = train_model(&mut model, train, valid, &aug, config)?;
        let report = evaluate_model(&model, test, &aug)?;
        out.push(AblationRow {
            switches: s,
            test: report.micro,
            best_valid_f1: outcome.best_valid_f1,
            epochs_run: outcome.history.len(),
            mean_epoch_seconds: outcome.mean_epoch_seconds(),
        });
    }
    Ok(AblationTable {
        dataset: dataset.to_string(),
        rows: out,
    })
}

/// Side-by-side P/R/F1 (percent) per dataset, rows in the given order.
pub fn render_ablation(tables: &[AblationTable]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "config");
    for t in tables {
        let _ = write!(out, " | {:^23}", t.dataset);
    }
    out.push('\n');
    let _ = write!(out, "{:<16}", "");
    for _ in tables {
        let _ = write!(out, " | {:>7} {:>7} {:>7}", "P", "R", "F1");
    }
    out.push('\n');
    let n = tables.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    for i in 0..n {
        let name = tables
            .iter()
            .find_map(|t| t.rows.get(i))
            .map(|r| r.switches.label())
            .unwrap_or_default();
        let _ = write!(out, "{name:<16}");
        for t in tables {
            match t.rows.get(i) {
                Some(r) => {
                    let _ = write!(
                        out,
                        " | {:>7.2} {:>7.2} {:>7.2}",
                        100.0 * r.test.precision,
                        100.0 * r.test.recall,
                        100.0 * r.test.f1
                    );
                }
                None => {
                    let _ = write!(out, " | {:>23}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_ablation_json(path: &Path, tables: &[AblationTable]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in tables {
        for r in &t.rows {
            let line = serde_json::json!({
                "dataset": t.dataset,
                "config": r.switches.label(),
                "precision": r.test.precision,
                "recall": r.test.recall,
                "f1": r.test.f1,
                "best_valid_f1": r.best_valid_f1,
                "epochs": r.epochs_run,
                "mean_epoch_seconds": r.mean_epoch_seconds,
            });
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_and_floors() {
        let s = ExponentialDecay {
            lr: 1e-3,
            decay: 1e-5,
            min_lr: 5e-5,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(1) - 1e-3 * (1.0 - 1e-5)).abs() < 1e-18);
        let fast = ExponentialDecay { decay: 0.5, ..s };
        assert_eq!(fast.lr(50), 5e-5);
    }

    #[test]
    fn lr_below_min_is_rejected() {
        let c = TrainConfig {
            lr: 1e-6,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn buckets_cover_once_and_group_lengths() {
        let lengths: Vec<usize> = (0..100).map(|i| (i * 37) % 23 + 1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = length_buckets(&lengths, 8, &mut rng);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        // Sorted-then-chunked: the length ranges of batches do not interleave.
        let mut ranges: Vec<(usize, usize)> = batches
            .iter()
            .map(|b| {
                let ls: Vec<usize> = b.iter().map(|&i| lengths[i]).collect();
                (*ls.iter().min().unwrap(), *ls.iter().max().unwrap())
            })
            .collect();
        ranges.sort();
        assert!(ranges.windows(2).all(|w| w[0].1 <= w[1].0));
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(batches, length_buckets(&lengths, 8, &mut rng2));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Mat::from_elem((1, 2), 1.0));
        let config = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&store, &config);
        let mut g = Graph::new(&store);
        let p = g.param(id);
        let l = g.sum_all(p);
        let grads = g.backward(l);
        adam.step(&mut store, &grads, 0.1);
        for x in store.get(id) {
            assert!((x - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn dataset_hash_is_stable_hex() {
        let s = vec![Sentence::from_words("s0", &["a", "b"], &crate::pos_tagger::RuleTagger)];
        let h = dataset_hash(&s);
        assert_eq!(h.len(), 64);
        assert_eq!(h, dataset_hash(&s));
    }

    #[test]
    fn ablation_table_renders_all_rows() {
        let rows = Switches::ABLATION
            .iter()
            .map(|&s| AblationRow {
                switches: s,
                test: Prf::default(),
                best_valid_f1: 0.0,
                epochs_run: 1,
                mean_epoch_seconds: 0.0,
            })
            .collect();
        let t = AblationTable {
            dataset: "DNRTI".into(),
            rows,
        };
        let text = render_ablation(&[t.clone(), AblationTable { dataset: "MalwareTextDB".into(), ..t }]);
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().nth(7).unwrap().starts_with("base+BERT+HSA"));
    }
}
