//! Strict entity-level precision/recall/F1, token accuracy and per-type reports.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{extract_entities, EntitySpan};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Empty denominators give 0.
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.correct, c.predicted);
        let recall = ratio(c.correct, c.gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub entity_type: String,
    pub scores: Prf,
    pub counts: Counts,
    /// Absent from both gold and predictions.
    pub no_support: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro: Prf,
    pub counts: Counts,
    pub accuracy: Option<f64>,
    pub per_type: Vec<TypeRow>,
}

fn dedup(spans: &[EntitySpan]) -> HashSet<&EntitySpan> {
    spans.iter().collect()
}

fn count(gold: &HashSet<&EntitySpan>, pred: &HashSet<&EntitySpan>) -> Counts {
    Counts {
        gold: gold.len(),
        predicted: pred.len(),
        correct: pred.iter().filter(|p| gold.contains(*p)).count(),
    }
}

/// Micro scores under exact (type, start, end, sentence) matching.
/// Duplicate spans on either side count once.
pub fn strict_match_prf(gold: &[EntitySpan], pred: &[EntitySpan]) -> MetricsReport {
    let types: BTreeSet<String> = gold.iter().chain(pred).map(|s| s.entity_type.clone()).collect();
    let types: Vec<String> = types.into_iter().collect();
    let counts = count(&dedup(gold), &dedup(pred));
    MetricsReport {
        micro: Prf::from_counts(counts),
        counts,
        accuracy: None,
        per_type: per_type_report(gold, pred, &types),
    }
}

/// One row per inventory type, in inventory order.
pub fn per_type_report<S: AsRef<str>>(gold: &[EntitySpan], pred: &[EntitySpan], inventory: &[S]) -> Vec<TypeRow> {
    let gold = dedup(gold);
    let pred = dedup(pred);
    inventory
        .iter()
        .map(|t| {
            let t = t.as_ref();
            let g: HashSet<&EntitySpan> = gold.iter().copied().filter(|s| s.entity_type == t).collect();
            let p: HashSet<&EntitySpan> = pred.iter().copied().filter(|s| s.entity_type == t).collect();
            let counts = count(&g, &p);
            TypeRow {
                entity_type: t.to_string(),
                scores: Prf::from_counts(counts),
                counts,
                no_support: counts.gold == 0 && counts.predicted == 0,
            }
        })
        .collect()
}

/// Fraction of positions with identical labels. With `exclude_o`, only
/// positions whose gold label is not `O` count.
pub fn token_accuracy<S: AsRef<str>, T: AsRef<str>>(
    gold: &[Vec<S>],
    pred: &[Vec<T>],
    exclude_o: bool,
) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::data(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (k, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::data(format!(
                "sentence {k}: {} gold labels but {} predicted",
                g.len(),
                p.len()
            )));
        }
        for (a, b) in g.iter().zip(p) {
            if exclude_o && a.as_ref() == "O" {
                continue;
            }
            total += 1;
            hit += (a.as_ref() == b.as_ref()) as usize;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Full report from aligned label sequences.
pub fn evaluate<S: AsRef<str>, T: AsRef<str>, I: AsRef<str>>(
    ids: &[I],
    gold: &[Vec<S>],
    pred: &[Vec<T>],
    inventory: &[String],
    exclude_o: bool,
) -> Result<MetricsReport> {
    let accuracy = token_accuracy(gold, pred, exclude_o)?;
    if ids.len() != gold.len() {
        return Err(Error::data("sentence id count differs from sentence count"));
    }
    let g = sentence_spans(ids, gold);
    let p = sentence_spans(ids, pred);
    let mut report = strict_match_prf(&g, &p);
    let mut types: Vec<String> = inventory.to_vec();
    for row in &report.per_type {
        if !types.contains(&row.entity_type) {
            types.push(row.entity_type.clone());
        }
    }
    report.per_type = per_type_report(&g, &p, &types);
    report.accuracy = Some(accuracy);
    Ok(report)
}

fn sentence_spans<I: AsRef<str>, S: AsRef<str>>(ids: &[I], seqs: &[Vec<S>]) -> Vec<EntitySpan> {
    ids.iter()
        .zip(seqs)
        .flat_map(|(id, labels)| {
            extract_entities(labels)
                .into_iter()
                .map(move |s| s.in_sentence(id.as_ref()))
        })
        .collect()
}

impl MetricsReport {
    /// Human-readable table (scores in percent).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}",
            "type", "P", "R", "F1", "gold", "pred", "corr"
        );
        for r in &self.per_type {
            let _ = writeln!(
                out,
                "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>6} {:>6}{}",
                r.entity_type,
                100.0 * r.scores.precision,
                100.0 * r.scores.recall,
                100.0 * r.scores.f1,
                r.counts.gold,
                r.counts.predicted,
                r.counts.correct,
                if r.no_support { "  (no support)" } else { "" }
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>6} {:>6}",
            "micro",
            100.0 * self.micro.precision,
            100.0 * self.micro.recall,
            100.0 * self.micro.f1,
            self.counts.gold,
            self.counts.predicted,
            self.counts.correct
        );
        if let Some(acc) = self.accuracy {
            let _ = writeln!(out, "token accuracy {:.2}", 100.0 * acc);
        }
        out
    }

    /// One JSON record for the micro scores followed by one per type.
    pub fn to_json_lines(&self) -> String {
        let mut out = serde_json::json!({
            "kind": "micro",
            "precision": self.micro.precision,
            "recall": self.micro.recall,
            "f1": self.micro.f1,
            "accuracy": self.accuracy,
            "gold": self.counts.gold,
            "predicted": self.counts.predicted,
            "correct": self.counts.correct,
        })
        .to_string();
        out.push('\n');
        for r in &self.per_type {
            out.push_str(
                &serde_json::json!({
                    "kind": "type",
                    "type": r.entity_type,
                    "precision": r.scores.precision,
                    "recall": r.scores.recall,
                    "f1": r.scores.f1,
                    "gold": r.counts.gold,
                    "predicted": r.counts.predicted,
                    "correct": r.counts.correct,
                    "no_support": r.no_support,
                })
                .to_string(),
            );
            out.push('\n');
        }
        out
    }
}
