//! Micro-averaged precision / recall / F1 with `no_relation` excluded from
//! credit, plus model scoring helpers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{encode_inputs, LabelSet, RelationInstance};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub relation: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted_non_na: usize,
    pub gold_non_na: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_relation: Vec<RelationScore>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Pooled scores over all instances. A prediction counts as correct when it
/// equals a gold label other than `na`.
pub fn micro_prf(gold: &[usize], pred: &[usize], na: usize) -> Result<ScoreReport> {
    if gold.len() != pred.len() {
        return Err(Error::Usage(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut correct = 0;
    let mut predicted = 0;
    let mut gold_n = 0;
    for (&g, &p) in gold.iter().zip(pred) {
        if p != na {
            predicted += 1;
        }
        if g != na {
            gold_n += 1;
            if p == g {
                correct += 1;
            }
        }
    }
    let precision = ratio(correct, predicted);
    let recall = ratio(correct, gold_n);
    Ok(ScoreReport {
        precision,
        recall,
        f1: harmonic(precision, recall),
        correct,
        predicted_non_na: predicted,
        gold_non_na: gold_n,
        per_relation: Vec::new(),
    })
}

/// [`micro_prf`] plus a per-relation breakdown over every non-`na` label.
pub fn score_with_breakdown(gold: &[usize], pred: &[usize], labels: &LabelSet) -> Result<ScoreReport> {
    let mut report = micro_prf(gold, pred, LabelSet::NA_ID)?;
    for (id, name) in labels.labels().iter().enumerate() {
        if id == LabelSet::NA_ID {
            continue;
        }
        let correct = gold.iter().zip(pred).filter(|&(&g, &p)| g == id && p == id).count();
        let predicted = pred.iter().filter(|&&p| p == id).count();
        let gold_n = gold.iter().filter(|&&g| g == id).count();
        let (p, r) = (ratio(correct, predicted), ratio(correct, gold_n));
        report.per_relation.push(RelationScore {
            relation: name.clone(),
            precision: p,
            recall: r,
            f1: harmonic(p, r),
            correct,
            predicted,
            gold: gold_n,
        });
    }
    Ok(report)
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if !self.per_relation.is_empty() {
            let width = self.per_relation.iter().map(|r| r.relation.len()).max().unwrap_or(8).max(8);
            let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "relation", "P", "R", "F1", "gold");
            for r in &self.per_relation {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6}",
                    r.relation,
                    100.0 * r.precision,
                    100.0 * r.recall,
                    100.0 * r.f1,
                    r.gold
                );
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "precision (micro): {:6.2}%", 100.0 * self.precision);
        let _ = writeln!(s, "   recall (micro): {:6.2}%", 100.0 * self.recall);
        let _ = writeln!(s, "       F1 (micro): {:6.2}%", 100.0 * self.f1);
        let _ = writeln!(
            s,
            "correct {} / predicted {} / gold {}",
            self.correct, self.predicted_non_na, self.gold_non_na
        );
        s
    }
}

/// Inference-mode class probabilities for every instance, in order.
pub fn predict_probabilities(model: &Model, instances: &[RelationInstance], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(instances.len());
    let limit = model.config.encoder.max_len;
    for chunk in instances.chunks(batch_size.max(1)) {
        let refs: Vec<&RelationInstance> = chunk.iter().collect();
        let batch = encode_inputs(&refs, &model.vocabs, limit)?;
        out.extend(crate::model::probabilities(&model.eval_logits(&batch)?));
    }
    Ok(out)
}

/// Inference-mode label ids for every instance, in order.
pub fn predict_instances(model: &Model, instances: &[RelationInstance], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(instances.len());
    let limit = model.config.encoder.max_len;
    for chunk in instances.chunks(batch_size.max(1)) {
        let refs: Vec<&RelationInstance> = chunk.iter().collect();
        let batch = encode_inputs(&refs, &model.vocabs, limit)?;
        out.extend(model.predict_batch(&batch)?);
    }
    Ok(out)
}

/// Gold label ids of `instances` under `labels`.
pub fn gold_ids(instances: &[RelationInstance], labels: &LabelSet) -> Result<Vec<usize>> {
    instances
        .iter()
        .map(|i| {
            labels
                .id(&i.relation)
                .map_err(|e| Error::Data(format!("instance {}: {e}", i.id)))
        })
        .collect()
}

/// Predict every instance and score against its gold label. Returns the
/// report and the predicted ids.
pub fn score_model(model: &Model, instances: &[RelationInstance], batch_size: usize) -> Result<(ScoreReport, Vec<usize>)> {
    let gold = gold_ids(instances, &model.vocabs.labels)?;
    let pred = predict_instances(model, instances, batch_size)?;
    Ok((score_with_breakdown(&gold, &pred, &model.vocabs.labels)?, pred))
}

/// One label name per line, aligned with the input order.
pub fn write_predictions(path: &Path, labels: &LabelSet, pred: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(pred.len() * 16);
    for &p in pred {
        s.push_str(labels.name(p));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<String>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(s.lines().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_example() {
        // gold = [r1, na, r2], pred = [r1, r2, na]
        let r = micro_prf(&[1, 0, 2], &[1, 2, 0], 0).unwrap();
        assert_eq!((r.correct, r.predicted_non_na, r.gold_non_na), (1, 2, 2));
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn perfect_and_empty() {
        let r = micro_prf(&[1, 2, 0], &[1, 2, 0], 0).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = micro_prf(&[1, 2, 0], &[0, 0, 0], 0).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch_is_usage_error() {
        assert!(matches!(micro_prf(&[1], &[1, 2], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn report_formats() {
        let labels = LabelSet::new(["a", "b"]);
        let r = score_with_breakdown(&[1, 2, 0], &[1, 1, 0], &labels).unwrap();
        assert_eq!(r.per_relation.len(), 2);
        let back: ScoreReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("F1 (micro)"));
    }
}
