//! Span-level and token-level precision/recall/F1 with micro pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::BACKGROUND;
use crate::synth::LabeledSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// Exact-match entity spans.
    Span,
    /// Individual tokens, `"O"` excluded.
    Token,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2·TP / (2·TP + FP + FN)`; 1 when there is nothing to find and
    /// nothing was predicted.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassScore {
    fn new(class: &str, counts: Counts) -> Self {
        Self {
            class: class.to_owned(),
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub mode: F1Mode,
    pub per_class: Vec<ClassScore>,
    /// Pooled over every scored class.
    pub micro: ClassScore,
}

impl F1Scores {
    pub fn class(&self, name: &str) -> Option<&ClassScore> {
        self.per_class.iter().find(|c| c.class == name)
    }

    /// Micro scores pooled over a subset of the scored classes. Classes that
    /// were not scored contribute nothing.
    pub fn pooled(&self, classes: &[String]) -> ClassScore {
        let mut total = Counts::default();
        for c in self.per_class.iter().filter(|c| classes.contains(&c.class)) {
            total.add(&c.counts);
        }
        ClassScore::new("micro", total)
    }
}

/// `(class, start, end)` runs of identical non-`"O"` labels.
fn predicted_spans(labels: &[String]) -> Vec<(&str, usize, usize)> {
    let mut spans: Vec<(&str, usize, usize)> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if l == BACKGROUND {
            continue;
        }
        match spans.last_mut() {
            Some(last) if last.0 == l && last.2 == i => last.2 = i + 1,
            _ => spans.push((l.as_str(), i, i + 1)),
        }
    }
    spans
}

/// Scores `predictions` against the gold labels over the entity classes in
/// `classes`. Gold entities of other classes are ignored.
pub fn evaluate_f1(
    predictions: &[Vec<String>],
    gold: &[LabeledSequence],
    classes: &[String],
    mode: F1Mode,
) -> Result<F1Scores> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predicted sequences, {} gold",
            predictions.len(),
            gold.len()
        )));
    }
    let scored: Vec<&String> = classes
        .iter()
        .filter(|c| c.as_str() != BACKGROUND)
        .collect();
    let mut counts = vec![Counts::default(); scored.len()];
    let slot = |name: &str| scored.iter().position(|c| c.as_str() == name);

    for (seq_no, (pred, g)) in predictions.iter().zip(gold).enumerate() {
        if pred.len() != g.tokens.len() {
            return Err(Error::LengthMismatch(format!(
                "sequence {seq_no}: {} predictions for {} tokens",
                pred.len(),
                g.tokens.len()
            )));
        }
        match mode {
            F1Mode::Span => {
                let gold_spans = g.spans();
                let pred_spans = predicted_spans(pred);
                for (class, s, e) in &pred_spans {
                    let Some(k) = slot(class) else { continue };
                    if gold_spans
                        .iter()
                        .any(|(gc, gs, ge)| gc == class && gs == s && ge == e)
                    {
                        counts[k].tp += 1;
                    } else {
                        counts[k].fp += 1;
                    }
                }
                for (class, s, e) in &gold_spans {
                    let Some(k) = slot(class) else { continue };
                    if !pred_spans
                        .iter()
                        .any(|(pc, ps, pe)| pc == class && ps == s && pe == e)
                    {
                        counts[k].fn_ += 1;
                    }
                }
            }
            F1Mode::Token => {
                for (p, t) in pred.iter().zip(&g.tokens) {
                    if p == &t.label {
                        if let Some(k) = slot(p) {
                            counts[k].tp += 1;
                        }
                        continue;
                    }
                    if let Some(k) = slot(p) {
                        counts[k].fp += 1;
                    }
                    if let Some(k) = slot(&t.label) {
                        counts[k].fn_ += 1;
                    }
                }
            }
        }
    }

    let mut pooled = Counts::default();
    counts.iter().for_each(|c| pooled.add(c));
    Ok(F1Scores {
        mode,
        per_class: scored
            .iter()
            .zip(&counts)
            .map(|(c, n)| ClassScore::new(c, *n))
            .collect(),
        micro: ClassScore::new("micro", pooled),
    })
}

/// Span-level scores (headline) with token-level scores alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub span: F1Scores,
    pub token: F1Scores,
    /// Span micro-F1 over every entity class; absent when the model cannot
    /// predict all of them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
}

impl EvalReport {
    pub fn evaluate(
        predictions: &[Vec<String>],
        gold: &[LabeledSequence],
        classes: &[String],
        covers_all_entities: bool,
    ) -> Result<Self> {
        let span = evaluate_f1(predictions, gold, classes, F1Mode::Span)?;
        let token = evaluate_f1(predictions, gold, classes, F1Mode::Token)?;
        let micro_f1 = covers_all_entities.then_some(span.micro.f1);
        Ok(Self {
            span,
            token,
            micro_f1,
        })
    }

    /// Span F1 of one class, if it was scored.
    pub fn f1(&self, class: &str) -> Option<f64> {
        self.span.class(class).map(|c| c.f1)
    }
}
