//! Evaluation: token-level macro P/R/F1 over the six concept types,
//! exact-match relation metrics over the five relation labels, and a
//! type-level confusion matrix.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Bio, LabelVocab, RELATION_LABELS, TYPE_LABELS};

/// How tags are compared in token metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    /// Collapse B-/I- prefixes to the type label before counting.
    #[default]
    TypeToken,
    /// Score full BIO tags.
    BioToken,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when the label occurs in neither gold nor predictions and is
    /// therefore excluded from the macro average.
    pub in_macro: bool,
}

impl LabelScore {
    fn finish(mut self) -> LabelScore {
        self.precision = ratio(self.tp, self.tp + self.fp);
        self.recall = ratio(self.tp, self.tp + self.fn_);
        self.f1 = if self.precision + self.recall == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        };
        self.in_macro = self.tp + self.fp + self.fn_ > 0;
        self
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_label: IndexMap<String, LabelScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub warnings: Vec<String>,
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricsReport {
    fn from_scores(per_label: IndexMap<String, LabelScore>) -> MetricsReport {
        let included: Vec<&LabelScore> =
            per_label.values().filter(|s| s.in_macro).collect();
        let mut warnings = Vec::new();
        let (p, r, f1) = if included.is_empty() {
            warnings.push(
                "no label occurs in gold or predictions; macro scores reported as 0".into(),
            );
            (0.0, 0.0, 0.0)
        } else {
            let n = included.len() as f64;
            (
                included.iter().map(|s| s.precision).sum::<f64>() / n,
                included.iter().map(|s| s.recall).sum::<f64>() / n,
                included.iter().map(|s| s.f1).sum::<f64>() / n,
            )
        };
        MetricsReport {
            per_label,
            macro_precision: p,
            macro_recall: r,
            macro_f1: f1,
            warnings,
            confusion: None,
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}",
            "label", "P", "R", "F1", "tp", "fp", "fn"
        )?;
        for (label, s) in &self.per_label {
            let mark = if s.in_macro { "" } else { " (excluded)" };
            writeln!(
                f,
                "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}{mark}",
                label, s.precision, s.recall, s.f1, s.tp, s.fp, s.fn_
            )?;
        }
        writeln!(
            f,
            "{:<24} {:>9.4} {:>9.4} {:>9.4}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        )?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        if let Some(c) = &self.confusion {
            writeln!(f)?;
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

fn check_aligned(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Schema(format!(
            "{} gold sequences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Schema(format!(
                "sequence {i}: gold length {} vs predicted {}",
                g.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

/// Label string a tag id counts under, or None for O.
fn counted_label(vocab: &LabelVocab, tag: usize, mode: TokenMode) -> Option<String> {
    match mode {
        TokenMode::TypeToken => match vocab.parse(tag) {
            Bio::Outside => None,
            Bio::Begin(ty) | Bio::Inside(ty) => Some(TYPE_LABELS[ty].to_string()),
        },
        TokenMode::BioToken => (tag != vocab.outside_id()).then(|| vocab.tag(tag).to_string()),
    }
}

/// Token-level metrics over aligned gold/predicted tag-id sequences.
pub fn token_metrics(
    gold: &[Vec<usize>],
    pred: &[Vec<usize>],
    mode: TokenMode,
) -> Result<MetricsReport> {
    check_aligned(gold, pred)?;
    let vocab = LabelVocab::new();
    let names: Vec<String> = match mode {
        TokenMode::TypeToken => TYPE_LABELS.iter().map(|s| s.to_string()).collect(),
        TokenMode::BioToken => (1..vocab.len()).map(|t| vocab.tag(t).to_string()).collect(),
    };
    let mut scores: IndexMap<String, LabelScore> = names
        .iter()
        .map(|n| (n.clone(), LabelScore::default()))
        .collect();
    for (g_seq, p_seq) in gold.iter().zip(pred) {
        for (&g, &p) in g_seq.iter().zip(p_seq) {
            let gl = counted_label(&vocab, g, mode);
            let pl = counted_label(&vocab, p, mode);
            if gl == pl {
                if let Some(l) = gl {
                    scores[&l].tp += 1;
                }
            } else {
                if let Some(l) = gl {
                    scores[&l].fn_ += 1;
                }
                if let Some(l) = pl {
                    scores[&l].fp += 1;
                }
            }
        }
    }
    let finished = scores.into_iter().map(|(k, v)| (k, v.finish())).collect();
    let mut report = MetricsReport::from_scores(finished);
    report.confusion = Some(confusion_matrix(gold, pred)?);
    Ok(report)
}

/// Relation metrics: a prediction is a true positive iff head token, tail
/// token, and label all match a gold relation of the same example.
pub fn relation_metrics(
    gold: &[Vec<(usize, usize, usize)>],
    pred: &[Vec<(usize, usize, usize)>],
) -> Result<MetricsReport> {
    if gold.len() != pred.len() {
        return Err(Error::Schema(format!(
            "{} gold examples vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut scores: IndexMap<String, LabelScore> = RELATION_LABELS
        .iter()
        .map(|n| (n.to_string(), LabelScore::default()))
        .collect();
    for (g_rels, p_rels) in gold.iter().zip(pred) {
        for &(h, t, k) in p_rels {
            let name = relation_name(k)?;
            if g_rels.contains(&(h, t, k)) {
                scores[name].tp += 1;
            } else {
                scores[name].fp += 1;
            }
        }
        for &(h, t, k) in g_rels {
            let name = relation_name(k)?;
            if !p_rels.contains(&(h, t, k)) {
                scores[name].fn_ += 1;
            }
        }
    }
    let finished = scores.into_iter().map(|(k, v)| (k, v.finish())).collect();
    Ok(MetricsReport::from_scores(finished))
}

fn relation_name(k: usize) -> Result<&'static str> {
    RELATION_LABELS
        .get(k.checked_sub(1).ok_or_else(|| {
            Error::Schema("relation label index 0 is the negative class".into())
        })?)
        .copied()
        .ok_or_else(|| Error::Schema(format!("relation label index {k} out of range")))
}

/// Token-level confusion counts over collapsed type labels plus O.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Row/column labels: the six types followed by "O".
    pub labels: Vec<String>,
    /// counts[gold][pred].
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn type_index(vocab: &LabelVocab, tag: usize) -> usize {
        match vocab.parse(tag) {
            Bio::Outside => TYPE_LABELS.len(),
            Bio::Begin(ty) | Bio::Inside(ty) => ty,
        }
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<24}", "gold \\ pred")?;
        for l in &self.labels {
            write!(f, " {:>8}", shorten(l))?;
        }
        writeln!(f)?;
        for (i, row) in self.counts.iter().enumerate() {
            write!(f, "{:<24}", self.labels[i])?;
            for &c in row {
                write!(f, " {c:>8}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn shorten(label: &str) -> String {
    if label.len() <= 8 {
        label.to_string()
    } else {
        let tail: String = label
            .split('-')
            .map(|part| part.chars().next().unwrap_or('?'))
            .collect();
        tail
    }
}

pub fn confusion_matrix(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<ConfusionMatrix> {
    check_aligned(gold, pred)?;
    let vocab = LabelVocab::new();
    let n = TYPE_LABELS.len() + 1;
    let mut counts = vec![vec![0usize; n]; n];
    for (g_seq, p_seq) in gold.iter().zip(pred) {
        for (&g, &p) in g_seq.iter().zip(p_seq) {
            let gi = ConfusionMatrix::type_index(&vocab, g);
            let pi = ConfusionMatrix::type_index(&vocab, p);
            counts[gi][pi] += 1;
        }
    }
    let mut labels: Vec<String> = TYPE_LABELS.iter().map(|s| s.to_string()).collect();
    labels.push("O".into());
    Ok(ConfusionMatrix { labels, counts })
}
