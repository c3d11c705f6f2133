//! Evaluation: per-category and weighted-average F1 over emotion-cause pairs,
//! the utterance-level emotion confusion matrix, neutral leakage, window
//! ablation curves, and per-conversation mismatch analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmotionCausePair, EmotionLabel, UtteranceKey};

/// Pairs grouped by conversation id.
pub type PairSet = BTreeMap<String, Vec<EmotionCausePair>>;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ablation curve needs at least one result")]
    EmptyCurve,
    #[error("window {0} appears more than once")]
    DuplicateWindow(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `a / b` with `0 / 0 = 0`.
fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: EmotionLabel,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold pair count `tp + fn`.
    pub n: usize,
}

impl CategoryScore {
    fn from_counts(category: EmotionLabel, tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        CategoryScore {
            category,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1(precision, recall),
            n: tp + fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_category: Vec<CategoryScore>,
    pub weighted_f1: f64,
    /// Unweighted mean of the six category F1 scores.
    pub macro_f1: f64,
    pub gold_pairs: usize,
    pub predicted_pairs: usize,
    pub true_positives: usize,
}

impl MetricsReport {
    pub fn from_categories(per_category: Vec<CategoryScore>) -> Self {
        let total_n: usize = per_category.iter().map(|c| c.n).sum();
        let weighted = per_category.iter().map(|c| c.n as f64 * c.f1).sum::<f64>();
        MetricsReport {
            weighted_f1: ratio(weighted, total_n as f64),
            macro_f1: per_category.iter().map(|c| c.f1).sum::<f64>() / per_category.len() as f64,
            gold_pairs: total_n,
            predicted_pairs: per_category.iter().map(|c| c.tp + c.fp).sum(),
            true_positives: per_category.iter().map(|c| c.tp).sum(),
            per_category,
        }
    }

    pub fn category(&self, label: EmotionLabel) -> Option<&CategoryScore> {
        self.per_category.iter().find(|c| c.category == label)
    }

    pub fn false_positives(&self) -> usize {
        self.per_category.iter().map(|c| c.fp).sum()
    }

    pub fn false_negatives(&self) -> usize {
        self.per_category.iter().map(|c| c.fn_).sum()
    }
}

/// Multiset of pairs in one conversation.
fn tally(pairs: &[EmotionCausePair]) -> BTreeMap<EmotionCausePair, usize> {
    let mut counts = BTreeMap::new();
    for pair in pairs {
        *counts.entry(*pair).or_insert(0) += 1;
    }
    counts
}

/// Scores predicted pairs against gold pairs.
///
/// A predicted pair is a true positive when an unconsumed gold pair in the same
/// conversation has the same `(eu, ec, cu)`; each gold pair is consumed at most
/// once. A pair is counted under its own emotion category, so a pair with the
/// right utterances but the wrong emotion is a false positive for its
/// predicted category and a false negative for the gold one. Neutral pairs are
/// outside the six scored categories and are ignored.
pub fn score_pairs(gold: &PairSet, predicted: &PairSet) -> MetricsReport {
    let mut tp = [0usize; EmotionLabel::COUNT];
    let mut gold_n = [0usize; EmotionLabel::COUNT];
    let mut pred_n = [0usize; EmotionLabel::COUNT];

    let ids: BTreeSet<&String> = gold.keys().chain(predicted.keys()).collect();
    let empty = Vec::new();
    for id in ids {
        let g = tally(gold.get(id).unwrap_or(&empty));
        let p = tally(predicted.get(id).unwrap_or(&empty));
        for (pair, count) in &g {
            gold_n[pair.emotion.index()] += count;
        }
        for (pair, count) in &p {
            let c = pair.emotion.index();
            pred_n[c] += count;
            tp[c] += (*count).min(g.get(pair).copied().unwrap_or(0));
        }
    }

    let per_category = EmotionLabel::SCORED
        .iter()
        .map(|&label| {
            let c = label.index();
            CategoryScore::from_counts(label, tp[c], pred_n[c] - tp[c], gold_n[c] - tp[c])
        })
        .collect();
    MetricsReport::from_categories(per_category)
}

/// 7×7 counts; rows are gold emotions and columns predicted emotions, both in
/// label order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; EmotionLabel::COUNT]; EmotionLabel::COUNT],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (EmotionLabel, EmotionLabel)>) -> Self {
        let mut matrix = ConfusionMatrix::default();
        for (gold, predicted) in pairs {
            matrix.counts[gold.index()][predicted.index()] += 1;
        }
        matrix
    }

    pub fn get(&self, gold: EmotionLabel, predicted: EmotionLabel) -> u64 {
        self.counts[gold.index()][predicted.index()]
    }

    pub fn row_sum(&self, gold: EmotionLabel) -> u64 {
        self.counts[gold.index()].iter().sum()
    }

    pub fn column_sum(&self, predicted: EmotionLabel) -> u64 {
        self.counts.iter().map(|row| row[predicted.index()]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..EmotionLabel::COUNT).map(|i| self.counts[i][i]).sum();
        ratio(correct as f64, self.total() as f64)
    }

    /// Per-class F1 over all seven classes.
    pub fn class_f1(&self, label: EmotionLabel) -> f64 {
        let tp = self.get(label, label) as f64;
        let precision = ratio(tp, self.column_sum(label) as f64);
        let recall = ratio(tp, self.row_sum(label) as f64);
        f1(precision, recall)
    }

    /// Support-weighted F1 over the seven classes.
    pub fn weighted_f1(&self) -> f64 {
        let weighted: f64 = EmotionLabel::ALL
            .iter()
            .map(|&l| self.row_sum(l) as f64 * self.class_f1(l))
            .sum();
        ratio(weighted, self.total() as f64)
    }

    /// CSV grid with label names as the header row and first column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["gold\\predicted".to_string()];
        header.extend(EmotionLabel::ALL.iter().map(|l| l.to_string()));
        out.write_record(&header)?;
        for label in EmotionLabel::ALL {
            let mut row = vec![label.to_string()];
            row.extend(self.counts[label.index()].iter().map(|c| c.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>9}", "gold\\pred")?;
        for l in EmotionLabel::ALL {
            write!(f, " {:>8}", l.as_str())?;
        }
        writeln!(f)?;
        for g in EmotionLabel::ALL {
            write!(f, "{:>9}", g.as_str())?;
            for p in EmotionLabel::ALL {
                write!(f, " {:>8}", self.get(g, p))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionOutcome {
    pub matrix: ConfusionMatrix,
    /// Predictions whose utterance has no gold label.
    pub unlabeled: usize,
}

/// Tallies predictions against gold labels looked up by utterance key.
pub fn emotion_confusion<'a>(
    gold: &BTreeMap<UtteranceKey, Option<EmotionLabel>>,
    predictions: impl IntoIterator<Item = (&'a UtteranceKey, EmotionLabel)>,
) -> ConfusionOutcome {
    let mut matrix = ConfusionMatrix::default();
    let mut unlabeled = 0;
    for (key, predicted) in predictions {
        match gold.get(key).copied().flatten() {
            Some(g) => matrix.counts[g.index()][predicted.index()] += 1,
            None => unlabeled += 1,
        }
    }
    ConfusionOutcome { matrix, unlabeled }
}

/// Fraction of gold non-neutral utterances predicted as neutral.
pub fn neutral_leakage(matrix: &ConfusionMatrix) -> f64 {
    let (leaked, total) = EmotionLabel::SCORED
        .iter()
        .fold((0u64, 0u64), |(l, t), &g| {
            (
                l + matrix.get(g, EmotionLabel::Neutral),
                t + matrix.row_sum(g),
            )
        });
    ratio(leaked as f64, total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub window: usize,
    pub weighted_f1: f64,
}

/// Sorts results by window size; window sizes must be distinct.
pub fn ablation_curve(
    results: &[(usize, MetricsReport)],
) -> Result<Vec<AblationRow>, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyCurve);
    }
    let mut rows: Vec<AblationRow> = results
        .iter()
        .map(|(w, r)| AblationRow {
            window: *w,
            weighted_f1: r.weighted_f1,
        })
        .collect();
    rows.sort_by_key(|r| r.window);
    if let Some(pair) = rows.windows(2).find(|p| p[0].window == p[1].window) {
        return Err(MetricsError::DuplicateWindow(pair[0].window));
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], writer: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["w", "weighted_f1"])?;
    for r in rows {
        out.write_record([r.window.to_string(), r.weighted_f1.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MismatchKind {
    /// Gold pair with no prediction for its emotion utterance.
    MissedCause,
    /// Right emotion utterance, wrong cause utterance.
    WrongCause,
    /// Right utterances, wrong emotion category.
    WrongEmotion,
    /// Predicted pair for an utterance with no gold pair.
    SpuriousPair,
}

impl fmt::Display for MismatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MismatchKind::MissedCause => "missed-cause",
            MismatchKind::WrongCause => "wrong-cause",
            MismatchKind::WrongEmotion => "wrong-emotion",
            MismatchKind::SpuriousPair => "spurious-pair",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub kind: MismatchKind,
    pub gold: Option<EmotionCausePair>,
    pub predicted: Option<EmotionCausePair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationMismatches {
    pub conversation_id: String,
    pub mismatches: Vec<Mismatch>,
}

/// Classifies every unmatched gold and predicted pair, per conversation.
/// Conversations are ordered by mismatch count (descending), then id.
pub fn pair_mismatches(gold: &PairSet, predicted: &PairSet) -> Vec<ConversationMismatches> {
    let ids: BTreeSet<&String> = gold.keys().chain(predicted.keys()).collect();
    let empty = Vec::new();
    let mut out = Vec::new();
    for id in ids {
        let mut g = tally(gold.get(id).unwrap_or(&empty));
        let mut p = tally(predicted.get(id).unwrap_or(&empty));
        for (pair, count) in p.iter_mut() {
            if let Some(gc) = g.get_mut(pair) {
                let matched = (*gc).min(*count);
                *gc -= matched;
                *count -= matched;
            }
        }
        let expand = |m: BTreeMap<EmotionCausePair, usize>| -> Vec<EmotionCausePair> {
            m.into_iter()
                .flat_map(|(pair, n)| std::iter::repeat_n(pair, n))
                .collect()
        };
        let mut missed = expand(g);
        let extra = expand(p);

        let mut mismatches = Vec::new();
        for pred in extra {
            let partner = missed
                .iter()
                .position(|gp| {
                    gp.emotion_utterance == pred.emotion_utterance
                        && gp.cause_utterance == pred.cause_utterance
                })
                .map(|i| (i, MismatchKind::WrongEmotion))
                .or_else(|| {
                    missed
                        .iter()
                        .position(|gp| gp.emotion_utterance == pred.emotion_utterance)
                        .map(|i| (i, MismatchKind::WrongCause))
                });
            match partner {
                Some((i, kind)) => mismatches.push(Mismatch {
                    kind,
                    gold: Some(missed.remove(i)),
                    predicted: Some(pred),
                }),
                None => mismatches.push(Mismatch {
                    kind: MismatchKind::SpuriousPair,
                    gold: None,
                    predicted: Some(pred),
                }),
            }
        }
        mismatches.extend(missed.into_iter().map(|gp| Mismatch {
            kind: MismatchKind::MissedCause,
            gold: Some(gp),
            predicted: None,
        }));
        if !mismatches.is_empty() {
            mismatches.sort_by_key(|m| (m.kind, m.gold, m.predicted));
            out.push(ConversationMismatches {
                conversation_id: id.clone(),
                mismatches,
            });
        }
    }
    out.sort_by(|a, b| {
        b.mismatches
            .len()
            .cmp(&a.mismatches.len())
            .then_with(|| a.conversation_id.cmp(&b.conversation_id))
    });
    out
}
