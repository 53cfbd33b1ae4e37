//! Error-analysis audit over prediction files: schema-violation counts and
//! token-level groundedness checks.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Encounter, MedicalOrder, OrderLabel};
use crate::parser::Predictions;
use crate::scorer::{normalize_text, tokenize};

#[derive(Error, Debug)]
pub enum AuditError {
    #[error("prediction id {0:?} does not exist in the corpus")]
    UnknownPredictionId(String),
}

/// Fixed stopword list used by the groundedness proxy (articles,
/// prepositions, auxiliaries), shipped with the artifact so results are
/// stable across runs.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "in", "on", "for", "and", "or", "at", "by", "as", "with",
    "from", "is", "are", "was", "were", "be", "been", "being", "it", "this", "that", "these",
    "those", "do", "does", "did", "will", "would", "should", "can", "could", "may", "might",
    "have", "has", "had",
];

/// Token-level grounding of generated text against the transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Groundedness {
    Grounded,
    PartiallyGrounded,
    Ungrounded,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CountFraction {
    pub count: usize,
    pub fraction: f64,
}

impl CountFraction {
    fn of(count: usize, total: usize) -> Self {
        CountFraction {
            count,
            fraction: if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            },
        }
    }
}

/// Schema-violation and groundedness tallies over a prediction set.
/// Groundedness is a token-containment proxy, not a human judgment, and
/// is labeled as such in reports.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub total_orders: usize,
    pub missing_description: CountFraction,
    pub invalid_order_type: CountFraction,
    pub invalid_order_type_labels: BTreeMap<String, usize>,
    pub missing_reason: CountFraction,
    pub missing_provenance: CountFraction,
    pub ungrounded_description: usize,
    pub ungrounded_reason: usize,
}

impl AuditReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("total_orders               {:>6}\n", self.total_orders));
        let row = |label: &str, cf: &CountFraction| {
            format!("{label:<26} {:>6}  ({:.1}%)\n", cf.count, cf.fraction * 100.0)
        };
        out.push_str(&row("missing_description", &self.missing_description));
        out.push_str(&row("invalid_order_type", &self.invalid_order_type));
        for (label, count) in &self.invalid_order_type_labels {
            out.push_str(&format!("    {label:<22} {count:>6}\n"));
        }
        out.push_str(&row("missing_reason", &self.missing_reason));
        out.push_str(&row("missing_provenance", &self.missing_provenance));
        out.push_str(&format!(
            "ungrounded_description     {:>6}  (token-containment proxy)\n",
            self.ungrounded_description
        ));
        out.push_str(&format!(
            "ungrounded_reason          {:>6}  (token-containment proxy)\n",
            self.ungrounded_reason
        ));
        out
    }
}

fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

fn transcript_vocabulary(encounter: &Encounter) -> BTreeSet<String> {
    encounter
        .turns
        .iter()
        .flat_map(|t| tokenize(&t.utterance))
        .collect()
}

fn grade_tokens(tokens: &[String], vocabulary: &BTreeSet<String>) -> Groundedness {
    if tokens.is_empty() {
        return Groundedness::Grounded;
    }
    let present = tokens.iter().filter(|t| vocabulary.contains(*t)).count();
    if present == tokens.len() {
        Groundedness::Grounded
    } else if present * 2 >= tokens.len() {
        Groundedness::PartiallyGrounded
    } else {
        Groundedness::Ungrounded
    }
}

/// Grade an order's description against the transcript: grounded when every
/// content token appears somewhere in the transcript, partial when at least
/// half do.
pub fn groundedness_check(order: &MedicalOrder, encounter: &Encounter) -> Groundedness {
    let description = order.description.as_deref().unwrap_or("");
    grade_tokens(&content_tokens(description), &transcript_vocabulary(encounter))
}

/// Same grading applied to the reason field.
pub fn reason_groundedness(order: &MedicalOrder, encounter: &Encounter) -> Groundedness {
    let reason = order.reason.as_deref().unwrap_or("");
    grade_tokens(&content_tokens(reason), &transcript_vocabulary(encounter))
}

/// Set precision/recall of a predicted provenance against gold.
pub fn provenance_coverage(order: &MedicalOrder, gold_order: &MedicalOrder) -> (f64, f64) {
    let pred = order.provenance_set();
    let gold = gold_order.provenance_set();
    let inter = pred.intersection(&gold).count();
    let precision = if pred.is_empty() {
        0.0
    } else {
        inter as f64 / pred.len() as f64
    };
    let recall = if gold.is_empty() {
        0.0
    } else {
        inter as f64 / gold.len() as f64
    };
    (precision, recall)
}

fn is_missing(text: Option<&str>) -> bool {
    text.map(|t| normalize_text(t).is_empty()).unwrap_or(true)
}

/// Tally schema violations and groundedness over every predicted order.
pub fn audit_predictions(
    predictions: &Predictions,
    corpus: &[Encounter],
) -> Result<AuditReport, AuditError> {
    let by_id: BTreeMap<&str, &Encounter> = corpus.iter().map(|e| (e.id.as_str(), e)).collect();

    let mut total = 0usize;
    let mut missing_description = 0usize;
    let mut invalid_type = 0usize;
    let mut invalid_labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut missing_reason = 0usize;
    let mut missing_provenance = 0usize;
    let mut ungrounded_description = 0usize;
    let mut ungrounded_reason = 0usize;

    for entry in &predictions.entries {
        let encounter = by_id
            .get(entry.id.as_str())
            .ok_or_else(|| AuditError::UnknownPredictionId(entry.id.clone()))?;
        let vocabulary = transcript_vocabulary(encounter);
        for order in &entry.orders {
            total += 1;
            if is_missing(order.description.as_deref()) {
                missing_description += 1;
            } else if grade_tokens(
                &content_tokens(order.description.as_deref().unwrap()),
                &vocabulary,
            ) == Groundedness::Ungrounded
            {
                ungrounded_description += 1;
            }
            if let OrderLabel::Invalid(label) = &order.order_type {
                invalid_type += 1;
                *invalid_labels.entry(label.clone()).or_default() += 1;
            }
            if is_missing(order.reason.as_deref()) {
                missing_reason += 1;
            } else if grade_tokens(&content_tokens(order.reason.as_deref().unwrap()), &vocabulary)
                == Groundedness::Ungrounded
            {
                ungrounded_reason += 1;
            }
            if order.provenance.as_ref().map(BTreeSet::is_empty).unwrap_or(true) {
                missing_provenance += 1;
            }
        }
    }

    Ok(AuditReport {
        total_orders: total,
        missing_description: CountFraction::of(missing_description, total),
        invalid_order_type: CountFraction::of(invalid_type, total),
        invalid_order_type_labels: invalid_labels,
        missing_reason: CountFraction::of(missing_reason, total),
        missing_provenance: CountFraction::of(missing_provenance, total),
        ungrounded_description,
        ungrounded_reason,
    })
}
