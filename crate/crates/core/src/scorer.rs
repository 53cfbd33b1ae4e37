//! Field-level scoring: text normalization, ROUGE-1 F1, multilabel F1,
//! description-based order alignment, and the four-metric report.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Encounter, MedicalOrder};
use crate::parser::Predictions;

#[derive(Error, Debug)]
pub enum ScoreError {
    #[error("prediction id {0:?} does not exist in the gold corpus")]
    UnknownPredictionId(String),

    #[error("duplicate prediction id {0:?}")]
    DuplicatePredictionId(String),
}

/// Lowercase, strip the fixed punctuation set, collapse whitespace.
/// Hyphen and slash are kept so clinical terms like "x-ray" survive.
pub fn normalize_text(s: &str) -> String {
    const STRIP: &[char] = &['.', ',', ';', ':', '!', '?', '\'', '"', '(', ')'];
    let lowered = s.to_lowercase();
    let filtered: String = lowered.chars().filter(|c| !STRIP.contains(c)).collect();
    filtered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized whitespace tokens of a string.
pub fn tokenize(s: &str) -> Vec<String> {
    normalize_text(s)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn token_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    counts
}

/// ROUGE-1 F1 over clipped unigram counts of the normalized texts.
/// Both sides empty scores 1.0; one side empty scores 0.0.
pub fn rouge1_f1(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() && refr.is_empty() {
        return 1.0;
    }
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let cand_counts = token_counts(&cand);
    let ref_counts = token_counts(&refr);
    let overlap: usize = cand_counts
        .iter()
        .map(|(tok, &c)| c.min(ref_counts.get(tok).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand.len() as f64;
    let r = overlap as f64 / refr.len() as f64;
    2.0 * p * r / (p + r)
}

/// F1 over set intersection of predicted vs gold label sets.
/// Both sides empty scores 1.0; one side empty scores 0.0.
pub fn multilabel_f1(pred: &BTreeSet<u32>, gold: &BTreeSet<u32>) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let inter = pred.intersection(gold).count();
    if inter == 0 {
        return 0.0;
    }
    let p = inter as f64 / pred.len() as f64;
    let r = inter as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// A matched prediction/gold pair with the description similarity that
/// justified the match.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignedPair {
    pub pred_index: usize,
    pub gold_index: usize,
    pub description_similarity: f64,
}

/// The full outcome of pairing one encounter's predictions to its golds.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Alignment {
    pub pairs: Vec<AlignedPair>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gold: Vec<usize>,
    pub excluded_pred: Vec<usize>,
}

/// One-to-one pairing that maximizes total similarity over pairs with
/// similarity > 0. `sim[i][j]` is pred i vs gold j. Reconstruction is
/// deterministic: predictions in index order, each preferring the lowest
/// gold index that still achieves the optimal total.
pub fn align_by_similarity(sim: &[Vec<f64>]) -> Alignment {
    let n_pred = sim.len();
    let n_gold = sim.first().map(|r| r.len()).unwrap_or(0);
    let mut alignment = Alignment::default();

    if n_pred == 0 || n_gold == 0 {
        alignment.unmatched_pred = (0..n_pred).collect();
        alignment.unmatched_gold = (0..n_gold).collect();
        return alignment;
    }

    // DP over gold-availability bitmask; order counts per encounter are
    // small, so 2^n_gold is fine. Falls back to a greedy sweep if a
    // pathological encounter exceeds the mask width.
    if n_gold > 20 {
        return greedy_align(sim);
    }

    let full: usize = 1 << n_gold;
    // best[i][mask] = max total similarity pairing preds i.. with golds in mask
    let mut best = vec![vec![0.0f64; full]; n_pred + 1];
    for i in (0..n_pred).rev() {
        for mask in 0..full {
            let mut b = best[i + 1][mask]; // pred i unmatched
            for j in 0..n_gold {
                if mask & (1 << j) != 0 && sim[i][j] > 0.0 {
                    let v = sim[i][j] + best[i + 1][mask & !(1 << j)];
                    if v > b {
                        b = v;
                    }
                }
            }
            best[i][mask] = b;
        }
    }

    let mut mask = full - 1;
    let mut gold_used = vec![false; n_gold];
    const EPS: f64 = 1e-12;
    for i in 0..n_pred {
        let target = best[i][mask];
        let mut chosen = None;
        for j in 0..n_gold {
            if mask & (1 << j) != 0
                && sim[i][j] > 0.0
                && (sim[i][j] + best[i + 1][mask & !(1 << j)] - target).abs() <= EPS
            {
                chosen = Some(j);
                break;
            }
        }
        match chosen {
            Some(j) => {
                alignment.pairs.push(AlignedPair {
                    pred_index: i,
                    gold_index: j,
                    description_similarity: sim[i][j],
                });
                gold_used[j] = true;
                mask &= !(1 << j);
            }
            None => alignment.unmatched_pred.push(i),
        }
    }
    for (j, used) in gold_used.iter().enumerate() {
        if !used {
            alignment.unmatched_gold.push(j);
        }
    }
    alignment
}

fn greedy_align(sim: &[Vec<f64>]) -> Alignment {
    let n_pred = sim.len();
    let n_gold = sim[0].len();
    let mut candidates: Vec<(usize, usize)> = (0..n_pred)
        .flat_map(|i| (0..n_gold).map(move |j| (i, j)))
        .filter(|&(i, j)| sim[i][j] > 0.0)
        .collect();
    candidates.sort_by(|&(i1, j1), &(i2, j2)| {
        sim[i2][j2]
            .partial_cmp(&sim[i1][j1])
            .unwrap()
            .then(j1.cmp(&j2))
            .then(i1.cmp(&i2))
    });
    let mut alignment = Alignment::default();
    let mut pred_used = vec![false; n_pred];
    let mut gold_used = vec![false; n_gold];
    for (i, j) in candidates {
        if !pred_used[i] && !gold_used[j] {
            pred_used[i] = true;
            gold_used[j] = true;
            alignment.pairs.push(AlignedPair {
                pred_index: i,
                gold_index: j,
                description_similarity: sim[i][j],
            });
        }
    }
    alignment.unmatched_pred = (0..n_pred).filter(|&i| !pred_used[i]).collect();
    alignment.unmatched_gold = (0..n_gold).filter(|&j| !gold_used[j]).collect();
    alignment.pairs.sort_by_key(|p| p.pred_index);
    alignment
}

fn normalized_description(o: &MedicalOrder) -> String {
    normalize_text(o.description.as_deref().unwrap_or(""))
}

/// Pair predicted orders to gold orders on normalized-description
/// similarity. Predictions with an empty normalized description or an
/// order_type outside the allowed set are excluded up front.
pub fn align_orders(pred: &[MedicalOrder], gold: &[MedicalOrder]) -> Alignment {
    let mut eligible = Vec::new();
    let mut excluded = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        if p.order_type.is_valid() && !normalized_description(p).is_empty() {
            eligible.push(i);
        } else {
            excluded.push(i);
        }
    }

    let sim: Vec<Vec<f64>> = eligible
        .iter()
        .map(|&i| {
            gold.iter()
                .map(|g| {
                    rouge1_f1(
                        pred[i].description.as_deref().unwrap_or(""),
                        g.description.as_deref().unwrap_or(""),
                    )
                })
                .collect()
        })
        .collect();

    let mut inner = if eligible.is_empty() {
        let mut a = Alignment::default();
        a.unmatched_gold = (0..gold.len()).collect();
        a
    } else {
        align_by_similarity(&sim)
    };

    // Map eligible-local pred indices back to original positions.
    for pair in &mut inner.pairs {
        pair.pred_index = eligible[pair.pred_index];
    }
    inner.unmatched_pred = inner.unmatched_pred.iter().map(|&i| eligible[i]).collect();
    inner.excluded_pred = excluded;
    inner
}

/// Slot-level tallies pooled across one or more encounters.
#[derive(Debug, Clone, Default)]
struct ScoreAccumulator {
    desc_sum: f64,
    reason_sum: f64,
    prov_sum: f64,
    slots: usize,
    type_tp: usize,
    type_fp: usize,
    type_fn: usize,
    matched: usize,
    unmatched_pred: usize,
    unmatched_gold: usize,
    excluded_pred: usize,
}

impl ScoreAccumulator {
    fn add_encounter(&mut self, pred: &[MedicalOrder], gold: &[MedicalOrder]) {
        let alignment = align_orders(pred, gold);
        for pair in &alignment.pairs {
            let p = &pred[pair.pred_index];
            let g = &gold[pair.gold_index];
            self.desc_sum += rouge1_f1(
                p.description.as_deref().unwrap_or(""),
                g.description.as_deref().unwrap_or(""),
            );
            self.reason_sum += reason_score(p.reason.as_deref(), g.reason.as_deref());
            self.prov_sum += multilabel_f1(&p.provenance_set(), &g.provenance_set());
            if p.order_type == g.order_type {
                self.type_tp += 1;
            }
        }
        self.slots +=
            alignment.pairs.len() + alignment.unmatched_pred.len() + alignment.unmatched_gold.len();
        self.type_fp += pred.len() - alignment.excluded_pred.len()
            - alignment
                .pairs
                .iter()
                .filter(|pair| pred[pair.pred_index].order_type == gold[pair.gold_index].order_type)
                .count();
        self.type_fn += gold.len()
            - alignment
                .pairs
                .iter()
                .filter(|pair| pred[pair.pred_index].order_type == gold[pair.gold_index].order_type)
                .count();
        self.matched += alignment.pairs.len();
        self.unmatched_pred += alignment.unmatched_pred.len();
        self.unmatched_gold += alignment.unmatched_gold.len();
        self.excluded_pred += alignment.excluded_pred.len();
    }

    fn report(&self) -> ScoreReport {
        let slot_mean = |sum: f64| {
            if self.slots == 0 {
                1.0
            } else {
                sum / self.slots as f64
            }
        };
        let type_f1 = if self.type_tp + self.type_fp + self.type_fn == 0 {
            1.0
        } else {
            2.0 * self.type_tp as f64
                / (2.0 * self.type_tp as f64 + self.type_fp as f64 + self.type_fn as f64)
        };
        let description = slot_mean(self.desc_sum);
        let reason = slot_mean(self.reason_sum);
        let provenance = slot_mean(self.prov_sum);
        ScoreReport {
            description_rouge1_f1: description,
            reason_rouge1_f1: reason,
            order_type_strict_f1: type_f1,
            provenance_multilabel_f1: provenance,
            avg_score: (description + reason + type_f1 + provenance) / 4.0,
            counts: MatchCounts {
                matched: self.matched,
                unmatched_pred: self.unmatched_pred,
                unmatched_gold: self.unmatched_gold,
                excluded_pred: self.excluded_pred,
            },
        }
    }
}

fn is_absent(s: Option<&str>) -> bool {
    s.map(|t| normalize_text(t).is_empty()).unwrap_or(true)
}

/// Reason scoring on a matched pair: both absent is a correct "no reason"
/// and scores 1.0; one absent scores 0; otherwise ROUGE-1 F1.
fn reason_score(pred: Option<&str>, gold: Option<&str>) -> f64 {
    match (is_absent(pred), is_absent(gold)) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => rouge1_f1(pred.unwrap(), gold.unwrap()),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub matched: usize,
    pub unmatched_pred: usize,
    pub unmatched_gold: usize,
    pub excluded_pred: usize,
}

/// Per-field F1 scores (0..1) and their unweighted mean.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub description_rouge1_f1: f64,
    pub reason_rouge1_f1: f64,
    pub order_type_strict_f1: f64,
    pub provenance_multilabel_f1: f64,
    pub avg_score: f64,
    pub counts: MatchCounts,
}

impl ScoreReport {
    /// Aligned-column table with the shared-task row labels, values x100.
    pub fn render_table(&self) -> String {
        let rows = [
            ("description_ROUGE1_f1", self.description_rouge1_f1),
            ("reason_ROUGE1_f1", self.reason_rouge1_f1),
            ("order_type_Strict_f1", self.order_type_strict_f1),
            ("provenance_MultiLabel_f1", self.provenance_multilabel_f1),
            ("avg_score", self.avg_score),
        ];
        let mut out = String::new();
        for (label, value) in rows {
            out.push_str(&format!("{label:<26} {:>7.2}\n", value * 100.0));
        }
        out
    }
}

/// Score a single encounter's predictions against its gold orders.
pub fn score_encounter(pred: &[MedicalOrder], gold: &[MedicalOrder]) -> ScoreReport {
    let mut acc = ScoreAccumulator::default();
    acc.add_encounter(pred, gold);
    acc.report()
}

/// Corpus score plus the per-encounter breakdown, in gold corpus order.
#[derive(Debug, Clone, Serialize)]
pub struct CorpusScore {
    pub overall: ScoreReport,
    pub per_encounter: Vec<EncounterScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EncounterScore {
    pub id: String,
    pub report: ScoreReport,
}

/// Score a prediction set against a gold corpus. Slots and strict-F1
/// counters are pooled across encounters before the corpus-level metrics
/// are computed. Gold encounters without a prediction entry are scored as
/// empty predictions.
pub fn score_corpus(predictions: &Predictions, gold: &[Encounter]) -> Result<CorpusScore, ScoreError> {
    let mut by_id: BTreeMap<&str, &[MedicalOrder]> = BTreeMap::new();
    for entry in &predictions.entries {
        if by_id.insert(&entry.id, &entry.orders).is_some() {
            return Err(ScoreError::DuplicatePredictionId(entry.id.clone()));
        }
    }
    let gold_ids: BTreeSet<&str> = gold.iter().map(|e| e.id.as_str()).collect();
    for entry in &predictions.entries {
        if !gold_ids.contains(entry.id.as_str()) {
            return Err(ScoreError::UnknownPredictionId(entry.id.clone()));
        }
    }

    let mut pooled = ScoreAccumulator::default();
    let mut per_encounter = Vec::with_capacity(gold.len());
    for e in gold {
        let pred = by_id.get(e.id.as_str()).copied().unwrap_or(&[]);
        pooled.add_encounter(pred, e.gold());
        per_encounter.push(EncounterScore {
            id: e.id.clone(),
            report: score_encounter(pred, e.gold()),
        });
    }
    Ok(CorpusScore {
        overall: pooled.report(),
        per_encounter,
    })
}
