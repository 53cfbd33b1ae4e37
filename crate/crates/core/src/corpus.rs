//! Corpus loading, validation, and profiling for transcript files with
//! optional gold-standard order annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("malformed JSON at byte offset {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("encounter {id}: {message}")]
    Validation { id: String, message: String },

    #[error("{0}")]
    Domain(String),
}

/// Who is speaking in a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Speaker {
    #[serde(rename = "DOCTOR")]
    Doctor,
    #[serde(rename = "PATIENT")]
    Patient,
}

impl Speaker {
    pub fn as_str(&self) -> &'static str {
        match self {
            Speaker::Doctor => "DOCTOR",
            Speaker::Patient => "PATIENT",
        }
    }

    /// Case-insensitive normalization; anything other than doctor/patient is rejected.
    pub fn parse(label: &str) -> Option<Speaker> {
        match label.trim().to_ascii_lowercase().as_str() {
            "doctor" => Some(Speaker::Doctor),
            "patient" => Some(Speaker::Patient),
            _ => None,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One utterance in an encounter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub turn_id: u32,
    pub speaker: Speaker,
    pub utterance: String,
}

/// The four permitted order categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OrderType {
    Medication,
    Lab,
    Imaging,
    Followup,
}

impl OrderType {
    pub const ALL: [OrderType; 4] = [
        OrderType::Medication,
        OrderType::Lab,
        OrderType::Imaging,
        OrderType::Followup,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OrderType::Medication => "medication",
            OrderType::Lab => "lab",
            OrderType::Imaging => "imaging",
            OrderType::Followup => "followup",
        }
    }
}

impl FromStr for OrderType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "medication" => Ok(OrderType::Medication),
            "lab" => Ok(OrderType::Lab),
            "imaging" => Ok(OrderType::Imaging),
            "followup" | "follow-up" | "follow_up" => Ok(OrderType::Followup),
            _ => Err(()),
        }
    }
}

impl fmt::Display for OrderType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An order's type label: either one of the four known categories, or the
/// literal label the model produced when it fell outside the allowed set.
/// Invalid labels are preserved so the audit can count them.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OrderLabel {
    Known(OrderType),
    Invalid(String),
}

impl OrderLabel {
    pub fn parse(s: &str) -> OrderLabel {
        match OrderType::from_str(s) {
            Ok(t) => OrderLabel::Known(t),
            Err(()) => OrderLabel::Invalid(s.trim().to_string()),
        }
    }

    pub fn as_known(&self) -> Option<OrderType> {
        match self {
            OrderLabel::Known(t) => Some(*t),
            OrderLabel::Invalid(_) => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, OrderLabel::Known(_))
    }
}

impl fmt::Display for OrderLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderLabel::Known(t) => f.write_str(t.as_str()),
            OrderLabel::Invalid(s) => f.write_str(s),
        }
    }
}

/// A (type, description, reason, provenance) order tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MedicalOrder {
    pub order_type: OrderLabel,
    pub description: Option<String>,
    pub reason: Option<String>,
    pub provenance: Option<BTreeSet<u32>>,
}

impl MedicalOrder {
    pub fn new(
        order_type: OrderLabel,
        description: Option<String>,
        reason: Option<String>,
        provenance: Option<BTreeSet<u32>>,
    ) -> Self {
        MedicalOrder {
            order_type,
            description,
            reason,
            provenance,
        }
    }

    /// A valid order has a known type and a non-empty description.
    pub fn is_valid(&self) -> bool {
        self.order_type.is_valid()
            && self
                .description
                .as_deref()
                .map(|d| !d.trim().is_empty())
                .unwrap_or(false)
    }

    pub fn provenance_set(&self) -> BTreeSet<u32> {
        self.provenance.clone().unwrap_or_default()
    }
}

/// One complete conversation with its turns and optional gold orders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encounter {
    pub id: String,
    pub turns: Vec<Turn>,
    pub gold_orders: Option<Vec<MedicalOrder>>,
}

impl Encounter {
    pub fn turn_ids(&self) -> BTreeSet<u32> {
        self.turns.iter().map(|t| t.turn_id).collect()
    }

    pub fn gold(&self) -> &[MedicalOrder] {
        self.gold_orders.as_deref().unwrap_or(&[])
    }
}

/// Whether to keep gold annotations when loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadRole {
    WithGold,
    TranscriptsOnly,
}

/// A single invariant violation, reported as data rather than an error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: &str, rule: impl Into<String>) -> Self {
        Violation {
            field: field.to_string(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Corpus-level profile of encounters, turns, and gold orders.
#[derive(Debug, Clone, Serialize)]
pub struct CorpusStats {
    pub encounter_count: usize,
    pub orders_by_type: BTreeMap<String, usize>,
    pub mean_turns: f64,
    pub max_turns: usize,
    pub turns_by_speaker: BTreeMap<String, usize>,
    pub tokens_by_speaker: BTreeMap<String, usize>,
    pub missing_reason_fraction: f64,
    pub mean_provenance_span: f64,
}

// ---------------------------------------------------------------------------
// Wire format

/// Provenance in input files may be a list of ints, a list of numeric
/// strings, or one whitespace/comma-separated string.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawProvenance {
    Ints(Vec<i64>),
    Strings(Vec<String>),
    Text(String),
}

#[derive(Debug, Deserialize)]
pub(crate) struct RawOrder {
    pub order_type: String,
    pub description: Option<String>,
    pub reason: Option<String>,
    #[serde(default)]
    provenance: Option<RawProvenance>,
}

#[derive(Debug, Deserialize)]
struct RawTurn {
    turn_id: u32,
    speaker: String,
    #[serde(alias = "utterance", alias = "text")]
    transcript: String,
}

#[derive(Debug, Deserialize)]
struct RawEncounter {
    id: String,
    transcript: Vec<RawTurn>,
    #[serde(alias = "orders")]
    expected_orders: Option<Vec<RawOrder>>,
}

fn parse_raw_provenance(
    raw: Option<RawProvenance>,
    encounter_id: &str,
) -> Result<Option<BTreeSet<u32>>, CorpusError> {
    let raw = match raw {
        None => return Ok(None),
        Some(r) => r,
    };
    let mut out = BTreeSet::new();
    match raw {
        RawProvenance::Ints(v) => {
            for n in v {
                let id = u32::try_from(n).map_err(|_| CorpusError::Validation {
                    id: encounter_id.to_string(),
                    message: format!("provenance turn id {n} is not a non-negative integer"),
                })?;
                out.insert(id);
            }
        }
        RawProvenance::Strings(v) => {
            for s in v {
                for tok in s.split(|c: char| c.is_whitespace() || c == ',') {
                    if tok.is_empty() {
                        continue;
                    }
                    let id = tok.parse::<u32>().map_err(|_| CorpusError::Validation {
                        id: encounter_id.to_string(),
                        message: format!("non-integer provenance token {tok:?}"),
                    })?;
                    out.insert(id);
                }
            }
        }
        RawProvenance::Text(s) => {
            for tok in s.split(|c: char| c.is_whitespace() || c == ',') {
                if tok.is_empty() {
                    continue;
                }
                let id = tok.parse::<u32>().map_err(|_| CorpusError::Validation {
                    id: encounter_id.to_string(),
                    message: format!("non-integer provenance token {tok:?}"),
                })?;
                out.insert(id);
            }
        }
    }
    Ok(Some(out))
}

pub(crate) fn order_from_raw(
    raw: RawOrder,
    encounter_id: &str,
) -> Result<MedicalOrder, CorpusError> {
    let provenance = parse_raw_provenance(raw.provenance, encounter_id)?;
    Ok(MedicalOrder {
        order_type: OrderLabel::parse(&raw.order_type),
        description: raw.description.filter(|d| !d.trim().is_empty()),
        reason: raw.reason.filter(|r| !r.trim().is_empty()),
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Loading

/// Load a corpus file (UTF-8 JSON array of encounter objects).
pub fn load_corpus(path: impl AsRef<Path>, role: LoadRole) -> Result<Vec<Encounter>, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_corpus_str(&text, role)
}

/// Load a corpus from an in-memory JSON string.
pub fn load_corpus_str(text: &str, role: LoadRole) -> Result<Vec<Encounter>, CorpusError> {
    let raw: Vec<RawEncounter> = serde_json::from_str(text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        CorpusError::Parse {
            offset: byte_offset(text, line, column),
            line,
            column,
            message: e.to_string(),
        }
    })?;

    let mut encounters = Vec::with_capacity(raw.len());
    for re in raw {
        let id = re.id;
        if re.transcript.is_empty() {
            return Err(CorpusError::Validation {
                id,
                message: "transcript has no turns".into(),
            });
        }
        let mut turns = Vec::with_capacity(re.transcript.len());
        let mut last_id: Option<u32> = None;
        for rt in re.transcript {
            let speaker = Speaker::parse(&rt.speaker).ok_or_else(|| CorpusError::Validation {
                id: id.clone(),
                message: format!("unknown speaker label {:?}", rt.speaker),
            })?;
            if let Some(prev) = last_id {
                if rt.turn_id <= prev {
                    return Err(CorpusError::Validation {
                        id: id.clone(),
                        message: format!(
                            "turn_id {} is not strictly greater than preceding turn_id {}",
                            rt.turn_id, prev
                        ),
                    });
                }
            }
            last_id = Some(rt.turn_id);
            turns.push(Turn {
                turn_id: rt.turn_id,
                speaker,
                utterance: rt.transcript,
            });
        }

        let gold_orders = match (role, re.expected_orders) {
            (LoadRole::TranscriptsOnly, _) | (_, None) => None,
            (LoadRole::WithGold, Some(raw_orders)) => {
                let orders = raw_orders
                    .into_iter()
                    .map(|ro| order_from_raw(ro, &id))
                    .collect::<Result<Vec<_>, _>>()?;
                let turn_ids: BTreeSet<u32> = turns.iter().map(|t| t.turn_id).collect();
                for order in &orders {
                    if let Some(prov) = &order.provenance {
                        if let Some(bad) = prov.iter().find(|p| !turn_ids.contains(p)) {
                            return Err(CorpusError::Validation {
                                id: id.clone(),
                                message: format!(
                                    "gold provenance references unknown turn_id {bad}"
                                ),
                            });
                        }
                    }
                }
                Some(orders)
            }
        };

        encounters.push(Encounter {
            id,
            turns,
            gold_orders,
        });
    }
    Ok(encounters)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

/// Serialize encounters back to the corpus file schema.
pub fn serialize_corpus(encounters: &[Encounter]) -> String {
    let arr: Vec<serde_json::Value> = encounters.iter().map(encounter_to_json).collect();
    serde_json::to_string_pretty(&arr).expect("corpus serialization cannot fail")
}

fn encounter_to_json(e: &Encounter) -> serde_json::Value {
    let turns: Vec<serde_json::Value> = e
        .turns
        .iter()
        .map(|t| {
            serde_json::json!({
                "turn_id": t.turn_id,
                "speaker": t.speaker.as_str(),
                "transcript": t.utterance,
            })
        })
        .collect();
    let mut obj = serde_json::json!({ "id": e.id, "transcript": turns });
    if let Some(gold) = &e.gold_orders {
        let orders: Vec<serde_json::Value> = gold.iter().map(order_to_json).collect();
        obj["expected_orders"] = serde_json::Value::Array(orders);
    }
    obj
}

pub(crate) fn order_to_json(o: &MedicalOrder) -> serde_json::Value {
    serde_json::json!({
        "order_type": o.order_type.to_string(),
        "description": o.description,
        "reason": o.reason,
        "provenance": o.provenance.as_ref().map(|p| p.iter().copied().collect::<Vec<u32>>()),
    })
}

// ---------------------------------------------------------------------------
// Validation

/// Check every encounter invariant; returns one descriptor per violation.
pub fn validate_encounter(e: &Encounter) -> Vec<Violation> {
    let mut out = Vec::new();
    if e.turns.is_empty() {
        out.push(Violation::new("turns", "encounter must have at least one turn"));
    }
    let mut seen = BTreeSet::new();
    let mut last: Option<u32> = None;
    for t in &e.turns {
        if !seen.insert(t.turn_id) {
            out.push(Violation::new(
                "turn_id",
                format!("turn_id {} appears more than once; ids must be unique", t.turn_id),
            ));
        }
        if let Some(prev) = last {
            if t.turn_id <= prev {
                out.push(Violation::new(
                    "turn_id",
                    format!("turn_id {} does not strictly increase after {}", t.turn_id, prev),
                ));
            }
        }
        last = Some(t.turn_id);
    }
    for (i, order) in e.gold().iter().enumerate() {
        if let OrderLabel::Invalid(label) = &order.order_type {
            out.push(Violation::new(
                "order_type",
                format!(
                    "order {i} has type {label:?}; allowed set is {{medication, lab, imaging, followup}}"
                ),
            ));
        }
        if order.description.as_deref().map(str::trim).unwrap_or("").is_empty() {
            out.push(Violation::new(
                "description",
                format!("order {i} has an empty description"),
            ));
        }
        if let Some(prov) = &order.provenance {
            for p in prov {
                if !seen.contains(p) {
                    out.push(Violation::new(
                        "provenance",
                        format!("order {i} cites turn_id {p}, which is not in the transcript"),
                    ));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Statistics

pub fn whitespace_tokens(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Profile a non-empty corpus.
pub fn corpus_stats(corpus: &[Encounter]) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Domain("corpus is empty".into()));
    }

    let mut orders_by_type: BTreeMap<String, usize> = BTreeMap::new();
    let mut turns_by_speaker: BTreeMap<String, usize> = BTreeMap::new();
    let mut tokens_by_speaker: BTreeMap<String, usize> = BTreeMap::new();
    let mut total_turns = 0usize;
    let mut max_turns = 0usize;
    let mut total_orders = 0usize;
    let mut missing_reason = 0usize;
    let mut prov_span_sum = 0usize;
    let mut prov_span_count = 0usize;

    for e in corpus {
        total_turns += e.turns.len();
        max_turns = max_turns.max(e.turns.len());
        for t in &e.turns {
            *turns_by_speaker.entry(t.speaker.to_string()).or_default() += 1;
            *tokens_by_speaker.entry(t.speaker.to_string()).or_default() +=
                whitespace_tokens(&t.utterance);
        }
        for o in e.gold() {
            total_orders += 1;
            *orders_by_type.entry(o.order_type.to_string()).or_default() += 1;
            if o.reason.as_deref().map(str::trim).unwrap_or("").is_empty() {
                missing_reason += 1;
            }
            if let Some(prov) = &o.provenance {
                if !prov.is_empty() {
                    prov_span_sum += prov.len();
                    prov_span_count += 1;
                }
            }
        }
    }

    Ok(CorpusStats {
        encounter_count: corpus.len(),
        orders_by_type,
        mean_turns: total_turns as f64 / corpus.len() as f64,
        max_turns,
        turns_by_speaker,
        tokens_by_speaker,
        missing_reason_fraction: if total_orders == 0 {
            0.0
        } else {
            missing_reason as f64 / total_orders as f64
        },
        mean_provenance_span: if prov_span_count == 0 {
            0.0
        } else {
            prov_span_sum as f64 / prov_span_count as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(id: u32, speaker: Speaker, text: &str) -> Turn {
        Turn {
            turn_id: id,
            speaker,
            utterance: text.to_string(),
        }
    }

    fn simple_order(ty: OrderType, desc: &str, prov: &[u32]) -> MedicalOrder {
        MedicalOrder {
            order_type: OrderLabel::Known(ty),
            description: Some(desc.to_string()),
            reason: None,
            provenance: Some(prov.iter().copied().collect()),
        }
    }

    #[test]
    fn loads_minimal_encounter_without_gold() {
        let json = r#"[{"id": "e1", "transcript": [
            {"turn_id": 1, "speaker": "DOCTOR", "transcript": "Hello."}
        ]}]"#;
        let corpus = load_corpus_str(json, LoadRole::WithGold).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus[0].id, "e1");
        assert!(corpus[0].gold_orders.is_none());
        assert_eq!(corpus[0].turns[0].utterance, "Hello.");
    }

    #[test]
    fn accepts_utterance_and_orders_aliases() {
        let json = r#"[{"id": "e1", "transcript": [
            {"turn_id": 1, "speaker": "doctor", "utterance": "Hi"}
        ], "orders": [
            {"order_type": "lab", "description": "cbc", "reason": null, "provenance": [1]}
        ]}]"#;
        let corpus = load_corpus_str(json, LoadRole::WithGold).unwrap();
        let gold = corpus[0].gold();
        assert_eq!(gold.len(), 1);
        assert_eq!(gold[0].order_type, OrderLabel::Known(OrderType::Lab));
        assert_eq!(gold[0].provenance, Some([1].into_iter().collect()));
    }

    #[test]
    fn accepts_provenance_as_string() {
        let json = r#"[{"id": "e1", "transcript": [
            {"turn_id": 1, "speaker": "DOCTOR", "transcript": "a"},
            {"turn_id": 2, "speaker": "PATIENT", "transcript": "b"}
        ], "expected_orders": [
            {"order_type": "lab", "description": "cbc", "reason": null, "provenance": "1 2"}
        ]}]"#;
        let corpus = load_corpus_str(json, LoadRole::WithGold).unwrap();
        assert_eq!(
            corpus[0].gold()[0].provenance,
            Some([1, 2].into_iter().collect())
        );
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let json = "[{\"id\": \"e1\",\n  broken}]";
        let err = load_corpus_str(json, LoadRole::WithGold).unwrap_err();
        match err {
            CorpusError::Parse { offset, line, .. } => {
                assert_eq!(line, 2);
                assert!(offset > 10, "offset {offset} should be inside line 2");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_turn_id_is_rejected() {
        let json = r#"[{"id": "e-dup", "transcript": [
            {"turn_id": 7, "speaker": "DOCTOR", "transcript": "a"},
            {"turn_id": 7, "speaker": "PATIENT", "transcript": "b"}
        ]}]"#;
        let err = load_corpus_str(json, LoadRole::WithGold).unwrap_err();
        match err {
            CorpusError::Validation { id, message } => {
                assert_eq!(id, "e-dup");
                assert!(message.contains('7'));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn gold_provenance_out_of_range_is_rejected() {
        let json = r#"[{"id": "e1", "transcript": [
            {"turn_id": 50, "speaker": "DOCTOR", "transcript": "a"}
        ], "expected_orders": [
            {"order_type": "lab", "description": "cbc", "reason": null, "provenance": [99]}
        ]}]"#;
        let err = load_corpus_str(json, LoadRole::WithGold).unwrap_err();
        assert!(err.to_string().contains("99"));
    }

    #[test]
    fn unknown_speaker_is_rejected() {
        let json = r#"[{"id": "e1", "transcript": [
            {"turn_id": 1, "speaker": "NURSE", "transcript": "a"}
        ]}]"#;
        let err = load_corpus_str(json, LoadRole::WithGold).unwrap_err();
        assert!(err.to_string().contains("NURSE"));
    }

    #[test]
    fn transcripts_only_drops_gold() {
        let json = r#"[{"id": "e1", "transcript": [
            {"turn_id": 1, "speaker": "DOCTOR", "transcript": "a"}
        ], "expected_orders": [
            {"order_type": "lab", "description": "cbc", "reason": null, "provenance": [1]}
        ]}]"#;
        let corpus = load_corpus_str(json, LoadRole::TranscriptsOnly).unwrap();
        assert!(corpus[0].gold_orders.is_none());
    }

    #[test]
    fn validate_flags_duplicate_turn_and_bad_type() {
        let e = Encounter {
            id: "e1".into(),
            turns: vec![
                turn(7, Speaker::Doctor, "a"),
                turn(7, Speaker::Patient, "b"),
            ],
            gold_orders: Some(vec![MedicalOrder {
                order_type: OrderLabel::Invalid("surgery".into()),
                description: Some("appendectomy".into()),
                reason: None,
                provenance: None,
            }]),
        };
        let violations = validate_encounter(&e);
        assert!(violations.iter().any(|v| v.field == "turn_id"));
        assert!(violations
            .iter()
            .any(|v| v.field == "order_type" && v.rule.contains("medication")));
    }

    #[test]
    fn validate_clean_encounter_is_empty() {
        let e = Encounter {
            id: "e1".into(),
            turns: vec![turn(1, Speaker::Doctor, "hi")],
            gold_orders: Some(vec![simple_order(OrderType::Lab, "cbc", &[1])]),
        };
        assert!(validate_encounter(&e).is_empty());
    }

    #[test]
    fn stats_mean_and_max_turns() {
        let mk = |id: &str, n: u32| Encounter {
            id: id.into(),
            turns: (1..=n).map(|i| turn(i, Speaker::Doctor, "w x")).collect(),
            gold_orders: None,
        };
        let corpus = vec![mk("a", 3), mk("b", 5)];
        let stats = corpus_stats(&corpus).unwrap();
        assert_eq!(stats.mean_turns, 4.0);
        assert_eq!(stats.max_turns, 5);
        assert_eq!(stats.turns_by_speaker["DOCTOR"], 8);
        assert_eq!(stats.tokens_by_speaker["DOCTOR"], 16);
    }

    #[test]
    fn stats_empty_corpus_is_domain_error() {
        assert!(matches!(corpus_stats(&[]), Err(CorpusError::Domain(_))));
    }

    #[test]
    fn stats_order_totals_match_gold_count() {
        let e = Encounter {
            id: "e1".into(),
            turns: vec![turn(1, Speaker::Doctor, "hi")],
            gold_orders: Some(vec![
                simple_order(OrderType::Lab, "cbc", &[1]),
                simple_order(OrderType::Medication, "aspirin", &[1]),
                simple_order(OrderType::Medication, "ibuprofen", &[1]),
            ]),
        };
        let stats = corpus_stats(&[e]).unwrap();
        let total: usize = stats.orders_by_type.values().sum();
        assert_eq!(total, 3);
        assert_eq!(stats.orders_by_type["medication"], 2);
    }

    #[test]
    fn stats_permutation_invariant() {
        let mk = |id: &str, n: u32| Encounter {
            id: id.into(),
            turns: (1..=n).map(|i| turn(i, Speaker::Patient, "x")).collect(),
            gold_orders: Some(vec![simple_order(OrderType::Imaging, "x-ray", &[1])]),
        };
        let a = vec![mk("a", 2), mk("b", 9), mk("c", 4)];
        let b = vec![a[2].clone(), a[0].clone(), a[1].clone()];
        let sa = corpus_stats(&a).unwrap();
        let sb = corpus_stats(&b).unwrap();
        assert_eq!(sa.mean_turns, sb.mean_turns);
        assert_eq!(sa.orders_by_type, sb.orders_by_type);
        assert_eq!(sa.tokens_by_speaker, sb.tokens_by_speaker);
    }

    #[test]
    fn serialize_load_round_trip() {
        let e = Encounter {
            id: "e1".into(),
            turns: vec![
                turn(1, Speaker::Doctor, "How are you?"),
                turn(2, Speaker::Patient, "Fine."),
            ],
            gold_orders: Some(vec![MedicalOrder {
                order_type: OrderLabel::Known(OrderType::Followup),
                description: Some("return in two weeks".into()),
                reason: Some("recheck".into()),
                provenance: Some([1, 2].into_iter().collect()),
            }]),
        };
        let corpus = vec![e];
        let text = serialize_corpus(&corpus);
        let reloaded = load_corpus_str(&text, LoadRole::WithGold).unwrap();
        assert_eq!(reloaded, corpus);
    }
}
