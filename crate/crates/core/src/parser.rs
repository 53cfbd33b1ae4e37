//! Parse raw model output into orders, applying normalization, bounded
//! repair rules, and discard policies for lines that cannot be recovered.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{self, Encounter, MedicalOrder, OrderLabel, OrderType, Violation};

#[derive(Error, Debug)]
pub enum PredictionError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("malformed prediction JSON: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("{0}")]
    Invalid(String),
}

/// Result of parsing one raw model response.
#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub orders: Vec<MedicalOrder>,
    pub repaired_count: usize,
    pub discarded_lines: Vec<(String, String)>,
}

fn bracket_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:,\s*)?\[([^\[\]]*)\]\s*\.?\s*$").unwrap())
}

fn bullet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*•]|\d+[.)])\s+").unwrap())
}

fn is_null_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("null") || t.eq_ignore_ascii_case("none")
}

fn optional_field(s: &str) -> Option<String> {
    if is_null_token(s) {
        None
    } else {
        Some(s.trim().to_string())
    }
}

fn parse_id_list(s: &str) -> Option<BTreeSet<u32>> {
    let mut out = BTreeSet::new();
    for tok in s.split(|c: char| c == ',' || c.is_whitespace()) {
        let tok = tok.trim();
        if tok.is_empty() || is_null_token(tok) {
            continue;
        }
        match tok.parse::<u32>() {
            Ok(id) => {
                out.insert(id);
            }
            Err(_) => return None,
        }
    }
    Some(out)
}

/// Strict parse of one candidate line: first comma delimits the type, the
/// trailing bracketed list is the provenance, and the last comma before it
/// splits description from reason (so commas inside descriptions survive).
pub fn parse_order_line(line: &str) -> Option<MedicalOrder> {
    let line = bullet_re().replace(line.trim(), "");
    let line = line.trim();
    if line.is_empty() {
        return None;
    }

    let (head, provenance) = match bracket_re().find(line) {
        Some(m) => {
            let ids = bracket_re()
                .captures(line)
                .and_then(|c| c.get(1))
                .map(|g| g.as_str())
                .unwrap_or("");
            (line[..m.start()].trim(), Some(parse_id_list(ids)?))
        }
        None => {
            // no bracket: accept a 4th literal null field for provenance
            let last_comma = line.rfind(',')?;
            let tail = &line[last_comma + 1..];
            if !is_null_token(tail) {
                return None;
            }
            (line[..last_comma].trim(), None)
        }
    };

    let first_comma = head.find(',')?;
    let type_str = head[..first_comma].trim();
    if type_str.is_empty() || type_str.contains(char::is_whitespace) {
        return None;
    }
    let rest = head[first_comma + 1..].trim();
    let last_comma = rest.rfind(',')?;
    let description = rest[..last_comma].trim();
    let reason = rest[last_comma + 1..].trim();
    if description.is_empty() {
        return None;
    }

    Some(MedicalOrder {
        order_type: OrderLabel::parse(type_str),
        description: optional_field(description),
        reason: optional_field(reason),
        provenance,
    })
}

/// Bounded repair of a line that failed the strict parse. Rules, in order:
/// (1) extract the trailing bracketed list as provenance regardless of the
/// commas before it; (2) if the first token is an allowed type followed by
/// whitespace instead of a comma, insert the comma; (3) if only three
/// fields remain, treat the missing reason as null. Returns the repaired
/// line, or nothing when no rule produces a parseable line.
pub fn repair_line(line: &str) -> Option<String> {
    let line = bullet_re().replace(line.trim(), "");
    let line = line.trim();
    if line.is_empty() {
        return None;
    }

    // rule 1
    let (head, prov_text) = match bracket_re().find(line) {
        Some(m) => {
            let ids = bracket_re()
                .captures(line)
                .and_then(|c| c.get(1))
                .map(|g| g.as_str().to_string())
                .unwrap_or_default();
            let head = line[..m.start()].trim().trim_end_matches(',').trim();
            (head.to_string(), format!("[{ids}]"))
        }
        None => (line.trim_end_matches(',').trim().to_string(), "null".to_string()),
    };

    // rule 2
    let head = {
        let first_token_end = head
            .find(|c: char| c == ',' || c.is_whitespace())
            .unwrap_or(head.len());
        let first_token = &head[..first_token_end];
        let followed_by_space = head[first_token_end..].starts_with(char::is_whitespace);
        if followed_by_space && first_token.parse::<OrderType>().is_ok() {
            format!("{first_token}, {}", head[first_token_end..].trim_start())
        } else {
            head
        }
    };

    // rule 3: type + description only -> null reason
    let repaired = match head.find(',') {
        Some(first_comma) => {
            let rest = head[first_comma + 1..].trim();
            if rest.is_empty() {
                return None;
            }
            if rest.contains(',') {
                format!("{head}, {prov_text}")
            } else {
                format!("{head}, null, {prov_text}")
            }
        }
        None => return None,
    };

    parse_order_line(&repaired).map(|_| repaired)
}

fn looks_like_commentary(line: &str) -> bool {
    let t = line.trim();
    t.ends_with(':') || (!t.contains(',') && !t.contains('['))
}

/// Parse a full raw model response. Preamble and commentary lines are
/// dropped; candidate lines are parsed strictly, then repaired; lines that
/// survive neither land in `discarded_lines` with a reason. Never fails.
pub fn parse_output(raw: &str) -> ParseOutcome {
    let mut outcome = ParseOutcome::default();
    for line in raw.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || looks_like_commentary(trimmed) {
            continue;
        }
        if let Some(order) = parse_order_line(trimmed) {
            outcome.orders.push(order);
            continue;
        }
        match repair_line(trimmed) {
            Some(repaired) => match parse_order_line(&repaired) {
                Some(order) => {
                    outcome.orders.push(order);
                    outcome.repaired_count += 1;
                }
                None => outcome
                    .discarded_lines
                    .push((trimmed.to_string(), "repair produced an unparseable line".into())),
            },
            None => outcome
                .discarded_lines
                .push((trimmed.to_string(), "no repair rule applies".into())),
        }
    }
    outcome
}

/// Validate a parsed order against its encounter: allowed type, non-empty
/// description, and provenance ids present in the transcript.
pub fn validate_order(order: &MedicalOrder, encounter: &Encounter) -> Vec<Violation> {
    let mut out = Vec::new();
    if let OrderLabel::Invalid(label) = &order.order_type {
        out.push(Violation {
            field: "order_type".into(),
            rule: format!(
                "{label:?} is not in the allowed set {{medication, lab, imaging, followup}}"
            ),
        });
    }
    if order
        .description
        .as_deref()
        .map(str::trim)
        .unwrap_or("")
        .is_empty()
    {
        out.push(Violation {
            field: "description".into(),
            rule: "description is empty".into(),
        });
    }
    if let Some(prov) = &order.provenance {
        let turn_ids = encounter.turn_ids();
        for p in prov {
            if !turn_ids.contains(p) {
                out.push(Violation {
                    field: "provenance".into(),
                    rule: format!("turn_id {p} is not in the transcript"),
                });
            }
        }
    }
    out
}

/// One encounter's predicted orders in the prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEntry {
    pub id: String,
    pub orders: Vec<MedicalOrder>,
}

/// The prediction file: a JSON array of `{id, orders}` objects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub entries: Vec<PredictionEntry>,
}

#[derive(Deserialize)]
struct RawPredictionEntry {
    id: String,
    orders: Vec<corpus::RawOrder>,
}

impl Predictions {
    pub fn load(path: impl AsRef<Path>) -> Result<Predictions, PredictionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PredictionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Predictions::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Predictions, PredictionError> {
        let raw: Vec<RawPredictionEntry> = serde_json::from_str(text)?;
        let mut entries = Vec::with_capacity(raw.len());
        for re in raw {
            let orders = re
                .orders
                .into_iter()
                .map(|ro| corpus::order_from_raw(ro, &re.id))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PredictionError::Invalid(e.to_string()))?;
            entries.push(PredictionEntry { id: re.id, orders });
        }
        Ok(Predictions { entries })
    }

    /// Deterministic serialization: entries sorted by id, absent fields as
    /// JSON null, provenance sorted ascending.
    pub fn to_json(&self) -> String {
        let mut sorted: Vec<&PredictionEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let arr: Vec<serde_json::Value> = sorted
            .iter()
            .map(|entry| {
                serde_json::json!({
                    "id": entry.id,
                    "orders": entry.orders.iter().map(corpus::order_to_json).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::to_string_pretty(&arr).expect("prediction serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PredictionError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| PredictionError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Write per-encounter parse outcomes as a prediction file.
pub fn serialize_predictions(
    outcomes: &[(String, ParseOutcome)],
    path: impl AsRef<Path>,
) -> Result<(), PredictionError> {
    let predictions = Predictions {
        entries: outcomes
            .iter()
            .map(|(id, outcome)| PredictionEntry {
                id: id.clone(),
                orders: outcome.orders.clone(),
            })
            .collect(),
    };
    predictions.save(path)
}
