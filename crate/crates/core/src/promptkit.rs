//! Transcript rendering and zero-/few-shot prompt assembly.

use thiserror::Error;

use crate::corpus::{Encounter, MedicalOrder};

#[derive(Error, Debug)]
pub enum PromptError {
    #[error("encounter {id}: estimated {estimated} tokens exceeds budget {budget}")]
    BudgetExceeded {
        id: String,
        estimated: usize,
        budget: usize,
    },

    #[error("few-shot mode requires an exemplar encounter")]
    MissingExemplar,

    #[error("exemplar encounter {0:?} is the inference target itself")]
    ExemplarIsTarget(String),

    #[error("encounter {0:?} not found in corpus")]
    UnknownEncounter(String),

    #[error("no encounter in the corpus carries gold orders")]
    NoGoldAvailable,
}

/// Default system instruction, also shipped as an editable template file.
pub const DEFAULT_SYSTEM_TEMPLATE: &str = include_str!("../templates/system_prompt.txt");

/// Estimated tokens = whitespace tokens x inflation; exact model
/// tokenization is endpoint-specific.
pub const TOKEN_INFLATION: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotMode {
    Zero,
    Few,
}

#[derive(Debug, Clone)]
pub struct PromptConfig {
    pub shot_mode: ShotMode,
    pub exemplar_encounter_id: Option<String>,
    pub system_instruction: String,
    pub token_budget: usize,
    /// Opt-in middle truncation keeping the first and last turns instead of
    /// failing on budget overflow.
    pub truncate_on_overflow: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            shot_mode: ShotMode::Zero,
            exemplar_encounter_id: None,
            system_instruction: DEFAULT_SYSTEM_TEMPLATE.to_string(),
            token_budget: 8192,
            truncate_on_overflow: false,
        }
    }
}

/// An assembled prompt: system text, at most one exemplar exchange, and
/// the rendered query transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system: String,
    pub exchanges: Vec<(String, String)>,
    pub query: String,
    pub estimated_tokens: usize,
}

fn flatten_newlines(s: &str) -> String {
    if !s.contains(['\n', '\r']) {
        return s.to_string();
    }
    s.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

/// Render one turn as `[<turn_id>] <SPEAKER>: <utterance>`.
pub fn render_turn_line(turn: &crate::corpus::Turn) -> String {
    format!(
        "[{}] {}: {}",
        turn.turn_id,
        turn.speaker,
        flatten_newlines(&turn.utterance)
    )
}

/// One line per turn, in turn order. Embedded newlines in utterances are
/// flattened to spaces so the line-oriented format holds.
pub fn render_transcript(encounter: &Encounter) -> String {
    encounter
        .turns
        .iter()
        .map(render_turn_line)
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_provenance(order: &MedicalOrder) -> String {
    match &order.provenance {
        None => "null".to_string(),
        Some(ids) => format!(
            "[{}]",
            ids.iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

/// One comma-separated line per order; absent fields render as `null`.
pub fn render_gold_orders(orders: &[MedicalOrder]) -> String {
    orders
        .iter()
        .map(|o| {
            format!(
                "{}, {}, {}, {}",
                o.order_type,
                o.description.as_deref().unwrap_or("null"),
                o.reason.as_deref().unwrap_or("null"),
                render_provenance(o)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn estimate_tokens(text: &str) -> usize {
    (text.split_whitespace().count() as f64 * TOKEN_INFLATION).ceil() as usize
}

fn bundle_token_estimate(system: &str, exchanges: &[(String, String)], query: &str) -> usize {
    let mut total = estimate_tokens(system) + estimate_tokens(query);
    for (user, assistant) in exchanges {
        total += estimate_tokens(user) + estimate_tokens(assistant);
    }
    total
}

fn truncate_middle(encounter: &Encounter, keep: usize) -> String {
    let n = encounter.turns.len();
    if keep >= n {
        return render_transcript(encounter);
    }
    let head = keep / 2 + keep % 2;
    let tail = keep / 2;
    let omitted = n - head - tail;
    let mut lines: Vec<String> = encounter.turns[..head].iter().map(render_turn_line).collect();
    lines.push(format!("(... {omitted} turns omitted ...)"));
    lines.extend(encounter.turns[n - tail..].iter().map(render_turn_line));
    lines.join("\n")
}

/// Assemble the prompt for one target encounter. Few-shot mode prepends a
/// single user/assistant exchange built from the exemplar encounter and
/// its gold orders.
pub fn build_prompt(
    target: &Encounter,
    cfg: &PromptConfig,
    exemplar: Option<(&Encounter, &[MedicalOrder])>,
) -> Result<PromptBundle, PromptError> {
    let exchanges = match cfg.shot_mode {
        ShotMode::Zero => Vec::new(),
        ShotMode::Few => {
            let (ex, gold) = exemplar.ok_or(PromptError::MissingExemplar)?;
            if ex.id == target.id {
                return Err(PromptError::ExemplarIsTarget(ex.id.clone()));
            }
            vec![(render_transcript(ex), render_gold_orders(gold))]
        }
    };

    let mut query = render_transcript(target);
    let mut estimated = bundle_token_estimate(&cfg.system_instruction, &exchanges, &query);
    if estimated > cfg.token_budget {
        if !cfg.truncate_on_overflow {
            return Err(PromptError::BudgetExceeded {
                id: target.id.clone(),
                estimated,
                budget: cfg.token_budget,
            });
        }
        let mut keep = target.turns.len();
        while estimated > cfg.token_budget && keep > 2 {
            keep = (keep * 3 / 4).max(2);
            query = truncate_middle(target, keep);
            estimated = bundle_token_estimate(&cfg.system_instruction, &exchanges, &query);
        }
        if estimated > cfg.token_budget {
            return Err(PromptError::BudgetExceeded {
                id: target.id.clone(),
                estimated,
                budget: cfg.token_budget,
            });
        }
    }

    Ok(PromptBundle {
        system: cfg.system_instruction.clone(),
        exchanges,
        query,
        estimated_tokens: estimated,
    })
}

/// Pick the few-shot exemplar: the requested id, or else the gold-bearing
/// encounter covering the most distinct valid order types, ties broken by
/// smallest id.
pub fn select_exemplar<'a>(
    corpus: &'a [Encounter],
    id: Option<&str>,
) -> Result<(&'a Encounter, &'a [MedicalOrder]), PromptError> {
    if let Some(wanted) = id {
        let e = corpus
            .iter()
            .find(|e| e.id == wanted)
            .ok_or_else(|| PromptError::UnknownEncounter(wanted.to_string()))?;
        if e.gold_orders.is_none() {
            return Err(PromptError::NoGoldAvailable);
        }
        return Ok((e, e.gold()));
    }

    let coverage = |e: &Encounter| {
        e.gold()
            .iter()
            .filter_map(|o| o.order_type.as_known())
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    };
    corpus
        .iter()
        .filter(|e| !e.gold().is_empty())
        .max_by(|a, b| {
            coverage(a)
                .cmp(&coverage(b))
                .then_with(|| b.id.cmp(&a.id)) // smaller id wins ties
        })
        .map(|e| (e, e.gold()))
        .ok_or(PromptError::NoGoldAvailable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{OrderLabel, OrderType, Speaker, Turn};

    fn turn(id: u32, speaker: Speaker, text: &str) -> Turn {
        Turn {
            turn_id: id,
            speaker,
            utterance: text.to_string(),
        }
    }

    fn encounter(id: &str, turns: Vec<Turn>, gold: Option<Vec<MedicalOrder>>) -> Encounter {
        Encounter {
            id: id.into(),
            turns,
            gold_orders: gold,
        }
    }

    fn gold(ty: OrderType, desc: &str) -> MedicalOrder {
        MedicalOrder {
            order_type: OrderLabel::Known(ty),
            description: Some(desc.into()),
            reason: None,
            provenance: Some([1].into_iter().collect()),
        }
    }

    #[test]
    fn renders_turn_template() {
        let t = turn(12, Speaker::Doctor, "How are you?");
        assert_eq!(render_turn_line(&t), "[12] DOCTOR: How are you?");
    }

    #[test]
    fn renders_one_line_per_turn() {
        let e = encounter(
            "e1",
            vec![
                turn(1, Speaker::Doctor, "Hi"),
                turn(2, Speaker::Patient, "Hello"),
                turn(3, Speaker::Doctor, "What brings you in?"),
            ],
            None,
        );
        let text = render_transcript(&e);
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn embedded_newline_is_flattened() {
        let e = encounter(
            "e1",
            vec![turn(1, Speaker::Patient, "line one\nline two\r\nline three")],
            None,
        );
        let text = render_transcript(&e);
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("line one line two line three"));
    }

    #[test]
    fn renders_gold_order_line() {
        let o = MedicalOrder {
            order_type: OrderLabel::Known(OrderType::Lab),
            description: Some("cbc".into()),
            reason: None,
            provenance: Some([98, 100].into_iter().collect()),
        };
        assert_eq!(render_gold_orders(&[o]), "lab, cbc, null, [98, 100]");
        assert_eq!(render_gold_orders(&[]), "");
    }

    #[test]
    fn zero_shot_has_no_exchange() {
        let e = encounter("e1", vec![turn(1, Speaker::Doctor, "Hi")], None);
        let bundle = build_prompt(&e, &PromptConfig::default(), None).unwrap();
        assert!(bundle.exchanges.is_empty());
        assert_eq!(bundle.query, "[1] DOCTOR: Hi");
    }

    #[test]
    fn few_shot_exchange_uses_gold_rendering() {
        let target = encounter("target", vec![turn(1, Speaker::Doctor, "Hi")], None);
        let ex = encounter(
            "exemplar",
            vec![turn(1, Speaker::Doctor, "Any labs?")],
            Some(vec![gold(OrderType::Lab, "cbc")]),
        );
        let cfg = PromptConfig {
            shot_mode: ShotMode::Few,
            ..PromptConfig::default()
        };
        let bundle = build_prompt(&target, &cfg, Some((&ex, ex.gold()))).unwrap();
        assert_eq!(bundle.exchanges.len(), 1);
        assert_eq!(bundle.exchanges[0].1, render_gold_orders(ex.gold()));
    }

    #[test]
    fn few_shot_rejects_target_as_exemplar() {
        let target = encounter(
            "same",
            vec![turn(1, Speaker::Doctor, "Hi")],
            Some(vec![gold(OrderType::Lab, "cbc")]),
        );
        let cfg = PromptConfig {
            shot_mode: ShotMode::Few,
            ..PromptConfig::default()
        };
        let err = build_prompt(&target, &cfg, Some((&target, target.gold()))).unwrap_err();
        assert!(matches!(err, PromptError::ExemplarIsTarget(_)));
    }

    #[test]
    fn tight_budget_fails_loudly() {
        let turns: Vec<Turn> = (1..=290)
            .map(|i| turn(i, Speaker::Doctor, "this utterance has several words in it"))
            .collect();
        let e = encounter("long", turns, None);
        let cfg = PromptConfig {
            token_budget: 100,
            ..PromptConfig::default()
        };
        let err = build_prompt(&e, &cfg, None).unwrap_err();
        match err {
            PromptError::BudgetExceeded { id, budget, .. } => {
                assert_eq!(id, "long");
                assert_eq!(budget, 100);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn opt_in_truncation_keeps_first_and_last_turns() {
        let turns: Vec<Turn> = (1..=100)
            .map(|i| turn(i, Speaker::Doctor, "word word word word word"))
            .collect();
        let e = encounter("long", turns, None);
        let cfg = PromptConfig {
            system_instruction: "extract orders".into(),
            token_budget: 200,
            truncate_on_overflow: true,
            ..PromptConfig::default()
        };
        let bundle = build_prompt(&e, &cfg, None).unwrap();
        assert!(bundle.estimated_tokens <= 200);
        assert!(bundle.query.contains("[1] DOCTOR:"));
        assert!(bundle.query.contains("[100] DOCTOR:"));
        assert!(bundle.query.contains("turns omitted"));
    }

    #[test]
    fn build_prompt_is_deterministic() {
        let e = encounter("e1", vec![turn(1, Speaker::Doctor, "Hi there")], None);
        let cfg = PromptConfig::default();
        let a = build_prompt(&e, &cfg, None).unwrap();
        let b = build_prompt(&e, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn system_template_states_schema_constraints() {
        let t = DEFAULT_SYSTEM_TEMPLATE.to_lowercase();
        assert!(t.contains("clinical assistant"));
        for ty in ["medication", "lab", "imaging", "followup"] {
            assert!(t.contains(ty), "template missing order type {ty}");
        }
        assert!(t.contains("null"));
        assert!(t.contains("turn id") || t.contains("turn_id") || t.contains("turn ids"));
        assert!(t.contains("multiple"));
    }

    #[test]
    fn exemplar_explicit_id() {
        let corpus = vec![
            encounter(
                "enc-7",
                vec![turn(1, Speaker::Doctor, "x")],
                Some(vec![gold(OrderType::Lab, "cbc")]),
            ),
            encounter(
                "enc-9",
                vec![turn(1, Speaker::Doctor, "x")],
                Some(vec![gold(OrderType::Imaging, "mri")]),
            ),
        ];
        let (e, _) = select_exemplar(&corpus, Some("enc-7")).unwrap();
        assert_eq!(e.id, "enc-7");
        assert!(matches!(
            select_exemplar(&corpus, Some("missing")),
            Err(PromptError::UnknownEncounter(_))
        ));
    }

    #[test]
    fn exemplar_maximizes_type_coverage() {
        let corpus = vec![
            encounter(
                "a",
                vec![turn(1, Speaker::Doctor, "x")],
                Some(vec![gold(OrderType::Medication, "m"), gold(OrderType::Lab, "l")]),
            ),
            encounter(
                "b",
                vec![turn(1, Speaker::Doctor, "x")],
                Some(vec![
                    gold(OrderType::Medication, "m"),
                    gold(OrderType::Lab, "l"),
                    gold(OrderType::Imaging, "i"),
                    gold(OrderType::Followup, "f"),
                ]),
            ),
        ];
        let (e, _) = select_exemplar(&corpus, None).unwrap();
        assert_eq!(e.id, "b");
    }

    #[test]
    fn exemplar_tie_breaks_on_smaller_id() {
        let mk = |id: &str| {
            encounter(
                id,
                vec![turn(1, Speaker::Doctor, "x")],
                Some(vec![gold(OrderType::Lab, "cbc")]),
            )
        };
        let corpus = vec![mk("zeta"), mk("alpha"), mk("mid")];
        let (e, _) = select_exemplar(&corpus, None).unwrap();
        assert_eq!(e.id, "alpha");
    }

    #[test]
    fn exemplar_requires_gold() {
        let corpus = vec![encounter("a", vec![turn(1, Speaker::Doctor, "x")], None)];
        assert!(matches!(
            select_exemplar(&corpus, None),
            Err(PromptError::NoGoldAvailable)
        ));
    }
}
