//! Completion interface over a remote chat endpoint, a deterministic mock,
//! and a stored-response replay backend.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MedicalOrder;
use crate::promptkit::{render_gold_orders, PromptBundle};

#[derive(Error, Debug)]
pub enum LlmError {
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    #[error("endpoint returned status {status}: {message}")]
    Endpoint { status: u16, message: String },

    #[error("endpoint response is missing choices[0].message.content")]
    MalformedResponse,

    #[error("no replay entry for encounter {0:?}")]
    ReplayMiss(String),

    #[error("replay store {path}: {source}")]
    ReplayIo {
        path: String,
        source: std::io::Error,
    },

    #[error("API key env var {0} is not set")]
    MissingApiKey(String),
}

/// Decoding parameters forwarded to the endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub max_context_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 0.2,
            top_p: 0.9,
            max_new_tokens: 1024,
            max_context_tokens: 8192,
            seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            url: url.into(),
            model_name: model_name.into(),
            api_key_env: "MEDORDER_API_KEY".into(),
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            request_timeout: Duration::from_secs(120),
        }
    }
}

/// Which completion backend to use.
#[derive(Debug, Clone)]
pub enum Backend {
    Endpoint(EndpointConfig),
    Mock,
    Replay(PathBuf),
}

impl Backend {
    pub fn kind(&self) -> &'static str {
        match self {
            Backend::Endpoint(_) => "endpoint",
            Backend::Mock => "mock",
            Backend::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// A completed request: the assistant text verbatim, plus metadata.
#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub latency: Duration,
    pub token_usage: Option<TokenUsage>,
}

/// Append-only JSON-lines store of `{"id", "response"}` records.
/// Duplicate ids resolve last-write-wins on load.
#[derive(Debug)]
pub struct ReplayStore {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ReplayRecord {
    id: String,
    response: String,
}

impl ReplayStore {
    /// Open a store, creating the file if absent.
    pub fn open(path: impl AsRef<Path>) -> Result<ReplayStore, LlmError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = BTreeMap::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for line in text.lines() {
                    let line = line.trim();
                    if line.is_empty() {
                        continue;
                    }
                    let record: ReplayRecord =
                        serde_json::from_str(line).map_err(|e| LlmError::ReplayIo {
                            path: path.display().to_string(),
                            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
                        })?;
                    if entries.insert(record.id.clone(), record.response).is_some() {
                        log::warn!(
                            "replay store {}: duplicate id {:?}, keeping the later entry",
                            path.display(),
                            record.id
                        );
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(source) => {
                return Err(LlmError::ReplayIo {
                    path: path.display().to_string(),
                    source,
                })
            }
        }
        Ok(ReplayStore { path, entries })
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append one record; a later record for the same id wins on reload.
    pub fn record(&mut self, id: &str, response: &str) -> Result<(), LlmError> {
        let line = serde_json::to_string(&ReplayRecord {
            id: id.to_string(),
            response: response.to_string(),
        })
        .expect("replay record serialization cannot fail");
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|source| LlmError::ReplayIo {
                path: self.path.display().to_string(),
                source,
            })?;
        writeln!(file, "{line}").map_err(|source| LlmError::ReplayIo {
            path: self.path.display().to_string(),
            source,
        })?;
        if self
            .entries
            .insert(id.to_string(), response.to_string())
            .is_some()
        {
            log::warn!("replay store: overwriting response for id {id:?} (last write wins)");
        }
        Ok(())
    }
}

/// Context the deterministic backends key on: the encounter id for replay
/// lookups, and the gold orders the mock echoes back.
#[derive(Debug, Clone, Copy)]
pub struct EncounterContext<'a> {
    pub id: &'a str,
    pub gold_orders: Option<&'a [MedicalOrder]>,
}

/// Fixed response the mock emits when the encounter carries no gold.
pub const MOCK_CANNED_RESPONSE: &str = "followup, follow up as needed, null, []";

pub struct LlmClient {
    backend: Backend,
    replay: Option<ReplayStore>,
    http: Option<reqwest::blocking::Client>,
}

impl LlmClient {
    pub fn new(backend: Backend) -> Result<LlmClient, LlmError> {
        let replay = match &backend {
            Backend::Replay(path) => Some(ReplayStore::open(path)?),
            _ => None,
        };
        let http = match &backend {
            Backend::Endpoint(cfg) => Some(
                reqwest::blocking::Client::builder()
                    .timeout(cfg.request_timeout)
                    .build()
                    .expect("http client construction cannot fail"),
            ),
            _ => None,
        };
        Ok(LlmClient {
            backend,
            replay,
            http,
        })
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn model_name(&self) -> Option<&str> {
        match &self.backend {
            Backend::Endpoint(cfg) => Some(&cfg.model_name),
            _ => None,
        }
    }

    /// Complete one prompt. The mock returns the gold-order rendering (or a
    /// canned line); replay returns the stored response byte-for-byte; the
    /// endpoint posts an OpenAI-compatible chat-completions request with
    /// retry and exponential backoff on transport-level failures.
    pub fn complete(
        &self,
        bundle: &PromptBundle,
        params: &DecodeParams,
        ctx: EncounterContext<'_>,
    ) -> Result<Completion, LlmError> {
        let start = Instant::now();
        match &self.backend {
            Backend::Mock => {
                let text = match ctx.gold_orders {
                    Some(gold) => render_gold_orders(gold),
                    None => MOCK_CANNED_RESPONSE.to_string(),
                };
                Ok(Completion {
                    text,
                    latency: start.elapsed(),
                    token_usage: None,
                })
            }
            Backend::Replay(_) => {
                let store = self.replay.as_ref().expect("replay store is loaded");
                let text = store
                    .get(ctx.id)
                    .ok_or_else(|| LlmError::ReplayMiss(ctx.id.to_string()))?
                    .to_string();
                Ok(Completion {
                    text,
                    latency: start.elapsed(),
                    token_usage: None,
                })
            }
            Backend::Endpoint(cfg) => self.complete_endpoint(cfg, bundle, params, start),
        }
    }

    fn complete_endpoint(
        &self,
        cfg: &EndpointConfig,
        bundle: &PromptBundle,
        params: &DecodeParams,
        start: Instant,
    ) -> Result<Completion, LlmError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .map_err(|_| LlmError::MissingApiKey(cfg.api_key_env.clone()))?;

        let mut messages = vec![serde_json::json!({"role": "system", "content": bundle.system})];
        for (user, assistant) in &bundle.exchanges {
            messages.push(serde_json::json!({"role": "user", "content": user}));
            messages.push(serde_json::json!({"role": "assistant", "content": assistant}));
        }
        messages.push(serde_json::json!({"role": "user", "content": bundle.query}));

        let mut body = serde_json::json!({
            "model": cfg.model_name,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_new_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = serde_json::json!(seed);
        }

        let http = self.http.as_ref().expect("http client is built");
        let mut last_error = String::new();
        for attempt in 0..cfg.max_attempts {
            if attempt > 0 {
                std::thread::sleep(cfg.initial_backoff * 2u32.pow(attempt - 1));
            }
            let response = http
                .post(&cfg.url)
                .bearer_auth(&api_key)
                .json(&body)
                .send();
            match response {
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let value: serde_json::Value =
                            resp.json().map_err(|_| LlmError::MalformedResponse)?;
                        let text = value["choices"][0]["message"]["content"]
                            .as_str()
                            .ok_or(LlmError::MalformedResponse)?
                            .to_string();
                        let token_usage = value.get("usage").map(|u| TokenUsage {
                            prompt_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
                            completion_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
                        });
                        return Ok(Completion {
                            text,
                            latency: start.elapsed(),
                            token_usage,
                        });
                    }
                    // 429 and 5xx are transient; other statuses are terminal
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_error = format!("status {status}");
                        continue;
                    }
                    let message = resp.text().unwrap_or_default();
                    return Err(LlmError::Endpoint {
                        status: status.as_u16(),
                        message,
                    });
                }
            }
        }
        Err(LlmError::Transport {
            attempts: cfg.max_attempts,
            message: last_error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{OrderLabel, OrderType};
    use crate::promptkit::PromptConfig;

    fn bundle() -> PromptBundle {
        PromptBundle {
            system: PromptConfig::default().system_instruction,
            exchanges: vec![],
            query: "[1] DOCTOR: Hi".into(),
            estimated_tokens: 10,
        }
    }

    fn gold_orders() -> Vec<MedicalOrder> {
        vec![
            MedicalOrder {
                order_type: OrderLabel::Known(OrderType::Lab),
                description: Some("cbc".into()),
                reason: None,
                provenance: Some([1].into_iter().collect()),
            },
            MedicalOrder {
                order_type: OrderLabel::Known(OrderType::Medication),
                description: Some("lisinopril".into()),
                reason: Some("blood pressure".into()),
                provenance: Some([1].into_iter().collect()),
            },
        ]
    }

    #[test]
    fn mock_returns_gold_rendering() {
        let client = LlmClient::new(Backend::Mock).unwrap();
        let gold = gold_orders();
        let ctx = EncounterContext {
            id: "e1",
            gold_orders: Some(&gold),
        };
        let completion = client
            .complete(&bundle(), &DecodeParams::default(), ctx)
            .unwrap();
        assert_eq!(completion.text.lines().count(), 2);
        assert_eq!(completion.text, render_gold_orders(&gold));
    }

    #[test]
    fn mock_without_gold_returns_canned() {
        let client = LlmClient::new(Backend::Mock).unwrap();
        let ctx = EncounterContext {
            id: "e1",
            gold_orders: None,
        };
        let a = client
            .complete(&bundle(), &DecodeParams::default(), ctx)
            .unwrap();
        let b = client
            .complete(&bundle(), &DecodeParams::default(), ctx)
            .unwrap();
        assert_eq!(a.text, MOCK_CANNED_RESPONSE);
        assert_eq!(a.text, b.text);
    }

    #[test]
    fn replay_round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        let mut store = ReplayStore::open(&path).unwrap();
        store.record("enc-3", "lab, cbc, null, [10]").unwrap();
        drop(store);

        let client = LlmClient::new(Backend::Replay(path)).unwrap();
        let hit = client
            .complete(
                &bundle(),
                &DecodeParams::default(),
                EncounterContext {
                    id: "enc-3",
                    gold_orders: None,
                },
            )
            .unwrap();
        assert_eq!(hit.text, "lab, cbc, null, [10]");

        let miss = client.complete(
            &bundle(),
            &DecodeParams::default(),
            EncounterContext {
                id: "enc-404",
                gold_orders: None,
            },
        );
        assert!(matches!(miss, Err(LlmError::ReplayMiss(_))));
    }

    #[test]
    fn replay_duplicate_id_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        let mut store = ReplayStore::open(&path).unwrap();
        store.record("e1", "first").unwrap();
        store.record("e1", "second").unwrap();
        drop(store);
        let reloaded = ReplayStore::open(&path).unwrap();
        assert_eq!(reloaded.get("e1"), Some("second"));
        assert_eq!(reloaded.len(), 1);
    }

    #[test]
    fn replay_concurrent_writers_distinct_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        ReplayStore::open(&path).unwrap(); // create the file
        std::thread::scope(|scope| {
            for i in 0..4 {
                let path = path.clone();
                scope.spawn(move || {
                    let mut store = ReplayStore::open(&path).unwrap();
                    store
                        .record(&format!("enc-{i}"), &format!("response-{i}"))
                        .unwrap();
                });
            }
        });
        let store = ReplayStore::open(&path).unwrap();
        assert_eq!(store.len(), 4);
        for i in 0..4 {
            assert_eq!(store.get(&format!("enc-{i}")), Some(&*format!("response-{i}")));
        }
    }

    #[test]
    fn complete_does_not_mutate_bundle() {
        let client = LlmClient::new(Backend::Mock).unwrap();
        let b = bundle();
        let before = b.clone();
        let _ = client.complete(
            &b,
            &DecodeParams::default(),
            EncounterContext {
                id: "e1",
                gold_orders: None,
            },
        );
        assert_eq!(b, before);
    }
}
