//! Chat-model clients: the contract, an offline heuristic mock and an
//! HTTP chat-completion client.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::decode::format_record;
use super::encode::{parse_legend_line, parse_sentence};
use super::script::{message_steps, ChatMessage, Step, HISTORY_MARKER, METHOD_MARKER, PROPOSAL_MARKER};
use crate::data::RecordKey;
use crate::error::{Error, Result};
use crate::gbt::GbtConfig;

pub trait LlmClient: Send + Sync {
    fn name(&self) -> String;

    /// Sends the whole conversation and returns the reply text.
    fn send(&self, messages: &[ChatMessage]) -> Result<String>;
}

/// Pseudo-count pulling per-question rates toward 0.5.
pub const MOCK_PSEUDO_COUNT: f64 = 2.0;
/// Multiplicative penalty per attempt beyond the first.
pub const MOCK_ATTEMPT_PENALTY: f64 = 0.1;
/// Lower bound of the attempt penalty factor.
pub const MOCK_PENALTY_FLOOR: f64 = 0.5;

/// The mock's prediction for a question with `n` training outcomes of
/// which `successes` were correct.
pub fn heuristic_prediction(successes: f64, n: usize, attempt: u32) -> f64 {
    if n == 0 {
        return 0.5;
    }
    let rate = (successes + 0.5 * MOCK_PSEUDO_COUNT) / (n as f64 + MOCK_PSEUDO_COUNT);
    let penalty = (1.0 - MOCK_ATTEMPT_PENALTY * (f64::from(attempt.max(1)) - 1.0)).max(MOCK_PENALTY_FLOOR);
    rate * penalty
}

/// Hyperparameter proposals the mock cycles through.
pub fn mock_proposals() -> Vec<GbtConfig> {
    let c = |n_trees, learning_rate, max_depth, subsample, colsample_bytree, gamma, min_child_weight| GbtConfig {
        n_trees,
        learning_rate,
        max_depth,
        subsample,
        colsample_bytree,
        gamma,
        min_child_weight,
    };
    vec![
        c(100, 0.1, 4, 0.8, 1.0, 0.0, 1.0),
        c(200, 0.05, 2, 1.0, 1.0, 0.0, 3.0),
        c(50, 0.2, 6, 0.6, 0.8, 1.0, 1.0),
        c(100, 0.05, 4, 0.8, 0.8, 0.0, 5.0),
        c(200, 0.1, 2, 0.6, 1.0, 1.0, 3.0),
        c(50, 0.3, 4, 1.0, 0.8, 0.0, 1.0),
    ]
}

/// Deterministic offline stand-in for a chat model. It reads the records
/// back out of the prompt and answers with [`heuristic_prediction`].
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    /// Offset into the proposal cycle.
    pub seed: u64,
}

impl MockClient {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl LlmClient for MockClient {
    fn name(&self) -> String {
        "mock".into()
    }

    fn send(&self, messages: &[ChatMessage]) -> Result<String> {
        let steps = message_steps(messages);
        let has = |s: Step| steps.iter().any(|p| p.0 == s);
        let mut positions: HashMap<usize, String> = HashMap::new();
        let mut counts: HashMap<String, (f64, usize)> = HashMap::new();
        let mut tests: Vec<RecordKey> = Vec::new();
        let mut pending = Vec::new();
        for (_, content) in steps.iter().filter(|p| p.0 == Step::Transcription) {
            for line in content.lines() {
                if let Some((ord, id)) = parse_legend_line(line) {
                    positions.insert(ord, id);
                } else if let Some(s) = parse_sentence(line) {
                    pending.push(s);
                }
            }
        }
        for s in pending {
            let qid = positions.get(&s.question_ordinal).cloned().ok_or_else(|| Error::Client {
                run: 0,
                message: format!("question position {} missing from the table", s.question_ordinal),
            })?;
            match s.obs {
                Some(y) => {
                    let e = counts.entry(qid).or_insert((0.0, 0));
                    e.0 += f64::from(u8::from(y));
                    e.1 += 1;
                }
                None => tests.push(RecordKey::new(s.learner_id, qid, s.attempt)),
            }
        }
        let mut out = String::new();
        let wants_predictions = steps
            .iter()
            .any(|(s, c)| *s == Step::AnalysisRequest && c.contains("'Prediction'"));
        if wants_predictions {
            if tests.is_empty() {
                return Err(Error::Client {
                    run: 0,
                    message: "script contains no test records".into(),
                });
            }
            out.push_str("Predictions from per-question success rates:\n");
            for k in &tests {
                let (s, n) = counts.get(&k.question_id).copied().unwrap_or((0.0, 0));
                let p = heuristic_prediction(s, n, k.attempt);
                let _ = writeln!(out, "{}", format_record(k, p, "heuristic estimate"));
            }
        }
        if has(Step::MethodSelection) {
            let _ = writeln!(out, "{METHOD_MARKER} XGBoost");
        }
        if let Some((_, content)) = steps.iter().find(|p| p.0 == Step::Optimization) {
            let tried = content.lines().filter(|l| l.starts_with(HISTORY_MARKER)).count();
            let list = mock_proposals();
            let pick = &list[(tried + self.seed as usize) % list.len()];
            let _ = writeln!(out, "{PROPOSAL_MARKER} {}", pick.to_kv());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpClientConfig {
    /// Chat-completion endpoint URL.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    /// Extra attempts after a failed request.
    pub retries: u32,
    /// Name of the environment variable holding the API token.
    pub token_env: String,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "gpt-4".into(),
            temperature: 0.0,
            timeout_secs: 120,
            retries: 2,
            token_env: "LEARNKT_API_TOKEN".into(),
        }
    }
}

/// Client for an OpenAI-style `/chat/completions` endpoint. The token is
/// read from the environment at send time and never stored or logged.
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub config: HttpClientConfig,
}

impl HttpClient {
    pub fn new(config: HttpClientConfig) -> Result<Self> {
        if config.endpoint.trim().is_empty() {
            return Err(Error::Config("LLM endpoint is not set (use --endpoint or --mock)".into()));
        }
        Ok(Self { config })
    }

    pub fn request_body(&self, messages: &[ChatMessage]) -> serde_json::Value {
        serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": messages,
        })
    }

    /// Reply text of a chat-completion response.
    pub fn parse_reply(body: &serde_json::Value) -> Result<String> {
        body.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| client_error("response has no choices[0].message.content"))
    }

    #[cfg(feature = "http")]
    fn post_once(&self, agent: &ureq::Agent, token: &str, body: &serde_json::Value) -> std::result::Result<String, (bool, String)> {
        let resp = agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {token}"))
            .send_json(body)
            .map_err(|e| (true, format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let mut resp = resp;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, format!("reading body: {e}")))?;
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}")));
        }
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| (false, format!("invalid JSON reply: {e}")))?;
        Self::parse_reply(&v).map_err(|e| (false, e.to_string()))
    }
}

fn client_error(message: impl Into<String>) -> Error {
    Error::Client {
        run: 0,
        message: message.into(),
    }
}

impl LlmClient for HttpClient {
    fn name(&self) -> String {
        self.config.model.clone()
    }

    #[cfg(feature = "http")]
    fn send(&self, messages: &[ChatMessage]) -> Result<String> {
        let token = std::env::var(&self.config.token_env)
            .map_err(|_| client_error(format!("environment variable {} is not set", self.config.token_env)))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let body = self.request_body(messages);
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 << (attempt - 1).min(6)));
            }
            match self.post_once(&agent, &token, &body) {
                Ok(text) => return Ok(text),
                Err((retry, msg)) => {
                    log::warn!("LLM request attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if !retry {
                        break;
                    }
                }
            }
        }
        Err(client_error(last))
    }

    #[cfg(not(feature = "http"))]
    fn send(&self, _messages: &[ChatMessage]) -> Result<String> {
        let _ = Duration::ZERO;
        Err(client_error("built without HTTP support"))
    }
}
