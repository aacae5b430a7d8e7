//! Deterministic mock chat-completions server.
//!
//! Replies are a pure function of the request body: rules match on the
//! unit id header, the messages hash, the seed or a substring of the last
//! user turn and play back a sequence of steps (replies or failures); the
//! default behavior synthesizes a well-formed answer from the request.
//! Every request is recorded in a transcript together with the number of
//! requests in flight when it arrived.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use surveyor_core::chat::ConversationTurn;
use surveyor_core::methods::TokenLogprob;

use crate::client::UNIT_HEADER;
use crate::wire::ChatRequest;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("script: {0}")]
    Script(String),
    #[error("transcript: {0}")]
    Io(#[from] std::io::Error),
}

/// What the server answers when no rule matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Behavior {
    /// Reply with the last user turn.
    Echo,
    Fixed { text: String },
    /// Honor guided-decoding fields, otherwise fill the JSON template or
    /// option list found in the prompt. Numbers are drawn from the range
    /// stated in the prompt, else `number_range`.
    Synthetic {
        #[serde(default = "default_range")]
        number_range: (i64, i64),
    },
}

fn default_range() -> (i64, i64) {
    (0, 100)
}

impl Default for Behavior {
    fn default() -> Self {
        Behavior::Synthetic {
            number_range: default_range(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Match {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_id_prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub messages_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Substring of the last user turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
}

impl Match {
    fn matches(&self, unit: Option<&str>, hash: &str, req: &ChatRequest) -> bool {
        self.unit_id.as_deref().is_none_or(|u| Some(u) == unit)
            && self
                .unit_id_prefix
                .as_deref()
                .is_none_or(|p| unit.is_some_and(|u| u.starts_with(p)))
            && self.messages_hash.as_deref().is_none_or(|h| h == hash)
            && self.seed.is_none_or(|s| req.seed == Some(s))
            && self
                .contains
                .as_deref()
                .is_none_or(|c| req.last_user().is_some_and(|u| u.contains(c)))
    }
}

/// One scripted response. A step with `status` fails with that HTTP
/// status; otherwise it replies with `text` (and `top_logprobs`), or with
/// the default behavior's reply when `text` is absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

impl Step {
    pub fn reply(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn fail(status: u16) -> Self {
        Self {
            status: Some(status),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    #[serde(rename = "match", default)]
    pub when: Match,
    /// Played in order for repeated identical requests; the last step
    /// repeats.
    pub responses: Vec<Step>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub default: Behavior,
    /// Inclusive latency range; each request's latency is a hash of its
    /// body so runs are repeatable.
    #[serde(default)]
    pub latency_ms: (u64, u64),
    #[serde(default)]
    pub rules: Vec<Rule>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, MockError> {
        let s: Self = serde_json::from_str(text).map_err(|e| MockError::Script(e.to_string()))?;
        if s.rules.iter().any(|r| r.responses.is_empty()) {
            return Err(MockError::Script("rule without responses".into()));
        }
        if s.latency_ms.0 > s.latency_ms.1 {
            return Err(MockError::Script("latency_ms range is reversed".into()));
        }
        Ok(s)
    }

    pub fn with_latency(mut self, min: u64, max: u64) -> Self {
        self.latency_ms = (min, max);
        self
    }

    pub fn rule(mut self, when: Match, responses: Vec<Step>) -> Self {
        self.rules.push(Rule { when, responses });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_id: Option<String>,
    pub messages_hash: String,
    /// Requests being served when this one arrived, itself included.
    pub in_flight: usize,
    pub status: u16,
    pub request: ChatRequest,
}

pub fn messages_hash(messages: &[ConversationTurn]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Step counters keyed by rule index, messages hash and seed.
type Counters = HashMap<(usize, String, Option<u64>), usize>;

struct MockState {
    script: RwLock<Arc<MockScript>>,
    seq: AtomicU64,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    counters: Mutex<Counters>,
    transcript: Mutex<Vec<TranscriptEntry>>,
    transcript_file: Option<Mutex<std::fs::File>>,
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn h64(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

async fn chat(State(st): State<Arc<MockState>>, headers: HeaderMap, Json(req): Json<ChatRequest>) -> Response {
    let now = st.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    let _guard = InFlight(&st.in_flight);
    st.high_water.fetch_max(now, Ordering::SeqCst);

    let unit = headers.get(UNIT_HEADER).and_then(|v| v.to_str().ok()).map(String::from);
    let hash = messages_hash(&req.messages);
    let script = st.script.read().expect("script lock").clone();
    let step = script.rules.iter().enumerate().find_map(|(i, rule)| {
        if !rule.when.matches(unit.as_deref(), &hash, &req) {
            return None;
        }
        let mut counters = st.counters.lock().expect("counter lock");
        let n = counters.entry((i, hash.clone(), req.seed)).or_insert(0);
        let step = rule.responses[(*n).min(rule.responses.len() - 1)].clone();
        *n += 1;
        Some(step)
    });
    let step = step.unwrap_or_default();

    let seed_text = req.seed.map(|s| s.to_string()).unwrap_or_default();
    let (lo, hi) = script.latency_ms;
    let latency = step
        .latency_ms
        .unwrap_or_else(|| lo + h64(&[&hash, &seed_text, "latency"]) % (hi - lo + 1));
    if latency > 0 {
        tokio::time::sleep(Duration::from_millis(latency)).await;
    }

    let status = step.status.unwrap_or(200);
    let entry = TranscriptEntry {
        seq: st.seq.fetch_add(1, Ordering::SeqCst),
        unit_id: unit,
        messages_hash: hash.clone(),
        in_flight: now,
        status,
        request: req.clone(),
    };
    if let Some(f) = &st.transcript_file {
        use std::io::Write;
        let mut f = f.lock().expect("transcript file lock");
        let _ = writeln!(f, "{}", serde_json::to_string(&entry).expect("entry serializes"));
    }
    st.transcript.lock().expect("transcript lock").push(entry);

    if status != 200 {
        let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (code, Json(json!({"error": {"message": format!("scripted failure {status}")}}))).into_response();
    }
    let (text, top) = match step.text {
        Some(t) => (t, step.top_logprobs),
        None => generate(&script.default, &req, &hash),
    };
    Json(response_body(&req, text, top, step.finish_reason)).into_response()
}

fn approx_tokens(chars: usize) -> u64 {
    chars.div_ceil(4) as u64
}

fn response_body(req: &ChatRequest, text: String, top: Option<Vec<TokenLogprob>>, finish: Option<String>) -> Value {
    let input: usize = req.messages.iter().map(|m| m.content.chars().count()).sum();
    let logprobs = match (req.logprobs, top) {
        (Some(true), Some(top)) => {
            let first = top.first().cloned().unwrap_or_else(|| TokenLogprob::new(text.clone(), 0.0));
            json!({"content": [{
                "token": first.token,
                "logprob": first.logprob,
                "top_logprobs": top.iter().map(|t| json!({"token": t.token, "logprob": t.logprob})).collect::<Vec<_>>(),
            }]})
        }
        _ => Value::Null,
    };
    json!({
        "id": "mock",
        "object": "chat.completion",
        "model": req.model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": finish.unwrap_or_else(|| "stop".into()),
            "logprobs": logprobs,
        }],
        "usage": {"prompt_tokens": approx_tokens(input), "completion_tokens": approx_tokens(text.chars().count())},
    })
}

/// Deterministic weights in (0, 1] summing to one.
fn weights(n: usize, salt: &str) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| 1.0 + (h64(&[salt, &i.to_string()]) % 9) as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn pick<'a>(items: &'a [String], salt: &str) -> &'a str {
    &items[(h64(&[salt]) % items.len() as u64) as usize]
}

fn logprob_list(labels: &[String], salt: &str, k: usize) -> (String, Vec<TokenLogprob>) {
    let w = weights(labels.len(), salt);
    let mut top: Vec<TokenLogprob> = labels.iter().zip(&w).map(|(l, p)| TokenLogprob::new(l.clone(), p.ln())).collect();
    top.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    top.truncate(k.max(1));
    (top[0].token.clone(), top)
}

/// `label: text` lines of a rendered question block.
fn option_labels(prompt: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in prompt.lines() {
        if let Some((label, text)) = line.split_once(": ") {
            let label = label.trim();
            if !label.is_empty() && label.len() <= 4 && !label.contains(' ') && !label.starts_with('"') && !text.is_empty() && !out.iter().any(|l| l == label) {
                out.push(label.to_string());
            }
        }
    }
    out
}

fn int_after(s: &str) -> Option<(i64, &str)> {
    let s = s.trim_start();
    let end = s
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || (i == 0 && c == '-')))
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    s[..end].parse().ok().map(|v| (v, &s[end..]))
}

/// Reads "between A and B" or "from A to B" from the prompt.
fn stated_range(prompt: &str) -> Option<(i64, i64)> {
    for (open, mid) in [("between ", " and "), ("from ", " to ")] {
        let mut rest = prompt;
        while let Some(i) = rest.find(open) {
            rest = &rest[i + open.len()..];
            if let Some((a, tail)) = int_after(rest) {
                if let Some(tail) = tail.strip_prefix(mid) {
                    if let Some((b, _)) = int_after(tail) {
                        if a <= b {
                            return Some((a, b));
                        }
                    }
                }
            }
        }
    }
    None
}

/// Keys of the last fenced JSON template, with their placeholders.
fn template_fields(prompt: &str) -> Option<Vec<(String, String)>> {
    let start = prompt.rfind("```json\n")? + "```json\n".len();
    let body = &prompt[start..];
    let body = &body[..body.find("```")?];
    let mut out = Vec::new();
    for line in body.lines() {
        let line = line.trim().trim_end_matches(',');
        let Some(rest) = line.strip_prefix('"') else { continue };
        let Some(end) = rest.find("\": ") else { continue };
        out.push((rest[..end].to_string(), rest[end + 3..].to_string()));
    }
    Some(out)
}

fn number_in(range: (i64, i64), salt: &str) -> i64 {
    let span = (range.1 - range.0 + 1).max(1) as u64;
    range.0 + (h64(&[salt]) % span) as i64
}

fn fill_schema(schema: &Value, range: (i64, i64), salt: &str) -> Value {
    let mut obj = Map::new();
    let props = schema.get("properties").and_then(Value::as_object).cloned().unwrap_or_default();
    for (key, prop) in props {
        let salt = format!("{salt}/{key}");
        let value = if let Some(choices) = prop.get("enum").and_then(Value::as_array) {
            let labels: Vec<String> = choices.iter().filter_map(|c| c.as_str().map(String::from)).collect();
            if labels.is_empty() {
                Value::Null
            } else {
                json!(pick(&labels, &salt))
            }
        } else if prop.get("type").and_then(Value::as_str) == Some("number") {
            let lo = prop.get("minimum").and_then(Value::as_i64).unwrap_or(range.0);
            let hi = prop.get("maximum").and_then(Value::as_i64).unwrap_or(range.1);
            json!(number_in((lo, hi), &salt))
        } else {
            json!("Synthetic reasoning.")
        };
        obj.insert(key, value);
    }
    Value::Object(obj)
}

fn generate(behavior: &Behavior, req: &ChatRequest, hash: &str) -> (String, Option<Vec<TokenLogprob>>) {
    let prompt = req.last_user().unwrap_or_default();
    let salt = format!("{hash}/{}", req.seed.map(|s| s.to_string()).unwrap_or_default());
    let range = match behavior {
        Behavior::Echo => return (prompt.to_string(), None),
        Behavior::Fixed { text } => return (text.clone(), None),
        Behavior::Synthetic { number_range } => stated_range(prompt).unwrap_or(*number_range),
    };
    let k = req.top_logprobs.unwrap_or(20) as usize;
    let wants_logprobs = req.logprobs == Some(true);
    let guided = req.structured_outputs.as_ref();

    if let Some(schema) = guided.and_then(|g| g.json.as_ref()) {
        return (fill_schema(schema, range, &salt).to_string(), None);
    }
    if let Some(choices) = guided.and_then(|g| g.choice.as_ref()).filter(|c| !c.is_empty()) {
        if wants_logprobs {
            let (first, top) = logprob_list(choices, &salt, k);
            return (first, Some(top));
        }
        return (pick(choices, &salt).to_string(), None);
    }
    let labels = option_labels(prompt);
    if wants_logprobs && !labels.is_empty() {
        let (first, top) = logprob_list(&labels, &salt, k);
        return (first, Some(top));
    }
    if let Some(fields) = template_fields(prompt) {
        let verbalized: Vec<&(String, String)> = fields.iter().filter(|(_, p)| p.starts_with("<probability of")).collect();
        let mut obj = Map::new();
        let w = weights(verbalized.len(), &salt);
        let mut vi = 0;
        for (key, placeholder) in &fields {
            let salt = format!("{salt}/{key}");
            let value = if placeholder.starts_with("<probability of") {
                vi += 1;
                json!(w[vi - 1])
            } else if key == "reasoning" {
                json!("Synthetic reasoning.")
            } else if !labels.is_empty() {
                json!(pick(&labels, &salt))
            } else {
                json!(number_in(range, &salt))
            };
            obj.insert(key.clone(), value);
        }
        let text = serde_json::to_string_pretty(&Value::Object(obj)).expect("json");
        return (format!("```json\n{text}\n```"), None);
    }
    if !labels.is_empty() {
        return (pick(&labels, &salt).to_string(), None);
    }
    (number_in(range, &salt).to_string(), None)
}

pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Starts on an ephemeral loopback port.
    pub async fn start(script: MockScript) -> Result<Self, MockError> {
        Self::bind(script, SocketAddr::from(([127, 0, 0, 1], 0)), None).await
    }

    pub async fn bind(script: MockScript, addr: SocketAddr, transcript_path: Option<PathBuf>) -> Result<Self, MockError> {
        let transcript_file = match transcript_path {
            Some(p) => Some(Mutex::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        let state = Arc::new(MockState {
            script: RwLock::new(Arc::new(script)),
            seq: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
            counters: Mutex::new(HashMap::new()),
            transcript: Mutex::new(Vec::new()),
            transcript_file,
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat))
            .route("/mock/transcript", get(transcript_route))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|source| MockError::Bind { addr, source })?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.state.transcript.lock().expect("transcript lock").clone()
    }

    pub fn high_water(&self) -> usize {
        self.state.high_water.load(Ordering::SeqCst)
    }

    /// Replaces the script for subsequent requests and resets.
    pub fn set_script(&self, script: MockScript) {
        *self.state.script.write().expect("script lock") = Arc::new(script);
        self.reset();
    }

    /// Clears the transcript, the high-water mark and rule counters.
    pub fn reset(&self) {
        self.state.transcript.lock().expect("transcript lock").clear();
        self.state.counters.lock().expect("counter lock").clear();
        self.state.high_water.store(0, Ordering::SeqCst);
    }

    pub fn transcript_jsonl(&self) -> String {
        self.transcript()
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.task.take() {
            let _ = t.await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

async fn transcript_route(State(st): State<Arc<MockState>>) -> Json<Value> {
    let entries = st.transcript.lock().expect("transcript lock").clone();
    Json(json!({
        "high_water": st.high_water.load(Ordering::SeqCst),
        "entries": entries,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_ranges_and_labels() {
        assert_eq!(stated_range("a single number between 0 and 100."), Some((0, 100)));
        assert_eq!(stated_range("On a scale from 1 to 7, which"), Some((1, 7)));
        assert_eq!(stated_range("from here to there"), None);
        assert_eq!(option_labels("Q?\nA: yes\nB: no\nnote: x y"), vec!["A", "B", "note"]);
    }

    #[test]
    fn template_fields_parse() {
        let p = "x\n```json\n{\n  \"temperature_A?\": <temperature_A?>,\n  \"temperature_B?\": <temperature_B?>\n}\n```\nQ";
        let f = template_fields(p).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[1].0, "temperature_B?");
    }

    #[test]
    fn script_rejects_empty_rules() {
        assert!(MockScript::from_json(r#"{"rules": [{"match": {}, "responses": []}]}"#).is_err());
        let s = MockScript::from_json(r#"{"default": {"type": "echo"}, "latency_ms": [0, 3]}"#).unwrap();
        assert_eq!(s.default, Behavior::Echo);
    }
}
