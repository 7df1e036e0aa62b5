//! Chat-completion client with log-probabilities, retries and a JSONL
//! record/replay cassette.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, PerceptionModel, ReasoningModel, ScoringModel};
use crate::templates::PromptTemplates;
use crate::types::{Observation, Question};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    #[default]
    Off,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub api_base: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model_vlm: String,
    pub model_llm: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
    pub cassette: Option<PathBuf>,
    pub cassette_mode: CassetteMode,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            api_base: "http://127.0.0.1:8000".into(),
            api_key: None,
            model_vlm: "vlm".into(),
            model_llm: "llm".into(),
            temperature: 0.0,
            max_tokens: 512,
            max_attempts: 3,
            backoff_ms: 200,
            timeout_s: 120,
            cassette: None,
            cassette_mode: CassetteMode::Off,
        }
    }
}

impl RemoteConfig {
    /// Applies `PRISM_API_BASE`, `PRISM_API_KEY`, `PRISM_MODEL_VLM` and
    /// `PRISM_MODEL_LLM` when set.
    pub fn with_env(mut self) -> Self {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(v) = get("PRISM_API_BASE") {
            self.api_base = v;
        }
        if let Some(v) = get("PRISM_API_KEY") {
            self.api_key = Some(v);
        }
        if let Some(v) = get("PRISM_MODEL_VLM") {
            self.model_vlm = v;
        }
        if let Some(v) = get("PRISM_MODEL_LLM") {
            self.model_llm = v;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub content: String,
    pub logprobs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CassetteEntry {
    request_hash: String,
    request: Value,
    response: Value,
}

struct Cassette {
    mode: CassetteMode,
    entries: BTreeMap<String, Value>,
    sink: Option<File>,
}

impl Cassette {
    fn open(path: &Path, mode: CassetteMode) -> Result<Self, BackendError> {
        let err = |e: std::io::Error| BackendError::Cassette(format!("{}: {e}", path.display()));
        let mut entries = BTreeMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path).map_err(err)?).lines() {
                let line = line.map_err(err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: CassetteEntry = serde_json::from_str(&line)
                    .map_err(|e| BackendError::Cassette(format!("bad cassette line: {e}")))?;
                entries.insert(e.request_hash, e.response);
            }
        } else if mode == CassetteMode::Replay {
            return Err(BackendError::Cassette(format!("{} does not exist", path.display())));
        }
        let sink = match mode {
            CassetteMode::Record => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(err)?,
            ),
            _ => None,
        };
        Ok(Self { mode, entries, sink })
    }
}

/// Shared HTTP client; the role-specific wrappers hold an `Arc` to it.
pub struct RemoteClient {
    cfg: RemoteConfig,
    http: reqwest::blocking::Client,
    cassette: Option<Mutex<Cassette>>,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient").field("api_base", &self.cfg.api_base).finish()
    }
}

fn request_hash(req: &Value) -> String {
    // serde_json maps are key-sorted, so this is canonical.
    sha256_hex(req.to_string().as_bytes())
}

impl RemoteClient {
    pub fn new(cfg: RemoteConfig) -> Result<Self, BackendError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let cassette = match (&cfg.cassette, cfg.cassette_mode) {
            (_, CassetteMode::Off) => None,
            (Some(p), m) => Some(Mutex::new(Cassette::open(p, m)?)),
            (None, _) => {
                return Err(BackendError::Config("cassette mode set without a cassette path".into()))
            }
        };
        Ok(Self { cfg, http, cassette })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.cfg.api_base.trim_end_matches('/'))
    }

    fn post_with_retry(&self, body: &Value) -> Result<Value, BackendError> {
        let mut last = String::new();
        let attempts = self.cfg.max_attempts.max(1);
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            let mut req = self.http.post(self.url()).json(body);
            if let Some(k) = &self.cfg.api_key {
                req = req.bearer_auth(k);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<Value>()
                            .map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")));
                    }
                    last = format!("HTTP {status}");
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(BackendError::Protocol(last));
                    }
                }
                Err(e) => last = e.to_string(),
            }
            tracing::warn!(attempt = attempt + 1, error = %last, "remote call failed");
        }
        Err(BackendError::Unavailable {
            attempts,
            message: last,
        })
    }

    fn exchange(&self, body: Value) -> Result<Value, BackendError> {
        let Some(cassette) = &self.cassette else {
            return self.post_with_retry(&body);
        };
        let hash = request_hash(&body);
        let mode = cassette.lock().expect("cassette lock").mode;
        if mode == CassetteMode::Replay {
            let c = cassette.lock().expect("cassette lock");
            return c
                .entries
                .get(&hash)
                .cloned()
                .ok_or_else(|| BackendError::Cassette(format!("no recorded response for request {hash}")));
        }
        let response = self.post_with_retry(&body)?;
        let mut c = cassette.lock().expect("cassette lock");
        let line = serde_json::to_string(&CassetteEntry {
            request_hash: hash.clone(),
            request: body,
            response: response.clone(),
        })
        .map_err(|e| BackendError::Cassette(e.to_string()))?;
        if let Some(f) = c.sink.as_mut() {
            writeln!(f, "{line}").map_err(|e| BackendError::Cassette(e.to_string()))?;
        }
        c.entries.insert(hash, response.clone());
        Ok(response)
    }

    /// One chat completion.
    pub fn chat(&self, model: &str, messages: Value, logprobs: bool) -> Result<ChatReply, BackendError> {
        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
            "logprobs": logprobs,
        });
        if logprobs {
            body["top_logprobs"] = json!(0);
        }
        parse_reply(&self.exchange(body)?)
    }

    /// Log-probabilities of `continuation` as the assistant's reply to
    /// `context`. The server is asked to continue the final message and echo
    /// its token log-probabilities.
    pub fn score(&self, model: &str, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        let body = json!({
            "model": model,
            "messages": [
                {"role": "user", "content": context},
                {"role": "assistant", "content": continuation},
            ],
            "temperature": 0.0,
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": 0,
            "echo": true,
            "add_generation_prompt": false,
            "continue_final_message": true,
        });
        let reply = parse_reply(&self.exchange(body)?)?;
        if reply.logprobs.is_empty() {
            return Err(BackendError::Protocol("no token log-probabilities in response".into()));
        }
        if let Some(bad) = reply.logprobs.iter().find(|v| !v.is_finite() || **v > 1e-9) {
            return Err(BackendError::Protocol(format!("invalid log-probability {bad}")));
        }
        Ok(reply.logprobs)
    }
}

fn parse_reply(v: &Value) -> Result<ChatReply, BackendError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("response has no choices[0]".into()))?;
    let content = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("choices[0].message.content missing".into()))?
        .to_string();
    let logprobs = match choice.pointer("/logprobs/content").and_then(Value::as_array) {
        Some(toks) => toks
            .iter()
            .map(|t| {
                t.get("logprob")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| BackendError::Protocol("token entry without logprob".into()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    Ok(ChatReply { content, logprobs })
}

fn user_message(text: &str, obs: Option<&Observation>) -> Value {
    match obs.and_then(|o| o.raw_view.as_deref()) {
        Some(url) => json!([{"role": "user", "content": [
            {"type": "text", "text": text},
            {"type": "image_url", "image_url": {"url": url}},
        ]}]),
        None => json!([{"role": "user", "content": text}]),
    }
}

#[derive(Debug, Clone)]
pub struct RemotePerception {
    client: Arc<RemoteClient>,
    templates: PromptTemplates,
}

impl RemotePerception {
    pub fn new(client: Arc<RemoteClient>, templates: PromptTemplates) -> Self {
        Self { client, templates }
    }
}

impl PerceptionModel for RemotePerception {
    fn describe(&self, prompt: &str, obs: &Observation) -> Result<String, BackendError> {
        let model = self.client.cfg.model_vlm.clone();
        Ok(self.client.chat(&model, user_message(prompt, Some(obs)), false)?.content)
    }

    fn answer(&self, question: &Question, obs: &Observation) -> Result<String, BackendError> {
        let prompt = self
            .templates
            .render_vqa(&question.text)
            .map_err(|e| BackendError::Config(e.to_string()))?;
        self.describe(&prompt, obs)
    }

    fn id(&self) -> &str {
        &self.client.cfg.model_vlm
    }
}

#[derive(Debug, Clone)]
pub struct RemoteReasoner {
    client: Arc<RemoteClient>,
}

impl RemoteReasoner {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl ReasoningModel for RemoteReasoner {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let model = self.client.cfg.model_llm.clone();
        Ok(self.client.chat(&model, user_message(prompt, None), false)?.content)
    }

    fn id(&self) -> &str {
        &self.client.cfg.model_llm
    }
}

#[derive(Debug, Clone)]
pub struct RemoteScorer {
    client: Arc<RemoteClient>,
}

impl RemoteScorer {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl ScoringModel for RemoteScorer {
    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        if continuation.trim().is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        let model = self.client.cfg.model_llm.clone();
        self.client.score(&model, context, continuation)
    }
}

#[cfg(test)]
mod tests {
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;

    /// Serves `n` canned HTTP responses, counting requests.
    fn stub(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut s, _)) = listener.accept() else { return };
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = s.read(&mut chunk).unwrap_or(0);
                    if n == 0 {
                        break;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf);
                    if let Some(idx) = text.find("\r\n\r\n") {
                        let len = text[..idx]
                            .lines()
                            .find_map(|l| {
                                l.to_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= idx + 4 + len {
                            break;
                        }
                    }
                }
                h.fetch_add(1, Ordering::SeqCst);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = s.write_all(resp.as_bytes());
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn reply(content: &str, lps: &[f64]) -> String {
        let toks: Vec<Value> = lps.iter().map(|l| json!({"token": "t", "logprob": l})).collect();
        json!({"choices": [{"message": {"role": "assistant", "content": content},
                            "logprobs": {"content": toks}}]})
        .to_string()
    }

    fn cfg(base: String) -> RemoteConfig {
        RemoteConfig {
            api_base: base,
            backoff_ms: 1,
            timeout_s: 5,
            ..Default::default()
        }
    }

    #[test]
    fn logprobs_pass_through() {
        let (base, _) = stub(vec![(200, reply("", &[-0.1, -0.2]))]);
        let c = Arc::new(RemoteClient::new(cfg(base)).unwrap());
        assert_eq!(RemoteScorer::new(c).token_logprobs("ctx", "go north").unwrap(), vec![-0.1, -0.2]);
    }

    #[test]
    fn retries_then_succeeds() {
        let (base, hits) = stub(vec![(500, "{}".into()), (200, reply("OK", &[]))]);
        let c = Arc::new(RemoteClient::new(cfg(base)).unwrap());
        assert_eq!(RemoteReasoner::new(c).complete("say OK").unwrap(), "OK");
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn server_down_is_unavailable_after_n_attempts() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let mut c = cfg(base);
        c.max_attempts = 3;
        let c = Arc::new(RemoteClient::new(c).unwrap());
        match RemoteReasoner::new(c).complete("x") {
            Err(BackendError::Unavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_response_is_protocol_error() {
        let (base, _) = stub(vec![(200, "{\"choices\": []}".into())]);
        let c = Arc::new(RemoteClient::new(cfg(base)).unwrap());
        assert!(matches!(RemoteReasoner::new(c).complete("x"), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn cassette_record_then_replay_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let (base, _) = stub(vec![(200, reply("OK \u{2013} recorded", &[]))]);
        let mut rc = cfg(base);
        rc.cassette = Some(path.clone());
        rc.cassette_mode = CassetteMode::Record;
        let recorded = RemoteReasoner::new(Arc::new(RemoteClient::new(rc.clone()).unwrap()))
            .complete("say OK")
            .unwrap();
        rc.api_base = "http://127.0.0.1:9".into();
        rc.cassette_mode = CassetteMode::Replay;
        let r = RemoteReasoner::new(Arc::new(RemoteClient::new(rc).unwrap()));
        assert_eq!(r.complete("say OK").unwrap(), recorded);
        assert!(matches!(r.complete("other"), Err(BackendError::Cassette(_))));
        let line = std::fs::read_to_string(&path).unwrap();
        let v: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(v["request_hash"].as_str().unwrap().len(), 64);
        assert_eq!(v["request"]["messages"][0]["content"], "say OK");
    }

    #[test]
    fn raw_view_becomes_image_part() {
        assert_eq!(user_message("hi", None)[0]["content"], "hi");
        let scene = crate::env::household::toilet_scene();
        let o = Observation::new(
            "ep",
            0,
            crate::types::Symbolic::Household(scene.local_scene(Arc::new(scene.vocabulary()))),
        )
        .with_raw_view("file:///frame.png");
        let m = user_message("hi", Some(&o));
        assert_eq!(m[0]["content"][1]["image_url"]["url"], "file:///frame.png");
    }
}
