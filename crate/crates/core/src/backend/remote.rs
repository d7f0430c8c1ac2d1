//! HTTP adapter for a real serving endpoint, behind the `remote` feature.
//!
//! Wire protocol, all JSON:
//!   POST {base}/generate  {"prompt", "max_tokens", "temperature"} -> {"text"}
//!   POST {base}/chat      {"messages": [{"role", "content"}]}     -> {"text"}
//!   POST {base}/train     {"manifest", "epochs", "base_model"}    -> {"job_id"}
//!   GET  {base}/train/{job_id} -> {"status": "pending|running|done|failed", "model"?}
//!
//! Requests are retried with exponential backoff on transport errors,
//! 429 and 5xx; other statuses fail fast. A token bucket caps the request
//! rate and at most `max_in_flight` generations run concurrently. The only
//! prompt rewriting ever done is transliterating the mask token into
//! whatever the serving side expects.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{validate_requests, Backend, BackendError, GenerationRequest, TrainingJob};
use crate::prompting::MASK_TOKEN;

const ENDPOINT_VAR: &str = "CYCLEDST_ENDPOINT";
const API_KEY_VAR: &str = "CYCLEDST_API_KEY";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    /// Additional attempts after the first, per request.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Maximum concurrent generation requests.
    pub max_in_flight: usize,
    /// Request rate cap across all threads; `None` means uncapped.
    pub requests_per_sec: Option<f64>,
    /// What to send in place of the internal mask token, e.g.
    /// "<extra_id_0>" for T5-style models.
    pub mask_token: Option<String>,
    pub poll_interval_ms: u64,
    pub poll_attempts: u32,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            api_key: None,
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: 250,
            max_in_flight: 4,
            requests_per_sec: None,
            mask_token: None,
            poll_interval_ms: 500,
            poll_attempts: 240,
        }
    }

    /// Read endpoint and key from `CYCLEDST_ENDPOINT` / `CYCLEDST_API_KEY`.
    pub fn from_env() -> Result<Self, BackendError> {
        let base_url = std::env::var(ENDPOINT_VAR)
            .map_err(|_| BackendError::MissingConfig(format!("{ENDPOINT_VAR} is not set")))?;
        let mut config = RemoteConfig::new(base_url);
        config.api_key = std::env::var(API_KEY_VAR).ok();
        Ok(config)
    }
}

struct TokenBucket {
    capacity: f64,
    tokens: f64,
    per_ms: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(per_sec: f64) -> Self {
        let capacity = per_sec.max(1.0);
        TokenBucket { capacity, tokens: capacity, per_ms: per_sec / 1000.0, last: Instant::now() }
    }

    fn try_take(&mut self) -> Option<Duration> {
        let now = Instant::now();
        let elapsed_ms = now.duration_since(self.last).as_secs_f64() * 1000.0;
        self.last = now;
        self.tokens = (self.tokens + elapsed_ms * self.per_ms).min(self.capacity);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            None
        } else {
            let missing = 1.0 - self.tokens;
            Some(Duration::from_millis((missing / self.per_ms).ceil() as u64))
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    limiter: Option<Mutex<TokenBucket>>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        let limiter = config.requests_per_sec.map(|r| Mutex::new(TokenBucket::new(r)));
        RemoteBackend { config, agent, limiter }
    }

    fn wait_for_slot(&self) {
        let Some(limiter) = &self.limiter else { return };
        loop {
            let wait = limiter.lock().unwrap().try_take();
            match wait {
                None => return,
                Some(d) => std::thread::sleep(d),
            }
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POST `body` to `path` with retries; returns the parsed JSON reply.
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, String> {
        let url = self.url(path);
        let mut attempt = 0;
        loop {
            self.wait_for_slot();
            let mut req = self.agent.post(&url);
            if let Some(key) = &self.config.api_key {
                req = req.set("authorization", &format!("Bearer {key}"));
            }
            let outcome = req.send_json(body.clone());
            match outcome {
                Ok(resp) => {
                    return resp.into_json::<Value>().map_err(|e| format!("bad json reply: {e}"));
                }
                Err(ureq::Error::Status(code, resp)) if code == 429 || code >= 500 => {
                    if attempt >= self.config.max_retries {
                        let detail = resp.into_string().unwrap_or_default();
                        return Err(format!("http {code} after {attempt} retries: {detail}"));
                    }
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let detail = resp.into_string().unwrap_or_default();
                    return Err(format!("http {code}: {detail}"));
                }
                Err(ureq::Error::Transport(t)) => {
                    if attempt >= self.config.max_retries {
                        return Err(format!("transport error after {attempt} retries: {t}"));
                    }
                }
            }
            let backoff = self.config.backoff_base_ms.saturating_mul(1 << attempt.min(8));
            std::thread::sleep(Duration::from_millis(backoff));
            attempt += 1;
        }
    }

    fn get_json(&self, path: &str) -> Result<Value, String> {
        let url = self.url(path);
        let mut req = self.agent.get(&url);
        if let Some(key) = &self.config.api_key {
            req = req.set("authorization", &format!("Bearer {key}"));
        }
        match req.call() {
            Ok(resp) => resp.into_json::<Value>().map_err(|e| format!("bad json reply: {e}")),
            Err(e) => Err(e.to_string()),
        }
    }

    fn outbound_prompt(&self, prompt: &str) -> String {
        match &self.config.mask_token {
            Some(token) => prompt.replace(MASK_TOKEN, token),
            None => prompt.to_string(),
        }
    }

    fn generate_one(&self, request: &GenerationRequest) -> Result<String, String> {
        let body = json!({
            "prompt": self.outbound_prompt(&request.sample.input_text),
            "max_tokens": request.decode_budget,
            "temperature": request.temperature,
        });
        let reply = self.post_json("generate", &body)?;
        reply
            .get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| "reply missing \"text\"".to_string())
    }

    /// Chat-style completion for in-context-learning and revision flows.
    pub fn chat(&self, messages: &[super::ChatMessage]) -> Result<String, BackendError> {
        let body = json!({ "messages": messages });
        let reply = self.post_json("chat", &body).map_err(BackendError::Training)?;
        reply
            .get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::InvalidRequest("chat reply missing \"text\"".into()))
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate_batch(&self, requests: &[GenerationRequest]) -> Result<Vec<String>, BackendError> {
        validate_requests(requests)?;
        let mut outcomes: Vec<Option<Result<String, String>>> = vec![None; requests.len()];
        let width = self.config.max_in_flight.max(1);
        for (chunk_start, chunk) in requests.chunks(width).enumerate().map(|(i, c)| (i * width, c))
        {
            let results: Vec<(usize, Result<String, String>)> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .enumerate()
                    .map(|(offset, request)| {
                        scope.spawn(move || (chunk_start + offset, self.generate_one(request)))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            for (index, result) in results {
                outcomes[index] = Some(result);
            }
        }
        let outcomes: Vec<Result<String, String>> =
            outcomes.into_iter().map(|o| o.expect("every index filled")).collect();
        let failed: Vec<usize> = outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.is_err().then_some(i))
            .collect();
        if failed.is_empty() {
            Ok(outcomes.into_iter().map(Result::unwrap).collect())
        } else {
            Err(BackendError::Generation { outcomes, failed })
        }
    }

    fn submit_training(&self, job: &TrainingJob) -> Result<String, BackendError> {
        job.validate()?;
        let manifest = std::fs::read_to_string(&job.manifest_path).map_err(|e| {
            BackendError::Training(format!(
                "cannot read manifest {}: {e}",
                job.manifest_path.display()
            ))
        })?;
        if manifest.trim().is_empty() {
            return Err(BackendError::EmptyManifest(job.manifest_path.clone()));
        }
        let body = json!({
            "manifest": manifest,
            "epochs": job.epochs,
            "base_model": job.base_model,
        });
        let reply = self.post_json("train", &body).map_err(BackendError::Training)?;
        let job_id = reply
            .get("job_id")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Training("train reply missing \"job_id\"".into()))?
            .to_string();
        for _ in 0..self.config.poll_attempts {
            let status = self.get_json(&format!("train/{job_id}")).map_err(BackendError::Training)?;
            match status.get("status").and_then(Value::as_str) {
                Some("done") => {
                    return status
                        .get("model")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .ok_or_else(|| {
                            BackendError::Training("finished job reports no model id".into())
                        });
                }
                Some("failed") => {
                    let reason = status
                        .get("error")
                        .and_then(Value::as_str)
                        .unwrap_or("unspecified failure");
                    return Err(BackendError::Training(format!("job {job_id} failed: {reason}")));
                }
                Some("pending" | "running") => {
                    std::thread::sleep(Duration::from_millis(self.config.poll_interval_ms));
                }
                other => {
                    return Err(BackendError::Training(format!(
                        "job {job_id} reported unknown status {other:?}"
                    )));
                }
            }
        }
        Err(BackendError::Training(format!("job {job_id} did not finish in time")))
    }
}
