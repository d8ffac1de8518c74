//! Completions-style HTTP client.
//!
//! Request body: `{model, prompt, max_tokens, temperature, n, stop, seed}`.
//! Response body: `{choices: [{text, index?, logprobs?}]}`, where `logprobs`
//! follows the `{tokens, token_logprobs}` layout. Scoring sends the text with
//! `echo: true, max_tokens: 0, logprobs: 0` and reads the echoed token
//! log-probabilities back.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use propinfer_core::rng::derive_seed;
use propinfer_core::{DecodeParams, Error, GenerationSet, Result, TextModel};
use serde::{Deserialize, Serialize};

/// Environment variable holding the bearer token for remote endpoints.
pub const API_KEY_ENV: &str = "PROPINFER_API_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_backoff_ms: 250,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }
}

/// Serializable description of a remote endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteSpec {
    pub url: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Largest `n` sent in one request.
    #[serde(default = "default_chunk")]
    pub max_batch: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_chunk() -> usize {
    128
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

impl RemoteSpec {
    pub fn new(url: &str, model: &str) -> RemoteSpec {
        RemoteSpec {
            url: url.to_string(),
            model: model.to_string(),
            decode: DecodeParams::default(),
            retry: RetryPolicy::default(),
            max_batch: default_chunk(),
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    n: usize,
    stop: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    echo: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    index: Option<usize>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    token_logprobs: Option<Vec<Option<f64>>>,
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

pub struct RemoteModel {
    spec: RemoteSpec,
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteModel {
    /// Builds a client; the API key is read from `PROPINFER_API_KEY`.
    pub fn new(spec: RemoteSpec) -> Result<RemoteModel> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        RemoteModel::with_api_key(spec, key)
    }

    pub fn with_api_key(spec: RemoteSpec, api_key: Option<String>) -> Result<RemoteModel> {
        spec.decode.validate()?;
        if spec.max_batch == 0 || spec.max_in_flight == 0 {
            return Err(Error::InvalidArgument("max_batch and max_in_flight must be positive".into()));
        }
        let base = spec.url.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(Error::InvalidArgument(format!("endpoint url `{}` is not http(s)", spec.url)));
        }
        let endpoint = if base.ends_with("/completions") {
            base.to_string()
        } else {
            format!("{base}/completions")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(spec.timeout_secs)))
            .build()
            .into();
        Ok(RemoteModel {
            spec,
            endpoint,
            api_key,
            agent,
        })
    }

    pub fn spec(&self) -> &RemoteSpec {
        &self.spec
    }

    fn post_once(&self, body: &CompletionRequest<'_>) -> std::result::Result<CompletionResponse, Failure> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Failure::Retryable(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("{}: HTTP {status}", self.endpoint)));
        }
        if status >= 400 {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(format!("{}: HTTP {status}: {}", self.endpoint, detail.trim())));
        }
        resp.body_mut()
            .read_json::<CompletionResponse>()
            .map_err(|e| Failure::Fatal(format!("{}: bad response body: {e}", self.endpoint)))
    }

    fn post(&self, body: &CompletionRequest<'_>) -> Result<CompletionResponse> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(msg)) => return Err(Error::Transport(msg)),
                Err(Failure::Retryable(msg)) if attempt >= self.spec.retry.max_retries => {
                    return Err(Error::Transport(format!("{msg} (after {} retries)", attempt)));
                }
                Err(Failure::Retryable(_)) => {
                    thread::sleep(self.spec.retry.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }

    fn complete_chunk(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>> {
        let body = CompletionRequest {
            model: &self.spec.model,
            prompt,
            max_tokens: self.spec.decode.max_tokens,
            temperature: self.spec.decode.temperature,
            n,
            stop: &self.spec.decode.stop_sequences,
            seed: Some(seed),
            echo: None,
            logprobs: None,
        };
        let resp = self.post(&body)?;
        if resp.choices.len() != n {
            return Err(Error::Transport(format!(
                "{}: asked for {n} completions, got {}",
                self.endpoint,
                resp.choices.len()
            )));
        }
        // slot by the server's index when it gives one
        let mut slots = vec![None; n];
        for (pos, c) in resp.choices.into_iter().enumerate() {
            let slot = c.index.unwrap_or(pos);
            if slot >= n || slots[slot].is_some() {
                return Err(Error::Transport(format!("{}: bad choice index {slot}", self.endpoint)));
            }
            slots[slot] = Some(c.text.unwrap_or_default());
        }
        Ok(slots.into_iter().map(Option::unwrap_or_default).collect())
    }
}

impl TextModel for RemoteModel {
    fn model_id(&self) -> String {
        format!("remote:{}:{}", self.spec.url, self.spec.model)
    }

    /// Splits `n` into requests of at most `max_batch` completions, runs up
    /// to `max_in_flight` of them at once and assembles results by chunk
    /// slot, so completion order never changes the output order.
    fn generate_batch(&self, prompt: &str, n: usize, seed: u64) -> Result<GenerationSet> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let chunks: Vec<usize> = (0..n)
            .step_by(self.spec.max_batch)
            .map(|start| self.spec.max_batch.min(n - start))
            .collect();
        let results: Vec<Mutex<Option<Result<Vec<String>>>>> = chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.spec.max_in_flight.min(chunks.len());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    if k >= chunks.len() {
                        break;
                    }
                    let r = self.complete_chunk(prompt, chunks[k], derive_seed(seed, &[k as u64]));
                    let failed = r.is_err();
                    *results[k].lock().unwrap() = Some(r);
                    if failed {
                        // let the other workers drain without new requests
                        next.store(chunks.len(), Ordering::Relaxed);
                    }
                });
            }
        });
        let mut texts = Vec::with_capacity(n);
        for slot in results {
            match slot.into_inner().unwrap() {
                Some(r) => texts.extend(r?),
                None => return Err(Error::Transport(format!("{}: request abandoned", self.endpoint))),
            }
        }
        Ok(GenerationSet::new(&self.model_id(), prompt, texts))
    }

    fn score_logprobs(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let body = CompletionRequest {
            model: &self.spec.model,
            prompt: text,
            max_tokens: 0,
            temperature: self.spec.decode.temperature,
            n: 1,
            stop: &[],
            seed: None,
            echo: Some(true),
            logprobs: Some(0),
        };
        let resp = self.post(&body)?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .and_then(|l| l.token_logprobs)
            .ok_or_else(|| Error::ScoringUnsupported(self.model_id()))?;
        // the first token has no context and comes back as null
        Ok(lp.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_grows_geometrically() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(0), Duration::from_millis(250));
        assert_eq!(p.backoff(2), Duration::from_millis(1000));
    }

    #[test]
    fn rejects_bad_urls() {
        assert!(RemoteModel::with_api_key(RemoteSpec::new("ftp://x", "m"), None).is_err());
        let m = RemoteModel::with_api_key(RemoteSpec::new("http://h:1/v1/", "m"), None).unwrap();
        assert_eq!(m.endpoint, "http://h:1/v1/completions");
    }
}
