use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{parse_response, ExpertAttributes, QueryTemplate};
use crate::corpus::{write_atomic, ArtifactRecord};
use crate::error::{Error, Result};

/// Environment variable holding the bearer credential for the LLM endpoint.
pub const API_KEY_ENV: &str = "ARTISYNTH_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            cache_dir: None,
            max_in_flight: 4,
            backoff_ms: 500,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("llm timeout must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("llm max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sends one query and returns the raw reply text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, query: &str) -> Result<String>;
}

/// Chat-completion over HTTP: one user message, temperature 0.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl HttpTransport {
    pub fn new(config: &LlmClientConfig) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        })
    }

    pub fn request_body(model: &str, query: &str) -> serde_json::Value {
        json!({
            "model": model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": query }],
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, query: &str) -> Result<String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(Self::request_body(&self.model, query))
            .map_err(|e| Error::Transport(e.to_string()))?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Transport("response has no choices".into()))
    }
}

/// Raw replies on disk, one file per query named by the query's SHA-256.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn key(query: &str) -> String {
        hex::encode(Sha256::digest(query.as_bytes()))
    }

    pub fn path_for(&self, query: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", Self::key(query)))
    }

    pub fn get(&self, query: &str) -> Option<String> {
        fs::read_to_string(self.path_for(query)).ok()
    }

    pub fn put(&self, query: &str, response: &str) -> Result<()> {
        write_atomic(&self.path_for(query), response.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EnhanceStatus {
    Complete {
        attributes: ExpertAttributes,
    },
    Incomplete {
        attributes: ExpertAttributes,
        missing: Vec<String>,
    },
    Failed {
        reason: String,
    },
}

impl EnhanceStatus {
    pub fn attributes(&self) -> Option<&ExpertAttributes> {
        match self {
            EnhanceStatus::Complete { attributes } => Some(attributes),
            _ => None,
        }
    }
}

/// Render → (cache | send with retries) → parse.
pub struct Enhancer {
    template: QueryTemplate,
    transport: Arc<dyn ChatTransport>,
    cache: Option<ResponseCache>,
    max_retries: u32,
    backoff: Duration,
    max_in_flight: usize,
    network_calls: AtomicUsize,
}

impl Enhancer {
    pub fn new(template: QueryTemplate, config: &LlmClientConfig, transport: Arc<dyn ChatTransport>) -> Result<Self> {
        config.validate()?;
        template.validate()?;
        let cache = config.cache_dir.as_ref().map(ResponseCache::new).transpose()?;
        Ok(Self {
            template,
            transport,
            cache,
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.backoff_ms),
            max_in_flight: config.max_in_flight,
            network_calls: AtomicUsize::new(0),
        })
    }

    /// Requests sent to the transport so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn fetch(&self, query: &str) -> Result<String> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(query)) {
            return Ok(hit);
        }
        let attempts = self.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.complete(query) {
                Ok(text) => {
                    if let Some(cache) = &self.cache {
                        cache.put(query, &text)?;
                    }
                    return Ok(text);
                }
                Err(e) => {
                    log::warn!("llm attempt {}/{attempts} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(Error::EnhancementFailed { attempts, last })
    }

    /// Parsed attributes; the set may be incomplete if the reply lacked labels.
    pub fn enhance_record(&self, record: &ArtifactRecord) -> Result<ExpertAttributes> {
        let query = self.template.render(record)?;
        let raw = self.fetch(&query)?;
        Ok(parse_response(&raw, record))
    }

    pub fn status_for(&self, record: &ArtifactRecord) -> EnhanceStatus {
        match self.enhance_record(record) {
            Ok(attributes) if attributes.is_complete() => EnhanceStatus::Complete { attributes },
            Ok(attributes) => EnhanceStatus::Incomplete {
                missing: attributes.missing().into_iter().map(String::from).collect(),
                attributes,
            },
            Err(e) => EnhanceStatus::Failed { reason: e.to_string() },
        }
    }

    /// Enhances every record with at most `max_in_flight` concurrent
    /// requests. Output order matches input order; one failure never aborts
    /// the batch.
    pub fn enhance_batch(&self, records: &[ArtifactRecord]) -> Vec<EnhanceStatus> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<EnhanceStatus>>> = Mutex::new(vec![None; records.len()]);
        let workers = self.max_in_flight.min(records.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= records.len() {
                        break;
                    }
                    let status = self.status_for(&records[i]);
                    results.lock().expect("no poisoned workers")[i] = Some(status);
                });
            }
        });
        results
            .into_inner()
            .expect("no poisoned workers")
            .into_iter()
            .map(|s| s.expect("every index visited"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted {
        fail_first: usize,
        calls: AtomicUsize,
    }

    impl ChatTransport for Scripted {
        fn complete(&self, _query: &str) -> Result<String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(Error::Transport("connection refused".into()))
            } else {
                Ok("Material: Jade\nType: Bi disc\nType Definition: flat ring\nShape: round\nPattern: plain".into())
            }
        }
    }

    fn record(id: &str) -> ArtifactRecord {
        ArtifactRecord {
            id: id.into(),
            name: format!("Disc {id}"),
            time_period: "Han".into(),
            description: "A jade disc".into(),
            size_text: "8 cm".into(),
            image: None,
        }
    }

    fn config(retries: u32, cache: Option<PathBuf>) -> LlmClientConfig {
        LlmClientConfig {
            max_retries: retries,
            backoff_ms: 1,
            cache_dir: cache,
            ..Default::default()
        }
    }

    #[test]
    fn retries_until_success() {
        let t = Arc::new(Scripted {
            fail_first: 2,
            calls: AtomicUsize::new(0),
        });
        let e = Enhancer::new(QueryTemplate::bundled(), &config(2, None), t).unwrap();
        let a = e.enhance_record(&record("1")).unwrap();
        assert!(a.is_complete());
        assert_eq!(e.network_calls(), 3);
    }

    #[test]
    fn exhausted_retries_report_last_failure() {
        let t = Arc::new(Scripted {
            fail_first: usize::MAX,
            calls: AtomicUsize::new(0),
        });
        let e = Enhancer::new(QueryTemplate::bundled(), &config(1, None), t).unwrap();
        match e.enhance_record(&record("1")) {
            Err(Error::EnhancementFailed { attempts, last }) => {
                assert_eq!(attempts, 2);
                assert!(last.contains("connection refused"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cache_key_is_sha256_hex() {
        assert_eq!(
            ResponseCache::key("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn timeout_must_be_positive() {
        let c = LlmClientConfig {
            timeout_secs: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn request_body_is_single_user_message_at_zero_temperature() {
        let b = HttpTransport::request_body("m", "q");
        assert_eq!(b["temperature"], 0);
        assert_eq!(b["messages"].as_array().unwrap().len(), 1);
        assert_eq!(b["messages"][0]["role"], "user");
    }
}
