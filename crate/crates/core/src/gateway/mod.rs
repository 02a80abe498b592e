//! Uniform access to text-generation backends with retries, corrective
//! re-prompts, per-backend rate limiting and full request recording.

mod backend;
mod remote;
mod replay;
mod request;

pub use backend::{Backend, BackendError, MockBackend, MockRule, MockScript};
pub use remote::{
    parse_chat_response, AbortTransport, ChatCompletionBackend, Transport, API_KEY_ENV, MODEL_ENV, URL_ENV,
};
pub use replay::{
    default_clock, file_digest, fixed_clock, load_fixture, write_fixture, Clock, FixtureRecord, ReplayMode,
    ReplayStore,
};
pub(crate) use replay::write_atomic;
pub use request::{request_hash, Decoding, Expectation, ModelRequest};

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimit {
    pub per_second: f64,
    pub burst: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// Attempts per request, counting the first.
    pub max_retries: u32,
    pub timeout_ms: u64,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub rate_limit: Option<RateLimit>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_retries: 3,
            timeout_ms: 60_000,
            backoff_base_ms: 250,
            backoff_max_ms: 4_000,
            rate_limit: None,
        }
    }
}

impl GatewayConfig {
    /// Delay before attempt `attempt + 1`, doubling from the base and capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_max_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    pub attempt: u32,
    pub backend_id: String,
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

struct TokenBucket {
    limit: RateLimit,
    state: Mutex<(f64, Option<Instant>)>,
}

impl TokenBucket {
    fn new(limit: RateLimit) -> Self {
        TokenBucket {
            limit,
            state: Mutex::new((limit.burst.max(1) as f64, None)),
        }
    }

    fn acquire(&self, sleep: &Sleeper) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                if let Some(last) = state.1 {
                    let refill = now.duration_since(last).as_secs_f64() * self.limit.per_second;
                    state.0 = (state.0 + refill).min(self.limit.burst.max(1) as f64);
                }
                state.1 = Some(now);
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.limit.per_second.max(1e-9))
            };
            sleep(wait);
        }
    }
}

struct Registered {
    backend: Arc<dyn Backend>,
    bucket: Option<TokenBucket>,
}

pub struct Gateway {
    backends: HashMap<String, Registered>,
    config: GatewayConfig,
    sleeper: Sleeper,
}

const CORRECTION_SUFFIX: &str = "\n\nYour previous answer could not be used";

impl Gateway {
    pub fn new(config: GatewayConfig) -> Self {
        Gateway {
            backends: HashMap::new(),
            config,
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    /// Replaces the sleep function used for backoff and rate limiting.
    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn register(&mut self, id: impl Into<String>, backend: Arc<dyn Backend>) -> &mut Self {
        let bucket = self.config.rate_limit.map(TokenBucket::new);
        self.backends.insert(id.into(), Registered { backend, bucket });
        self
    }

    pub fn with_backend(mut self, id: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        self.register(id, backend);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn has_backend(&self, id: &str) -> bool {
        self.backends.contains_key(id)
    }

    /// Sends one request, retrying transport failures with exponential
    /// backoff up to `max_retries` attempts.
    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse> {
        request.validate().map_err(Error::Config)?;
        let reg = self
            .backends
            .get(&request.backend_id)
            .ok_or_else(|| Error::BackendUnavailable(format!("unknown backend id {:?}", request.backend_id)))?;
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let max = self.config.max_retries.max(1);
        let mut last_err = BackendError::Transport("no attempt made".into());
        for attempt in 1..=max {
            if let Some(bucket) = &reg.bucket {
                bucket.acquire(&self.sleeper);
            }
            let started = Instant::now();
            match reg.backend.call(request, timeout) {
                Ok(text) => {
                    return Ok(ModelResponse {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt,
                        backend_id: request.backend_id.clone(),
                    })
                }
                Err(e) if e.is_retryable() => {
                    log::debug!("backend {} attempt {attempt} failed: {e:?}", request.backend_id);
                    last_err = e;
                    if attempt < max {
                        (self.sleeper)(self.config.backoff(attempt));
                    }
                }
                Err(e) => {
                    last_err = e;
                    break;
                }
            }
        }
        Err(match last_err {
            BackendError::Timeout => Error::Timeout {
                deadline_ms: self.config.timeout_ms,
            },
            BackendError::ReplayMiss(h) => Error::ReplayMiss(h),
            BackendError::Transport(m) | BackendError::Fatal(m) => Error::BackendUnavailable(m),
        })
    }

    /// Sends a request whose output must satisfy `parse`. A malformed answer
    /// gets one corrective re-prompt; a second failure is `MalformedOutput`.
    pub fn complete_parsed<T>(
        &self,
        request: &ModelRequest,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<(T, ModelResponse)> {
        let first = self.complete(request)?;
        let reason = match parse(&first.text) {
            Ok(v) => return Ok((v, first)),
            Err(reason) => reason,
        };
        let mut corrective = request.clone();
        corrective.user_prompt = format!(
            "{}{CORRECTION_SUFFIX} ({reason}).\nPrevious answer: {}\nAnswer again, following the required output format exactly.",
            request.user_prompt,
            first.text.trim()
        );
        let second = self.complete(&corrective)?;
        match parse(&second.text) {
            Ok(v) => Ok((v, second)),
            Err(reason) => Err(Error::MalformedOutput {
                attempts: 2,
                reason,
                last_output: second.text,
            }),
        }
    }
}
