use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::request::ModelRequest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Network or server failure; retried.
    Transport(String),
    /// The call exceeded its deadline; retried.
    Timeout,
    /// Replay store has no record for this hash; never retried.
    ReplayMiss(String),
    /// Misconfiguration or a backend that cannot answer; never retried.
    Fatal(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Timeout)
    }
}

/// A text-generation backend. Implementations must be safe for concurrent
/// calls.
pub trait Backend: Send + Sync {
    fn call(&self, request: &ModelRequest, timeout: Duration) -> std::result::Result<String, BackendError>;
}

type MockFn = dyn Fn(&ModelRequest) -> std::result::Result<String, BackendError> + Send + Sync;

/// One scripted response rule: fires when every `contains` needle occurs in
/// the system or user prompt. Successive matches walk `responses` and then
/// stick on the last entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
}

impl MockRule {
    pub fn new(contains: &[&str], respond: &str) -> Self {
        MockRule {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            respond: Some(respond.to_string()),
            responses: Vec::new(),
        }
    }

    fn response(&self, nth: usize) -> Option<&str> {
        if !self.responses.is_empty() {
            let i = nth.min(self.responses.len() - 1);
            return Some(&self.responses[i]);
        }
        self.respond.as_deref()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: Option<String>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::taxonomy::read_text(path)?;
        serde_json::from_str(&text).map_err(|e| Error::json(format!("mock script {}", path.display()), e))
    }
}

/// Deterministic scripted backend for tests and offline runs.
pub struct MockBackend {
    script: MockScript,
    func: Option<Box<MockFn>>,
    hits: Mutex<HashMap<usize, usize>>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn scripted(script: MockScript) -> Self {
        MockBackend {
            script,
            func: None,
            hits: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn fixed(response: &str) -> Self {
        Self::scripted(MockScript {
            rules: Vec::new(),
            default: Some(response.to_string()),
        })
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ModelRequest) -> std::result::Result<String, BackendError> + Send + Sync + 'static,
    {
        MockBackend {
            script: MockScript::default(),
            func: Some(Box::new(f)),
            hits: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn call(&self, request: &ModelRequest, _timeout: Duration) -> std::result::Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(f) = &self.func {
            return f(request);
        }
        let haystack = [request.system_prompt.as_str(), request.user_prompt.as_str()];
        for (i, rule) in self.script.rules.iter().enumerate() {
            let matched = rule
                .contains
                .iter()
                .all(|needle| haystack.iter().any(|h| h.contains(needle.as_str())));
            if matched {
                let nth = {
                    let mut hits = self.hits.lock().expect("mock lock");
                    let n = hits.entry(i).or_insert(0);
                    let cur = *n;
                    *n += 1;
                    cur
                };
                if let Some(r) = rule.response(nth) {
                    return Ok(r.to_string());
                }
            }
        }
        self.script
            .default
            .clone()
            .ok_or_else(|| BackendError::Fatal("mock: no rule matched".into()))
    }
}
