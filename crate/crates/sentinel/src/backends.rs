//! Backend ids (`replay:`, `record:`, `remote`, `mock:`), per-stage binding,
//! and the HTTP transport for the remote chat-completion backend.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use sentinel_core::gateway::{
    file_digest, Backend, BackendError, ChatCompletionBackend, Gateway, MockBackend, MockScript, ReplayStore,
    Transport,
};

use sentinel_core::pipeline::ScanConfig;

use crate::error::{AppError, AppResult};

/// Model stages that can be bound to a backend.
pub const STAGES: [&str; 4] = ["detect", "reflect", "extract", "assess"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Replay(PathBuf),
    Record { fixture: PathBuf, inner: Box<BackendSpec> },
    Remote,
    Mock(PathBuf),
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Replay(p) => write!(f, "replay:{}", p.display()),
            BackendSpec::Record { fixture, inner } => write!(f, "record:{}+{inner}", fixture.display()),
            BackendSpec::Remote => f.write_str("remote"),
            BackendSpec::Mock(p) => write!(f, "mock:{}", p.display()),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = AppError;

    fn from_str(s: &str) -> AppResult<Self> {
        let s = s.trim();
        let bad = |why: &str| AppError::Usage(format!("invalid backend id {s:?}: {why}"));
        if s == "remote" {
            return Ok(BackendSpec::Remote);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("expected replay:, record:, mock: or remote"))?;
        if rest.is_empty() {
            return Err(bad("missing path"));
        }
        match kind {
            "replay" => Ok(BackendSpec::Replay(PathBuf::from(rest))),
            "mock" => Ok(BackendSpec::Mock(PathBuf::from(rest))),
            "record" => {
                let (fixture, inner) = rest.split_once('+').ok_or_else(|| bad("expected record:<fixture>+<inner>"))?;
                let inner: BackendSpec = inner.parse()?;
                if !matches!(inner, BackendSpec::Remote | BackendSpec::Mock(_)) {
                    return Err(bad("record can only wrap remote or mock"));
                }
                if fixture.is_empty() {
                    return Err(bad("missing fixture path"));
                }
                Ok(BackendSpec::Record {
                    fixture: PathBuf::from(fixture),
                    inner: Box::new(inner),
                })
            }
            _ => Err(bad("unknown backend kind")),
        }
    }
}

impl BackendSpec {
    /// Resolves relative paths against `base`.
    pub fn rebase(self, base: &Path) -> Self {
        let fix = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
        match self {
            BackendSpec::Replay(p) => BackendSpec::Replay(fix(p)),
            BackendSpec::Mock(p) => BackendSpec::Mock(fix(p)),
            BackendSpec::Record { fixture, inner } => BackendSpec::Record {
                fixture: fix(fixture),
                inner: Box::new(inner.rebase(base)),
            },
            BackendSpec::Remote => BackendSpec::Remote,
        }
    }
}

/// Splits `stage=id` or a bare `id` (which binds every stage).
pub fn parse_binding(arg: &str) -> AppResult<(Option<String>, BackendSpec)> {
    if let Some((stage, spec)) = arg.split_once('=') {
        let stage = stage.trim();
        if !STAGES.contains(&stage) {
            return Err(AppError::Usage(format!(
                "unknown stage {stage:?} in --backend (stages: {})",
                STAGES.join(", ")
            )));
        }
        return Ok((Some(stage.to_string()), spec.parse()?));
    }
    Ok((None, arg.parse()?))
}

/// Merges configured bindings with command-line ones. Command-line bare ids
/// replace every stage, then command-line `stage=id` bindings win.
pub fn resolve_bindings(configured: &BTreeMap<String, BackendSpec>, cli: &[String]) -> AppResult<BTreeMap<String, BackendSpec>> {
    let mut out = configured.clone();
    let parsed = cli.iter().map(|a| parse_binding(a)).collect::<AppResult<Vec<_>>>()?;
    for (_, spec) in parsed.iter().filter(|(s, _)| s.is_none()) {
        for stage in STAGES {
            out.insert(stage.to_string(), spec.clone());
        }
    }
    for (stage, spec) in parsed.into_iter().filter_map(|(s, b)| s.map(|s| (s, b))) {
        out.insert(stage, spec);
    }
    Ok(out)
}

/// Backends built for a run. Stages bound to the same id share one
/// instance, so a recorded session lands in a single fixture file.
pub struct BackendSet {
    stages: BTreeMap<String, (BackendSpec, Arc<dyn Backend>)>,
    recorders: Vec<(PathBuf, Arc<ReplayStore>)>,
}

impl BackendSet {
    pub fn build(bindings: &BTreeMap<String, BackendSpec>, stages: &[&str], transport: Arc<dyn Transport>) -> AppResult<Self> {
        let mut cache: BTreeMap<String, Arc<dyn Backend>> = BTreeMap::new();
        let mut recorders = Vec::new();
        let mut out = BTreeMap::new();
        for &stage in stages {
            let spec = bindings.get(stage).ok_or_else(|| {
                AppError::Usage(format!("no backend bound for stage {stage:?} (use --backend {stage}=<id>)"))
            })?;
            let key = spec.to_string();
            let backend = match cache.get(&key) {
                Some(b) => b.clone(),
                None => {
                    let b = instantiate(spec, &transport, &mut recorders)?;
                    cache.insert(key, b.clone());
                    b
                }
            };
            out.insert(stage.to_string(), (spec.clone(), backend));
        }
        Ok(BackendSet { stages: out, recorders })
    }

    /// Registers each stage's backend under the id the engine config uses
    /// for that stage.
    pub fn register(&self, gateway: &mut Gateway, config: &ScanConfig) {
        for (stage, (_, backend)) in &self.stages {
            let id = match stage.as_str() {
                "detect" => config.detector.backend_id.clone(),
                "reflect" => config.reflector.backend_id.clone(),
                "assess" => config.domain.backend_id.clone(),
                other => other.to_string(),
            };
            gateway.register(id, backend.clone());
        }
    }

    pub fn backend(&self, stage: &str) -> Option<Arc<dyn Backend>> {
        self.stages.get(stage).map(|(_, b)| b.clone())
    }

    pub fn ids(&self) -> BTreeMap<String, String> {
        self.stages.iter().map(|(s, (spec, _))| (s.clone(), spec.to_string())).collect()
    }

    /// Writes every recording fixture.
    pub fn flush(&self) -> AppResult<()> {
        for (_, store) in &self.recorders {
            store.flush()?;
        }
        Ok(())
    }

    /// Digest of the fixture file behind each replayed or recorded stage.
    pub fn fixture_digests(&self) -> AppResult<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (stage, (spec, _)) in &self.stages {
            let path = match spec {
                BackendSpec::Replay(p) => fixture_file(p),
                BackendSpec::Record { fixture, .. } => fixture_file(fixture),
                _ => continue,
            };
            if path.exists() {
                out.insert(stage.clone(), file_digest(&path)?);
            }
        }
        Ok(out)
    }
}

/// A fixture path naming a directory means `<dir>/fixture.jsonl`.
pub fn fixture_file(path: &Path) -> PathBuf {
    if path.is_dir() || path.extension().is_none() {
        path.join(FIXTURE_FILE_NAME)
    } else {
        path.to_path_buf()
    }
}

pub const FIXTURE_FILE_NAME: &str = "fixture.jsonl";

fn instantiate(
    spec: &BackendSpec,
    transport: &Arc<dyn Transport>,
    recorders: &mut Vec<(PathBuf, Arc<ReplayStore>)>,
) -> AppResult<Arc<dyn Backend>> {
    Ok(match spec {
        BackendSpec::Replay(p) => Arc::new(ReplayStore::replay(&fixture_file(p))?),
        BackendSpec::Mock(p) => Arc::new(MockBackend::scripted(MockScript::load(p)?)),
        BackendSpec::Remote => Arc::new(ChatCompletionBackend::from_env(transport.clone()).map_err(AppError::Usage)?),
        BackendSpec::Record { fixture, inner } => {
            let inner = instantiate(inner, transport, recorders)?;
            let path = fixture_file(fixture);
            let store = Arc::new(ReplayStore::record(&path, inner));
            recorders.push((path, store.clone()));
            store
        }
    })
}

/// Blocking HTTP transport.
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &str, timeout: Duration) -> Result<String, BackendError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(format!("reading response: {e}")))?;
        match status {
            200..=299 => Ok(text),
            408 | 429 | 500..=599 => Err(BackendError::Transport(format!("HTTP {status}"))),
            _ => Err(BackendError::Fatal(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()))),
        }
    }
}
