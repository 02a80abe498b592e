//! TOML configuration for the CLI and the service. Relative paths resolve
//! against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sentinel_core::detect::RuleSet;
use sentinel_core::pipeline::{Pipeline, ScanConfig};
use sentinel_core::rulebook::RulebookStore;
use sentinel_core::table::ParseOptions;
use sentinel_core::taxonomy::Taxonomy;
use sentinel_core::Error as CoreError;

use crate::backends::{BackendSpec, STAGES};
use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    pipeline: Option<String>,
    taxonomy: Option<PathBuf>,
    pattern_rules: Option<PathBuf>,
    rulebooks: Option<PathBuf>,
    backends: BTreeMap<String, String>,
    parse: ParseSection,
    engine: ScanConfig,
    service: RawService,
}

/// CSV options with characters instead of bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParseSection {
    pub delimiter: char,
    pub quote: char,
    pub ragged_tolerance: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for ParseSection {
    fn default() -> Self {
        let d = ParseOptions::default();
        ParseSection {
            delimiter: d.delimiter as char,
            quote: d.quote as char,
            ragged_tolerance: d.ragged_tolerance,
            sample_size: d.sample_size,
            seed: d.seed,
        }
    }
}

impl ParseSection {
    pub fn options(&self) -> AppResult<ParseOptions> {
        let byte = |c: char, what: &str| {
            u8::try_from(c)
                .ok()
                .filter(u8::is_ascii)
                .ok_or_else(|| AppError::Core(CoreError::Config(format!("{what} must be an ASCII character"))))
        };
        Ok(ParseOptions {
            delimiter: byte(self.delimiter, "parse.delimiter")?,
            quote: byte(self.quote, "parse.quote")?,
            ragged_tolerance: self.ragged_tolerance,
            sample_size: self.sample_size,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawService {
    bind: Option<String>,
    data_dir: Option<PathBuf>,
    ui_dir: Option<PathBuf>,
    corpora: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
    /// Corpus name to manifest path.
    pub corpora: BTreeMap<String, PathBuf>,
}

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Clone)]
pub struct SentinelConfig {
    pub pipeline: Option<Pipeline>,
    pub taxonomy: Option<PathBuf>,
    pub pattern_rules: Option<PathBuf>,
    pub rulebooks: Option<PathBuf>,
    pub backends: BTreeMap<String, BackendSpec>,
    pub parse: ParseSection,
    pub engine: ScanConfig,
    pub service: ServiceConfig,
}

impl Default for SentinelConfig {
    fn default() -> Self {
        SentinelConfig::from_raw(RawConfig::default(), Path::new(".")).expect("default config is valid")
    }
}

impl SentinelConfig {
    pub fn from_toml(text: &str, base: &Path) -> AppResult<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| AppError::Core(CoreError::Config(format!("config: {e}"))))?;
        Self::from_raw(raw, base)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => AppError::Core(CoreError::FileNotFound(path.to_path_buf())),
            _ => AppError::Core(CoreError::Config(format!("reading {}: {e}", path.display()))),
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Loads `path` when given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> AppResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    fn from_raw(raw: RawConfig, base: &Path) -> AppResult<Self> {
        let fix = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
        let pipeline = raw.pipeline.as_deref().map(str::parse).transpose()?;
        let mut backends = BTreeMap::new();
        for (stage, spec) in raw.backends {
            if !STAGES.contains(&stage.as_str()) {
                return Err(AppError::Core(CoreError::Config(format!(
                    "unknown stage {stage:?} in [backends] (stages: {})",
                    STAGES.join(", ")
                ))));
            }
            backends.insert(stage, spec.parse::<BackendSpec>()?.rebase(base));
        }
        raw.parse.options()?;
        Ok(SentinelConfig {
            pipeline,
            taxonomy: raw.taxonomy.map(fix),
            pattern_rules: raw.pattern_rules.map(fix),
            rulebooks: raw.rulebooks.map(fix),
            backends,
            parse: raw.parse,
            engine: raw.engine,
            service: ServiceConfig {
                bind: raw.service.bind.unwrap_or_else(|| DEFAULT_BIND.to_string()),
                data_dir: fix(raw.service.data_dir.unwrap_or_else(|| PathBuf::from("sentinel-data"))),
                ui_dir: raw.service.ui_dir.map(fix),
                corpora: raw.service.corpora.into_iter().map(|(k, v)| (k, fix(v))).collect(),
            },
        })
    }

    pub fn load_taxonomy(&self) -> AppResult<Taxonomy> {
        Ok(match &self.taxonomy {
            Some(p) => Taxonomy::load(p)?,
            None => Taxonomy::load_default(),
        })
    }

    pub fn load_rules(&self, taxonomy: &Taxonomy) -> AppResult<RuleSet> {
        Ok(match &self.pattern_rules {
            Some(p) => RuleSet::load(p, taxonomy)?,
            None => RuleSet::load_default(taxonomy)?,
        })
    }

    pub fn load_store(&self) -> AppResult<RulebookStore> {
        Ok(match &self.rulebooks {
            Some(dir) => RulebookStore::load_dir(dir)?,
            None => RulebookStore::builtin(),
        })
    }
}
