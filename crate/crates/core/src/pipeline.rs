//! End-to-end scans over a corpus, verdict artifacts and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::{candidates, DetectionMethod, DetectionVerdict, DetectorConfig, RuleSet, TypeDetector};
use crate::domain::{
    aggregate_levels, all_sensitive_baseline, assess_columns, assess_columns_unaided, DomainConfig, DomainVerdict,
    TableVerdict,
};
use crate::error::{Error, Result};
use crate::eval::{
    compare_modes, score_column_sensitivity, score_table_sensitivity, score_types, ColumnLevel, Comparison,
    EvaluationReport, GoldSet, ScoreOptions,
};
use crate::gateway::{Gateway, GatewayConfig};
use crate::par::map_ordered;
use crate::reflect::{reflect, reflect_only, ReflectionVerdict, ReflectorConfig};
use crate::rulebook::RulebookStore;
use crate::table::Table;
use crate::taxonomy::{SensitivityLevel, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    DetectThenReflect,
    ReflectOnly,
    RetrieveThenDetect,
    UnaidedDomain,
    PatternOnly,
    AllSensitive,
}

impl Pipeline {
    pub const ALL: [Pipeline; 6] = [
        Pipeline::DetectThenReflect,
        Pipeline::ReflectOnly,
        Pipeline::RetrieveThenDetect,
        Pipeline::UnaidedDomain,
        Pipeline::PatternOnly,
        Pipeline::AllSensitive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::DetectThenReflect => "detect_then_reflect",
            Pipeline::ReflectOnly => "reflect_only",
            Pipeline::RetrieveThenDetect => "retrieve_then_detect",
            Pipeline::UnaidedDomain => "unaided_domain",
            Pipeline::PatternOnly => "pattern_only",
            Pipeline::AllSensitive => "all_sensitive",
        }
    }

    /// Report tag for the pipeline's final verdicts.
    pub fn mode_tag(self) -> &'static str {
        match self {
            Pipeline::DetectThenReflect => "with-reflection",
            Pipeline::ReflectOnly => "reflection-only",
            Pipeline::RetrieveThenDetect => "with-domain-knowledge",
            Pipeline::UnaidedDomain => "no-domain-knowledge",
            Pipeline::PatternOnly => "pattern-only",
            Pipeline::AllSensitive => "all-sensitive-baseline",
        }
    }

    /// Model stages the pipeline calls.
    pub fn stages(self, detector: &DetectorConfig) -> Vec<&'static str> {
        match self {
            Pipeline::DetectThenReflect if detector.method == DetectionMethod::Model => vec!["detect", "reflect"],
            Pipeline::DetectThenReflect | Pipeline::ReflectOnly => vec!["reflect"],
            Pipeline::RetrieveThenDetect | Pipeline::UnaidedDomain => vec!["assess"],
            Pipeline::PatternOnly | Pipeline::AllSensitive => vec![],
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Pipeline::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown pipeline {s:?}")))
    }
}

/// Engine settings shared by every pipeline; serialized into the run
/// manifest digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub detector: DetectorConfig,
    pub reflector: ReflectorConfig,
    pub domain: DomainConfig,
    pub gateway: GatewayConfig,
    /// Tables processed concurrently.
    pub table_workers: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            detector: DetectorConfig::default(),
            reflector: ReflectorConfig::default(),
            domain: DomainConfig::default(),
            gateway: GatewayConfig::default(),
            table_workers: 1,
        }
    }
}

pub struct ScanResources<'a> {
    pub taxonomy: &'a Taxonomy,
    pub rules: &'a RuleSet,
    pub store: &'a RulebookStore,
    pub gateway: &'a Gateway,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanOutput {
    pub detections: Vec<DetectionVerdict>,
    pub reflections: Vec<ReflectionVerdict>,
    pub domain_verdicts: Vec<DomainVerdict>,
    pub column_levels: Vec<ColumnLevel>,
    pub table_verdicts: Vec<TableVerdict>,
}

#[derive(Default)]
struct TableResult {
    detections: Vec<DetectionVerdict>,
    reflections: Vec<ReflectionVerdict>,
    domain: Vec<DomainVerdict>,
    levels: Vec<(usize, SensitivityLevel)>,
}

fn column_levels(table: &Table, overrides: impl IntoIterator<Item = (usize, SensitivityLevel)>) -> Vec<(usize, SensitivityLevel)> {
    let mut levels: Vec<(usize, SensitivityLevel)> =
        (0..table.column_count()).map(|i| (i, SensitivityLevel::NonSensitive)).collect();
    for (i, l) in overrides {
        if let Some(slot) = levels.get_mut(i) {
            slot.1 = l;
        }
    }
    levels
}

fn scan_table(table: &Table, pipeline: Pipeline, config: &ScanConfig, res: &ScanResources<'_>) -> Result<TableResult> {
    let detector = |method: DetectionMethod| TypeDetector {
        taxonomy: res.taxonomy,
        rules: res.rules,
        gateway: Some(res.gateway),
        config: DetectorConfig {
            method,
            ..config.detector.clone()
        },
    };
    let mut out = TableResult::default();
    match pipeline {
        Pipeline::PatternOnly => {
            out.detections = detector(DetectionMethod::Pattern).detect_table(table)?;
            out.levels = column_levels(
                table,
                candidates(&out.detections)
                    .into_iter()
                    .map(|d| (d.column_index, SensitivityLevel::ModerateSensitive)),
            );
        }
        Pipeline::DetectThenReflect => {
            out.detections = detector(config.detector.method).detect_table(table)?;
            let cands: Vec<DetectionVerdict> = candidates(&out.detections).into_iter().cloned().collect();
            out.reflections = reflect(table, &cands, res.gateway, &config.reflector)?;
            out.levels = column_levels(table, out.reflections.iter().map(|r| (r.column_index, r.level)));
        }
        Pipeline::ReflectOnly => {
            out.reflections = reflect_only(table, res.gateway, &config.reflector)?;
            out.levels = column_levels(table, out.reflections.iter().map(|r| (r.column_index, r.level)));
        }
        Pipeline::RetrieveThenDetect => {
            let rulebook = res.store.retrieve(table.country.as_deref());
            out.domain = assess_columns(table, rulebook, res.gateway, &config.domain)?;
            out.levels = out.domain.iter().map(|d| (d.column_index, d.level)).collect();
        }
        Pipeline::UnaidedDomain => {
            out.domain = assess_columns_unaided(table, res.gateway, &config.domain)?;
            out.levels = out.domain.iter().map(|d| (d.column_index, d.level)).collect();
        }
        Pipeline::AllSensitive => {
            out.levels = column_levels(table, (0..table.column_count()).map(|i| (i, SensitivityLevel::ModerateSensitive)));
        }
    }
    Ok(out)
}

/// Runs `pipeline` over every table. Outputs follow corpus order and, within
/// a table, column order.
pub fn run_scan(tables: &[Table], pipeline: Pipeline, config: &ScanConfig, res: &ScanResources<'_>) -> Result<ScanOutput> {
    let results = map_ordered(tables, config.table_workers, |t| {
        scan_table(t, pipeline, config, res).map_err(|e| {
            log::error!("{}: {e}", t.id);
            e
        })
    });
    let mut out = ScanOutput::default();
    for (table, result) in tables.iter().zip(results) {
        let r = result?;
        out.detections.extend(r.detections);
        out.reflections.extend(r.reflections);
        out.domain_verdicts.extend(r.domain);
        out.column_levels.extend(r.levels.iter().map(|(i, l)| ColumnLevel {
            table_id: table.id.clone(),
            column_index: *i,
            level: *l,
        }));
        if pipeline != Pipeline::AllSensitive {
            out.table_verdicts.push(aggregate_levels(&table.id, &r.levels)?);
        }
    }
    if pipeline == Pipeline::AllSensitive {
        out.table_verdicts = all_sensitive_baseline(tables);
    }
    Ok(out)
}

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REFLECTIONS_FILE: &str = "reflections.jsonl";
pub const DOMAIN_FILE: &str = "domain_verdicts.jsonl";
pub const COLUMN_LEVELS_FILE: &str = "column_levels.jsonl";
pub const TABLE_VERDICTS_FILE: &str = "table_verdicts.jsonl";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("verdict serializes");
        buf.push(b'\n');
    }
    buf
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = crate::taxonomy::read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::ParseError {
                line: i as u64 + 1,
                reason: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a value's JSON serialization.
pub fn digest_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serializes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: Pipeline,
    pub corpus: String,
    pub corpus_digest: String,
    pub config_digest: String,
    /// Backend id per model stage.
    pub backends: BTreeMap<String, String>,
    /// Fixture file digest per stage, for replayed stages.
    pub fixtures: BTreeMap<String, String>,
    pub tables: usize,
    pub columns: usize,
    /// Output file name to digest.
    pub outputs: BTreeMap<String, String>,
}

/// Inputs describing a run, besides its outputs.
#[derive(Debug, Clone, Default)]
pub struct RunInfo {
    pub corpus: String,
    pub corpus_digest: String,
    pub config_digest: String,
    pub backends: BTreeMap<String, String>,
    pub fixtures: BTreeMap<String, String>,
}

impl ScanOutput {
    /// Writes the pipeline's verdict files and the run manifest into `dir`.
    /// Every file is a pure function of its inputs, so replayed runs are
    /// byte-identical.
    pub fn write(&self, dir: &Path, pipeline: Pipeline, tables: &[Table], info: &RunInfo) -> Result<RunManifest> {
        let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
        match pipeline {
            Pipeline::PatternOnly => files.push((DETECTIONS_FILE, to_jsonl(&self.detections))),
            Pipeline::DetectThenReflect => {
                files.push((DETECTIONS_FILE, to_jsonl(&self.detections)));
                files.push((REFLECTIONS_FILE, to_jsonl(&self.reflections)));
            }
            Pipeline::ReflectOnly => files.push((REFLECTIONS_FILE, to_jsonl(&self.reflections))),
            Pipeline::RetrieveThenDetect | Pipeline::UnaidedDomain => {
                files.push((DOMAIN_FILE, to_jsonl(&self.domain_verdicts)))
            }
            Pipeline::AllSensitive => {}
        }
        files.push((COLUMN_LEVELS_FILE, to_jsonl(&self.column_levels)));
        files.push((TABLE_VERDICTS_FILE, to_jsonl(&self.table_verdicts)));

        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut outputs = BTreeMap::new();
        for (name, bytes) in &files {
            crate::gateway::write_atomic(&dir.join(name), bytes)?;
            outputs.insert(name.to_string(), sha256_hex(bytes));
        }
        let manifest = RunManifest {
            pipeline,
            corpus: info.corpus.clone(),
            corpus_digest: info.corpus_digest.clone(),
            config_digest: info.config_digest.clone(),
            backends: info.backends.clone(),
            fixtures: info.fixtures.clone(),
            tables: tables.len(),
            columns: tables.iter().map(Table::column_count).sum(),
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        crate::gateway::write_atomic(&dir.join(RUN_MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }

    /// Reads whatever verdict files exist in a scan directory.
    pub fn load(dir: &Path) -> Result<(RunManifest, ScanOutput)> {
        let manifest_path = dir.join(RUN_MANIFEST_FILE);
        let manifest: RunManifest = serde_json::from_str(&crate::taxonomy::read_text(&manifest_path)?)
            .map_err(|e| Error::json(format!("run manifest {}", manifest_path.display()), e))?;
        fn opt<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<Vec<T>> {
            let p = dir.join(name);
            if p.exists() {
                read_jsonl(&p)
            } else {
                Ok(Vec::new())
            }
        }
        let out = ScanOutput {
            detections: opt(dir, DETECTIONS_FILE)?,
            reflections: opt(dir, REFLECTIONS_FILE)?,
            domain_verdicts: opt(dir, DOMAIN_FILE)?,
            column_levels: opt(dir, COLUMN_LEVELS_FILE)?,
            table_verdicts: opt(dir, TABLE_VERDICTS_FILE)?,
        };
        Ok((manifest, out))
    }
}

/// Digest over the table contents in corpus order.
pub fn corpus_digest(tables: &[Table]) -> String {
    digest_json(&tables)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEvaluation {
    pub reports: Vec<EvaluationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

/// Every report a scan supports against the given gold: type scores when
/// detections exist, column-level sensitivity (plus the pre-reflection
/// candidate set for detect-then-reflect), and table-level sensitivity.
pub fn evaluate_scan(
    pipeline: Pipeline,
    corpus: &str,
    output: &ScanOutput,
    gold: &GoldSet,
    taxonomy: &Taxonomy,
    options: ScoreOptions,
) -> Result<ScanEvaluation> {
    let mut reports = Vec::new();
    let mut comparison = None;
    let tag = pipeline.mode_tag();
    if !gold.columns.is_empty() {
        if !output.detections.is_empty() {
            reports.push(score_types(&output.detections, &gold.columns, taxonomy, options)?.with_context(corpus, "type-detection"));
        }
        if pipeline == Pipeline::DetectThenReflect {
            let before: Vec<ColumnLevel> = output
                .detections
                .iter()
                .map(|d| ColumnLevel {
                    table_id: d.table_id.clone(),
                    column_index: d.column_index,
                    level: if d.is_candidate() {
                        SensitivityLevel::ModerateSensitive
                    } else {
                        SensitivityLevel::NonSensitive
                    },
                })
                .collect();
            let without = score_column_sensitivity(&before, &gold.columns)?.with_context(corpus, "without-reflection");
            let with = score_column_sensitivity(&output.column_levels, &gold.columns)?.with_context(corpus, tag);
            comparison = Some(compare_modes(&[without.clone(), with.clone()])?);
            reports.push(without);
            reports.push(with);
        } else {
            reports.push(score_column_sensitivity(&output.column_levels, &gold.columns)?.with_context(corpus, tag));
        }
    }
    let table_gold = gold.table_gold();
    if !table_gold.is_empty() {
        reports.push(score_table_sensitivity(&output.table_verdicts, &table_gold)?.with_context(corpus, tag));
    }
    Ok(ScanEvaluation { reports, comparison })
}
