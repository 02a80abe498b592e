//! Scan and evaluate commands, shared by the CLI and the service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use sentinel_core::corpus::Manifest;
use sentinel_core::eval::{compare_modes, render_report_text, Comparison, EvaluationReport, GoldSet, ScoreOptions};
use sentinel_core::gateway::{Gateway, Transport};
use sentinel_core::pipeline::{
    corpus_digest, digest_json, evaluate_scan, run_scan, Pipeline, RunInfo, RunManifest, ScanOutput, ScanResources,
};
use sentinel_core::table::Table;

use crate::backends::{resolve_bindings, BackendSet};
use crate::config::SentinelConfig;
use crate::error::{AppError, AppResult};

pub struct ScanRequest<'a> {
    pub manifest: &'a Path,
    pub pipeline: Pipeline,
    /// `--backend` arguments, applied over the configured bindings.
    pub backends: &'a [String],
    pub out: &'a Path,
    pub config: &'a SentinelConfig,
}

/// Runs a pipeline over a corpus and writes its verdict files and run
/// manifest into `out`. Recording backends are flushed even when the scan
/// fails, so partial sessions are kept.
pub fn execute_scan(req: &ScanRequest<'_>, transport: Arc<dyn Transport>) -> AppResult<RunManifest> {
    let config = req.config;
    let manifest = Manifest::load(req.manifest)?;
    let parse = config.parse.options()?;
    let tables = manifest.load_tables(&parse)?;
    let taxonomy = config.load_taxonomy()?;
    let rules = config.load_rules(&taxonomy)?;
    let store = config.load_store()?;

    let bindings = resolve_bindings(&config.backends, req.backends)?;
    let stages = req.pipeline.stages(&config.engine.detector);
    let set = BackendSet::build(&bindings, &stages, transport)?;
    let mut gateway = Gateway::new(config.engine.gateway.clone());
    set.register(&mut gateway, &config.engine);

    log::info!(
        "scanning {} tables with {} ({} model stage(s))",
        tables.len(),
        req.pipeline,
        stages.len()
    );
    let resources = ScanResources {
        taxonomy: &taxonomy,
        rules: &rules,
        store: &store,
        gateway: &gateway,
    };
    let result = run_scan(&tables, req.pipeline, &config.engine, &resources);
    set.flush()?;
    let output = result?;

    let info = RunInfo {
        corpus: req.manifest.display().to_string(),
        corpus_digest: corpus_digest(&tables),
        config_digest: config_digest(req.pipeline, config, &set)?,
        backends: set.ids(),
        fixtures: set.fixture_digests()?,
    };
    Ok(output.write(req.out, req.pipeline, &tables, &info)?)
}

#[derive(Serialize)]
struct DigestInput<'a> {
    pipeline: Pipeline,
    engine: &'a sentinel_core::pipeline::ScanConfig,
    parse: &'a crate::config::ParseSection,
    backends: BTreeMap<String, String>,
    taxonomy: String,
    pattern_rules: serde_json::Value,
    rulebooks: Vec<String>,
}

/// Digest over everything besides the corpus that determines a scan's
/// output: pipeline, engine settings, parse options, backend ids, and the
/// taxonomy, pattern rules and rulebooks in effect.
fn config_digest(pipeline: Pipeline, config: &SentinelConfig, set: &BackendSet) -> AppResult<String> {
    let taxonomy = config.load_taxonomy()?;
    let rules = config.load_rules(&taxonomy)?;
    let store = config.load_store()?;
    let rulebooks = store
        .countries()
        .filter_map(|c| store.get(c))
        .map(|b| b.to_json())
        .collect();
    Ok(digest_json(&DigestInput {
        pipeline,
        engine: &config.engine,
        parse: &config.parse,
        backends: set.ids(),
        taxonomy: taxonomy.to_json(),
        pattern_rules: serde_json::to_value(rules.rules().collect::<Vec<_>>()).expect("rules serialize"),
        rulebooks,
    }))
}

/// Loads every table of a corpus with the configured parse options.
pub fn load_corpus(manifest: &Path, config: &SentinelConfig) -> AppResult<(Manifest, Vec<Table>)> {
    let m = Manifest::load(manifest)?;
    let tables = m.load_tables(&config.parse.options()?)?;
    Ok((m, tables))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationOutput {
    pub scan: PathBuf,
    pub reports: Vec<EvaluationReport>,
    pub comparisons: Vec<Comparison>,
}

impl EvaluationOutput {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&render_report_text(r));
            out.push('\n');
        }
        for c in &self.comparisons {
            out.push_str(&format!("comparison ({:?} level, {})\n", c.level, c.corpus));
            out.push_str(&c.render_text());
            out.push('\n');
        }
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> AppResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| AppError::Invalid(format!("creating {}: {e}", dir.display())))?;
        let mut json = serde_json::to_string_pretty(self).expect("report serializes");
        json.push('\n');
        for (name, body) in [("report.json", json), ("report.txt", self.render_text())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| AppError::Invalid(format!("writing {}: {e}", path.display())))?;
        }
        Ok(())
    }
}

pub struct EvaluateRequest<'a> {
    pub scan: &'a Path,
    /// Gold file; defaults to the gold files named by the scan's corpus
    /// manifest.
    pub gold: Option<&'a Path>,
    /// A second scan directory to compare against.
    pub compare: Option<&'a Path>,
    pub include_none: bool,
    pub config: &'a SentinelConfig,
}

fn load_gold(manifest: &RunManifest, gold: Option<&Path>) -> AppResult<GoldSet> {
    if let Some(path) = gold {
        return Ok(GoldSet::load(path)?);
    }
    let corpus = Path::new(&manifest.corpus);
    if !corpus.exists() {
        return Err(AppError::Usage(format!(
            "no --gold given and the scan's corpus manifest {} is not readable",
            corpus.display()
        )));
    }
    let set = GoldSet::from_manifest(&Manifest::load(corpus)?)?;
    if set.columns.is_empty() && set.tables.is_empty() {
        return Err(AppError::Usage(format!(
            "corpus manifest {} names no gold files; pass --gold",
            corpus.display()
        )));
    }
    Ok(set)
}

fn evaluate_dir(dir: &Path, gold: &GoldSet, req: &EvaluateRequest<'_>) -> AppResult<Vec<EvaluationReport>> {
    let (manifest, output) = ScanOutput::load(dir)?;
    let taxonomy = req.config.load_taxonomy()?;
    let options = ScoreOptions {
        include_none: req.include_none,
    };
    let eval = evaluate_scan(manifest.pipeline, &manifest.corpus, &output, gold, &taxonomy, options)?;
    Ok(eval.reports)
}

/// Scores a scan directory against gold. With `compare`, the second scan is
/// scored against the same gold and each report kind present in both gets a
/// comparison table with the first scan as the baseline.
pub fn evaluate(req: &EvaluateRequest<'_>) -> AppResult<EvaluationOutput> {
    let (manifest, output) = ScanOutput::load(req.scan)?;
    let gold = load_gold(&manifest, req.gold)?;
    let taxonomy = req.config.load_taxonomy()?;
    let options = ScoreOptions {
        include_none: req.include_none,
    };
    let eval = evaluate_scan(manifest.pipeline, &manifest.corpus, &output, &gold, &taxonomy, options)?;
    let mut comparisons: Vec<Comparison> = eval.comparison.into_iter().collect();
    let mut reports = eval.reports;
    if let Some(other) = req.compare {
        let theirs = evaluate_dir(other, &gold, req)?;
        comparisons.clear();
        for (a, b) in pair_reports(&reports, &theirs) {
            let mut b = b.clone();
            b.corpus = a.corpus.clone();
            if b.mode == a.mode {
                b.mode = format!("{} (compared)", b.mode);
            }
            comparisons.push(compare_modes(&[a.clone(), b])?);
        }
        if comparisons.is_empty() {
            return Err(AppError::Core(sentinel_core::Error::IncompatibleReports(
                "the two scans share no report kind".into(),
            )));
        }
        reports.extend(theirs);
    }
    Ok(EvaluationOutput {
        scan: req.scan.to_path_buf(),
        reports,
        comparisons,
    })
}

/// Pairs the last report of each (level, task) kind across two scans; the
/// last one holds a pipeline's final verdicts.
fn pair_reports<'a>(ours: &'a [EvaluationReport], theirs: &'a [EvaluationReport]) -> Vec<(&'a EvaluationReport, &'a EvaluationReport)> {
    let last = |rs: &'a [EvaluationReport]| {
        let mut m: Vec<&'a EvaluationReport> = Vec::new();
        for r in rs {
            m.retain(|x| (x.level, x.task) != (r.level, r.task));
            m.push(r);
        }
        m
    };
    let theirs = last(theirs);
    last(ours)
        .into_iter()
        .filter_map(|a| theirs.iter().find(|b| (b.level, b.task) == (a.level, a.task)).map(|b| (a, *b)))
        .collect()
}
