//! Reviewer decisions: an append-only JSON Lines log, and the effective
//! verdict view obtained by replaying the log over a scan's raw verdicts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sentinel_core::domain::aggregate_levels;
use sentinel_core::pipeline::{read_jsonl, Pipeline, RunManifest, ScanOutput};
use sentinel_core::taxonomy::{PiiTypeId, SensitivityLevel};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewAction {
    Accept,
    Override,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub scan_id: String,
    pub table_id: String,
    pub column_index: usize,
    pub reviewer: String,
    pub action: ReviewAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub override_level: Option<SensitivityLevel>,
    #[serde(default)]
    pub note: String,
    pub timestamp: String,
}

impl ReviewDecision {
    pub fn validate(&self) -> AppResult<()> {
        if self.reviewer.trim().is_empty() {
            return Err(AppError::Invalid("reviewer must not be empty".into()));
        }
        match (self.action, self.override_level) {
            (ReviewAction::Override, None) => Err(AppError::Invalid("override requires override_level".into())),
            (ReviewAction::Accept, Some(_)) => Err(AppError::Invalid("accept must not carry override_level".into())),
            _ => Ok(()),
        }
    }
}

/// Append-only review log. Writes are serialized; each decision is one line.
pub struct ReviewLog {
    path: PathBuf,
    write_lock: Mutex<()>,
}

impl ReviewLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ReviewLog {
            path: path.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, decision: &ReviewDecision) -> AppResult<()> {
        decision.validate()?;
        let mut line = serde_json::to_string(decision).expect("decision serializes");
        line.push('\n');
        let _guard = self.write_lock.lock().expect("review log lock");
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| AppError::Invalid(format!("creating {}: {e}", dir.display())))?;
        }
        let io = |e: std::io::Error| AppError::Invalid(format!("appending to {}: {e}", self.path.display()));
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        file.write_all(line.as_bytes()).map_err(io)?;
        file.sync_data().map_err(io)?;
        Ok(())
    }

    /// Every decision in log order.
    pub fn read_all(&self) -> AppResult<Vec<ReviewDecision>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        Ok(read_jsonl(&self.path)?)
    }

    pub fn for_scan(&self, scan_id: &str) -> AppResult<Vec<ReviewDecision>> {
        Ok(self.read_all()?.into_iter().filter(|d| d.scan_id == scan_id).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Model,
    Reviewer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    Unreviewed,
    Accepted,
    Overridden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveColumn {
    pub table_id: String,
    pub column_index: usize,
    pub header: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detected_type: Option<PiiTypeId>,
    pub model_level: SensitivityLevel,
    pub level: SensitivityLevel,
    pub source: VerdictSource,
    pub review_state: ReviewState,
    /// Model rationale or justification, when the pipeline produced one.
    pub rationale: String,
    pub cited_rule_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTable {
    pub table_id: String,
    pub sensitive: bool,
    pub max_level: SensitivityLevel,
    pub model_sensitive: bool,
    pub source: VerdictSource,
    pub flagged_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveReport {
    pub scan_id: String,
    pub pipeline: Pipeline,
    pub corpus: String,
    pub reviewed_columns: usize,
    pub overridden_columns: usize,
    pub columns: Vec<EffectiveColumn>,
    pub tables: Vec<EffectiveTable>,
}

/// Model verdicts per column, before any review.
pub fn model_columns(output: &ScanOutput) -> Vec<EffectiveColumn> {
    let key = |t: &str, i: usize| (t.to_string(), i);
    let detections: BTreeMap<_, _> = output.detections.iter().map(|d| (key(&d.table_id, d.column_index), d)).collect();
    let reflections: BTreeMap<_, _> = output.reflections.iter().map(|r| (key(&r.table_id, r.column_index), r)).collect();
    let domain: BTreeMap<_, _> = output.domain_verdicts.iter().map(|d| (key(&d.table_id, d.column_index), d)).collect();
    output
        .column_levels
        .iter()
        .map(|c| {
            let k = key(&c.table_id, c.column_index);
            let det = detections.get(&k);
            let refl = reflections.get(&k);
            let dom = domain.get(&k);
            let header = refl
                .map(|r| r.header.clone())
                .or_else(|| dom.map(|d| d.header.clone()))
                .or_else(|| det.map(|d| d.header.clone()))
                .unwrap_or_default();
            let rationale = refl
                .map(|r| r.rationale.clone())
                .or_else(|| dom.map(|d| d.justification.clone()))
                .or_else(|| det.map(|d| d.raw_output.clone()))
                .unwrap_or_default();
            EffectiveColumn {
                table_id: c.table_id.clone(),
                column_index: c.column_index,
                header,
                detected_type: det.map(|d| d.detected_type.clone()),
                model_level: c.level,
                level: c.level,
                source: VerdictSource::Model,
                review_state: ReviewState::Unreviewed,
                rationale,
                cited_rule_ids: dom.map(|d| d.cited_rule_ids.clone()).unwrap_or_default(),
                reviewer: None,
                note: None,
            }
        })
        .collect()
}

/// Replays `decisions` (log order, last write wins per column) over the
/// scan's verdicts and re-aggregates tables. Decisions naming columns the
/// scan does not have are ignored.
pub fn effective_report(scan_id: &str, manifest: &RunManifest, output: &ScanOutput, decisions: &[ReviewDecision]) -> AppResult<EffectiveReport> {
    let mut columns = model_columns(output);
    let index: BTreeMap<(String, usize), usize> = columns
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.table_id.clone(), c.column_index), i))
        .collect();
    let mut latest: BTreeMap<usize, &ReviewDecision> = BTreeMap::new();
    for d in decisions.iter().filter(|d| d.scan_id == scan_id) {
        if let Some(&i) = index.get(&(d.table_id.clone(), d.column_index)) {
            latest.insert(i, d);
        }
    }
    for (i, d) in &latest {
        let c = &mut columns[*i];
        c.reviewer = Some(d.reviewer.clone());
        c.note = Some(d.note.clone()).filter(|n| !n.is_empty());
        match (d.action, d.override_level) {
            (ReviewAction::Override, Some(level)) => {
                c.level = level;
                c.source = VerdictSource::Reviewer;
                c.review_state = ReviewState::Overridden;
            }
            _ => c.review_state = ReviewState::Accepted,
        }
    }

    let mut by_table: BTreeMap<&str, Vec<&EffectiveColumn>> = BTreeMap::new();
    for c in &columns {
        by_table.entry(c.table_id.as_str()).or_default().push(c);
    }
    let mut tables = Vec::new();
    for model in &output.table_verdicts {
        let cols = by_table.get(model.table_id.as_str()).cloned().unwrap_or_default();
        let overridden = cols.iter().any(|c| c.source == VerdictSource::Reviewer);
        let verdict = if overridden {
            let levels: Vec<(usize, SensitivityLevel)> = cols.iter().map(|c| (c.column_index, c.level)).collect();
            aggregate_levels(&model.table_id, &levels)?
        } else {
            model.clone()
        };
        tables.push(EffectiveTable {
            table_id: model.table_id.clone(),
            sensitive: verdict.sensitive,
            max_level: verdict.max_level,
            model_sensitive: model.sensitive,
            source: if overridden { VerdictSource::Reviewer } else { VerdictSource::Model },
            flagged_columns: verdict.flagged_columns,
        });
    }
    Ok(EffectiveReport {
        scan_id: scan_id.to_string(),
        pipeline: manifest.pipeline,
        corpus: manifest.corpus.clone(),
        reviewed_columns: latest.len(),
        overridden_columns: columns.iter().filter(|c| c.review_state == ReviewState::Overridden).count(),
        columns,
        tables,
    })
}

impl EffectiveReport {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "scan {}  pipeline {}  corpus {}\nreviewed {}  overridden {}\n\n",
            self.scan_id, self.pipeline, self.corpus, self.reviewed_columns, self.overridden_columns
        );
        out.push_str("tables\n");
        for t in &self.tables {
            let _ = writeln!(
                out,
                "  {:<24} {:<13} {:<18} {:?}",
                t.table_id,
                if t.sensitive { "sensitive" } else { "not sensitive" },
                t.max_level.as_str(),
                t.source
            );
        }
        out.push_str("\ncolumns\n");
        for c in &self.columns {
            let _ = write!(
                out,
                "  {:<24} {:>3} {:<24} {:<18} {:?}",
                c.table_id,
                c.column_index,
                c.header,
                c.level.as_str(),
                c.source
            );
            if c.review_state == ReviewState::Overridden {
                let _ = write!(
                    out,
                    " (model: {}, by {})",
                    c.model_level.as_str(),
                    c.reviewer.as_deref().unwrap_or("")
                );
            } else if c.review_state == ReviewState::Accepted {
                let _ = write!(out, " (accepted by {})", c.reviewer.as_deref().unwrap_or(""));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sentinel_core::domain::TableVerdict;
    use sentinel_core::eval::ColumnLevel;
    use SensitivityLevel::*;

    fn scan() -> (RunManifest, ScanOutput) {
        let manifest = RunManifest {
            pipeline: Pipeline::AllSensitive,
            corpus: "c".into(),
            corpus_digest: String::new(),
            config_digest: String::new(),
            backends: BTreeMap::new(),
            fixtures: BTreeMap::new(),
            tables: 1,
            columns: 2,
            outputs: BTreeMap::new(),
        };
        let output = ScanOutput {
            column_levels: vec![
                ColumnLevel { table_id: "t".into(), column_index: 0, level: NonSensitive },
                ColumnLevel { table_id: "t".into(), column_index: 1, level: NonSensitive },
            ],
            table_verdicts: vec![TableVerdict {
                table_id: "t".into(),
                sensitive: false,
                max_level: NonSensitive,
                flagged_columns: vec![],
            }],
            ..ScanOutput::default()
        };
        (manifest, output)
    }

    fn decision(action: ReviewAction, level: Option<SensitivityLevel>, reviewer: &str) -> ReviewDecision {
        ReviewDecision {
            scan_id: "s".into(),
            table_id: "t".into(),
            column_index: 1,
            reviewer: reviewer.into(),
            action,
            override_level: level,
            note: String::new(),
            timestamp: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn override_is_reviewer_sourced_and_reaggregates() {
        let (m, o) = scan();
        let r = effective_report("s", &m, &o, &[decision(ReviewAction::Override, Some(HighSensitive), "ana")]).unwrap();
        assert_eq!(r.columns[1].level, HighSensitive);
        assert_eq!(r.columns[1].model_level, NonSensitive);
        assert_eq!(r.columns[1].source, VerdictSource::Reviewer);
        assert_eq!(r.columns[0].source, VerdictSource::Model);
        assert!(r.tables[0].sensitive && !r.tables[0].model_sensitive);
        assert_eq!(r.tables[0].source, VerdictSource::Reviewer);
        assert_eq!(r.tables[0].flagged_columns, vec![1]);
    }

    #[test]
    fn last_write_wins() {
        let (m, o) = scan();
        let log = [
            decision(ReviewAction::Override, Some(HighSensitive), "ana"),
            decision(ReviewAction::Accept, None, "ben"),
        ];
        let r = effective_report("s", &m, &o, &log).unwrap();
        assert_eq!(r.columns[1].level, NonSensitive);
        assert_eq!(r.columns[1].review_state, ReviewState::Accepted);
        assert_eq!(r.columns[1].reviewer.as_deref(), Some("ben"));
        assert!(!r.tables[0].sensitive);
    }

    #[test]
    fn log_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let log = ReviewLog::new(dir.path().join("reviews.jsonl"));
        assert!(log.read_all().unwrap().is_empty());
        let d = decision(ReviewAction::Override, Some(SevereSensitive), "ana");
        log.append(&d).unwrap();
        log.append(&decision(ReviewAction::Accept, None, "ben")).unwrap();
        let all = log.read_all().unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0], d);
        assert!(log.append(&decision(ReviewAction::Override, None, "x")).is_err());
        assert!(log.append(&decision(ReviewAction::Accept, Some(HighSensitive), "x")).is_err());
        assert_eq!(log.read_all().unwrap().len(), 2);
    }
}
