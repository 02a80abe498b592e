//! Scoring: multiclass type detection, binary sensitivity at column and
//! table level, weighted and macro aggregation, and mode comparison.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Manifest;
use crate::detect::DetectionVerdict;
use crate::domain::TableVerdict;
use crate::error::{Error, Result};
use crate::taxonomy::{PiiTypeId, SensitivityLevel, Taxonomy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub table_id: String,
    pub column_index: usize,
    pub gold_type: PiiTypeId,
    pub gold_level: SensitivityLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableGold {
    pub table_id: String,
    pub sensitive: bool,
}

/// Column and table gold read from one or more label files.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldSet {
    pub columns: Vec<GoldLabel>,
    pub tables: Vec<TableGold>,
}

impl GoldSet {
    /// Reads newline-delimited records. A record with `column_index` is a
    /// column label; one with only `table_id` and `sensitive` is table gold.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::taxonomy::read_text(path)?;
        let mut set = GoldSet::default();
        set.extend_from_str(&text, &path.display().to_string())?;
        Ok(set)
    }

    /// Gold from every distinct `gold_labels_path` in a corpus manifest.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let mut set = GoldSet::default();
        let mut seen = Vec::new();
        for path in manifest.entries.iter().filter_map(|e| e.gold_labels_path.as_ref()) {
            if seen.contains(&path) {
                continue;
            }
            seen.push(path);
            let text = crate::taxonomy::read_text(path)?;
            set.extend_from_str(&text, &path.display().to_string())?;
        }
        Ok(set)
    }

    pub fn extend_from_str(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| Error::ParseError {
                line: i as u64 + 1,
                reason: format!("{source}: {reason}"),
            };
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if value.get("column_index").is_some() {
                self.columns.push(serde_json::from_value(value).map_err(|e| err(e.to_string()))?);
            } else {
                self.tables.push(serde_json::from_value(value).map_err(|e| err(e.to_string()))?);
            }
        }
        Ok(())
    }

    /// Table gold, derived from column levels for tables without an
    /// explicit record.
    pub fn table_gold(&self) -> Vec<TableGold> {
        let mut out: BTreeMap<String, bool> = BTreeMap::new();
        for c in &self.columns {
            *out.entry(c.table_id.clone()).or_default() |= c.gold_level.is_sensitive();
        }
        for t in &self.tables {
            out.insert(t.table_id.clone(), t.sensitive);
        }
        out.into_iter()
            .map(|(table_id, sensitive)| TableGold { table_id, sensitive })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold examples of the class.
    pub support: usize,
    /// Examples predicted as the class.
    pub predicted: usize,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Metrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportLevel {
    Column,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportTask {
    Types,
    Sensitivity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub corpus: String,
    pub mode: String,
    pub level: ReportLevel,
    pub task: ReportTask,
    pub examples: usize,
    pub include_none: bool,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub weighted: Metrics,
    #[serde(rename = "macro")]
    pub macro_avg: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_sensitive: Option<Metrics>,
}

impl EvaluationReport {
    /// The figure a comparison uses: positive-class metrics for binary
    /// reports, weighted averages otherwise.
    pub fn headline(&self) -> Metrics {
        self.binary_sensitive.unwrap_or(self.weighted)
    }

    pub fn with_context(mut self, corpus: &str, mode: &str) -> Self {
        self.corpus = corpus.to_string();
        self.mode = mode.to_string();
        self
    }
}

/// Per-class, weighted and macro metrics from aligned (predicted, gold)
/// pairs over the given class list. Classes in `excluded` are reported per
/// class but left out of both averages.
pub fn score_pairs(pairs: &[(&str, &str)], classes: &[String], excluded: &[&str]) -> (BTreeMap<String, ClassMetrics>, Metrics, Metrics) {
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let n = classes.len();
    let mut tp = vec![0usize; n];
    let mut pred = vec![0usize; n];
    let mut gold = vec![0usize; n];
    for (p, g) in pairs {
        let (pi, gi) = (index[p], index[g]);
        pred[pi] += 1;
        gold[gi] += 1;
        if pi == gi {
            tp[pi] += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let (mut w_sum, mut w_p, mut w_r, mut w_f) = (0usize, 0.0, 0.0, 0.0);
    let (mut m_n, mut m_p, mut m_r, mut m_f) = (0usize, 0.0, 0.0, 0.0);
    for (i, class) in classes.iter().enumerate() {
        let m = metrics_from_counts(tp[i], pred[i] - tp[i], gold[i] - tp[i]);
        per_class.insert(
            class.clone(),
            ClassMetrics {
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                support: gold[i],
                predicted: pred[i],
            },
        );
        if excluded.contains(&class.as_str()) {
            continue;
        }
        w_sum += gold[i];
        w_p += m.precision * gold[i] as f64;
        w_r += m.recall * gold[i] as f64;
        w_f += m.f1 * gold[i] as f64;
        if pred[i] + gold[i] > 0 {
            m_n += 1;
            m_p += m.precision;
            m_r += m.recall;
            m_f += m.f1;
        }
    }
    let avg = |s: f64, d: usize| if d == 0 { 0.0 } else { s / d as f64 };
    let weighted = Metrics {
        precision: avg(w_p, w_sum),
        recall: avg(w_r, w_sum),
        f1: avg(w_f, w_sum),
    };
    let macro_avg = Metrics {
        precision: avg(m_p, m_n),
        recall: avg(m_r, m_n),
        f1: avg(m_f, m_n),
    };
    (per_class, weighted, macro_avg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Count the `none` class in weighted and macro averages.
    pub include_none: bool,
}

/// Multiclass type scoring over the taxonomy plus `none`.
pub fn score_types(
    predictions: &[DetectionVerdict],
    gold: &[GoldLabel],
    taxonomy: &Taxonomy,
    options: ScoreOptions,
) -> Result<EvaluationReport> {
    let by_key: HashMap<(&str, usize), &DetectionVerdict> = predictions
        .iter()
        .map(|p| ((p.table_id.as_str(), p.column_index), p))
        .collect();
    let check = |id: &PiiTypeId| -> Result<()> {
        if id.is_none() || taxonomy.contains(id) {
            Ok(())
        } else {
            Err(Error::UnknownClass(id.to_string()))
        }
    };
    let mut pairs = Vec::with_capacity(gold.len());
    for g in gold {
        let p = by_key
            .get(&(g.table_id.as_str(), g.column_index))
            .ok_or_else(|| Error::MissingPrediction {
                table_id: g.table_id.clone(),
                column_index: g.column_index,
            })?;
        check(&g.gold_type)?;
        check(&p.detected_type)?;
        pairs.push((p.detected_type.as_str(), g.gold_type.as_str()));
    }
    let classes: Vec<String> = taxonomy.class_ids().into_iter().map(|c| c.as_str().to_string()).collect();
    let excluded: &[&str] = if options.include_none { &[] } else { &[PiiTypeId::NONE] };
    let (per_class, weighted, macro_avg) = score_pairs(&pairs, &classes, excluded);
    Ok(EvaluationReport {
        corpus: String::new(),
        mode: String::new(),
        level: ReportLevel::Column,
        task: ReportTask::Types,
        examples: pairs.len(),
        include_none: options.include_none,
        per_class,
        weighted,
        macro_avg,
        binary_sensitive: None,
    })
}

/// Positive-class metrics for aligned sensitivity labels, positive meaning
/// binarized sensitive.
pub fn score_binary(predicted: &[SensitivityLevel], gold: &[SensitivityLevel]) -> Result<Metrics> {
    let p: Vec<bool> = predicted.iter().map(|l| l.is_sensitive()).collect();
    let g: Vec<bool> = gold.iter().map(|l| l.is_sensitive()).collect();
    score_binary_flags(&p, &g)
}

pub fn score_binary_flags(predicted: &[bool], gold: &[bool]) -> Result<Metrics> {
    Ok(binary_report(predicted, gold, ReportLevel::Column)?.headline())
}

const SENSITIVE: &str = "sensitive";
const NOT_SENSITIVE: &str = "non_sensitive";

fn binary_report(predicted: &[bool], gold: &[bool], level: ReportLevel) -> Result<EvaluationReport> {
    if predicted.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: gold.len(),
        });
    }
    let name = |b: bool| if b { SENSITIVE } else { NOT_SENSITIVE };
    let pairs: Vec<(&str, &str)> = predicted.iter().zip(gold).map(|(p, g)| (name(*p), name(*g))).collect();
    let classes = vec![NOT_SENSITIVE.to_string(), SENSITIVE.to_string()];
    let (per_class, weighted, macro_avg) = score_pairs(&pairs, &classes, &[]);
    let pos = per_class[SENSITIVE];
    Ok(EvaluationReport {
        corpus: String::new(),
        mode: String::new(),
        level,
        task: ReportTask::Sensitivity,
        examples: pairs.len(),
        include_none: true,
        per_class,
        weighted,
        macro_avg,
        binary_sensitive: Some(Metrics {
            precision: pos.precision,
            recall: pos.recall,
            f1: pos.f1,
        }),
    })
}

/// One column's predicted level, whatever stage produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLevel {
    pub table_id: String,
    pub column_index: usize,
    pub level: SensitivityLevel,
}

/// Column-level binary sensitivity report against gold levels.
pub fn score_column_sensitivity(predicted: &[ColumnLevel], gold: &[GoldLabel]) -> Result<EvaluationReport> {
    let by_key: HashMap<(&str, usize), SensitivityLevel> = predicted
        .iter()
        .map(|p| ((p.table_id.as_str(), p.column_index), p.level))
        .collect();
    let mut p = Vec::with_capacity(gold.len());
    let mut g = Vec::with_capacity(gold.len());
    for label in gold {
        let level = by_key
            .get(&(label.table_id.as_str(), label.column_index))
            .ok_or_else(|| Error::MissingPrediction {
                table_id: label.table_id.clone(),
                column_index: label.column_index,
            })?;
        p.push(level.is_sensitive());
        g.push(label.gold_level.is_sensitive());
    }
    binary_report(&p, &g, ReportLevel::Column)
}

/// Table-level binary sensitivity report.
pub fn score_table_sensitivity(predicted: &[TableVerdict], gold: &[TableGold]) -> Result<EvaluationReport> {
    let by_id: HashMap<&str, bool> = predicted.iter().map(|t| (t.table_id.as_str(), t.sensitive)).collect();
    let mut p = Vec::with_capacity(gold.len());
    let mut g = Vec::with_capacity(gold.len());
    for label in gold {
        let s = by_id.get(label.table_id.as_str()).ok_or_else(|| Error::MissingPrediction {
            table_id: label.table_id.clone(),
            column_index: 0,
        })?;
        p.push(*s);
        g.push(label.sensitive);
    }
    binary_report(&p, &g, ReportLevel::Table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub metrics: Metrics,
    /// Difference from the first report.
    pub delta: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub corpus: String,
    pub level: ReportLevel,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side headline metrics with deltas against the first report.
pub fn compare_modes(reports: &[EvaluationReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::IncompatibleReports("no reports to compare".into()))?;
    for r in &reports[1..] {
        if r.corpus != first.corpus {
            return Err(Error::IncompatibleReports(format!("corpus {} vs {}", first.corpus, r.corpus)));
        }
        if r.level != first.level || r.task != first.task {
            return Err(Error::IncompatibleReports(format!(
                "{:?}/{:?} vs {:?}/{:?}",
                first.level, first.task, r.level, r.task
            )));
        }
    }
    let base = first.headline();
    let rows = reports
        .iter()
        .map(|r| {
            let m = r.headline();
            ComparisonRow {
                mode: r.mode.clone(),
                metrics: m,
                delta: Metrics {
                    precision: m.precision - base.precision,
                    recall: m.recall - base.recall,
                    f1: m.f1 - base.f1,
                },
            }
        })
        .collect();
    Ok(Comparison {
        corpus: first.corpus.clone(),
        level: first.level,
        rows,
    })
}

fn signed(x: f64) -> String {
    // Avoid printing "-0.000".
    let x = if x.abs() < 5e-4 { 0.0 } else { x };
    format!("{x:+.3}")
}

impl Comparison {
    pub fn render_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.mode.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}  {:>7}  {:>7}\n",
            "mode", "precision", "recall", "f1", "dP", "dR", "dF1"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>7}  {:>7}  {:>7}",
                r.mode,
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1,
                signed(r.delta.precision),
                signed(r.delta.recall),
                signed(r.delta.f1)
            );
        }
        out
    }
}

/// Aligned plain-text rendering of a report. Per-class rows are limited to
/// classes that occur in gold or predictions.
pub fn render_report_text(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "corpus: {}  mode: {}  level: {:?}  task: {:?}  examples: {}",
        report.corpus, report.mode, report.level, report.task, report.examples
    );
    let width = report.per_class.keys().map(String::len).max().unwrap_or(5).max(8);
    let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}", "class", "precision", "recall", "f1", "support");
    for (class, m) in report.per_class.iter().filter(|(_, m)| m.support + m.predicted > 0) {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>7}",
            class, m.precision, m.recall, m.f1, m.support
        );
    }
    let mut line = |name: &str, m: Metrics| {
        let _ = writeln!(out, "{:<width$}  {:>9.3}  {:>9.3}  {:>9.3}", name, m.precision, m.recall, m.f1);
    };
    line("weighted", report.weighted);
    line("macro", report.macro_avg);
    if let Some(b) = report.binary_sensitive {
        line("sensitive", b);
    }
    out
}
