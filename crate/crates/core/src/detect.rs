//! Column type detection: the first stage of detect-then-reflect.
//!
//! Two methods produce the same [`DetectionVerdict`]:
//!
//! * the pattern engine, a deterministic rule matcher over header keywords
//!   and value expressions (the same family as commercial DLP tools), and
//! * a model call that picks one id from the taxonomy given the header and
//!   five sample values.
//!
//! Detection is tuned for recall. Columns with a detected type other than
//! `none` become the candidate set for reflection.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Expectation, Gateway, ModelRequest};
use crate::par::map_ordered;
use crate::table::{ColumnProfile, Table};
use crate::taxonomy::{PiiTypeId, Taxonomy};

pub const DEFAULT_MIN_VALUE_MATCH_FRACTION: f64 = 0.5;
const DEFAULT_RULES: &str = include_str!("../data/pattern_rules.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMethod {
    Pattern,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub table_id: String,
    pub column_index: usize,
    pub header: String,
    pub detected_type: PiiTypeId,
    pub method: DetectionMethod,
    pub raw_output: String,
    pub signals: Vec<String>,
}

impl DetectionVerdict {
    pub fn is_candidate(&self) -> bool {
        !self.detected_type.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRule {
    pub id: String,
    pub target_type: PiiTypeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_expression: Option<String>,
    #[serde(default)]
    pub header_keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_value_match_fraction: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RulesFile {
    schema_version: u32,
    #[serde(default = "default_fraction")]
    default_min_value_match_fraction: f64,
    rules: Vec<PatternRule>,
}

fn default_fraction() -> f64 {
    DEFAULT_MIN_VALUE_MATCH_FRACTION
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: PatternRule,
    regex: Option<Regex>,
    keywords: Vec<Vec<String>>,
    min_fraction: f64,
}

/// A validated, compiled set of pattern rules.
#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<CompiledRule>,
}

/// Splits a header into lowercase word tokens, breaking on non-alphanumeric
/// characters and camelCase boundaries.
pub fn header_tokens(header: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for ch in header.chars() {
        if !ch.is_alphanumeric() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if ch.is_uppercase() && prev_lower && !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
        prev_lower = ch.is_lowercase() || ch.is_ascii_digit();
        cur.extend(ch.to_lowercase());
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// True when `keyword`'s tokens occur contiguously in `header`'s tokens.
fn keyword_matches(header: &[String], keyword: &[String]) -> bool {
    !keyword.is_empty() && header.windows(keyword.len()).any(|w| w == keyword)
}

impl RuleSet {
    pub fn new(rules: Vec<PatternRule>, taxonomy: &Taxonomy, default_fraction: f64) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            if !ids.insert(rule.id.clone()) {
                return Err(Error::SchemaViolation(format!("duplicate rule id {}", rule.id)));
            }
            if rule.target_type.is_none() || !taxonomy.contains(&rule.target_type) {
                return Err(Error::SchemaViolation(format!(
                    "rule {} targets unknown type {}",
                    rule.id, rule.target_type
                )));
            }
            if rule.value_expression.is_none() && rule.header_keywords.is_empty() {
                return Err(Error::SchemaViolation(format!(
                    "rule {} needs a value_expression or header_keywords",
                    rule.id
                )));
            }
            let min_fraction = rule.min_value_match_fraction.unwrap_or(default_fraction);
            if !(0.0..=1.0).contains(&min_fraction) {
                return Err(Error::SchemaViolation(format!(
                    "rule {}: min_value_match_fraction {min_fraction} outside [0, 1]",
                    rule.id
                )));
            }
            let regex = rule
                .value_expression
                .as_deref()
                .map(Regex::new)
                .transpose()
                .map_err(|e| Error::SchemaViolation(format!("rule {}: {e}", rule.id)))?;
            let keywords = rule.header_keywords.iter().map(|k| header_tokens(k)).collect();
            compiled.push(CompiledRule {
                rule,
                regex,
                keywords,
                min_fraction,
            });
        }
        Ok(RuleSet { rules: compiled })
    }

    pub fn from_json(text: &str, taxonomy: &Taxonomy) -> Result<Self> {
        let file: RulesFile = serde_json::from_str(text).map_err(|e| Error::json("pattern rules", e))?;
        if file.schema_version != 1 {
            return Err(Error::SchemaViolation(format!(
                "unsupported pattern rules schema_version {}",
                file.schema_version
            )));
        }
        Self::new(file.rules, taxonomy, file.default_min_value_match_fraction)
    }

    pub fn load(path: &Path, taxonomy: &Taxonomy) -> Result<Self> {
        Self::from_json(&crate::taxonomy::read_text(path)?, taxonomy)
    }

    pub fn load_default(taxonomy: &Taxonomy) -> Result<Self> {
        Self::from_json(DEFAULT_RULES, taxonomy)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &PatternRule> {
        self.rules.iter().map(|c| &c.rule)
    }

    /// Overrides every rule's value-match threshold.
    pub fn with_min_fraction(mut self, fraction: f64) -> Self {
        let f = fraction.clamp(0.0, 1.0);
        for r in &mut self.rules {
            r.min_fraction = f;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Firing<'a> {
    rule: &'a PatternRule,
    fraction: f64,
    header_hit: bool,
}

fn rank(a: &Firing<'_>, b: &Firing<'_>) -> Ordering {
    b.fraction
        .partial_cmp(&a.fraction)
        .unwrap_or(Ordering::Equal)
        .then(b.header_hit.cmp(&a.header_hit))
        .then_with(|| a.rule.id.cmp(&b.rule.id))
}

/// Classifies one column with the pattern engine. A rule fires on a header
/// keyword or when enough non-empty sampled values match its expression;
/// the highest value-match fraction wins, then header hits, then rule id.
pub fn detect_pattern(table_id: &str, column: &ColumnProfile, rules: &RuleSet) -> DetectionVerdict {
    let header = header_tokens(&column.header);
    let values: Vec<&str> = column.non_empty_sample().map(str::trim).collect();
    let mut firings: Vec<Firing<'_>> = rules
        .rules
        .iter()
        .filter_map(|c| {
            let header_hit = c.keywords.iter().any(|k| keyword_matches(&header, k));
            let fraction = match (&c.regex, values.len()) {
                (Some(re), n) if n > 0 => values.iter().filter(|v| re.is_match(v)).count() as f64 / n as f64,
                _ => 0.0,
            };
            let value_hit = fraction > 0.0 && fraction >= c.min_fraction;
            (header_hit || value_hit).then_some(Firing {
                rule: &c.rule,
                fraction,
                header_hit,
            })
        })
        .collect();
    firings.sort_by(rank);

    let (detected_type, raw_output) = match firings.first() {
        Some(w) => (
            w.rule.target_type.clone(),
            format!(
                "{} (value match {:.2}{})",
                w.rule.id,
                w.fraction,
                if w.header_hit { ", header match" } else { "" }
            ),
        ),
        None => (PiiTypeId::none(), "no rule fired".to_string()),
    };
    DetectionVerdict {
        table_id: table_id.to_string(),
        column_index: column.index,
        header: column.header.clone(),
        detected_type,
        method: DetectionMethod::Pattern,
        raw_output,
        signals: firings.iter().map(|f| f.rule.id.clone()).collect(),
    }
}

pub const DETECTION_SYSTEM_PROMPT: &str = "You are a data classification assistant. \
You label one table column with the single most appropriate personal-data type from a closed list, \
or `none` when no listed type applies. Reply with the type id only, without explanation.";

pub fn build_detection_prompt(column: &ColumnProfile, taxonomy: &Taxonomy) -> String {
    let mut p = String::from("Types:\n");
    for ty in taxonomy.types() {
        p.push_str(&format!("- {}: {}\n", ty.id, ty.description));
    }
    p.push_str("- none: no listed type applies\n\n");
    p.push_str(&format!("Column name: {}\n", one_line(&column.header)));
    p.push_str("Sample values:\n");
    for v in &column.sample {
        if v.is_empty() {
            p.push_str("- (empty)\n");
        } else {
            p.push_str(&format!("- {}\n", one_line(v)));
        }
    }
    p.push_str("\nAnswer with exactly one type id from the list.");
    p
}

pub(crate) fn one_line(s: &str) -> String {
    s.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

/// Classifies one column with a model. Unparseable output after the
/// corrective re-prompt becomes `none`, keeping the raw text.
pub fn detect_model(
    table_id: &str,
    column: &ColumnProfile,
    taxonomy: &Taxonomy,
    gateway: &Gateway,
    backend_id: &str,
) -> Result<DetectionVerdict> {
    let request = ModelRequest::new(
        backend_id,
        DETECTION_SYSTEM_PROMPT,
        build_detection_prompt(column, taxonomy),
        Expectation::ClosedLabel,
    );
    let (detected_type, raw_output) =
        match gateway.complete_parsed(&request, |t| taxonomy.parse_type_label(t).map_err(|e| e.to_string())) {
            Ok((id, resp)) => (id, resp.text),
            Err(Error::MalformedOutput { last_output, .. }) => (PiiTypeId::none(), last_output),
            Err(e) => return Err(e),
        };
    Ok(DetectionVerdict {
        table_id: table_id.to_string(),
        column_index: column.index,
        header: column.header.clone(),
        detected_type,
        method: DetectionMethod::Model,
        raw_output,
        signals: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub method: DetectionMethod,
    pub backend_id: String,
    pub workers: usize,
    /// Largest tolerated fraction of columns whose model call failed.
    pub max_error_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            method: DetectionMethod::Pattern,
            backend_id: "detect".to_string(),
            workers: 1,
            max_error_fraction: 0.1,
        }
    }
}

pub struct TypeDetector<'a> {
    pub taxonomy: &'a Taxonomy,
    pub rules: &'a RuleSet,
    pub gateway: Option<&'a Gateway>,
    pub config: DetectorConfig,
}

impl TypeDetector<'_> {
    /// One verdict per column, in column order. Model failures are tolerated
    /// up to `max_error_fraction` (failed columns become `none`); a replay
    /// miss always aborts.
    pub fn detect_table(&self, table: &Table) -> Result<Vec<DetectionVerdict>> {
        match self.config.method {
            DetectionMethod::Pattern => Ok(table
                .columns
                .iter()
                .map(|c| detect_pattern(&table.id, c, self.rules))
                .collect()),
            DetectionMethod::Model => {
                let gateway = self
                    .gateway
                    .ok_or_else(|| Error::Config("model detection requires a gateway".into()))?;
                let results = map_ordered(&table.columns, self.config.workers, |c| {
                    detect_model(&table.id, c, self.taxonomy, gateway, &self.config.backend_id)
                });
                let total = results.len();
                let mut failed = 0;
                let mut last_error = String::new();
                let mut verdicts = Vec::with_capacity(total);
                for (col, r) in table.columns.iter().zip(results) {
                    match r {
                        Ok(v) => verdicts.push(v),
                        Err(e @ Error::ReplayMiss(_)) => return Err(e),
                        Err(e) => {
                            failed += 1;
                            last_error = e.to_string();
                            log::warn!("{} column {}: detection failed: {e}", table.id, col.index);
                            verdicts.push(DetectionVerdict {
                                table_id: table.id.clone(),
                                column_index: col.index,
                                header: col.header.clone(),
                                detected_type: PiiTypeId::none(),
                                method: DetectionMethod::Model,
                                raw_output: format!("error: {e}"),
                                signals: Vec::new(),
                            });
                        }
                    }
                }
                if total > 0 && failed as f64 / total as f64 > self.config.max_error_fraction {
                    return Err(Error::ScanFailed {
                        failed,
                        total,
                        last_error,
                    });
                }
                Ok(verdicts)
            }
        }
    }
}

pub fn candidates(verdicts: &[DetectionVerdict]) -> Vec<&DetectionVerdict> {
    verdicts.iter().filter(|v| v.is_candidate()).collect()
}
