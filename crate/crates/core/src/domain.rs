//! Retrieve-then-detect: assess every column against a retrieved rulebook in
//! one table-wide call, then aggregate column levels to a table verdict.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detect::one_line;
use crate::error::{Error, Result};
use crate::gateway::{Expectation, Gateway, ModelRequest};
use crate::rulebook::{json_object_span, RuleBook};
use crate::table::{render_table_context_with, RenderOptions, Table, TableContext};
use crate::taxonomy::SensitivityLevel;

pub const FAIL_CLOSED_JUSTIFICATION: &str = "parse-failure fail-closed";
const MISSING_JUSTIFICATION: &str = "no justification given";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainVerdict {
    pub table_id: String,
    pub column_index: usize,
    pub header: String,
    pub level: SensitivityLevel,
    pub justification: String,
    pub cited_rule_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableVerdict {
    pub table_id: String,
    pub sensitive: bool,
    pub max_level: SensitivityLevel,
    pub flagged_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainConfig {
    pub backend_id: String,
    pub render: RenderOptions,
    /// Assess column by column when the table context had to be truncated.
    pub per_column_fallback: bool,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            backend_id: "assess".to_string(),
            render: RenderOptions::default(),
            per_column_fallback: true,
        }
    }
}

pub const DOMAIN_SYSTEM_PROMPT: &str = "You assess how sensitive each column of a data table is for responsible \
data sharing. Use the sensitivity rules when provided and cite the ids of the rules you rely on. \
Reply with a single JSON object and nothing else.";

fn rules_section(rulebook: &RuleBook) -> String {
    let mut p = format!("Sensitivity rules (rulebook: {}):\n", rulebook.country);
    for level in SensitivityLevel::ALL {
        p.push_str(&format!("[{}]\n", level.as_str()));
        let rules = rulebook.rules_at(level);
        if rules.is_empty() {
            p.push_str("- (no rules)\n");
        }
        for r in rules {
            p.push_str(&format!("- {}: {}\n", r.id, one_line(&r.text)));
        }
    }
    p
}

fn assessment_prompt(table: &Table, context: &TableContext, rulebook: Option<&RuleBook>, targets: &[usize]) -> String {
    let mut p = format!("Table: {}\n", one_line(&table.title));
    if !table.description.trim().is_empty() {
        p.push_str(&format!("Description: {}\n", one_line(&table.description)));
    }
    if let Some(c) = &table.country {
        p.push_str(&format!("Country: {c}\n"));
    }
    p.push('\n');
    p.push_str(&context.text);
    p.push_str("\n\n");
    if let Some(rb) = rulebook {
        p.push_str(&rules_section(rb));
        p.push('\n');
    }
    p.push_str("Columns to assess:\n");
    for &i in targets {
        if let Some(c) = table.column(i) {
            p.push_str(&format!("{}: {}\n", i, one_line(&c.header)));
        }
    }
    p.push_str(
        "\nReturn {\"columns\": [{\"column_index\": <int>, \"level\": <one of non_sensitive, moderate_sensitive, \
high_sensitive, severe_sensitive>, \"justification\": <text>, \"cited_rule_ids\": [<rule id>, ...]}]} \
with one entry per listed column.",
    );
    if rulebook.is_none() {
        p.push_str(" Use an empty cited_rule_ids list.");
    }
    p
}

/// Builds the table-wide request. `rulebook = None` is the unaided ablation.
pub fn build_assessment_request(
    table: &Table,
    rulebook: Option<&RuleBook>,
    config: &DomainConfig,
) -> ModelRequest {
    let context = render_table_context_with(table, &config.render);
    let targets: Vec<usize> = (0..table.column_count()).collect();
    ModelRequest::new(
        &config.backend_id,
        DOMAIN_SYSTEM_PROMPT,
        assessment_prompt(table, &context, rulebook, &targets),
        Expectation::StructuredRecord,
    )
}

/// Structural parse: a JSON object with a `columns` array. Individual
/// entries are checked later so one bad entry only affects its column.
fn parse_columns(text: &str) -> std::result::Result<Vec<Value>, String> {
    let span = json_object_span(text).ok_or("no JSON object found")?;
    let value: Value = serde_json::from_str(span).map_err(|e| format!("invalid JSON: {e}"))?;
    match value.get("columns") {
        Some(Value::Array(a)) => Ok(a.clone()),
        _ => Err("expected a \"columns\" array".into()),
    }
}

fn fail_closed(table: &Table, index: usize) -> DomainVerdict {
    DomainVerdict {
        table_id: table.id.clone(),
        column_index: index,
        header: table.column(index).map(|c| c.header.clone()).unwrap_or_default(),
        level: SensitivityLevel::ModerateSensitive,
        justification: FAIL_CLOSED_JUSTIFICATION.to_string(),
        cited_rule_ids: Vec::new(),
    }
}

fn entry_verdict(table: &Table, index: usize, entry: &Value, known_ids: &HashSet<&str>) -> Option<DomainVerdict> {
    let level: SensitivityLevel = entry.get("level")?.as_str()?.parse().ok()?;
    let mut justification = entry
        .get("justification")
        .and_then(Value::as_str)
        .unwrap_or("")
        .trim()
        .to_string();
    if justification.is_empty() && level.is_sensitive() {
        justification = MISSING_JUSTIFICATION.to_string();
    }
    let mut cited = Vec::new();
    if let Some(ids) = entry.get("cited_rule_ids").and_then(Value::as_array) {
        for id in ids.iter().filter_map(Value::as_str) {
            if known_ids.contains(id) {
                if !cited.iter().any(|c| c == id) {
                    cited.push(id.to_string());
                }
            } else {
                log::warn!("{} column {index}: dropping unknown rule id {id:?}", table.id);
            }
        }
    }
    Some(DomainVerdict {
        table_id: table.id.clone(),
        column_index: index,
        header: table.column(index).map(|c| c.header.clone()).unwrap_or_default(),
        level,
        justification,
        cited_rule_ids: cited,
    })
}

fn verdicts_from_entries(
    table: &Table,
    targets: &[usize],
    entries: Option<&[Value]>,
    known_ids: &HashSet<&str>,
) -> Vec<DomainVerdict> {
    targets
        .iter()
        .map(|&i| {
            entries
                .and_then(|es| {
                    es.iter()
                        .find(|e| e.get("column_index").and_then(Value::as_u64) == Some(i as u64))
                        .or_else(|| (targets.len() == 1 && es.len() == 1).then(|| &es[0]))
                })
                .and_then(|e| entry_verdict(table, i, e, known_ids))
                .unwrap_or_else(|| fail_closed(table, i))
        })
        .collect()
}

fn assess(table: &Table, rulebook: Option<&RuleBook>, gateway: &Gateway, config: &DomainConfig) -> Result<Vec<DomainVerdict>> {
    let known_ids: HashSet<&str> = rulebook
        .map(|rb| rb.all_rules().map(|r| r.id.as_str()).collect())
        .unwrap_or_default();
    let context = render_table_context_with(table, &config.render);
    let all: Vec<usize> = (0..table.column_count()).collect();
    if all.is_empty() {
        return Ok(Vec::new());
    }
    let groups: Vec<Vec<usize>> = if context.truncated && config.per_column_fallback {
        all.iter().map(|&i| vec![i]).collect()
    } else {
        vec![all]
    };
    let mut out = Vec::with_capacity(table.column_count());
    for targets in groups {
        let request = ModelRequest::new(
            &config.backend_id,
            DOMAIN_SYSTEM_PROMPT,
            assessment_prompt(table, &context, rulebook, &targets),
            Expectation::StructuredRecord,
        );
        let entries = match gateway.complete_parsed(&request, parse_columns) {
            Ok((entries, _)) => Some(entries),
            Err(Error::MalformedOutput { reason, .. }) => {
                log::warn!("{}: assessment output unusable ({reason}); failing closed", table.id);
                None
            }
            Err(e) => return Err(e),
        };
        out.extend(verdicts_from_entries(table, &targets, entries.as_deref(), &known_ids));
    }
    Ok(out)
}

/// One verdict per column, grounded in `rulebook`. Columns missing from the
/// answer, or with an unreadable level, fail closed at moderate.
pub fn assess_columns(table: &Table, rulebook: &RuleBook, gateway: &Gateway, config: &DomainConfig) -> Result<Vec<DomainVerdict>> {
    assess(table, Some(rulebook), gateway, config)
}

/// The same assessment without any rulebook in the prompt.
pub fn assess_columns_unaided(table: &Table, gateway: &Gateway, config: &DomainConfig) -> Result<Vec<DomainVerdict>> {
    assess(table, None, gateway, config)
}

/// Table verdict from per-column levels.
pub fn aggregate_levels(table_id: &str, levels: &[(usize, SensitivityLevel)]) -> Result<TableVerdict> {
    let max_level = levels.iter().map(|(_, l)| *l).max().ok_or(Error::EmptyVerdictList)?;
    Ok(TableVerdict {
        table_id: table_id.to_string(),
        sensitive: max_level.is_sensitive(),
        max_level,
        flagged_columns: levels.iter().filter(|(_, l)| l.is_sensitive()).map(|(i, _)| *i).collect(),
    })
}

pub fn aggregate_table(verdicts: &[DomainVerdict]) -> Result<TableVerdict> {
    let first = verdicts.first().ok_or(Error::EmptyVerdictList)?;
    if let Some(other) = verdicts.iter().find(|v| v.table_id != first.table_id) {
        return Err(Error::Config(format!(
            "verdicts span tables {} and {}",
            first.table_id, other.table_id
        )));
    }
    let levels: Vec<(usize, SensitivityLevel)> = verdicts.iter().map(|v| (v.column_index, v.level)).collect();
    aggregate_levels(&first.table_id, &levels)
}

/// Marks every table sensitive at moderate.
pub fn all_sensitive_baseline(corpus: &[Table]) -> Vec<TableVerdict> {
    corpus
        .iter()
        .map(|t| TableVerdict {
            table_id: t.id.clone(),
            sensitive: true,
            max_level: SensitivityLevel::ModerateSensitive,
            flagged_columns: (0..t.column_count()).collect(),
        })
        .collect()
}
