//! Stage two of detect-then-reflect: judge each candidate column again, this
//! time with the whole table in view, and assign a contextual level.
//!
//! Reflection can only confirm or clear a candidate. It never adds a column,
//! so the final sensitive set is a subset of the detected candidates.

use serde::{Deserialize, Serialize};

use crate::detect::{one_line, DetectionVerdict};
use crate::error::{Error, Result};
use crate::gateway::{Expectation, Gateway, ModelRequest};
use crate::par::map_ordered;
use crate::table::{render_table_context_with, RenderOptions, Table, TableContext};
use crate::taxonomy::{normalize_label, PiiTypeId, SensitivityLevel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionVerdict {
    pub table_id: String,
    pub column_index: usize,
    pub header: String,
    pub input_detected_type: PiiTypeId,
    pub level: SensitivityLevel,
    pub sensitive: bool,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectorConfig {
    pub backend_id: String,
    pub workers: usize,
    pub render: RenderOptions,
}

impl Default for ReflectorConfig {
    fn default() -> Self {
        ReflectorConfig {
            backend_id: "reflect".to_string(),
            workers: 1,
            render: RenderOptions::default(),
        }
    }
}

pub const REFLECTION_SYSTEM_PROMPT: &str = "You review one column of a data table and decide how sensitive it is \
in the context of the whole table. Put the level on the first line, exactly as one of: \
non_sensitive, moderate_sensitive, high_sensitive. On the following lines give a short rationale.";

const LEVEL_DEFINITIONS: &str = "Levels:\n\
- non_sensitive: the data cannot identify a person.\n\
- moderate_sensitive: the data could potentially identify a person when combined with other data.\n\
- high_sensitive: the data definitively identifies a person.\n";

fn table_header(table: &Table, context: &TableContext) -> String {
    let mut p = format!("Table: {}\n", one_line(&table.title));
    if !table.description.trim().is_empty() {
        p.push_str(&format!("Description: {}\n", one_line(&table.description)));
    }
    p.push('\n');
    p.push_str(&context.text);
    p.push_str("\n\n");
    p
}

fn prompt_text(table: &Table, context: &TableContext, target: usize, detections: Option<&[DetectionVerdict]>) -> String {
    let header = table.column(target).map(|c| c.header.as_str()).unwrap_or("");
    let mut p = table_header(table, context);
    p.push_str(&format!("Target column: {} (column {})\n", one_line(header), target));
    if let Some(detections) = detections {
        let own = detections
            .iter()
            .find(|d| d.column_index == target)
            .map(|d| d.detected_type.clone())
            .unwrap_or_else(PiiTypeId::none);
        p.push_str(&format!("Detected type: {own}\n"));
        let others: Vec<&DetectionVerdict> = detections
            .iter()
            .filter(|d| d.column_index != target && d.is_candidate())
            .collect();
        if !others.is_empty() {
            p.push_str("Other detected entities in this table:\n");
            for d in others {
                p.push_str(&format!("- {}: {}\n", one_line(&d.header), d.detected_type));
            }
        }
    }
    p.push('\n');
    p.push_str(LEVEL_DEFINITIONS);
    p.push_str("\nAnswer with the level on the first line, then the rationale.");
    p
}

/// Builds the reflection request for `target` with default rendering.
pub fn build_reflection_prompt(table: &Table, target: usize, detections: &[DetectionVerdict]) -> ModelRequest {
    let config = ReflectorConfig::default();
    let context = render_table_context_with(table, &config.render);
    reflection_request(table, &context, target, Some(detections), &config)
}

fn reflection_request(
    table: &Table,
    context: &TableContext,
    target: usize,
    detections: Option<&[DetectionVerdict]>,
    config: &ReflectorConfig,
) -> ModelRequest {
    ModelRequest::new(
        &config.backend_id,
        REFLECTION_SYSTEM_PROMPT,
        prompt_text(table, context, target, detections),
        Expectation::ClosedLabel,
    )
}

/// Reads the level from the first non-blank line. The line must be a level
/// name and nothing else (surrounding quotes, asterisks and a trailing
/// period are tolerated). A severe answer is clamped to high, since this
/// pipeline works on a three-level scale.
pub fn parse_reflection_output(text: &str) -> std::result::Result<(SensitivityLevel, String), String> {
    let mut lines = text.lines().skip_while(|l| l.trim().is_empty());
    let first = lines.next().ok_or_else(|| "empty answer".to_string())?;
    let label = first.trim().trim_matches(|c: char| matches!(c, '*' | '`' | '"' | '\'' | '.' | ' '));
    let norm = normalize_label(label);
    if norm.is_empty() {
        return Err(format!("first line is not a level: {first:?}"));
    }
    let level: SensitivityLevel = norm
        .parse()
        .map_err(|_| format!("first line is not a level: {first:?}"))?;
    let level = level.min(SensitivityLevel::HighSensitive);
    let rationale = lines.collect::<Vec<_>>().join("\n").trim().to_string();
    Ok((level, rationale))
}

fn judge(request: &ModelRequest, gateway: &Gateway) -> Result<(SensitivityLevel, String)> {
    match gateway.complete_parsed(request, parse_reflection_output) {
        Ok(((level, rationale), resp)) => {
            let rationale = if rationale.is_empty() { resp.text.trim().to_string() } else { rationale };
            Ok((level, rationale))
        }
        Err(Error::MalformedOutput { last_output, .. }) => Ok((SensitivityLevel::ModerateSensitive, last_output)),
        Err(e) => Err(e),
    }
}

fn verdict(table: &Table, index: usize, detected: PiiTypeId, level: SensitivityLevel, rationale: String) -> ReflectionVerdict {
    ReflectionVerdict {
        table_id: table.id.clone(),
        column_index: index,
        header: table.column(index).map(|c| c.header.clone()).unwrap_or_default(),
        input_detected_type: detected,
        level,
        sensitive: level.is_sensitive(),
        rationale,
    }
}

/// One verdict per candidate, in candidate order. Unparseable answers fail
/// closed at moderate with the raw output as rationale.
pub fn reflect(
    table: &Table,
    candidates: &[DetectionVerdict],
    gateway: &Gateway,
    config: &ReflectorConfig,
) -> Result<Vec<ReflectionVerdict>> {
    for c in candidates {
        if !c.is_candidate() {
            return Err(Error::Config(format!(
                "column {} of {} is not a candidate (detected none)",
                c.column_index, table.id
            )));
        }
        if c.column_index >= table.column_count() {
            return Err(Error::Config(format!("column {} out of range for {}", c.column_index, table.id)));
        }
    }
    let context = render_table_context_with(table, &config.render);
    map_ordered(candidates, config.workers, |c| {
        let request = reflection_request(table, &context, c.column_index, Some(candidates), config);
        let (level, rationale) = judge(&request, gateway)?;
        Ok(verdict(table, c.column_index, c.detected_type.clone(), level, rationale))
    })
    .into_iter()
    .collect()
}

/// Ablation without a detection stage: every column is judged, and the
/// prompt carries no type hints.
pub fn reflect_only(table: &Table, gateway: &Gateway, config: &ReflectorConfig) -> Result<Vec<ReflectionVerdict>> {
    let context = render_table_context_with(table, &config.render);
    let indices: Vec<usize> = (0..table.column_count()).collect();
    map_ordered(&indices, config.workers, |&i| {
        let request = reflection_request(table, &context, i, None, config);
        let (level, rationale) = judge(&request, gateway)?;
        Ok(verdict(table, i, PiiTypeId::none(), level, rationale))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DetectionMethod;
    use crate::gateway::{GatewayConfig, MockBackend, MockRule, MockScript};
    use std::sync::Arc;

    fn table() -> Table {
        Table::from_rows(
            "staff",
            vec!["full_name".into(), "email".into(), "office".into()],
            vec![
                vec!["Ada Obi".into(), "ada@x.org".into(), "Nairobi".into()],
                vec!["Ben Ali".into(), "ben@x.org".into(), "Mombasa".into()],
            ],
        )
        .unwrap()
    }

    fn det(index: usize, header: &str, ty: &str) -> DetectionVerdict {
        DetectionVerdict {
            table_id: "staff".into(),
            column_index: index,
            header: header.into(),
            detected_type: PiiTypeId::new(ty),
            method: DetectionMethod::Pattern,
            raw_output: String::new(),
            signals: vec![],
        }
    }

    fn gw(script: MockScript) -> Gateway {
        Gateway::new(GatewayConfig::default())
            .with_sleeper(Arc::new(|_| {}))
            .with_backend("reflect", Arc::new(MockBackend::scripted(script)))
    }

    #[test]
    fn prompt_mentions_other_entities() {
        let t = table();
        let dets = [det(0, "full_name", "name"), det(1, "email", "email_address")];
        let p = build_reflection_prompt(&t, 1, &dets).user_prompt;
        assert!(p.contains("Target column: email (column 1)"));
        assert!(p.contains("Detected type: email_address"));
        assert!(p.contains("Other detected entities in this table:\n- full_name: name\n"));
        assert!(p.contains("| full_name | email | office |"));
        assert!(p.contains("definitively identifies a person"));

        let alone = build_reflection_prompt(&t, 1, &dets[1..]).user_prompt;
        assert!(!alone.contains("Other detected entities"));
        assert_eq!(build_reflection_prompt(&t, 1, &dets).hash(), build_reflection_prompt(&t, 1, &dets).hash());
    }

    #[test]
    fn output_parsing() {
        use SensitivityLevel::*;
        assert_eq!(parse_reflection_output("high_sensitive\nnames").unwrap(), (HighSensitive, "names".into()));
        assert_eq!(parse_reflection_output("\n**Non_Sensitive**\n").unwrap().0, NonSensitive);
        assert_eq!(parse_reflection_output("low").unwrap().0, NonSensitive);
        assert_eq!(parse_reflection_output("severe_sensitive").unwrap().0, HighSensitive);
        assert!(parse_reflection_output("").is_err());
        assert!(parse_reflection_output("I think it is high_sensitive").is_err());
        assert!(parse_reflection_output("sensitive").is_err());
    }

    #[test]
    fn clears_and_confirms() {
        let t = table();
        let dets = [det(0, "full_name", "name"), det(2, "office", "street_address")];
        let g = gw(MockScript {
            rules: vec![
                MockRule::new(&["Target column: full_name"], "high_sensitive\nnames staff"),
                MockRule::new(&["Target column: office"], "non_sensitive\npublic office cities"),
            ],
            default: None,
        });
        let v = reflect(&t, &dets, &g, &ReflectorConfig::default()).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v[0].sensitive);
        assert_eq!(v[1].level, SensitivityLevel::NonSensitive);
        assert_eq!(v[1].rationale, "public office cities");
        assert_eq!(v[1].input_detected_type.as_str(), "street_address");
    }

    #[test]
    fn malformed_fails_closed() {
        let t = table();
        let g = gw(MockScript {
            rules: vec![],
            default: Some("not sure".into()),
        });
        let v = reflect(&t, &[det(1, "email", "email_address")], &g, &ReflectorConfig::default()).unwrap();
        assert_eq!(v[0].level, SensitivityLevel::ModerateSensitive);
        assert_eq!(v[0].rationale, "not sure");
    }

    #[test]
    fn rejects_non_candidates() {
        let g = gw(MockScript::default());
        assert!(reflect(&table(), &[det(0, "full_name", "none")], &g, &ReflectorConfig::default()).is_err());
    }

    #[test]
    fn reflect_only_covers_every_column() {
        let t = table();
        let g = gw(MockScript {
            rules: vec![],
            default: Some("moderate_sensitive\nmaybe".into()),
        });
        let v = reflect_only(&t, &g, &ReflectorConfig::default()).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|r| r.input_detected_type.is_none()));
        let p = prompt_text(&t, &render_table_context_with(&t, &RenderOptions::default()), 0, None);
        assert!(!p.contains("Detected type"));
    }
}
