//! Browser demo. Each export takes plain arguments and returns a JSON
//! string, so the page needs no bindings beyond strings and numbers.
//! Errors come back as `{"error": "..."}`.

use serde::Serialize;
use sentinel_core::detect::{detect_pattern, RuleSet};
use sentinel_core::eval::{f1_score, metrics_from_counts};
use sentinel_core::table::{load_table_from_bytes, render_table_context_with, ParseOptions, RenderOptions, Table, MIN_CHAR_BUDGET};
use sentinel_core::taxonomy::Taxonomy;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| error_json(&e.to_string()))
}

fn error_json(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn parse(csv: &str) -> Result<Table, String> {
    load_table_from_bytes("pasted", csv.as_bytes(), &ParseOptions::default()).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ColumnResult {
    index: usize,
    header: String,
    detected_type: String,
    signals: Vec<String>,
}

#[derive(Serialize)]
struct ScanResult {
    rows: usize,
    threshold: f64,
    columns: Vec<ColumnResult>,
}

/// Runs the pattern detector over pasted CSV. `threshold` is the minimum
/// fraction of sampled values a pattern must match.
#[wasm_bindgen]
pub fn scan_csv(csv: &str, threshold: f64) -> String {
    let run = || -> Result<ScanResult, String> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(format!("threshold must be within [0, 1], got {threshold}"));
        }
        let table = parse(csv)?;
        let taxonomy = Taxonomy::load_default();
        let rules = RuleSet::load_default(&taxonomy)
            .map_err(|e| e.to_string())?
            .with_min_fraction(threshold);
        let columns = table
            .columns
            .iter()
            .map(|c| {
                let v = detect_pattern(&table.id, c, &rules);
                ColumnResult {
                    index: v.column_index,
                    header: v.header,
                    detected_type: v.detected_type.as_str().to_string(),
                    signals: v.signals,
                }
            })
            .collect();
        Ok(ScanResult {
            rows: table.row_count,
            threshold,
            columns,
        })
    };
    run().map(|r| to_json(&r)).unwrap_or_else(|e| error_json(&e))
}

/// Renders the table context a model would see, within `char_budget`
/// (raised to the engine minimum when smaller).
#[wasm_bindgen]
pub fn render_csv(csv: &str, rows: usize, char_budget: usize) -> String {
    match parse(csv) {
        Ok(table) => {
            let opts = RenderOptions {
                rows_per_table: rows,
                char_budget,
                ..RenderOptions::default()
            };
            let ctx = render_table_context_with(&table, &opts);
            to_json(&serde_json::json!({
                "text": ctx.text,
                "chars": ctx.text.chars().count(),
                "budget": char_budget.max(MIN_CHAR_BUDGET),
                "rows_rendered": ctx.rows_rendered,
                "truncated": ctx.truncated,
                "elided_columns": ctx.elided_columns,
            }))
        }
        Err(e) => error_json(&e),
    }
}

/// Precision, recall and F1 from confusion counts.
#[wasm_bindgen]
pub fn metrics(tp: u32, fp: u32, fn_: u32) -> String {
    to_json(&metrics_from_counts(tp as usize, fp as usize, fn_ as usize))
}

/// F1 as the harmonic mean of a given precision and recall.
#[wasm_bindgen]
pub fn f1(precision: f64, recall: f64) -> String {
    if !(0.0..=1.0).contains(&precision) || !(0.0..=1.0).contains(&recall) {
        return error_json("precision and recall must be within [0, 1]");
    }
    to_json(&serde_json::json!({ "precision": precision, "recall": recall, "f1": f1_score(precision, recall) }))
}
