//! Tabular datasets: loading, value sampling and the pipe-grid context
//! rendering every model prompt embeds.
//!
//! Tables are immutable once loaded and can be shared across workers.

use std::collections::HashSet;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_SIZE: usize = 5;
pub const DEFAULT_ROWS_PER_TABLE: usize = 5;
pub const DEFAULT_CHAR_BUDGET: usize = 16_000;
pub const DEFAULT_MAX_CELL_CHARS: usize = 200;
pub const MIN_CHAR_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParseOptions {
    pub delimiter: u8,
    pub quote: u8,
    /// Rows may differ from the header width by at most this many cells;
    /// short rows are padded and long rows lose trailing cells. Wider
    /// deviations are a parse error.
    pub ragged_tolerance: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            delimiter: b',',
            quote: b'"',
            ragged_tolerance: 0,
            sample_size: DEFAULT_SAMPLE_SIZE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnProfile {
    pub index: usize,
    pub header: String,
    /// One entry per row; missing cells are empty strings.
    pub values: Vec<String>,
    pub sample: Vec<String>,
}

impl ColumnProfile {
    pub fn new(index: usize, header: impl Into<String>, values: Vec<String>) -> Self {
        let mut col = ColumnProfile {
            index,
            header: header.into(),
            values,
            sample: Vec::new(),
        };
        col.sample = sample_values(&col, DEFAULT_SAMPLE_SIZE, 0);
        col
    }

    pub fn non_empty_sample(&self) -> impl Iterator<Item = &str> {
        self.sample.iter().map(String::as_str).filter(|v| !v.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub country: Option<String>,
    pub columns: Vec<ColumnProfile>,
    pub row_count: usize,
}

impl Table {
    /// Builds a table from headers and row-major cells, applying header
    /// normalization and padding short rows.
    pub fn from_rows(id: impl Into<String>, headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        let id = id.into();
        if headers.is_empty() {
            return Err(Error::EmptyTable);
        }
        let headers = normalize_headers(headers);
        let mut columns: Vec<Vec<String>> = vec![Vec::with_capacity(rows.len()); headers.len()];
        for row in rows {
            let mut cells = row.into_iter();
            for col in columns.iter_mut() {
                col.push(cells.next().unwrap_or_default());
            }
        }
        let columns = headers
            .into_iter()
            .zip(columns)
            .enumerate()
            .map(|(i, (h, v))| ColumnProfile::new(i, h, v))
            .collect();
        Table::assemble(id, columns)
    }

    fn assemble(id: String, columns: Vec<ColumnProfile>) -> Result<Self> {
        if id.is_empty() {
            return Err(Error::Config("table id must be non-empty".into()));
        }
        if columns.is_empty() {
            return Err(Error::EmptyTable);
        }
        let row_count = columns.iter().map(|c| c.values.len()).max().unwrap_or(0);
        Ok(Table {
            title: id.clone(),
            id,
            description: String::new(),
            country: None,
            columns,
            row_count,
        })
    }

    pub fn with_metadata(mut self, title: &str, description: &str, country: Option<&str>) -> Self {
        if !title.is_empty() {
            self.title = title.to_string();
        }
        self.description = description.to_string();
        self.country = country.and_then(normalize_country);
        self
    }

    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, index: usize) -> Option<&ColumnProfile> {
        self.columns.get(index)
    }

    /// Re-draws every column's sample.
    pub fn resample(&mut self, k: usize, seed: u64) {
        for col in &mut self.columns {
            col.sample = sample_values(col, k, seed);
        }
    }
}

/// Upper-cases a country code; empty input means no country.
pub fn normalize_country(code: &str) -> Option<String> {
    let code = code.trim();
    if code.is_empty() {
        None
    } else {
        Some(code.to_ascii_uppercase())
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Trims, collapses whitespace, names blank headers `column_<n>` and
/// suffixes duplicates with `_2`, `_3`, ... so headers are unique.
pub fn normalize_headers(headers: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    headers
        .into_iter()
        .enumerate()
        .map(|(i, h)| {
            let base = collapse_whitespace(h.trim_start_matches('\u{feff}'));
            let base = if base.is_empty() {
                format!("column_{}", i + 1)
            } else {
                base
            };
            let mut name = base.clone();
            let mut n = 2;
            while !seen.insert(name.clone()) {
                name = format!("{base}_{n}");
                n += 1;
            }
            name
        })
        .collect()
}

pub fn load_table(path: &Path, options: &ParseOptions) -> Result<Table> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::FileNotFound(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "table".to_string());
    load_table_from_bytes(&id, &bytes, options)
}

/// Parses delimiter-separated bytes. Invalid UTF-8 is replaced, never
/// rejected; every failure is a structured error.
pub fn load_table_from_bytes(id: &str, bytes: &[u8], options: &ParseOptions) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .quote(options.quote)
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);

    let header_record = reader.byte_headers().map_err(csv_error)?.clone();
    let headers: Vec<String> = header_record
        .iter()
        .map(|f| String::from_utf8_lossy(f).into_owned())
        .collect();
    if headers.is_empty() {
        return Err(Error::EmptyTable);
    }
    let width = headers.len();

    let mut rows = Vec::new();
    let mut record = csv::ByteRecord::new();
    loop {
        match reader.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_error(e)),
        }
        let len = record.len();
        if len.abs_diff(width) > options.ragged_tolerance {
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            return Err(Error::ParseError {
                line,
                reason: format!("expected {width} fields, found {len}"),
            });
        }
        rows.push(
            record
                .iter()
                .take(width)
                .map(|f| String::from_utf8_lossy(f).into_owned())
                .collect::<Vec<_>>(),
        );
    }

    let mut table = Table::from_rows(id, headers, rows)?;
    if options.sample_size != DEFAULT_SAMPLE_SIZE || options.seed != 0 {
        table.resample(options.sample_size, options.seed);
    }
    Ok(table)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::ParseError {
        line,
        reason: e.to_string(),
    }
}

/// Picks `k` representative values: distinct non-empty values in
/// first-occurrence order, then repeated non-empty values (order drawn from
/// `seed`), then empty strings.
pub fn sample_values(column: &ColumnProfile, k: usize, seed: u64) -> Vec<String> {
    sample_from(&column.values, k, seed)
}

pub fn sample_from(values: &[String], k: usize, seed: u64) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k);
    let mut repeats = Vec::new();
    for v in values.iter().filter(|v| !v.is_empty()) {
        if seen.insert(v.as_str()) {
            if out.len() < k {
                out.push(v.clone());
            }
        } else {
            repeats.push(v);
        }
    }
    if out.len() < k && !repeats.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates over the repeat pool.
        for i in (1..repeats.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            repeats.swap(i, j);
        }
        out.extend(repeats.into_iter().take(k - out.len()).cloned());
    }
    out.resize(k, String::new());
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableContext {
    pub text: String,
    pub rows_rendered: usize,
    pub truncated: bool,
    pub elided_columns: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub rows_per_table: usize,
    pub char_budget: usize,
    pub max_cell_chars: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            rows_per_table: DEFAULT_ROWS_PER_TABLE,
            char_budget: DEFAULT_CHAR_BUDGET,
            max_cell_chars: DEFAULT_MAX_CELL_CHARS,
        }
    }
}

/// Escapes `\`, `|` and line breaks so a cell never splits a grid row.
pub fn escape_cell(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '\n' => out.push_str("\\n"),
            '\r' => {
                if chars.peek() == Some(&'\n') {
                    chars.next();
                }
                out.push_str("\\n");
            }
            _ => out.push(c),
        }
    }
    out
}

/// Splits one rendered grid line on unescaped delimiters, returning the
/// trimmed (still escaped) cell texts.
pub fn split_grid_row(line: &str) -> Vec<String> {
    let inner = line.strip_prefix('|').unwrap_or(line);
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                cur.push(c);
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
            }
            '|' => {
                cells.push(std::mem::take(&mut cur));
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        cells.push(cur);
    }
    cells
        .into_iter()
        .map(|c| c.strip_prefix(' ').unwrap_or(&c).strip_suffix(' ').unwrap_or(&c).to_string())
        .collect()
}

fn clip(text: &str, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        text.to_string()
    } else {
        let mut s: String = text.chars().take(max_chars.saturating_sub(1)).collect();
        s.push('…');
        s
    }
}

fn grid_line<'a>(cells: impl Iterator<Item = &'a str>) -> String {
    let mut line = String::from("|");
    for c in cells {
        line.push(' ');
        line.push_str(c);
        line.push_str(" |");
    }
    line
}

pub fn render_table_context(table: &Table, rows_per_table: usize) -> TableContext {
    render_table_context_with(
        table,
        &RenderOptions {
            rows_per_table,
            ..RenderOptions::default()
        },
    )
}

/// Renders header, separator and the first rows as a pipe grid. When the
/// result would exceed the character budget, trailing columns are elided
/// and named in a final note line (rows are dropped only if a single
/// column still does not fit).
///
/// Budgets below [`MIN_CHAR_BUDGET`] are raised to it. If even one column
/// does not fit, cells are clipped harder until it does.
pub fn render_table_context_with(table: &Table, opts: &RenderOptions) -> TableContext {
    let budget = opts.char_budget.max(MIN_CHAR_BUDGET);
    let mut max_cell = opts.max_cell_chars.max(1);
    loop {
        let ctx = render_clipped(table, opts.rows_per_table, budget, max_cell);
        if max_cell == 1 || ctx.text.chars().count() <= budget {
            return ctx;
        }
        max_cell = (max_cell / 2).max(1);
    }
}

fn render_clipped(table: &Table, rows_per_table: usize, budget: usize, max_cell: usize) -> TableContext {
    let rows = rows_per_table.max(1).min(table.row_count);
    let mut cell_clipped = false;
    let cols: Vec<(String, Vec<String>)> = table
        .columns
        .iter()
        .map(|c| {
            if c.header.chars().count() > max_cell {
                cell_clipped = true;
            }
            let header = escape_cell(&clip(&c.header, max_cell));
            let cells = (0..rows)
                .map(|r| {
                    let raw = c.values.get(r).map(String::as_str).unwrap_or("");
                    if raw.chars().count() > max_cell {
                        cell_clipped = true;
                    }
                    escape_cell(&clip(raw, max_cell))
                })
                .collect();
            (header, cells)
        })
        .collect();

    // Per-column character cost on each of the (2 + rows) lines.
    let col_cost = |i: usize, r: usize| -> usize {
        let (h, cells) = &cols[i];
        let mut cost = h.chars().count() + 3 + 6; // header cell + `---` cell
        for cell in cells.iter().take(r) {
            cost += cell.chars().count() + 3;
        }
        cost
    };
    let grid_len = |kept: usize, r: usize| -> usize {
        let lines = 2 + r;
        let fixed = lines /* leading `|` */ + (lines - 1) /* newlines */;
        fixed + (0..kept).map(|i| col_cost(i, r)).sum::<usize>()
    };

    let n = cols.len();
    let mut kept = n;
    let mut rows_used = rows;
    let mut note: Option<String> = None;

    if grid_len(n, rows) > budget {
        let mut chosen = None;
        'outer: for r in (0..=rows).rev() {
            for k in (1..n).rev() {
                let g = grid_len(k, r);
                if g >= budget {
                    continue;
                }
                let full = elision_note(&cols[k..], n, usize::MAX);
                if g + 1 + full.chars().count() <= budget {
                    chosen = Some((k, r, full));
                    break 'outer;
                }
            }
            // Nothing fits with a full note at this row count; try a short
            // note with one column before dropping rows.
            let g = grid_len(1.min(n), r);
            if g < budget {
                let short = elision_note(&cols[1..], n, budget - g - 1);
                if g + 1 + short.chars().count() <= budget {
                    chosen = Some((1, r, short));
                    break;
                }
            }
        }
        let (k, r, text) = chosen.unwrap_or_else(|| (1.min(n), 0, elision_note(&cols[1.min(n)..], n, 0)));
        kept = k;
        rows_used = r;
        note = Some(text);
    }

    let mut lines = Vec::with_capacity(rows_used + 3);
    lines.push(grid_line(cols[..kept].iter().map(|(h, _)| h.as_str())));
    lines.push(grid_line(cols[..kept].iter().map(|_| "---")));
    for r in 0..rows_used {
        lines.push(grid_line(cols[..kept].iter().map(|(_, cells)| cells[r].as_str())));
    }
    if let Some(n) = &note {
        lines.push(n.clone());
    }

    TableContext {
        text: lines.join("\n"),
        rows_rendered: rows_used,
        truncated: note.is_some() || cell_clipped,
        elided_columns: table.columns[kept..].iter().map(|c| c.header.clone()).collect(),
    }
}

fn elision_note(elided: &[(String, Vec<String>)], total: usize, max_chars: usize) -> String {
    if elided.is_empty() {
        let long = "[truncated: rows or cells shortened to fit]";
        return if long.len() <= max_chars { long } else { "[truncated]" }.to_string();
    }
    let prefix = format!("[truncated: {} of {} columns elided:", elided.len(), total);
    let mut note = prefix.clone();
    for (i, (h, _)) in elided.iter().enumerate() {
        let piece = if i == 0 { format!(" {h}") } else { format!(", {h}") };
        let rest = elided.len() - i - 1;
        // Leave room for a "(+N more)" tail when this is not the last header.
        let tail_room = if rest > 0 { format!(" (+{rest} more)]").len() } else { 1 };
        if note.chars().count() + piece.chars().count() + tail_room > max_chars && max_chars != usize::MAX {
            note.push_str(&format!(" (+{} more)]", elided.len() - i));
            return note;
        }
        note.push_str(&piece);
    }
    note.push(']');
    note
}
