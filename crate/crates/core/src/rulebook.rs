//! Country-keyed sensitivity rulebooks: loading, validation, extraction from
//! policy documents, and retrieval with a `default` fallback.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::gateway::{Expectation, Gateway, ModelRequest};
use crate::table::normalize_country;
use crate::taxonomy::SensitivityLevel;

pub const RULEBOOK_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_KEY: &str = "default";
pub const AUTHORED: &str = "authored";
const DEFAULT_RULEBOOK: &str = include_str!("../data/rulebooks/default.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub id: String,
    pub country: Option<String>,
    pub title: String,
    pub body: String,
    pub source_uri: Option<String>,
}

impl PolicyDocument {
    pub fn new(id: &str, country: Option<&str>, title: &str, body: &str) -> Result<Self> {
        if body.trim().is_empty() {
            return Err(Error::SchemaViolation("body".into()));
        }
        let country = match country {
            Some(c) => Some(normalize_country(c).ok_or_else(|| Error::SchemaViolation(format!("country {c:?}")))?),
            None => None,
        };
        Ok(PolicyDocument {
            id: id.to_string(),
            country,
            title: title.to_string(),
            body: body.to_string(),
            source_uri: None,
        })
    }

    /// Reads a plain-text document; the file stem becomes the id and the
    /// first non-blank line the title.
    pub fn from_file(path: &Path, country: Option<&str>) -> Result<Self> {
        let body = crate::taxonomy::read_text(path)?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let title = body.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string();
        let mut doc = Self::new(&id, country, &title, &body)?;
        doc.source_uri = Some(path.display().to_string());
        Ok(doc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub text: String,
    pub provenance: String,
    pub level: SensitivityLevel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleBook {
    pub country: String,
    pub schema_version: u32,
    pub extracted_from: String,
    pub rules: BTreeMap<SensitivityLevel, Vec<Rule>>,
}

fn level_keys(level: SensitivityLevel) -> &'static [&'static str] {
    match level {
        SensitivityLevel::NonSensitive => &["non_sensitive", "non", "low", "low_sensitive"],
        SensitivityLevel::ModerateSensitive => &["moderate_sensitive", "moderate"],
        SensitivityLevel::HighSensitive => &["high_sensitive", "high"],
        SensitivityLevel::SevereSensitive => &["severe_sensitive", "severe"],
    }
}

fn level_for_key(key: &str) -> Option<SensitivityLevel> {
    SensitivityLevel::ALL.into_iter().find(|l| level_keys(*l).contains(&key))
}

fn str_field<'a>(obj: &'a Map<String, Value>, field: &str, at: &str) -> Result<&'a str> {
    obj.get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::SchemaViolation(format!("{at}.{field}")))
}

impl RuleBook {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::json("rulebook", e))?;
        Self::from_value(&value)
    }

    fn from_value(value: &Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::SchemaViolation("rulebook".into()))?;
        let country_raw = str_field(obj, "country", "rulebook")?;
        let country = if country_raw.eq_ignore_ascii_case(DEFAULT_KEY) {
            DEFAULT_KEY.to_string()
        } else {
            normalize_country(country_raw).ok_or_else(|| Error::SchemaViolation("country".into()))?
        };
        let schema_version = obj
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::SchemaViolation("schema_version".into()))? as u32;
        if schema_version != RULEBOOK_SCHEMA_VERSION {
            return Err(Error::SchemaViolation(format!("schema_version {schema_version}")));
        }
        let extracted_from = match obj.get("extracted_from") {
            None | Some(Value::Null) => AUTHORED.to_string(),
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(_) => return Err(Error::SchemaViolation("extracted_from".into())),
        };
        let rules_obj = obj
            .get("rules")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::SchemaViolation("rules".into()))?;
        for key in rules_obj.keys() {
            if level_for_key(key).is_none() {
                return Err(Error::SchemaViolation(format!("rules.{key}")));
            }
        }
        let mut rules = BTreeMap::new();
        for level in SensitivityLevel::ALL {
            let present: Vec<&str> = level_keys(level).iter().copied().filter(|k| rules_obj.contains_key(*k)).collect();
            let key = match present.as_slice() {
                [] => return Err(Error::SchemaViolation(level.short_name().to_string())),
                [k] => *k,
                _ => return Err(Error::SchemaViolation(format!("{}: duplicate level keys", level.short_name()))),
            };
            let list = rules_obj[key]
                .as_array()
                .ok_or_else(|| Error::SchemaViolation(level.short_name().to_string()))?;
            let mut parsed = Vec::with_capacity(list.len());
            for (i, entry) in list.iter().enumerate() {
                let at = format!("rules.{key}[{i}]");
                let e = entry.as_object().ok_or_else(|| Error::SchemaViolation(at.clone()))?;
                let rule = Rule {
                    id: str_field(e, "id", &at)?.to_string(),
                    text: str_field(e, "text", &at)?.to_string(),
                    provenance: str_field(e, "provenance", &at)?.to_string(),
                    level,
                };
                if rule.id.trim().is_empty() || rule.text.trim().is_empty() || rule.provenance.trim().is_empty() {
                    return Err(Error::SchemaViolation(at));
                }
                parsed.push(rule);
            }
            rules.insert(level, parsed);
        }
        let book = RuleBook {
            country,
            schema_version,
            extracted_from,
            rules,
        };
        book.validate()?;
        Ok(book)
    }

    /// Unique rule ids; the default rulebook needs a rule at every level.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for rule in self.all_rules() {
            if !seen.insert(rule.id.as_str()) {
                return Err(Error::SchemaViolation(format!("duplicate rule id {}", rule.id)));
            }
        }
        if self.is_default() {
            for level in SensitivityLevel::ALL {
                if self.rules_at(level).is_empty() {
                    return Err(Error::SchemaViolation(format!(
                        "{}: default rulebook needs at least one rule per level",
                        level.short_name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::taxonomy::read_text(path)?)
            .map_err(|e| match e {
                Error::Json { source, .. } => Error::json(format!("rulebook {}", path.display()), source),
                other => other,
            })
    }

    pub fn load_default() -> Self {
        Self::from_json(DEFAULT_RULEBOOK).expect("bundled default rulebook is valid")
    }

    pub fn is_default(&self) -> bool {
        self.country == DEFAULT_KEY
    }

    pub fn rules_at(&self, level: SensitivityLevel) -> &[Rule] {
        self.rules.get(&level).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Rules ordered by level, then file order.
    pub fn all_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values().flatten()
    }

    pub fn rule(&self, id: &str) -> Option<&Rule> {
        self.all_rules().find(|r| r.id == id)
    }

    pub fn rule_count(&self) -> usize {
        self.rules.values().map(Vec::len).sum()
    }

    pub fn to_value(&self) -> Value {
        let mut rules = Map::new();
        for level in SensitivityLevel::ALL {
            let list: Vec<Value> = self
                .rules_at(level)
                .iter()
                .map(|r| json!({"id": r.id, "text": r.text, "provenance": r.provenance}))
                .collect();
            rules.insert(level.as_str().to_string(), Value::Array(list));
        }
        json!({
            "country": self.country,
            "schema_version": self.schema_version,
            "extracted_from": self.extracted_from,
            "rules": rules,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("rulebook serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        crate::gateway::write_atomic(path, text.as_bytes())
    }
}

impl Serialize for RuleBook {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_value().serialize(s)
    }
}

pub fn load_rulebook(path: &Path) -> Result<RuleBook> {
    RuleBook::load(path)
}

/// A set of rulebooks keyed by country, always holding `default`.
#[derive(Debug, Clone)]
pub struct RulebookStore {
    books: BTreeMap<String, RuleBook>,
}

impl RulebookStore {
    pub fn new(books: Vec<RuleBook>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for book in books {
            let key = book.country.clone();
            if map.insert(key.clone(), book).is_some() {
                return Err(Error::SchemaViolation(format!("two rulebooks for {key}")));
            }
        }
        if !map.contains_key(DEFAULT_KEY) {
            return Err(Error::StoreMissingDefault);
        }
        Ok(RulebookStore { books: map })
    }

    /// Loads every `*.json` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(dir.to_path_buf()),
            _ => Error::io(format!("reading {}", dir.display()), e),
        })?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                paths.push(path);
            }
        }
        paths.sort();
        let books = paths.iter().map(|p| RuleBook::load(p)).collect::<Result<Vec<_>>>()?;
        Self::new(books)
    }

    pub fn builtin() -> Self {
        Self::new(vec![RuleBook::load_default()]).expect("builtin store has a default")
    }

    pub fn countries(&self) -> impl Iterator<Item = &str> {
        self.books.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&RuleBook> {
        self.books.get(key)
    }

    /// Exact upper-case ISO match, else `default`.
    pub fn retrieve(&self, country: Option<&str>) -> &RuleBook {
        country
            .and_then(|c| {
                let key = c.trim().to_ascii_uppercase();
                (key != DEFAULT_KEY.to_ascii_uppercase()).then(|| self.books.get(&key)).flatten()
            })
            .unwrap_or_else(|| &self.books[DEFAULT_KEY])
    }
}

pub fn retrieve_rulebook<'a>(store: &'a RulebookStore, country: Option<&str>) -> &'a RuleBook {
    store.retrieve(country)
}

pub const EXTRACTION_SYSTEM_PROMPT: &str = "You extract data sensitivity rules from a data sharing policy. \
Reply with a single JSON object and nothing else.";

pub fn build_extraction_prompt(doc: &PolicyDocument) -> String {
    let mut p = format!("Document: {}\n", doc.title);
    if let Some(c) = &doc.country {
        p.push_str(&format!("Country: {c}\n"));
    }
    p.push_str("\n<<<DOCUMENT\n");
    p.push_str(doc.body.trim_end());
    p.push_str("\nDOCUMENT>>>\n\n");
    p.push_str(
        "List the data types the document assigns to each sensitivity level. Return JSON with exactly the keys \
\"low\", \"moderate\", \"high\" and \"severe\". Each value is a list of objects {\"text\": <the rule in one sentence>, \
\"provenance\": <the supporting passage copied verbatim from the document>}. Use an empty list for a level the \
document does not address.",
    );
    p
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
struct ExtractedRule {
    text: String,
    provenance: String,
}

enum ExtractionParseError {
    MissingLevel(SensitivityLevel),
    Invalid(String),
}

impl ExtractionParseError {
    fn message(&self) -> String {
        match self {
            ExtractionParseError::MissingLevel(l) => format!("missing level key {}", l.short_name()),
            ExtractionParseError::Invalid(m) => m.clone(),
        }
    }
}

/// Slice from the first `{` to the last `}`, which drops code fences and
/// chatter around a JSON object.
pub(crate) fn json_object_span(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

fn parse_extraction(text: &str) -> std::result::Result<Vec<(SensitivityLevel, Vec<ExtractedRule>)>, ExtractionParseError> {
    let span = json_object_span(text).ok_or_else(|| ExtractionParseError::Invalid("no JSON object found".into()))?;
    let value: Value = serde_json::from_str(span).map_err(|e| ExtractionParseError::Invalid(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ExtractionParseError::Invalid("expected a JSON object".into()))?;
    let mut out = Vec::new();
    for level in SensitivityLevel::ALL {
        let Some(list) = level_keys(level).iter().find_map(|k| obj.get(*k)) else {
            return Err(ExtractionParseError::MissingLevel(level));
        };
        let rules: Vec<ExtractedRule> = serde_json::from_value(list.clone()).map_err(|e| {
            ExtractionParseError::Invalid(format!("level {}: {e}", level.short_name()))
        })?;
        out.push((level, rules));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedRule {
    pub level: SensitivityLevel,
    pub text: String,
    pub provenance: String,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub rulebook: RuleBook,
    /// Rules whose provenance was not found in the document.
    pub dropped: Vec<DroppedRule>,
}

/// Asks a model for level-keyed rules and keeps only those whose provenance
/// passage occurs verbatim in the document body.
pub fn extract_rules(doc: &PolicyDocument, gateway: &Gateway, backend_id: &str) -> Result<Extraction> {
    let request = ModelRequest::new(
        backend_id,
        EXTRACTION_SYSTEM_PROMPT,
        build_extraction_prompt(doc),
        Expectation::StructuredRecord,
    );
    let levels = match gateway.complete_parsed(&request, |t| parse_extraction(t).map_err(|e| e.message())) {
        Ok((levels, _)) => levels,
        Err(Error::MalformedOutput {
            attempts,
            reason,
            last_output,
        }) => {
            return Err(match parse_extraction(&last_output) {
                Err(ExtractionParseError::MissingLevel(l)) => Error::SchemaViolation(l.short_name().to_string()),
                _ => Error::MalformedOutput {
                    attempts,
                    reason,
                    last_output,
                },
            })
        }
        Err(e) => return Err(e),
    };

    let country = doc.country.clone().unwrap_or_else(|| DEFAULT_KEY.to_string());
    let prefix = country.to_ascii_lowercase();
    let mut rules = BTreeMap::new();
    let mut dropped = Vec::new();
    for (level, extracted) in levels {
        let mut kept = Vec::new();
        for r in extracted {
            let provenance = r.provenance.trim();
            if provenance.is_empty() || r.text.trim().is_empty() || !doc.body.contains(provenance) {
                log::warn!(
                    "{}: dropping {} rule with unverifiable provenance: {:?}",
                    doc.id,
                    level.short_name(),
                    provenance
                );
                dropped.push(DroppedRule {
                    level,
                    text: r.text,
                    provenance: r.provenance,
                });
                continue;
            }
            kept.push(Rule {
                id: format!("{prefix}-{}-{}", level.short_name(), kept.len() + 1),
                text: r.text.trim().to_string(),
                provenance: provenance.to_string(),
                level,
            });
        }
        rules.insert(level, kept);
    }
    let rulebook = RuleBook {
        country,
        schema_version: RULEBOOK_SCHEMA_VERSION,
        extracted_from: doc.id.clone(),
        rules,
    };
    if rulebook.rule_count() == 0 {
        return Err(Error::ExtractionEmpty(doc.id.clone()));
    }
    rulebook.validate()?;
    Ok(Extraction { rulebook, dropped })
}
