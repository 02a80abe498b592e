//! PII type taxonomy, sensitivity levels, and external label mapping.
//!
//! The default taxonomy ships as `data/taxonomy.json` and holds exactly 27
//! non-`none` types. Operators can swap in their own file; only the count is
//! checked by [`Taxonomy::load_default`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TAXONOMY_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TYPE_COUNT: usize = 27;

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.json");
const PRESIDIO_MAP: &str = include_str!("../data/presidio_map.json");
const GOOGLE_DLP_MAP: &str = include_str!("../data/google_dlp_map.json");

/// Identifier of a PII type, e.g. `email_address`. The distinguished value
/// `none` means "no type of interest".
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PiiTypeId(String);

impl PiiTypeId {
    pub const NONE: &'static str = "none";

    pub fn new(id: impl Into<String>) -> Self {
        PiiTypeId(id.into())
    }

    pub fn none() -> Self {
        PiiTypeId(Self::NONE.to_string())
    }

    pub fn is_none(&self) -> bool {
        self.0 == Self::NONE
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PiiTypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PiiTypeId {
    fn from(s: &str) -> Self {
        PiiTypeId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiType {
    pub id: PiiTypeId,
    pub display_name: String,
    pub description: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub examples: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct TaxonomyFile {
    schema_version: u32,
    types: Vec<PiiType>,
}

/// A closed set of PII types plus the implicit `none`.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    types: Vec<PiiType>,
    lookup: HashMap<String, usize>,
}

/// Lowercase, trim, strip wrapping quotes/backticks and trailing
/// punctuation, then fold spaces and hyphens into single underscores.
pub fn normalize_label(text: &str) -> String {
    let trimmed = text
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*'))
        .trim_end_matches(['.', ',', ';', ':', '!'])
        .trim();
    let mut out = String::with_capacity(trimmed.len());
    let mut last_us = false;
    for ch in trimmed.chars().flat_map(char::to_lowercase) {
        let ch = if ch.is_whitespace() || ch == '-' { '_' } else { ch };
        if ch == '_' {
            if !last_us && !out.is_empty() {
                out.push('_');
            }
            last_us = true;
        } else {
            out.push(ch);
            last_us = false;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

const NONE_ALIASES: &[&str] = &["none", "null", "n/a", "na", "no_type", "not_applicable"];

impl Taxonomy {
    pub fn new(types: Vec<PiiType>) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::SchemaViolation("taxonomy has no types".into()));
        }
        let mut lookup = HashMap::new();
        for (idx, ty) in types.iter().enumerate() {
            if ty.id.is_none() {
                return Err(Error::SchemaViolation(
                    "`none` is implicit and may not be listed as a type".into(),
                ));
            }
            let id = normalize_label(ty.id.as_str());
            if id != ty.id.as_str() {
                return Err(Error::SchemaViolation(format!(
                    "type id {:?} is not in normalized snake_case",
                    ty.id.as_str()
                )));
            }
            if lookup.insert(id, idx).is_some() {
                return Err(Error::SchemaViolation(format!(
                    "duplicate type id {}",
                    ty.id
                )));
            }
        }
        for (idx, ty) in types.iter().enumerate() {
            for alias in &ty.aliases {
                let key = normalize_label(alias);
                if NONE_ALIASES.contains(&key.as_str()) {
                    return Err(Error::SchemaViolation(format!(
                        "alias {alias:?} of {} collides with `none`",
                        ty.id
                    )));
                }
                match lookup.get(&key) {
                    Some(&other) if other != idx => {
                        return Err(Error::SchemaViolation(format!(
                            "alias {alias:?} of {} collides with {}",
                            ty.id, types[other].id
                        )));
                    }
                    _ => {
                        lookup.insert(key, idx);
                    }
                }
            }
        }
        Ok(Taxonomy { types, lookup })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TaxonomyFile =
            serde_json::from_str(text).map_err(|e| Error::json("taxonomy file", e))?;
        if file.schema_version != TAXONOMY_SCHEMA_VERSION {
            return Err(Error::SchemaViolation(format!(
                "unsupported taxonomy schema_version {}",
                file.schema_version
            )));
        }
        Self::new(file.types)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::from_json(&text)
    }

    /// The bundled 27-type taxonomy.
    pub fn load_default() -> Self {
        let tax = Self::from_json(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid");
        debug_assert_eq!(tax.len(), DEFAULT_TYPE_COUNT);
        tax
    }

    pub fn to_json(&self) -> String {
        let file = TaxonomyFile {
            schema_version: TAXONOMY_SCHEMA_VERSION,
            types: self.types.clone(),
        };
        serde_json::to_string_pretty(&file).expect("taxonomy serializes")
    }

    /// Number of non-`none` types.
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn types(&self) -> &[PiiType] {
        &self.types
    }

    pub fn get(&self, id: &str) -> Option<&PiiType> {
        self.lookup
            .get(id)
            .map(|&i| &self.types[i])
            .filter(|t| t.id.as_str() == id)
    }

    /// True for taxonomy members and for `none`.
    pub fn contains(&self, id: &PiiTypeId) -> bool {
        id.is_none() || self.get(id.as_str()).is_some()
    }

    /// All class ids including `none`, in taxonomy order with `none` last.
    pub fn class_ids(&self) -> Vec<PiiTypeId> {
        self.types
            .iter()
            .map(|t| t.id.clone())
            .chain(std::iter::once(PiiTypeId::none()))
            .collect()
    }

    /// Resolve free text into a member of the closed set.
    pub fn parse_type_label(&self, text: &str) -> Result<PiiTypeId> {
        let key = normalize_label(text);
        if NONE_ALIASES.contains(&key.as_str()) {
            return Ok(PiiTypeId::none());
        }
        self.lookup
            .get(&key)
            .map(|&i| self.types[i].id.clone())
            .ok_or_else(|| Error::UnknownLabel(text.to_string()))
    }
}

pub fn parse_type_label(text: &str, taxonomy: &Taxonomy) -> Result<PiiTypeId> {
    taxonomy.parse_type_label(text)
}

/// Four-level contextual sensitivity scale, totally ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityLevel {
    NonSensitive,
    ModerateSensitive,
    HighSensitive,
    SevereSensitive,
}

impl SensitivityLevel {
    pub const ALL: [SensitivityLevel; 4] = [
        SensitivityLevel::NonSensitive,
        SensitivityLevel::ModerateSensitive,
        SensitivityLevel::HighSensitive,
        SensitivityLevel::SevereSensitive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SensitivityLevel::NonSensitive => "non_sensitive",
            SensitivityLevel::ModerateSensitive => "moderate_sensitive",
            SensitivityLevel::HighSensitive => "high_sensitive",
            SensitivityLevel::SevereSensitive => "severe_sensitive",
        }
    }

    /// Level name without the `_sensitive` suffix.
    pub fn short_name(self) -> &'static str {
        match self {
            SensitivityLevel::NonSensitive => "non",
            SensitivityLevel::ModerateSensitive => "moderate",
            SensitivityLevel::HighSensitive => "high",
            SensitivityLevel::SevereSensitive => "severe",
        }
    }

    pub fn is_sensitive(self) -> bool {
        binarize(self)
    }
}

impl fmt::Display for SensitivityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensitivityLevel {
    type Err = Error;

    /// Case-insensitive; accepts the `_sensitive` suffix or not, and `low`
    /// as an alias for non-sensitive.
    fn from_str(s: &str) -> Result<Self> {
        let norm = normalize_label(s);
        let stem = norm.strip_suffix("_sensitive").unwrap_or(&norm);
        match stem {
            "non" | "not" | "low" | "none" => Ok(SensitivityLevel::NonSensitive),
            "moderate" | "medium" => Ok(SensitivityLevel::ModerateSensitive),
            "high" => Ok(SensitivityLevel::HighSensitive),
            "severe" => Ok(SensitivityLevel::SevereSensitive),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

impl<'de> Deserialize<'de> for SensitivityLevel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| serde::de::Error::custom(format!("unknown sensitivity level {s:?}")))
    }
}

/// Sensitive iff the level is moderate or above.
pub fn binarize(level: SensitivityLevel) -> bool {
    level >= SensitivityLevel::ModerateSensitive
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExternalMapFile {
    schema_version: u32,
    tool: String,
    entries: BTreeMap<String, String>,
}

/// Result of mapping a third-party detector label into the taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExternalMapping {
    Known(PiiTypeId),
    /// The label has no entry; treated as `none`.
    Unmapped { label: String },
}

impl ExternalMapping {
    pub fn type_id(&self) -> PiiTypeId {
        match self {
            ExternalMapping::Known(id) => id.clone(),
            ExternalMapping::Unmapped { .. } => PiiTypeId::none(),
        }
    }

    pub fn warning(&self) -> Option<String> {
        match self {
            ExternalMapping::Known(_) => None,
            ExternalMapping::Unmapped { label } => {
                Some(format!("unmapped external label {label:?}; treated as none"))
            }
        }
    }
}

/// Label map for an external detection tool (Presidio, Google DLP, ...).
#[derive(Debug, Clone)]
pub struct ExternalTypeMap {
    pub tool: String,
    entries: BTreeMap<String, PiiTypeId>,
}

impl ExternalTypeMap {
    /// Parses a map file and checks every target against `taxonomy`.
    pub fn from_json(text: &str, taxonomy: &Taxonomy) -> Result<Self> {
        let file: ExternalMapFile =
            serde_json::from_str(text).map_err(|e| Error::json("external type map", e))?;
        if file.schema_version != TAXONOMY_SCHEMA_VERSION {
            return Err(Error::SchemaViolation(format!(
                "unsupported external map schema_version {}",
                file.schema_version
            )));
        }
        let mut entries = BTreeMap::new();
        for (label, target) in file.entries {
            let id = PiiTypeId::new(target);
            if !taxonomy.contains(&id) {
                return Err(Error::SchemaViolation(format!(
                    "{}: label {label} maps to unknown type {id}",
                    file.tool
                )));
            }
            entries.insert(label, id);
        }
        Ok(ExternalTypeMap {
            tool: file.tool,
            entries,
        })
    }

    pub fn load(path: &Path, taxonomy: &Taxonomy) -> Result<Self> {
        Self::from_json(&read_text(path)?, taxonomy)
    }

    pub fn presidio(taxonomy: &Taxonomy) -> Result<Self> {
        Self::from_json(PRESIDIO_MAP, taxonomy)
    }

    pub fn google_dlp(taxonomy: &Taxonomy) -> Result<Self> {
        Self::from_json(GOOGLE_DLP_MAP, taxonomy)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn targets(&self) -> impl Iterator<Item = &PiiTypeId> {
        self.entries.values()
    }
}

/// Maps `label` from `tool` into the taxonomy. Unknown labels resolve to
/// `none` and log a warning.
pub fn map_external_type(tool: &str, label: &str, map: &ExternalTypeMap) -> Result<ExternalMapping> {
    if map.tool != tool {
        return Err(Error::Config(format!(
            "external map is for {:?}, not {tool:?}",
            map.tool
        )));
    }
    let mapping = match map.entries.get(label.trim()) {
        Some(id) => ExternalMapping::Known(id.clone()),
        None => ExternalMapping::Unmapped {
            label: label.to_string(),
        },
    };
    if let Some(w) = mapping.warning() {
        log::warn!("{tool}: {w}");
    }
    Ok(mapping)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(String::from_utf8_lossy(&bytes).into_owned()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::FileNotFound(path.to_path_buf()))
        }
        Err(e) => Err(Error::io(format!("reading {}", path.display()), e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_taxonomy_has_27_types() {
        let tax = Taxonomy::load_default();
        assert_eq!(tax.len(), 27);
        assert!(tax.types().iter().all(|t| !t.id.is_none()));
        assert_eq!(tax.class_ids().len(), 28);
    }

    #[test]
    fn parse_normalizes_case_and_whitespace() {
        let tax = Taxonomy::load_default();
        assert_eq!(tax.parse_type_label("Email_Address ").unwrap().as_str(), "email_address");
        assert!(tax.parse_type_label("none").unwrap().is_none());
        assert!(tax.parse_type_label("None").unwrap().is_none());
        assert_eq!(tax.parse_type_label("EMAIL ADDRESS").unwrap().as_str(), "email_address");
        assert_eq!(tax.parse_type_label("`e-mail`").unwrap().as_str(), "email_address");
    }

    #[test]
    fn unknown_label_is_an_error() {
        let tax = Taxonomy::load_default();
        assert!(matches!(tax.parse_type_label("banana"), Err(Error::UnknownLabel(t)) if t == "banana"));
        assert!(tax.parse_type_label("").is_err());
    }

    #[test]
    fn every_id_and_alias_round_trips() {
        let tax = Taxonomy::load_default();
        for ty in tax.types() {
            assert_eq!(tax.parse_type_label(ty.id.as_str()).unwrap(), ty.id);
            assert_eq!(tax.parse_type_label(&ty.id.as_str().to_uppercase()).unwrap(), ty.id);
            for alias in &ty.aliases {
                assert_eq!(tax.parse_type_label(alias).unwrap(), ty.id, "alias {alias}");
                assert_eq!(
                    tax.parse_type_label(&alias.to_uppercase()).unwrap(),
                    ty.id,
                    "alias {alias}"
                );
            }
        }
    }

    #[test]
    fn taxonomy_rejects_duplicates_and_alias_collisions() {
        let ty = |id: &str, aliases: &[&str]| PiiType {
            id: PiiTypeId::new(id),
            display_name: id.into(),
            description: String::new(),
            aliases: aliases.iter().map(|s| s.to_string()).collect(),
            examples: vec![],
        };
        assert!(Taxonomy::new(vec![ty("a", &[]), ty("a", &[])]).is_err());
        assert!(Taxonomy::new(vec![ty("a", &["x"]), ty("b", &["x"])]).is_err());
        assert!(Taxonomy::new(vec![ty("a", &["null"])]).is_err());
        assert!(Taxonomy::new(vec![ty("none", &[])]).is_err());
        assert!(Taxonomy::new(vec![ty("Bad Id", &[])]).is_err());
    }

    #[test]
    fn taxonomy_file_round_trips() {
        let tax = Taxonomy::load_default();
        let again = Taxonomy::from_json(&tax.to_json()).unwrap();
        assert_eq!(again.types(), tax.types());
    }

    #[test]
    fn level_parsing() {
        use SensitivityLevel::*;
        assert_eq!("non_sensitive".parse::<SensitivityLevel>().unwrap(), NonSensitive);
        assert_eq!("LOW".parse::<SensitivityLevel>().unwrap(), NonSensitive);
        assert_eq!("Moderate".parse::<SensitivityLevel>().unwrap(), ModerateSensitive);
        assert_eq!("high_sensitive".parse::<SensitivityLevel>().unwrap(), HighSensitive);
        assert_eq!(" severe ".parse::<SensitivityLevel>().unwrap(), SevereSensitive);
        assert!("critical".parse::<SensitivityLevel>().is_err());
    }

    #[test]
    fn binarize_matches_grouping() {
        use SensitivityLevel::*;
        assert!(!binarize(NonSensitive));
        assert!(binarize(ModerateSensitive));
        assert!(binarize(HighSensitive));
        assert!(binarize(SevereSensitive));
        for w in SensitivityLevel::ALL.windows(2) {
            assert!(w[0] < w[1]);
            assert!(binarize(w[0]) <= binarize(w[1]));
        }
    }

    #[test]
    fn presidio_mapping() {
        let tax = Taxonomy::load_default();
        let map = ExternalTypeMap::presidio(&tax).unwrap();
        let got = map_external_type("presidio", "EMAIL_ADDRESS", &map).unwrap();
        assert_eq!(got.type_id().as_str(), "email_address");
        let got = map_external_type("presidio", "US_SSN", &map).unwrap();
        assert_eq!(got.type_id().as_str(), "national_id");
        let got = map_external_type("presidio", "UNKNOWN_XYZ", &map).unwrap();
        assert!(got.type_id().is_none());
        assert!(got.warning().is_some());
        assert!(map_external_type("google_dlp", "EMAIL_ADDRESS", &map).is_err());
    }

    #[test]
    fn bundled_maps_target_taxonomy_ids() {
        let tax = Taxonomy::load_default();
        for map in [ExternalTypeMap::presidio(&tax).unwrap(), ExternalTypeMap::google_dlp(&tax).unwrap()] {
            assert!(!map.is_empty());
            assert!(map.targets().all(|t| tax.contains(t)));
        }
    }

    #[test]
    fn external_map_rejects_unknown_target() {
        let tax = Taxonomy::load_default();
        let bad = r#"{"schema_version":1,"tool":"x","entries":{"FOO":"not_a_type"}}"#;
        assert!(matches!(ExternalTypeMap::from_json(bad, &tax), Err(Error::SchemaViolation(_))));
    }
}
