//! Corpus manifests: one JSON record per line naming a table file and its
//! metadata. Relative paths resolve against the manifest's directory.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{load_table, normalize_country, ParseOptions, Table};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub country: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::io(format!("opening {}", path.display()), e),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| Error::ParseError {
                    line: i as u64 + 1,
                    reason: format!("{}: {e}", path.display()),
                })?;
            if entry.id.is_empty() {
                return Err(Error::ParseError {
                    line: i as u64 + 1,
                    reason: "manifest entry has an empty id".into(),
                });
            }
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            if let Some(g) = entry.gold_labels_path.as_mut() {
                if g.is_relative() {
                    *g = base.join(&*g);
                }
            }
            entries.push(entry);
        }
        Ok(Manifest {
            path: path.to_path_buf(),
            entries,
        })
    }

    /// Loads every table in manifest order.
    pub fn load_tables(&self, options: &ParseOptions) -> Result<Vec<Table>> {
        self.entries.iter().map(|e| e.load_table(options)).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

impl ManifestEntry {
    pub fn load_table(&self, options: &ParseOptions) -> Result<Table> {
        let mut table = load_table(&self.path, options)?;
        table.id = self.id.clone();
        let title = if self.title.is_empty() { &self.id } else { &self.title };
        Ok(table.with_metadata(
            title,
            &self.description,
            self.country.as_deref().and_then(normalize_country).as_deref(),
        ))
    }
}
