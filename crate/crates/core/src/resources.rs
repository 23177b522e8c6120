//! Concept resources: small pipe-separated tables from which probe sentences
//! are generated.
//!
//! On disk a catalog is a directory with one `*.psv` file per table:
//!
//! ```text
//! # source: free-text provenance
//! capital | country
//! Athens | Greece
//! Cairo | Egypt | #tags: kind=capital
//! ```
//!
//! The first non-comment line is the schema header. Data rows may end with a
//! `#tags:` column holding comma-separated `key=value` pairs. Blank lines and
//! lines starting with `#` are skipped; a `# source:` comment sets the
//! table's provenance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

/// File extension of resource tables.
pub const TABLE_EXTENSION: &str = "psv";

const TAGS_PREFIX: &str = "#tags:";

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no resource tables found in {0}")]
    MissingFile(PathBuf),
    #[error("table `{table}` has no schema header")]
    MissingHeader { table: String },
    #[error("table `{table}` line {line}: expected {expected} slots, found {found}")]
    Arity {
        table: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("table `{table}` line {line}: duplicate of the tuple on line {first_line}")]
    Duplicate {
        table: String,
        line: usize,
        first_line: usize,
    },
    #[error("table `{table}` has no rows")]
    EmptyTable { table: String },
    #[error("table `{table}` line {line}: empty entry")]
    EmptyEntry { table: String, line: usize },
    #[error("table `{table}` line {line}: malformed tag `{tag}`")]
    BadTag {
        table: String,
        line: usize,
        tag: String,
    },
}

/// Error for [`normalize_entry`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("entry is empty after normalization")]
pub struct EmptyEntry;

/// Trims, collapses whitespace runs to one space and drops control
/// characters. Casing is preserved.
pub fn normalize_entry(raw: &str) -> Result<String, EmptyEntry> {
    let normalized = collapse(raw);
    if normalized.is_empty() {
        Err(EmptyEntry)
    } else {
        Ok(normalized)
    }
}

/// Same as [`normalize_entry`] but returns an empty string instead of an error.
pub(crate) fn collapse(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_control() {
            continue;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

/// One row of a resource table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptTuple {
    pub slots: Vec<String>,
    pub tags: BTreeMap<String, String>,
}

impl ConceptTuple {
    pub fn new<S: Into<String>>(slots: impl IntoIterator<Item = S>) -> Self {
        Self {
            slots: slots.into_iter().map(Into::into).collect(),
            tags: BTreeMap::new(),
        }
    }

    pub fn with_tag(mut self, key: &str, value: &str) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceTable {
    pub name: String,
    pub schema: Vec<String>,
    pub provenance: String,
    pub rows: Vec<ConceptTuple>,
}

impl ResourceTable {
    pub fn slot_index(&self, slot: &str) -> Option<usize> {
        self.schema.iter().position(|s| s == slot)
    }

    /// Validates and builds a table from already-split rows. Line numbers in
    /// errors are 1-based row positions.
    pub fn from_rows(
        name: &str,
        schema: Vec<String>,
        rows: Vec<ConceptTuple>,
    ) -> Result<Self, ResourceError> {
        let numbered = rows.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect();
        build_table(name, schema, String::new(), numbered)
    }
}

/// A validated, immutable set of resource tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceCatalog {
    tables: BTreeMap<String, ResourceTable>,
    snapshot_id: String,
}

impl ResourceCatalog {
    pub fn from_tables(tables: impl IntoIterator<Item = ResourceTable>) -> Self {
        let tables: BTreeMap<_, _> = tables.into_iter().map(|t| (t.name.clone(), t)).collect();
        let snapshot_id = snapshot_hash(&tables);
        Self {
            tables,
            snapshot_id,
        }
    }

    pub fn table(&self, name: &str) -> Option<&ResourceTable> {
        self.tables.get(name)
    }

    pub fn tables(&self) -> impl Iterator<Item = &ResourceTable> {
        self.tables.values()
    }

    pub fn snapshot_id(&self) -> &str {
        &self.snapshot_id
    }
}

/// Loads every `*.psv` table in `dir`.
pub fn load_catalog(dir: &Path) -> Result<ResourceCatalog, ResourceError> {
    let io_err = |source| ResourceError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(TABLE_EXTENSION) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(ResourceError::MissingFile(dir.to_path_buf()));
    }
    paths.sort();

    let mut tables = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|source| ResourceError::Io {
            path: path.clone(),
            source,
        })?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        tables.push(parse_table(&name, &text)?);
    }
    Ok(ResourceCatalog::from_tables(tables))
}

/// Parses one table in the resource file format.
pub fn parse_table(name: &str, text: &str) -> Result<ResourceTable, ResourceError> {
    let mut provenance = String::new();
    let mut schema: Option<Vec<String>> = None;
    let mut rows = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(source) = comment.trim_start().strip_prefix("source:") {
                provenance = collapse(source);
            }
            continue;
        }
        let (cells, tags) = split_row(name, line, trimmed)?;
        match &schema {
            None => {
                if !tags.is_empty() {
                    return Err(ResourceError::BadTag {
                        table: name.to_string(),
                        line,
                        tag: "tags on schema header".into(),
                    });
                }
                schema = Some(cells);
            }
            Some(_) => rows.push((line, ConceptTuple { slots: cells, tags })),
        }
    }

    let schema = schema.ok_or_else(|| ResourceError::MissingHeader {
        table: name.to_string(),
    })?;
    build_table(name, schema, provenance, rows)
}

fn split_row(
    table: &str,
    line: usize,
    text: &str,
) -> Result<(Vec<String>, BTreeMap<String, String>), ResourceError> {
    let mut cells = Vec::new();
    let mut tags = BTreeMap::new();
    for cell in text.split('|') {
        let cell = cell.trim();
        if let Some(tag_list) = cell.strip_prefix(TAGS_PREFIX) {
            for pair in tag_list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let bad = || ResourceError::BadTag {
                    table: table.to_string(),
                    line,
                    tag: pair.to_string(),
                };
                let (key, value) = pair.split_once('=').ok_or_else(bad)?;
                let key = normalize_entry(key).map_err(|_| bad())?;
                let value = normalize_entry(value).map_err(|_| bad())?;
                tags.insert(key, value);
            }
            continue;
        }
        let value = normalize_entry(cell).map_err(|_| ResourceError::EmptyEntry {
            table: table.to_string(),
            line,
        })?;
        cells.push(value);
    }
    Ok((cells, tags))
}

fn build_table(
    name: &str,
    schema: Vec<String>,
    provenance: String,
    rows: Vec<(usize, ConceptTuple)>,
) -> Result<ResourceTable, ResourceError> {
    if rows.is_empty() {
        return Err(ResourceError::EmptyTable {
            table: name.to_string(),
        });
    }
    let mut seen: BTreeMap<&[String], usize> = BTreeMap::new();
    for (line, tuple) in &rows {
        if tuple.slots.len() != schema.len() {
            return Err(ResourceError::Arity {
                table: name.to_string(),
                line: *line,
                expected: schema.len(),
                found: tuple.slots.len(),
            });
        }
        if tuple.slots.iter().any(|s| s.is_empty()) {
            return Err(ResourceError::EmptyEntry {
                table: name.to_string(),
                line: *line,
            });
        }
        if let Some(first_line) = seen.insert(&tuple.slots, *line) {
            return Err(ResourceError::Duplicate {
                table: name.to_string(),
                line: *line,
                first_line,
            });
        }
    }
    Ok(ResourceTable {
        name: name.to_string(),
        schema,
        provenance,
        rows: rows.into_iter().map(|(_, t)| t).collect(),
    })
}

fn snapshot_hash(tables: &BTreeMap<String, ResourceTable>) -> String {
    // Length-prefixed fields so that no two catalogs share an encoding.
    fn field(h: &mut Sha256, s: &str) {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    let mut h = Sha256::new();
    for table in tables.values() {
        field(&mut h, &table.name);
        h.update((table.schema.len() as u64).to_le_bytes());
        for col in &table.schema {
            field(&mut h, col);
        }
        h.update((table.rows.len() as u64).to_le_bytes());
        for row in &table.rows {
            for slot in &row.slots {
                field(&mut h, slot);
            }
            h.update((row.tags.len() as u64).to_le_bytes());
            for (k, v) in &row.tags {
                field(&mut h, k);
                field(&mut h, v);
            }
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_normalize(raw: &str) -> String {
        // Split into words on whitespace after deleting non-whitespace controls.
        let cleaned: String = raw
            .chars()
            .filter(|c| c.is_whitespace() || !c.is_control())
            .collect();
        cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_entry("  Athens ").unwrap(), "Athens");
        assert_eq!(normalize_entry("New  York").unwrap(), "New York");
        assert_eq!(normalize_entry("a\u{7}b\tc\n").unwrap(), "ab c");
        assert_eq!(normalize_entry(" \t\u{0} "), Err(EmptyEntry));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn normalize_is_idempotent_and_shrinking(raw in "[ a-zA-Z\t\n\u{0}-\u{1f}\u{a0}é]{0,40}") {
            let once = collapse(&raw);
            prop_assert_eq!(&once, &reference_normalize(&raw));
            prop_assert_eq!(collapse(&once), once.clone());
            prop_assert!(once.chars().count() <= raw.chars().count());
        }
    }

    #[test]
    fn parses_rows_and_tags() {
        let text = "# source: test\ncapital | country\nAthens | Greece\n\nOslo |  Norway | #tags: kind=capital, article=an\n";
        let t = parse_table("capitals", text).unwrap();
        assert_eq!(t.provenance, "test");
        assert_eq!(t.schema, vec!["capital", "country"]);
        assert_eq!(t.rows[0], ConceptTuple::new(["Athens", "Greece"]));
        assert_eq!(t.rows[1].tag("kind"), Some("capital"));
        assert_eq!(t.rows[1].tag("article"), Some("an"));
    }

    #[test]
    fn rejects_arity_mismatch_with_line() {
        let err = parse_table("t", "a | b\nx | y\nz\n").unwrap_err();
        assert!(matches!(err, ResourceError::Arity { line: 3, expected: 2, found: 1, .. }));
    }

    #[test]
    fn rejects_duplicates_after_normalization() {
        let err = parse_table("t", "a | b\nNew York | x\nNew   York | x\n").unwrap_err();
        assert!(matches!(err, ResourceError::Duplicate { line: 3, first_line: 2, .. }));
    }

    #[test]
    fn rejects_empty_table_and_entry() {
        assert!(matches!(
            parse_table("t", "a | b\n").unwrap_err(),
            ResourceError::EmptyTable { .. }
        ));
        assert!(matches!(
            parse_table("t", "a | b\nx |   \n").unwrap_err(),
            ResourceError::EmptyEntry { line: 2, .. }
        ));
        assert!(matches!(
            parse_table("t", "a | b\nx | y | #tags: article\n").unwrap_err(),
            ResourceError::BadTag { line: 2, .. }
        ));
    }

    #[test]
    fn load_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("capitals.psv"), "capital | country\nAthens | Greece\nCairo | Egypt\n").unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let a = load_catalog(dir.path()).unwrap();
        let b = load_catalog(dir.path()).unwrap();
        assert_eq!(a.tables().count(), 1);
        assert_eq!(a.table("capitals").unwrap().rows.len(), 2);
        assert_eq!(a.table("capitals").unwrap().rows[0].slots, vec!["Athens", "Greece"]);
        assert_eq!(a.snapshot_id(), b.snapshot_id());
        assert_eq!(a, b);

        fs::write(dir.path().join("capitals.psv"), "capital | country\nAthens | Greece\nCairo | Egypt | #tags: kind=capital\n").unwrap();
        let c = load_catalog(dir.path()).unwrap();
        assert_ne!(a.snapshot_id(), c.snapshot_id());
    }

    #[test]
    fn missing_directory_or_tables() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_catalog(dir.path()).unwrap_err(), ResourceError::MissingFile(_)));
        assert!(matches!(
            load_catalog(&dir.path().join("nope")).unwrap_err(),
            ResourceError::Io { .. }
        ));
    }
}
