use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::template::{expand_template, template_hash, ExpandError, Expansion, Rejection, Template};
use super::{count_masks, DatasetKind, InconsistentPair, ProbeSentence, SemanticSentence, Subset};
use crate::resources::{collapse, ResourceCatalog};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("template `{id}` belongs to the {found} dataset, expected {expected}")]
    WrongTemplate {
        id: String,
        expected: DatasetKind,
        found: DatasetKind,
    },
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error("subset counts {found:?} disagree with the counting pass {expected:?}")]
    CountMismatch {
        expected: BTreeMap<Subset, usize>,
        found: BTreeMap<Subset, usize>,
    },
}

fn malformed(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset: DatasetKind,
    pub snapshot_id: String,
    pub template_hash: String,
    /// One entry per subset of the dataset, zeros included.
    pub counts: BTreeMap<Subset, usize>,
}

impl DatasetManifest {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.counts.get(&subset).copied().unwrap_or(0)
    }

    fn counts_field(&self) -> String {
        self.counts
            .iter()
            .map(|(s, n)| format!("{s}={n}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    fn parse_counts(field: &str, kind: DatasetKind) -> Result<BTreeMap<Subset, usize>, String> {
        let mut counts = BTreeMap::new();
        for part in field.split(',').filter(|p| !p.is_empty()) {
            let (name, n) = part.split_once('=').ok_or_else(|| format!("bad count entry `{part}`"))?;
            let subset: Subset = name.parse()?;
            if subset.dataset() != kind {
                return Err(format!("subset `{subset}` does not belong to the {kind} dataset"));
            }
            let n = n.parse().map_err(|_| format!("bad count `{n}`"))?;
            counts.insert(subset, n);
        }
        Ok(counts)
    }
}

fn empty_counts(kind: DatasetKind) -> BTreeMap<Subset, usize> {
    kind.subsets().iter().map(|s| (*s, 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dataset {
    Inconsistent {
        manifest: DatasetManifest,
        pairs: Vec<InconsistentPair>,
    },
    Semantic {
        manifest: DatasetManifest,
        sentences: Vec<SemanticSentence>,
    },
}

impl Dataset {
    /// Builds a dataset from items, computing the subset counts.
    pub fn from_pairs(snapshot_id: &str, template_hash: &str, pairs: Vec<InconsistentPair>) -> Self {
        let mut counts = empty_counts(DatasetKind::Inconsistent);
        for p in &pairs {
            *counts.entry(p.subset).or_default() += 1;
        }
        Dataset::Inconsistent {
            manifest: DatasetManifest {
                dataset: DatasetKind::Inconsistent,
                snapshot_id: snapshot_id.to_string(),
                template_hash: template_hash.to_string(),
                counts,
            },
            pairs,
        }
    }

    pub fn from_sentences(snapshot_id: &str, template_hash: &str, sentences: Vec<SemanticSentence>) -> Self {
        let mut counts = empty_counts(DatasetKind::Semantic);
        for s in &sentences {
            *counts.entry(s.subset).or_default() += 1;
        }
        Dataset::Semantic {
            manifest: DatasetManifest {
                dataset: DatasetKind::Semantic,
                snapshot_id: snapshot_id.to_string(),
                template_hash: template_hash.to_string(),
                counts,
            },
            sentences,
        }
    }

    pub fn kind(&self) -> DatasetKind {
        self.manifest().dataset
    }

    pub fn manifest(&self) -> &DatasetManifest {
        match self {
            Dataset::Inconsistent { manifest, .. } | Dataset::Semantic { manifest, .. } => manifest,
        }
    }

    /// Number of items (pairs or sentences).
    pub fn len(&self) -> usize {
        match self {
            Dataset::Inconsistent { pairs, .. } => pairs.len(),
            Dataset::Semantic { sentences, .. } => sentences.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every masked sentence, pair members in `a`, `b` order.
    pub fn probe_sentences(&self) -> Vec<ProbeSentence> {
        match self {
            Dataset::Inconsistent { pairs, .. } => pairs
                .iter()
                .flat_map(|p| {
                    [
                        ProbeSentence::new(p.sentence_id_a(), p.sentence_a.clone()),
                        ProbeSentence::new(p.sentence_id_b(), p.sentence_b.clone()),
                    ]
                })
                .collect(),
            Dataset::Semantic { sentences, .. } => sentences
                .iter()
                .map(|s| ProbeSentence::new(s.sentence_id.clone(), s.text.clone()))
                .collect(),
        }
    }

    /// SHA-256 of the serialized dataset.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serialize_dataset(self).as_bytes()))
    }

    /// Short identifier derived from the content hash.
    pub fn dataset_id(&self) -> String {
        format!("{}-{}", self.kind(), &self.content_hash()[..12])
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub dataset: Dataset,
    pub rejected: Vec<Rejection>,
}

/// Builds the Inconsistent Dataset. Items are ordered by template id, then
/// by source row.
pub fn build_inconsistent_dataset(
    catalog: &ResourceCatalog,
    templates: &[Template],
) -> Result<BuildOutcome, DatasetError> {
    build(catalog, templates, DatasetKind::Inconsistent)
}

/// Builds the Semantic Dataset; ordering as for the Inconsistent Dataset.
pub fn build_semantic_dataset(
    catalog: &ResourceCatalog,
    templates: &[Template],
) -> Result<BuildOutcome, DatasetError> {
    build(catalog, templates, DatasetKind::Semantic)
}

fn build(catalog: &ResourceCatalog, templates: &[Template], kind: DatasetKind) -> Result<BuildOutcome, DatasetError> {
    if let Some(t) = templates.iter().find(|t| t.dataset != kind) {
        return Err(DatasetError::WrongTemplate {
            id: t.id.clone(),
            expected: kind,
            found: t.dataset,
        });
    }
    let mut ordered: Vec<&Template> = templates.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let expansions = ordered
        .par_iter()
        .map(|t| expand_template(t, catalog))
        .collect::<Result<Vec<_>, _>>()?;

    let hash = template_hash(ordered.iter().copied());
    let mut pairs = Vec::new();
    let mut sentences = Vec::new();
    let mut rejected = Vec::new();
    for expansion in expansions {
        match expansion {
            Expansion::Pairs { items, rejected: r } => {
                pairs.extend(items);
                rejected.extend(r);
            }
            Expansion::Sentences { items, rejected: r } => {
                sentences.extend(items);
                rejected.extend(r);
            }
        }
    }
    let dataset = match kind {
        DatasetKind::Inconsistent => Dataset::from_pairs(catalog.snapshot_id(), &hash, pairs),
        DatasetKind::Semantic => Dataset::from_sentences(catalog.snapshot_id(), &hash, sentences),
    };

    let expected = counting_pass(catalog, ordered.iter().copied(), &rejected, kind);
    if expected != dataset.manifest().counts {
        return Err(DatasetError::CountMismatch {
            expected,
            found: dataset.manifest().counts.clone(),
        });
    }
    Ok(BuildOutcome { dataset, rejected })
}

/// Expected subset sizes: source-table rows per template, minus the logged
/// rejections. Computed without expanding any template.
pub fn counting_pass<'a>(
    catalog: &ResourceCatalog,
    templates: impl IntoIterator<Item = &'a Template>,
    rejected: &[Rejection],
    kind: DatasetKind,
) -> BTreeMap<Subset, usize> {
    let mut counts = empty_counts(kind);
    let mut subset_of = BTreeMap::new();
    for t in templates {
        subset_of.insert(t.id.as_str(), t.subset);
        let rows = catalog.table(&t.source_table).map_or(0, |tab| tab.rows.len());
        *counts.entry(t.subset).or_default() += rows;
    }
    for r in rejected {
        if let Some(subset) = subset_of.get(r.template_id.as_str()) {
            if let Some(n) = counts.get_mut(subset) {
                *n = n.saturating_sub(1);
            }
        }
    }
    counts
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    dataset: DatasetKind,
    snapshot_id: String,
    template_hash: String,
    total: usize,
    counts: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    DatasetManifest(ManifestRecord),
    Pair(InconsistentPair),
    Sentence(SemanticSentence),
}

/// One JSON record per line: the manifest first, then the items in order.
pub fn serialize_dataset(dataset: &Dataset) -> String {
    let manifest = dataset.manifest();
    let mut out = String::new();
    let mut push = |record: &Record| {
        out.push_str(&serde_json::to_string(record).expect("dataset records always serialize"));
        out.push('\n');
    };
    push(&Record::DatasetManifest(ManifestRecord {
        dataset: manifest.dataset,
        snapshot_id: manifest.snapshot_id.clone(),
        template_hash: manifest.template_hash.clone(),
        total: manifest.total(),
        counts: manifest.counts_field(),
    }));
    match dataset {
        Dataset::Inconsistent { pairs, .. } => {
            for p in pairs {
                push(&Record::Pair(p.clone()));
            }
        }
        Dataset::Semantic { sentences, .. } => {
            for s in sentences {
                push(&Record::Sentence(s.clone()));
            }
        }
    }
    out
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text)
}

/// Parses and validates the line-oriented dataset format.
pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let mut manifest: Option<(usize, ManifestRecord)> = None;
    let mut pairs = Vec::new();
    let mut sentences = Vec::new();
    let mut ids = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(raw).map_err(|e| malformed(line, e.to_string()))?;
        let expected_kind = manifest.as_ref().map(|(_, m)| m.dataset);
        match record {
            Record::DatasetManifest(m) => {
                if manifest.is_some() {
                    return Err(malformed(line, "second dataset_manifest record"));
                }
                manifest = Some((line, m));
            }
            Record::Pair(p) => {
                if expected_kind != Some(DatasetKind::Inconsistent) {
                    return Err(malformed(line, "pair record outside an inconsistent dataset"));
                }
                validate_pair(&p).map_err(|m| malformed(line, m))?;
                if !ids.insert(p.pair_id.clone()) {
                    return Err(malformed(line, format!("duplicate id `{}`", p.pair_id)));
                }
                pairs.push(p);
            }
            Record::Sentence(s) => {
                if expected_kind != Some(DatasetKind::Semantic) {
                    return Err(malformed(line, "sentence record outside a semantic dataset"));
                }
                validate_sentence(&s).map_err(|m| malformed(line, m))?;
                if !ids.insert(s.sentence_id.clone()) {
                    return Err(malformed(line, format!("duplicate id `{}`", s.sentence_id)));
                }
                sentences.push(s);
            }
        }
    }

    let (line, m) = manifest.ok_or_else(|| malformed(1, "missing dataset_manifest record"))?;
    let dataset = match m.dataset {
        DatasetKind::Inconsistent => Dataset::from_pairs(&m.snapshot_id, &m.template_hash, pairs),
        DatasetKind::Semantic => Dataset::from_sentences(&m.snapshot_id, &m.template_hash, sentences),
    };
    let declared = DatasetManifest::parse_counts(&m.counts, m.dataset).map_err(|e| malformed(line, e))?;
    let actual = &dataset.manifest().counts;
    let declared_full: BTreeMap<_, _> = empty_counts(m.dataset).into_iter().chain(declared).collect();
    if &declared_full != actual || m.total != dataset.len() {
        return Err(malformed(
            line,
            format!(
                "manifest declares {} items ({}), file holds {} ({})",
                m.total,
                m.counts,
                dataset.len(),
                dataset.manifest().counts_field()
            ),
        ));
    }
    Ok(dataset)
}

fn validate_text(text: &str) -> Result<(), String> {
    if count_masks(text) != 1 {
        return Err(format!("`{text}` must contain exactly one [MASK]"));
    }
    if collapse(text) != text {
        return Err(format!("`{text}` is not whitespace-normalized"));
    }
    Ok(())
}

fn validate_pair(p: &InconsistentPair) -> Result<(), String> {
    if p.subset.dataset() != DatasetKind::Inconsistent {
        return Err(format!("subset `{}` is not an inconsistent subset", p.subset));
    }
    if p.pair_id.is_empty() || p.template_id.is_empty() {
        return Err("empty id".into());
    }
    validate_text(&p.sentence_a)?;
    validate_text(&p.sentence_b)?;
    if p.sentence_a == p.sentence_b {
        return Err("pair sentences are identical".into());
    }
    Ok(())
}

fn validate_sentence(s: &SemanticSentence) -> Result<(), String> {
    if s.subset.dataset() != DatasetKind::Semantic {
        return Err(format!("subset `{}` is not a semantic subset", s.subset));
    }
    if s.sentence_id.is_empty() || s.template_id.is_empty() {
        return Err("empty id".into());
    }
    validate_text(&s.text)?;
    if s.forbidden.is_empty() {
        return Err("forbidden list is empty".into());
    }
    let mut seen = HashSet::new();
    for w in &s.forbidden {
        if w.is_empty() || w.contains(' ') || collapse(w).to_lowercase() != *w {
            return Err(format!("forbidden word `{w}` is not a normalized lowercase word"));
        }
        if !seen.insert(w) {
            return Err(format!("forbidden word `{w}` listed twice"));
        }
    }
    Ok(())
}
