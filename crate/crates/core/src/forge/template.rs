use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::forbidden::{derive_forbidden, ForbiddenError, ForbiddenRule};
use super::{count_masks, DatasetKind, InconsistentPair, SemanticSentence, Subset, MASK};
use crate::resources::{collapse, ResourceCatalog, ResourceTable};

/// Tag holding the indefinite article of a tuple's head word.
pub const ARTICLE_TAG: &str = "article";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("template `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("template id `{0}` is defined twice")]
    DuplicateId(String),
}

impl TemplateError {
    fn invalid(id: &str, message: impl Into<String>) -> Self {
        TemplateError::Invalid {
            id: id.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExpandError {
    #[error("template `{template}`: unknown table `{table}`")]
    UnknownTable { template: String, table: String },
    #[error("template `{template}`: slot `{slot}` is not in table `{table}`")]
    UnknownSlot {
        template: String,
        table: String,
        slot: String,
    },
    #[error("template `{template}`: row {row} lacks the `{tag}` tag")]
    MissingTag {
        template: String,
        row: usize,
        tag: String,
    },
    #[error("template `{template}`: row {row} renders `{text}` without exactly one {MASK}")]
    MaskCount {
        template: String,
        row: usize,
        text: String,
    },
    #[error("template `{template}`: row {row} renders identical pair sentences")]
    IdenticalPair { template: String, row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Article {
    Lower,
    Capitalized,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot { name: String, article: Option<Article> },
}

/// A sentence pattern with `{slot}`, `{a:slot}` and `{A:slot}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    raw: String,
    pieces: Vec<Piece>,
}

impl Pattern {
    pub fn parse(raw: &str) -> Result<Self, String> {
        if count_masks(raw) != 1 {
            return Err(format!("pattern `{raw}` must contain exactly one {MASK}"));
        }
        let mut pieces = Vec::new();
        let mut rest = raw;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                pieces.push(Piece::Literal(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| format!("unclosed placeholder in `{raw}`"))?
                + open;
            let inner = &rest[open + 1..close];
            let (article, name) = match inner.split_once(':') {
                Some(("a", name)) => (Some(Article::Lower), name),
                Some(("A", name)) => (Some(Article::Capitalized), name),
                Some((prefix, _)) => return Err(format!("unknown placeholder prefix `{prefix}:`")),
                None => (None, inner),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(format!("bad slot name `{name}` in `{raw}`"));
            }
            pieces.push(Piece::Slot {
                name: name.to_string(),
                article,
            });
            rest = &rest[close + 1..];
        }
        if rest.contains('}') {
            return Err(format!("stray `}}` in `{raw}`"));
        }
        if !rest.is_empty() {
            pieces.push(Piece::Literal(rest.to_string()));
        }
        Ok(Self {
            raw: raw.to_string(),
            pieces,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot { name, .. } => Some(name.as_str()),
            Piece::Literal(_) => None,
        })
    }

    fn needs_article(&self) -> bool {
        self.pieces
            .iter()
            .any(|p| matches!(p, Piece::Slot { article: Some(_), .. }))
    }

    /// Fills the pattern. `lookup` returns the slot value and, when the slot
    /// takes an article, the article itself.
    fn render<'a>(
        &self,
        mut value: impl FnMut(&str) -> &'a str,
        article: Option<&str>,
    ) -> String {
        let mut out = String::with_capacity(self.raw.len() + 16);
        for piece in &self.pieces {
            match piece {
                Piece::Literal(text) => out.push_str(text),
                Piece::Slot { name, article: mode } => {
                    if let (Some(mode), Some(art)) = (mode, article) {
                        match mode {
                            Article::Lower => out.push_str(art),
                            Article::Capitalized => out.push_str(&capitalize(art)),
                        }
                        out.push(' ');
                    }
                    out.push_str(value(name));
                }
            }
        }
        collapse(&out)
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Fills a slot from a single-column table, cycling through its rows.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rotation {
    pub slot: String,
    pub table: String,
    #[serde(default)]
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub dataset: DatasetKind,
    pub subset: Subset,
    pub source_table: String,
    pub pattern_a: Pattern,
    pub pattern_b: Option<Pattern>,
    pub forbidden_rule: Option<ForbiddenRule>,
    pub rotate: Option<Rotation>,
}

impl Template {
    pub fn inconsistent(
        id: &str,
        subset: Subset,
        source_table: &str,
        pattern_a: &str,
        pattern_b: &str,
    ) -> Result<Self, TemplateError> {
        RawTemplate {
            id: id.into(),
            dataset: DatasetKind::Inconsistent,
            subset,
            source_table: source_table.into(),
            pattern_a: pattern_a.into(),
            pattern_b: Some(pattern_b.into()),
            forbidden_rule: None,
            rotate: None,
        }
        .validate()
    }

    pub fn semantic(
        id: &str,
        subset: Subset,
        source_table: &str,
        pattern: &str,
        rule: &str,
    ) -> Result<Self, TemplateError> {
        RawTemplate {
            id: id.into(),
            dataset: DatasetKind::Semantic,
            subset,
            source_table: source_table.into(),
            pattern_a: pattern.into(),
            pattern_b: None,
            forbidden_rule: Some(rule.into()),
            rotate: None,
        }
        .validate()
    }

    pub fn with_rotation(mut self, slot: &str, table: &str, offset: usize) -> Self {
        self.rotate = Some(Rotation {
            slot: slot.into(),
            table: table.into(),
            offset,
        });
        self
    }

    fn patterns(&self) -> impl Iterator<Item = &Pattern> {
        std::iter::once(&self.pattern_a).chain(self.pattern_b.as_ref())
    }

    /// Stable text form used for the inventory hash.
    fn canonical(&self) -> String {
        let rotate = self
            .rotate
            .as_ref()
            .map(|r| format!("{}<-{}+{}", r.slot, r.table, r.offset))
            .unwrap_or_default();
        [
            self.id.as_str(),
            self.dataset.as_str(),
            self.subset.as_str(),
            self.source_table.as_str(),
            self.pattern_a.as_str(),
            self.pattern_b.as_ref().map_or("", Pattern::as_str),
            &self.forbidden_rule.as_ref().map(|r| r.to_string()).unwrap_or_default(),
            &rotate,
        ]
        .join("\u{1f}")
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    id: String,
    dataset: DatasetKind,
    subset: Subset,
    source_table: String,
    pattern_a: String,
    pattern_b: Option<String>,
    forbidden_rule: Option<String>,
    rotate: Option<Rotation>,
}

impl RawTemplate {
    fn validate(self) -> Result<Template, TemplateError> {
        let id = self.id.trim().to_string();
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(TemplateError::invalid(&id, "ids use only ASCII letters, digits, `-` and `_`"));
        }
        if self.subset.dataset() != self.dataset {
            return Err(TemplateError::invalid(
                &id,
                format!("subset `{}` does not belong to the {} dataset", self.subset, self.dataset),
            ));
        }
        let pattern_a = Pattern::parse(&self.pattern_a).map_err(|m| TemplateError::invalid(&id, m))?;
        let pattern_b = self
            .pattern_b
            .as_deref()
            .map(Pattern::parse)
            .transpose()
            .map_err(|m| TemplateError::invalid(&id, m))?;
        let forbidden_rule = self
            .forbidden_rule
            .as_deref()
            .map(str::parse::<ForbiddenRule>)
            .transpose()
            .map_err(|m| TemplateError::invalid(&id, m))?;
        match self.dataset {
            DatasetKind::Inconsistent => {
                if pattern_b.is_none() {
                    return Err(TemplateError::invalid(&id, "inconsistent templates need pattern_b"));
                }
                if forbidden_rule.is_some() {
                    return Err(TemplateError::invalid(&id, "inconsistent templates take no forbidden_rule"));
                }
            }
            DatasetKind::Semantic => {
                if pattern_b.is_some() {
                    return Err(TemplateError::invalid(&id, "semantic templates take no pattern_b"));
                }
                if forbidden_rule.is_none() {
                    return Err(TemplateError::invalid(&id, "semantic templates need a forbidden_rule"));
                }
            }
        }
        if self.pattern_b.as_deref() == Some(self.pattern_a.as_str()) {
            return Err(TemplateError::invalid(&id, "pattern_a and pattern_b are identical"));
        }
        Ok(Template {
            id,
            dataset: self.dataset,
            subset: self.subset,
            source_table: self.source_table,
            pattern_a,
            pattern_b,
            forbidden_rule,
            rotate: self.rotate,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    #[allow(dead_code)]
    inventory_version: Option<String>,
    #[serde(default)]
    template: Vec<RawTemplate>,
}

/// Parses a TOML template file.
pub fn parse_templates(path: &Path, text: &str) -> Result<Vec<Template>, TemplateError> {
    let file: TemplateFile = toml::from_str(text).map_err(|e| TemplateError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    file.template.into_iter().map(RawTemplate::validate).collect()
}

/// Loads every `*.toml` template file in `dir`, sorted by template id.
pub fn load_templates(dir: &Path) -> Result<Vec<Template>, TemplateError> {
    let io_err = |source| TemplateError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut templates = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|source| TemplateError::Io {
            path: path.clone(),
            source,
        })?;
        templates.extend(parse_templates(&path, &text)?);
    }
    let mut ids = BTreeSet::new();
    for t in &templates {
        if !ids.insert(t.id.clone()) {
            return Err(TemplateError::DuplicateId(t.id.clone()));
        }
    }
    templates.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(templates)
}

/// Content hash of a template inventory, independent of input order.
pub fn template_hash<'a>(templates: impl IntoIterator<Item = &'a Template>) -> String {
    let mut lines: Vec<String> = templates.into_iter().map(Template::canonical).collect();
    lines.sort();
    let mut h = Sha256::new();
    for line in lines {
        h.update((line.len() as u64).to_le_bytes());
        h.update(line.as_bytes());
    }
    hex::encode(h.finalize())
}

/// A tuple dropped during expansion because its forbidden rule failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub template_id: String,
    /// 0-based row index in the source table.
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expansion {
    Pairs {
        items: Vec<InconsistentPair>,
        rejected: Vec<Rejection>,
    },
    Sentences {
        items: Vec<SemanticSentence>,
        rejected: Vec<Rejection>,
    },
}

impl Expansion {
    pub fn len(&self) -> usize {
        match self {
            Expansion::Pairs { items, .. } => items.len(),
            Expansion::Sentences { items, .. } => items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rejected(&self) -> &[Rejection] {
        match self {
            Expansion::Pairs { rejected, .. } | Expansion::Sentences { rejected, .. } => rejected,
        }
    }
}

pub(crate) fn item_id(template_id: &str, row: usize) -> String {
    format!("{template_id}.{row:04}")
}

/// Expands `template` over every row of its source table.
pub fn expand_template(template: &Template, catalog: &ResourceCatalog) -> Result<Expansion, ExpandError> {
    let table_for = |name: &str| {
        catalog.table(name).ok_or_else(|| ExpandError::UnknownTable {
            template: template.id.clone(),
            table: name.to_string(),
        })
    };
    let table = table_for(&template.source_table)?;
    let rotation = match &template.rotate {
        Some(r) => Some((r, table_for(&r.table)?)),
        None => None,
    };
    let unknown_slot = |table: &ResourceTable, slot: &str| ExpandError::UnknownSlot {
        template: template.id.clone(),
        table: table.name.clone(),
        slot: slot.to_string(),
    };

    // Resolve every slot to a column up front.
    let mut columns: Vec<(String, Column)> = Vec::new();
    for slot in template.patterns().flat_map(Pattern::slots) {
        if columns.iter().any(|(s, _)| s == slot) {
            continue;
        }
        let column = match rotation {
            Some((r, _)) if r.slot == slot => Column::Rotated,
            _ => Column::Source(table.slot_index(slot).ok_or_else(|| unknown_slot(table, slot))?),
        };
        columns.push((slot.to_string(), column));
    }
    if let Some(rule) = &template.forbidden_rule {
        for slot in rule.slots() {
            if table.slot_index(slot).is_none() {
                return Err(unknown_slot(table, slot));
            }
        }
    }
    let needs_article = template.patterns().any(Pattern::needs_article);

    let mut pairs = Vec::new();
    let mut sentences = Vec::new();
    let mut rejected = Vec::new();

    for (row, tuple) in table.rows.iter().enumerate() {
        let rotated = rotation.map(|(r, rt)| {
            let pick = &rt.rows[(row + r.offset) % rt.rows.len()];
            pick.slots[0].as_str()
        });
        let value = |slot: &str| -> &str {
            match columns.iter().find(|(s, _)| s == slot).map(|(_, c)| *c) {
                Some(Column::Source(i)) => tuple.slots[i].as_str(),
                Some(Column::Rotated) => rotated.unwrap_or_default(),
                None => "",
            }
        };
        let article = if needs_article {
            Some(tuple.tag(ARTICLE_TAG).ok_or_else(|| ExpandError::MissingTag {
                template: template.id.clone(),
                row: row + 1,
                tag: ARTICLE_TAG.to_string(),
            })?)
        } else {
            None
        };

        let render = |p: &Pattern| -> Result<String, ExpandError> {
            let text = p.render(value, article);
            if count_masks(&text) != 1 {
                return Err(ExpandError::MaskCount {
                    template: template.id.clone(),
                    row: row + 1,
                    text,
                });
            }
            Ok(text)
        };

        let id = item_id(&template.id, row);
        match (&template.pattern_b, &template.forbidden_rule) {
            (Some(pattern_b), _) => {
                let sentence_a = render(&template.pattern_a)?;
                let sentence_b = render(pattern_b)?;
                if sentence_a == sentence_b {
                    return Err(ExpandError::IdenticalPair {
                        template: template.id.clone(),
                        row: row + 1,
                    });
                }
                pairs.push(InconsistentPair {
                    pair_id: id,
                    subset: template.subset,
                    sentence_a,
                    sentence_b,
                    template_id: template.id.clone(),
                });
            }
            (None, Some(rule)) => {
                let text = render(&template.pattern_a)?;
                match derive_forbidden(rule, table, tuple) {
                    Ok(forbidden) => sentences.push(SemanticSentence {
                        sentence_id: id,
                        subset: template.subset,
                        text,
                        forbidden,
                        template_id: template.id.clone(),
                    }),
                    Err(ForbiddenError::UnknownSlot { slot, .. }) => return Err(unknown_slot(table, &slot)),
                    Err(reason) => {
                        log::warn!("template `{}` row {}: rejected ({reason})", template.id, row + 1);
                        rejected.push(Rejection {
                            template_id: template.id.clone(),
                            row,
                            reason: reason.to_string(),
                        });
                    }
                }
            }
            (None, None) => unreachable!("validated templates carry pattern_b or a forbidden rule"),
        }
    }

    Ok(match template.dataset {
        DatasetKind::Inconsistent => Expansion::Pairs { items: pairs, rejected },
        DatasetKind::Semantic => Expansion::Sentences {
            items: sentences,
            rejected,
        },
    })
}

#[derive(Debug, Clone, Copy)]
enum Column {
    Source(usize),
    Rotated,
}
