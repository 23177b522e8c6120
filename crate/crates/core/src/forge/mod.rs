//! Template expansion into the two probe datasets.
//!
//! The Inconsistent Dataset holds pairs of sentences whose function words
//! make correct fill-ins disjoint; the Semantic Dataset holds single
//! sentences annotated with forbidden fill-ins.

mod dataset;
mod forbidden;
mod template;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dataset::{
    build_inconsistent_dataset, build_semantic_dataset, counting_pass, load_dataset,
    parse_dataset, serialize_dataset, BuildOutcome, Dataset, DatasetError, DatasetManifest,
};
pub use forbidden::{derive_forbidden, ForbiddenError, ForbiddenRule};
pub use template::{
    expand_template, load_templates, parse_templates, template_hash, ExpandError, Expansion,
    Pattern, Rejection, Rotation, Template, TemplateError,
};

/// The placeholder every probe sentence carries exactly once.
pub const MASK: &str = "[MASK]";

pub fn count_masks(text: &str) -> usize {
    text.matches(MASK).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Inconsistent,
    Semantic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Inconsistent => "inconsistent",
            DatasetKind::Semantic => "semantic",
        }
    }

    /// Subsets in table order.
    pub fn subsets(self) -> &'static [Subset] {
        match self {
            DatasetKind::Inconsistent => &[Subset::Coordination, Subset::Negation, Subset::Quantifiers],
            DatasetKind::Semantic => &[Subset::SynNeg, Subset::LexNeg, Subset::Coord],
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inconsistent" => Ok(DatasetKind::Inconsistent),
            "semantic" => Ok(DatasetKind::Semantic),
            other => Err(format!("unknown dataset `{other}`")),
        }
    }
}

/// Dataset subset. The declaration order is the report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    #[serde(rename = "coordination")]
    Coordination,
    #[serde(rename = "negation")]
    Negation,
    #[serde(rename = "quantifiers")]
    Quantifiers,
    #[serde(rename = "synNeg")]
    SynNeg,
    #[serde(rename = "lexNeg")]
    LexNeg,
    #[serde(rename = "coord")]
    Coord,
}

impl Subset {
    pub fn dataset(self) -> DatasetKind {
        match self {
            Subset::Coordination | Subset::Negation | Subset::Quantifiers => DatasetKind::Inconsistent,
            Subset::SynNeg | Subset::LexNeg | Subset::Coord => DatasetKind::Semantic,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Coordination => "coordination",
            Subset::Negation => "negation",
            Subset::Quantifiers => "quantifiers",
            Subset::SynNeg => "synNeg",
            Subset::LexNeg => "lexNeg",
            Subset::Coord => "coord",
        }
    }

    /// Short label used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Subset::Coordination => "coord",
            Subset::Negation => "neg",
            Subset::Quantifiers => "quant",
            other => other.as_str(),
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Subset::Coordination,
            Subset::Negation,
            Subset::Quantifiers,
            Subset::SynNeg,
            Subset::LexNeg,
            Subset::Coord,
        ]
        .into_iter()
        .find(|sub| sub.as_str() == s)
        .ok_or_else(|| format!("unknown subset `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InconsistentPair {
    pub pair_id: String,
    pub subset: Subset,
    pub sentence_a: String,
    pub sentence_b: String,
    pub template_id: String,
}

impl InconsistentPair {
    pub fn sentence_id_a(&self) -> String {
        format!("{}.a", self.pair_id)
    }

    pub fn sentence_id_b(&self) -> String {
        format!("{}.b", self.pair_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticSentence {
    pub sentence_id: String,
    pub subset: Subset,
    pub text: String,
    pub forbidden: Vec<String>,
    pub template_id: String,
}

/// A single masked sentence as sent to a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSentence {
    pub sentence_id: String,
    pub text: String,
}

impl ProbeSentence {
    pub fn new(sentence_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            sentence_id: sentence_id.into(),
            text: text.into(),
        }
    }
}
