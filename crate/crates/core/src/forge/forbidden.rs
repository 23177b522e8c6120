use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::resources::{ConceptTuple, ResourceTable};

/// Separator for alternative values inside one slot, e.g. `insect/animal`.
const ALTERNATIVES: char = '/';

/// How forbidden fill-ins are derived from a concept tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForbiddenRule {
    /// The value of a slot naming the concept's defining property.
    IdentitySlot(String),
    /// The value of a slot naming the containing concept (country of a
    /// capital, hypernym of an animal).
    HypernymSlot(String),
    /// Every role of the table sharing the tuple's category.
    RelatedRoleClosure { role_slot: String, category_slot: String },
}

impl ForbiddenRule {
    pub fn slots(&self) -> Vec<&str> {
        match self {
            ForbiddenRule::IdentitySlot(s) | ForbiddenRule::HypernymSlot(s) => vec![s],
            ForbiddenRule::RelatedRoleClosure {
                role_slot,
                category_slot,
            } => vec![role_slot, category_slot],
        }
    }
}

impl fmt::Display for ForbiddenRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForbiddenRule::IdentitySlot(s) => write!(f, "identity-slot:{s}"),
            ForbiddenRule::HypernymSlot(s) => write!(f, "hypernym-slot:{s}"),
            ForbiddenRule::RelatedRoleClosure {
                role_slot,
                category_slot,
            } => write!(f, "related-role-closure:{role_slot}/{category_slot}"),
        }
    }
}

impl FromStr for ForbiddenRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = s
            .split_once(':')
            .ok_or_else(|| format!("forbidden rule `{s}` lacks a `:slot` argument"))?;
        let arg = arg.trim();
        if arg.is_empty() {
            return Err(format!("forbidden rule `{s}` has an empty argument"));
        }
        match name.trim() {
            "identity-slot" => Ok(ForbiddenRule::IdentitySlot(arg.to_string())),
            "hypernym-slot" => Ok(ForbiddenRule::HypernymSlot(arg.to_string())),
            "related-role-closure" => {
                let (role, category) = arg
                    .split_once('/')
                    .ok_or_else(|| format!("related-role-closure needs ROLE/CATEGORY, got `{arg}`"))?;
                Ok(ForbiddenRule::RelatedRoleClosure {
                    role_slot: role.trim().to_string(),
                    category_slot: category.trim().to_string(),
                })
            }
            other => Err(format!("unknown forbidden rule `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ForbiddenError {
    #[error("slot `{slot}` is not in the schema of table `{table}`")]
    UnknownSlot { table: String, slot: String },
    #[error("rule yields no forbidden words")]
    Empty,
    #[error("forbidden value `{0}` is not a single word")]
    MultiWord(String),
}

/// Derives the lowercase forbidden words for `tuple`, a row of `table`.
///
/// Words keep first-occurrence order and are de-duplicated.
pub fn derive_forbidden(
    rule: &ForbiddenRule,
    table: &ResourceTable,
    tuple: &ConceptTuple,
) -> Result<Vec<String>, ForbiddenError> {
    let index = |slot: &str| {
        table.slot_index(slot).ok_or_else(|| ForbiddenError::UnknownSlot {
            table: table.name.clone(),
            slot: slot.to_string(),
        })
    };

    let raw: Vec<&str> = match rule {
        ForbiddenRule::IdentitySlot(slot) | ForbiddenRule::HypernymSlot(slot) => {
            let i = index(slot)?;
            tuple.slots[i].split(ALTERNATIVES).collect()
        }
        ForbiddenRule::RelatedRoleClosure {
            role_slot,
            category_slot,
        } => {
            let role = index(role_slot)?;
            let category = index(category_slot)?;
            let wanted = &tuple.slots[category];
            table
                .rows
                .iter()
                .filter(|row| &row.slots[category] == wanted)
                .map(|row| row.slots[role].as_str())
                .collect()
        }
    };

    let mut words: Vec<String> = Vec::with_capacity(raw.len());
    for value in raw {
        let word = crate::resources::collapse(value).to_lowercase();
        if word.is_empty() {
            continue;
        }
        if word.contains(' ') {
            return Err(ForbiddenError::MultiWord(word));
        }
        if !words.contains(&word) {
            words.push(word);
        }
    }
    if words.is_empty() {
        return Err(ForbiddenError::Empty);
    }
    Ok(words)
}
