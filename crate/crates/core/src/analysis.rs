//! Similarity and attention profiles of predicted words.
//!
//! For each prediction the sentence is re-encoded with the prediction in
//! place of the mask. The predicted word's embedding at the chosen layer is
//! compared by cosine with every word of the sentence, and its word-aligned
//! attention row is kept for every layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::{ProbeSentence, MASK};
use crate::gateway::wire::check_partition;
use crate::gateway::{render_mask, Gateway, GatewayError, PredictionSet};
use crate::resources::collapse;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("vectors have dimensions {0} and {1}")]
    Dimension(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("invalid piece grouping: {0}")]
    Grouping(String),
    #[error("focus word {index} is `{found}`, expected `{expected}`")]
    FocusMisaligned {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("no prediction at rank {0}")]
    NoSuchRank(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Averages piece vectors into word vectors; `groups[w]` lists the pieces of
/// word `w` and the groups must partition the pieces.
pub fn merge_word_pieces(pieces: &[Vec<f64>], groups: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, AnalysisError> {
    check_partition(groups, pieces.len()).map_err(AnalysisError::Grouping)?;
    let dim = pieces.first().map_or(0, Vec::len);
    if let Some(v) = pieces.iter().find(|v| v.len() != dim) {
        return Err(AnalysisError::Dimension(dim, v.len()));
    }
    Ok(groups
        .iter()
        .map(|group| {
            let mut mean = vec![0.0; dim];
            for &p in group {
                for (m, x) in mean.iter_mut().zip(&pieces[p]) {
                    *m += x;
                }
            }
            let n = group.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            mean
        })
        .collect())
}

/// Sums a piece-level attention row into word columns.
pub fn merge_attention(row: &[f64], groups: &[Vec<usize>]) -> Result<Vec<f64>, AnalysisError> {
    check_partition(groups, row.len()).map_err(AnalysisError::Grouping)?;
    Ok(groups.iter().map(|g| g.iter().map(|&p| row[p]).sum()).collect())
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, AnalysisError> {
    if u.len() != v.len() {
        return Err(AnalysisError::Dimension(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(AnalysisError::ZeroNorm);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Where the predicted word's vector comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Re-encode the sentence with the prediction substituted for the mask.
    #[default]
    Substituted,
    /// Use the mask position of the masked sentence; identical for every
    /// prediction of a sentence.
    MaskPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisProfile {
    pub sentence_id: String,
    pub backend_id: String,
    pub prediction_word: String,
    /// 1-based rank of the prediction.
    pub prediction_rank: usize,
    pub layer: usize,
    pub source: EmbeddingSource,
    pub focus_word_index: usize,
    pub word_labels: Vec<String>,
    pub cosine_by_word: Vec<f64>,
    /// `num_layers` rows of `word_labels.len()` entries.
    pub attention_by_layer: Vec<Vec<f64>>,
}

/// Puts `word` in place of the mask placeholder.
pub fn substitute(text: &str, word: &str) -> String {
    collapse(&text.replacen(MASK, word, 1))
}

/// Similarity and attention profile of the prediction at `rank` (1-based).
pub fn profile_prediction(
    gateway: &Gateway,
    sentence: &ProbeSentence,
    predictions: &PredictionSet,
    rank: usize,
    layer: usize,
    source: EmbeddingSource,
) -> Result<AnalysisProfile, AnalysisError> {
    let prediction = rank
        .checked_sub(1)
        .and_then(|i| predictions.predictions.get(i))
        .ok_or(AnalysisError::NoSuchRank(rank))?;
    let focus = predictions.mask_word_index;
    let text = match source {
        EmbeddingSource::Substituted => substitute(&sentence.text, &prediction.word),
        EmbeddingSource::MaskPosition => render_mask(&sentence.text, gateway.descriptor())?,
    };
    let encoded = gateway.encode_with_focus(&text, focus, layer)?;
    let found = &encoded.words[focus];
    let (expected, aligned) = match source {
        EmbeddingSource::Substituted => (&prediction.word, found.to_lowercase() == prediction.word),
        EmbeddingSource::MaskPosition => {
            let mask = &gateway.descriptor().mask_token;
            (mask, found == mask)
        }
    };
    if !aligned {
        return Err(AnalysisError::FocusMisaligned {
            index: focus,
            expected: expected.to_string(),
            found: found.clone(),
        });
    }
    let target = &encoded.embeddings[focus];
    // The self entry is pinned to 1 but still requires a usable vector.
    if target.iter().all(|x| *x == 0.0) {
        return Err(AnalysisError::ZeroNorm);
    }
    let cosine_by_word = encoded
        .embeddings
        .iter()
        .enumerate()
        .map(|(i, v)| if i == focus { Ok(1.0) } else { cosine(target, v) })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AnalysisProfile {
        sentence_id: sentence.sentence_id.clone(),
        backend_id: predictions.backend_id.clone(),
        prediction_word: prediction.word.clone(),
        prediction_rank: rank,
        layer,
        source,
        focus_word_index: focus,
        word_labels: encoded.words,
        cosine_by_word,
        attention_by_layer: encoded.attention_rows,
    })
}

/// Profiles for every prediction of the set, in rank order.
pub fn profile_all(
    gateway: &Gateway,
    sentence: &ProbeSentence,
    predictions: &PredictionSet,
    layer: usize,
    source: EmbeddingSource,
) -> Result<Vec<AnalysisProfile>, AnalysisError> {
    (1..=predictions.predictions.len())
        .map(|rank| profile_prediction(gateway, sentence, predictions, rank, layer, source))
        .collect()
}
