//! A deterministic in-process backend.
//!
//! Every number the mock produces is derived from FNV-1a 64 hashes of short
//! key strings, so outputs are reproducible on any platform and can be
//! recomputed by an independent implementation in tests:
//!
//! * prediction score of vocabulary word `v` for text `t`:
//!   `unit(fnv("{seed}|predict|{t}|{v}"))`, normalized over the vocabulary
//! * embedding component `d` of piece `p` at piece position `i`, layer `l`:
//!   `2 * unit(fnv("{seed}|{p}|{i}|{l}|{d}")) - 1`
//! * raw attention from piece `q` to piece `p` in layer `l` of text `t`:
//!   `unit(fnv("{seed}|attend|{t}|{l}|{q}|{p}"))`, normalized per row
//!
//! where `unit(h) = ((mix(h) >> 11) + 1) / 2^53`, a value in `(0, 1]`, and
//! `mix` is the splitmix64 finalizer. FNV-1a alone leaves the high bits
//! almost unchanged when keys differ only in their last characters.

use super::wire::{
    error_class, EncodeRequest, EncodeResponse, ErrorResponse, InfoResponse, PredictRequest,
    PredictResponse, ProtocolError, WordProb,
};
use super::{Method, Transport, TransportError};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Longest piece, in characters, the mock tokenizer produces.
pub const PIECE_CHARS: usize = 5;

/// Vocabulary used when none is given. It mixes frequent fillers with words
/// that are forbidden fill-ins for bundled sentences.
pub const DEFAULT_VOCAB: &[&str] = &[
    "animal", "mother", "wife", "woman", "father", "man", "greece", "china", "germany", "france",
    "wings", "legs", "eyes", "fins", "strings", "wheels", "water", "food", "fly", "swim", "work",
    "teach", "bird", "dog", "cat", "fish", "insect", "mammal", "city", "country", "friend", "car",
    "house", "tree", "book", "music", "money", "love", "time", "home", "school", "child", "people",
    "garden", "life", "doctor", "teacher", "pilot", "engine", "door",
];

pub fn fnv1a(key: &str) -> u64 {
    key.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// The splitmix64 finalizer.
pub fn mix(hash: u64) -> u64 {
    let mut z = hash;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn unit(hash: u64) -> f64 {
    ((mix(hash) >> 11) + 1) as f64 / (1u64 << 53) as f64
}

/// Splits `text` into words: whitespace separates words, every punctuation
/// character is a word of its own and `mask_token` is kept whole.
pub fn segment(text: &str, mask_token: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            let (before, after) = match rest.find(mask_token) {
                Some(at) => (&rest[..at], Some(&rest[at + mask_token.len()..])),
                None => (rest, None),
            };
            split_punctuation(before, &mut words);
            match after {
                Some(after) => {
                    words.push(mask_token.to_string());
                    rest = after;
                }
                None => rest = "",
            }
        }
    }
    words
}

fn split_punctuation(s: &str, words: &mut Vec<String>) {
    let mut current = String::new();
    for c in s.chars() {
        if c.is_alphanumeric() || c == '\'' || c == '-' {
            current.push(c);
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
}

/// Splits a word into pieces of at most [`PIECE_CHARS`] characters.
pub fn pieces_of(word: &str, mask_token: &str) -> Vec<String> {
    if word == mask_token {
        return vec![word.to_string()];
    }
    let chars: Vec<char> = word.chars().collect();
    chars.chunks(PIECE_CHARS).map(|c| c.iter().collect()).collect()
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    pub backend_id: String,
    pub mask_token: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    seed: u64,
    vocab: Vec<String>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(0, DEFAULT_VOCAB.iter().copied())
    }
}

impl MockBackend {
    /// Builds a mock over `vocab`, lowercased with duplicates removed.
    ///
    /// # Panics
    /// If the vocabulary is empty.
    pub fn new<S: AsRef<str>>(seed: u64, vocab: impl IntoIterator<Item = S>) -> Self {
        let mut words: Vec<String> = Vec::new();
        for w in vocab {
            let w = w.as_ref().trim().to_lowercase();
            if !w.is_empty() && !words.contains(&w) {
                words.push(w);
            }
        }
        assert!(!words.is_empty(), "mock backend needs a non-empty vocabulary");
        Self {
            backend_id: "mock".to_string(),
            mask_token: "[MASK]".to_string(),
            num_layers: 12,
            hidden_dim: 16,
            seed,
            vocab: words,
        }
    }

    pub fn with_mask_token(mut self, mask_token: &str) -> Self {
        self.mask_token = mask_token.to_string();
        self
    }

    pub fn with_shape(mut self, num_layers: usize, hidden_dim: usize) -> Self {
        assert!(num_layers >= 1 && hidden_dim >= 1);
        self.num_layers = num_layers;
        self.hidden_dim = hidden_dim;
        self
    }

    pub fn with_backend_id(mut self, backend_id: &str) -> Self {
        self.backend_id = backend_id.to_string();
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn info(&self) -> InfoResponse {
        InfoResponse {
            backend_id: self.backend_id.clone(),
            mask_token: self.mask_token.clone(),
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn predict(&self, req: &PredictRequest) -> Result<PredictResponse, ErrorResponse> {
        let tokens = segment(&req.text, &self.mask_token);
        let masks: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] == self.mask_token).collect();
        let [mask_word_index] = masks[..] else {
            return Err(ErrorResponse::new(
                error_class::TOKENIZATION,
                format!("expected one `{}` token, found {}", self.mask_token, masks.len()),
            ));
        };
        if req.top_k == 0 {
            return Err(ErrorResponse::new(error_class::BAD_REQUEST, "top_k must be positive"));
        }
        if req.top_k > self.vocab.len() {
            return Err(ErrorResponse::new(
                error_class::TOP_K_EXCEEDS_VOCABULARY,
                format!("top_k {} exceeds vocabulary of {}", req.top_k, self.vocab.len()),
            ));
        }
        let scores: Vec<f64> = self
            .vocab
            .iter()
            .map(|v| unit(fnv1a(&format!("{}|predict|{}|{}", self.seed, req.text, v))))
            .collect();
        let total: f64 = scores.iter().sum();
        let mut order: Vec<usize> = (0..self.vocab.len()).collect();
        // Stable sort keeps vocabulary order among equal scores.
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let predictions = order
            .into_iter()
            .take(req.top_k)
            .map(|i| WordProb {
                word: self.vocab[i].clone(),
                prob: scores[i] / total,
            })
            .collect();
        Ok(PredictResponse {
            tokens,
            mask_word_index,
            predictions,
        })
    }

    pub fn encode(&self, req: &EncodeRequest) -> Result<EncodeResponse, ErrorResponse> {
        if req.merged {
            return Err(ErrorResponse::new(error_class::BAD_REQUEST, "merged output is not supported"));
        }
        if req.layer == 0 || req.layer > self.num_layers {
            return Err(ErrorResponse::new(
                error_class::LAYER_OUT_OF_RANGE,
                format!("layer {} outside 1..={}", req.layer, self.num_layers),
            ));
        }
        let words = segment(&req.text, &self.mask_token);
        if words.is_empty() {
            return Err(ErrorResponse::new(error_class::TOKENIZATION, "text has no words"));
        }
        if req.focus_word_index >= words.len() {
            return Err(ErrorResponse::new(
                error_class::FOCUS_OUT_OF_RANGE,
                format!("focus word {} outside {} words", req.focus_word_index, words.len()),
            ));
        }

        let mut pieces = Vec::new();
        let mut word_pieces = Vec::with_capacity(words.len());
        for w in &words {
            let start = pieces.len();
            pieces.extend(pieces_of(w, &self.mask_token));
            word_pieces.push((start..pieces.len()).collect::<Vec<_>>());
        }

        let piece_embeddings = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (0..self.hidden_dim)
                    .map(|d| 2.0 * unit(fnv1a(&format!("{}|{}|{}|{}|{}", self.seed, p, i, req.layer, d))) - 1.0)
                    .collect()
            })
            .collect();

        let focus = &word_pieces[req.focus_word_index];
        let attention_rows_per_layer = (1..=self.num_layers)
            .map(|layer| {
                let mut row = vec![0.0; pieces.len()];
                for &q in focus {
                    let raw: Vec<f64> = (0..pieces.len())
                        .map(|p| unit(fnv1a(&format!("{}|attend|{}|{}|{}|{}", self.seed, req.text, layer, q, p))))
                        .collect();
                    let total: f64 = raw.iter().sum();
                    for (acc, x) in row.iter_mut().zip(raw) {
                        *acc += x / total;
                    }
                }
                row.iter_mut().for_each(|x| *x /= focus.len() as f64);
                row
            })
            .collect();

        Ok(EncodeResponse {
            words,
            word_pieces,
            piece_embeddings,
            attention_rows_per_layer,
        })
    }

    /// Answers one wire exchange, returning either a response or an error body.
    pub fn handle(&self, method: Method, body: &str) -> String {
        let result = match method {
            Method::Info => Ok(self.info().encode()),
            Method::Predict => decode(PredictRequest::decode(body)).and_then(|r| self.predict(&r).map(|r| r.encode())),
            Method::Encode => decode(EncodeRequest::decode(body)).and_then(|r| self.encode(&r).map(|r| r.encode())),
        };
        result.unwrap_or_else(|e| e.encode())
    }
}

fn decode<T>(parsed: Result<T, ProtocolError>) -> Result<T, ErrorResponse> {
    parsed.map_err(|e| ErrorResponse::new(error_class::BAD_REQUEST, e.to_string()))
}

impl Transport for MockBackend {
    fn exchange(&self, method: Method, body: &str) -> Result<String, TransportError> {
        Ok(self.handle(method, body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation() {
        assert_eq!(segment("A mom is not a [MASK].", "[MASK]"), ["A", "mom", "is", "not", "a", "[MASK]", "."]);
        assert_eq!(segment("  x,y <mask>!  ", "<mask>"), ["x", ",", "y", "<mask>", "!"]);
        assert_eq!(pieces_of("grandmother", "[MASK]"), ["grand", "mothe", "r"]);
        assert_eq!(pieces_of("[MASK]", "[MASK]"), ["[MASK]"]);
    }

    #[test]
    fn predictions_are_a_ranked_distribution() {
        let mock = MockBackend::default();
        let r = mock
            .predict(&PredictRequest { text: "A mom is not a [MASK].".into(), top_k: 10 })
            .unwrap();
        assert_eq!(r.predictions.len(), 10);
        assert_eq!(r.mask_word_index, 5);
        assert!(r.predictions.windows(2).all(|w| w[0].prob >= w[1].prob));
        assert!(r.predictions.iter().map(|p| p.prob).sum::<f64>() <= 1.0);
        let full = mock
            .predict(&PredictRequest { text: "A mom is not a [MASK].".into(), top_k: mock.vocab().len() })
            .unwrap();
        assert!((full.predictions.iter().map(|p| p.prob).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors_use_documented_classes() {
        let mock = MockBackend::new(1, ["a", "b"]);
        let err = mock.predict(&PredictRequest { text: "x [MASK]".into(), top_k: 3 }).unwrap_err();
        assert_eq!(err.error, error_class::TOP_K_EXCEEDS_VOCABULARY);
        let err = mock.predict(&PredictRequest { text: "x".into(), top_k: 1 }).unwrap_err();
        assert_eq!(err.error, error_class::TOKENIZATION);
        let req = EncodeRequest { text: "a b".into(), layer: 13, focus_word_index: 0, merged: false };
        assert_eq!(mock.encode(&req).unwrap_err().error, error_class::LAYER_OUT_OF_RANGE);
        let req = EncodeRequest { layer: 1, focus_word_index: 2, ..req };
        assert_eq!(mock.encode(&req).unwrap_err().error, error_class::FOCUS_OUT_OF_RANGE);
    }

    #[test]
    fn handle_round_trips_through_the_codec() {
        let mock = MockBackend::default();
        let req = EncodeRequest { text: "A grandmother flies.".into(), layer: 11, focus_word_index: 1, merged: false };
        let body = mock.handle(Method::Encode, &req.encode());
        let resp = EncodeResponse::decode(&body).unwrap();
        assert_eq!(resp.word_pieces, vec![vec![0], vec![1, 2, 3], vec![4], vec![5]]);
        assert_eq!(resp.attention_rows_per_layer.len(), 12);
        assert_eq!(resp.encode(), body);
        let bad = mock.handle(Method::Predict, "{\"text\":1}");
        assert!(bad.starts_with("{\"error\":\"bad_request\""));
    }
}
