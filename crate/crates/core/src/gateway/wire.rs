//! The backend wire protocol.
//!
//! Three request/response exchanges (`info`, `predict`, `encode`) carry
//! compact JSON bodies. Keys appear in a fixed order and every real is
//! written by [`format_real`], so one value has exactly one encoding and a
//! decoded message re-encodes to the same bytes.
//!
//! Decoding checks everything a response can be checked for on its own
//! (shapes, ranges, ordering, distributions, piece groupings). Checks that
//! need the request or the backend descriptor live in the gateway.

use serde::de::DeserializeOwned;
use serde::Deserialize;
use thiserror::Error;

/// Tolerance on the sum of an attention row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Minimum significant digits written for every real.
pub const MIN_SIGNIFICANT_DIGITS: usize = 8;

/// Markers that must never survive detokenization.
const SUBWORD_MARKERS: [&str; 3] = ["##", "\u{120}", "\u{2581}"];

/// Protocol violations, grouped in the classes reported by [`ProtocolError::class`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("syntax: {0}")]
    Syntax(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("range: {0}")]
    Range(String),
    #[error("order: {0}")]
    Order(String),
    #[error("distribution: {0}")]
    Distribution(String),
    #[error("grouping: {0}")]
    Grouping(String),
    #[error("token: {0}")]
    Token(String),
    #[error("backend error `{class}`: {message}")]
    Backend { class: String, message: String },
}

impl ProtocolError {
    pub fn class(&self) -> &'static str {
        match self {
            ProtocolError::Syntax(_) => "syntax",
            ProtocolError::Shape(_) => "shape",
            ProtocolError::Range(_) => "range",
            ProtocolError::Order(_) => "order",
            ProtocolError::Distribution(_) => "distribution",
            ProtocolError::Grouping(_) => "grouping",
            ProtocolError::Token(_) => "token",
            ProtocolError::Backend { .. } => "backend",
        }
    }
}

/// Writes `x` in positional decimal notation with at least eight significant
/// digits, switching to `d.ddddddde±N` outside `1e-7 ..= 1e21`.
///
/// The digits are the shortest round-trip digits of `x`, zero-padded, so
/// parsing the output gives back `x` bit for bit and formatting is
/// idempotent through a parse.
pub fn format_real(x: f64) -> String {
    assert!(x.is_finite(), "non-finite real {x} cannot be encoded");
    let sci = format!("{x:e}");
    let (mantissa, exp) = sci.split_once('e').expect("`{:e}` output has an exponent");
    let exp: i32 = exp.parse().expect("`{:e}` exponent is an integer");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let mut digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    while digits.len() < MIN_SIGNIFICANT_DIGITS {
        digits.push('0');
    }

    if (-7..21).contains(&exp) {
        if exp < 0 {
            let zeros = "0".repeat((-exp - 1) as usize);
            format!("{sign}0.{zeros}{digits}")
        } else {
            let int_len = exp as usize + 1;
            while digits.len() < int_len {
                digits.push('0');
            }
            let (int, frac) = digits.split_at(int_len);
            let frac = if frac.is_empty() { "0" } else { frac };
            format!("{sign}{int}.{frac}")
        }
    } else {
        let (first, rest) = digits.split_at(1);
        format!("{sign}{first}.{rest}e{exp}")
    }
}

/// Minimal writer for canonical JSON objects.
struct Obj {
    out: String,
    first: bool,
}

impl Obj {
    fn new() -> Self {
        Self {
            out: String::from("{"),
            first: true,
        }
    }

    fn key(&mut self, key: &str) -> &mut String {
        if !self.first {
            self.out.push(',');
        }
        self.first = false;
        push_str(&mut self.out, key);
        self.out.push(':');
        &mut self.out
    }

    fn str(mut self, key: &str, value: &str) -> Self {
        push_str(self.key(key), value);
        self
    }

    fn int(mut self, key: &str, value: usize) -> Self {
        self.key(key).push_str(&value.to_string());
        self
    }

    fn bool(mut self, key: &str, value: bool) -> Self {
        self.key(key).push_str(if value { "true" } else { "false" });
        self
    }

    fn raw(mut self, key: &str, value: &str) -> Self {
        self.key(key).push_str(value);
        self
    }

    fn finish(mut self) -> String {
        self.out.push('}');
        self.out
    }
}

fn push_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
}

fn list<T>(items: &[T], mut each: impl FnMut(&T) -> String) -> String {
    let mut out = String::from("[");
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&each(item));
    }
    out.push(']');
    out
}

fn reals(xs: &[f64]) -> String {
    list(xs, |x| format_real(*x))
}

fn strings(xs: &[String]) -> String {
    list(xs, |s| serde_json::to_string(s).expect("strings always serialize"))
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoRequest {}

impl InfoRequest {
    pub fn encode(&self) -> String {
        Obj::new().finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoResponse {
    pub backend_id: String,
    pub mask_token: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
}

impl InfoResponse {
    pub fn encode(&self) -> String {
        Obj::new()
            .str("backend_id", &self.backend_id)
            .str("mask_token", &self.mask_token)
            .int("num_layers", self.num_layers)
            .int("hidden_dim", self.hidden_dim)
            .finish()
    }

    pub fn decode(body: &str) -> Result<Self, ProtocolError> {
        let info: Self = parse(body)?;
        if info.backend_id.trim().is_empty() {
            return Err(ProtocolError::Token("empty backend_id".into()));
        }
        if info.mask_token.trim().is_empty() {
            return Err(ProtocolError::Token("empty mask_token".into()));
        }
        if info.num_layers == 0 || info.hidden_dim == 0 {
            return Err(ProtocolError::Range("num_layers and hidden_dim must be positive".into()));
        }
        Ok(info)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub text: String,
    pub top_k: usize,
}

impl PredictRequest {
    pub fn encode(&self) -> String {
        Obj::new().str("text", &self.text).int("top_k", self.top_k).finish()
    }

    pub fn decode(body: &str) -> Result<Self, ProtocolError> {
        parse(body)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordProb {
    pub word: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictResponse {
    pub tokens: Vec<String>,
    pub mask_word_index: usize,
    pub predictions: Vec<WordProb>,
}

impl PredictResponse {
    pub fn encode(&self) -> String {
        let preds = list(&self.predictions, |p| {
            Obj::new().str("word", &p.word).raw("prob", &format_real(p.prob)).finish()
        });
        Obj::new()
            .raw("tokens", &strings(&self.tokens))
            .int("mask_word_index", self.mask_word_index)
            .raw("predictions", &preds)
            .finish()
    }

    pub fn decode(body: &str) -> Result<Self, ProtocolError> {
        let resp: Self = parse(body)?;
        resp.validate()?;
        Ok(resp)
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        if self.mask_word_index >= self.tokens.len() {
            return Err(ProtocolError::Range(format!(
                "mask_word_index {} outside {} tokens",
                self.mask_word_index,
                self.tokens.len()
            )));
        }
        if self.predictions.is_empty() {
            return Err(ProtocolError::Shape("no predictions".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut previous = f64::INFINITY;
        for (rank, p) in self.predictions.iter().enumerate() {
            check_word(&p.word)?;
            if p.word != p.word.to_lowercase() {
                return Err(ProtocolError::Token(format!("prediction `{}` is not lowercase", p.word)));
            }
            if !seen.insert(p.word.as_str()) {
                return Err(ProtocolError::Token(format!("prediction `{}` repeated", p.word)));
            }
            if !(0.0..=1.0).contains(&p.prob) {
                return Err(ProtocolError::Range(format!("probability {} of `{}`", p.prob, p.word)));
            }
            if p.prob > previous {
                return Err(ProtocolError::Order(format!(
                    "probability rises at rank {}: {} > {}",
                    rank + 1,
                    p.prob,
                    previous
                )));
            }
            previous = p.prob;
        }
        let total: f64 = self.predictions.iter().map(|p| p.prob).sum();
        if total > 1.0 + ROW_SUM_TOLERANCE {
            return Err(ProtocolError::Distribution(format!("probabilities sum to {total}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeRequest {
    pub text: String,
    /// 1-based transformer layer, excluding the embedding layer.
    pub layer: usize,
    pub focus_word_index: usize,
    /// Always `false` here: pieces are merged client-side.
    pub merged: bool,
}

impl EncodeRequest {
    pub fn encode(&self) -> String {
        Obj::new()
            .str("text", &self.text)
            .int("layer", self.layer)
            .int("focus_word_index", self.focus_word_index)
            .bool("merged", self.merged)
            .finish()
    }

    pub fn decode(body: &str) -> Result<Self, ProtocolError> {
        parse(body)
    }
}

/// Piece-level encoder output.
///
/// `attention_rows_per_layer[l][p]` is the head-averaged attention from the
/// focus word (mean over its pieces' rows) to piece `p` in layer `l + 1`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeResponse {
    pub words: Vec<String>,
    pub word_pieces: Vec<Vec<usize>>,
    pub piece_embeddings: Vec<Vec<f64>>,
    pub attention_rows_per_layer: Vec<Vec<f64>>,
}

impl EncodeResponse {
    pub fn encode(&self) -> String {
        Obj::new()
            .raw("words", &strings(&self.words))
            .raw("word_pieces", &list(&self.word_pieces, |g| list(g, |i| i.to_string())))
            .raw("piece_embeddings", &list(&self.piece_embeddings, |v| reals(v)))
            .raw("attention_rows_per_layer", &list(&self.attention_rows_per_layer, |v| reals(v)))
            .finish()
    }

    pub fn decode(body: &str) -> Result<Self, ProtocolError> {
        let resp: Self = parse(body)?;
        resp.validate()?;
        Ok(resp)
    }

    pub fn num_pieces(&self) -> usize {
        self.piece_embeddings.len()
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        if self.words.is_empty() {
            return Err(ProtocolError::Shape("no words".into()));
        }
        for w in &self.words {
            if w.is_empty() {
                return Err(ProtocolError::Token("empty word".into()));
            }
        }
        if self.word_pieces.len() != self.words.len() {
            return Err(ProtocolError::Shape(format!(
                "{} piece groups for {} words",
                self.word_pieces.len(),
                self.words.len()
            )));
        }
        let pieces = self.num_pieces();
        check_partition(&self.word_pieces, pieces).map_err(ProtocolError::Grouping)?;
        let dim = self.piece_embeddings.first().map_or(0, Vec::len);
        if dim == 0 || self.piece_embeddings.iter().any(|v| v.len() != dim) {
            return Err(ProtocolError::Shape("piece embeddings are empty or ragged".into()));
        }
        if self.attention_rows_per_layer.is_empty() {
            return Err(ProtocolError::Shape("no attention rows".into()));
        }
        for (layer, row) in self.attention_rows_per_layer.iter().enumerate() {
            if row.len() != pieces {
                return Err(ProtocolError::Shape(format!(
                    "attention row {} has {} entries for {pieces} pieces",
                    layer + 1,
                    row.len()
                )));
            }
            check_distribution(row).map_err(|m| ProtocolError::Distribution(format!("layer {}: {m}", layer + 1)))?;
        }
        Ok(())
    }
}

/// A backend-reported failure.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorResponse {
    pub error: String,
    pub message: String,
}

impl ErrorResponse {
    pub fn new(error: &str, message: impl Into<String>) -> Self {
        Self {
            error: error.to_string(),
            message: message.into(),
        }
    }

    pub fn encode(&self) -> String {
        Obj::new().str("error", &self.error).str("message", &self.message).finish()
    }
}

/// Backend error classes.
pub mod error_class {
    pub const BAD_REQUEST: &str = "bad_request";
    pub const TOKENIZATION: &str = "tokenization";
    pub const TOP_K_EXCEEDS_VOCABULARY: &str = "top_k_exceeds_vocabulary";
    pub const LAYER_OUT_OF_RANGE: &str = "layer_out_of_range";
    pub const FOCUS_OUT_OF_RANGE: &str = "focus_out_of_range";
}

fn parse<T: DeserializeOwned>(body: &str) -> Result<T, ProtocolError> {
    // An error body is recognized by its `error` key before the typed parse.
    if let Ok(err) = serde_json::from_str::<ErrorResponse>(body) {
        return Err(ProtocolError::Backend {
            class: err.error,
            message: err.message,
        });
    }
    serde_json::from_str(body).map_err(|e| ProtocolError::Syntax(e.to_string()))
}

fn check_word(word: &str) -> Result<(), ProtocolError> {
    if word.trim().is_empty() || word.trim() != word || word.contains(char::is_whitespace) {
        return Err(ProtocolError::Token(format!("`{word}` is not a plain word")));
    }
    if let Some(marker) = SUBWORD_MARKERS.iter().find(|m| word.contains(*m)) {
        return Err(ProtocolError::Token(format!("`{word}` carries subword marker `{marker}`")));
    }
    Ok(())
}

/// Checks that `groups` partition `0..n` into non-empty groups.
pub fn check_partition(groups: &[Vec<usize>], n: usize) -> Result<(), String> {
    let mut owner = vec![None; n];
    for (w, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(format!("word {w} has no pieces"));
        }
        for &p in group {
            let slot = owner
                .get_mut(p)
                .ok_or_else(|| format!("piece {p} of word {w} outside {n} pieces"))?;
            if let Some(other) = *slot {
                return Err(format!("piece {p} claimed by words {other} and {w}"));
            }
            *slot = Some(w);
        }
    }
    if let Some(p) = owner.iter().position(Option::is_none) {
        return Err(format!("piece {p} belongs to no word"));
    }
    Ok(())
}

pub(crate) fn check_distribution(row: &[f64]) -> Result<(), String> {
    if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(format!("entry {x} outside [0, 1]"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn real_formatting_examples() {
        assert_eq!(format_real(0.5), "0.50000000");
        assert_eq!(format_real(1.0), "1.0000000");
        assert_eq!(format_real(0.0), "0.0000000");
        assert_eq!(format_real(-0.0), "-0.0000000");
        assert_eq!(format_real(-0.25), "-0.25000000");
        assert_eq!(format_real(0.123456789012), "0.123456789012");
        assert_eq!(format_real(12345678.0), "12345678.0");
        assert_eq!(format_real(1e10), "10000000000.0");
        assert_eq!(format_real(0.001), "0.0010000000");
        assert_eq!(format_real(1.5e-9), "1.5000000e-9");
        assert_eq!(format_real(2e25), "2.0000000e25");
    }

    proptest! {
        #[test]
        fn real_round_trip_is_exact(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let text = format_real(x);
            let back: f64 = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
            prop_assert_eq!(format_real(back), text.clone());
            let sig = text.trim_start_matches('-').split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count();
            prop_assert!(sig >= MIN_SIGNIFICANT_DIGITS);
        }

        #[test]
        fn unit_interval_reals_round_trip(x in 0.0f64..=1.0) {
            let back: f64 = serde_json::from_str(&format_real(x)).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }

    fn predict() -> PredictResponse {
        PredictResponse {
            tokens: vec!["a".into(), "[MASK]".into(), ".".into()],
            mask_word_index: 1,
            predictions: vec![
                WordProb { word: "cat".into(), prob: 0.5 },
                WordProb { word: "dog".into(), prob: 0.25 },
            ],
        }
    }

    #[test]
    fn predict_round_trip() {
        let body = predict().encode();
        assert_eq!(
            body,
            r#"{"tokens":["a","[MASK]","."],"mask_word_index":1,"predictions":[{"word":"cat","prob":0.50000000},{"word":"dog","prob":0.25000000}]}"#
        );
        assert_eq!(PredictResponse::decode(&body).unwrap(), predict());
    }

    #[test]
    fn predict_violations_have_classes() {
        let mut r = predict();
        r.predictions[1].prob = 0.75;
        assert_eq!(PredictResponse::decode(&r.encode()).unwrap_err().class(), "order");
        let mut r = predict();
        r.predictions[0].word = "##ing".into();
        assert_eq!(PredictResponse::decode(&r.encode()).unwrap_err().class(), "token");
        let mut r = predict();
        r.predictions[0].word = "Cat".into();
        assert_eq!(PredictResponse::decode(&r.encode()).unwrap_err().class(), "token");
        let mut r = predict();
        r.mask_word_index = 3;
        assert_eq!(PredictResponse::decode(&r.encode()).unwrap_err().class(), "range");
        assert_eq!(PredictResponse::decode("{\"tokens\":[]}").unwrap_err().class(), "syntax");
        let err = PredictResponse::decode(&ErrorResponse::new("tokenization", "boom").encode()).unwrap_err();
        assert_eq!(err, ProtocolError::Backend { class: "tokenization".into(), message: "boom".into() });
    }

    #[test]
    fn partition_checks() {
        assert!(check_partition(&[vec![0], vec![1, 2]], 3).is_ok());
        assert!(check_partition(&[vec![0], vec![0, 1]], 2).is_err());
        assert!(check_partition(&[vec![0]], 2).is_err());
        assert!(check_partition(&[vec![0], vec![]], 1).is_err());
        assert!(check_partition(&[vec![0, 5]], 2).is_err());
    }

    #[test]
    fn encode_response_validation() {
        let good = EncodeResponse {
            words: vec!["a".into(), "cat".into()],
            word_pieces: vec![vec![0], vec![1, 2]],
            piece_embeddings: vec![vec![1.0, 0.0]; 3],
            attention_rows_per_layer: vec![vec![0.5, 0.25, 0.25]; 2],
        };
        assert_eq!(EncodeResponse::decode(&good.encode()).unwrap(), good);
        let mut bad = good.clone();
        bad.attention_rows_per_layer[1] = vec![0.5, 0.5, 0.5];
        assert_eq!(EncodeResponse::decode(&bad.encode()).unwrap_err().class(), "distribution");
        let mut bad = good.clone();
        bad.word_pieces = vec![vec![0, 1], vec![1, 2]];
        assert_eq!(EncodeResponse::decode(&bad.encode()).unwrap_err().class(), "grouping");
        let mut bad = good.clone();
        bad.piece_embeddings[2] = vec![1.0];
        assert_eq!(EncodeResponse::decode(&bad.encode()).unwrap_err().class(), "shape");
    }
}
