//! Access to masked-LM backends.
//!
//! A [`Transport`] moves wire bodies to a backend; the [`Gateway`] on top
//! renders mask placeholders, validates every response at the boundary,
//! merges word pieces, caches responses by content hash and bounds the
//! number of requests in flight.

mod http;
mod mock;
pub mod wire;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{merge_attention, merge_word_pieces, AnalysisError};
use crate::forge::{count_masks, ProbeSentence, MASK};
use crate::resources::collapse;
pub use http::HttpTransport;
pub use mock::{fnv1a, mix, pieces_of, segment, unit, MockBackend, DEFAULT_VOCAB, PIECE_CHARS};
use wire::{EncodeRequest, EncodeResponse, InfoRequest, InfoResponse, PredictRequest, PredictResponse, ProtocolError};

/// Endpoint label of the in-process mock.
pub const MOCK_ENDPOINT: &str = "builtin:mock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Info,
    Predict,
    Encode,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Info => "info",
            Method::Predict => "predict",
            Method::Encode => "encode",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transport failure: {0}")]
pub struct TransportError(pub String);

/// Carries one request body to a backend and returns the response body.
///
/// Backend-reported failures travel as ordinary error bodies; only failures
/// to reach the backend at all are transport errors.
pub trait Transport: Send + Sync {
    fn exchange(&self, method: Method, body: &str) -> Result<String, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn exchange(&self, method: Method, body: &str) -> Result<String, TransportError> {
        (**self).exchange(method, body)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("expected exactly one {MASK} placeholder, found {0}")]
    MaskCount(usize),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response does not match the request: {0}")]
    Mismatch(String),
}

impl From<AnalysisError> for GatewayError {
    fn from(e: AnalysisError) -> Self {
        GatewayError::Mismatch(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub endpoint: String,
    pub mask_token: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub word: String,
    pub prob: f64,
}

/// Ranked fill-ins for one sentence under one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub sentence_id: String,
    pub backend_id: String,
    pub k: usize,
    /// Word index of the mask in the backend's segmentation of the sentence.
    pub mask_word_index: usize,
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.predictions.iter().map(|p| p.word.as_str())
    }
}

/// Word-level encoder output for one sentence and one focus word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResult {
    pub words: Vec<String>,
    pub layer: usize,
    pub focus_word_index: usize,
    pub embeddings: Vec<Vec<f64>>,
    /// One row per layer, one entry per word.
    pub attention_rows: Vec<Vec<f64>>,
}

/// Replaces the `[MASK]` placeholder with the backend's mask token and
/// normalizes whitespace.
pub fn render_mask(text: &str, backend: &BackendDescriptor) -> Result<String, GatewayError> {
    match count_masks(text) {
        1 => Ok(collapse(&text.replacen(MASK, &backend.mask_token, 1))),
        n => Err(GatewayError::MaskCount(n)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatewayOptions {
    pub max_in_flight: usize,
    pub cache: bool,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            cache: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

/// Counting semaphore bounding concurrent backend requests.
struct Limiter {
    free: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.released.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.released.notify_one();
    }
}

pub struct Gateway {
    transport: Arc<dyn Transport>,
    descriptor: BackendDescriptor,
    options: GatewayOptions,
    cache: RwLock<HashMap<[u8; 32], String>>,
    hits: AtomicU64,
    misses: AtomicU64,
    limiter: Limiter,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("descriptor", &self.descriptor).finish_non_exhaustive()
    }
}

impl Gateway {
    /// Queries `info` and returns a gateway bound to the reported backend.
    pub fn connect(
        transport: Arc<dyn Transport>,
        endpoint: &str,
        options: GatewayOptions,
    ) -> Result<Self, GatewayError> {
        let body = transport.exchange(Method::Info, &InfoRequest {}.encode())?;
        let info = InfoResponse::decode(&body)?;
        let descriptor = BackendDescriptor {
            backend_id: info.backend_id,
            endpoint: endpoint.to_string(),
            mask_token: info.mask_token,
            num_layers: info.num_layers,
            hidden_dim: info.hidden_dim,
        };
        log::debug!("connected to backend {} at {endpoint}", descriptor.backend_id);
        Ok(Self {
            transport,
            descriptor,
            options,
            cache: RwLock::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            limiter: Limiter::new(options.max_in_flight),
        })
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    pub fn cache_stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    fn cache_key(&self, method: Method, body: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for part in [self.descriptor.backend_id.as_str(), method.as_str(), body] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.finalize().into()
    }

    /// Sends one request, going through the cache. Only responses that pass
    /// `validate` are cached.
    fn call<T>(
        &self,
        method: Method,
        body: &str,
        validate: impl Fn(&str) -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let key = self.options.cache.then(|| self.cache_key(method, body));
        if let Some(key) = &key {
            let cached = self.cache.read().unwrap_or_else(|e| e.into_inner()).get(key).cloned();
            if let Some(cached) = cached {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return validate(&cached);
            }
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
        let response = {
            let _permit = self.limiter.acquire();
            self.transport.exchange(method, body)?
        };
        let value = validate(&response)?;
        if let Some(key) = key {
            self.cache.write().unwrap_or_else(|e| e.into_inner()).insert(key, response);
        }
        Ok(value)
    }

    /// Top-`k` fill-ins for the sentence's `[MASK]`.
    pub fn predict_masked(&self, sentence: &ProbeSentence, k: usize) -> Result<PredictionSet, GatewayError> {
        if k == 0 {
            return Err(GatewayError::InvalidRequest("k must be at least 1".into()));
        }
        let text = render_mask(&sentence.text, &self.descriptor)?;
        let request = PredictRequest { text, top_k: k };
        let resp = self.call(Method::Predict, &request.encode(), |body| {
            let resp = PredictResponse::decode(body)?;
            self.check_predict(&resp, k)?;
            Ok(resp)
        })?;
        Ok(PredictionSet {
            sentence_id: sentence.sentence_id.clone(),
            backend_id: self.descriptor.backend_id.clone(),
            k,
            mask_word_index: resp.mask_word_index,
            predictions: resp
                .predictions
                .into_iter()
                .map(|p| Prediction { word: p.word, prob: p.prob })
                .collect(),
        })
    }

    fn check_predict(&self, resp: &PredictResponse, k: usize) -> Result<(), GatewayError> {
        if resp.predictions.len() > k {
            return Err(GatewayError::Mismatch(format!(
                "{} predictions for top_k {k}",
                resp.predictions.len()
            )));
        }
        if resp.tokens[resp.mask_word_index] != self.descriptor.mask_token {
            return Err(GatewayError::Mismatch(format!(
                "token {} is `{}`, not the mask token",
                resp.mask_word_index, resp.tokens[resp.mask_word_index]
            )));
        }
        Ok(())
    }

    /// Word-level embeddings at `layer` and the focus word's attention rows
    /// for every layer. `text` must not contain a mask placeholder unless it
    /// is already rendered for this backend.
    pub fn encode_with_focus(
        &self,
        text: &str,
        focus_word_index: usize,
        layer: usize,
    ) -> Result<EncodeResult, GatewayError> {
        if layer == 0 || layer > self.descriptor.num_layers {
            return Err(GatewayError::InvalidRequest(format!(
                "layer {layer} outside 1..={}",
                self.descriptor.num_layers
            )));
        }
        let request = EncodeRequest {
            text: collapse(text),
            layer,
            focus_word_index,
            merged: false,
        };
        let resp = self.call(Method::Encode, &request.encode(), |body| {
            let resp = EncodeResponse::decode(body)?;
            self.check_encode(&resp, focus_word_index)?;
            Ok(resp)
        })?;
        let embeddings = merge_word_pieces(&resp.piece_embeddings, &resp.word_pieces)?;
        let attention_rows = resp
            .attention_rows_per_layer
            .iter()
            .map(|row| merge_attention(row, &resp.word_pieces))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EncodeResult {
            words: resp.words,
            layer,
            focus_word_index,
            embeddings,
            attention_rows,
        })
    }

    fn check_encode(&self, resp: &EncodeResponse, focus: usize) -> Result<(), GatewayError> {
        if focus >= resp.words.len() {
            return Err(GatewayError::Mismatch(format!(
                "focus word {focus} outside {} words",
                resp.words.len()
            )));
        }
        let dim = resp.piece_embeddings[0].len();
        if dim != self.descriptor.hidden_dim {
            return Err(ProtocolError::Shape(format!(
                "embedding dimension {dim}, backend reports {}",
                self.descriptor.hidden_dim
            ))
            .into());
        }
        if resp.attention_rows_per_layer.len() != self.descriptor.num_layers {
            return Err(ProtocolError::Shape(format!(
                "{} attention rows, backend reports {} layers",
                resp.attention_rows_per_layer.len(),
                self.descriptor.num_layers
            ))
            .into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock_gateway(mock: MockBackend) -> Gateway {
        Gateway::connect(Arc::new(mock), MOCK_ENDPOINT, GatewayOptions::default()).unwrap()
    }

    #[test]
    fn render_mask_cases() {
        let roberta = BackendDescriptor {
            backend_id: "r".into(),
            endpoint: "x".into(),
            mask_token: "<mask>".into(),
            num_layers: 12,
            hidden_dim: 4,
        };
        assert_eq!(render_mask("A cat walks without [MASK].", &roberta).unwrap(), "A cat walks without <mask>.");
        let bert = BackendDescriptor { mask_token: "[MASK]".into(), ..roberta.clone() };
        assert_eq!(render_mask("A mom is not a [MASK].", &bert).unwrap(), "A mom is not a [MASK].");
        assert_eq!(render_mask("  A  mom [MASK]. ", &bert).unwrap(), "A mom [MASK].");
        assert_eq!(render_mask("[MASK] or [MASK]", &bert), Err(GatewayError::MaskCount(2)));
        assert_eq!(render_mask("none", &bert), Err(GatewayError::MaskCount(0)));
    }

    #[test]
    fn predictions_are_cached_and_stable() {
        let gw = mock_gateway(MockBackend::default());
        let s = ProbeSentence::new("s1", "A mom is not a [MASK].");
        let first = gw.predict_masked(&s, 10).unwrap();
        let second = gw.predict_masked(&s, 10).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.predictions.len(), 10);
        assert_eq!(gw.cache_stats(), CacheStats { hits: 1, misses: 1 });
        let uncached = Gateway::connect(
            Arc::new(MockBackend::default()),
            MOCK_ENDPOINT,
            GatewayOptions { cache: false, ..Default::default() },
        )
        .unwrap();
        assert_eq!(uncached.predict_masked(&s, 10).unwrap(), first);
    }

    #[test]
    fn custom_mask_token_is_rendered() {
        let gw = mock_gateway(MockBackend::default().with_mask_token("<mask>"));
        let set = gw.predict_masked(&ProbeSentence::new("s", "A cat walks without [MASK]."), 5).unwrap();
        assert_eq!(set.mask_word_index, 4);
    }

    #[test]
    fn encode_shapes() {
        let gw = mock_gateway(MockBackend::default());
        let r = gw.encode_with_focus("A mom is not a grandmother.", 5, 11).unwrap();
        assert_eq!(r.words.len(), 7);
        assert_eq!(r.embeddings.len(), 7);
        assert!(r.embeddings.iter().all(|v| v.len() == 16));
        assert_eq!(r.attention_rows.len(), 12);
        for row in &r.attention_rows {
            assert_eq!(row.len(), 7);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        }
        assert!(matches!(gw.encode_with_focus("a b", 0, 13), Err(GatewayError::InvalidRequest(_))));
        let err = gw.encode_with_focus("a b", 2, 11).unwrap_err();
        assert_eq!(err, GatewayError::Protocol(ProtocolError::Backend {
            class: "focus_out_of_range".into(),
            message: "focus word 2 outside 2 words".into(),
        }));
    }

    struct Lying;

    impl Transport for Lying {
        fn exchange(&self, method: Method, body: &str) -> Result<String, TransportError> {
            let mock = MockBackend::default();
            match method {
                Method::Info => Ok(mock.with_shape(12, 8).info().encode()),
                _ => Ok(mock.handle(method, body)),
            }
        }
    }

    #[test]
    fn shape_disagreeing_with_info_is_rejected() {
        let gw = Gateway::connect(Arc::new(Lying), "lying", GatewayOptions::default()).unwrap();
        let err = gw.encode_with_focus("a b", 0, 11).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol(ProtocolError::Shape(_))), "{err}");
    }
}
