use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fwprobe_core::forge::ProbeSentence;
use fwprobe_core::gateway::wire::{EncodeRequest, PredictRequest};
use fwprobe_core::gateway::{
    pieces_of, render_mask, segment, BackendDescriptor, Gateway, GatewayError, GatewayOptions, Method, MockBackend,
    Transport, TransportError, DEFAULT_VOCAB, MOCK_ENDPOINT,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference hash: the `fnv` crate's FNV-1a followed by splitmix64 mixing.
fn ref_unit(key: &str) -> f64 {
    let mut h = fnv::FnvHasher::default();
    h.write(key.as_bytes());
    let mut z = h.finish();
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    ((z >> 11) + 1) as f64 / 9007199254740992.0
}

const WORDS: &[&str] = &[
    "the", "a", "cat", "dog", "walks", "runs", "without", "with", "never", "always", "bird", "tree", "house",
    "is", "not", "every", "some", "no", "guitarist", "plays", "quickly", "under", "over", "teacher",
];

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(3..9);
    let mut words: Vec<String> = (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    let at = rng.gen_range(0..=n);
    words.insert(at, "[MASK]".into());
    format!("{}.", words.join(" "))
}

fn descriptor(mask: &str) -> BackendDescriptor {
    BackendDescriptor {
        backend_id: "x".into(),
        endpoint: "e".into(),
        mask_token: mask.into(),
        num_layers: 12,
        hidden_dim: 16,
    }
}

#[test]
fn render_mask_examples() {
    assert_eq!(
        render_mask("A cat walks without [MASK].", &descriptor("<mask>")).unwrap(),
        "A cat walks without <mask>."
    );
    assert_eq!(render_mask("A mom is not a [MASK].", &descriptor("[MASK]")).unwrap(), "A mom is not a [MASK].");
    assert_eq!(render_mask("  A  mom is\tnot a [MASK]. ", &descriptor("[MASK]")).unwrap(), "A mom is not a [MASK].");
    assert!(matches!(
        render_mask("[MASK] is a [MASK].", &descriptor("[MASK]")),
        Err(GatewayError::MaskCount(2))
    ));
    assert!(matches!(render_mask("no mask", &descriptor("[MASK]")), Err(GatewayError::MaskCount(0))));
}

#[test]
fn mock_predictions_match_reference_hash() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in [0u64, 3, 99] {
        let mock = MockBackend::new(seed, DEFAULT_VOCAB);
        for _ in 0..20 {
            let text = random_sentence(&mut rng);
            let resp = mock.predict(&PredictRequest { text: text.clone(), top_k: 10 }).unwrap();
            let scores: Vec<f64> = DEFAULT_VOCAB.iter().map(|v| ref_unit(&format!("{seed}|predict|{text}|{v}"))).collect();
            let total: f64 = scores.iter().sum();
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            assert_eq!(resp.predictions.len(), 10);
            for (p, &i) in resp.predictions.iter().zip(&order) {
                assert_eq!(p.word, DEFAULT_VOCAB[i]);
                assert_eq!(p.prob.to_bits(), (scores[i] / total).to_bits());
            }
            let probs: f64 = resp.predictions.iter().map(|p| p.prob).sum();
            assert!(probs <= 1.0);
        }
    }
}

#[test]
fn mock_embeddings_are_a_hash_of_piece_position_and_layer() {
    let mock = MockBackend::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let text = random_sentence(&mut rng).replace("[MASK]", "strings");
        let layer = rng.gen_range(1..=12);
        let resp = mock
            .encode(&EncodeRequest {
                text: text.clone(),
                layer,
                focus_word_index: 0,
                merged: false,
            })
            .unwrap();
        let pieces: Vec<String> = segment(&text, "[MASK]").iter().flat_map(|w| pieces_of(w, "[MASK]")).collect();
        assert_eq!(pieces.len(), resp.piece_embeddings.len());
        for (i, (piece, v)) in pieces.iter().zip(&resp.piece_embeddings).enumerate() {
            assert_eq!(v.len(), 16);
            for (d, x) in v.iter().enumerate() {
                let expected = 2.0 * ref_unit(&format!("0|{piece}|{i}|{layer}|{d}")) - 1.0;
                assert_eq!(x.to_bits(), expected.to_bits());
            }
        }
    }
}

#[test]
fn mock_is_deterministic_and_five_words_give_five_vectors() {
    let a = MockBackend::default();
    let b = MockBackend::default();
    let req = EncodeRequest {
        text: "A cat walks without legs".into(),
        layer: 11,
        focus_word_index: 4,
        merged: false,
    };
    assert_eq!(a.encode(&req).unwrap(), b.encode(&req).unwrap());
    let gw = Gateway::connect(Arc::new(a), MOCK_ENDPOINT, GatewayOptions::default()).unwrap();
    let r = gw.encode_with_focus("A cat walks without legs", 4, 11).unwrap();
    assert_eq!(r.embeddings.len(), 5);
    assert_eq!(r.attention_rows.len(), 12);
    for row in &r.attention_rows {
        assert_eq!(row.len(), 5);
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-4);
        assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mock").join(name)
}

#[test]
fn different_seeds_change_top_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let a = MockBackend::new(0, DEFAULT_VOCAB);
    let b = MockBackend::new(1, DEFAULT_VOCAB);
    let differing = (0..100)
        .filter(|_| {
            let req = PredictRequest {
                text: random_sentence(&mut rng),
                top_k: 1,
            };
            a.predict(&req).unwrap().predictions[0].word != b.predict(&req).unwrap().predictions[0].word
        })
        .count();
    assert!(differing >= 90, "{differing}");
    let frozen: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("seed_divergence.json")).unwrap()).unwrap();
    assert_eq!(frozen["differing_top1"], differing);
}

#[test]
fn cache_hit_equals_miss() {
    let gw = Gateway::connect(Arc::new(MockBackend::default()), MOCK_ENDPOINT, GatewayOptions::default()).unwrap();
    let s = ProbeSentence::new("s", "A cat walks without [MASK].");
    let miss = gw.predict_masked(&s, 10).unwrap();
    let hit = gw.predict_masked(&s, 10).unwrap();
    assert_eq!(miss, hit);
    let e1 = gw.encode_with_focus("A cat walks without legs.", 4, 11).unwrap();
    let e2 = gw.encode_with_focus("A cat walks without legs.", 4, 11).unwrap();
    assert_eq!(e1, e2);
    let stats = gw.cache_stats();
    assert_eq!((stats.hits, stats.misses), (2, 2));

    let uncached = Gateway::connect(
        Arc::new(MockBackend::default()),
        MOCK_ENDPOINT,
        GatewayOptions { cache: false, ..Default::default() },
    )
    .unwrap();
    assert_eq!(uncached.predict_masked(&s, 10).unwrap(), miss);
}

/// Counts concurrent exchanges and sleeps inside each one.
struct Slow {
    inner: MockBackend,
    now: AtomicUsize,
    peak: Mutex<usize>,
}

impl Transport for Slow {
    fn exchange(&self, method: Method, body: &str) -> Result<String, TransportError> {
        let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
        {
            let mut peak = self.peak.lock().unwrap();
            *peak = (*peak).max(n);
        }
        std::thread::sleep(Duration::from_millis(5));
        self.now.fetch_sub(1, Ordering::SeqCst);
        self.inner.exchange(method, body)
    }
}

#[test]
fn in_flight_requests_are_bounded() {
    let slow = Arc::new(Slow {
        inner: MockBackend::default(),
        now: AtomicUsize::new(0),
        peak: Mutex::new(0),
    });
    let gw = Arc::new(
        Gateway::connect(slow.clone(), MOCK_ENDPOINT, GatewayOptions { max_in_flight: 2, cache: false }).unwrap(),
    );
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let gw = Arc::clone(&gw);
            std::thread::spawn(move || {
                for j in 0..4 {
                    gw.predict_masked(&ProbeSentence::new("s", format!("Item {i} {j} is a [MASK].")), 10).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert!(*slow.peak.lock().unwrap() <= 2);
}

#[test]
fn backend_errors_surface_with_their_class() {
    let gw = Gateway::connect(Arc::new(MockBackend::default()), MOCK_ENDPOINT, GatewayOptions::default()).unwrap();
    let err = gw.predict_masked(&ProbeSentence::new("s", "A cat is a [MASK]."), 51).unwrap_err();
    match err {
        GatewayError::Protocol(e) => assert_eq!(e.class(), "backend"),
        other => panic!("{other}"),
    }
    assert!(gw.encode_with_focus("A cat.", 0, 13).is_err());
    assert!(gw.encode_with_focus("A cat.", 7, 1).is_err());
}

#[test]
fn custom_mask_token_is_rendered() {
    let mock = MockBackend::default().with_mask_token("<mask>").with_backend_id("mock-roberta");
    let gw = Gateway::connect(Arc::new(mock), "builtin:mock", GatewayOptions::default()).unwrap();
    assert_eq!(gw.descriptor().mask_token, "<mask>");
    let set = gw.predict_masked(&ProbeSentence::new("s", "A cat walks without [MASK]."), 10).unwrap();
    assert_eq!(set.mask_word_index, 4);
    assert_eq!(set.backend_id, "mock-roberta");
}
