//! Text embeddings, cosine similarity and exact top-k retrieval.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::remote::{HttpClient, RemoteConfig};
use crate::text;

pub const DEFAULT_DIMENSION: usize = 384;

/// A dense vector with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding {
    values: Vec<f32>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        let norm = values
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt();
        Embedding { values, norm }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn scaled(&self, factor: f32) -> Embedding {
        Embedding::new(self.values.iter().map(|v| v * factor).collect())
    }
}

impl From<Vec<f32>> for Embedding {
    fn from(values: Vec<f32>) -> Self {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dimension() != b.dimension() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dimension(),
            b.dimension()
        )));
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok(cosine_unchecked(a, b))
}

fn cosine_unchecked(a: &Embedding, b: &Embedding) -> f64 {
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    // `+ 0.0` folds -0.0 into 0.0 so equal scores compare equal below.
    (dot / (a.norm * b.norm)).clamp(-1.0, 1.0) + 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored<K> {
    pub key: K,
    pub score: f64,
}

/// Ranking order: higher score first, then smaller key.
pub fn rank_order<K: Ord>(a: &Scored<K>, b: &Scored<K>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.key.cmp(&b.key))
}

// Heap wrapper whose maximum is the worst-ranked item.
struct Worst<K>(Scored<K>);

impl<K: Ord> PartialEq for Worst<K> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<K: Ord> Eq for Worst<K> {}
impl<K: Ord> PartialOrd for Worst<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<K: Ord> Ord for Worst<K> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

/// The `k` candidates most similar to `query`, best first. Ties go to the
/// smaller key.
pub fn top_k<'a, K, I>(candidates: I, query: &Embedding, k: usize) -> Result<Vec<Scored<K>>>
where
    K: Ord,
    I: IntoIterator<Item = (K, &'a Embedding)>,
{
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if query.norm == 0.0 {
        return Err(Error::invalid("query vector is zero"));
    }
    let mut heap: BinaryHeap<Worst<K>> = BinaryHeap::with_capacity(k + 1);
    for (key, vector) in candidates {
        let score = cosine_similarity(vector, query)?;
        let item = Worst(Scored { key, score });
        if heap.len() < k {
            heap.push(item);
        } else if let Some(worst) = heap.peek() {
            if item < *worst {
                heap.pop();
                heap.push(item);
            }
        }
    }
    Ok(heap.into_sorted_vec().into_iter().map(|w| w.0).collect())
}

/// Text-to-vector backend. Implementations must be deterministic per text
/// and never return a zero vector for non-empty input.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;

    fn dimension(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>>;

    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        self.embed_batch(&[text])?
            .pop()
            .ok_or_else(|| Error::Parse("provider returned no embedding".into()))
    }
}

/// Offline provider: signed feature hashing of content words into `dimension`
/// buckets, plus a constant offset on component 0 so no vector is zero.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    id: String,
    dimension: usize,
    seed: u64,
}

impl HashedBowEmbedder {
    pub const DEFAULT_SEED: u64 = 0x5eed_0fb0;
    pub const OFFSET: f32 = 1e-3;

    pub fn new(dimension: usize, seed: u64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(HashedBowEmbedder {
            id: format!("hashed-bow-{dimension}-{seed:x}"),
            dimension,
            seed,
        })
    }

    fn bucket(&self, word: &str) -> (usize, f32) {
        let h = fnv1a(self.seed, word.as_bytes());
        let idx = (h % self.dimension as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }

    fn embed_one(&self, text: &str) -> Embedding {
        let mut values = vec![0.0f32; self.dimension];
        for word in text::content_words(text) {
            let (idx, sign) = self.bucket(&word);
            values[idx] += sign;
        }
        values[0] += Self::OFFSET;
        Embedding::new(values)
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder::new(DEFAULT_DIMENSION, Self::DEFAULT_SEED).expect("nonzero dimension")
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // final avalanche so the sign bit depends on every byte
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

impl EmbeddingProvider for HashedBowEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::invalid("cannot embed empty text"));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// HTTP embedding service speaking `{"input": [..], "model": ..}` →
/// `{"data": [{"embedding": [..]}]}`.
pub struct RemoteEmbedder {
    id: String,
    model: String,
    dimension: usize,
    client: HttpClient,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig, dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(RemoteEmbedder {
            id: format!("remote:{}", config.model),
            model: config.model.clone(),
            dimension,
            client: HttpClient::new(config)?,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let body = serde_json::json!({ "input": texts, "model": self.model });
        let value = self.client.post_json(&body)?;
        let parsed: EmbeddingResponse = serde_json::from_value(value)
            .map_err(|e| Error::Parse(format!("embedding response: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(Error::Parse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dimension {
                    return Err(Error::Parse(format!(
                        "expected dimension {}, got {}",
                        self.dimension,
                        d.embedding.len()
                    )));
                }
                let e = Embedding::new(d.embedding);
                if e.norm() == 0.0 {
                    return Err(Error::Parse("provider returned a zero vector".into()));
                }
                Ok(e)
            })
            .collect()
    }
}

/// Memoizes another provider. Topic and persona texts get re-scored on every
/// query, so most lookups hit.
pub struct CachedEmbedder {
    inner: Arc<dyn EmbeddingProvider>,
    cache: RwLock<HashMap<String, Embedding>>,
    capacity: usize,
}

impl CachedEmbedder {
    pub fn new(inner: Arc<dyn EmbeddingProvider>, capacity: usize) -> Self {
        CachedEmbedder {
            inner,
            cache: RwLock::new(HashMap::new()),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EmbeddingProvider for CachedEmbedder {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let mut out: Vec<Option<Embedding>> = {
            let cache = self.cache.read().unwrap_or_else(|p| p.into_inner());
            texts.iter().map(|t| cache.get(*t).cloned()).collect()
        };
        let missing: Vec<&str> = texts
            .iter()
            .zip(&out)
            .filter(|(_, hit)| hit.is_none())
            .map(|(t, _)| *t)
            .collect();
        if !missing.is_empty() {
            let fresh = self.inner.embed_batch(&missing)?;
            let mut cache = self.cache.write().unwrap_or_else(|p| p.into_inner());
            if cache.len() + fresh.len() > self.capacity {
                cache.clear();
            }
            let mut fresh = missing.iter().zip(fresh);
            for slot in out.iter_mut().filter(|s| s.is_none()) {
                let (text, emb) = fresh.next().expect("one embedding per missing text");
                cache.insert((*text).to_string(), emb.clone());
                *slot = Some(emb);
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled")).collect())
    }
}

/// Default HTTP timeout used by remote providers when none is configured.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

    fn v(values: &[f32]) -> Embedding {
        Embedding::new(values.to_vec())
    }

    /// Full-sort oracle: score everything, sort, truncate.
    fn brute_force(cands: &[(u32, Embedding)], q: &Embedding, k: usize) -> Vec<(u32, f64)> {
        let mut all: Vec<(u32, f64)> = cands
            .iter()
            .map(|(key, e)| {
                let dot: f64 = e
                    .values()
                    .iter()
                    .zip(q.values())
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                (*key, (dot / (e.norm() * q.norm())).clamp(-1.0, 1.0) + 0.0)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn self_similarity_is_one() {
        let a = v(&[0.3, -2.0, 5.5]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_vectors() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn forty_five_degrees() {
        let s = cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let err = cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn top_k_of_nothing() {
        let none: Vec<(u32, &Embedding)> = vec![];
        assert!(top_k(none, &v(&[1.0]), 5).unwrap().is_empty());
    }

    #[test]
    fn top_k_rejects_zero_k() {
        let none: Vec<(u32, &Embedding)> = vec![];
        assert!(top_k(none, &v(&[1.0]), 0).is_err());
    }

    #[test]
    fn exact_match_ranks_first() {
        let q = v(&[0.2, 0.9, -0.1]);
        let cands = [(1u32, v(&[1.0, 0.0, 0.0])), (2, q.clone()), (3, v(&[0.0, 1.0, 0.0]))];
        let got = top_k(cands.iter().map(|(k, e)| (*k, e)), &q, 2).unwrap();
        assert_eq!(got[0].key, 2);
        assert!((got[0].score - 1.0).abs() < 1e-9);
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn ties_go_to_smaller_key() {
        let q = v(&[1.0, 0.0]);
        let cands = [(9u32, v(&[1.0, 1.0])), (4, v(&[1.0, 1.0])), (7, v(&[2.0, 2.0]))];
        let got = top_k(cands.iter().map(|(k, e)| (*k, e)), &q, 3).unwrap();
        let keys: Vec<_> = got.iter().map(|s| s.key).collect();
        assert_eq!(keys, vec![4, 7, 9]);
    }

    #[test]
    fn hundred_random_vectors_match_full_sort() {
        use rand_like::Lcg;
        let mut rng = Lcg(42);
        let cands: Vec<(u32, Embedding)> =
            (0..100).map(|i| (i, Embedding::new(rng.vec(16)))).collect();
        let q = Embedding::new(rng.vec(16));
        let got = top_k(cands.iter().map(|(k, e)| (*k, e)), &q, 7).unwrap();
        let want = brute_force(&cands, &q, 7);
        assert_eq!(got.iter().map(|s| s.key).collect::<Vec<_>>(), want.iter().map(|w| w.0).collect::<Vec<_>>());
    }

    #[test]
    fn hashed_bow_is_deterministic() {
        let p = HashedBowEmbedder::default();
        assert_eq!(p.embed("jazz").unwrap(), p.embed("jazz").unwrap());
        assert_eq!(p.embed("jazz").unwrap().dimension(), 384);
    }

    #[test]
    fn hashed_bow_distinguishes_words() {
        let p = HashedBowEmbedder::default();
        let jazz = p.embed("jazz").unwrap();
        let workshop = p.embed("workshop").unwrap();
        assert_ne!(jazz, workshop);
        // One-hot-plus-offset vectors in different buckets: the only shared
        // mass is the component-0 offset.
        let s = cosine_similarity(&jazz, &workshop).unwrap();
        assert!(s < 1.0);
        assert!(s.abs() < 1e-5, "unexpected overlap {s}");
    }

    #[test]
    fn hashed_bow_never_zero() {
        let p = HashedBowEmbedder::default();
        for t in ["the", "a an the", "!!!", "x"] {
            assert!(p.embed(t).unwrap().norm() > 0.0);
        }
        assert!(p.embed("   ").is_err());
    }

    #[test]
    fn shared_words_raise_similarity() {
        let p = HashedBowEmbedder::default();
        let q = p.embed("how is my jazz practice going").unwrap();
        let near = p.embed("jazz practice").unwrap();
        let far = p.embed("music workshop").unwrap();
        assert!(cosine_similarity(&q, &near).unwrap() > 0.6);
        assert!(cosine_similarity(&q, &far).unwrap() < 0.05);
    }

    struct Counting {
        inner: HashedBowEmbedder,
        calls: AtomicUsize,
    }

    impl EmbeddingProvider for Counting {
        fn id(&self) -> &str {
            self.inner.id()
        }
        fn dimension(&self) -> usize {
            self.inner.dimension()
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
            self.calls.fetch_add(texts.len(), AtomicOrdering::SeqCst);
            self.inner.embed_batch(texts)
        }
    }

    #[test]
    fn cache_avoids_recomputation() {
        let counting = Arc::new(Counting {
            inner: HashedBowEmbedder::default(),
            calls: AtomicUsize::new(0),
        });
        let cached = CachedEmbedder::new(counting.clone(), 100);
        let a = cached.embed("jazz").unwrap();
        let b = cached.embed("jazz").unwrap();
        assert_eq!(a, b);
        let batch = cached.embed_batch(&["jazz", "piano", "jazz"]).unwrap();
        assert_eq!(batch[0], a);
        assert_eq!(batch[2], a);
        assert_eq!(counting.calls.load(AtomicOrdering::SeqCst), 2);
        assert_eq!(cached.len(), 2);
    }

    #[test]
    fn unreachable_remote_is_a_provider_error() {
        let cfg = RemoteConfig {
            endpoint: "http://127.0.0.1:9/v1/embeddings".into(),
            model: "m".into(),
            token: None,
            timeout: Duration::from_millis(200),
            retries: 1,
            max_concurrent: 2,
        };
        let remote = RemoteEmbedder::new(cfg, 8).unwrap();
        let err = remote.embed("jazz").unwrap_err();
        match err {
            Error::Provider { attempts, retryable, .. } => {
                assert_eq!(attempts, 2);
                assert!(retryable);
            }
            other => panic!("expected provider error, got {other:?}"),
        }
    }

    mod rand_like {
        /// Tiny deterministic generator so unit tests need no extra crates.
        pub struct Lcg(pub u64);
        impl Lcg {
            pub fn next_f32(&mut self) -> f32 {
                self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((self.0 >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            }
            pub fn vec(&mut self, n: usize) -> Vec<f32> {
                (0..n).map(|_| self.next_f32()).collect()
            }
        }
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(-1.0f32..1.0, dim)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in nonzero_vec(8), b in nonzero_vec(8)) {
            let (a, b) = (Embedding::new(a), Embedding::new(b));
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn top_k_matches_oracle(
            cands in proptest::collection::vec(nonzero_vec(6), 0..60),
            q in nonzero_vec(6),
            k in 1usize..10,
        ) {
            let cands: Vec<(u32, Embedding)> = cands.into_iter().enumerate().map(|(i, v)| (i as u32, Embedding::new(v))).collect();
            let q = Embedding::new(q);
            let got: Vec<u32> = top_k(cands.iter().map(|(k, e)| (*k, e)), &q, k).unwrap().iter().map(|s| s.key).collect();
            let want: Vec<u32> = brute_force(&cands, &q, k).iter().map(|w| w.0).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn ranking_ignores_query_scale(
            cands in proptest::collection::vec(nonzero_vec(6), 1..40),
            q in nonzero_vec(6),
            scale_exp in -8i32..8,
        ) {
            // Power-of-two scales are exact in binary floating point, so the
            // comparison isolates the cosine's magnitude invariance.
            let cands: Vec<(u32, Embedding)> = cands.into_iter().enumerate().map(|(i, v)| (i as u32, Embedding::new(v))).collect();
            let q = Embedding::new(q);
            let scaled = q.scaled(2f32.powi(scale_exp));
            let a: Vec<u32> = top_k(cands.iter().map(|(k, e)| (*k, e)), &q, 5).unwrap().iter().map(|s| s.key).collect();
            let b: Vec<u32> = top_k(cands.iter().map(|(k, e)| (*k, e)), &scaled, 5).unwrap().iter().map(|s| s.key).collect();
            prop_assert_eq!(a, b);
        }
    }
}
