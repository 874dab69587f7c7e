//! Unit-normalized text embeddings and the providers that produce them.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::provider::{fnv1a64, HttpSettings, JsonClient, ProviderError};

pub const DEFAULT_DIMENSION: usize = 384;
pub const DEFAULT_BATCH_SIZE: usize = 64;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, thiserror::Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("text {index} has no embeddable content")]
    ZeroContent { index: usize },
    #[error("nothing to embed")]
    EmptyBatch,
    #[error("vector is not unit length (norm {norm})")]
    NotNormalized { norm: f64 },
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Dense vector with unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    provider_id: String,
}

impl Embedding {
    /// Normalizes `values`. A zero vector has no direction and is rejected.
    pub fn normalized(mut values: Vec<f64>, provider_id: impl Into<String>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::ZeroDimension);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(EmbeddingError::ZeroContent { index: 0 });
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            values,
            provider_id: provider_id.into(),
        })
    }

    /// Accepts stored values as-is when they are already unit length, so that
    /// reloading a snapshot is bit-exact.
    pub fn from_unit(values: Vec<f64>, provider_id: impl Into<String>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::ZeroDimension);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbeddingError::NotNormalized { norm });
        }
        Ok(Self {
            values,
            provider_id: provider_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Dot product of unit vectors, clamped against rounding to `[-1, 1]`.
pub fn cosine_similarity(u: &Embedding, v: &Embedding) -> Result<f64, EmbeddingError> {
    if u.dimension() != v.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: u.dimension(),
            actual: v.dimension(),
        });
    }
    Ok(dot(u.values(), v.values()).clamp(-1.0, 1.0))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub trait Embedder: Send + Sync {
    fn provider_id(&self) -> &str;

    fn dimension(&self) -> usize;

    /// One vector per text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError>;

    fn embed_one(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        Ok(self.embed(&[text])?.remove(0))
    }
}

/// Deterministic provider: lower-cased tokens are feature-hashed into
/// `dimension` buckets (seeded FNV-1a), counted, then L2-normalized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
    id: String,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Result<Self, EmbeddingError> {
        if dimension == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        Ok(Self {
            dimension,
            seed,
            id: format!("hash-d{dimension}-s{seed}"),
        })
    }

    /// Normalized token form that is hashed; empty for punctuation-only tokens.
    pub fn normalize_token(token: &str) -> String {
        token
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase()
    }

    /// Bucket a normalized token hashes to.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(&[&self.seed.to_le_bytes(), token.as_bytes()]) % self.dimension as u64) as usize
    }

    fn embed_text(&self, index: usize, text: &str) -> Result<Embedding, EmbeddingError> {
        let mut counts = vec![0.0; self.dimension];
        let mut any = false;
        for token in text.split_whitespace() {
            let token = Self::normalize_token(token);
            if token.is_empty() {
                continue;
            }
            counts[self.bucket(&token)] += 1.0;
            any = true;
        }
        if !any {
            return Err(EmbeddingError::ZeroContent { index });
        }
        Embedding::normalized(counts, self.id.clone())
    }
}

impl Embedder for HashEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyBatch);
        }
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| self.embed_text(i, t))
            .collect()
    }
}

/// HTTP provider speaking `{"input": [...], "model": ...}` →
/// `{"data": [{"embedding": [...]}, ...]}`.
#[derive(Debug)]
pub struct RemoteEmbedder {
    client: JsonClient,
    dimension: usize,
    batch_size: usize,
    id: String,
}

impl RemoteEmbedder {
    pub fn new(settings: HttpSettings, dimension: usize, batch_size: usize) -> Result<Self, EmbeddingError> {
        if dimension == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        let id = format!("remote:{}", settings.model);
        Ok(Self {
            client: JsonClient::new(settings),
            dimension,
            batch_size: batch_size.max(1),
            id,
        })
    }

    fn embed_batch(&self, offset: usize, batch: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        let reply = self.client.post(&json!({
            "input": batch,
            "model": self.client.settings().model,
        }))?;
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::InvalidResponse("missing `data` array".into()))?;
        if data.len() != batch.len() {
            return Err(ProviderError::InvalidResponse(format!(
                "expected {} embeddings, got {}",
                batch.len(),
                data.len()
            ))
            .into());
        }
        let mut rows: Vec<(usize, &Value)> = data
            .iter()
            .enumerate()
            .map(|(pos, item)| {
                let idx = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
                (idx, item)
            })
            .collect();
        rows.sort_by_key(|(idx, _)| *idx);

        rows.into_iter()
            .enumerate()
            .map(|(i, (_, item))| {
                let values: Vec<f64> = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ProviderError::InvalidResponse(format!("item {i} has no embedding")))?
                    .iter()
                    .map(|v| v.as_f64().unwrap_or(f64::NAN))
                    .collect();
                if values.len() != self.dimension {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: self.dimension,
                        actual: values.len(),
                    });
                }
                Embedding::normalized(values, self.id.clone()).map_err(|e| match e {
                    EmbeddingError::ZeroContent { .. } => EmbeddingError::ZeroContent { index: offset + i },
                    other => other,
                })
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyBatch);
        }
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::ZeroContent { index });
        }
        let mut out = Vec::with_capacity(texts.len());
        for (b, batch) in texts.chunks(self.batch_size).enumerate() {
            out.extend(self.embed_batch(b * self.batch_size, batch)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dimension: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub remote: HttpSettings,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dimension: DEFAULT_DIMENSION,
            seed: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            remote: HttpSettings::default(),
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbeddingError> {
        Ok(match self.kind {
            EmbedderKind::Hash => Box::new(HashEmbedder::new(self.dimension, self.seed)?),
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(
                self.remote.clone(),
                self.dimension,
                self.batch_size,
            )?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit(values: &[f64]) -> Embedding {
        Embedding::normalized(values.to_vec(), "t").unwrap()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashEmbedder::new(DEFAULT_DIMENSION, 7).unwrap();
        let out = e.embed(&["Agents trade tokens", "Agents trade tokens"]).unwrap();
        assert_eq!(out[0], out[1]);
        let norm: f64 = out[0].values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(out[0].dimension(), 384);
    }

    #[test]
    fn disjoint_buckets_are_orthogonal() {
        let e = HashEmbedder::new(DEFAULT_DIMENSION, 0).unwrap();
        let left = ["market", "volatility", "leverage"];
        let right = ["meaning", "existence", "reflection"];
        let lb: Vec<usize> = left.iter().map(|t| e.bucket(t)).collect();
        let rb: Vec<usize> = right.iter().map(|t| e.bucket(t)).collect();
        assert!(lb.iter().all(|b| !rb.contains(b)), "fixture collides: {lb:?} {rb:?}");
        let v = e.embed(&[&left.join(" "), &right.join(" ")]).unwrap();
        assert_eq!(cosine_similarity(&v[0], &v[1]).unwrap(), 0.0);
    }

    #[test]
    fn empty_text_is_zero_content() {
        let e = HashEmbedder::new(8, 0).unwrap();
        assert!(matches!(e.embed(&["ok", "  !! "]), Err(EmbeddingError::ZeroContent { index: 1 })));
        assert!(matches!(e.embed(&[]), Err(EmbeddingError::EmptyBatch)));
    }

    #[test]
    fn cosine_examples() {
        let x = unit(&[1.0, 0.0]);
        let y = unit(&[0.0, 1.0]);
        let diag = unit(&[1.0, 1.0]);
        assert_eq!(cosine_similarity(&x, &x).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_similarity(&x, &diag).unwrap(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!(matches!(
            cosine_similarity(&x, &unit(&[1.0, 0.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn from_unit_rejects_unnormalized() {
        assert!(Embedding::from_unit(vec![1.0, 1.0], "t").is_err());
        assert!(Embedding::from_unit(vec![0.6, 0.8], "t").is_ok());
    }

    proptest! {
        #[test]
        fn cosine_bounded_and_symmetric(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let (u, v) = (unit(&a), unit(&b));
            let c = cosine_similarity(&u, &v).unwrap();
            prop_assert!(c.abs() <= 1.0);
            prop_assert_eq!(c, cosine_similarity(&v, &u).unwrap());
        }

        #[test]
        fn permutation_equivariant(words in prop::collection::vec("[a-z]{1,8}", 2..8), rot in 0usize..8) {
            let e = HashEmbedder::new(32, 3).unwrap();
            let texts: Vec<&str> = words.iter().map(String::as_str).collect();
            let mut rotated = texts.clone();
            let r = rot % texts.len();
            rotated.rotate_left(r);
            let base = e.embed(&texts).unwrap();
            let mut expected = base.clone();
            expected.rotate_left(r);
            prop_assert_eq!(e.embed(&rotated).unwrap(), expected);
        }
    }
}
