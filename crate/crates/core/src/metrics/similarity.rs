//! Semantic similarity between a prediction and a gold answer, in `[0, 1]`.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clients::remote::JsonEndpoint;
use crate::error::{Error, Result};

pub trait SimilarityBackend: Send + Sync {
    fn similarity(&self, prediction: &str, gold: &str) -> Result<f64>;
}

fn token_set(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Jaccard overlap of lowercase alphanumeric token sets; the deterministic
/// stand-in for an embedding model. Two token-free strings score 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardSimilarity;

pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (token_set(a), token_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

impl SimilarityBackend for JaccardSimilarity {
    fn similarity(&self, prediction: &str, gold: &str) -> Result<f64> {
        Ok(jaccard(prediction, gold))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedReply {
    embedding: Vec<f64>,
}

/// Cosine similarity of remote embeddings, negative values clamped to 0.
/// Protocol: `POST {"text": ...}` returning `{"embedding": [...]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbeddingSimilarity {
    endpoint: JsonEndpoint,
}

impl RemoteEmbeddingSimilarity {
    pub fn new(url: &str, token: Option<String>, retry_limit: u32, timeout: Duration) -> Result<Self> {
        Ok(RemoteEmbeddingSimilarity {
            endpoint: JsonEndpoint::new(url, token, retry_limit, timeout)?,
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let reply: EmbedReply = self.endpoint.post(&EmbedRequest { text })?;
        Ok(reply.embedding)
    }
}

pub fn cosine01(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::TransientBackend(format!(
            "embedding dimensions differ or are empty ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

impl SimilarityBackend for RemoteEmbeddingSimilarity {
    fn similarity(&self, prediction: &str, gold: &str) -> Result<f64> {
        if prediction == gold {
            return Ok(1.0);
        }
        cosine01(&self.embed(prediction)?, &self.embed(gold)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::remote::test_server::serve;

    #[test]
    fn jaccard_fixture() {
        // (prediction, gold, |intersection|, |union|) counted by hand
        let cases: [(&str, &str, usize, usize); 10] = [
            ("General Polk", "General (Bishop) Polk.", 2, 3),
            ("Meghan asked Lizzie", "Meghan asked if Lizzie was awake", 3, 6),
            ("no", "no", 1, 1),
            ("yes", "no", 0, 2),
            ("the red car", "a red car", 2, 4),
            ("Peppe", "peppe!", 1, 1),
            ("in the morning", "the night before", 1, 5),
            ("2,500 horse fighters", "2500 horse fighters", 2, 5),
            ("a b c d", "c d e f", 2, 6),
            ("Which year?", "which year are you asking about", 2, 6),
        ];
        for (p, g, i, u) in cases {
            assert_eq!(JaccardSimilarity.similarity(p, g).unwrap(), i as f64 / u as f64, "{p} / {g}");
        }
    }

    #[test]
    fn identical_and_disjoint() {
        assert_eq!(jaccard("same text", "same text"), 1.0);
        assert_eq!(jaccard("alpha beta", "gamma delta"), 0.0);
    }

    #[test]
    fn cosine_is_clamped() {
        assert_eq!(cosine01(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
        assert!((cosine01(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn remote_embeddings() {
        let s = serve(vec![
            (200, r#"{"embedding":[1.0,0.0]}"#.into()),
            (200, r#"{"embedding":[0.0,2.0]}"#.into()),
        ]);
        let sim = RemoteEmbeddingSimilarity::new(&s.url, None, 0, Duration::from_secs(5)).unwrap();
        assert_eq!(sim.similarity("a", "b").unwrap(), 0.0);
        let log = s.requests.lock().unwrap();
        assert_eq!(log[0].1, r#"{"text":"a"}"#);
    }
}
