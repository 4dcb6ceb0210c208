//! Prefix features for the router.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::stable_hash;

pub const EMBED_DIM: usize = 768;
pub const NGRAM_SIZES: [usize; 3] = [3, 4, 5];

/// A feature vector and whether it came from the fallback after the
/// configured endpoint failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub vector: Vec<f32>,
    pub degraded: bool,
}

/// Signed feature hashing of character n-grams, L2-normalized.
///
/// The text is padded as `<text>` so that short strings still produce
/// n-grams. Blank input maps to the zero vector.
pub fn hashed_embedding(text: &str) -> Vec<f32> {
    let mut v = vec![0f32; EMBED_DIM];
    if text.trim().is_empty() {
        return v;
    }
    let chars: Vec<char> = std::iter::once('<')
        .chain(text.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut buf = String::new();
    for n in NGRAM_SIZES {
        for w in chars.windows(n) {
            buf.clear();
            buf.extend(w);
            let h = stable_hash(buf.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % EMBED_DIM as u64) as usize] += sign;
        }
    }
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
    }
    v
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
}

/// Where feature vectors come from. Without an endpoint every call uses
/// [`hashed_embedding`].
///
/// Endpoint wire format: `POST {url}/embed` with `{"text": str}` answered
/// by `{"embedding": [f32; 768]}`.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingProvider {
    endpoint: Option<(ureq::Agent, String)>,
}

impl EmbeddingProvider {
    pub fn hashed() -> Self {
        EmbeddingProvider::default()
    }

    pub fn endpoint(url: impl Into<String>, timeout_ms: u64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms.max(1))))
            .build()
            .new_agent();
        let url = format!("{}/embed", url.into().trim_end_matches('/'));
        EmbeddingProvider {
            endpoint: Some((agent, url)),
        }
    }

    pub fn is_hashed(&self) -> bool {
        self.endpoint.is_none()
    }

    pub fn embed(&self, text: &str) -> Embedded {
        if let Some((agent, url)) = &self.endpoint {
            if text.trim().is_empty() {
                return Embedded {
                    vector: vec![0.0; EMBED_DIM],
                    degraded: false,
                };
            }
            match fetch(agent, url, text) {
                Ok(vector) => return Embedded { vector, degraded: false },
                Err(e) => log::warn!("embedding endpoint failed, using hashed features: {e}"),
            }
            return Embedded {
                vector: hashed_embedding(text),
                degraded: true,
            };
        }
        Embedded {
            vector: hashed_embedding(text),
            degraded: false,
        }
    }
}

fn fetch(agent: &ureq::Agent, url: &str, text: &str) -> Result<Vec<f32>> {
    let resp: EmbedResponse = agent
        .post(url)
        .send_json(EmbedRequest { text })
        .map_err(|e| Error::Endpoint(e.to_string()))?
        .body_mut()
        .read_json()
        .map_err(|e| Error::Endpoint(e.to_string()))?;
    if resp.embedding.len() != EMBED_DIM {
        return Err(Error::Endpoint(format!(
            "expected {EMBED_DIM} dimensions, got {}",
            resp.embedding.len()
        )));
    }
    let norm = resp.embedding.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(resp.embedding);
    }
    Ok(resp.embedding.iter().map(|x| (f64::from(*x) / norm) as f32).collect())
}
