//! Text and image embedding providers.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::normalize;
use crate::remote::{HttpConfig, JsonClient};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("embedding provider failure: {0}")]
pub struct ProviderFailure(pub String);

/// Maps captions and image references to unit vectors of one dimension.
///
/// Implementations must be deterministic per input.
pub trait EmbeddingProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure>;
    fn embed_images(&self, images: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure> {
        (**self).embed_texts(texts)
    }

    fn embed_images(&self, images: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure> {
        (**self).embed_images(images)
    }
}

/// Offline provider: each input's vector is a keyed SplitMix64 stream over
/// the input string, mapped to `[-1, 1)` per component and unit-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockProvider {
    pub dim: usize,
    pub key: u64,
}

impl MockProvider {
    pub fn new(dim: usize, key: u64) -> Self {
        Self { dim, key }
    }

    pub fn vector(&self, input: &str) -> Vec<f64> {
        let mut stream = rng::stream(self.key, input);
        let raw: Vec<f64> = (0..self.dim).map(|_| 2.0 * rng::draw_unit(&mut stream) - 1.0).collect();
        // an all-zero draw has probability 2^-53 per component; fall back to e_0
        normalize(&raw).unwrap_or_else(|_| {
            let mut e = vec![0.0; self.dim];
            e[0] = 1.0;
            e
        })
    }
}

impl EmbeddingProvider for MockProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure> {
        Ok(texts.iter().map(|t| self.vector(&format!("text:{t}"))).collect())
    }

    fn embed_images(&self, images: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure> {
        Ok(images.iter().map(|i| self.vector(&format!("image:{i}"))).collect())
    }
}

/// Makes any provider shareable across threads by serializing its calls.
#[derive(Debug)]
pub struct SerializedProvider<P> {
    inner: Mutex<P>,
}

impl<P> SerializedProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner: Mutex::new(inner) }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for SerializedProvider<P> {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure> {
        let guard = self.inner.lock().map_err(|_| ProviderFailure("provider lock poisoned".into()))?;
        guard.embed_texts(texts)
    }

    fn embed_images(&self, images: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure> {
        let guard = self.inner.lock().map_err(|_| ProviderFailure("provider lock poisoned".into()))?;
        guard.embed_images(images)
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    items: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

/// HTTP provider: `POST {base}/embed_texts` and `POST {base}/embed_images`
/// with `{"items": [...]}`, answered by `{"dim": n, "vectors": [[...]]}`.
///
/// The first response fixes the dimension unless one is configured; any later
/// drift is a failure. Returned vectors are re-normalized.
#[derive(Debug)]
pub struct RemoteProvider {
    base_url: String,
    client: JsonClient,
    dim: Mutex<Option<usize>>,
}

impl RemoteProvider {
    pub fn new(base_url: impl Into<String>, http: &HttpConfig, dim: Option<usize>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            client: JsonClient::new(http),
            dim: Mutex::new(dim),
        }
    }

    fn call(&self, endpoint: &str, items: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure> {
        let url = format!("{}/{endpoint}", self.base_url);
        let resp: EmbedResponse = self.client.post(&url, &EmbedRequest { items }).map_err(ProviderFailure)?;
        {
            let mut dim = self.dim.lock().map_err(|_| ProviderFailure("dimension lock poisoned".into()))?;
            match *dim {
                Some(d) if d != resp.dim => {
                    return Err(ProviderFailure(format!("dimension drift: expected {d}, got {}", resp.dim)))
                }
                None => *dim = Some(resp.dim),
                _ => {}
            }
        }
        if resp.vectors.len() != items.len() {
            return Err(ProviderFailure(format!(
                "{} vectors for {} items",
                resp.vectors.len(),
                items.len()
            )));
        }
        resp.vectors
            .iter()
            .map(|v| {
                if v.len() != resp.dim {
                    return Err(ProviderFailure(format!("vector of length {} under dim {}", v.len(), resp.dim)));
                }
                normalize(v).map_err(|e| ProviderFailure(e.to_string()))
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure> {
        self.call("embed_texts", texts)
    }

    fn embed_images(&self, images: &[String]) -> Result<Vec<Vec<f64>>, ProviderFailure> {
        self.call("embed_images", images)
    }
}
