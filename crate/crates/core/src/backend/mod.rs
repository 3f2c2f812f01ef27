//! Feature extraction backends.
//!
//! A backend turns a latent frame and a prompt embedding into per-head
//! query/key matrices over the latent lattice, and back-propagates gradients
//! on those matrices to the prompt.

mod synthetic;

pub use synthetic::{SyntheticBackend, SyntheticConfig};

use crate::error::{Error, Result};
use crate::inversion::LatentState;
use crate::mask::{Frame, LatticeGeometry};
use crate::real::Real;

/// Text-conditioning embedding, `token_count x dim`, row-major.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptEmbedding {
    pub token_count: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub learnable: bool,
}

impl PromptEmbedding {
    pub fn new(token_count: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != token_count * dim {
            return Err(Error::Shape(format!(
                "prompt embedding has {} values, expected {token_count}x{dim}",
                values.len()
            )));
        }
        Ok(Self {
            token_count,
            dim,
            values,
            learnable: false,
        })
    }

    pub fn zeros(token_count: usize, dim: usize) -> Self {
        Self {
            token_count,
            dim,
            values: vec![0.0; token_count * dim],
            learnable: false,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.values.len()
    }

    /// Mean over tokens.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for t in 0..self.token_count {
            for (o, v) in out.iter_mut().zip(&self.values[t * self.dim..(t + 1) * self.dim]) {
                *o += v;
            }
        }
        let n = self.token_count.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.token_count as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..12])
    }
}

/// Query and key matrices of one attention head, each `locations x head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadQk<T> {
    pub layer: usize,
    pub head: usize,
    pub q: Vec<T>,
    pub k: Vec<T>,
}

/// Per-(layer, head) queries and keys for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryKeySet<T> {
    pub locations: usize,
    pub head_dim: usize,
    pub layers: Vec<String>,
    pub heads: Vec<HeadQk<T>>,
}

impl<T: Real> QueryKeySet<T> {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 {
            return Err(Error::InvalidArgument("head dimension is zero".into()));
        }
        let n = self.locations * self.head_dim;
        for h in &self.heads {
            if h.q.len() != n || h.k.len() != n {
                return Err(Error::Shape(format!(
                    "head ({}, {}) has q/k lengths {}/{}, expected {n}",
                    h.layer,
                    h.head,
                    h.q.len(),
                    h.k.len()
                )));
            }
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn keys(&self) -> KeySet<T> {
        KeySet {
            locations: self.locations,
            head_dim: self.head_dim,
            keys: self.heads.iter().map(|h| h.k.clone()).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> QueryKeySet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        QueryKeySet {
            locations: self.locations,
            head_dim: self.head_dim,
            layers: self.layers.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadQk {
                    layer: h.layer,
                    head: h.head,
                    q: conv(&h.q),
                    k: conv(&h.k),
                })
                .collect(),
        }
    }
}

/// Keys only, as kept for reference frames.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySet<T> {
    pub locations: usize,
    pub head_dim: usize,
    pub keys: Vec<Vec<T>>,
}

/// Gradient of a scalar with respect to every head's queries and keys.
#[derive(Clone, Debug, PartialEq)]
pub struct QkGradient<T> {
    pub dq: Vec<Vec<T>>,
    pub dk: Vec<Vec<T>>,
}

/// Raw per-location features of one frame, `locations x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet<T> {
    pub locations: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureSet<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}

/// Epsilon-prediction model used by DDIM inversion.
pub trait NoisePredictor: Send + Sync {
    fn predict_noise(
        &self,
        latent: &LatentState,
        timestep: usize,
        prompt: &PromptEmbedding,
    ) -> Result<Vec<f32>>;
}

/// Produces attention queries/keys (and raw features) for a frame.
pub trait Backend: Send + Sync {
    /// Stable identifier used to key on-disk caches.
    fn id(&self) -> String;

    /// Image resolution frames are resized to before encoding, and the latent
    /// lattice attention operates on.
    fn geometry(&self) -> LatticeGeometry;

    fn layer_names(&self) -> Vec<String>;

    fn heads_per_layer(&self) -> usize;

    fn head_dim(&self) -> usize;

    fn head_count(&self) -> usize {
        self.layer_names().len() * self.heads_per_layer()
    }

    /// `(token_count, dim)` of prompt embeddings.
    fn prompt_shape(&self) -> (usize, usize);

    /// Embedding of the empty prompt.
    fn null_prompt(&self) -> Result<PromptEmbedding>;

    fn encode_text(&self, text: &str) -> Result<PromptEmbedding>;

    /// Encodes a frame at [`Backend::geometry`] resolution to a clean latent.
    fn encode_frame(&self, frame: &Frame) -> Result<LatentState>;

    fn decode_latent(&self, latent: &LatentState) -> Result<Frame>;

    /// The diffusion model, when the backend has one.
    fn noise_predictor(&self) -> Option<&dyn NoisePredictor> {
        None
    }

    fn extract_qk<T: Real>(
        &self,
        latent: &LatentState,
        prompt: &PromptEmbedding,
    ) -> Result<QueryKeySet<T>>;

    /// Vector-Jacobian product: gradient with respect to the prompt values of
    /// `sum(dq * Q) + sum(dk * K)`.
    fn qk_vjp<T: Real>(
        &self,
        latent: &LatentState,
        prompt: &PromptEmbedding,
        grad: &QkGradient<T>,
    ) -> Result<Vec<f64>>;

    fn extract_features<T: Real>(&self, latent: &LatentState) -> Result<FeatureSet<T>>;

    /// Digest of all frozen parameters.
    fn parameter_checksum(&self) -> String;
}
