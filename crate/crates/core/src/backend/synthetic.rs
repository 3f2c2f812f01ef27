//! Deterministic, differentiable stand-in for a diffusion backbone.
//!
//! Per head, with `u` the token-mean of the prompt:
//!
//! ```text
//! Q_i = c_h * W_h (z_i - 0.5) + g_h * pos_h(i) + Pq_h u
//! K_i = c_h * W_h (z_i - 0.5) + g_h * pos_h(i) + Pk_h u
//! ```
//!
//! `z_i` is the latent colour at lattice location `i` (the latent is the frame
//! resized to the lattice), `pos_h` is a smoothed seed-derived noise field and
//! `W_h`, `Pq_h`, `Pk_h` are seed-derived linear maps. The content term is
//! shared between queries and keys, so equal colours attend to each other
//! regardless of where they sit on the lattice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{Backend, FeatureSet, HeadQk, KeySet, PromptEmbedding, QkGradient, QueryKeySet};
use crate::error::{Error, Result};
use crate::inversion::{LatentState, Provenance};
use crate::mask::{Frame, LatticeGeometry};
use crate::real::Real;

const LATENT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub token_count: usize,
    pub embed_dim: usize,
    /// Scale of the colour term.
    pub content_gain: f64,
    /// Scale of the positional term.
    pub position_gain: f64,
    /// Scale of the prompt projections.
    pub prompt_gain: f64,
    /// Gaussian smoothing of the positional fields, in lattice cells.
    pub smoothing: f64,
    /// Trailing embedding dimensions the projections ignore.
    pub inert_dims: usize,
    /// Width of the positional part of the raw features.
    pub feature_position_dims: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_height: 64,
            image_width: 64,
            latent_height: 16,
            latent_width: 16,
            layers: 1,
            heads: 5,
            head_dim: 8,
            token_count: 4,
            embed_dim: 16,
            content_gain: 3.0,
            position_gain: 1.0,
            prompt_gain: 1.0,
            smoothing: 2.0,
            inert_dims: 0,
            feature_position_dims: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct HeadParams {
    content: Vec<f64>, // head_dim x LATENT_CHANNELS
    content_gain: f64,
    position: Vec<f64>, // locations x head_dim
    position_gain: f64,
    prompt_q: Vec<f64>, // head_dim x embed_dim
    prompt_k: Vec<f64>, // head_dim x embed_dim
}

#[derive(Clone, Debug)]
pub struct SyntheticBackend {
    config: SyntheticConfig,
    geometry: LatticeGeometry,
    heads: Vec<HeadParams>,
    feature_position: Vec<f64>, // locations x feature_position_dims
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Separable Gaussian blur with clamped borders.
fn smooth(field: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let blur = |src: &[f64], len: usize, stride: usize, count: usize, step: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            let base = line * step;
            for i in 0..len {
                let mut acc = 0.0;
                for (t, w) in taps.iter().enumerate() {
                    let j = (i as isize + t as isize - radius).clamp(0, len as isize - 1) as usize;
                    acc += w * src[base + j * stride];
                }
                out[base + i * stride] = acc / norm;
            }
        }
        out
    };
    let rows = blur(field, width, 1, height, width);
    blur(&rows, height, width, width, 1)
}

/// `count` smoothed noise fields over the lattice, each standardised, stored
/// location-major (`locations x count`).
fn positional_fields(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    count: usize,
    sigma: f64,
) -> Vec<f64> {
    let n = height * width;
    let mut out = vec![0.0; n * count];
    for c in 0..count {
        let noise: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let f = smooth(&noise, height, width, sigma);
        let mean = f.iter().sum::<f64>() / n as f64;
        let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-12);
        for i in 0..n {
            out[i * count + c] = (f[i] - mean) / std;
        }
    }
    out
}

impl SyntheticBackend {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        let c = &config;
        if c.layers == 0
            || c.heads == 0
            || c.head_dim == 0
            || c.token_count == 0
            || c.embed_dim == 0
        {
            return Err(Error::InvalidArgument(
                "synthetic backend dimensions must be positive".into(),
            ));
        }
        if c.inert_dims > c.embed_dim {
            return Err(Error::InvalidArgument(
                "inert dimensions exceed embedding width".into(),
            ));
        }
        let geometry = LatticeGeometry::new(
            c.image_height,
            c.image_width,
            c.latent_height,
            c.latent_width,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let (lh, lw) = (c.latent_height, c.latent_width);
        let active = c.embed_dim - c.inert_dims;
        let prompt_scale = c.prompt_gain / (c.embed_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(c.layers * c.heads);
        for _ in 0..c.layers * c.heads {
            let content = (0..c.head_dim * LATENT_CHANNELS)
                .map(|_| normal(&mut rng) / (LATENT_CHANNELS as f64).sqrt())
                .collect();
            let content_gain = c.content_gain * (0.5 + rng.random::<f64>());
            let position_gain = c.position_gain * (0.5 + rng.random::<f64>())
                / (c.head_dim as f64).sqrt();
            let position = positional_fields(&mut rng, lh, lw, c.head_dim, c.smoothing);
            let projection = |rng: &mut ChaCha8Rng| {
                let mut p = vec![0.0; c.head_dim * c.embed_dim];
                for a in 0..c.head_dim {
                    for e in 0..active {
                        p[a * c.embed_dim + e] = normal(rng) * prompt_scale;
                    }
                }
                p
            };
            let prompt_q = projection(&mut rng);
            let prompt_k = projection(&mut rng);
            heads.push(HeadParams {
                content,
                content_gain,
                position,
                position_gain,
                prompt_q,
                prompt_k,
            });
        }
        let feature_position =
            positional_fields(&mut rng, lh, lw, c.feature_position_dims, c.smoothing);
        Ok(Self {
            config,
            geometry,
            heads,
            feature_position,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// Bound `L` with `|Q_i(a) - Q_i(b)| <= L * |a - b|_F` for every location.
    pub fn lipschitz_constant(&self) -> f64 {
        let t = self.config.token_count as f64;
        self.heads
            .iter()
            .map(|h| h.prompt_q.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
            / t.sqrt()
    }

    fn check_latent(&self, latent: &LatentState) -> Result<()> {
        if latent.channels != LATENT_CHANNELS
            || latent.height != self.config.latent_height
            || latent.width != self.config.latent_width
        {
            return Err(Error::Shape(format!(
                "latent is {}x{}x{}, backend expects {}x{}x{}",
                latent.channels,
                latent.height,
                latent.width,
                LATENT_CHANNELS,
                self.config.latent_height,
                self.config.latent_width
            )));
        }
        Ok(())
    }

    fn check_prompt(&self, prompt: &PromptEmbedding) -> Result<()> {
        if prompt.token_count != self.config.token_count || prompt.dim != self.config.embed_dim
        {
            return Err(Error::Shape(format!(
                "prompt is {}x{}, backend expects {}x{}",
                prompt.token_count, prompt.dim, self.config.token_count, self.config.embed_dim
            )));
        }
        Ok(())
    }

    fn project(matrix: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
        (0..rows)
            .map(|r| (0..cols).map(|c| matrix[r * cols + c] * v[c]).sum())
            .collect()
    }

    /// Query and key matrices of one head in `f64`.
    fn head_qk(&self, head: &HeadParams, latent: &LatentState, pooled: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.head_dim;
        let n = self.geometry.location_count();
        let dq = Self::project(&head.prompt_q, d, self.config.embed_dim, pooled);
        let dk = Self::project(&head.prompt_k, d, self.config.embed_dim, pooled);
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        for i in 0..n {
            let z: [f64; LATENT_CHANNELS] =
                std::array::from_fn(|c| latent.data[c * n + i] as f64 - 0.5);
            for a in 0..d {
                let content: f64 = (0..LATENT_CHANNELS)
                    .map(|c| head.content[a * LATENT_CHANNELS + c] * z[c])
                    .sum();
                let base = head.content_gain * content + head.position_gain * head.position[i * d + a];
                q[i * d + a] = base + dq[a];
                k[i * d + a] = base + dk[a];
            }
        }
        (q, k)
    }

    /// Keys only; prompt shifts of the keys are kept so the result matches
    /// [`Backend::extract_qk`].
    pub fn extract_keys<T: Real>(
        &self,
        latent: &LatentState,
        prompt: &PromptEmbedding,
    ) -> Result<KeySet<T>> {
        Ok(self.extract_qk::<T>(latent, prompt)?.keys())
    }
}

impl Backend for SyntheticBackend {
    fn id(&self) -> String {
        format!("synthetic-{}", &self.parameter_checksum()[..16])
    }

    fn geometry(&self) -> LatticeGeometry {
        self.geometry
    }

    fn layer_names(&self) -> Vec<String> {
        (0..self.config.layers)
            .map(|l| format!("synthetic.{l}"))
            .collect()
    }

    fn heads_per_layer(&self) -> usize {
        self.config.heads
    }

    fn head_dim(&self) -> usize {
        self.config.head_dim
    }

    fn prompt_shape(&self) -> (usize, usize) {
        (self.config.token_count, self.config.embed_dim)
    }

    fn null_prompt(&self) -> Result<PromptEmbedding> {
        Ok(PromptEmbedding::zeros(
            self.config.token_count,
            self.config.embed_dim,
        ))
    }

    fn encode_text(&self, text: &str) -> Result<PromptEmbedding> {
        if text.trim().is_empty() {
            return self.null_prompt();
        }
        let digest = Sha256::digest(text.trim().as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let (t, d) = self.prompt_shape();
        let values = (0..t * d).map(|_| 0.5 * normal(&mut rng)).collect();
        PromptEmbedding::new(t, d, values)
    }

    fn encode_frame(&self, frame: &Frame) -> Result<LatentState> {
        let g = self.geometry;
        if frame.height != g.image_height || frame.width != g.image_width {
            return Err(Error::Shape(format!(
                "frame is {}x{}, backend expects {}x{}",
                frame.height, frame.width, g.image_height, g.image_width
            )));
        }
        let small = frame.resize(g.latent_width, g.latent_height);
        let n = g.location_count();
        let mut data = vec![0.0; LATENT_CHANNELS * n];
        for i in 0..n {
            for c in 0..LATENT_CHANNELS {
                data[c * n + i] = small.data[i * 3 + c];
            }
        }
        LatentState::new(
            g.latent_height,
            g.latent_width,
            LATENT_CHANNELS,
            data,
            0,
            Provenance::Clean,
        )
    }

    fn decode_latent(&self, latent: &LatentState) -> Result<Frame> {
        self.check_latent(latent)?;
        let n = latent.height * latent.width;
        let mut data = vec![0.0; n * 3];
        for i in 0..n {
            for c in 0..LATENT_CHANNELS {
                data[i * 3 + c] = latent.data[c * n + i];
            }
        }
        let small = Frame::new(latent.width, latent.height, data)?;
        Ok(small.resize(self.geometry.image_width, self.geometry.image_height))
    }

    fn extract_qk<T: Real>(
        &self,
        latent: &LatentState,
        prompt: &PromptEmbedding,
    ) -> Result<QueryKeySet<T>> {
        self.check_latent(latent)?;
        self.check_prompt(prompt)?;
        let pooled = prompt.pooled();
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(idx, head)| {
                let (q, k) = self.head_qk(head, latent, &pooled);
                HeadQk {
                    layer: idx / self.config.heads,
                    head: idx % self.config.heads,
                    q: q.into_iter().map(T::of).collect(),
                    k: k.into_iter().map(T::of).collect(),
                }
            })
            .collect();
        Ok(QueryKeySet {
            locations: self.geometry.location_count(),
            head_dim: self.config.head_dim,
            layers: self.layer_names(),
            heads,
        })
    }

    fn qk_vjp<T: Real>(
        &self,
        latent: &LatentState,
        prompt: &PromptEmbedding,
        grad: &QkGradient<T>,
    ) -> Result<Vec<f64>> {
        self.check_latent(latent)?;
        self.check_prompt(prompt)?;
        let (tokens, e_dim) = self.prompt_shape();
        let d = self.config.head_dim;
        let n = self.geometry.location_count();
        if grad.dq.len() != self.heads.len() || grad.dk.len() != self.heads.len() {
            return Err(Error::Shape("gradient head count mismatch".into()));
        }
        // dL/du = sum_h Pq_h^T (sum_i dQ_i) + Pk_h^T (sum_i dK_i)
        let mut du = vec![0.0; e_dim];
        for (h, head) in self.heads.iter().enumerate() {
            for (g, proj) in [(&grad.dq[h], &head.prompt_q), (&grad.dk[h], &head.prompt_k)] {
                if g.len() != n * d {
                    return Err(Error::Shape("gradient matrix size mismatch".into()));
                }
                let mut col = vec![0.0; d];
                for i in 0..n {
                    for a in 0..d {
                        col[a] += g[i * d + a].f64();
                    }
                }
                for a in 0..d {
                    for e in 0..e_dim {
                        du[e] += proj[a * e_dim + e] * col[a];
                    }
                }
            }
        }
        // u is the token mean.
        let scale = 1.0 / tokens as f64;
        Ok((0..tokens)
            .flat_map(|_| du.iter().map(move |v| v * scale))
            .collect())
    }

    fn extract_features<T: Real>(&self, latent: &LatentState) -> Result<FeatureSet<T>> {
        self.check_latent(latent)?;
        let n = self.geometry.location_count();
        let pd = self.config.feature_position_dims;
        let channels = LATENT_CHANNELS + pd;
        let mut data = Vec::with_capacity(n * channels);
        for i in 0..n {
            for c in 0..LATENT_CHANNELS {
                data.push(T::of(latent.data[c * n + i] as f64 - 0.5));
            }
            for c in 0..pd {
                data.push(T::of(
                    self.config.position_gain * self.feature_position[i * pd + c],
                ));
            }
        }
        Ok(FeatureSet {
            locations: n,
            channels,
            data,
        })
    }

    fn parameter_checksum(&self) -> String {
        let mut h = Sha256::new();
        for head in &self.heads {
            for v in head
                .content
                .iter()
                .chain(&head.position)
                .chain(&head.prompt_q)
                .chain(&head.prompt_k)
                .chain([&head.content_gain, &head.position_gain])
            {
                h.update(v.to_le_bytes());
            }
        }
        for v in &self.feature_position {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend(seed: u64) -> SyntheticBackend {
        SyntheticBackend::new(SyntheticConfig {
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn gradient_frame() -> Frame {
        let mut f = Frame::filled(64, 64, [0.2, 0.3, 0.7]);
        for r in 20..40 {
            for c in 10..30 {
                f.set_pixel(r, c, [0.9, 0.4, 0.1]);
            }
        }
        f
    }

    fn latent(b: &SyntheticBackend) -> LatentState {
        b.encode_frame(&gradient_frame()).unwrap()
    }

    #[test]
    fn zero_prompt_gives_base_field() {
        let b = backend(1);
        let z = latent(&b);
        let zero = b.null_prompt().unwrap();
        let qk = b.extract_qk::<f64>(&z, &zero).unwrap();
        let pooled = vec![0.0; b.config.embed_dim];
        for (h, head) in b.heads.iter().enumerate() {
            let (q, k) = b.head_qk(head, &z, &pooled);
            assert_eq!(qk.heads[h].q, q);
            assert_eq!(qk.heads[h].k, k);
        }
        // The base field is the prompt-free part: prompt values move Q.
        let p = b.encode_text("dog").unwrap();
        assert_ne!(b.extract_qk::<f64>(&z, &p).unwrap().heads[0].q, qk.heads[0].q);
    }

    #[test]
    fn identical_seeds_identical_backends() {
        let (a, b) = (backend(7), backend(7));
        assert_eq!(a.parameter_checksum(), b.parameter_checksum());
        let z = latent(&a);
        let p = a.encode_text("a red kite").unwrap();
        let qa = a.extract_qk::<f32>(&z, &p).unwrap();
        let qb = b.extract_qk::<f32>(&z, &p).unwrap();
        assert_eq!(qa, qb);
        assert_ne!(a.parameter_checksum(), backend(8).parameter_checksum());
    }

    #[test]
    fn shape_contract() {
        let b = backend(2);
        let qk = b.extract_qk::<f32>(&latent(&b), &b.null_prompt().unwrap()).unwrap();
        qk.validate().unwrap();
        assert_eq!(qk.locations, b.geometry().location_count());
        assert_eq!(qk.head_count(), 5);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let b = backend(2);
        assert!(matches!(
            b.encode_frame(&Frame::filled(32, 32, [0.0; 3])),
            Err(Error::Shape(_))
        ));
        let bad_prompt = PromptEmbedding::zeros(3, 16);
        assert!(b.extract_qk::<f32>(&latent(&b), &bad_prompt).is_err());
    }

    #[test]
    fn black_frame_encodes_finite() {
        let b = backend(0);
        let z = b.encode_frame(&Frame::filled(64, 64, [0.0; 3])).unwrap();
        assert!(z.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_resize_and_decode_round_trips_smooth_frames() {
        let b = backend(0);
        // Piecewise constant on 4x4 blocks: resizing down and up is exact.
        let mut f = Frame::filled(64, 64, [0.1, 0.2, 0.3]);
        for r in 16..48 {
            for c in 16..48 {
                f.set_pixel(r, c, [0.8, 0.6, 0.4]);
            }
        }
        let z = b.encode_frame(&f).unwrap();
        assert_eq!(z.timestep, 0);
        assert_eq!(z.provenance, Provenance::Clean);
        let small = f.resize(16, 16);
        assert!((z.data[0] - small.data[0]).abs() < 1e-6);
        let back = b.decode_latent(&z).unwrap();
        let mse: f64 = back
            .data
            .iter()
            .zip(&f.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / f.data.len() as f64;
        let psnr = 10.0 * (1.0 / mse.max(1e-12)).log10();
        // Measured ~26 dB: only the square border blurs.
        assert!(psnr > 20.0, "psnr {psnr}");
    }

    #[test]
    fn lipschitz_bound_holds_for_prompt_perturbations() {
        let b = backend(4);
        let z = latent(&b);
        let p0 = b.encode_text("cat").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for scale in [1e-3, 1e-1, 1.0] {
            let mut p1 = p0.clone();
            let delta: Vec<f64> = (0..p1.values.len()).map(|_| scale * normal(&mut rng)).collect();
            p1.values.iter_mut().zip(&delta).for_each(|(v, d)| *v += d);
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let qa = b.extract_qk::<f64>(&z, &p0).unwrap();
            let qb = b.extract_qk::<f64>(&z, &p1).unwrap();
            let d = b.config.head_dim;
            for (ha, hb) in qa.heads.iter().zip(&qb.heads) {
                for i in 0..qa.locations {
                    let diff: f64 = (0..d)
                        .map(|a| (ha.q[i * d + a] - hb.q[i * d + a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(diff <= b.lipschitz_constant() * norm * (1.0 + 1e-9) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let b = backend(5);
        let z = latent(&b);
        let p = b.encode_text("horse").unwrap();
        let qk = b.extract_qk::<f64>(&z, &p).unwrap();
        // Random linear functional of Q and K.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grad = QkGradient {
            dq: qk.heads.iter().map(|h| h.q.iter().map(|_| normal(&mut rng)).collect()).collect(),
            dk: qk.heads.iter().map(|h| h.k.iter().map(|_| normal(&mut rng)).collect()).collect(),
        };
        let functional = |p: &PromptEmbedding| {
            let qk = b.extract_qk::<f64>(&z, p).unwrap();
            qk.heads
                .iter()
                .enumerate()
                .map(|(h, head)| {
                    head.q.iter().zip(&grad.dq[h]).map(|(a, b)| a * b).sum::<f64>()
                        + head.k.iter().zip(&grad.dk[h]).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum::<f64>()
        };
        let analytic = b.qk_vjp(&z, &p, &grad).unwrap();
        for idx in [0usize, 5, 17, 33, 63] {
            let eps = 1e-5;
            let mut plus = p.clone();
            plus.values[idx] += eps;
            let mut minus = p.clone();
            minus.values[idx] -= eps;
            let fd = (functional(&plus) - functional(&minus)) / (2.0 * eps);
            let rel = (fd - analytic[idx]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "coord {idx}: fd {fd} analytic {}", analytic[idx]);
        }
    }

    #[test]
    fn inert_dims_have_zero_jacobian() {
        let b = SyntheticBackend::new(SyntheticConfig {
            inert_dims: 2,
            ..Default::default()
        })
        .unwrap();
        let z = latent(&b);
        let p = b.null_prompt().unwrap();
        let mut shifted = p.clone();
        let e = b.config.embed_dim;
        shifted.values[e - 1] = 3.0;
        shifted.values[2 * e - 2] = -1.5;
        assert_eq!(
            b.extract_qk::<f64>(&z, &p).unwrap(),
            b.extract_qk::<f64>(&z, &shifted).unwrap()
        );
    }

    #[test]
    fn features_carry_positional_signal() {
        let b = backend(3);
        let z = b.encode_frame(&Frame::filled(64, 64, [0.5; 3])).unwrap();
        let f = b.extract_features::<f32>(&z).unwrap();
        assert_ne!(f.row(0), f.row(100));
        assert_eq!(f, b.extract_features::<f32>(&z).unwrap());
    }
}
