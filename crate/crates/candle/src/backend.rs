//! Latent diffusion model behind the [`Backend`] interface.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use candle::{DType, Device, Tensor, Var};
use candle_nn as nn;
use candle_transformers::models::stable_diffusion::vae::AutoEncoderKLConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use attnprop_core::backend::{
    Backend, FeatureSet, HeadQk, NoisePredictor, PromptEmbedding, QkGradient, QueryKeySet,
};
use attnprop_core::config::DiffusionConfig;
use attnprop_core::inversion::{DdimSchedule, LatentState, Provenance};
use attnprop_core::mask::{Frame, LatticeGeometry};
use attnprop_core::real::Real;
use attnprop_core::run::sha256_file;
use attnprop_core::{Error, Result};

use crate::be;
use crate::text::TextEncoder;
use crate::unet::{Taps, Unet, UnetConfig};
use crate::vae::{sd21_config, Autoencoder};

/// Environment variable that overrides the configured model directory.
pub const MODEL_DIR_ENV: &str = "ATTNPROP_MODEL_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Epsilon,
    V,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub block_out_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub latent_channels: usize,
    pub norm_groups: usize,
}

impl VaeSpec {
    fn to_config(&self) -> AutoEncoderKLConfig {
        AutoEncoderKLConfig {
            block_out_channels: self.block_out_channels.clone(),
            layers_per_block: self.layers_per_block,
            latent_channels: self.latent_channels,
            norm_num_groups: self.norm_groups,
            use_quant_conv: true,
            use_post_quant_conv: true,
        }
    }
}

/// Architecture of the model files, read from `architecture.json` in the
/// model directory when present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub unet: UnetConfig,
    pub vae: VaeSpec,
    pub prediction: Prediction,
}

impl ModelSpec {
    pub fn sd21() -> Self {
        let v = sd21_config();
        Self {
            unet: UnetConfig::sd21(),
            vae: VaeSpec {
                block_out_channels: v.block_out_channels,
                layers_per_block: v.layers_per_block,
                latent_channels: v.latent_channels,
                norm_groups: v.norm_num_groups,
            },
            prediction: Prediction::V,
        }
    }
}

/// Resolved locations of the model files.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFiles {
    pub dir: PathBuf,
    pub unet: PathBuf,
    pub vae: PathBuf,
    pub text_encoder: PathBuf,
    pub tokenizer: PathBuf,
    /// Precomputed prompt embeddings, used when no text encoder is present.
    pub embedding_table: PathBuf,
    pub architecture: PathBuf,
}

impl ModelFiles {
    pub fn resolve(config: &DiffusionConfig) -> Self {
        let dir = std::env::var_os(MODEL_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| config.model_dir.clone());
        let or = |p: &Option<PathBuf>, default: &str| p.clone().unwrap_or_else(|| dir.join(default));
        Self {
            unet: or(&config.unet_weights, "unet/diffusion_pytorch_model.safetensors"),
            vae: or(&config.vae_weights, "vae/diffusion_pytorch_model.safetensors"),
            text_encoder: or(&config.text_encoder_weights, "text_encoder/model.safetensors"),
            tokenizer: or(&config.tokenizer, "tokenizer/tokenizer.json"),
            embedding_table: dir.join("text_embeddings.safetensors"),
            architecture: dir.join("architecture.json"),
            dir,
        }
    }
}

/// Loaded model components.
pub struct DiffusionParts {
    pub unet: Unet,
    pub vae: Autoencoder,
    pub text: TextEncoder,
    pub prediction: Prediction,
    /// Digest of every frozen parameter.
    pub checksum: String,
    /// Short model name used in cache keys.
    pub name: String,
}

pub struct DiffusionBackend {
    parts: DiffusionParts,
    device: Device,
    dtype: DType,
    layers: Vec<String>,
    feature_layer: String,
    heads: usize,
    head_dim: usize,
    feature_channels: usize,
    geometry: LatticeGeometry,
    null: PromptEmbedding,
    schedule: DdimSchedule,
    /// Serializes access to the accelerator.
    lock: Mutex<()>,
}

fn weights(path: &Path, dtype: DType, device: &Device) -> Result<nn::VarBuilder<'static>> {
    if !path.is_file() {
        return Err(Error::Backend(format!("missing weights {}", path.display())));
    }
    unsafe { nn::VarBuilder::from_mmaped_safetensors(&[path], dtype, device) }.map_err(be)
}

impl DiffusionBackend {
    /// Loads the model named by `config`, falling back to the CPU when no
    /// accelerator is available.
    pub fn load(config: &DiffusionConfig) -> Result<Self> {
        let files = ModelFiles::resolve(config);
        let spec = if files.architecture.is_file() {
            let text = std::fs::read_to_string(&files.architecture).map_err(|e| Error::io(&files.architecture, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", files.architecture.display())))?
        } else {
            ModelSpec::sd21()
        };
        let device = if config.cpu {
            Device::Cpu
        } else {
            Device::cuda_if_available(0).map_err(be)?
        };
        let dtype = if config.use_f16 { DType::F16 } else { DType::F32 };
        log::info!("loading diffusion model from {}", files.dir.display());
        let unet = Unet::new(weights(&files.unet, dtype, &device)?, spec.unet.clone()).map_err(be)?;
        let vae = Autoencoder::new(weights(&files.vae, dtype, &device)?, spec.vae.to_config()).map_err(be)?;
        let mut hashed = vec![files.unet.clone(), files.vae.clone()];
        let text = if files.text_encoder.is_file() {
            hashed.push(files.text_encoder.clone());
            TextEncoder::clip_sd21(&files.text_encoder, &files.tokenizer, &device, dtype)?
        } else if files.embedding_table.is_file() {
            hashed.push(files.embedding_table.clone());
            TextEncoder::table(&files.embedding_table, &device, dtype)?
        } else {
            return Err(Error::Backend(format!(
                "neither {} nor {} exists",
                files.text_encoder.display(),
                files.embedding_table.display()
            )));
        };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&spec).map_err(|e| Error::Backend(e.to_string()))?);
        for p in &hashed {
            h.update(sha256_file(p)?.as_bytes());
        }
        let name = files
            .dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        let parts = DiffusionParts {
            unet,
            vae,
            text,
            prediction: spec.prediction,
            checksum: hex::encode(h.finalize()),
            name,
        };
        Self::new(parts, config, device, dtype)
    }

    /// Wraps loaded components. Every layer in `config.layers` must run at
    /// the latent resolution and share one head layout.
    pub fn new(parts: DiffusionParts, config: &DiffusionConfig, device: Device, dtype: DType) -> Result<Self> {
        let table = parts.unet.config().attention_layers();
        let find = |name: &str| {
            table
                .iter()
                .find(|l| l.0 == name)
                .ok_or_else(|| Error::Config(format!("model has no attention block {name:?}")))
        };
        if config.layers.is_empty() {
            return Err(Error::Config("no attention layers configured".into()));
        }
        let mut layout = None;
        for name in &config.layers {
            let (_, channels, heads, scale) = find(name)?;
            if *scale != 1 {
                return Err(Error::Config(format!(
                    "{name} runs at 1/{scale} of the latent resolution; kernel layers must run at full resolution"
                )));
            }
            let this = (*heads, channels / heads);
            if *layout.get_or_insert(this) != this {
                return Err(Error::Config("kernel layers differ in head layout".into()));
            }
        }
        let (heads, head_dim) = layout.expect("at least one layer");
        let (_, feature_channels, _, scale) = find(&config.feature_layer)?;
        if *scale != 1 {
            return Err(Error::Config(format!("feature layer {} is not at full resolution", config.feature_layer)));
        }
        let image = config.image_size;
        let down = parts.vae.downscale();
        let latent = image / down;
        if image % down != 0 || latent % parts.unet.config().downscale() != 0 {
            return Err(Error::Config(format!("image size {image} does not fit the model's downsampling")));
        }
        let geometry = LatticeGeometry::new(image, image, latent, latent)?;
        let null_t = parts.text.encode("")?;
        let (_, tokens, dim) = null_t.dims3().map_err(be)?;
        if dim != parts.unet.config().cross_attention_dim {
            return Err(Error::Shape(format!(
                "text embeddings have width {dim}, the model expects {}",
                parts.unet.config().cross_attention_dim
            )));
        }
        let null = PromptEmbedding::new(tokens, dim, to_f64(&null_t)?)?;
        Ok(Self {
            parts,
            device,
            dtype,
            layers: config.layers.clone(),
            feature_layer: config.feature_layer.clone(),
            heads,
            head_dim,
            feature_channels: *feature_channels,
            geometry,
            null,
            schedule: DdimSchedule::new(1)?,
            lock: Mutex::new(()),
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    fn guard(&self) -> std::sync::MutexGuard<'_, ()> {
        self.lock.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn latent_tensor(&self, latent: &LatentState) -> Result<Tensor> {
        let g = &self.geometry;
        if latent.height != g.latent_height || latent.width != g.latent_width || latent.channels != self.parts.vae.latent_channels() {
            return Err(Error::Shape(format!(
                "latent is {}x{}x{}, the model expects {}x{}x{}",
                latent.channels,
                latent.height,
                latent.width,
                self.parts.vae.latent_channels(),
                g.latent_height,
                g.latent_width
            )));
        }
        Tensor::from_slice(&latent.data, (1, latent.channels, latent.height, latent.width), &self.device)
            .and_then(|t| t.to_dtype(self.dtype))
            .map_err(be)
    }

    fn prompt_tensor(&self, prompt: &PromptEmbedding) -> Result<Tensor> {
        if (prompt.token_count, prompt.dim) != self.prompt_shape() {
            return Err(Error::Shape(format!(
                "prompt is {}x{}, the model expects {:?}",
                prompt.token_count,
                prompt.dim,
                self.prompt_shape()
            )));
        }
        Tensor::from_slice(&prompt.values, (1, prompt.token_count, prompt.dim), &self.device)
            .and_then(|t| t.to_dtype(self.dtype))
            .map_err(be)
    }

    fn capture(&self, latent: &Tensor, timestep: usize, context: &Tensor) -> Result<Taps> {
        let mut taps = Taps::new(&self.layers, None, false);
        self.parts.unet.forward(latent, timestep as f64, context, &mut taps).map_err(be)?;
        Ok(taps)
    }

    /// Scatters per-head gradients back into the `1 x N x heads*d` layout.
    fn interleave<T: Real>(&self, per_head: &[Vec<T>]) -> Result<Tensor> {
        let n = self.geometry.location_count();
        let (h, d) = (self.heads, self.head_dim);
        let mut out = vec![0f64; n * h * d];
        for (head, g) in per_head.iter().enumerate() {
            if g.len() != n * d {
                return Err(Error::Shape(format!("head gradient has {} values, expected {}", g.len(), n * d)));
            }
            for i in 0..n {
                for j in 0..d {
                    out[i * h * d + head * d + j] = g[i * d + j].f64();
                }
            }
        }
        Tensor::from_vec(out, (1, n, h * d), &self.device)
            .and_then(|t| t.to_dtype(self.dtype))
            .map_err(be)
    }
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    t.to_dtype(DType::F64)
        .and_then(|t| t.flatten_all())
        .and_then(|t| t.to_vec1::<f64>())
        .map_err(be)
}

/// Noise estimate from a velocity prediction at cumulative signal level
/// `alpha_bar`.
pub fn epsilon_from_v(v: &[f32], x_t: &[f32], alpha_bar: f64) -> Vec<f32> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    v.iter()
        .zip(x_t)
        .map(|(&v, &x)| (a * v as f64 + s * x as f64) as f32)
        .collect()
}

impl NoisePredictor for DiffusionBackend {
    fn predict_noise(&self, latent: &LatentState, timestep: usize, prompt: &PromptEmbedding) -> Result<Vec<f32>> {
        let x = self.latent_tensor(latent)?;
        let ctx = self.prompt_tensor(prompt)?;
        let _g = self.guard();
        let mut taps = Taps::new(&[], None, true);
        let out = self
            .parts
            .unet
            .forward(&x, timestep as f64, &ctx, &mut taps)
            .map_err(be)?
            .ok_or_else(|| Error::Backend("model produced no output".into()))?;
        let out: Vec<f32> = to_f64(&out)?.into_iter().map(|v| v as f32).collect();
        Ok(match self.parts.prediction {
            Prediction::Epsilon => out,
            Prediction::V => epsilon_from_v(&out, &latent.data, self.schedule.alpha_cumprod(timestep)),
        })
    }
}

impl Backend for DiffusionBackend {
    fn id(&self) -> String {
        format!("diffusion:{}:{}", self.parts.name, self.layers.join("+"))
    }

    fn geometry(&self) -> LatticeGeometry {
        self.geometry
    }

    fn layer_names(&self) -> Vec<String> {
        self.layers.clone()
    }

    fn heads_per_layer(&self) -> usize {
        self.heads
    }

    fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn prompt_shape(&self) -> (usize, usize) {
        (self.null.token_count, self.null.dim)
    }

    fn null_prompt(&self) -> Result<PromptEmbedding> {
        Ok(self.null.clone())
    }

    fn encode_text(&self, text: &str) -> Result<PromptEmbedding> {
        let _g = self.guard();
        let t = self.parts.text.encode(text)?;
        let (_, tokens, dim) = t.dims3().map_err(be)?;
        PromptEmbedding::new(tokens, dim, to_f64(&t)?)
    }

    fn encode_frame(&self, frame: &Frame) -> Result<LatentState> {
        let g = &self.geometry;
        if frame.height != g.image_height || frame.width != g.image_width {
            return Err(Error::Shape(format!(
                "frame is {}x{}, the model expects {}x{}",
                frame.height, frame.width, g.image_height, g.image_width
            )));
        }
        let img = Tensor::from_slice(&frame.data, (frame.height, frame.width, 3), &self.device)
            .and_then(|t| t.permute((2, 0, 1)))
            .and_then(|t| t.unsqueeze(0))
            .and_then(|t| t.affine(2.0, -1.0))
            .and_then(|t| t.to_dtype(self.dtype))
            .map_err(be)?;
        let _g = self.guard();
        let z = self.parts.vae.encode(&img).map_err(be)?;
        let (_, c, h, w) = z.dims4().map_err(be)?;
        let data = to_f64(&z)?.into_iter().map(|v| v as f32).collect();
        LatentState::new(h, w, c, data, 0, Provenance::Clean)
    }

    fn decode_latent(&self, latent: &LatentState) -> Result<Frame> {
        let z = self.latent_tensor(latent)?;
        let _g = self.guard();
        let img = self.parts.vae.decode(&z).map_err(be)?;
        let (_, _, h, w) = img.dims4().map_err(be)?;
        let hwc = img
            .squeeze(0)
            .and_then(|t| t.permute((1, 2, 0)))
            .and_then(|t| t.affine(0.5, 0.5))
            .and_then(|t| t.clamp(0.0, 1.0))
            .map_err(be)?;
        let data = to_f64(&hwc)?.into_iter().map(|v| v as f32).collect();
        Frame::new(w, h, data)
    }

    fn noise_predictor(&self) -> Option<&dyn NoisePredictor> {
        Some(self)
    }

    fn extract_qk<T: Real>(&self, latent: &LatentState, prompt: &PromptEmbedding) -> Result<QueryKeySet<T>> {
        let x = self.latent_tensor(latent)?;
        let ctx = self.prompt_tensor(prompt)?;
        let taps = {
            let _g = self.guard();
            self.capture(&x, latent.timestep, &ctx)?
        };
        let n = self.geometry.location_count();
        let (h, d) = (self.heads, self.head_dim);
        let mut heads = Vec::with_capacity(self.layers.len() * h);
        for (li, name) in self.layers.iter().enumerate() {
            let (q, k) = &taps.captured_qk[name];
            let (q, k) = (to_f64(q)?, to_f64(k)?);
            for head in 0..h {
                let pick = |m: &[f64]| -> Vec<T> {
                    (0..n)
                        .flat_map(|i| m[i * h * d + head * d..i * h * d + (head + 1) * d].iter().map(|&v| T::of(v)))
                        .collect()
                };
                heads.push(HeadQk {
                    layer: li,
                    head,
                    q: pick(&q),
                    k: pick(&k),
                });
            }
        }
        let set = QueryKeySet {
            locations: n,
            head_dim: d,
            layers: self.layers.clone(),
            heads,
        };
        set.validate()?;
        Ok(set)
    }

    fn qk_vjp<T: Real>(&self, latent: &LatentState, prompt: &PromptEmbedding, grad: &QkGradient<T>) -> Result<Vec<f64>> {
        let h = self.heads;
        let expected = self.layers.len() * h;
        if grad.dq.len() != expected || grad.dk.len() != expected {
            return Err(Error::Shape(format!(
                "gradient covers {}/{} heads, expected {expected}",
                grad.dq.len(),
                grad.dk.len()
            )));
        }
        let x = self.latent_tensor(latent)?;
        let ctx = Var::from_tensor(&self.prompt_tensor(prompt)?).map_err(be)?;
        let _g = self.guard();
        let taps = self.capture(&x, latent.timestep, ctx.as_tensor())?;
        let mut total: Option<Tensor> = None;
        for (li, name) in self.layers.iter().enumerate() {
            let (q, k) = &taps.captured_qk[name];
            let dq = self.interleave(&grad.dq[li * h..(li + 1) * h])?;
            let dk = self.interleave(&grad.dk[li * h..(li + 1) * h])?;
            let term = (q * dq)
                .and_then(|a| a.sum_all())
                .and_then(|a| Ok((a + (k * dk)?.sum_all()?)?))
                .map_err(be)?;
            total = Some(match total {
                None => term,
                Some(t) => (t + term).map_err(be)?,
            });
        }
        let total = total.expect("at least one layer");
        let grads = total.backward().map_err(be)?;
        match grads.get(ctx.as_tensor()) {
            Some(g) => to_f64(g),
            None => Ok(vec![0.0; prompt.values.len()]),
        }
    }

    fn extract_features<T: Real>(&self, latent: &LatentState) -> Result<FeatureSet<T>> {
        let x = self.latent_tensor(latent)?;
        let ctx = self.prompt_tensor(&self.null)?;
        let mut taps = Taps::new(&[], Some(&self.feature_layer), false);
        {
            let _g = self.guard();
            self.parts.unet.forward(&x, latent.timestep as f64, &ctx, &mut taps).map_err(be)?;
        }
        let f = taps
            .captured_features
            .ok_or_else(|| Error::Backend(format!("layer {} was not reached", self.feature_layer)))?;
        let (_, c, hh, ww) = f.dims4().map_err(be)?;
        let rows = f.squeeze(0).and_then(|t| t.permute((1, 2, 0))).map_err(be)?;
        let data: Vec<T> = to_f64(&rows)?.into_iter().map(T::of).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Backend("non-finite features".into()));
        }
        Ok(FeatureSet {
            locations: hh * ww,
            channels: c,
            data,
        })
    }

    fn parameter_checksum(&self) -> String {
        self.parts.checksum.clone()
    }
}
