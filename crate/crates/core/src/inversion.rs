//! Latent states, the DDIM schedule, inversion and forward noising.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::backend::{NoisePredictor, PromptEmbedding};
use crate::error::{Error, Result};

pub const TRAIN_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;
const STEPS_OFFSET: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RandomNoise,
    DdimInversion,
    Clean,
}

impl Provenance {
    fn code(self) -> u8 {
        match self {
            Provenance::Clean => 0,
            Provenance::RandomNoise => 1,
            Provenance::DdimInversion => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Provenance::Clean),
            1 => Some(Provenance::RandomNoise),
            2 => Some(Provenance::DdimInversion),
            _ => None,
        }
    }
}

/// Latent grid, channel-major (`channels x height x width`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub timestep: usize,
    pub provenance: Provenance,
}

impl LatentState {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        timestep: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "latent has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        if timestep >= TRAIN_TIMESTEPS {
            return Err(Error::Timestep {
                requested: timestep,
                steps: TRAIN_TIMESTEPS,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent has non-finite entries".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            timestep,
            provenance,
        })
    }

    fn with_data(&self, data: Vec<f32>, timestep: usize, provenance: Provenance) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, data, timestep, provenance)
    }
}

/// Scaled-linear beta schedule over 1000 training steps with a uniform-stride
/// DDIM sub-schedule.
#[derive(Clone, Debug)]
pub struct DdimSchedule {
    alphas_cumprod: Vec<f64>,
    timesteps: Vec<usize>,
}

impl DdimSchedule {
    pub fn new(step_count: usize) -> Result<Self> {
        if step_count == 0 || step_count > TRAIN_TIMESTEPS {
            return Err(Error::InvalidArgument(format!(
                "step count {step_count} outside 1..={TRAIN_TIMESTEPS}"
            )));
        }
        let (s0, s1) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut acc = 1.0;
        let alphas_cumprod = (0..TRAIN_TIMESTEPS)
            .map(|i| {
                let b = s0 + (s1 - s0) * i as f64 / (TRAIN_TIMESTEPS - 1) as f64;
                acc *= 1.0 - b * b;
                acc
            })
            .collect();
        let stride = TRAIN_TIMESTEPS / step_count;
        let timesteps = (0..step_count)
            .map(|i| i * stride + STEPS_OFFSET)
            .filter(|&t| t < TRAIN_TIMESTEPS)
            .collect();
        Ok(Self {
            alphas_cumprod,
            timesteps,
        })
    }

    /// Ascending sub-schedule timesteps.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn alpha_cumprod(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// Maps a requested timestep to the sub-schedule step at or above it.
    /// Zero stays zero (the clean latent).
    pub fn resolve(&self, requested: usize) -> Result<usize> {
        if requested == 0 {
            return Ok(0);
        }
        self.timesteps
            .iter()
            .copied()
            .find(|&t| t >= requested)
            .ok_or(Error::Timestep {
                requested,
                steps: self.timesteps.len(),
            })
    }

    /// Sub-schedule steps up to and including `tau`.
    fn path(&self, tau: usize) -> Vec<usize> {
        self.timesteps.iter().copied().filter(|&t| t <= tau).collect()
    }
}

/// One DDIM update moving `z` from cumulative alpha `a_from` to `a_to` with
/// noise estimate `eps`.
fn ddim_step(z: &[f32], eps: &[f32], a_from: f64, a_to: f64) -> Vec<f32> {
    z.iter()
        .zip(eps)
        .map(|(&z, &e)| {
            let (z, e) = (z as f64, e as f64);
            let x0 = (z - (1.0 - a_from).sqrt() * e) / a_from.sqrt();
            (a_to.sqrt() * x0 + (1.0 - a_to).sqrt() * e) as f32
        })
        .collect()
}

fn predict(
    predictor: &dyn NoisePredictor,
    z: &LatentState,
    t: usize,
    prompt: &PromptEmbedding,
) -> Result<Vec<f32>> {
    let eps = predictor.predict_noise(z, t, prompt)?;
    if eps.len() != z.data.len() {
        return Err(Error::Backend(format!(
            "noise prediction has {} values, latent has {}",
            eps.len(),
            z.data.len()
        )));
    }
    Ok(eps)
}

/// Deterministic DDIM inversion of a clean latent to `tau`.
///
/// `tau` snaps up to the sub-schedule. Without a noise predictor (the
/// synthetic backend) the latent is carried through unchanged and only the
/// timestep is set.
pub fn ddim_invert(
    predictor: Option<&dyn NoisePredictor>,
    schedule: &DdimSchedule,
    clean: &LatentState,
    prompt: &PromptEmbedding,
    tau: usize,
) -> Result<LatentState> {
    if clean.provenance != Provenance::Clean {
        return Err(Error::InvalidArgument("inversion expects a clean latent".into()));
    }
    let tau = schedule.resolve(tau)?;
    if tau == 0 {
        return Ok(clean.clone());
    }
    let Some(predictor) = predictor else {
        return clean.with_data(clean.data.clone(), tau, Provenance::DdimInversion);
    };
    let mut z = clean.clone();
    let mut a_prev = 1.0;
    for t in schedule.path(tau) {
        let eps = predict(predictor, &z, t, prompt)?;
        let a_t = schedule.alpha_cumprod(t);
        let data = ddim_step(&z.data, &eps, a_prev, a_t);
        z = z.with_data(data, t, Provenance::DdimInversion)?;
        a_prev = a_t;
    }
    Ok(z)
}

/// Deterministic DDIM sampling from `noisy` back to a clean latent.
pub fn ddim_sample(
    predictor: &dyn NoisePredictor,
    schedule: &DdimSchedule,
    noisy: &LatentState,
    prompt: &PromptEmbedding,
) -> Result<LatentState> {
    let path = schedule.path(noisy.timestep);
    let mut z = noisy.clone();
    for (i, &t) in path.iter().enumerate().rev() {
        let eps = predict(predictor, &z, t, prompt)?;
        let (a_t, a_prev, t_prev) = match i {
            0 => (schedule.alpha_cumprod(t), 1.0, 0),
            _ => (
                schedule.alpha_cumprod(t),
                schedule.alpha_cumprod(path[i - 1]),
                path[i - 1],
            ),
        };
        let data = ddim_step(&z.data, &eps, a_t, a_prev);
        let provenance = if t_prev == 0 {
            Provenance::Clean
        } else {
            noisy.provenance
        };
        z = z.with_data(data, t_prev, provenance)?;
    }
    Ok(z)
}

/// Forward-diffusion perturbation `sqrt(a) z0 + sqrt(1 - a) eps` at `tau`.
pub fn random_noise_latent<R: Rng + ?Sized>(
    schedule: &DdimSchedule,
    clean: &LatentState,
    tau: usize,
    rng: &mut R,
) -> Result<LatentState> {
    if tau >= TRAIN_TIMESTEPS {
        return Err(Error::Timestep {
            requested: tau,
            steps: TRAIN_TIMESTEPS,
        });
    }
    if tau == 0 {
        return Ok(clean.clone());
    }
    let a = schedule.alpha_cumprod(tau);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = clean
        .data
        .iter()
        .map(|&z| {
            let e: f64 = rng.sample(StandardNormal);
            (sa * z as f64 + sn * e) as f32
        })
        .collect();
    clean.with_data(data, tau, Provenance::RandomNoise)
}

/// Identity of a cached latent.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatentKey {
    pub video: String,
    pub frame: usize,
    pub timestep: usize,
    pub backbone: String,
    /// Distinguishes inversion from seeded random noise.
    pub variant: String,
}

impl LatentKey {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.video.as_bytes(),
            &(self.frame as u64).to_le_bytes(),
            &(self.timestep as u64).to_le_bytes(),
            self.backbone.as_bytes(),
            self.variant.as_bytes(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        hex::encode(h.finalize())
    }
}

const MAGIC: &[u8; 4] = b"ALAT";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 4 * 4;

/// Serializes a latent: magic, version, dtype, provenance, then
/// height/width/channels/timestep as little-endian u32, then the values.
pub fn encode_latent_blob(latent: &LatentState) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * latent.data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(latent.provenance.code());
    for v in [latent.height, latent.width, latent.channels, latent.timestep] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &latent.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_latent_blob(bytes: &[u8]) -> Result<LatentState> {
    let bad = |m: &str| Error::InvalidArgument(format!("latent blob: {m}"));
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("bad header"));
    }
    if bytes[4] != VERSION || bytes[5] != DTYPE_F32 {
        return Err(bad("unsupported version or dtype"));
    }
    let provenance = Provenance::from_code(bytes[6]).ok_or_else(|| bad("bad provenance"))?;
    let field = |i: usize| {
        let o = 7 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let (height, width, channels, timestep) = (field(0), field(1), field(2), field(3));
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * height * width * channels {
        return Err(bad("truncated body"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LatentState::new(height, width, channels, data, timestep, provenance)
}

/// Content-addressed on-disk latent cache.
#[derive(Clone, Debug)]
pub struct LatentCache {
    root: PathBuf,
}

impl LatentCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &LatentKey) -> PathBuf {
        let d = key.digest();
        self.root.join(&d[..2]).join(format!("{d}.lat"))
    }

    pub fn get(&self, key: &LatentKey) -> Result<Option<LatentState>> {
        let path = self.path(key);
        match fs::read(&path) {
            Ok(bytes) => decode_latent_blob(&bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, key: &LatentKey, latent: &LatentState) -> Result<()> {
        let path = self.path(key);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&encode_latent_blob(latent))
            .map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn get_or_insert_with(
        &self,
        key: &LatentKey,
        make: impl FnOnce() -> Result<LatentState>,
    ) -> Result<LatentState> {
        if let Some(l) = self.get(key)? {
            return Ok(l);
        }
        let l = make()?;
        self.put(key, &l)?;
        Ok(l)
    }
}
