//! Run configuration, read from a single TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::OptimizerConfig;
use crate::backend::SyntheticConfig;
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::refine::CrfParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Synthetic,
    Diffusion,
}

/// Paths and layer choice for the diffusion backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// Directory holding `unet`, `vae`, `text_encoder` and `tokenizer` files.
    pub model_dir: PathBuf,
    pub unet_weights: Option<PathBuf>,
    pub vae_weights: Option<PathBuf>,
    pub text_encoder_weights: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    /// Self-attention blocks whose queries and keys form the kernel.
    pub layers: Vec<String>,
    /// Block whose hidden states serve as raw features for the cosine kernel.
    pub feature_layer: String,
    pub image_size: usize,
    pub use_f16: bool,
    pub cpu: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            model_dir: PathBuf::from("models/stable-diffusion-2-1"),
            unet_weights: None,
            vae_weights: None,
            text_encoder_weights: None,
            tokenizer: None,
            layers: vec!["up_blocks.3.attentions.0".into()],
            feature_layer: "up_blocks.3.attentions.0".into(),
            image_size: 768,
            use_f16: false,
            cpu: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub synthetic: SyntheticConfig,
    pub diffusion: DiffusionConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            synthetic: SyntheticConfig::default(),
            diffusion: DiffusionConfig::default(),
        }
    }
}

/// How a frame's latent is brought to the attention timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Inversion,
    Random,
    /// Clean latent, timestep ignored.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Affinity {
    Attention,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub timestep: usize,
    pub inversion_steps: usize,
    pub noise: NoiseMode,
    /// Recent frames kept in the reference bank besides the first.
    pub window: usize,
    pub radius: f64,
    pub top_k: usize,
    pub block_rows: usize,
    pub affinity: Affinity,
    pub cosine_temperature: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            timestep: 41,
            inversion_steps: 50,
            noise: NoiseMode::Inversion,
            window: 7,
            radius: 14.0,
            top_k: 15,
            block_rows: 512,
            affinity: Affinity::Attention,
            cosine_temperature: 0.1,
        }
    }
}

impl PropagationConfig {
    pub fn kernel_params(&self) -> KernelParams {
        KernelParams {
            radius: self.radius,
            top_k: self.top_k,
            block_rows: self.block_rows,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Null,
    Class,
    Caption,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub mode: PromptMode,
    /// Directory with `<sequence>/<object>.txt` holding class names.
    pub class_dir: Option<PathBuf>,
    /// Directory with `<sequence>/<object>.txt` holding captions.
    pub caption_dir: Option<PathBuf>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::Learned,
            class_dir: None,
            caption_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinementMode {
    None,
    Segmenter,
    Crf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterKind {
    /// Test double answering from ground-truth annotations.
    Oracle,
    Sam,
}

/// Image-encoder size of the promptable segmenter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamVariant {
    VitB,
    VitL,
    VitH,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub mode: RefinementMode,
    pub segmenter: SegmenterKind,
    pub sam_checkpoint: Option<PathBuf>,
    pub sam_variant: SamVariant,
    /// Points per prompt set.
    pub points_per_set: usize,
    /// Prompt sets per object and frame.
    pub prompt_sets: usize,
    pub crf: CrfParams,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            mode: RefinementMode::Segmenter,
            segmenter: SegmenterKind::Sam,
            sam_checkpoint: None,
            sam_variant: SamVariant::VitH,
            points_per_set: 2,
            prompt_sets: 40,
            crf: CrfParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub seed: u64,
    /// Sequences tracked concurrently; 0 uses every core.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub prompt_store: PathBuf,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            output_dir: PathBuf::from("runs/default"),
            cache_dir: Some(PathBuf::from("runs/cache")),
            prompt_store: PathBuf::from("runs/prompts"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub propagation: PropagationConfig,
    pub prompt: PromptConfig,
    pub optimizer: OptimizerConfig,
    pub refinement: RefinementConfig,
    pub run: RunSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.propagation;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if p.inversion_steps == 0 || 1000 % p.inversion_steps != 0 {
            return bad("inversion_steps must divide 1000");
        }
        if p.timestep >= 1000 {
            return bad("timestep must be below 1000");
        }
        if !(p.radius > 0.0) || p.top_k == 0 || p.block_rows == 0 {
            return bad("radius, top_k and block_rows must be positive");
        }
        if !(p.cosine_temperature > 0.0) {
            return bad("cosine_temperature must be positive");
        }
        let r = &self.refinement;
        if r.mode == RefinementMode::Segmenter && (r.points_per_set == 0 || r.prompt_sets == 0) {
            return bad("points_per_set and prompt_sets must be positive");
        }
        if self.prompt.mode == PromptMode::Class && self.prompt.class_dir.is_none() {
            return bad("class prompts need prompt.class_dir");
        }
        if self.prompt.mode == PromptMode::Caption && self.prompt.caption_dir.is_none() {
            return bad("caption prompts need prompt.caption_dir");
        }
        self.optimizer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.propagation.timestep, 41);
        assert_eq!(c.propagation.inversion_steps, 50);
        assert_eq!(c.propagation.window, 7);
        assert_eq!(c.propagation.radius, 14.0);
        assert_eq!(c.propagation.top_k, 15);
        assert_eq!(c.refinement.points_per_set, 2);
        assert_eq!(c.refinement.prompt_sets, 40);
        assert_eq!(c.optimizer.learning_rate, 1e-4);
        assert_eq!(c.optimizer.steps, 3500);
        assert_eq!(c.prompt.mode, PromptMode::Learned);
        c.validate().unwrap();
    }

    #[test]
    fn empty_document_is_default_and_round_trips() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        let mut c = RunConfig::default();
        c.propagation.noise = NoiseMode::Random;
        c.refinement.mode = RefinementMode::Crf;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_override() {
        let c = RunConfig::from_toml(
            "[propagation]\ntimestep = 81\nnoise = \"random\"\n[prompt]\nmode = \"null\"\n",
        )
        .unwrap();
        assert_eq!(c.propagation.timestep, 81);
        assert_eq!(c.propagation.noise, NoiseMode::Random);
        assert_eq!(c.propagation.top_k, 15);
        assert_eq!(c.prompt.mode, PromptMode::Null);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            "[propagation]\ntop_k = 0",
            "[propagation]\ninversion_steps = 3",
            "[propagation]\ntimestep = 1000",
            "[prompt]\nmode = \"class\"",
            "[optimizer]\nlearning_rate = 0.0",
            "[propagation]\nunknown = 1\nradius = -1.0",
        ] {
            assert!(RunConfig::from_toml(doc).is_err(), "{doc}");
        }
    }
}
