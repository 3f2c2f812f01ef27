//! Autoencoder: deterministic encoding to the posterior mean, decoding via
//! the stock decoder.

use candle::{Module, Result, Tensor};
use candle_nn as nn;
use candle_transformers::models::stable_diffusion::unet_2d_blocks::{
    DownEncoderBlock2D, DownEncoderBlock2DConfig, UNetMidBlock2D, UNetMidBlock2DConfig,
};
use candle_transformers::models::stable_diffusion::vae::{AutoEncoderKL, AutoEncoderKLConfig};

/// Latent scale of the Stable Diffusion autoencoders.
pub const LATENT_SCALE: f64 = 0.18215;

pub fn sd21_config() -> AutoEncoderKLConfig {
    AutoEncoderKLConfig {
        block_out_channels: vec![128, 256, 512, 512],
        layers_per_block: 2,
        latent_channels: 4,
        norm_num_groups: 32,
        use_quant_conv: true,
        use_post_quant_conv: true,
    }
}

#[derive(Debug)]
struct Encoder {
    conv_in: nn::Conv2d,
    down: Vec<DownEncoderBlock2D>,
    mid: UNetMidBlock2D,
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2d,
    quant_conv: Option<nn::Conv2d>,
    latent_channels: usize,
}

impl Encoder {
    fn new(vb: nn::VarBuilder, cfg: &AutoEncoderKLConfig) -> Result<Self> {
        let enc = vb.pp("encoder");
        let ch = &cfg.block_out_channels;
        let conv = nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut down = Vec::with_capacity(ch.len());
        for (i, &c) in ch.iter().enumerate() {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            let block_cfg = DownEncoderBlock2DConfig {
                num_layers: cfg.layers_per_block,
                resnet_eps: 1e-6,
                resnet_groups: cfg.norm_num_groups,
                add_downsample: i + 1 != ch.len(),
                downsample_padding: 0,
                ..Default::default()
            };
            down.push(DownEncoderBlock2D::new(enc.pp(format!("down_blocks.{i}")), cin, c, block_cfg)?);
        }
        let last = *ch.last().unwrap_or(&ch[0]);
        let mid_cfg = UNetMidBlock2DConfig {
            resnet_eps: 1e-6,
            attn_num_head_channels: None,
            resnet_groups: Some(cfg.norm_num_groups),
            ..Default::default()
        };
        let lc = cfg.latent_channels;
        Ok(Self {
            conv_in: nn::conv2d(3, ch[0], 3, conv, enc.pp("conv_in"))?,
            down,
            mid: UNetMidBlock2D::new(enc.pp("mid_block"), last, None, mid_cfg)?,
            norm_out: nn::group_norm(cfg.norm_num_groups, last, 1e-6, enc.pp("conv_norm_out"))?,
            conv_out: nn::conv2d(last, 2 * lc, 3, conv, enc.pp("conv_out"))?,
            quant_conv: if cfg.use_quant_conv {
                Some(nn::conv2d(2 * lc, 2 * lc, 1, Default::default(), vb.pp("quant_conv"))?)
            } else {
                None
            },
            latent_channels: lc,
        })
    }

    fn mean(&self, xs: &Tensor) -> Result<Tensor> {
        let mut x = self.conv_in.forward(xs)?;
        for d in &self.down {
            x = d.forward(&x)?;
        }
        let x = self.norm_out.forward(&self.mid.forward(&x, None)?)?;
        let mut x = self.conv_out.forward(&nn::ops::silu(&x)?)?;
        if let Some(q) = &self.quant_conv {
            x = q.forward(&x)?;
        }
        x.narrow(1, 0, self.latent_channels)
    }
}

#[derive(Debug)]
pub struct Autoencoder {
    encoder: Encoder,
    model: AutoEncoderKL,
    config: AutoEncoderKLConfig,
}

impl Autoencoder {
    pub fn new(vb: nn::VarBuilder, config: AutoEncoderKLConfig) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(vb.clone(), &config)?,
            model: AutoEncoderKL::new(vb, 3, 3, config.clone())?,
            config,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    /// Pixel-to-latent downscale factor.
    pub fn downscale(&self) -> usize {
        1 << (self.config.block_out_channels.len() - 1)
    }

    /// `image` in `[-1, 1]`, `b x 3 x H x W`, to the scaled posterior mean.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.encoder.mean(image)? * LATENT_SCALE
    }

    /// Scaled latent back to an image in `[-1, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.model.decode(&(latent / LATENT_SCALE)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::{DType, Device};

    fn tiny() -> AutoEncoderKLConfig {
        AutoEncoderKLConfig {
            block_out_channels: vec![32, 32],
            layers_per_block: 1,
            latent_channels: 4,
            norm_num_groups: 32,
            use_quant_conv: true,
            use_post_quant_conv: true,
        }
    }

    #[test]
    fn encoding_is_deterministic_and_downscaled() {
        let dev = Device::Cpu;
        let vm = nn::VarMap::new();
        let ae = Autoencoder::new(nn::VarBuilder::from_varmap(&vm, DType::F32, &dev), tiny()).unwrap();
        assert_eq!(ae.downscale(), 2);
        let img = Tensor::rand(-1f32, 1.0, (1, 3, 16, 16), &dev).unwrap();
        let a = ae.encode(&img).unwrap();
        let b = ae.encode(&img).unwrap();
        assert_eq!(a.dims(), &[1, 4, 8, 8]);
        let diff = (a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        assert_eq!(ae.decode(&b).unwrap().dims(), &[1, 3, 16, 16]);
    }
}
