//! Conditional UNet in the diffusers weight layout, with taps on the
//! self-attention projections and transformer outputs of named blocks.

use std::collections::BTreeMap;

use candle::{Module, Result, Tensor, D};
use candle_nn as nn;
use serde::{Deserialize, Serialize};
use candle_transformers::models::stable_diffusion::embeddings::{TimestepEmbedding, Timesteps};
use candle_transformers::models::stable_diffusion::resnet::{ResnetBlock2D, ResnetBlock2DConfig};
use candle_transformers::models::stable_diffusion::unet_2d_blocks::{
    DownBlock2D, DownBlock2DConfig, UpBlock2D, UpBlock2DConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub cross_attn: bool,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub layers_per_block: usize,
    pub cross_attention_dim: usize,
    pub norm_groups: usize,
    pub norm_eps: f64,
    pub linear_projection: bool,
}

impl UnetConfig {
    /// Stable Diffusion 2.1 (768 px, v-prediction).
    pub fn sd21() -> Self {
        let b = |channels, cross_attn, heads| BlockSpec {
            channels,
            cross_attn,
            heads,
        };
        Self {
            in_channels: 4,
            out_channels: 4,
            blocks: vec![b(320, true, 5), b(640, true, 10), b(1280, true, 20), b(1280, false, 20)],
            layers_per_block: 2,
            cross_attention_dim: 1024,
            norm_groups: 32,
            norm_eps: 1e-5,
            linear_projection: true,
        }
    }

    /// Factor between the latent and the coarsest block.
    pub fn downscale(&self) -> usize {
        1 << (self.blocks.len() - 1)
    }

    /// Every transformer block path with its channel width, head count and
    /// downscale factor relative to the latent.
    pub fn attention_layers(&self) -> Vec<(String, usize, usize, usize)> {
        let n = self.blocks.len();
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate().filter(|(_, b)| b.cross_attn) {
            for j in 0..self.layers_per_block {
                out.push((format!("down_blocks.{i}.attentions.{j}"), b.channels, b.heads, 1 << i));
            }
        }
        let last = &self.blocks[n - 1];
        out.push(("mid_block.attentions.0".into(), last.channels, last.heads, 1 << (n - 1)));
        for i in 0..n {
            let b = &self.blocks[n - 1 - i];
            if b.cross_attn {
                for j in 0..=self.layers_per_block {
                    out.push((format!("up_blocks.{i}.attentions.{j}"), b.channels, b.heads, 1 << (n - 1 - i)));
                }
            }
        }
        out
    }
}

/// What a forward pass should record. Once every requested tap has fired and
/// no output is needed, the pass stops.
#[derive(Debug, Default)]
pub struct Taps {
    qk: Vec<String>,
    features: Option<String>,
    need_output: bool,
    pub captured_qk: BTreeMap<String, (Tensor, Tensor)>,
    pub captured_features: Option<Tensor>,
}

impl Taps {
    pub fn new(qk: &[String], features: Option<&str>, need_output: bool) -> Self {
        Self {
            qk: qk.to_vec(),
            features: features.map(str::to_string),
            need_output,
            ..Default::default()
        }
    }

    fn done(&self) -> bool {
        !self.need_output
            && self.qk.iter().all(|l| self.captured_qk.contains_key(l))
            && (self.features.is_none() || self.captured_features.is_some())
    }
}

/// Layer norm built from differentiable primitives.
#[derive(Debug)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(dim: usize, vb: nn::VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", nn::Init::Const(0.0))?,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        nn::ops::layer_norm_slow(xs, &self.weight, &self.bias, 1e-5)
    }
}

#[derive(Debug)]
struct Attention {
    to_q: nn::Linear,
    to_k: nn::Linear,
    to_v: nn::Linear,
    to_out: nn::Linear,
    heads: usize,
}

impl Attention {
    fn new(vb: nn::VarBuilder, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            to_q: nn::linear_no_bias(dim, dim, vb.pp("to_q"))?,
            to_k: nn::linear_no_bias(context_dim, dim, vb.pp("to_k"))?,
            to_v: nn::linear_no_bias(context_dim, dim, vb.pp("to_v"))?,
            to_out: nn::linear(dim, dim, vb.pp("to_out.0"))?,
            heads,
        })
    }

    fn project(&self, xs: &Tensor, context: Option<&Tensor>) -> Result<(Tensor, Tensor, Tensor)> {
        let context = context.unwrap_or(xs);
        Ok((
            self.to_q.forward(xs)?,
            self.to_k.forward(context)?,
            self.to_v.forward(context)?,
        ))
    }

    /// Attention one head at a time to bound the size of the weight matrix.
    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, n, inner) = q.dims3()?;
        let d = inner / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(D::Minus1, h * d, d)?.contiguous()?;
            let kh = k.narrow(D::Minus1, h * d, d)?.contiguous()?;
            let vh = v.narrow(D::Minus1, h * d, d)?.contiguous()?;
            let w = nn::ops::softmax(&(qh.matmul(&kh.t()?)? * scale)?, D::Minus1)?;
            outs.push(w.matmul(&vh)?);
        }
        let o = Tensor::cat(&outs, D::Minus1)?;
        debug_assert_eq!(o.dims3()?, (b, n, inner));
        self.to_out.forward(&o)
    }
}

#[derive(Debug)]
struct FeedForward {
    proj: nn::Linear,
    out: nn::Linear,
}

impl FeedForward {
    fn new(vb: nn::VarBuilder, dim: usize) -> Result<Self> {
        let inner = 4 * dim;
        Ok(Self {
            proj: nn::linear(dim, 2 * inner, vb.pp("net.0.proj"))?,
            out: nn::linear(inner, dim, vb.pp("net.2"))?,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let h = self.proj.forward(xs)?;
        let half = h.dim(D::Minus1)? / 2;
        let x = h.narrow(D::Minus1, 0, half)?;
        let gate = gelu(&h.narrow(D::Minus1, half, half)?)?;
        self.out.forward(&(x * gate)?)
    }
}

/// Exact GELU built from `erf`; the fused op's backward rounds 1/sqrt(2 pi)
/// to six digits.
fn gelu(xs: &Tensor) -> Result<Tensor> {
    let cdf = ((xs / std::f64::consts::SQRT_2)?.erf()? + 1.0)? * 0.5;
    xs * cdf?
}

#[derive(Debug)]
struct TransformerBlock {
    norm1: LayerNorm,
    attn1: Attention,
    norm2: LayerNorm,
    attn2: Attention,
    norm3: LayerNorm,
    ff: FeedForward,
}

impl TransformerBlock {
    fn new(vb: nn::VarBuilder, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            attn1: Attention::new(vb.pp("attn1"), dim, dim, heads)?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            attn2: Attention::new(vb.pp("attn2"), dim, context_dim, heads)?,
            norm3: LayerNorm::new(dim, vb.pp("norm3"))?,
            ff: FeedForward::new(vb.pp("ff"), dim)?,
        })
    }

    /// Returns `None` when the tap was the last thing the pass needed.
    fn forward(&self, xs: &Tensor, context: &Tensor, path: &str, taps: &mut Taps) -> Result<Option<Tensor>> {
        let (q, k, v) = self.attn1.project(&self.norm1.forward(xs)?, None)?;
        if taps.qk.iter().any(|l| l == path) {
            taps.captured_qk.insert(path.to_string(), (q.clone(), k.clone()));
            if taps.done() {
                return Ok(None);
            }
        }
        let xs = (self.attn1.attend(&q, &k, &v)? + xs)?;
        let (q, k, v) = self.attn2.project(&self.norm2.forward(&xs)?, Some(context))?;
        let xs = (self.attn2.attend(&q, &k, &v)? + xs)?;
        Ok(Some((self.ff.forward(&self.norm3.forward(&xs)?)? + xs)?))
    }
}

#[derive(Debug)]
enum Proj {
    Conv(nn::Conv2d),
    Linear(nn::Linear),
}

/// Group norm, projection, one transformer block, projection back, residual.
#[derive(Debug)]
struct Transformer2d {
    path: String,
    norm: nn::GroupNorm,
    proj_in: Proj,
    block: TransformerBlock,
    proj_out: Proj,
}

impl Transformer2d {
    fn new(vb: nn::VarBuilder, path: String, channels: usize, heads: usize, cfg: &UnetConfig) -> Result<Self> {
        let proj = |name: &str| -> Result<Proj> {
            Ok(if cfg.linear_projection {
                Proj::Linear(nn::linear(channels, channels, vb.pp(name))?)
            } else {
                Proj::Conv(nn::conv2d(channels, channels, 1, Default::default(), vb.pp(name))?)
            })
        };
        Ok(Self {
            norm: nn::group_norm(cfg.norm_groups, channels, 1e-6, vb.pp("norm"))?,
            proj_in: proj("proj_in")?,
            block: TransformerBlock::new(
                vb.pp("transformer_blocks.0"),
                channels,
                cfg.cross_attention_dim,
                heads,
            )?,
            proj_out: proj("proj_out")?,
            path,
        })
    }

    fn forward(&self, xs: &Tensor, context: &Tensor, taps: &mut Taps) -> Result<Option<Tensor>> {
        let (b, c, h, w) = xs.dims4()?;
        let residual = xs;
        let x = self.norm.forward(xs)?;
        let tokens = |t: &Tensor| t.permute((0, 2, 3, 1))?.reshape((b, h * w, c));
        let x = match &self.proj_in {
            Proj::Conv(p) => tokens(&p.forward(&x)?)?,
            Proj::Linear(p) => p.forward(&tokens(&x)?)?,
        };
        let Some(x) = self.block.forward(&x, context, &self.path, taps)? else {
            return Ok(None);
        };
        let grid = |t: &Tensor| t.reshape((b, h, w, c))?.permute((0, 3, 1, 2));
        let x = match &self.proj_out {
            Proj::Conv(p) => p.forward(&grid(&x)?.contiguous()?)?,
            Proj::Linear(p) => grid(&p.forward(&x)?)?,
        };
        let out = (x + residual)?;
        if taps.features.as_deref() == Some(self.path.as_str()) {
            taps.captured_features = Some(out.clone());
            if taps.done() {
                return Ok(None);
            }
        }
        Ok(Some(out))
    }
}

#[derive(Debug)]
struct CrossAttnDown {
    resnets: Vec<ResnetBlock2D>,
    attentions: Vec<Transformer2d>,
    downsample: Option<nn::Conv2d>,
}

#[derive(Debug)]
struct CrossAttnUp {
    resnets: Vec<ResnetBlock2D>,
    attentions: Vec<Transformer2d>,
    upsample: Option<nn::Conv2d>,
}

#[derive(Debug)]
enum Down {
    Plain(DownBlock2D),
    Attn(CrossAttnDown),
}

#[derive(Debug)]
enum Up {
    Plain(UpBlock2D),
    Attn(CrossAttnUp),
}

#[derive(Debug)]
struct Mid {
    first: ResnetBlock2D,
    attention: Transformer2d,
    second: ResnetBlock2D,
}

#[derive(Debug)]
pub struct Unet {
    config: UnetConfig,
    conv_in: nn::Conv2d,
    time_proj: Timesteps,
    time_embedding: TimestepEmbedding,
    down: Vec<Down>,
    mid: Mid,
    up: Vec<Up>,
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2d,
}

fn conv3(vb: nn::VarBuilder, cin: usize, cout: usize, stride: usize) -> Result<nn::Conv2d> {
    let cfg = nn::Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    nn::conv2d(cin, cout, 3, cfg, vb)
}

impl Unet {
    pub fn new(vb: nn::VarBuilder, config: UnetConfig) -> Result<Self> {
        let n = config.blocks.len();
        if n == 0 {
            candle::bail!("unet needs at least one block");
        }
        let c0 = config.blocks[0].channels;
        let temb = 4 * c0;
        let resnet = |cout: usize| ResnetBlock2DConfig {
            out_channels: Some(cout),
            temb_channels: Some(temb),
            groups: config.norm_groups,
            eps: config.norm_eps,
            ..Default::default()
        };

        let mut down = Vec::with_capacity(n);
        for (i, b) in config.blocks.iter().enumerate() {
            let vb = vb.pp(format!("down_blocks.{i}"));
            let cin = if i == 0 { c0 } else { config.blocks[i - 1].channels };
            let last = i == n - 1;
            if b.cross_attn {
                let mut resnets = Vec::new();
                let mut attentions = Vec::new();
                for j in 0..config.layers_per_block {
                    let rin = if j == 0 { cin } else { b.channels };
                    resnets.push(ResnetBlock2D::new(vb.pp(format!("resnets.{j}")), rin, resnet(b.channels))?);
                    attentions.push(Transformer2d::new(
                        vb.pp(format!("attentions.{j}")),
                        format!("down_blocks.{i}.attentions.{j}"),
                        b.channels,
                        b.heads,
                        &config,
                    )?);
                }
                let downsample = if last {
                    None
                } else {
                    Some(conv3(vb.pp("downsamplers.0.conv"), b.channels, b.channels, 2)?)
                };
                down.push(Down::Attn(CrossAttnDown {
                    resnets,
                    attentions,
                    downsample,
                }));
            } else {
                let cfg = DownBlock2DConfig {
                    num_layers: config.layers_per_block,
                    resnet_eps: config.norm_eps,
                    resnet_groups: config.norm_groups,
                    add_downsample: !last,
                    downsample_padding: 1,
                    ..Default::default()
                };
                down.push(Down::Plain(DownBlock2D::new(vb, cin, b.channels, Some(temb), cfg)?));
            }
        }

        let cl = config.blocks[n - 1].channels;
        let vm = vb.pp("mid_block");
        let mid = Mid {
            first: ResnetBlock2D::new(vm.pp("resnets.0"), cl, resnet(cl))?,
            attention: Transformer2d::new(
                vm.pp("attentions.0"),
                "mid_block.attentions.0".into(),
                cl,
                config.blocks[n - 1].heads,
                &config,
            )?,
            second: ResnetBlock2D::new(vm.pp("resnets.1"), cl, resnet(cl))?,
        };

        let mut up = Vec::with_capacity(n);
        for i in 0..n {
            let vb = vb.pp(format!("up_blocks.{i}"));
            let b = &config.blocks[n - 1 - i];
            let prev = if i == 0 { cl } else { config.blocks[n - i].channels };
            let skip_in = config.blocks[if i == n - 1 { 0 } else { n - i - 2 }].channels;
            let last = i == n - 1;
            let layers = config.layers_per_block + 1;
            if b.cross_attn {
                let mut resnets = Vec::new();
                let mut attentions = Vec::new();
                for j in 0..layers {
                    let skip = if j == layers - 1 { skip_in } else { b.channels };
                    let rin = if j == 0 { prev } else { b.channels };
                    resnets.push(ResnetBlock2D::new(
                        vb.pp(format!("resnets.{j}")),
                        rin + skip,
                        resnet(b.channels),
                    )?);
                    attentions.push(Transformer2d::new(
                        vb.pp(format!("attentions.{j}")),
                        format!("up_blocks.{i}.attentions.{j}"),
                        b.channels,
                        b.heads,
                        &config,
                    )?);
                }
                let upsample = if last {
                    None
                } else {
                    Some(conv3(vb.pp("upsamplers.0.conv"), b.channels, b.channels, 1)?)
                };
                up.push(Up::Attn(CrossAttnUp {
                    resnets,
                    attentions,
                    upsample,
                }));
            } else {
                let cfg = UpBlock2DConfig {
                    num_layers: layers,
                    resnet_eps: config.norm_eps,
                    resnet_groups: config.norm_groups,
                    add_upsample: !last,
                    ..Default::default()
                };
                up.push(Up::Plain(UpBlock2D::new(vb, skip_in, prev, b.channels, Some(temb), cfg)?));
            }
        }

        Ok(Self {
            conv_in: conv3(vb.pp("conv_in"), config.in_channels, c0, 1)?,
            time_proj: Timesteps::new(c0, true, 0.0),
            time_embedding: TimestepEmbedding::new(vb.pp("time_embedding"), c0, temb)?,
            down,
            mid,
            up,
            norm_out: nn::group_norm(config.norm_groups, c0, config.norm_eps, vb.pp("conv_norm_out"))?,
            conv_out: conv3(vb.pp("conv_out"), c0, config.out_channels, 1)?,
            config,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    /// Runs the model on `xs` (`b x c x h x w`) at `timestep` with `context`
    /// (`b x tokens x dim`). Returns the model output, or `None` when the
    /// pass stopped early because `taps` was satisfied.
    pub fn forward(&self, xs: &Tensor, timestep: f64, context: &Tensor, taps: &mut Taps) -> Result<Option<Tensor>> {
        let (b, _, h, w) = xs.dims4()?;
        let f = self.config.downscale();
        if h % f != 0 || w % f != 0 {
            candle::bail!("latent {h}x{w} is not divisible by {f}");
        }
        let emb = (Tensor::ones(b, xs.dtype(), xs.device())? * timestep)?;
        let emb = self.time_embedding.forward(&self.time_proj.forward(&emb)?)?;

        let mut x = self.conv_in.forward(xs)?;
        let mut skips = vec![x.clone()];
        for block in &self.down {
            match block {
                Down::Plain(p) => {
                    let (y, res) = p.forward(&x, Some(&emb))?;
                    skips.extend(res);
                    x = y;
                }
                Down::Attn(a) => {
                    for (r, t) in a.resnets.iter().zip(&a.attentions) {
                        x = r.forward(&x, Some(&emb))?;
                        let Some(y) = t.forward(&x, context, taps)? else {
                            return Ok(None);
                        };
                        x = y;
                        skips.push(x.clone());
                    }
                    if let Some(d) = &a.downsample {
                        x = d.forward(&x)?;
                        skips.push(x.clone());
                    }
                }
            }
        }

        x = self.mid.first.forward(&x, Some(&emb))?;
        let Some(y) = self.mid.attention.forward(&x, context, taps)? else {
            return Ok(None);
        };
        x = self.mid.second.forward(&y, Some(&emb))?;

        for block in &self.up {
            match block {
                Up::Plain(p) => {
                    let res = skips.split_off(skips.len() - p.resnets.len());
                    x = p.forward(&x, &res, Some(&emb), None)?;
                }
                Up::Attn(a) => {
                    let res = skips.split_off(skips.len() - a.resnets.len());
                    for (j, (r, t)) in a.resnets.iter().zip(&a.attentions).enumerate() {
                        x = Tensor::cat(&[&x, &res[res.len() - j - 1]], 1)?.contiguous()?;
                        x = r.forward(&x, Some(&emb))?;
                        let Some(y) = t.forward(&x, context, taps)? else {
                            return Ok(None);
                        };
                        x = y;
                    }
                    if let Some(u) = &a.upsample {
                        let (_, _, h, w) = x.dims4()?;
                        x = u.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?;
                    }
                }
            }
        }
        if !taps.need_output {
            return Ok(None);
        }
        let x = nn::ops::silu(&self.norm_out.forward(&x)?)?;
        Ok(Some(self.conv_out.forward(&x)?))
    }
}
