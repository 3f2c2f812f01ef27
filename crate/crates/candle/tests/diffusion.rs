use std::path::Path;

use attnprop_candle::text::{TextEncoder, NULL_KEY};
use attnprop_candle::unet::{BlockSpec, Unet, UnetConfig};
use attnprop_candle::vae::Autoencoder;
use attnprop_candle::{DiffusionBackend, DiffusionParts, ModelSpec, Prediction, VaeSpec};
use attnprop_core::backend::{Backend, PromptEmbedding, QkGradient};
use attnprop_core::config::{DiffusionConfig, NoiseMode, PromptMode, RefinementMode, RunConfig};
use attnprop_core::eval::{load_manifest, Layout};
use attnprop_core::mask::Frame;
use attnprop_core::run::{cmd_eval, cmd_track};
use attnprop_core::toy::ToyVideo;
use candle::{DType, Device, Tensor};
use candle_nn as nn;
use rand::{Rng, SeedableRng};

const LAYER: &str = "up_blocks.1.attentions.0";

fn spec() -> ModelSpec {
    ModelSpec {
        unet: UnetConfig {
            in_channels: 4,
            out_channels: 4,
            blocks: vec![
                BlockSpec { channels: 32, cross_attn: true, heads: 2 },
                BlockSpec { channels: 64, cross_attn: false, heads: 2 },
            ],
            layers_per_block: 1,
            cross_attention_dim: 16,
            norm_groups: 32,
            norm_eps: 1e-5,
            linear_projection: true,
        },
        vae: VaeSpec {
            block_out_channels: vec![32, 32],
            layers_per_block: 1,
            latent_channels: 4,
            norm_groups: 32,
        },
        prediction: Prediction::Epsilon,
    }
}

/// Writes a randomly initialized model in the on-disk layout the loader reads.
fn write_model(dir: &Path) {
    let dev = Device::Cpu;
    let s = spec();
    let unet = nn::VarMap::new();
    Unet::new(nn::VarBuilder::from_varmap(&unet, DType::F32, &dev), s.unet.clone()).unwrap();
    std::fs::create_dir_all(dir.join("unet")).unwrap();
    unet.save(dir.join("unet/diffusion_pytorch_model.safetensors")).unwrap();
    let vae = nn::VarMap::new();
    let cfg = candle_transformers::models::stable_diffusion::vae::AutoEncoderKLConfig {
        block_out_channels: s.vae.block_out_channels.clone(),
        layers_per_block: s.vae.layers_per_block,
        latent_channels: s.vae.latent_channels,
        norm_num_groups: s.vae.norm_groups,
        use_quant_conv: true,
        use_post_quant_conv: true,
    };
    Autoencoder::new(nn::VarBuilder::from_varmap(&vae, DType::F32, &dev), cfg).unwrap();
    std::fs::create_dir_all(dir.join("vae")).unwrap();
    vae.save(dir.join("vae/diffusion_pytorch_model.safetensors")).unwrap();
    let table = [
        (NULL_KEY.to_string(), Tensor::randn(0f32, 1.0, (4, 16), &dev).unwrap()),
        ("a square".to_string(), Tensor::randn(0f32, 1.0, (4, 16), &dev).unwrap()),
    ]
    .into_iter()
    .collect::<std::collections::HashMap<_, _>>();
    candle::safetensors::save(&table, dir.join("text_embeddings.safetensors")).unwrap();
    std::fs::write(dir.join("architecture.json"), serde_json::to_string(&s).unwrap()).unwrap();
}

fn config(dir: &Path) -> DiffusionConfig {
    DiffusionConfig {
        model_dir: dir.into(),
        layers: vec![LAYER.into()],
        feature_layer: LAYER.into(),
        image_size: 16,
        cpu: true,
        ..Default::default()
    }
}

/// The same model in 64-bit arithmetic, for finite-difference checks.
fn load_f64(dir: &Path) -> DiffusionBackend {
    let dev = Device::Cpu;
    let s = spec();
    let vb = |p: &str| unsafe { nn::VarBuilder::from_mmaped_safetensors(&[dir.join(p)], DType::F64, &dev).unwrap() };
    let cfg = candle_transformers::models::stable_diffusion::vae::AutoEncoderKLConfig {
        block_out_channels: s.vae.block_out_channels.clone(),
        layers_per_block: 1,
        latent_channels: 4,
        norm_num_groups: 32,
        use_quant_conv: true,
        use_post_quant_conv: true,
    };
    let parts = DiffusionParts {
        unet: Unet::new(vb("unet/diffusion_pytorch_model.safetensors"), s.unet).unwrap(),
        vae: Autoencoder::new(vb("vae/diffusion_pytorch_model.safetensors"), cfg).unwrap(),
        text: TextEncoder::table(&dir.join("text_embeddings.safetensors"), &dev, DType::F64).unwrap(),
        prediction: Prediction::Epsilon,
        checksum: "test".into(),
        name: "tiny".into(),
    };
    DiffusionBackend::new(parts, &config(dir), dev, DType::F64).unwrap()
}

fn frame() -> Frame {
    let (f, _) = ToyVideo::translating_square(1).render(0).unwrap();
    f.resize(16, 16)
}

#[test]
fn captures_every_head_at_lattice_resolution() {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path());
    let b = DiffusionBackend::load(&config(dir.path())).unwrap();
    assert_eq!(b.geometry().location_count(), 64);
    assert_eq!((b.heads_per_layer(), b.head_dim()), (2, 16));
    assert_eq!(b.prompt_shape(), (4, 16));
    let mut z = b.encode_frame(&frame()).unwrap();
    z.timestep = 41;
    let null = b.null_prompt().unwrap();
    let a = b.extract_qk::<f32>(&z, &null).unwrap();
    let again = b.extract_qk::<f32>(&z, &null).unwrap();
    assert_eq!(a, again);
    assert_eq!(a.heads.len(), 2);
    assert_eq!(a.heads[0].q.len(), 64 * 16);
    let other = b.extract_qk::<f32>(&z, &b.encode_text("a square").unwrap()).unwrap();
    assert_ne!(a.heads[0].q, other.heads[0].q, "queries must depend on the prompt");
    let f = b.extract_features::<f32>(&z).unwrap();
    assert_eq!((f.locations, f.channels), (64, b.feature_channels()));
    assert_eq!(b.feature_channels(), 32);
    assert!(b.encode_text("unknown").is_err());
    assert_eq!(b.decode_latent(&z).unwrap().width, 16);
}

#[test]
fn misconfigured_layers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path());
    let mut c = config(dir.path());
    c.layers = vec!["mid_block.attentions.0".into()];
    assert!(DiffusionBackend::load(&c).is_err(), "coarse layer accepted");
    c.layers = vec!["up_blocks.9.attentions.0".into()];
    assert!(DiffusionBackend::load(&c).is_err(), "unknown layer accepted");
    let mut c = config(dir.path());
    c.image_size = 18;
    assert!(DiffusionBackend::load(&c).is_err(), "odd image size accepted");
}

#[test]
fn prompt_gradient_matches_central_differences() {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path());
    let b = load_f64(dir.path());
    let mut z = b.encode_frame(&frame()).unwrap();
    z.timestep = 101;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut theta = b.null_prompt().unwrap();
    theta.values.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    let n = 64 * 16;
    let grad = QkGradient {
        dq: (0..2).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        dk: (0..2).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
    };
    let scalar = |p: &PromptEmbedding| -> f64 {
        let s = b.extract_qk::<f64>(&z, p).unwrap();
        s.heads
            .iter()
            .enumerate()
            .map(|(i, h)| {
                h.q.iter().zip(&grad.dq[i]).map(|(a, g)| a * g).sum::<f64>()
                    + h.k.iter().zip(&grad.dk[i]).map(|(a, g)| a * g).sum::<f64>()
            })
            .sum()
    };
    let g = b.qk_vjp(&z, &theta, &grad).unwrap();
    assert_eq!(g.len(), 64);
    assert!(g.iter().any(|v| *v != 0.0));
    let eps = 1e-5;
    for _ in 0..5 {
        let u: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted = |s: f64| {
            let mut p = theta.clone();
            p.values.iter_mut().zip(&u).for_each(|(v, d)| *v += s * d);
            scalar(&p)
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let ad: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!((fd - ad).abs() <= 1e-7 * fd.abs().max(1.0), "fd {fd} vs autograd {ad}");
    }
}

#[test]
fn tracks_a_toy_video_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_model(&dir.path().join("model"));
    ToyVideo::translating_square(3).write(&dir.path().join("data")).unwrap();
    let manifest = load_manifest(&dir.path().join("data"), Layout::Davis, &Default::default()).unwrap();
    let backend = DiffusionBackend::load(&config(&dir.path().join("model"))).unwrap();
    for (name, prompt, noise) in [
        ("null", PromptMode::Null, NoiseMode::Inversion),
        ("learned", PromptMode::Learned, NoiseMode::Random),
    ] {
        let mut c = RunConfig::default();
        c.prompt.mode = prompt;
        c.propagation.noise = noise;
        c.propagation.inversion_steps = 10;
        c.refinement.mode = RefinementMode::None;
        c.optimizer.steps = 2;
        c.optimizer.learning_rate = 1e-2;
        c.run.output_dir = dir.path().join(name);
        c.run.cache_dir = Some(dir.path().join("cache"));
        c.run.prompt_store = dir.path().join("prompts");
        let record = cmd_track(&backend, &c, &manifest, None).unwrap();
        assert_eq!(record.artifacts.len(), 3);
        let r = cmd_eval(&c.run.output_dir, &manifest, &dir.path().join(format!("eval-{name}"))).unwrap();
        assert!(r.summary.jf_m.is_finite());
    }
}
