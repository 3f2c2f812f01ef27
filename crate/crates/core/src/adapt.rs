//! Test-time adaptation of a prompt embedding and head weights.
//!
//! The objective feeds the first frame as both query and key, propagates the
//! object's first-frame mask through the resulting dense attention and scores
//! the result with binary cross-entropy against the mask itself.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::backend::{Backend, PromptEmbedding, QkGradient, QueryKeySet};
use crate::error::{Error, Result};
use crate::inversion::LatentState;
use crate::kernel::{affinity_rows, softmax_f64, HeadWeights};
use crate::real::Real;

/// Clamp applied to predictions before taking logs.
pub const BCE_EPSILON: f64 = 1e-6;

/// Row groups accumulating key gradients independently before an ordered sum.
const KEY_LANES: usize = 8;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learn_prompt: bool,
    pub learn_head_weights: bool,
    /// Query rows materialized at once in the loss.
    pub block_rows: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            steps: 3500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learn_prompt: true,
            learn_head_weights: true,
            block_rows: 256,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.block_rows == 0 {
            return Err(Error::Config(
                "optimizer needs a positive learning rate and block size".into(),
            ));
        }
        Ok(())
    }
}

/// Binary cross-entropy of one clamped prediction and its derivative with
/// respect to the unclamped prediction.
fn bce(p: f64, m: f64) -> (f64, f64) {
    let pc = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    let loss = -(m * pc.ln() + (1.0 - m) * (1.0 - pc).ln());
    let grad = if p > BCE_EPSILON && p < 1.0 - BCE_EPSILON {
        -m / pc + (1.0 - m) / (1.0 - pc)
    } else {
        0.0
    };
    (loss, grad)
}

fn check_inputs<T: Real>(qk: &QueryKeySet<T>, logits: &[f64], target: &[f32]) -> Result<()> {
    qk.validate()?;
    if logits.len() != qk.head_count() {
        return Err(Error::Shape(format!(
            "{} head logits for {} heads",
            logits.len(),
            qk.head_count()
        )));
    }
    if target.len() != qk.locations {
        return Err(Error::Shape(format!(
            "target has {} locations, attention has {}",
            target.len(),
            qk.locations
        )));
    }
    if target.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("target values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Per-head `A_h m` for every target row.
fn propagated_per_head<T: Real>(qk: &QueryKeySet<T>, target: &[T], block: usize) -> Vec<Vec<f64>> {
    let n = qk.locations;
    let d = qk.head_dim;
    let starts: Vec<usize> = (0..n).step_by(block).collect();
    qk.heads
        .iter()
        .map(|head| {
            starts
                .par_iter()
                .flat_map_iter(|&s| {
                    let e = (s + block).min(n);
                    let a = affinity_rows(&head.q[s * d..e * d], &head.k, d);
                    a.chunks_exact(n)
                        .map(|row| row.iter().zip(target).map(|(x, m)| *x * *m).sum::<T>().f64())
                        .collect::<Vec<_>>()
                })
                .collect()
        })
        .collect()
}

/// Mean BCE of `sum_h w_h A_h m` against `m`, with attention over full rows.
pub fn qk_loss<T: Real>(
    qk: &QueryKeySet<T>,
    logits: &[f64],
    target: &[f32],
    block_rows: usize,
) -> Result<f64> {
    check_inputs(qk, logits, target)?;
    let m: Vec<T> = target.iter().map(|&v| T::of(v as f64)).collect();
    let am = propagated_per_head(qk, &m, block_rows.max(1));
    let w = softmax_f64(logits);
    let n = qk.locations;
    let loss = (0..n)
        .map(|i| {
            let p: f64 = (0..w.len()).map(|h| w[h] * am[h][i]).sum();
            bce(p, target[i] as f64).0
        })
        .sum::<f64>()
        / n as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            trace: vec![loss],
        });
    }
    Ok(loss)
}

/// Loss together with its gradient on every head's queries and keys and on
/// the head logits.
pub fn qk_loss_and_grad<T: Real>(
    qk: &QueryKeySet<T>,
    logits: &[f64],
    target: &[f32],
    block_rows: usize,
) -> Result<(f64, QkGradient<T>, Vec<f64>)> {
    check_inputs(qk, logits, target)?;
    let block = block_rows.max(1);
    let n = qk.locations;
    let d = qk.head_dim;
    let heads = qk.head_count();
    let m: Vec<T> = target.iter().map(|&v| T::of(v as f64)).collect();
    let am = propagated_per_head(qk, &m, block);
    let w = softmax_f64(logits);

    let mut loss = 0.0;
    let mut g = vec![0.0; n];
    for i in 0..n {
        let p: f64 = (0..heads).map(|h| w[h] * am[h][i]).sum();
        let (l, dp) = bce(p, target[i] as f64);
        loss += l;
        g[i] = dp / n as f64;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            trace: vec![loss],
        });
    }

    let gw: Vec<f64> = (0..heads)
        .map(|h| (0..n).map(|i| g[i] * am[h][i]).sum())
        .collect();
    let mean_gw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
    let grad_logits = (0..heads).map(|h| w[h] * (gw[h] - mean_gw)).collect();

    // dL/dS_ij = w_h g_i A_ij (m_j - (A m)_i) for S = Q K^T / sqrt(d).
    let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
    let starts: Vec<usize> = (0..n).step_by(block).collect();
    let lanes = starts.len().min(KEY_LANES);
    let per_lane = starts.len().div_ceil(lanes);
    let mut dq = Vec::with_capacity(heads);
    let mut dk = Vec::with_capacity(heads);
    for (h, head) in qk.heads.iter().enumerate() {
        let wh = T::of(w[h]);
        let lane_out: Vec<(Vec<T>, Vec<T>)> = starts
            .par_chunks(per_lane)
            .map(|lane| {
                let mut dk_part = vec![T::zero(); n * d];
                let mut dq_part = Vec::new();
                for &s in lane {
                    let e = (s + block).min(n);
                    let a = affinity_rows(&head.q[s * d..e * d], &head.k, d);
                    for (r, row) in a.chunks_exact(n).enumerate() {
                        let i = s + r;
                        let coef = wh * T::of(g[i]);
                        let ami = T::of(am[h][i]);
                        let qi = &head.q[i * d..(i + 1) * d];
                        let mut dqi = vec![T::zero(); d];
                        for j in 0..n {
                            let ds = coef * row[j] * (m[j] - ami);
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &head.k[j * d..(j + 1) * d];
                            let dkj = &mut dk_part[j * d..(j + 1) * d];
                            for a in 0..d {
                                dqi[a] = dqi[a] + ds * kj[a];
                                dkj[a] = dkj[a] + ds * qi[a];
                            }
                        }
                        dq_part.extend(dqi.into_iter().map(|v| v * inv_sqrt_d));
                    }
                }
                (dq_part, dk_part)
            })
            .collect();
        let mut dq_h = Vec::with_capacity(n * d);
        let mut dk_h = vec![T::zero(); n * d];
        for (q_part, k_part) in lane_out {
            dq_h.extend(q_part);
            for (o, v) in dk_h.iter_mut().zip(k_part) {
                *o = *o + v;
            }
        }
        dk_h.iter_mut().for_each(|v| *v = *v * inv_sqrt_d);
        dq.push(dq_h);
        dk.push(dk_h);
    }
    Ok((loss, QkGradient { dq, dk }, grad_logits))
}

/// Self-propagation loss of the prompt and head logits on one frame.
pub fn self_propagation_loss<B: Backend, T: Real>(
    backend: &B,
    latent: &LatentState,
    prompt: &PromptEmbedding,
    head_logits: &[f64],
    target: &[f32],
    block_rows: usize,
) -> Result<f64> {
    let qk = backend.extract_qk::<T>(latent, prompt)?;
    qk_loss(&qk, head_logits, target, block_rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub prompt: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn loss_and_gradient<B: Backend, T: Real>(
    backend: &B,
    latent: &LatentState,
    prompt: &PromptEmbedding,
    head_logits: &[f64],
    target: &[f32],
    block_rows: usize,
) -> Result<LossGradient> {
    let qk = backend.extract_qk::<T>(latent, prompt)?;
    let (loss, qk_grad, logits) = qk_loss_and_grad(&qk, head_logits, target, block_rows)?;
    let prompt_grad = backend.qk_vjp(latent, prompt, &qk_grad)?;
    Ok(LossGradient {
        loss,
        prompt: prompt_grad,
        logits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Coordinate {
    Prompt(usize),
    Logit(usize),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Probe {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub probes: Vec<Probe>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient to central finite differences with step
/// `step` at the given coordinates.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check_at<B: Backend, T: Real>(
    backend: &B,
    latent: &LatentState,
    prompt: &PromptEmbedding,
    head_logits: &[f64],
    target: &[f32],
    coordinates: &[Coordinate],
    step: f64,
    floor: f64,
) -> Result<GradientReport> {
    let block = 64;
    let analytic = loss_and_gradient::<B, T>(backend, latent, prompt, head_logits, target, block)?;
    let eval = |p: &PromptEmbedding, l: &[f64]| {
        self_propagation_loss::<B, T>(backend, latent, p, l, target, block)
    };
    let mut probes = Vec::with_capacity(coordinates.len());
    for &c in coordinates {
        let (mut pp, mut pm) = (prompt.clone(), prompt.clone());
        let (mut lp, mut lm) = (head_logits.to_vec(), head_logits.to_vec());
        let a = match c {
            Coordinate::Prompt(i) => {
                pp.values[i] += step;
                pm.values[i] -= step;
                analytic.prompt[i]
            }
            Coordinate::Logit(h) => {
                lp[h] += step;
                lm[h] -= step;
                analytic.logits[h]
            }
        };
        let numeric = (eval(&pp, &lp)? - eval(&pm, &lm)?) / (2.0 * step);
        probes.push(Probe {
            coordinate: c,
            analytic: a,
            numeric,
            relative_error: relative_error(a, numeric, floor),
        });
    }
    let max_relative_error = probes.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradientReport {
        max_relative_error,
        probes,
    })
}

/// [`gradient_check_at`] on `probes` coordinates drawn uniformly from the
/// prompt values and head logits.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check<B: Backend, T: Real, R: Rng + ?Sized>(
    backend: &B,
    latent: &LatentState,
    prompt: &PromptEmbedding,
    head_logits: &[f64],
    target: &[f32],
    probes: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
) -> Result<GradientReport> {
    let total = prompt.parameter_count() + head_logits.len();
    let coords: Vec<Coordinate> = (0..probes)
        .map(|_| {
            let i = rng.random_range(0..total);
            if i < prompt.parameter_count() {
                Coordinate::Prompt(i)
            } else {
                Coordinate::Logit(i - prompt.parameter_count())
            }
        })
        .collect();
    gradient_check_at::<B, T>(backend, latent, prompt, head_logits, target, &coords, step, floor)
}

/// Prompt embedding and head weights adapted to one object instance.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptedPrompt {
    pub object: u8,
    pub prompt: PromptEmbedding,
    pub head_weights: HeadWeights,
    pub config: OptimizerConfig,
    /// Loss before each optimizer step.
    pub trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl AdaptedPrompt {
    pub fn parameter_count(&self) -> usize {
        self.prompt.parameter_count() + self.head_weights.len()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], c: &OptimizerConfig) {
        self.t += 1;
        let b1t = 1.0 - c.beta1.powi(self.t);
        let b2t = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
        }
    }
}

fn simplex_ok(w: &[f64]) -> bool {
    w.iter().all(|v| (0.0..=1.0).contains(v)) && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-6
}

/// Optimizes the prompt (starting from `init`) and head logits (starting
/// uniform) against the object's first-frame mask channel `target`.
pub fn optimize_instance<B: Backend, T: Real>(
    backend: &B,
    latent: &LatentState,
    init: &PromptEmbedding,
    target: &[f32],
    object: u8,
    config: &OptimizerConfig,
) -> Result<AdaptedPrompt> {
    optimize_instance_observed::<B, T>(backend, latent, init, target, object, config, |_, _, _| {})
}

/// [`optimize_instance`], calling `observe(step, loss, head_weights)` after
/// every update with the loss before it and the weights after it.
#[allow(clippy::too_many_arguments)]
pub fn optimize_instance_observed<B: Backend, T: Real>(
    backend: &B,
    latent: &LatentState,
    init: &PromptEmbedding,
    target: &[f32],
    object: u8,
    config: &OptimizerConfig,
    mut observe: impl FnMut(usize, f64, &[f64]),
) -> Result<AdaptedPrompt> {
    config.validate()?;
    if !target.iter().any(|&v| v > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "object {object} is absent from the first-frame mask"
        )));
    }
    let heads = backend.head_count();
    let np = init.parameter_count();
    let mut prompt = init.clone();
    prompt.learnable = config.learn_prompt;
    let mut logits = vec![0.0; heads];
    let mut trace = Vec::with_capacity(config.steps);
    let mut adam = Adam::new(np + heads);
    let mut params = vec![0.0; np + heads];
    for step in 0..config.steps {
        let lg = loss_and_gradient::<B, T>(backend, latent, &prompt, &logits, target, config.block_rows)
            .map_err(|e| match e {
                Error::Diverged { .. } => Error::Diverged {
                    step,
                    trace: trace.clone(),
                },
                e => e,
            })?;
        trace.push(lg.loss);
        let mut grad = vec![0.0; np + heads];
        if config.learn_prompt {
            grad[..np].copy_from_slice(&lg.prompt);
        }
        if config.learn_head_weights {
            grad[np..].copy_from_slice(&lg.logits);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, trace });
        }
        params[..np].copy_from_slice(&prompt.values);
        params[np..].copy_from_slice(&logits);
        adam.step(&mut params, &grad, config);
        prompt.values.copy_from_slice(&params[..np]);
        logits.copy_from_slice(&params[np..]);
        let weights = softmax_f64(&logits);
        if !simplex_ok(&weights) {
            return Err(Error::Diverged { step, trace });
        }
        observe(step, lg.loss, &weights);
    }
    let final_loss =
        self_propagation_loss::<B, T>(backend, latent, &prompt, &logits, target, config.block_rows)
            .map_err(|_| Error::Diverged {
                step: config.steps,
                trace: trace.clone(),
            })?;
    let initial_loss = trace.first().copied().unwrap_or(final_loss);
    Ok(AdaptedPrompt {
        object,
        prompt,
        head_weights: HeadWeights::from_logits(logits)?,
        config: config.clone(),
        trace,
        initial_loss,
        final_loss,
    })
}

/// On-disk store of adapted prompts keyed by (video, object).
#[derive(Clone, Debug)]
pub struct PromptStore {
    root: PathBuf,
}

impl PromptStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, video: &str, object: u8) -> PathBuf {
        self.root.join(video).join(format!("{object}.json"))
    }

    pub fn contains(&self, video: &str, object: u8) -> bool {
        self.path(video, object).is_file()
    }

    pub fn load(&self, video: &str, object: u8) -> Result<Option<AdaptedPrompt>> {
        let path = self.path(video, object);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, video: &str, adapted: &AdaptedPrompt) -> Result<PathBuf> {
        let path = self.path(video, adapted.object);
        let dir = path.parent().expect("store path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(adapted)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
