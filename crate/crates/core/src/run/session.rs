use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, sha256_file, widen, ChannelPrompt, Pipeline, SequenceRecord, StageTimer};
use crate::backend::{Backend, FeatureSet, KeySet, PromptEmbedding};
use crate::config::{Affinity, RefinementMode};
use crate::error::{Error, Result};
use crate::eval::SequenceEntry;
use crate::inversion::LatentState;
use crate::io::{read_label_png, write_label_png};
use crate::kernel::{attention_kernel, cosine_kernel, propagate_channel, HeadWeights, PropagationKernel, ReferenceBank};
use crate::mask::{argmax_fuse, downsample_mask, upsample_channel, Frame, HardMask, LatticeGeometry, SoftMaskStack};
use crate::refine::{crf_refine, refine_object, Segmenter};

pub struct SequenceOutput {
    pub record: SequenceRecord,
    pub timer: StageTimer,
    pub artifacts: BTreeMap<String, String>,
}

/// What the bank keeps per reference frame besides its mask.
enum Payload {
    /// Keys under each distinct prompt.
    Keys(Vec<KeySet<f32>>),
    Features(FeatureSet<f32>),
}

/// Channels grouped by (prompt, head weights); groups with the same prompt
/// share keys.
struct Groups {
    prompts: Vec<PromptEmbedding>,
    /// `(prompt index, weights)` per group.
    groups: Vec<(usize, HeadWeights)>,
    /// Group of each channel; channel 0 is the background.
    channel_group: Vec<usize>,
}

impl Groups {
    fn new(background: ChannelPrompt, objects: &BTreeMap<u8, ChannelPrompt>, channels: usize) -> Self {
        let mut prompts: Vec<PromptEmbedding> = Vec::new();
        let mut fingerprints: Vec<String> = Vec::new();
        let mut groups: Vec<(usize, HeadWeights)> = Vec::new();
        let mut add = |cp: &ChannelPrompt| -> usize {
            let fp = cp.prompt.fingerprint();
            let pi = match fingerprints.iter().position(|f| *f == fp) {
                Some(i) => i,
                None => {
                    fingerprints.push(fp);
                    prompts.push(cp.prompt.clone());
                    prompts.len() - 1
                }
            };
            match groups.iter().position(|(p, w)| *p == pi && *w == cp.weights) {
                Some(g) => g,
                None => {
                    groups.push((pi, cp.weights.clone()));
                    groups.len() - 1
                }
            }
        };
        let bg = add(&background);
        let mut channel_group = vec![bg; channels];
        for (&o, cp) in objects {
            channel_group[o as usize] = add(cp);
        }
        Self {
            prompts,
            groups,
            channel_group,
        }
    }
}

struct Tracker<'p, 'a, B: Backend> {
    pipeline: &'p Pipeline<'a, B>,
    entry: &'p SequenceEntry,
    groups: Groups,
    /// Label count of every output mask.
    objects: u8,
    segmenter: Option<Box<dyn Segmenter>>,
    timer: StageTimer,
    fallbacks: usize,
}

impl<B: Backend> Tracker<'_, '_, B> {
    fn payload(&mut self, latent: &LatentState) -> Result<(Payload, Vec<crate::backend::QueryKeySet<f32>>)> {
        let backend = self.pipeline.backend;
        match self.pipeline.config.propagation.affinity {
            Affinity::Cosine => {
                let f = self.timer.time("extract", || backend.extract_features::<f32>(latent))?;
                Ok((Payload::Features(f), Vec::new()))
            }
            Affinity::Attention => {
                let prompts = &self.groups.prompts;
                let qks = self.timer.time("extract", || {
                    prompts.iter().map(|p| backend.extract_qk::<f32>(latent, p)).collect::<Result<Vec<_>>>()
                })?;
                let keys = qks.iter().map(|q| q.keys()).collect();
                Ok((Payload::Keys(keys), qks))
            }
        }
    }

    fn kernels(
        &mut self,
        bank: &ReferenceBank<Payload>,
        target: &Payload,
        queries: &[crate::backend::QueryKeySet<f32>],
    ) -> Result<Vec<PropagationKernel>> {
        let geometry = self.pipeline.backend.geometry();
        let cfg = &self.pipeline.config.propagation;
        let params = cfg.kernel_params();
        let groups = &self.groups.groups;
        self.timer.time("kernel", || match target {
            Payload::Features(f) => {
                let refs: Vec<(usize, &FeatureSet<f32>)> = bank
                    .entries()
                    .iter()
                    .map(|e| match &e.payload {
                        Payload::Features(rf) => Ok((e.frame, rf)),
                        Payload::Keys(_) => Err(Error::InvalidArgument("mixed bank payloads".into())),
                    })
                    .collect::<Result<_>>()?;
                Ok(vec![cosine_kernel(f, &refs, cfg.cosine_temperature, &geometry, &params)?])
            }
            Payload::Keys(_) => groups
                .iter()
                .map(|(pi, w)| {
                    let refs: Vec<(usize, &KeySet<f32>)> = bank
                        .entries()
                        .iter()
                        .map(|e| match &e.payload {
                            Payload::Keys(k) => Ok((e.frame, &k[*pi])),
                            Payload::Features(_) => Err(Error::InvalidArgument("mixed bank payloads".into())),
                        })
                        .collect::<Result<_>>()?;
                    attention_kernel(&queries[*pi], &refs, w, &geometry, &params)
                })
                .collect(),
        })
    }

    /// Objects whose first annotation is at or after `t` get no propagated
    /// mass at `t`.
    fn active(&self, object: usize, t: usize) -> bool {
        self.entry
            .objects
            .iter()
            .any(|o| o.id as usize == object && o.first_frame < t)
    }

    fn propagate(&mut self, bank: &ReferenceBank<Payload>, kernels: &[PropagationKernel], t: usize) -> Result<SoftMaskStack> {
        let g = self.pipeline.backend.geometry();
        let channels = self.objects as usize + 1;
        let single = kernels.len() == 1;
        let active: Vec<bool> = (0..channels).map(|c| c == 0 || self.active(c, t)).collect();
        let channel_group = &self.groups.channel_group;
        self.timer.time("propagate", || {
            let planes = (0..channels)
                .map(|c| {
                    if !active[c] {
                        return Ok(vec![0.0; g.location_count()]);
                    }
                    let k = if single { &kernels[0] } else { &kernels[channel_group[c]] };
                    let refs: Vec<&[f32]> = bank.masks().iter().map(|m| m.channel(c)).collect();
                    propagate_channel(k, &refs)
                })
                .collect::<Result<Vec<_>>>()?;
            SoftMaskStack::from_channels(g.latent_height, g.latent_width, planes)
        })
    }

    /// Image-resolution channels, refined or upsampled, fused by argmax.
    fn finish_frame(&mut self, stack: &SoftMaskStack, frame: &Frame, t: usize, geometry: &LatticeGeometry) -> Result<HardMask> {
        let cfg = &self.pipeline.config;
        let (h, w) = (frame.height, frame.width);
        let mut planes = Vec::with_capacity(stack.channels);
        planes.push(upsample_channel(stack.channel(0), stack.height, stack.width, h, w));
        for c in 1..stack.channels {
            let latent = stack.channel(c);
            let refine = cfg.refinement.mode == RefinementMode::Segmenter && self.active(c, t);
            if !refine {
                planes.push(upsample_channel(latent, stack.height, stack.width, h, w));
                continue;
            }
            let seg = self.segmenter.as_deref().expect("segmenter mode has a segmenter");
            let seed = derive_seed(cfg.run.seed, &["refine", &self.entry.name, &t.to_string(), &c.to_string()]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let outcome = self.timer.time("refine", || {
                refine_object(
                    latent,
                    geometry,
                    frame,
                    t,
                    seg,
                    cfg.refinement.points_per_set,
                    cfg.refinement.prompt_sets,
                    &mut rng,
                )
            })?;
            if outcome.selected.is_none() {
                self.fallbacks += 1;
            }
            planes.push(outcome.channel);
        }
        let fused = SoftMaskStack::from_channels(h, w, planes)?;
        let mut mask = argmax_fuse(&fused)?;
        if cfg.refinement.mode == RefinementMode::Crf {
            let params = cfg.refinement.crf;
            mask = self.timer.time("refine", || crf_refine(&mask, frame, &params))?;
        }
        Ok(mask)
    }

    /// Pastes objects whose first annotation is frame `t` from the ground
    /// truth over `mask`.
    fn paste_new_objects(&self, mask: &mut HardMask, t: usize) -> Result<()> {
        let new: Vec<u8> = self
            .entry
            .objects
            .iter()
            .filter(|o| o.first_frame == t)
            .map(|o| o.id)
            .collect();
        if new.is_empty() {
            return Ok(());
        }
        let gt = read_label_png(&self.entry.annotations[&t])?;
        if gt.width != mask.width || gt.height != mask.height {
            return Err(Error::Shape(format!("annotation {t} of {} differs in size from its frame", self.entry.name)));
        }
        for (m, &g) in mask.labels.iter_mut().zip(&gt.labels) {
            if new.contains(&g) {
                *m = g;
            }
        }
        Ok(())
    }
}

/// Tracks one sequence from its first-frame annotation.
pub fn track_sequence<B: Backend>(pipeline: &Pipeline<'_, B>, entry: &SequenceEntry, out_dir: &Path) -> Result<SequenceOutput> {
    let start = Instant::now();
    let mut timer = StageTimer::default();
    let objects = entry.objects.iter().map(|o| o.id).max().unwrap_or(0);
    let prompts = pipeline.object_prompts(entry, &mut timer)?;
    let background = ChannelPrompt {
        prompt: pipeline.null_prompt().clone(),
        weights: HeadWeights::uniform(pipeline.backend.head_count()),
    };
    let segmenter = match (pipeline.config.refinement.mode, pipeline.segmenters) {
        (RefinementMode::Segmenter, Some(f)) => Some(timer.time("setup", || f.for_sequence(entry))?),
        _ => None,
    };
    let mut tracker = Tracker {
        pipeline,
        entry,
        groups: Groups::new(background, &prompts, objects as usize + 1),
        objects,
        segmenter,
        timer,
        fallbacks: 0,
    };
    let mut bank: ReferenceBank<Payload> = ReferenceBank::new(pipeline.config.propagation.window);
    let mut artifacts = BTreeMap::new();
    let seq_dir = out_dir.join(&entry.name);

    for t in 0..entry.frames.len() {
        let (frame, resized) = tracker.timer.time("load", || pipeline.load_frame(entry, t))?;
        let geometry = pipeline.backend.geometry().with_image(frame.height, frame.width)?;
        let latent = tracker.timer.time("latent", || pipeline.frame_latent(&entry.name, t, &resized))?;
        let (payload, queries) = tracker.payload(&latent)?;
        let mask = if t == 0 {
            let gt = tracker.timer.time("load", || read_label_png(&entry.annotations[&0]))?;
            if gt.width != frame.width || gt.height != frame.height {
                return Err(Error::Shape(format!("first annotation of {} differs in size from its frame", entry.name)));
            }
            widen(gt, objects)?
        } else {
            let kernels = tracker.kernels(&bank, &payload, &queries)?;
            let stack = tracker.propagate(&bank, &kernels, t)?;
            let mut mask = tracker.finish_frame(&stack, &frame, t, &geometry)?;
            tracker.paste_new_objects(&mut mask, t)?;
            mask
        };
        let name = format!("{}.png", entry.frame_stem(t));
        let path = seq_dir.join(&name);
        let hash = tracker.timer.time("write", || {
            write_label_png(&path, &mask)?;
            sha256_file(&path)
        })?;
        artifacts.insert(format!("{}/{name}", entry.name), hash);
        let stored = downsample_mask(&mask, &geometry)?;
        bank.insert(t, payload, stored)?;
    }
    let mut timer = tracker.timer;
    let seconds = start.elapsed().as_secs_f64();
    timer.close(seconds);
    Ok(SequenceOutput {
        record: SequenceRecord {
            name: entry.name.clone(),
            frames: entry.frames.len(),
            objects: entry.objects.len(),
            seconds,
            refine_fallbacks: tracker.fallbacks,
        },
        timer,
        artifacts,
    })
}
