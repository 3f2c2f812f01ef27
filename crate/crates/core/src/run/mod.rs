//! Orchestration: tracking runs, evaluation, prompt adaptation and sweeps.

mod ablate;
mod record;
mod session;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ablate::{cmd_ablate, AblationRow, AblationTable, Sweep, SweepKind};
pub use record::{derive_seed, sha256_file, RunRecord, SequenceRecord, StageTimer};
pub use session::{track_sequence, SequenceOutput};

use crate::adapt::{optimize_instance, AdaptedPrompt, PromptStore};
use crate::backend::{Backend, PromptEmbedding};
use crate::config::{NoiseMode, PromptMode, RefinementMode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, write_results, DatasetManifest, DatasetResult, SequenceEntry, DEFAULT_BOUNDARY_TOLERANCE};
use crate::inversion::{ddim_invert, random_noise_latent, DdimSchedule, LatentCache, LatentKey, LatentState};
use crate::io::{read_frame, read_label_png};
use crate::kernel::HeadWeights;
use crate::mask::{downsample_mask, Frame, HardMask};
use crate::refine::{OracleSegmenter, Segmenter};

/// Builds the segmenter used to refine one sequence.
pub trait SegmenterFactory: Send + Sync {
    fn for_sequence(&self, entry: &SequenceEntry) -> Result<Box<dyn Segmenter>>;
}

/// Oracle segmenter over every annotation of the sequence.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleSegmenterFactory;

impl SegmenterFactory for OracleSegmenterFactory {
    fn for_sequence(&self, entry: &SequenceEntry) -> Result<Box<dyn Segmenter>> {
        let mut s = OracleSegmenter::new();
        for (&i, path) in &entry.annotations {
            s.insert(i, read_label_png(path)?);
        }
        Ok(Box::new(s))
    }
}

/// Prompt and head weights used for one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPrompt {
    pub prompt: PromptEmbedding,
    pub weights: HeadWeights,
}

/// Shared state for running the pipeline with one backend and config.
pub struct Pipeline<'a, B: Backend> {
    pub backend: &'a B,
    pub config: RunConfig,
    pub segmenters: Option<&'a dyn SegmenterFactory>,
    schedule: DdimSchedule,
    null_prompt: PromptEmbedding,
    cache: Option<LatentCache>,
}

impl<'a, B: Backend> Pipeline<'a, B> {
    pub fn new(backend: &'a B, config: RunConfig, segmenters: Option<&'a dyn SegmenterFactory>) -> Result<Self> {
        config.validate()?;
        if config.refinement.mode == RefinementMode::Segmenter && segmenters.is_none() {
            return Err(Error::Config("segmenter refinement needs a segmenter".into()));
        }
        let schedule = DdimSchedule::new(config.propagation.inversion_steps)?;
        let null_prompt = backend.null_prompt()?;
        let cache = config.run.cache_dir.as_ref().map(|d| LatentCache::new(d.join("latents")));
        Ok(Self {
            backend,
            config,
            segmenters,
            schedule,
            null_prompt,
            cache,
        })
    }

    pub fn null_prompt(&self) -> &PromptEmbedding {
        &self.null_prompt
    }

    fn backbone_id(&self) -> String {
        format!("{}:{}", self.backend.id(), self.backend.parameter_checksum())
    }

    /// Effective attention timestep (0 for clean latents).
    pub fn timestep(&self) -> Result<usize> {
        match self.config.propagation.noise {
            NoiseMode::None => Ok(0),
            _ => self.schedule.resolve(self.config.propagation.timestep),
        }
    }

    /// Latent of `frame` (already at backend resolution) at the attention
    /// timestep, through the on-disk cache when one is configured.
    pub fn frame_latent(&self, sequence: &str, index: usize, frame: &Frame) -> Result<LatentState> {
        let p = &self.config.propagation;
        let tau = self.timestep()?;
        let seed = self.config.run.seed;
        let variant = match p.noise {
            NoiseMode::None => "clean".to_string(),
            NoiseMode::Inversion => format!("inversion:{}", p.inversion_steps),
            NoiseMode::Random => format!("random:{seed}"),
        };
        let make = || -> Result<LatentState> {
            let clean = self.backend.encode_frame(frame)?;
            match p.noise {
                NoiseMode::None => Ok(clean),
                NoiseMode::Inversion => ddim_invert(
                    self.backend.noise_predictor(),
                    &self.schedule,
                    &clean,
                    &self.null_prompt,
                    tau,
                ),
                NoiseMode::Random => {
                    let s = derive_seed(seed, &["noise", sequence, &index.to_string()]);
                    random_noise_latent(&self.schedule, &clean, tau, &mut ChaCha8Rng::seed_from_u64(s))
                }
            }
        };
        match &self.cache {
            None => make(),
            Some(cache) => {
                let key = LatentKey {
                    video: sequence.to_string(),
                    frame: index,
                    timestep: tau,
                    backbone: self.backbone_id(),
                    variant,
                };
                cache.get_or_insert_with(&key, make)
            }
        }
    }

    /// Reads frame `index` at its own resolution and at backend resolution.
    pub fn load_frame(&self, entry: &SequenceEntry, index: usize) -> Result<(Frame, Frame)> {
        let frame = read_frame(&entry.frames[index])?;
        let g = self.backend.geometry();
        let resized = frame.resize(g.image_width, g.image_height);
        Ok((frame, resized))
    }

    /// Store of adapted prompts for this backend, optimizer and latent setup.
    pub fn prompt_store(&self) -> Result<PromptStore> {
        #[derive(Serialize)]
        struct Key<'k> {
            backbone: String,
            optimizer: &'k crate::adapt::OptimizerConfig,
            noise: NoiseMode,
            timestep: usize,
            inversion_steps: usize,
            seed: u64,
        }
        let key = Key {
            backbone: self.backbone_id(),
            optimizer: &self.config.optimizer,
            noise: self.config.propagation.noise,
            timestep: self.timestep()?,
            inversion_steps: self.config.propagation.inversion_steps,
            seed: self.config.run.seed,
        };
        let digest = hex::encode(&Sha256::digest(serde_json::to_vec(&key)?)[..8]);
        Ok(PromptStore::new(self.config.run.prompt_store.join(digest)))
    }

    /// Optimizes the prompt of `object` on its first annotated frame.
    pub fn adapt_object(&self, entry: &SequenceEntry, object: u8) -> Result<AdaptedPrompt> {
        let info = entry
            .objects
            .iter()
            .find(|o| o.id == object)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no object {object}", entry.name)))?;
        let (frame, resized) = self.load_frame(entry, info.first_frame)?;
        let gt = read_label_png(&entry.annotations[&info.first_frame])?;
        let geometry = self.backend.geometry().with_image(frame.height, frame.width)?;
        let stack = downsample_mask(&gt, &geometry)?;
        let latent = self.frame_latent(&entry.name, info.first_frame, &resized)?;
        optimize_instance::<B, f32>(
            self.backend,
            &latent,
            &self.null_prompt,
            stack.channel(object as usize),
            object,
            &self.config.optimizer,
        )
    }

    fn text_prompt(&self, dir: &Path, entry: &SequenceEntry, object: u8) -> Result<PromptEmbedding> {
        let path = dir.join(&entry.name).join(format!("{object}.txt"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        self.backend.encode_text(text.trim())
    }

    /// Prompt of each object, adapting and storing learned prompts that are
    /// not in the store yet.
    pub fn object_prompts(&self, entry: &SequenceEntry, timer: &mut StageTimer) -> Result<BTreeMap<u8, ChannelPrompt>> {
        let uniform = HeadWeights::uniform(self.backend.head_count());
        let mut out = BTreeMap::new();
        let store = match self.config.prompt.mode {
            PromptMode::Learned => Some(self.prompt_store()?),
            _ => None,
        };
        for o in &entry.objects {
            let cp = match self.config.prompt.mode {
                PromptMode::Null => ChannelPrompt {
                    prompt: self.null_prompt.clone(),
                    weights: uniform.clone(),
                },
                PromptMode::Class | PromptMode::Caption => {
                    let dir = match self.config.prompt.mode {
                        PromptMode::Class => self.config.prompt.class_dir.as_ref(),
                        _ => self.config.prompt.caption_dir.as_ref(),
                    }
                    .expect("validated");
                    ChannelPrompt {
                        prompt: timer.time("prompt", || self.text_prompt(dir, entry, o.id))?,
                        weights: uniform.clone(),
                    }
                }
                PromptMode::Learned => {
                    let store = store.as_ref().expect("learned mode has a store");
                    let adapted = match store.load(&entry.name, o.id)? {
                        Some(a) => a,
                        None => timer.time("adapt", || {
                            let a = self.adapt_object(entry, o.id)?;
                            store.save(&entry.name, &a)?;
                            Ok(a)
                        })?,
                    };
                    ChannelPrompt {
                        prompt: adapted.prompt,
                        weights: adapted.head_weights,
                    }
                }
            };
            out.insert(o.id, cp);
        }
        Ok(out)
    }
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Runs `f` on every sequence, serially for one worker and on a pool of
/// `workers` threads otherwise. Results keep manifest order.
fn for_each_sequence<T: Send>(
    manifest: &DatasetManifest,
    workers: usize,
    f: impl Fn(&SequenceEntry) -> T + Sync,
) -> Result<Vec<T>> {
    if workers == 1 {
        return Ok(manifest.sequences.iter().map(f).collect());
    }
    let pool = worker_pool(workers)?;
    Ok(pool.install(|| manifest.sequences.par_iter().map(&f).collect()))
}

fn effective_workers(config: &RunConfig) -> usize {
    match config.run.workers {
        0 => rayon::current_num_threads().max(1),
        w => w,
    }
}

/// Tracks every sequence of `manifest`, writing indexed PNG masks to
/// `<output_dir>/<sequence>/<frame>.png` and `run_record.json` beside them.
pub fn cmd_track<B: Backend>(
    backend: &B,
    config: &RunConfig,
    manifest: &DatasetManifest,
    segmenters: Option<&dyn SegmenterFactory>,
) -> Result<RunRecord> {
    let start = Instant::now();
    let snapshot = config.clone();
    let mut timer = StageTimer::default();
    let pipeline = timer.time("setup", || Pipeline::new(backend, snapshot.clone(), segmenters))?;
    let out = snapshot.run.output_dir.clone();
    let workers = effective_workers(&snapshot);
    let results = for_each_sequence(manifest, workers, |entry| track_sequence(&pipeline, entry, &out))?;
    let mut sequences = Vec::new();
    let mut artifacts = BTreeMap::new();
    for r in results {
        let r = r?;
        timer.merge(&r.timer);
        artifacts.extend(r.artifacts);
        sequences.push(r.record);
    }
    let mut record = RunRecord {
        config: snapshot,
        backend: backend.id(),
        parameter_checksum: backend.parameter_checksum(),
        workers,
        stages: timer,
        wall_seconds: 0.0,
        sequences,
        artifacts,
        metrics: None,
    };
    let path = out.join("run_record.json");
    let write_start = Instant::now();
    record.write(&path)?;
    record.stages.add("record", write_start.elapsed().as_secs_f64());
    record.wall_seconds = start.elapsed().as_secs_f64();
    if workers == 1 {
        record.stages.close(record.wall_seconds);
    }
    record.write(&path)?;
    Ok(record)
}

/// Scores the masks under `predictions` and writes CSV/JSON summaries to
/// `out_dir`.
pub fn cmd_eval(predictions: &Path, manifest: &DatasetManifest, out_dir: &Path) -> Result<DatasetResult> {
    let result = evaluate_dataset(manifest, predictions, DEFAULT_BOUNDARY_TOLERANCE)?;
    write_results(out_dir, &result)?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptInstance {
    pub sequence: String,
    pub object: u8,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptFailure {
    pub sequence: String,
    pub object: u8,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub store: PathBuf,
    pub adapted: Vec<AdaptInstance>,
    /// Instances already in the store.
    pub skipped: Vec<(String, u8)>,
    pub failed: Vec<AdaptFailure>,
    pub stages: StageTimer,
}

/// Adapts a prompt for every (sequence, object) missing from the store.
/// Failures are reported per instance and do not stop the batch.
pub fn cmd_adapt<B: Backend>(backend: &B, config: &RunConfig, manifest: &DatasetManifest) -> Result<AdaptReport> {
    // Adaptation never refines, so no segmenter is required.
    let mut config = config.clone();
    config.refinement.mode = RefinementMode::None;
    let config = &config;
    let pipeline = Pipeline::new(backend, config.clone(), None)?;
    let store = pipeline.prompt_store()?;
    let workers = effective_workers(config);
    let per_seq = for_each_sequence(manifest, workers, |entry| {
        let mut report = AdaptReport::default();
        for o in &entry.objects {
            if store.contains(&entry.name, o.id) {
                report.skipped.push((entry.name.clone(), o.id));
                continue;
            }
            let result = report.stages.time("adapt", || {
                let a = pipeline.adapt_object(entry, o.id)?;
                let path = store.save(&entry.name, &a)?;
                Ok((a, path))
            });
            match result {
                Ok((a, path)) => report.adapted.push(AdaptInstance {
                    sequence: entry.name.clone(),
                    object: o.id,
                    initial_loss: a.initial_loss,
                    final_loss: a.final_loss,
                    steps: a.trace.len(),
                    path,
                }),
                Err(e) => {
                    log::warn!("adapting {}/{} failed: {e}", entry.name, o.id);
                    report.failed.push(AdaptFailure {
                        sequence: entry.name.clone(),
                        object: o.id,
                        error: e.to_string(),
                    });
                }
            }
        }
        report
    })?;
    let mut report = AdaptReport {
        store: store.root().to_path_buf(),
        ..Default::default()
    };
    for r in per_seq {
        report.adapted.extend(r.adapted);
        report.skipped.extend(r.skipped);
        report.failed.extend(r.failed);
        report.stages.merge(&r.stages);
    }
    Ok(report)
}

/// Label map `mask` with its object count raised to `objects`.
pub(crate) fn widen(mask: HardMask, objects: u8) -> Result<HardMask> {
    let count = mask.object_count.max(objects);
    HardMask::new(mask.width, mask.height, mask.labels, count)
}
