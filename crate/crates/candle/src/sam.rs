//! Promptable segmentation with a SAM checkpoint.

use std::path::Path;
use std::sync::{Arc, Mutex};

use candle::{DType, Device, IndexOp, Tensor};
use candle_nn as nn;
use candle_transformers::models::segment_anything::sam::{Sam, IMAGE_SIZE};

use attnprop_core::config::SamVariant;
use attnprop_core::eval::SequenceEntry;
use attnprop_core::mask::Frame;
use attnprop_core::refine::{Segmenter, SegmenterMask};
use attnprop_core::run::SegmenterFactory;
use attnprop_core::{Error, Result};

use crate::be;

fn seg(e: candle::Error) -> Error {
    Error::Segmenter(e.to_string())
}

pub fn build_sam(variant: SamVariant, vb: nn::VarBuilder) -> candle::Result<Sam> {
    match variant {
        SamVariant::VitB => Sam::new(768, 12, 12, &[2, 5, 8, 11], vb),
        SamVariant::VitL => Sam::new(1024, 24, 16, &[5, 11, 17, 23], vb),
        SamVariant::VitH => Sam::new(1280, 32, 16, &[7, 15, 23, 31], vb),
    }
}

/// Shares one loaded model across sequences; each sequence gets its own
/// image-embedding cache.
#[derive(Clone)]
pub struct SamFactory {
    model: Arc<Sam>,
    device: Device,
}

impl SamFactory {
    pub fn new(model: Sam, device: Device) -> Self {
        Self {
            model: Arc::new(model),
            device,
        }
    }

    pub fn load(checkpoint: &Path, variant: SamVariant, cpu: bool) -> Result<Self> {
        if !checkpoint.is_file() {
            return Err(Error::Segmenter(format!("missing checkpoint {}", checkpoint.display())));
        }
        let device = if cpu {
            Device::Cpu
        } else {
            Device::cuda_if_available(0).map_err(be)?
        };
        let vb = unsafe { nn::VarBuilder::from_mmaped_safetensors(&[checkpoint], DType::F32, &device) }.map_err(seg)?;
        Ok(Self::new(build_sam(variant, vb).map_err(seg)?, device))
    }

    pub fn segmenter(&self) -> SamSegmenter {
        SamSegmenter {
            model: self.model.clone(),
            device: self.device.clone(),
            cache: Mutex::new(None),
        }
    }
}

impl SegmenterFactory for SamFactory {
    fn for_sequence(&self, _entry: &SequenceEntry) -> Result<Box<dyn Segmenter>> {
        Ok(Box::new(self.segmenter()))
    }
}

struct Embedded {
    frame: usize,
    embeddings: Tensor,
    height: usize,
    width: usize,
}

pub struct SamSegmenter {
    model: Arc<Sam>,
    device: Device,
    /// Image embedding of the most recent frame; refinement queries one
    /// frame many times before moving on.
    cache: Mutex<Option<Embedded>>,
}

impl SamSegmenter {
    /// Resizes so the longer side is the model's input size and returns the
    /// embedding with the resized dimensions.
    fn embed(&self, frame: &Frame) -> candle::Result<(Tensor, usize, usize)> {
        let s = IMAGE_SIZE as f64 / frame.width.max(frame.height) as f64;
        let w = ((frame.width as f64 * s).round() as usize).clamp(1, IMAGE_SIZE);
        let h = ((frame.height as f64 * s).round() as usize).clamp(1, IMAGE_SIZE);
        let resized = frame.resize(w, h);
        let img = Tensor::from_slice(&resized.data, (h, w, 3), &self.device)?
            .permute((2, 0, 1))?
            .affine(255.0, 0.0)?;
        let emb = self.model.embeddings(&img)?;
        Ok((emb, h, w))
    }

    fn run(&self, frame: &Frame, frame_index: usize, points: &[(f64, f64)]) -> candle::Result<Vec<SegmenterMask>> {
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if cache.as_ref().map(|c| c.frame) != Some(frame_index) {
            let (embeddings, height, width) = self.embed(frame)?;
            *cache = Some(Embedded {
                frame: frame_index,
                embeddings,
                height,
                width,
            });
        }
        let e = cache.as_ref().expect("filled above");
        let prompts: Vec<(f64, f64, bool)> = points
            .iter()
            .map(|&(x, y)| (x / frame.width as f64, y / frame.height as f64, true))
            .collect();
        let (low, iou) = self
            .model
            .forward_for_embeddings(&e.embeddings, e.height, e.width, &prompts, true)?;
        let logits = low
            .upsample_bilinear2d(IMAGE_SIZE, IMAGE_SIZE, false)?
            .i((.., .., ..e.height, ..e.width))?
            .contiguous()?
            .upsample_bilinear2d(frame.height, frame.width, false)?
            .squeeze(0)?;
        let scores = iou.flatten_all()?.to_vec1::<f32>()?;
        let mut out = Vec::with_capacity(scores.len());
        for (i, score) in scores.into_iter().enumerate() {
            let l = logits.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            out.push(SegmenterMask {
                mask: l.iter().map(|&v| v > 0.0).collect(),
                logits: l,
                score,
            });
        }
        Ok(out)
    }
}

impl Segmenter for SamSegmenter {
    fn segment(&self, frame: &Frame, frame_index: usize, points: &[(f64, f64)]) -> Result<Vec<SegmenterMask>> {
        if points.is_empty() {
            return Err(Error::Segmenter("no prompt points".into()));
        }
        self.run(frame, frame_index, points).map_err(seg)
    }
}
