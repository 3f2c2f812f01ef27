//! Text conditioning: a CLIP text transformer with its tokenizer, or a table
//! of precomputed embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use candle::{DType, Device, Module, Tensor};
use candle_nn as nn;
use candle_transformers::models::stable_diffusion::clip::{ClipTextTransformer, Config};

use attnprop_core::{Error, Result};

use crate::be;

/// Key of the empty prompt in an embedding table.
pub const NULL_KEY: &str = "__null__";

pub enum TextEncoder {
    Clip {
        model: Box<ClipTextTransformer>,
        tokenizer: Box<tokenizers::Tokenizer>,
        max_len: usize,
        pad_id: u32,
        device: Device,
    },
    /// Embeddings keyed by prompt text; the empty prompt is stored under
    /// [`NULL_KEY`].
    Table(BTreeMap<String, Tensor>),
}

impl TextEncoder {
    /// Stable Diffusion 2.1 text encoder, padded with `!`.
    pub fn clip_sd21(weights: &Path, tokenizer: &Path, device: &Device, dtype: DType) -> Result<Self> {
        let config = Config::v2_1();
        let vb = unsafe { nn::VarBuilder::from_mmaped_safetensors(&[weights], dtype, device) }.map_err(be)?;
        let model = ClipTextTransformer::new(vb, &config).map_err(be)?;
        let tokenizer = tokenizers::Tokenizer::from_file(tokenizer)
            .map_err(|e| Error::Backend(format!("tokenizer {}: {e}", tokenizer.display())))?;
        let pad = config.pad_with.as_deref().unwrap_or("<|endoftext|>");
        let pad_id = tokenizer
            .get_vocab(true)
            .get(pad)
            .copied()
            .ok_or_else(|| Error::Backend(format!("tokenizer has no {pad:?} token")))?;
        Ok(Self::Clip {
            model: Box::new(model),
            tokenizer: Box::new(tokenizer),
            max_len: config.max_position_embeddings,
            pad_id,
            device: device.clone(),
        })
    }

    pub fn table(path: &Path, device: &Device, dtype: DType) -> Result<Self> {
        let tensors = candle::safetensors::load(path, device).map_err(be)?;
        if !tensors.contains_key(NULL_KEY) {
            return Err(Error::Backend(format!(
                "embedding table {} has no {NULL_KEY} entry",
                path.display()
            )));
        }
        let table = tensors
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(dtype).map_err(be)?)))
            .collect::<Result<_>>()?;
        Ok(Self::Table(table))
    }

    /// `1 x tokens x dim` conditioning for `text`.
    pub fn encode(&self, text: &str) -> Result<Tensor> {
        match self {
            TextEncoder::Clip {
                model,
                tokenizer,
                max_len,
                pad_id,
                device,
            } => {
                let mut ids = tokenizer
                    .encode(text, true)
                    .map_err(|e| Error::Backend(format!("tokenizing {text:?}: {e}")))?
                    .get_ids()
                    .to_vec();
                ids.truncate(*max_len);
                ids.resize(*max_len, *pad_id);
                let ids = Tensor::new(ids.as_slice(), device).and_then(|t| t.unsqueeze(0)).map_err(be)?;
                model.forward(&ids).map_err(be)
            }
            TextEncoder::Table(table) => {
                let key = if text.is_empty() { NULL_KEY } else { text };
                let t = table
                    .get(key)
                    .ok_or_else(|| Error::Backend(format!("no precomputed embedding for {text:?}")))?;
                match t.rank() {
                    2 => t.unsqueeze(0).map_err(be),
                    3 => Ok(t.clone()),
                    r => Err(Error::Shape(format!("embedding for {text:?} has rank {r}"))),
                }
            }
        }
    }
}
