//! Mask refinement: point-prompted segmenter candidates scored against the
//! propagated soft mask, and a mean-field CRF alternative.

use std::collections::{HashMap, VecDeque};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::{normalize_to_distribution, upsample_channel, Frame, HardMask, LatticeGeometry};

/// Denominator guard in [`soft_iou`].
pub const SOFT_IOU_EPSILON: f64 = 1e-6;

/// `p` sets of `n` image-space `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPromptSet {
    pub sets: Vec<Vec<(f64, f64)>>,
    pub seed: Option<u64>,
}

impl PointPromptSet {
    pub fn point_count(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// Draws `p` sets of `n` i.i.d. lattice cells from `distribution` and maps each
/// to the image-space centre of its cell.
pub fn sample_prompts<R: Rng + ?Sized>(
    distribution: &[f32],
    geometry: &LatticeGeometry,
    n: usize,
    p: usize,
    rng: &mut R,
) -> Result<PointPromptSet> {
    if distribution.len() != geometry.location_count() {
        return Err(Error::Shape(format!(
            "distribution has {} cells, lattice has {}",
            distribution.len(),
            geometry.location_count()
        )));
    }
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("need n >= 1 and p >= 1".into()));
    }
    let dist = WeightedIndex::new(distribution).map_err(|_| Error::EmptyChannel)?;
    let (sy, sx) = (geometry.scale_y(), geometry.scale_x());
    let sets = (0..p)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let (r, c) = geometry.coords(dist.sample(rng));
                    ((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy)
                })
                .collect()
        })
        .collect();
    Ok(PointPromptSet { sets, seed: None })
}

/// `sum(min(a, b)) / (sum(max(a, b)) + eps)` for a soft grid `a` and binary
/// grid `b`.
pub fn soft_iou(a: &[f32], b: &[bool], eps: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} cells", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, if y { 1.0 } else { 0.0 });
        inter += x.min(y);
        union += x.max(y);
    }
    Ok(inter / (union + eps))
}

/// One segmenter proposal at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateMask {
    pub mask: Vec<bool>,
    pub logits: Vec<f32>,
    /// Soft IoU against the source soft mask, filled by [`select_candidate`].
    pub score: f64,
}

/// Index and copy of the candidate with the highest soft IoU against
/// `source`; ties go to the lowest index.
pub fn select_candidate(candidates: &[CandidateMask], source: &[f32]) -> Result<(usize, CandidateMask)> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to select from".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = soft_iou(source, &c.mask, SOFT_IOU_EPSILON)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (i, score) = best.expect("non-empty");
    let mut out = candidates[i].clone();
    out.score = score;
    Ok((i, out))
}

/// Mask returned by a segmenter for one prompt set.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterMask {
    pub mask: Vec<bool>,
    pub logits: Vec<f32>,
    pub score: f32,
}

/// Promptable segmentation model: point prompts in, scored masks out, all at
/// the frame's resolution.
pub trait Segmenter: Send + Sync {
    fn segment(
        &self,
        frame: &Frame,
        frame_index: usize,
        points: &[(f64, f64)],
    ) -> Result<Vec<SegmenterMask>>;
}

/// Test double answering with the ground-truth connected components that
/// contain the prompt points.
#[derive(Clone, Debug, Default)]
pub struct OracleSegmenter {
    truth: HashMap<usize, HardMask>,
    logit: f32,
}

impl OracleSegmenter {
    pub fn new() -> Self {
        Self {
            truth: HashMap::new(),
            logit: 10.0,
        }
    }

    pub fn insert(&mut self, frame_index: usize, mask: HardMask) {
        self.truth.insert(frame_index, mask);
    }
}

/// 4-connected component of `labels` containing `seed`.
pub fn connected_component(mask: &HardMask, seed: (usize, usize)) -> Vec<bool> {
    let (w, h) = (mask.width, mask.height);
    let label = mask.get(seed.0, seed.1);
    let mut out = vec![false; w * h];
    let mut queue = VecDeque::from([seed]);
    out[seed.0 * w + seed.1] = true;
    while let Some((r, c)) = queue.pop_front() {
        let mut visit = |rr: usize, cc: usize| {
            let i = rr * w + cc;
            if !out[i] && mask.labels[i] == label {
                out[i] = true;
                queue.push_back((rr, cc));
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < h {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < w {
            visit(r, c + 1);
        }
    }
    out
}

impl Segmenter for OracleSegmenter {
    fn segment(
        &self,
        frame: &Frame,
        frame_index: usize,
        points: &[(f64, f64)],
    ) -> Result<Vec<SegmenterMask>> {
        let truth = self
            .truth
            .get(&frame_index)
            .ok_or_else(|| Error::Segmenter(format!("no ground truth for frame {frame_index}")))?;
        if truth.width != frame.width || truth.height != frame.height {
            return Err(Error::Segmenter("ground truth size differs from frame".into()));
        }
        let mut mask = vec![false; truth.labels.len()];
        for &(x, y) in points {
            let c = (x.floor().max(0.0) as usize).min(truth.width - 1);
            let r = (y.floor().max(0.0) as usize).min(truth.height - 1);
            if truth.get(r, c) == 0 || mask[r * truth.width + c] {
                continue;
            }
            for (m, v) in mask.iter_mut().zip(connected_component(truth, (r, c))) {
                *m |= v;
            }
        }
        let logits = mask
            .iter()
            .map(|&m| if m { self.logit } else { -self.logit })
            .collect();
        Ok(vec![SegmenterMask {
            mask,
            logits,
            score: 1.0,
        }])
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    /// Channel at image resolution.
    pub channel: Vec<f32>,
    /// Selected candidate, or `None` when the channel passed through.
    pub selected: Option<(usize, f64)>,
}

/// Refines one object's latent-resolution soft channel with point prompts.
///
/// Empty channels and segmenter failures pass the bilinearly upsampled
/// channel through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn refine_object<R: Rng + ?Sized>(
    channel: &[f32],
    geometry: &LatticeGeometry,
    frame: &Frame,
    frame_index: usize,
    segmenter: &dyn Segmenter,
    n: usize,
    p: usize,
    rng: &mut R,
) -> Result<RefineOutcome> {
    if frame.height != geometry.image_height || frame.width != geometry.image_width {
        return Err(Error::Shape("frame does not match the refinement geometry".into()));
    }
    let source = upsample_channel(
        channel,
        geometry.latent_height,
        geometry.latent_width,
        frame.height,
        frame.width,
    );
    let passthrough = RefineOutcome {
        channel: source.clone(),
        selected: None,
    };
    let dist = match normalize_to_distribution(channel) {
        Ok(d) => d,
        Err(Error::EmptyChannel) => return Ok(passthrough),
        Err(e) => return Err(e),
    };
    let prompts = sample_prompts(&dist, geometry, n, p, rng)?;
    let mut candidates = Vec::with_capacity(p);
    for set in &prompts.sets {
        let proposals = match segmenter.segment(frame, frame_index, set) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("segmenter failed on frame {frame_index}, keeping propagated mask: {e}");
                return Ok(passthrough);
            }
        };
        let Some(best) = proposals.into_iter().reduce(|a, b| if b.score > a.score { b } else { a }) else {
            log::warn!("segmenter returned no masks on frame {frame_index}");
            return Ok(passthrough);
        };
        if best.mask.len() != source.len() || best.logits.len() != source.len() {
            log::warn!("segmenter mask size mismatch on frame {frame_index}");
            return Ok(passthrough);
        }
        candidates.push(CandidateMask {
            mask: best.mask,
            logits: best.logits,
            score: 0.0,
        });
    }
    let (index, chosen) = select_candidate(&candidates, &source)?;
    Ok(RefineOutcome {
        channel: chosen.logits.iter().map(|&l| sigmoid(l)).collect(),
        selected: Some((index, chosen.score)),
    })
}

/// Mean-field CRF parameters: a Gaussian appearance kernel and a Gaussian
/// smoothness kernel inside a square window, Potts compatibility.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CrfParams {
    pub kernel_size: usize,
    pub steps: usize,
    /// Probability assigned to the observed label in the unary term.
    pub confidence: f64,
    pub appearance_weight: f64,
    pub appearance_spatial: f64,
    pub appearance_color: f64,
    pub smoothness_weight: f64,
    pub smoothness_spatial: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            kernel_size: 5,
            steps: 30,
            confidence: 0.9,
            appearance_weight: 0.5,
            appearance_spatial: 2.0,
            appearance_color: 0.1,
            smoothness_weight: 0.3,
            smoothness_spatial: 1.0,
        }
    }
}

/// Edge-aware label smoothing by mean-field inference over pixel-adaptive
/// pairwise kernels.
pub fn crf_refine(mask: &HardMask, frame: &Frame, params: &CrfParams) -> Result<HardMask> {
    if mask.width != frame.width || mask.height != frame.height {
        return Err(Error::Shape("mask and frame differ in size".into()));
    }
    if params.steps == 0 {
        return Ok(mask.clone());
    }
    if params.kernel_size % 2 == 0 || !(params.confidence > 0.0 && params.confidence < 1.0) {
        return Err(Error::InvalidArgument(
            "CRF needs an odd kernel size and confidence in (0, 1)".into(),
        ));
    }
    let (w, h) = (mask.width, mask.height);
    let labels = mask.object_count as usize + 1;
    let half = (params.kernel_size / 2) as isize;
    let other = (1.0 - params.confidence) / (labels - 1).max(1) as f64;
    let unary: Vec<f64> = mask
        .labels
        .iter()
        .flat_map(|&l| {
            (0..labels).map(move |k| -(if k == l as usize { params.confidence } else { other }).ln())
        })
        .collect();

    // Pairwise weights per pixel and window offset.
    let offsets: Vec<(isize, isize)> = (-half..=half)
        .flat_map(|dy| (-half..=half).map(move |dx| (dy, dx)))
        .filter(|&o| o != (0, 0))
        .collect();
    let mut pair = vec![0.0f64; w * h * offsets.len()];
    for r in 0..h {
        for c in 0..w {
            let a = frame.pixel(r, c);
            for (o, &(dy, dx)) in offsets.iter().enumerate() {
                let (rr, cc) = (r as isize + dy, c as isize + dx);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let b = frame.pixel(rr as usize, cc as usize);
                let d2 = (dy * dy + dx * dx) as f64;
                let c2: f64 = (0..3).map(|k| ((a[k] - b[k]) as f64).powi(2)).sum();
                let app = params.appearance_weight
                    * (-d2 / (2.0 * params.appearance_spatial.powi(2))
                        - c2 / (2.0 * params.appearance_color.powi(2)))
                    .exp();
                let smooth = params.smoothness_weight
                    * (-d2 / (2.0 * params.smoothness_spatial.powi(2))).exp();
                pair[(r * w + c) * offsets.len() + o] = app + smooth;
            }
        }
    }

    let softmax_neg = |e: &[f64], out: &mut [f64]| {
        let m = e.iter().copied().fold(f64::INFINITY, f64::min);
        let mut s = 0.0;
        for (o, v) in out.iter_mut().zip(e) {
            *o = (m - v).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    };
    let mut q = vec![0.0; w * h * labels];
    for i in 0..w * h {
        softmax_neg(&unary[i * labels..(i + 1) * labels], &mut q[i * labels..(i + 1) * labels]);
    }
    let mut energy = vec![0.0; labels];
    for _ in 0..params.steps {
        let mut next = vec![0.0; q.len()];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                energy.copy_from_slice(&unary[i * labels..(i + 1) * labels]);
                for (o, &(dy, dx)) in offsets.iter().enumerate() {
                    let k = pair[i * offsets.len() + o];
                    if k == 0.0 {
                        continue;
                    }
                    let j = ((r as isize + dy) * w as isize + (c as isize + dx)) as usize;
                    // Potts: agreement with neighbour label l lowers the energy of l.
                    for l in 0..labels {
                        energy[l] -= k * q[j * labels + l];
                    }
                }
                softmax_neg(&energy, &mut next[i * labels..(i + 1) * labels]);
            }
        }
        q = next;
    }
    let out = q
        .chunks_exact(labels)
        .map(|p| {
            let mut best = 0;
            for l in 1..labels {
                if p[l] > p[best] {
                    best = l;
                }
            }
            best as u8
        })
        .collect();
    HardMask::new(w, h, out, mask.object_count)
}
