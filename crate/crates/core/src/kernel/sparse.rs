use std::cmp::Ordering;

use rayon::prelude::*;

use super::{affinity_rows, check_features, cosine_rows, HeadWeights};
use crate::backend::{FeatureSet, KeySet, QueryKeySet};
use crate::error::{Error, Result};
use crate::mask::{LatticeGeometry, SoftMaskStack};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelParams {
    /// Euclidean radius on the latent lattice.
    pub radius: f64,
    pub top_k: usize,
    /// Target rows materialized densely at once.
    pub block_rows: usize,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            radius: 14.0,
            top_k: 15,
            block_rows: 512,
        }
    }
}

impl KernelParams {
    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.top_k == 0 || self.block_rows == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel needs r > 0, k >= 1 and block_rows >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sparse row-stochastic map from target locations to the concatenated
/// locations of the reference frames, CSR layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationKernel {
    pub rows: usize,
    /// Locations per reference frame.
    pub ref_locations: usize,
    /// Frame index of each reference block, in column order.
    pub sources: Vec<usize>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub values: Vec<f32>,
}

impl PropagationKernel {
    pub fn col_count(&self) -> usize {
        self.ref_locations * self.sources.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.values[a..b])
    }

    /// `(reference slot, location)` of a column.
    pub fn split_col(&self, col: u32) -> (usize, usize) {
        let c = col as usize;
        (c / self.ref_locations, c % self.ref_locations)
    }

    fn from_rows(
        rows: Vec<Vec<(u32, f32)>>,
        ref_locations: usize,
        sources: Vec<usize>,
    ) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let total = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(total);
        let mut values = Vec::with_capacity(total);
        for r in &rows {
            for &(c, v) in r {
                cols.push(c);
                values.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            rows: rows.len(),
            ref_locations,
            sources,
            row_ptr,
            cols,
            values,
        }
    }
}

/// Lattice offsets within the radius, with squared distances.
fn radius_offsets(radius: f64) -> Vec<(isize, isize, f64)> {
    let r = radius.floor() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            if d2 <= radius * radius {
                out.push((dy, dx, d2));
            }
        }
    }
    out
}

/// In-radius candidates of one target row: `(column, value, squared distance)`.
struct Neighbourhood<'a> {
    geometry: &'a LatticeGeometry,
    offsets: Vec<(isize, isize, f64)>,
}

impl<'a> Neighbourhood<'a> {
    fn new(geometry: &'a LatticeGeometry, radius: f64) -> Self {
        Self {
            geometry,
            offsets: radius_offsets(radius),
        }
    }

    fn for_each(&self, target: usize, mut f: impl FnMut(usize, f64)) {
        let (h, w) = (
            self.geometry.latent_height as isize,
            self.geometry.latent_width as isize,
        );
        let (y, x) = self.geometry.coords(target);
        for &(dy, dx, d2) in &self.offsets {
            let (sy, sx) = (y as isize + dy, x as isize + dx);
            if sy >= 0 && sy < h && sx >= 0 && sx < w {
                f((sy * w + sx) as usize, d2);
            }
        }
    }
}

/// Keeps the `k` largest positive candidates (ties toward lower column),
/// renormalized, sorted by column. Falls back to the nearest candidate when
/// no positive mass survives.
fn select_row<T: Real>(mut cands: Vec<(u32, T, f64)>, k: usize) -> Vec<(u32, f32)> {
    let by_score = |a: &(u32, T, f64), b: &(u32, T, f64)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    };
    let positive = cands.iter().filter(|c| c.1 > T::zero()).count();
    if positive == 0 {
        let nearest = cands
            .iter()
            .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.0.cmp(&b.0)))
            .expect("radius always covers the target location");
        return vec![(nearest.0, 1.0)];
    }
    cands.retain(|c| c.1 > T::zero());
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, by_score);
        cands.truncate(k);
    }
    cands.sort_by_key(|c| c.0);
    let total: f64 = cands.iter().map(|c| c.1.f64()).sum();
    cands
        .into_iter()
        .map(|(c, v, _)| (c, (v.f64() / total) as f32))
        .collect()
}

/// Radius-masks, top-k sparsifies and renormalizes dense rows over the
/// concatenated context of `ref_count` reference frames.
pub fn sparsify<T: Real>(
    dense: &[T],
    ref_count: usize,
    geometry: &LatticeGeometry,
    params: &KernelParams,
) -> Result<PropagationKernel> {
    params.validate()?;
    let n = geometry.location_count();
    let width = n * ref_count;
    if ref_count == 0 || dense.len() % width != 0 || dense.len() / width != n {
        return Err(Error::Shape(format!(
            "dense affinity has {} values, expected {n}x{width}",
            dense.len()
        )));
    }
    let hood = Neighbourhood::new(geometry, params.radius);
    let rows = (0..n)
        .map(|i| {
            let row = &dense[i * width..(i + 1) * width];
            let mut cands = Vec::new();
            for s in 0..ref_count {
                hood.for_each(i, |j, d2| {
                    let c = s * n + j;
                    cands.push((c as u32, row[c], d2));
                });
            }
            select_row(cands, params.top_k)
        })
        .collect();
    Ok(PropagationKernel::from_rows(rows, n, (0..ref_count).collect()))
}

/// Builds the sparse kernel block by block: `dense_block(start, end, slot)`
/// yields the `(end - start) x n` affinity rows against reference `slot`.
fn blocked_kernel<T: Real, F>(
    geometry: &LatticeGeometry,
    sources: Vec<usize>,
    params: &KernelParams,
    dense_block: F,
) -> Result<PropagationKernel>
where
    F: Fn(usize, usize, usize) -> Vec<T> + Sync,
{
    params.validate()?;
    let n = geometry.location_count();
    let hood = Neighbourhood::new(geometry, params.radius);
    let starts: Vec<usize> = (0..n).step_by(params.block_rows).collect();
    let blocks: Vec<Vec<Vec<(u32, f32)>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + params.block_rows).min(n);
            let mut cands: Vec<Vec<(u32, T, f64)>> = vec![Vec::new(); end - start];
            for slot in 0..sources.len() {
                let dense = dense_block(start, end, slot);
                for (r, c) in cands.iter_mut().enumerate() {
                    let row = &dense[r * n..(r + 1) * n];
                    hood.for_each(start + r, |j, d2| {
                        c.push(((slot * n + j) as u32, row[j], d2));
                    });
                }
            }
            cands
                .into_iter()
                .map(|c| select_row(c, params.top_k))
                .collect()
        })
        .collect();
    Ok(PropagationKernel::from_rows(
        blocks.into_iter().flatten().collect(),
        n,
        sources,
    ))
}

/// Weighted multi-head attention kernel from the target frame's queries to
/// the keys of each reference frame (`(frame index, keys)`), sparsified.
pub fn attention_kernel<T: Real>(
    query: &QueryKeySet<T>,
    refs: &[(usize, &KeySet<T>)],
    weights: &HeadWeights,
    geometry: &LatticeGeometry,
    params: &KernelParams,
) -> Result<PropagationKernel> {
    query.validate()?;
    if refs.is_empty() {
        return Err(Error::EmptyBank);
    }
    let n = geometry.location_count();
    let d = query.head_dim;
    if query.locations != n {
        return Err(Error::Shape(format!(
            "queries cover {} locations, lattice has {n}",
            query.locations
        )));
    }
    if weights.len() != query.head_count() {
        return Err(Error::Shape(format!(
            "{} head weights for {} heads",
            weights.len(),
            query.head_count()
        )));
    }
    for (_, k) in refs {
        if k.locations != n || k.head_dim != d || k.keys.len() != query.head_count() {
            return Err(Error::Shape("reference keys do not match queries".into()));
        }
    }
    let w: Vec<T> = weights.weights().into_iter().map(T::of).collect();
    let sources = refs.iter().map(|(f, _)| *f).collect();
    blocked_kernel(geometry, sources, params, |start, end, slot| {
        let keys = &refs[slot].1.keys;
        let mut agg = vec![T::zero(); (end - start) * n];
        for (h, head) in query.heads.iter().enumerate() {
            let a = affinity_rows(&head.q[start * d..end * d], &keys[h], d);
            for (o, v) in agg.iter_mut().zip(a) {
                *o = *o + w[h] * v;
            }
        }
        agg
    })
}

/// Cosine-similarity kernel over raw features, sparsified like
/// [`attention_kernel`].
pub fn cosine_kernel<T: Real>(
    target: &FeatureSet<T>,
    refs: &[(usize, &FeatureSet<T>)],
    temperature: f64,
    geometry: &LatticeGeometry,
    params: &KernelParams,
) -> Result<PropagationKernel> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if refs.is_empty() {
        return Err(Error::EmptyBank);
    }
    let n = geometry.location_count();
    check_features(target)?;
    if target.locations != n {
        return Err(Error::Shape("feature locations do not match lattice".into()));
    }
    for (_, f) in refs {
        check_features(f)?;
        if f.locations != n || f.channels != target.channels {
            return Err(Error::Shape("reference features do not match target".into()));
        }
    }
    let c = target.channels;
    let inv_t = T::of(1.0 / temperature);
    let sources = refs.iter().map(|(f, _)| *f).collect();
    blocked_kernel(geometry, sources, params, |start, end, slot| {
        cosine_rows(&target.data[start * c..end * c], &refs[slot].1.data, c, inv_t)
    })
}

/// Propagates one channel: `out_i = sum_j K_ij ref[j]` over the concatenated
/// reference planes.
pub fn propagate_channel(kernel: &PropagationKernel, refs: &[&[f32]]) -> Result<Vec<f32>> {
    if refs.is_empty() {
        return Err(Error::EmptyBank);
    }
    if refs.len() != kernel.sources.len() || refs.iter().any(|r| r.len() != kernel.ref_locations)
    {
        return Err(Error::Shape(format!(
            "kernel expects {} reference planes of {} locations",
            kernel.sources.len(),
            kernel.ref_locations
        )));
    }
    Ok((0..kernel.rows)
        .map(|i| {
            let (cols, vals) = kernel.row(i);
            cols.iter()
                .zip(vals)
                .map(|(&c, &v)| {
                    let (s, j) = kernel.split_col(c);
                    v as f64 * refs[s][j] as f64
                })
                .sum::<f64>() as f32
        })
        .collect())
}

/// Propagates every channel of the reference stacks through one kernel.
pub fn propagate(kernel: &PropagationKernel, refs: &[&SoftMaskStack]) -> Result<SoftMaskStack> {
    let first = refs.first().ok_or(Error::EmptyBank)?;
    if refs.iter().any(|r| r.channels != first.channels) {
        return Err(Error::Shape("reference stacks differ in channel count".into()));
    }
    if first.plane() != kernel.rows {
        return Err(Error::Shape("kernel rows do not match the mask lattice".into()));
    }
    let channels = (0..first.channels)
        .map(|c| {
            let planes: Vec<&[f32]> = refs.iter().map(|r| r.channel(c)).collect();
            propagate_channel(kernel, &planes)
        })
        .collect::<Result<Vec<_>>>()?;
    SoftMaskStack::from_channels(first.height, first.width, channels)
}
