//! Attention-derived propagation kernels.

mod bank;
mod sparse;

pub use bank::{BankEntry, ReferenceBank};
pub use sparse::{
    attention_kernel, cosine_kernel, propagate, propagate_channel, sparsify, KernelParams,
    PropagationKernel,
};

use crate::backend::FeatureSet;
use crate::error::{Error, Result};
use crate::real::Real;

/// Mixing weights over attention heads, stored as free logits.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadWeights {
    pub logits: Vec<f64>,
}

impl HeadWeights {
    pub fn uniform(heads: usize) -> Self {
        Self {
            logits: vec![0.0; heads],
        }
    }

    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "head logits must be finite and non-empty".into(),
            ));
        }
        Ok(Self { logits })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Softmax of the logits.
    pub fn weights(&self) -> Vec<f64> {
        softmax_f64(&self.logits)
    }
}

pub fn softmax_f64(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// In-place softmax of one row.
pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// Row-softmaxed scaled dot products of a block of query rows against all
/// keys: `softmax(Q K^T / sqrt(d))`, `rows x n_keys`.
pub(crate) fn affinity_rows<T: Real>(q: &[T], k: &[T], d: usize) -> Vec<T> {
    let rows = q.len() / d;
    let n = k.len() / d;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); rows * n];
    for (qi, orow) in q.chunks_exact(d).zip(out.chunks_exact_mut(n)) {
        for (kj, o) in k.chunks_exact(d).zip(orow.iter_mut()) {
            let mut dot = T::zero();
            for a in 0..d {
                dot = dot + qi[a] * kj[a];
            }
            *o = dot * scale;
        }
        softmax_row(orow);
    }
    out
}

fn check_matrix<T>(m: &[T], d: usize, what: &str) -> Result<usize> {
    if d == 0 {
        return Err(Error::InvalidArgument("head dimension is zero".into()));
    }
    if m.is_empty() || m.len() % d != 0 {
        return Err(Error::Shape(format!(
            "{what} has {} values, not a positive multiple of {d}",
            m.len()
        )));
    }
    Ok(m.len() / d)
}

/// Dense single-head attention `softmax(Q K^T / sqrt(d))` with `Q` and `K`
/// row-major `n x d`.
pub fn head_affinity<T: Real>(q: &[T], k: &[T], d: usize) -> Result<Vec<T>> {
    check_matrix(q, d, "query")?;
    check_matrix(k, d, "key")?;
    Ok(affinity_rows(q, k, d))
}

pub(crate) fn cosine_rows<T: Real>(
    target: &[T],
    source: &[T],
    channels: usize,
    inv_temperature: T,
) -> Vec<T> {
    let n = source.len() / channels;
    let normalize = |m: &[T]| -> Vec<T> {
        m.chunks_exact(channels)
            .flat_map(|r| {
                let norm = r.iter().map(|v| *v * *v).sum::<T>().sqrt();
                r.iter().map(move |v| *v / norm)
            })
            .collect()
    };
    let (t, s) = (normalize(target), normalize(source));
    let mut out = vec![T::zero(); (t.len() / channels) * n];
    for (ti, orow) in t.chunks_exact(channels).zip(out.chunks_exact_mut(n)) {
        for (sj, o) in s.chunks_exact(channels).zip(orow.iter_mut()) {
            let dot: T = ti.iter().zip(sj).map(|(a, b)| *a * *b).sum();
            *o = dot * inv_temperature;
        }
        softmax_row(orow);
    }
    out
}

pub(crate) fn check_features<T: Real>(f: &FeatureSet<T>) -> Result<()> {
    if f.channels == 0 || f.data.len() != f.locations * f.channels {
        return Err(Error::Shape("feature set size mismatch".into()));
    }
    for i in 0..f.locations {
        if f.row(i).iter().all(|v| *v == T::zero()) {
            return Err(Error::ZeroNormFeature(i));
        }
    }
    Ok(())
}

/// Softmax over temperature-scaled cosine similarities between target and
/// source feature rows.
pub fn cosine_affinity<T: Real>(
    target: &FeatureSet<T>,
    source: &FeatureSet<T>,
    temperature: f64,
) -> Result<Vec<T>> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if target.channels != source.channels {
        return Err(Error::Shape("feature channel mismatch".into()));
    }
    check_features(target)?;
    check_features(source)?;
    Ok(cosine_rows(
        &target.data,
        &source.data,
        target.channels,
        T::of(1.0 / temperature),
    ))
}

/// Weighted sum of same-shaped per-head affinities.
pub fn aggregate_heads<T: Real>(heads: &[Vec<T>], weights: &[f64]) -> Result<Vec<T>> {
    if heads.is_empty() || heads.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} heads, {} weights",
            heads.len(),
            weights.len()
        )));
    }
    let len = heads[0].len();
    if heads.iter().any(|h| h.len() != len) {
        return Err(Error::Shape("heads differ in shape".into()));
    }
    let mut out = vec![T::zero(); len];
    for (h, &w) in heads.iter().zip(weights) {
        let w = T::of(w);
        for (o, v) in out.iter_mut().zip(h) {
            *o = *o + w * *v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row_sums(m: &[f64], n: usize) -> Vec<f64> {
        m.chunks(n).map(|r| r.iter().sum()).collect()
    }

    #[test]
    fn sharp_self_attention_is_near_identity() {
        let d = 3;
        let q: Vec<f64> = (0..3)
            .flat_map(|i| (0..d).map(move |a| if a == i { 50.0 } else { 0.0 }))
            .collect();
        let a = head_affinity(&q, &q, d).unwrap();
        for i in 0..3 {
            assert!(a[i * 3 + i] > 1.0 - 1e-9);
        }
    }

    #[test]
    fn affinity_matches_direct_softmax() {
        let q = [1.0, 0.0, 0.5, 0.5, -1.0, 2.0];
        let k = [0.2, 0.1, -0.3, 1.0, 0.0, 0.0];
        let d = 2;
        let a = head_affinity(&q, &k, d).unwrap();
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (q[2 * i] * k[2 * j] + q[2 * i + 1] * k[2 * j + 1]) / 2f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..3 {
                assert!((a[i * 3 + j] - logits[j].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affinity_rejects_bad_shapes() {
        assert!(head_affinity::<f64>(&[1.0], &[1.0], 0).is_err());
        assert!(head_affinity::<f64>(&[1.0, 2.0, 3.0], &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn cosine_matches_oracle_and_is_scale_invariant() {
        let t = FeatureSet {
            locations: 4,
            channels: 2,
            data: vec![1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5],
        };
        let temp = 0.5;
        let a = cosine_affinity(&t, &t, temp).unwrap();
        for i in 0..4 {
            let ti = t.row(i);
            let logits: Vec<f64> = (0..4)
                .map(|j| {
                    let sj = t.row(j);
                    let dot = ti[0] * sj[0] + ti[1] * sj[1];
                    let n = (ti[0].hypot(ti[1])) * (sj[0].hypot(sj[1]));
                    dot / n / temp
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..4 {
                assert!((a[i * 4 + j] - logits[j].exp() / z).abs() < 1e-12);
            }
        }
        let mut scaled = t.clone();
        scaled.data[4] *= 7.0;
        scaled.data[5] *= 7.0;
        let b = cosine_affinity(&scaled, &t, temp).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_cold_temperature_is_near_identity() {
        let t = FeatureSet {
            locations: 3,
            channels: 3,
            data: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        };
        let a = cosine_affinity(&t, &t, 1e-3).unwrap();
        for i in 0..3 {
            assert!(a[i * 3 + i] > 1.0 - 1e-9);
        }
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let t = FeatureSet {
            locations: 2,
            channels: 2,
            data: vec![1.0, 0.0, 0.0, 0.0],
        };
        assert!(matches!(
            cosine_affinity(&t, &t, 1.0),
            Err(Error::ZeroNormFeature(1))
        ));
    }

    #[test]
    fn aggregate_examples() {
        let a = vec![0.2f64, 0.8, 0.5, 0.5];
        let b = vec![1.0f64, 0.0, 0.1, 0.9];
        assert_eq!(aggregate_heads(&[a.clone()], &[1.0]).unwrap(), a);
        let agg = aggregate_heads(&[a.clone(), b.clone()], &[0.3, 0.7]).unwrap();
        for i in 0..4 {
            assert!((agg[i] - (0.3 * a[i] + 0.7 * b[i])).abs() < 1e-15);
        }
        let mean = aggregate_heads(&vec![a.clone(); 5], &[0.2; 5]).unwrap();
        for i in 0..4 {
            assert!((mean[i] - a[i]).abs() < 1e-12);
        }
        assert!(aggregate_heads(&[a], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn head_weights_softmax() {
        let w = HeadWeights::uniform(5).weights();
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let w = HeadWeights::from_logits(vec![1000.0, 0.0]).unwrap().weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(HeadWeights::from_logits(vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn affinity_rows_are_stochastic(
            vals in proptest::collection::vec(-5.0f64..5.0, 24),
        ) {
            let (q, k) = vals.split_at(12);
            let a = head_affinity(q, k, 3).unwrap();
            for s in row_sums(&a, 4) {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn aggregation_is_permutation_equivariant(
            heads in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 6), 4),
            logits in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let w = softmax_f64(&logits);
            let perm = [2usize, 0, 3, 1];
            let ph: Vec<Vec<f64>> = perm.iter().map(|&i| heads[i].clone()).collect();
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let a = aggregate_heads(&heads, &w).unwrap();
            let b = aggregate_heads(&ph, &pw).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
