//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-10 run on the synthetic backend with the oracle segmenter.
//! Criteria 11-15 need full-scale results and read them from
//! `$ATTNPROP_RESULTS_DIR`; without it they print SKIP.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attnprop_core::adapt::{gradient_check, optimize_instance_observed, OptimizerConfig};
use attnprop_core::backend::{Backend, HeadQk, QueryKeySet, SyntheticBackend, SyntheticConfig};
use attnprop_core::config::{NoiseMode, PromptMode, RefinementMode, RunConfig, SegmenterKind};
use attnprop_core::eval::{boundary_f, jaccard, load_manifest, summarize, Layout, ObjectMean};
use attnprop_core::io::read_label_png;
use attnprop_core::kernel::{attention_kernel, propagate_channel, HeadWeights, KernelParams, ReferenceBank};
use attnprop_core::mask::{argmax_fuse, downsample_mask, HardMask, LatticeGeometry, SoftMaskStack};
use attnprop_core::refine::{soft_iou, SOFT_IOU_EPSILON};
use attnprop_core::run::{cmd_track, OracleSegmenterFactory};
use attnprop_core::toy::ToyVideo;

const ROW_SUM_TOL: f64 = 1e-5;
const IDENTITY_TOL: f32 = 1e-3;
const SOFT_IOU_TOL: f64 = 1e-9;
const SELF_IOU_FLOOR: f64 = 1.0 - 1e-5;
const METRIC_TOL: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-4;
const SIMPLEX_TOL: f64 = 1e-6;
const BOUNDARY_TOLERANCE: f64 = 0.008;
const DAVIS_TOL: f64 = 1.0;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_qk(rng: &mut ChaCha8Rng, n: usize, heads: usize, d: usize, scale: f64) -> QueryKeySet<f64> {
    let mut mat = || (0..n * d).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect::<Vec<_>>();
    QueryKeySet {
        locations: n,
        head_dim: d,
        layers: vec!["layer".into()],
        heads: (0..heads)
            .map(|h| HeadQk {
                layer: 0,
                head: h,
                q: mat(),
                k: mat(),
            })
            .collect(),
    }
}

/// Dense weighted head average, then per-row radius mask, top-k and
/// renormalization, computed directly.
fn kernel_oracle(
    query: &QueryKeySet<f64>,
    refs: &[QueryKeySet<f64>],
    weights: &[f64],
    lh: usize,
    lw: usize,
    radius: f64,
    k: usize,
) -> Vec<BTreeMap<usize, f64>> {
    let n = lh * lw;
    let d = query.head_dim;
    let dense: Vec<Vec<f64>> = refs
        .iter()
        .map(|r| {
            let mut agg = vec![0.0; n * n];
            for (h, w) in weights.iter().enumerate() {
                for i in 0..n {
                    let qi = &query.heads[h].q[i * d..(i + 1) * d];
                    let logits: Vec<f64> = (0..n)
                        .map(|j| {
                            let kj = &r.heads[h].k[j * d..(j + 1) * d];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    for j in 0..n {
                        agg[i * n + j] += w * (logits[j] - m).exp() / z;
                    }
                }
            }
            agg
        })
        .collect();
    (0..n)
        .map(|i| {
            let (yi, xi) = ((i / lw) as f64, (i % lw) as f64);
            let mut cands: Vec<(usize, f64)> = Vec::new();
            for (s, a) in dense.iter().enumerate() {
                for j in 0..n {
                    let (yj, xj) = ((j / lw) as f64, (j % lw) as f64);
                    if ((yi - yj).powi(2) + (xi - xj).powi(2)).sqrt() <= radius {
                        cands.push((s * n + j, a[i * n + j]));
                    }
                }
            }
            cands.sort_by(|a, b| b.1.total_cmp(&a.1));
            cands.truncate(k);
            let total: f64 = cands.iter().map(|c| c.1).sum();
            cands.into_iter().map(|(c, v)| (c, v / total)).collect()
        })
        .collect()
}

fn kernel_stochasticity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sum = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for trial in 0..100 {
        let (lh, lw) = (rng.random_range(4..=10), rng.random_range(4..=10));
        let n = lh * lw;
        let heads = rng.random_range(1..=4);
        let d = rng.random_range(2..=8);
        let refs_n = rng.random_range(1..=3);
        let (radius, k) = if trial % 2 == 0 {
            (14.0, 15)
        } else {
            (rng.random_range(1.0..6.0), rng.random_range(1..=20))
        };
        let query = random_qk(&mut rng, n, heads, d, 2.0);
        let refs: Vec<_> = (0..refs_n).map(|_| random_qk(&mut rng, n, heads, d, 2.0)).collect();
        let keys: Vec<_> = refs.iter().map(|r| r.keys()).collect();
        let slots: Vec<_> = keys.iter().enumerate().map(|(f, k)| (f, k)).collect();
        let logits: Vec<f64> = (0..heads).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights = HeadWeights::from_logits(logits).map_err(err)?;
        let g = LatticeGeometry::new(lh, lw, lh, lw).map_err(err)?;
        let params = KernelParams {
            radius,
            top_k: k,
            block_rows: 7,
        };
        let kernel = attention_kernel(&query, &slots, &weights, &g, &params).map_err(err)?;
        let oracle = kernel_oracle(&query, &refs, &weights.weights(), lh, lw, radius, k);
        for (i, expect) in oracle.iter().enumerate() {
            let (cols, vals) = kernel.row(i);
            let sum: f64 = vals.iter().map(|&v| v as f64).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            ensure((sum - 1.0).abs() <= ROW_SUM_TOL, || format!("trial {trial} row {i} sums to {sum}"))?;
            ensure(cols.len() <= k, || format!("trial {trial} row {i} keeps {} > {k}", cols.len()))?;
            for &c in cols {
                let (_, j) = kernel.split_col(c);
                let dist = (((i / lw) as f64 - (j / lw) as f64).powi(2) + ((i % lw) as f64 - (j % lw) as f64).powi(2)).sqrt();
                ensure(dist <= radius, || format!("trial {trial} row {i} reaches distance {dist} > {radius}"))?;
            }
            let got: BTreeMap<usize, f64> = cols.iter().zip(vals).map(|(&c, &v)| (c as usize, v as f64)).collect();
            ensure(got.keys().eq(expect.keys()), || format!("trial {trial} row {i} support differs from the oracle"))?;
            for (c, v) in expect {
                worst_oracle = worst_oracle.max((got[c] - v).abs());
            }
        }
    }
    ensure(worst_oracle <= ROW_SUM_TOL, || format!("kernel values differ from the oracle by {worst_oracle:.2e}"))?;
    Ok(format!(
        "100 kernels; max |row sum - 1| = {worst_sum:.1e}; max deviation from dense oracle = {worst_oracle:.1e}"
    ))
}

fn identity_propagation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let (lh, lw) = (rng.random_range(3..=9), rng.random_range(3..=9));
        let n = lh * lw;
        // One-hot rows scaled so every self logit is 50 and every other 0.
        let scale = (50.0 * (n as f64).sqrt()).sqrt();
        let q: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |a| if a == i { scale } else { 0.0 }))
            .collect();
        let qk = QueryKeySet {
            locations: n,
            head_dim: n,
            layers: vec!["layer".into()],
            heads: vec![HeadQk {
                layer: 0,
                head: 0,
                q: q.clone(),
                k: q,
            }],
        };
        let g = LatticeGeometry::new(lh, lw, lh, lw).map_err(err)?;
        let keys = qk.keys();
        let kernel = attention_kernel(&qk, &[(0, &keys)], &HeadWeights::uniform(1), &g, &KernelParams::default())
            .map_err(err)?;
        for binary in [false, true] {
            let plane: Vec<f32> = (0..n)
                .map(|_| if binary { rng.random_bool(0.5) as u8 as f32 } else { rng.random() })
                .collect();
            let out = propagate_channel(&kernel, &[&plane]).map_err(err)?;
            let e = out.iter().zip(&plane).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            worst = worst.max(e);
        }
    }
    ensure(worst < IDENTITY_TOL, || format!("max-abs error {worst:.2e}"))?;
    Ok(format!("40 masks; max-abs error {worst:.1e}"))
}

fn soft_iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut worst_self = 1.0f64;
    for _ in 0..1000 {
        let a: Vec<f32> = (0..64).map(|_| rng.random()).collect();
        let b: Vec<bool> = (0..64).map(|_| rng.random_bool(0.4)).collect();
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for (x, y) in a.iter().zip(&b) {
            let y = if *y { 1.0 } else { 0.0 };
            lo += (*x as f64).min(y);
            hi += (*x as f64).max(y);
        }
        let expect = lo / (hi + SOFT_IOU_EPSILON);
        worst = worst.max((soft_iou(&a, &b, SOFT_IOU_EPSILON).map_err(err)? - expect).abs());
        if b.iter().any(|&v| v) {
            let as_soft: Vec<f32> = b.iter().map(|&v| v as u8 as f32).collect();
            worst_self = worst_self.min(soft_iou(&as_soft, &b, SOFT_IOU_EPSILON).map_err(err)?);
        }
    }
    ensure(worst <= SOFT_IOU_TOL, || format!("max deviation {worst:.2e}"))?;
    ensure(worst_self >= SELF_IOU_FLOOR, || format!("IoU(A, A) = {worst_self}"))?;
    Ok(format!("1000 pairs; max deviation {worst:.1e}; min IoU(A,A) {worst_self:.7}"))
}

fn random_blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> HardMask {
    let mut labels = vec![0u8; h * w];
    for _ in 0..rng.random_range(0..4) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0..=h), rng.random_range(c0..=w));
        for r in r0..r1 {
            for c in c0..c1 {
                labels[r * w + c] = 1;
            }
        }
    }
    for l in labels.iter_mut() {
        if rng.random_bool(0.05) {
            *l ^= 1;
        }
    }
    HardMask::new(w, h, labels, 1).unwrap()
}

/// Boundary pixels: differs from the east, south or south-east neighbour,
/// looking only at neighbours inside the image.
fn oracle_boundary(m: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = m[r * w + c];
            let mut edge = false;
            for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                let (rr, cc) = (r + dr, c + dc);
                if rr < h && cc < w && m[rr * w + cc] != v {
                    edge = true;
                }
            }
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

fn oracle_f(pred: &HardMask, gt: &HardMask) -> f64 {
    let (h, w) = (gt.height, gt.width);
    let radius = (BOUNDARY_TOLERANCE * ((h * h + w * w) as f64).sqrt()).ceil();
    let pb = oracle_boundary(&pred.binary(1), h, w);
    let gb = oracle_boundary(&gt.binary(1), h, w);
    let near = |p: &(usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .any(|q| ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt() <= radius)
    };
    let (precision, recall) = match (pb.is_empty(), gb.is_empty()) {
        (true, true) => (1.0, 1.0),
        (true, false) => (1.0, 0.0),
        (false, true) => (0.0, 1.0),
        _ => (
            pb.iter().filter(|p| near(p, &gb)).count() as f64 / pb.len() as f64,
            gb.iter().filter(|g| near(g, &pb)).count() as f64 / gb.len() as f64,
        ),
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn oracle_j(pred: &HardMask, gt: &HardMask) -> f64 {
    let inter = pred.labels.iter().zip(&gt.labels).filter(|(p, g)| **p == 1 && **g == 1).count();
    let union = pred.labels.iter().zip(&gt.labels).filter(|(p, g)| **p == 1 || **g == 1).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut dj, mut df) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let pred = random_blob_mask(&mut rng, 16, 16);
        let gt = random_blob_mask(&mut rng, 16, 16);
        dj = dj.max((jaccard(&pred, &gt, 1).map_err(err)? - oracle_j(&pred, &gt)).abs());
        df = df.max((boundary_f(&pred, &gt, 1, BOUNDARY_TOLERANCE).map_err(err)? - oracle_f(&pred, &gt)).abs());
    }
    ensure(dj <= METRIC_TOL && df <= METRIC_TOL, || format!("J deviation {dj:.2e}, F deviation {df:.2e}"))?;
    for trial in 0..100 {
        let objects: Vec<ObjectMean> = (0..rng.random_range(1..10))
            .map(|i| ObjectMean {
                sequence: format!("s{}", i % 3),
                object: i as u8 + 1,
                frames: 5,
                j: rng.random(),
                f: rng.random(),
                unseen: None,
            })
            .collect();
        let s = summarize(&objects).map_err(err)?;
        ensure(s.jf_m == (s.j_m + s.f_m) / 2.0, || format!("trial {trial}: J&F_m {} != mean", s.jf_m))?;
    }
    Ok(format!("500 pairs; max J deviation {dj:.1e}, max F deviation {df:.1e}; J&F_m identity exact"))
}

/// A toy frame's latent and the object's lattice target on `backend`.
fn instance(backend: &SyntheticBackend, t: usize) -> Result<(attnprop_core::inversion::LatentState, Vec<f32>), String> {
    let (frame, mask) = ToyVideo::translating_square(t + 1).render(t).map_err(err)?;
    let latent = backend.encode_frame(&frame).map_err(err)?;
    let target = downsample_mask(&mask, &backend.geometry()).map_err(err)?;
    Ok((latent, target.channel(1).to_vec()))
}

fn gradient_check_criterion() -> Outcome {
    let backend = SyntheticBackend::new(SyntheticConfig::default()).map_err(err)?;
    let (latent, target) = instance(&backend, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut prompt = backend.null_prompt().map_err(err)?;
    prompt.values.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    let logits: Vec<f64> = (0..backend.head_count()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let report = gradient_check::<_, f64, _>(&backend, &latent, &prompt, &logits, &target, 20, 1e-6, 1e-8, &mut rng)
        .map_err(err)?;
    ensure(report.max_relative_error < GRADIENT_TOL, || {
        format!("max relative error {:.2e}", report.max_relative_error)
    })?;
    Ok(format!("20 probes in f64; max relative error {:.1e}", report.max_relative_error))
}

fn optimization_sanity() -> Outcome {
    let config = OptimizerConfig {
        steps: 200,
        ..Default::default()
    };
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let backend = SyntheticBackend::new(SyntheticConfig {
            seed,
            ..Default::default()
        })
        .map_err(err)?;
        let (latent, target) = instance(&backend, seed as usize % 3)?;
        let init = backend.null_prompt().map_err(err)?;
        let mut worst = 0.0f64;
        let mut steps = 0;
        let adapted = optimize_instance_observed::<_, f64>(&backend, &latent, &init, &target, 1, &config, |_, _, w| {
            steps += 1;
            let off = (w.iter().sum::<f64>() - 1.0).abs();
            let outside = w.iter().any(|v| !(0.0..=1.0).contains(v));
            worst = worst.max(if outside { f64::INFINITY } else { off });
        })
        .map_err(err)?;
        ensure(steps == 200, || format!("seed {seed}: observed {steps} steps"))?;
        ensure(worst <= SIMPLEX_TOL, || format!("seed {seed}: head weights off the simplex by {worst:.2e}"))?;
        ensure(adapted.final_loss < adapted.initial_loss, || {
            format!("seed {seed}: loss {} -> {}", adapted.initial_loss, adapted.final_loss)
        })?;
        lines.push(format!("{:.4}->{:.4}", adapted.initial_loss, adapted.final_loss));
    }
    Ok(format!("5 instances, 200 steps each; losses {}", lines.join(", ")))
}

fn argmax_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..300 {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..12), rng.random_range(1..12));
        // Values on a coarse grid so rescaling cannot merge distinct scores.
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(0..1000) as f32 / 1000.0).collect();
        let stack = SoftMaskStack {
            channels: c,
            height: h,
            width: w,
            data,
        };
        let base = argmax_fuse(&stack).map_err(err)?;
        let s = 10f64.powf(rng.random_range(-3.0..3.0)) as f32;
        let scaled = SoftMaskStack {
            data: stack.data.iter().map(|v| v * s).collect(),
            ..stack.clone()
        };
        ensure(argmax_fuse(&scaled).map_err(err)? == base, || format!("trial {trial}: scale {s} changed labels"))?;
    }
    Ok("300 stacks, scales in [1e-3, 1e3]".into())
}

fn bank_law() -> Outcome {
    let window = 7;
    let mut bank: ReferenceBank<()> = ReferenceBank::new(window);
    let mask = SoftMaskStack::zeros(2, 2, 2);
    bank.insert(0, (), mask.clone()).map_err(err)?;
    for f in 1..=40usize {
        bank.insert(f, (), mask.clone()).map_err(err)?;
        let mut expect = vec![0];
        expect.extend(f.saturating_sub(6).max(1)..=f);
        ensure(bank.frames() == expect, || format!("after {f}: {:?}", bank.frames()))?;
        ensure(bank.len() <= window + 1, || format!("after {f}: {} entries", bank.len()))?;
    }
    Ok("frames 1..=40 inserted; bank = {0} U {F-6..F}, never above 8".into())
}

fn toy_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.prompt.mode = PromptMode::Null;
    c.refinement.mode = RefinementMode::None;
    c.run.output_dir = out.to_path_buf();
    c.run.cache_dir = None;
    c.run.prompt_store = out.join("prompts");
    c
}

fn toy_tracking() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let video = ToyVideo::lattice_aligned(3);
    video.write(dir.path()).map_err(err)?;
    let manifest = load_manifest(dir.path(), Layout::Davis, &Default::default()).map_err(err)?;
    let backend = SyntheticBackend::new(SyntheticConfig {
        image_height: 32,
        image_width: 32,
        latent_height: 32,
        latent_width: 32,
        ..Default::default()
    })
    .map_err(err)?;
    let c = toy_config(&dir.path().join("out"));
    cmd_track(&backend, &c, &manifest, None).map_err(err)?;
    let mut js = Vec::new();
    for t in 0..video.frames {
        let pred = read_label_png(&c.run.output_dir.join(format!("{}/{t:05}.png", video.name))).map_err(err)?;
        let (_, gt) = video.render(t).map_err(err)?;
        let j = oracle_j(&pred, &gt);
        ensure(j == 1.0, || format!("frame {t}: J = {j}"))?;
        js.push(j);
    }
    Ok(format!("J per frame {js:?}"))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "png") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    ToyVideo::translating_square(3).write(&dir.path().join("data")).map_err(err)?;
    let manifest = load_manifest(&dir.path().join("data"), Layout::Davis, &Default::default()).map_err(err)?;
    let backend = SyntheticBackend::new(SyntheticConfig::default()).map_err(err)?;
    let mut roots = Vec::new();
    for run in ["a", "b"] {
        let mut c = toy_config(&dir.path().join(run));
        c.run.seed = 11;
        c.propagation.noise = NoiseMode::Random;
        c.refinement.mode = RefinementMode::Segmenter;
        c.refinement.segmenter = SegmenterKind::Oracle;
        cmd_track(&backend, &c, &manifest, Some(&OracleSegmenterFactory)).map_err(err)?;
        roots.push(c.run.output_dir);
    }
    let (fa, fb) = (files_under(&roots[0]), files_under(&roots[1]));
    ensure(!fa.is_empty() && fa == fb, || format!("mask sets differ: {fa:?} vs {fb:?}"))?;
    for f in &fa {
        let (a, b) = (std::fs::read(roots[0].join(f)).map_err(err)?, std::fs::read(roots[1].join(f)).map_err(err)?);
        ensure(a == b, || format!("{} differs", f.display()))?;
    }
    Ok(format!("{} mask files byte-identical across two seeded runs", fa.len()))
}

#[derive(serde::Deserialize)]
struct SummaryFile {
    summary: Summary,
}

#[derive(serde::Deserialize)]
struct Summary {
    #[serde(rename = "J&F_m")]
    jf_m: f64,
    #[serde(rename = "J_m")]
    j_m: f64,
    #[serde(rename = "F_m")]
    f_m: f64,
}

#[derive(serde::Deserialize)]
struct Row {
    settings: BTreeMap<String, String>,
    #[serde(rename = "J&F_m")]
    jf_m: Option<f64>,
}

#[derive(serde::Deserialize)]
struct Table {
    rows: Vec<Row>,
}

enum Gated {
    Skip(String),
    Done(Outcome),
}

fn results_file(name: &str) -> Result<PathBuf, String> {
    let root = std::env::var_os("ATTNPROP_RESULTS_DIR").ok_or("ATTNPROP_RESULTS_DIR not set")?;
    let p = PathBuf::from(root).join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("{} not found", p.display()))
    }
}

fn gated<T: serde::de::DeserializeOwned>(name: &str, check: impl FnOnce(T) -> Outcome) -> Gated {
    let path = match results_file(name) {
        Ok(p) => p,
        Err(why) => return Gated::Skip(why),
    };
    let parsed = std::fs::read(&path)
        .map_err(err)
        .and_then(|b| serde_json::from_slice::<T>(&b).map_err(err));
    Gated::Done(parsed.and_then(check))
}

fn within(name: &str, got: f64, want: f64) -> Result<String, String> {
    let pct = 100.0 * got;
    ensure((pct - want).abs() <= DAVIS_TOL, || format!("{name} = {pct:.1}, expected {want} +- {DAVIS_TOL}"))?;
    Ok(format!("{name} = {pct:.1}"))
}

fn summary_check(targets: &'static [(&'static str, f64)]) -> impl FnOnce(SummaryFile) -> Outcome {
    move |f| {
        let mut parts = Vec::new();
        let mut failures = Vec::new();
        for (name, want) in targets {
            let got = match *name {
                "J&F_m" => f.summary.jf_m,
                "J_m" => f.summary.j_m,
                _ => f.summary.f_m,
            };
            match within(name, got, *want) {
                Ok(s) => parts.push(s),
                Err(e) => failures.push(e),
            }
        }
        if failures.is_empty() {
            Ok(parts.join(", "))
        } else {
            Err(failures.join("; "))
        }
    }
}

fn curve(table: &Table, noise: &str) -> BTreeMap<usize, f64> {
    table
        .rows
        .iter()
        .filter(|r| r.settings.get("noise").map(String::as_str) == Some(noise))
        .filter_map(|r| Some((r.settings.get("tau")?.parse().ok()?, r.jf_m?)))
        .collect()
}

fn timestep_shape(table: Table) -> Outcome {
    let (inv, rnd) = (curve(&table, "inversion"), curve(&table, "random"));
    let taus: Vec<usize> = (1..=10).map(|i| 1 + 20 * i).collect();
    for t in &taus {
        let (Some(a), Some(b)) = (inv.get(t), rnd.get(t)) else {
            return Err(format!("tau {t} missing from the sweep"));
        };
        ensure(a >= b, || format!("tau {t}: inversion {a:.3} < random {b:.3}"))?;
    }
    let drop = |c: &BTreeMap<usize, f64>| {
        let peak = taus.iter().map(|t| c[t]).fold(f64::NEG_INFINITY, f64::max);
        peak - c[&201]
    };
    let (di, dr) = (drop(&inv), drop(&rnd));
    ensure(di < dr, || format!("inversion drop {di:.3} >= random drop {dr:.3}"))?;
    Ok(format!("inversion >= random at every tau; drops {di:.3} vs {dr:.3}"))
}

fn points_trend(table: Table) -> Outcome {
    let at = |n: &str| {
        table
            .rows
            .iter()
            .find(|r| r.settings.get("n").map(String::as_str) == Some(n) && r.settings.get("p").map(String::as_str) == Some("40"))
            .and_then(|r| r.jf_m)
            .ok_or_else(|| format!("(n={n}, p=40) missing"))
    };
    let (one, two, five) = (at("1")?, at("2")?, at("5")?);
    ensure(100.0 * (two - one) >= 10.0, || format!("n=2 beats n=1 by {:.1}", 100.0 * (two - one)))?;
    ensure(100.0 * (two - five) >= 1.0, || format!("n=2 beats n=5 by {:.1}", 100.0 * (two - five)))?;
    Ok(format!("n=1 {:.1}, n=2 {:.1}, n=5 {:.1}", 100.0 * one, 100.0 * two, 100.0 * five))
}

fn main() {
    let start = Instant::now();
    let desk: Vec<(&str, fn() -> Outcome)> = vec![
        ("kernel stochasticity", kernel_stochasticity),
        ("identity propagation", identity_propagation),
        ("soft IoU oracle", soft_iou_oracle),
        ("metric oracle", metric_oracle),
        ("gradient check", gradient_check_criterion),
        ("optimization sanity", optimization_sanity),
        ("argmax invariance", argmax_invariance),
        ("reference bank law", bank_law),
        ("toy tracking", toy_tracking),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in desk.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    let hardware: Vec<(&str, Gated)> = vec![
        (
            "DAVIS 2017 val, no refinement",
            gated("davis_default/summary.json", summary_check(&[("J&F_m", 74.8), ("J_m", 70.7), ("F_m", 78.9)])),
        ),
        (
            "DAVIS 2017 val, segmenter refinement",
            gated("davis_refined/summary.json", summary_check(&[("J&F_m", 81.3)])),
        ),
        (
            "null prompt, uniform heads, no refinement",
            gated("davis_null_uniform/summary.json", summary_check(&[("J&F_m", 71.8)])),
        ),
        ("timestep curve shape", gated("timestep/table.json", timestep_shape)),
        ("points sweep trend", gated("points/table.json", points_trend)),
    ];
    for (i, (name, g)) in hardware.into_iter().enumerate() {
        match g {
            Gated::Skip(why) => println!("SKIP {:>2} {name}: {why}", i + 11),
            Gated::Done(Ok(detail)) => println!("PASS {:>2} {name}: {detail}", i + 11),
            Gated::Done(Err(why)) => println!("FAIL {:>2} {name}: {why} (hardware-gated, reported only)", i + 11),
        }
    }
    println!("desk-scale suite: {} failed, {:.1}s total", failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
