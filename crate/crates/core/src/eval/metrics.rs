use crate::error::{Error, Result};
use crate::mask::HardMask;

/// Boundary tolerance as a fraction of the image diagonal.
pub const DEFAULT_BOUNDARY_TOLERANCE: f64 = 0.008;

fn check_pair(pred: &HardMask, gt: &HardMask) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// Intersection over union of label `object`; 1 when both are empty.
pub fn jaccard(pred: &HardMask, gt: &HardMask, object: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p == object, g == object);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// One-pixel boundary map of a binary mask: a pixel is on the boundary when
/// it differs from its east, south or south-east neighbour.
pub fn boundary_map(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |r: usize, c: usize| mask[r * width + c];
    let mut out = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            let v = at(r, c);
            let (last_r, last_c) = (r + 1 == height, c + 1 == width);
            out[r * width + c] = match (last_r, last_c) {
                (true, true) => false,
                (true, false) => v != at(r, c + 1),
                (false, true) => v != at(r + 1, c),
                (false, false) => {
                    v != at(r, c + 1) || v != at(r + 1, c) || v != at(r + 1, c + 1)
                }
            };
        }
    }
    out
}

/// Dilation by a disk of `radius` pixels.
fn dilate(map: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; map.len()];
    for (i, _) in map.iter().enumerate().filter(|(_, &b)| b) {
        let (y, x) = ((i / width) as isize, (i % width) as isize);
        for &(dy, dx) in &offsets {
            let (yy, xx) = (y + dy, x + dx);
            if yy >= 0 && xx >= 0 && yy < height as isize && xx < width as isize {
                out[yy as usize * width + xx as usize] = true;
            }
        }
    }
    out
}

/// Matching radius in pixels: tolerances below 1 are fractions of the
/// diagonal, rounded up.
pub fn tolerance_pixels(tolerance: f64, height: usize, width: usize) -> usize {
    if tolerance >= 1.0 {
        tolerance as usize
    } else {
        (tolerance * ((height * height + width * width) as f64).sqrt()).ceil() as usize
    }
}

/// Boundary precision/recall harmonic mean of label `object`.
pub fn boundary_f(pred: &HardMask, gt: &HardMask, object: u8, tolerance: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (gt.height, gt.width);
    let radius = tolerance_pixels(tolerance, h, w);
    let pb = boundary_map(&pred.binary(object), h, w);
    let gb = boundary_map(&gt.binary(object), h, w);
    let (np, ng) = (
        pb.iter().filter(|&&b| b).count(),
        gb.iter().filter(|&&b| b).count(),
    );
    let (precision, recall) = match (np, ng) {
        (0, 0) => (1.0, 1.0),
        (0, _) => (1.0, 0.0),
        (_, 0) => (0.0, 1.0),
        _ => {
            let pd = dilate(&pb, h, w, radius);
            let gd = dilate(&gb, h, w, radius);
            let pm = pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
            let gm = gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
            (pm as f64 / np as f64, gm as f64 / ng as f64)
        }
    };
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}
