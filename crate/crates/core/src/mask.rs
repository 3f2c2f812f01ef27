//! Frames, label masks and the latent lattice they are pooled onto.

use crate::error::{Error, Result};

/// An RGB frame with interleaved channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "frame data has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer matches dimensions")
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> Frame {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let ys = axis_taps(self.height, height);
        let xs = axis_taps(self.width, width);
        let mut data = vec![0.0; width * height * 3];
        for (r, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (c, &(x0, x1, fx)) in xs.iter().enumerate() {
                let a = self.pixel(y0, x0);
                let b = self.pixel(y0, x1);
                let cc = self.pixel(y1, x0);
                let d = self.pixel(y1, x1);
                let o = (r * width + c) * 3;
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                    let bottom = cc[ch] * (1.0 - fx) + d[ch] * fx;
                    data[o + ch] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Frame {
            width,
            height,
            data,
        }
    }
}

/// An ordered list of equally sized frames.
#[derive(Clone, Debug)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Vec<Frame>,
}

impl VideoSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("video has no frames".into()))?;
        let (w, h) = (first.width, first.height);
        if let Some((i, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.width != w || f.height != h)
        {
            return Err(Error::Shape(format!(
                "frame {i} is {}x{}, frame 0 is {}x{}",
                f.height, f.width, h, w
            )));
        }
        Ok(Self {
            id: id.into(),
            frames,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }
}

/// Integer label grid; 0 is background, `1..=object_count` are objects.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HardMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
    pub object_count: u8,
}

impl HardMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>, object_count: u8) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "mask has {} labels, expected {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > object_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} exceeds object count {object_count}"
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
            object_count,
        })
    }

    /// Builds a mask and sets the object count to the largest label present.
    pub fn from_labels(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        let object_count = labels.iter().copied().max().unwrap_or(0);
        Self::new(width, height, labels, object_count)
    }

    pub fn background(width: usize, height: usize, object_count: u8) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
            object_count,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Binary indicator of one label.
    pub fn binary(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn area(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn contains(&self, label: u8) -> bool {
        self.labels.contains(&label)
    }
}

/// Per-channel nonnegative score grids, channel 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMaskStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major: `data[c * height * width + row * width + col]`.
    pub data: Vec<f32>,
}

impl SoftMaskStack {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_channels(height: usize, width: usize, channels: Vec<Vec<f32>>) -> Result<Self> {
        let plane = height * width;
        if let Some(bad) = channels.iter().find(|c| c.len() != plane) {
            return Err(Error::Shape(format!(
                "channel has {} values, expected {plane}",
                bad.len()
            )));
        }
        Ok(Self {
            channels: channels.len(),
            height,
            width,
            data: channels.concat(),
        })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// Sum over channels at each location.
    pub fn channel_sums(&self) -> Vec<f32> {
        let p = self.plane();
        (0..p)
            .map(|i| (0..self.channels).map(|c| self.data[c * p + i]).sum())
            .collect()
    }
}

/// The latent lattice that attention operates on, and its relation to the
/// image grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct LatticeGeometry {
    pub image_height: usize,
    pub image_width: usize,
    pub latent_height: usize,
    pub latent_width: usize,
}

impl LatticeGeometry {
    pub fn new(
        image_height: usize,
        image_width: usize,
        latent_height: usize,
        latent_width: usize,
    ) -> Result<Self> {
        if image_height == 0 || image_width == 0 || latent_height == 0 || latent_width == 0 {
            return Err(Error::InvalidArgument(
                "lattice dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            image_height,
            image_width,
            latent_height,
            latent_width,
        })
    }

    #[inline]
    pub fn location_count(&self) -> usize {
        self.latent_height * self.latent_width
    }

    pub fn scale_y(&self) -> f64 {
        self.image_height as f64 / self.latent_height as f64
    }

    pub fn scale_x(&self) -> f64 {
        self.image_width as f64 / self.latent_width as f64
    }

    #[inline]
    pub fn coords(&self, location: usize) -> (usize, usize) {
        (location / self.latent_width, location % self.latent_width)
    }

    /// Lattice geometry for another image size with the same latent grid.
    pub fn with_image(&self, image_height: usize, image_width: usize) -> Result<Self> {
        Self::new(
            image_height,
            image_width,
            self.latent_height,
            self.latent_width,
        )
    }

    fn check_image(&self, height: usize, width: usize) -> Result<()> {
        if height != self.image_height || width != self.image_width {
            return Err(Error::Shape(format!(
                "image is {height}x{width}, geometry expects {}x{}",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }
}

/// Overlap weights of each coarse cell with each fine pixel along one axis,
/// as fractions of the cell length: `(cell, pixel, weight)`.
fn area_weights(fine: usize, coarse: usize) -> Vec<(usize, usize, f64)> {
    let cell = fine as f64 / coarse as f64;
    let mut out = Vec::new();
    for c in 0..coarse {
        let lo = c as f64 * cell;
        let hi = lo + cell;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(fine);
        for p in first..last {
            let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
            if overlap > 0.0 {
                out.push((c, p, overlap / cell));
            }
        }
    }
    out
}

/// Pools a label mask onto the latent lattice; channel `o` holds the fraction
/// of each cell covered by label `o`.
pub fn downsample_mask(mask: &HardMask, geometry: &LatticeGeometry) -> Result<SoftMaskStack> {
    geometry.check_image(mask.height, mask.width)?;
    let channels = mask.object_count as usize + 1;
    let (lh, lw) = (geometry.latent_height, geometry.latent_width);
    let wx = area_weights(mask.width, lw);
    let wy = area_weights(mask.height, lh);

    // Pool columns first: rows stay at image resolution.
    let mut by_row = vec![0.0f64; channels * mask.height * lw];
    for r in 0..mask.height {
        for &(c, p, w) in &wx {
            let label = mask.get(r, p) as usize;
            by_row[(label * mask.height + r) * lw + c] += w;
        }
    }
    let mut pooled = vec![0.0f64; channels * lh * lw];
    for ch in 0..channels {
        for &(cr, p, w) in &wy {
            for c in 0..lw {
                pooled[(ch * lh + cr) * lw + c] += w * by_row[(ch * mask.height + p) * lw + c];
            }
        }
    }
    Ok(SoftMaskStack {
        channels,
        height: lh,
        width: lw,
        data: pooled.into_iter().map(|v| v as f32).collect(),
    })
}

/// Pixel-wise argmax over channels. Exact ties go to the lower channel index.
pub fn argmax_fuse(stack: &SoftMaskStack) -> Result<HardMask> {
    if stack.channels == 0 {
        return Err(Error::EmptyStack);
    }
    if stack.channels > 256 {
        return Err(Error::InvalidArgument(format!(
            "{} channels do not fit 8-bit labels",
            stack.channels
        )));
    }
    let p = stack.plane();
    let labels = (0..p)
        .map(|i| {
            let mut best = 0usize;
            let mut best_v = stack.data[i];
            for c in 1..stack.channels {
                let v = stack.data[c * p + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    Ok(HardMask {
        width: stack.width,
        height: stack.height,
        labels,
        object_count: (stack.channels - 1) as u8,
    })
}

/// Scales a nonnegative grid so it sums to one.
pub fn normalize_to_distribution(channel: &[f32]) -> Result<Vec<f32>> {
    let total: f64 = channel.iter().map(|&v| v.max(0.0) as f64).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::EmptyChannel);
    }
    Ok(channel
        .iter()
        .map(|&v| (v.max(0.0) as f64 / total) as f32)
        .collect())
}

/// For each output index along an axis: the two source taps and the weight
/// of the second one (half-pixel centers, clamped at the borders).
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, (x - x0 as f64) as f32)
        })
        .collect()
}

/// Bilinear upsampling of one grid.
pub fn upsample_channel(
    values: &[f32],
    height: usize,
    width: usize,
    target_height: usize,
    target_width: usize,
) -> Vec<f32> {
    let ys = axis_taps(height, target_height);
    let xs = axis_taps(width, target_width);
    let mut out = Vec::with_capacity(target_height * target_width);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = values[y0 * width + x0] * (1.0 - fx) + values[y0 * width + x1] * fx;
            let bottom = values[y1 * width + x0] * (1.0 - fx) + values[y1 * width + x1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy).max(0.0));
        }
    }
    out
}

/// Bilinear upsampling of every channel to `(height, width)`.
pub fn upsample_stack(stack: &SoftMaskStack, height: usize, width: usize) -> Result<SoftMaskStack> {
    if height == 0 || width == 0 || stack.height == 0 || stack.width == 0 {
        return Err(Error::Shape("cannot resample an empty grid".into()));
    }
    let channels = (0..stack.channels)
        .map(|c| upsample_channel(stack.channel(c), stack.height, stack.width, height, width))
        .collect();
    SoftMaskStack::from_channels(height, width, channels)
}
