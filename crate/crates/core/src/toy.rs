//! Small synthetic videos of moving squares in the DAVIS directory layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_frame, write_label_png};
use crate::mask::{Frame, HardMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySquare {
    pub size: usize,
    /// Top-left corner in frame 0.
    pub start: (usize, usize),
    /// Displacement per frame, in pixels.
    pub step: (isize, isize),
    pub color: [f32; 3],
    /// First frame the square is drawn in.
    #[serde(default)]
    pub appears: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyVideo {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: [f32; 3],
    pub squares: Vec<ToySquare>,
}

impl ToyVideo {
    /// One square translating right by a whole latent cell per frame on the
    /// default synthetic lattice (4 pixels per cell).
    pub fn translating_square(frames: usize) -> Self {
        Self {
            name: "square".into(),
            height: 64,
            width: 64,
            frames,
            background: [0.2, 0.2, 0.8],
            squares: vec![ToySquare {
                size: 32,
                start: (16, 8),
                step: (0, 4),
                color: [0.9, 0.3, 0.1],
                appears: 0,
            }],
        }
    }

    /// A 32x32 video whose pixels coincide with the cells of a 32x32
    /// lattice, so resampling between image and lattice is exact.
    pub fn lattice_aligned(frames: usize) -> Self {
        Self {
            name: "aligned".into(),
            height: 32,
            width: 32,
            frames,
            background: [0.2, 0.2, 0.8],
            squares: vec![ToySquare {
                size: 12,
                start: (10, 4),
                step: (0, 2),
                color: [0.9, 0.3, 0.1],
                appears: 0,
            }],
        }
    }

    fn corner(&self, square: &ToySquare, t: usize) -> Result<(usize, usize)> {
        let r = square.start.0 as isize + square.step.0 * t as isize;
        let c = square.start.1 as isize + square.step.1 * t as isize;
        if r < 0
            || c < 0
            || r as usize + square.size > self.height
            || c as usize + square.size > self.width
        {
            return Err(Error::InvalidArgument(format!(
                "square leaves the {}x{} frame at frame {t}",
                self.height, self.width
            )));
        }
        Ok((r as usize, c as usize))
    }

    /// Frame `t` and its label map; later squares are drawn on top.
    pub fn render(&self, t: usize) -> Result<(Frame, HardMask)> {
        if self.squares.len() > 255 {
            return Err(Error::InvalidArgument("too many squares".into()));
        }
        let mut frame = Frame::filled(self.width, self.height, self.background);
        let mut labels = vec![0u8; self.width * self.height];
        for (i, s) in self.squares.iter().enumerate().filter(|(_, s)| s.appears <= t) {
            let (r0, c0) = self.corner(s, t)?;
            for r in r0..r0 + s.size {
                for c in c0..c0 + s.size {
                    frame.set_pixel(r, c, s.color);
                    labels[r * self.width + c] = i as u8 + 1;
                }
            }
        }
        let mask = HardMask::new(self.width, self.height, labels, self.squares.len() as u8)?;
        Ok((frame, mask))
    }

    /// Writes `JPEGImages/<name>/NNNNN.png` and `Annotations/<name>/NNNNN.png`
    /// for every frame under `root`. Frames are PNG so colours stay exact.
    pub fn write(&self, root: &Path) -> Result<()> {
        let frames = root.join("JPEGImages").join(&self.name);
        std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
        for t in 0..self.frames {
            let (frame, mask) = self.render(t)?;
            write_frame(&frames.join(format!("{t:05}.png")), &frame)?;
            write_label_png(
                &root.join("Annotations").join(&self.name).join(format!("{t:05}.png")),
                &mask,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{load_manifest, Layout};

    #[test]
    fn square_moves_by_its_step() {
        let v = ToyVideo::translating_square(3);
        let (_, m0) = v.render(0).unwrap();
        let (f2, m2) = v.render(2).unwrap();
        assert_eq!(m0.area(1), 32 * 32);
        assert_eq!(m0.get(16, 8), 1);
        assert_eq!(m2.get(16, 8), 0);
        assert_eq!(m2.get(16, 16), 1);
        assert_eq!(f2.pixel(16, 16), [0.9, 0.3, 0.1]);
        assert!(v.render(10).is_err());
    }

    #[test]
    fn written_fixture_loads_as_davis() {
        let dir = tempfile::tempdir().unwrap();
        ToyVideo::translating_square(3).write(dir.path()).unwrap();
        let m = load_manifest(dir.path(), Layout::Davis, &Default::default()).unwrap();
        assert_eq!(m.sequences.len(), 1);
        assert_eq!(m.sequences[0].frames.len(), 3);
        assert_eq!(m.sequences[0].object_count(), 1);
    }
}
