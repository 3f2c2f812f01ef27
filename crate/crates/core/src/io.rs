//! Image and label-map files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{Frame, HardMask};

/// The 256-entry palette used by DAVIS annotations (PASCAL VOC colour map).
pub fn davis_palette() -> Vec<u8> {
    let mut out = Vec::with_capacity(256 * 3);
    for i in 0..=255u8 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) != 0) as u8 * (1 << (7 - j));
            g |= ((c >> 1 & 1) != 0) as u8 * (1 << (7 - j));
            b |= ((c >> 2 & 1) != 0) as u8 * (1 << (7 - j));
            c >>= 3;
        }
        out.extend_from_slice(&[r, g, b]);
    }
    out
}

/// Reads a frame as RGB in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.to_rgb8();
    Ok(Frame::from_rgb8(&img))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    frame.to_rgb8().save(path)?;
    Ok(())
}

fn unpack(row: &[u8], bits: u8, width: usize) -> Vec<u8> {
    if bits == 8 {
        return row[..width].to_vec();
    }
    let per = 8 / bits as usize;
    let mask = (1u16 << bits) as u8 - 1;
    (0..width)
        .map(|x| {
            let byte = row[x / per];
            let shift = 8 - bits as usize * (x % per + 1);
            (byte >> shift) & mask
        })
        .collect()
}

/// Reads a label map stored as an indexed (palette) or grayscale PNG.
///
/// Palette indices are labels as stored. Grayscale maps whose values are all
/// 0 or 255 are binary annotations and map 255 to label 1.
pub fn read_label_png(path: &Path) -> Result<HardMask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::PaletteMismatch { path: path.into() })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = match info.bit_depth {
        png::BitDepth::One => 1,
        png::BitDepth::Two => 2,
        png::BitDepth::Four => 4,
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => return Err(Error::PaletteMismatch { path: path.into() }),
    };
    let grayscale = match info.color_type {
        png::ColorType::Indexed => false,
        png::ColorType::Grayscale => true,
        _ => return Err(Error::PaletteMismatch { path: path.into() }),
    };
    let mut labels = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        labels.extend(unpack(row, bits, w));
    }
    if grayscale && bits == 8 && labels.iter().all(|&v| v == 0 || v == 255) {
        labels.iter_mut().for_each(|v| *v = (*v == 255) as u8);
    }
    HardMask::from_labels(w, h, labels)
}

/// Writes a label map as an 8-bit indexed PNG with the DAVIS palette.
pub fn write_label_png(path: &Path, mask: &HardMask) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(davis_palette());
    let mut writer = enc.write_header()?;
    writer.write_image_data(&mask.labels)?;
    writer.finish()?;
    Ok(())
}
