//! Grayscale or RGB tiling of dream sets into one PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use slowfast_core::dreaming::DreamSet;
use slowfast_core::{Error, Result};

const GAP: usize = 1;

/// `(channels, height, width)` of one tile. Vectors become near-square gray tiles.
fn tile_shape(input_shape: &[usize]) -> (usize, usize, usize) {
    match *input_shape {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => {
            let n: usize = input_shape.iter().product();
            let w = (n as f64).sqrt().ceil() as usize;
            (1, n.div_ceil(w), w)
        }
    }
}

/// One row per `(task, class)`, samples left to right, each set scaled to its own min/max.
pub fn write_png(path: &Path, sets: &[&DreamSet], input_shape: &[usize]) -> Result<()> {
    let (c, h, w) = tile_shape(input_shape);
    let per = h * w;
    let mut rows: Vec<(&DreamSet, Vec<usize>)> = Vec::new();
    for d in sets {
        let mut classes: Vec<usize> = d.query_labels.clone();
        classes.dedup();
        for q in classes {
            let idx = (0..d.len()).filter(|&i| d.query_labels[i] == q).collect();
            rows.push((d, idx));
        }
    }
    let cols = rows.iter().map(|(_, i)| i.len()).max().unwrap_or(0);
    if cols == 0 {
        return Err(Error::Data("no dream samples to draw".into()));
    }
    let width = cols * (w + GAP) + GAP;
    let height = rows.len() * (h + GAP) + GAP;
    let color = if c == 3 { 3 } else { 1 };
    let mut buf = vec![0u8; width * height * color];
    for (r, (d, idx)) in rows.iter().enumerate() {
        let data = d.inputs.data();
        let sample = data.len() / d.len();
        let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        for (k, &i) in idx.iter().enumerate() {
            let x0 = GAP + k * (w + GAP);
            let y0 = GAP + r * (h + GAP);
            let s = &data[i * sample..(i + 1) * sample];
            for p in 0..per {
                let (y, x) = (p / w, p % w);
                for ch in 0..color {
                    let v = s.get(ch * per + p).copied().unwrap_or(lo);
                    buf[((y0 + y) * width + x0 + x) * color + ch] = ((v - lo) * scale).round() as u8;
                }
            }
        }
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(if color == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Data(e.to_string()))?;
    writer.write_image_data(&buf).map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles() {
        assert_eq!(tile_shape(&[3, 8, 8]), (3, 8, 8));
        assert_eq!(tile_shape(&[16]), (1, 4, 4));
        assert_eq!(tile_shape(&[10]), (1, 3, 4));
    }
}
