//! 8-bit RGB preview of three bands of an `[H, W, S]` image.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ssmfuse::Tensor;

/// Bands `(0, S/2, S-1)` as red, green, blue.
pub fn default_bands(s: usize) -> [usize; 3] {
    [0, s / 2, s.saturating_sub(1)]
}

/// Min-max normalizes each selected band independently to `0..=255`.
pub fn rgb_bytes(img: &Tensor<f32>, bands: [usize; 3]) -> Vec<u8> {
    let s = img.last_dim();
    let px = img.numel() / s;
    let data = img.data();
    let ranges: Vec<(f32, f32)> = bands
        .iter()
        .map(|&b| {
            (0..px).map(|p| data[p * s + b]).fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect();
    let mut out = Vec::with_capacity(px * 3);
    for p in 0..px {
        for (&b, &(lo, hi)) in bands.iter().zip(&ranges) {
            let span = hi - lo;
            let v = if span > 0.0 { (data[p * s + b] - lo) / span } else { 0.0 };
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn write_png(path: &Path, img: &Tensor<f32>) -> std::io::Result<()> {
    let shape = img.shape();
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    let bytes = rgb_bytes(img, default_bands(shape[2]));
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(std::io::Error::other)?;
    writer.write_image_data(&bytes).map_err(std::io::Error::other)?;
    writer.finish().map_err(std::io::Error::other)
}
