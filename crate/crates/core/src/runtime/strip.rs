use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::RuntimeError;
use crate::blockworld::IMG_SIZE;
use crate::datastore::quantize;

/// Side-by-side strip `condition | predicted... | realized...`, each frame
/// upscaled by `scale` with a one-pixel dark gap. Returns `(width, height,
/// rgb bytes)`.
pub fn plan_strip(cond: &[f32], predicted: &[Vec<f32>], realized: &[Vec<f32>], scale: usize) -> (usize, usize, Vec<u8>) {
    let frames: Vec<&[f32]> = std::iter::once(cond)
        .chain(predicted.iter().map(Vec::as_slice))
        .chain(realized.iter().map(Vec::as_slice))
        .collect();
    let side = IMG_SIZE * scale;
    let width = frames.len() * (side + 1) - 1;
    let height = side;
    let mut out = vec![16u8; width * height * 3];
    for (f, frame) in frames.iter().enumerate() {
        let x0 = f * (side + 1);
        for y in 0..side {
            for x in 0..side {
                let src = ((y / scale) * IMG_SIZE + x / scale) * 3;
                let dst = (y * width + x0 + x) * 3;
                for c in 0..3 {
                    out[dst + c] = quantize(frame[src + c]);
                }
            }
        }
    }
    (width, height, out)
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), RuntimeError> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| RuntimeError::Io(std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(rgb).map_err(io)?;
    writer.finish().map_err(io)?;
    Ok(())
}
