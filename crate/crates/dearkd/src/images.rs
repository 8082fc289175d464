//! 8-bit RGB PNG export and import.
//!
//! Optimized pixels live in standardized space and are unbounded; they are
//! mapped back to `[0, 1]` and clamped only when written.

use std::path::Path;

use crate::error::{Error, IoContext, Result};

/// Writes a `[3, side, side]` image given as `[0, 1]` values (clamped).
pub fn write_png(path: &Path, planes: &[f32], side: usize) -> Result<()> {
    if planes.len() != 3 * side * side {
        return Err(Error::Image { path: path.to_path_buf(), detail: format!("{} values for a 3x{side}x{side} image", planes.len()) });
    }
    let plane = side * side;
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            rgb.push(to_u8(planes[c * plane + p]));
        }
    }
    let file = std::fs::File::create(path).at(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), side as u32, side as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let image_err = |e: png::EncodingError| Error::Image { path: path.to_path_buf(), detail: e.to_string() };
    let mut w = enc.write_header().map_err(image_err)?;
    w.write_image_data(&rgb).map_err(image_err)?;
    w.finish().map_err(image_err)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a square 8-bit RGB PNG as `[3, side, side]` values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<(Vec<f32>, usize)> {
    let file = std::fs::File::open(path).at(path)?;
    let image_err = |e: png::DecodingError| Error::Image { path: path.to_path_buf(), detail: e.to_string() };
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(image_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(image_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight || info.width != info.height {
        return Err(Error::Image {
            path: path.to_path_buf(),
            detail: format!("expected square 8-bit RGB, got {}x{} {:?} {:?}", info.width, info.height, info.color_type, info.bit_depth),
        });
    }
    let side = info.width as usize;
    let plane = side * side;
    let mut planes = vec![0.0; 3 * plane];
    for (p, px) in buf[..info.buffer_size()].chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Ok((planes, side))
}

/// Undoes per-channel standardization of one `[3, side, side]` image.
pub fn unstandardize(image: &[f32], mean: &[f64; 3], std: &[f64; 3]) -> Vec<f32> {
    let plane = image.len() / 3;
    image.iter().enumerate().map(|(k, &v)| (v as f64 * std[k / plane] + mean[k / plane]) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_and_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let side = 4;
        let img: Vec<f32> = (0..48).map(|i| i as f32 / 47.0 * 1.4 - 0.2).collect();
        write_png(&path, &img, side).unwrap();
        let (back, s) = read_png(&path).unwrap();
        assert_eq!(s, side);
        for (a, b) in img.iter().zip(&back) {
            assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }
}
