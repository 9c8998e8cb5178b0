//! 8-bit grayscale PNG in and out. Images are `[height, width]` tensors in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::{read_file, write_atomic};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn image_err(path: &Path, detail: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Decodes PNG bytes; `origin` only labels errors.
pub fn decode_png(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(origin, e))?;
    let (color, depth) = reader.output_color_type();
    if depth != BitDepth::Eight {
        return Err(image_err(origin, format!("unsupported bit depth {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(origin, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(origin, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = color.samples();
    let mut data = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..w * channels].chunks_exact(channels) {
            let v = match color {
                ColorType::Grayscale | ColorType::GrayscaleAlpha => px[0] as f32,
                ColorType::Rgb | ColorType::Rgba => {
                    LUMA[0] * px[0] as f32 + LUMA[1] * px[1] as f32 + LUMA[2] * px[2] as f32
                }
                ColorType::Indexed => return Err(image_err(origin, "palette was not expanded")),
            };
            data.push(v / 255.0);
        }
    }
    Tensor::new([h, w], data)
}

/// Encodes a `[height, width]` tensor, clamping to `[0, 1]` and rounding
/// half-to-even to 8 bits.
pub fn encode_png<S: Real>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let &[h, w] = image.shape() else {
        return Err(Error::invalid(format!("expected a [height, width] image, got {:?}", image.shape())));
    };
    let pixels: Vec<u8> = image.data().iter().map(|v| quantize(v.as_f64())).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(ColorType::Grayscale);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::invalid(e.to_string()))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::invalid(e.to_string()))?;
        writer.finish().map_err(|e| Error::invalid(e.to_string()))?;
    }
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    decode_png(&read_file(path)?, path)
}

pub fn save_png<S: Real>(path: &Path, image: &Tensor<S>) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

/// All `*.png` files of a directory in name order.
pub fn load_png_dir(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, load_png(&p)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode_raw(w: u32, h: u32, color: ColorType, depth: BitDepth, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(data).unwrap();
        writer.finish().unwrap();
        out
    }

    #[test]
    fn black_is_zero_and_mid_gray_is_128_over_255() {
        let bytes = encode_raw(2, 1, ColorType::Grayscale, BitDepth::Eight, &[0, 128]);
        let t = decode_png(&bytes, Path::new("mem")).unwrap();
        assert_eq!(t.shape(), &[1, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[1] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn rgb_uses_luma_weights() {
        let bytes = encode_raw(1, 1, ColorType::Rgb, BitDepth::Eight, &[255, 0, 0]);
        let t = decode_png(&bytes, Path::new("mem")).unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let bytes = encode_raw(1, 1, ColorType::Grayscale, BitDepth::Sixteen, &[1, 2]);
        let err = decode_png(&bytes, Path::new("deep.png")).unwrap_err();
        assert!(err.to_string().contains("bit depth"));
    }

    #[test]
    fn quantize_rounds_half_to_even() {
        assert_eq!(quantize(0.5 / 255.0), 0);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(7.0), 255);
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(pixels in proptest::collection::vec(any::<u8>(), 12)) {
            let bytes = encode_raw(4, 3, ColorType::Grayscale, BitDepth::Eight, &pixels);
            let t = decode_png(&bytes, Path::new("mem")).unwrap();
            let again = decode_png(&encode_png(&t).unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(t.data(), again.data());
            let back: Vec<u8> = t.data().iter().map(|v| quantize(*v as f64)).collect();
            prop_assert_eq!(back, pixels);
        }
    }
}
