//! Linear-light RGB images and PNG I/O.
//!
//! Pixels are stored row-major as `[r, g, b]` grids of f64 in [0, 1],
//! linear light. PNG files are 8-bit sRGB: values are sRGB-encoded on
//! write and linearized on read.

use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major, 3 channels: data[(y * width + x) * 3 + c].
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer size mismatch");
        Image {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, px: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = px[0];
        self.data[i + 1] = px[1];
        self.data[i + 2] = px[2];
    }

    pub fn is_finite_unit(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Image {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::from_data(self.height, self.width, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(self.data.len());
        for v in &self.data {
            bytes.push(linear_to_srgb_u8(*v));
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png {
            path: path.into(),
            msg: e.to_string(),
        })?;
        writer.write_image_data(&bytes).map_err(|e| Error::Png {
            path: path.into(),
            msg: e.to_string(),
        })?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Png {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png {
            path: path.into(),
            msg: e.to_string(),
        })?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png {
                path: path.into(),
                msg: format!("expected 8-bit png, got {:?}", info.bit_depth),
            });
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let stride = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => {
                return Err(Error::Png {
                    path: path.into(),
                    msg: format!("unsupported color type {other:?}"),
                })
            }
        };
        let mut img = Image::new(h, w);
        for i in 0..h * w {
            for c in 0..3 {
                img.data[i * 3 + c] = srgb_u8_to_linear(buf[i * stride + c]);
            }
        }
        Ok(img)
    }
}

/// Tiles images into a grid with `cols` columns (row-major order).
/// All tiles must share one resolution.
pub fn tile_grid(images: &[&Image], cols: usize) -> Image {
    assert!(!images.is_empty() && cols > 0);
    let (th, tw) = (images[0].height, images[0].width);
    assert!(images.iter().all(|i| i.height == th && i.width == tw));
    let rows = images.len().div_ceil(cols);
    let mut out = Image::new(rows * th, cols * tw);
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for y in 0..th {
            for x in 0..tw {
                out.set(r * th + y, c * tw + x, img.get(y, x));
            }
        }
    }
    out
}

/// sRGB transfer function (linear -> encoded), both in [0, 1].
pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Inverse sRGB transfer function (encoded -> linear).
pub fn srgb_to_linear(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb_u8(v: f64) -> u8 {
    (linear_to_srgb(v) * 255.0).round().clamp(0.0, 255.0) as u8
}

fn srgb_u8_to_linear(b: u8) -> f64 {
    srgb_to_linear(b as f64 / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_transfer_roundtrip() {
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            let back = srgb_to_linear(linear_to_srgb(v));
            assert!((back - v).abs() < 1e-12);
        }
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let mut img = Image::new(8, 6);
        for y in 0..8 {
            for x in 0..6 {
                img.set(y, x, [x as f64 / 5.0, y as f64 / 7.0, 0.25]);
            }
        }
        let dir = std::env::temp_dir().join("musasplat_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.height, 8);
        assert_eq!(back.width, 6);
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            // 8-bit sRGB quantization: worst case linear step near 1.0
            assert!((a - b).abs() < 0.9 / 255.0 * 2.5, "a={a} b={b}");
        }
    }
}
