//! Per-pixel 3D pointmaps expressed in a reference camera frame.

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Pointmap {
    /// Index of the view whose camera frame the points live in.
    pub reference_view: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major xyz per pixel: points[(y * width + x) * 3 + k].
    pub points: Vec<f64>,
    /// Per-pixel confidence, >= 0.
    pub confidence: Vec<f64>,
}

impl Pointmap {
    pub fn new(reference_view: usize, height: usize, width: usize) -> Self {
        Pointmap {
            reference_view,
            height,
            width,
            points: vec![0.0; height * width * 3],
            confidence: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn point(&self, y: usize, x: usize) -> Vec3 {
        let i = (y * self.width + x) * 3;
        [self.points[i], self.points[i + 1], self.points[i + 2]]
    }

    #[inline]
    pub fn set_point(&mut self, y: usize, x: usize, p: Vec3) {
        let i = (y * self.width + x) * 3;
        self.points[i] = p[0];
        self.points[i + 1] = p[1];
        self.points[i + 2] = p[2];
    }

    /// Exports the pointmap as an ASCII PLY cloud, optionally with colors
    /// (one [0,1] rgb triple per pixel, row-major).
    pub fn export_ply(&self, path: impl AsRef<Path>, colors: Option<&[f64]>) -> Result<()> {
        let path = path.as_ref();
        if let Some(c) = colors {
            if c.len() != self.points.len() {
                return Err(Error::invalid(format!(
                    "export_ply: {} colors for {} points",
                    c.len() / 3,
                    self.points.len() / 3
                )));
            }
        }
        let n = self.height * self.width;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let write = |w: &mut dyn Write| -> std::io::Result<()> {
            writeln!(w, "ply")?;
            writeln!(w, "format ascii 1.0")?;
            writeln!(w, "element vertex {n}")?;
            writeln!(w, "property float x")?;
            writeln!(w, "property float y")?;
            writeln!(w, "property float z")?;
            if colors.is_some() {
                writeln!(w, "property uchar red")?;
                writeln!(w, "property uchar green")?;
                writeln!(w, "property uchar blue")?;
            }
            writeln!(w, "end_header")?;
            for i in 0..n {
                let p = &self.points[i * 3..i * 3 + 3];
                if let Some(c) = colors {
                    let rgb: Vec<u8> = (0..3)
                        .map(|k| (c[i * 3 + k].clamp(0.0, 1.0) * 255.0).round() as u8)
                        .collect();
                    writeln!(
                        w,
                        "{} {} {} {} {} {}",
                        p[0] as f32, p[1] as f32, p[2] as f32, rgb[0], rgb[1], rgb[2]
                    )?;
                } else {
                    writeln!(w, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
                }
            }
            Ok(())
        };
        write(&mut w).map_err(|e| Error::io(path, e))
    }
}

/// A colored point cloud (used as the substrate for viewpoint augmentation).
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    /// Linear rgb in [0,1] per point.
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, p: Vec3, c: [f64; 3]) {
        self.positions.push(p);
        self.colors.push(c);
    }

    pub fn export_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "ply")?;
            writeln!(w, "format ascii 1.0")?;
            writeln!(w, "element vertex {}", self.len())?;
            writeln!(w, "property float x")?;
            writeln!(w, "property float y")?;
            writeln!(w, "property float z")?;
            writeln!(w, "property uchar red")?;
            writeln!(w, "property uchar green")?;
            writeln!(w, "property uchar blue")?;
            writeln!(w, "end_header")?;
            for (p, c) in self.positions.iter().zip(&self.colors) {
                writeln!(
                    w,
                    "{} {} {} {} {} {}",
                    p[0] as f32,
                    p[1] as f32,
                    p[2] as f32,
                    (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[2].clamp(0.0, 1.0) * 255.0).round() as u8
                )?;
            }
            Ok(())
        })();
        res.map_err(|e| Error::io(path, e))
    }
}
