//! Point-cloud viewpoint augmentation: pose interpolation, synthetic target
//! views rasterized from the predicted cloud, and the multi-view consistency
//! loss over the interpolated poses.

use crate::diff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::linalg::quat_slerp;
use crate::pointmap::PointCloud;
use crate::pose::{CameraPose, Intrinsics};
use crate::splat::{render_pointcloud, RenderSettings};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Total number of interpolated poses.
    pub k: usize,
    /// Overlap fraction below which augmentation matters most; used only by
    /// the overlap-gated mode.
    pub overlap_threshold: f64,
    /// When true, augmentation activates only for scenes whose reported
    /// overlap falls below the threshold; default is always-on.
    pub gated_by_overlap: bool,
    /// Dump synthetic views as PNGs for inspection.
    pub debug_dump: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            k: 4,
            overlap_threshold: 0.30,
            gated_by_overlap: false,
            debug_dump: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) {
        if self.enabled {
            assert!(self.k >= 1, "augmentation needs K >= 1 when enabled");
        }
    }

    pub fn active(&self, scene_overlap: Option<f64>) -> bool {
        if !self.enabled {
            return false;
        }
        if self.gated_by_overlap {
            match scene_overlap {
                Some(o) => o < self.overlap_threshold,
                None => true,
            }
        } else {
            true
        }
    }
}

/// Pose at interpolation parameter t in [0, 1]: spherical-linear rotation
/// (shortest arc), linear translation. t=0 gives `a`, t=1 gives `b`.
pub fn pose_interpolate(a: &CameraPose, b: &CameraPose, t: f64) -> CameraPose {
    let rotation = quat_slerp(a.rotation, b.rotation, t);
    // (1-t)a + tb is exact at both endpoints
    let lerp = |x: f64, y: f64| (1.0 - t) * x + t * y;
    let translation = [
        lerp(a.translation[0], b.translation[0]),
        lerp(a.translation[1], b.translation[1]),
        lerp(a.translation[2], b.translation[2]),
    ];
    CameraPose {
        rotation,
        translation,
    }
}

/// K interior poses between two cameras at t in {1/(K+1), ..., K/(K+1)}.
pub fn interpolate_poses(a: &CameraPose, b: &CameraPose, k: usize) -> Vec<CameraPose> {
    (1..=k)
        .map(|i| pose_interpolate(a, b, i as f64 / (k + 1) as f64))
        .collect()
}

/// Distributes K interpolated poses across the consecutive gaps of a camera
/// chain (all K in the single gap for two views).
pub fn interpolate_pose_chain(poses: &[CameraPose], k: usize) -> Vec<CameraPose> {
    assert!(poses.len() >= 2, "need at least two poses to interpolate");
    let gaps = poses.len() - 1;
    let mut counts = vec![k / gaps; gaps];
    for c in counts.iter_mut().take(k % gaps) {
        *c += 1;
    }
    let mut out = Vec::with_capacity(k);
    for (gi, cnt) in counts.iter().enumerate() {
        out.extend(interpolate_poses(&poses[gi], &poses[gi + 1], *cnt));
    }
    out
}

/// A rasterized synthetic target plus the per-pixel 3D positions backing it
/// (hole pixels fall back to the pixel ray at the view's median depth).
pub struct SyntheticView {
    pub pose: CameraPose,
    pub image: Image,
    /// (H*W*3) canonical-frame positions, one per pixel.
    pub mean_base: Vec<f64>,
    /// Per-pixel hit flags (false for hole/fallback pixels).
    pub valid: Vec<bool>,
    pub nothing_in_frame: bool,
}

/// Rasterizes the point cloud from each pose. Each synthetic view carries
/// its own per-pixel mean base so it can enter the Gaussian-head path.
pub fn make_synthetic_views(
    cloud: &PointCloud,
    poses: &[CameraPose],
    intr: &Intrinsics,
    settings: &RenderSettings,
) -> Result<Vec<SyntheticView>> {
    if cloud.is_empty() {
        return Err(Error::invalid("make_synthetic_views: empty point cloud"));
    }
    let (w, h) = (settings.width, settings.height);
    let mut out = Vec::with_capacity(poses.len());
    for pose in poses {
        let render = render_pointcloud(cloud, pose, intr, settings);
        // median depth of lit pixels, fallback for holes
        let mut depths: Vec<f64> = render
            .depth
            .iter()
            .copied()
            .filter(|d| d.is_finite())
            .collect();
        depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let fallback_depth = if depths.is_empty() {
            0.5 * (settings.near + settings.far)
        } else {
            depths[depths.len() / 2]
        };
        let inv = crate::pose::pose_inverse(pose);
        let mut mean_base = Vec::with_capacity(w * h * 3);
        let mut valid = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let pi = y * w + x;
                let idx = render.point_index[pi];
                if idx >= 0 {
                    let p = cloud.positions[idx as usize];
                    mean_base.extend_from_slice(&p);
                    valid.push(true);
                } else {
                    // unproject the pixel center at the fallback depth,
                    // then move it into the canonical frame
                    let z = fallback_depth;
                    let cam = [
                        (x as f64 + 0.5 - intr.cx) / intr.fx * z,
                        (y as f64 + 0.5 - intr.cy) / intr.fy * z,
                        z,
                    ];
                    let world = inv.transform(cam);
                    mean_base.extend_from_slice(&world);
                    valid.push(false);
                }
            }
        }
        out.push(SyntheticView {
            pose: *pose,
            image: render.image,
            mean_base,
            valid,
            nothing_in_frame: render.nothing_in_frame,
        });
    }
    Ok(out)
}

/// Multi-view consistency loss: mean over K of the per-image mean absolute
/// error between the differentiable renders and the synthetic targets.
pub fn aug_loss(g: &mut Graph, renders: &[NodeId], targets: &[&Image]) -> Result<NodeId> {
    if renders.len() != targets.len() {
        return Err(Error::invalid(format!(
            "aug_loss: {} renders vs {} targets",
            renders.len(),
            targets.len()
        )));
    }
    if renders.is_empty() {
        return Err(Error::invalid("aug_loss: no views"));
    }
    let mut acc: Option<NodeId> = None;
    for (&r, t) in renders.iter().zip(targets) {
        let shape = g.shape(r).to_vec();
        let tgt = g.constant(shape, t.data.clone());
        let term = g.l1(r, tgt);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / renders.len() as f64))
}

/// Writes synthetic views as PNGs under `dir` (debug aid).
pub fn dump_synthetic_views(views: &[SyntheticView], dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, v) in views.iter().enumerate() {
        v.image.save_png(dir.join(format!("synthetic_{i:03}.png")))?;
    }
    Ok(())
}
