//! Synthetic scene generation: analytically ray-cast cube/sphere scenes with
//! known geometry, a camera ring, per-view ground-truth pointmaps and a
//! projective overlap report. Stands in for real capture data at desk scale.

use crate::error::{Error, Result};
use crate::img::Image;
use crate::linalg::{add3, dot3, normalize3, scale3, sub3, Vec3};
use crate::pointmap::PointCloud;
use crate::pose::{pose_compose, pose_inverse, CameraPose, Intrinsics};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SceneObject {
    Cube {
        center: Vec3,
        half_extent: f64,
        /// Per-face base colors in +x,-x,+y,-y,+z,-z order.
        face_colors: [[f64; 3]; 6],
        /// Checker cells across the face (0 disables the pattern).
        checker: usize,
    },
    Sphere {
        center: Vec3,
        radius: f64,
        color: [f64; 3],
        checker: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    pub n_views: usize,
    pub n_holdout: usize,
    pub ring_radius: f64,
    pub elevation_deg: f64,
    /// Azimuth separation between consecutive train views (degrees); ignored
    /// when an explicit azimuth list is given.
    pub azimuth_separation_deg: f64,
    pub azimuths_deg: Option<Vec<f64>>,
    pub fov_deg: f64,
    pub target_overlap: Option<f64>,
    pub objects: Vec<SceneObject>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 7,
            image_size: 64,
            n_views: 2,
            n_holdout: 1,
            ring_radius: 2.6,
            elevation_deg: 18.0,
            azimuth_separation_deg: 22.0,
            azimuths_deg: None,
            fov_deg: 50.0,
            target_overlap: None,
            objects: default_objects(),
        }
    }
}

pub fn default_objects() -> Vec<SceneObject> {
    vec![
        SceneObject::Cube {
            center: [0.0, 0.0, 0.0],
            half_extent: 0.45,
            face_colors: [
                [0.90, 0.25, 0.20],
                [0.20, 0.55, 0.90],
                [0.25, 0.80, 0.30],
                [0.95, 0.80, 0.20],
                [0.80, 0.30, 0.80],
                [0.25, 0.80, 0.80],
            ],
            checker: 4,
        },
        SceneObject::Sphere {
            center: [0.75, 0.35, 0.15],
            radius: 0.28,
            color: [0.95, 0.60, 0.25],
            checker: 6,
        },
        SceneObject::Sphere {
            center: [-0.7, -0.25, 0.3],
            radius: 0.24,
            color: [0.45, 0.85, 0.95],
            checker: 5,
        },
    ]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::invalid("a scene needs at least 2 cameras"));
        }
        if self.image_size == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if self.objects.is_empty() {
            return Err(Error::invalid("scene needs at least one object"));
        }
        Ok(())
    }

    pub fn train_azimuths(&self) -> Vec<f64> {
        match &self.azimuths_deg {
            Some(az) => az.clone(),
            None => (0..self.n_views)
                .map(|i| i as f64 * self.azimuth_separation_deg)
                .collect(),
        }
    }

    pub fn holdout_azimuths(&self) -> Vec<f64> {
        let train = self.train_azimuths();
        (0..self.n_holdout)
            .map(|i| {
                let a = train[i % train.len().max(1)];
                a + 0.5 * self.azimuth_separation_deg + (i / train.len()) as f64 * 7.0
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SceneView {
    pub image: Image,
    pub pose: CameraPose,
    pub holdout: bool,
    /// Per-pixel depth (camera z); far-fill on background pixels.
    pub depth: Vec<f64>,
    /// Object-hit mask.
    pub mask: Vec<bool>,
    /// Ground-truth per-pixel points in this view's own camera frame.
    pub pointmap_self: Vec<f64>,
    /// Ground-truth per-pixel points in the canonical (view-0) frame.
    pub pointmap_canonical: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapReport {
    /// Pairwise overlaps among train views: (a, b, fraction).
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean: f64,
    pub warning: Option<String>,
}

pub struct Scene {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    pub views: Vec<SceneView>,
    pub overlap: OverlapReport,
}

impl Scene {
    pub fn train_views(&self) -> Vec<&SceneView> {
        self.views.iter().filter(|v| !v.holdout).collect()
    }

    pub fn holdout_views(&self) -> Vec<&SceneView> {
        self.views.iter().filter(|v| v.holdout).collect()
    }

    /// Ground-truth colored point cloud sampled from hit pixels of the train
    /// views, in the canonical frame.
    pub fn ground_truth_cloud(&self) -> PointCloud {
        let mut cloud = PointCloud::default();
        for view in self.train_views() {
            let w = view.image.width;
            for (pi, &hit) in view.mask.iter().enumerate() {
                if hit {
                    let p = [
                        view.pointmap_canonical[pi * 3],
                        view.pointmap_canonical[pi * 3 + 1],
                        view.pointmap_canonical[pi * 3 + 2],
                    ];
                    cloud.push(p, view.image.get(pi / w, pi % w));
                }
            }
        }
        cloud
    }
}

struct Hit {
    t: f64,
    point: Vec3,
    normal: Vec3,
    color: [f64; 3],
}

fn ray_cube(origin: Vec3, dir: Vec3, center: Vec3, half: f64) -> Option<(f64, usize)> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    let mut axis_min = 0usize;
    for a in 0..3 {
        let lo = center[a] - half;
        let hi = center[a] + half;
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
            continue;
        }
        let mut t0 = (lo - origin[a]) / dir[a];
        let mut t1 = (hi - origin[a]) / dir[a];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > tmin {
            tmin = t0;
            axis_min = a;
        }
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    if tmin <= 1e-9 {
        return None; // inside or behind
    }
    Some((tmin, axis_min))
}

fn ray_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64) -> Option<f64> {
    let oc = sub3(origin, center);
    let b = dot3(oc, dir);
    let c = dot3(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    if t > 1e-9 {
        Some(t)
    } else {
        None
    }
}

fn checker_factor(u: f64, v: f64, cells: usize) -> f64 {
    if cells == 0 {
        return 1.0;
    }
    let iu = (u * cells as f64).floor() as i64;
    let iv = (v * cells as f64).floor() as i64;
    if (iu + iv).rem_euclid(2) == 0 {
        1.0
    } else {
        0.55
    }
}

const LIGHT_DIR: Vec3 = [0.37139067635410377, -0.557086014531156, 0.7427813527082075];

fn shade(normal: Vec3, base: [f64; 3]) -> [f64; 3] {
    let lambert = dot3(normal, LIGHT_DIR).max(0.0);
    let k = 0.35 + 0.65 * lambert;
    [base[0] * k, base[1] * k, base[2] * k]
}

fn intersect_scene(objects: &[SceneObject], origin: Vec3, dir: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for obj in objects {
        match obj {
            SceneObject::Cube {
                center,
                half_extent,
                face_colors,
                checker,
            } => {
                if let Some((t, axis)) = ray_cube(origin, dir, *center, *half_extent) {
                    if best.as_ref().is_none_or(|b| t < b.t) {
                        let point = add3(origin, scale3(dir, t));
                        let local = sub3(point, *center);
                        let sign = local[axis].signum();
                        let mut normal = [0.0; 3];
                        normal[axis] = sign;
                        let face = axis * 2 + if sign > 0.0 { 0 } else { 1 };
                        let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
                        let u = (local[ua] / half_extent + 1.0) * 0.5;
                        let v = (local[va] / half_extent + 1.0) * 0.5;
                        let base = face_colors[face];
                        let f = checker_factor(u, v, *checker);
                        let color = shade(normal, [base[0] * f, base[1] * f, base[2] * f]);
                        best = Some(Hit {
                            t,
                            point,
                            normal,
                            color,
                        });
                    }
                }
            }
            SceneObject::Sphere {
                center,
                radius,
                color,
                checker,
            } => {
                if let Some(t) = ray_sphere(origin, dir, *center, *radius) {
                    if best.as_ref().is_none_or(|b| t < b.t) {
                        let point = add3(origin, scale3(dir, t));
                        let normal = normalize3(sub3(point, *center));
                        let theta = normal[2].clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
                        let phi = (normal[1].atan2(normal[0]) + std::f64::consts::PI)
                            / (2.0 * std::f64::consts::PI);
                        let f = checker_factor(phi, theta, *checker);
                        let shaded = shade(normal, [color[0] * f, color[1] * f, color[2] * f]);
                        best = Some(Hit {
                            t,
                            point,
                            normal,
                            color: shaded,
                        });
                    }
                }
            }
        }
    }
    best
}

fn ring_pose(spec: &SceneSpec, azimuth_deg: f64) -> CameraPose {
    let az = azimuth_deg.to_radians();
    let el = spec.elevation_deg.to_radians();
    let eye = [
        spec.ring_radius * az.cos() * el.cos(),
        spec.ring_radius * az.sin() * el.cos(),
        spec.ring_radius * el.sin(),
    ];
    CameraPose::look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
}

fn render_view(spec: &SceneSpec, intr: &Intrinsics, pose: &CameraPose, holdout: bool) -> SceneView {
    let size = spec.image_size;
    let inv = pose_inverse(pose);
    let origin = pose.camera_center();
    let far_fill = 2.0 * spec.ring_radius;
    let mut image = Image::new(size, size);
    let mut depth = vec![0.0; size * size];
    let mut mask = vec![false; size * size];
    let mut pm_self = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let cam_dir = normalize3([
                (x as f64 + 0.5 - intr.cx) / intr.fx,
                (y as f64 + 0.5 - intr.cy) / intr.fy,
                1.0,
            ]);
            // rotate into world space (inverse pose, zero translation for dirs)
            let world_dir = {
                let r = inv.rotation_matrix();
                crate::linalg::mat3_mul_vec3(&r, cam_dir)
            };
            let pi = y * size + x;
            match intersect_scene(&spec.objects, origin, world_dir) {
                Some(hit) => {
                    image.set(y, x, [
                        hit.color[0].clamp(0.0, 1.0),
                        hit.color[1].clamp(0.0, 1.0),
                        hit.color[2].clamp(0.0, 1.0),
                    ]);
                    let p_cam = pose.transform(hit.point);
                    depth[pi] = p_cam[2];
                    mask[pi] = true;
                    pm_self[pi * 3..pi * 3 + 3].copy_from_slice(&p_cam);
                    let _ = hit.normal;
                }
                None => {
                    // background: far-fill the pointmap along the ray so every
                    // pixel owns a well-defined 3D position
                    let p_world = add3(origin, scale3(world_dir, far_fill));
                    let p_cam = pose.transform(p_world);
                    depth[pi] = p_cam[2];
                    pm_self[pi * 3..pi * 3 + 3].copy_from_slice(&p_cam);
                }
            }
        }
    }
    SceneView {
        image,
        pose: *pose,
        holdout,
        depth,
        mask,
        pointmap_self: pm_self,
        pointmap_canonical: Vec::new(), // filled once view 0 is known
    }
}

/// Fraction of view a's object pixels whose 3D point is visible (in frame,
/// in front, unoccluded) in view b.
fn overlap_fraction(a: &SceneView, b: &SceneView, intr: &Intrinsics, size: usize) -> f64 {
    let inv_a = pose_inverse(&a.pose);
    let mut visible = 0usize;
    let mut total = 0usize;
    for pi in 0..size * size {
        if !a.mask[pi] {
            continue;
        }
        total += 1;
        let p_self = [
            a.pointmap_self[pi * 3],
            a.pointmap_self[pi * 3 + 1],
            a.pointmap_self[pi * 3 + 2],
        ];
        let world = inv_a.transform(p_self);
        let in_b = b.pose.transform(world);
        if in_b[2] <= 1e-6 {
            continue;
        }
        let u = intr.fx * in_b[0] / in_b[2] + intr.cx;
        let v = intr.fy * in_b[1] / in_b[2] + intr.cy;
        let (xi, yi) = (u.floor() as i64, v.floor() as i64);
        if xi < 0 || yi < 0 || xi >= size as i64 || yi >= size as i64 {
            continue;
        }
        let qb = yi as usize * size + xi as usize;
        if !b.mask[qb] {
            continue;
        }
        // occlusion: the stored depth must match within tolerance
        if (b.depth[qb] - in_b[2]).abs() <= 0.03 * in_b[2] + 1e-3 {
            visible += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        visible as f64 / total as f64
    }
}

/// Generates all views, canonicalizes pointmaps to view 0's frame and
/// computes the overlap report. Deterministic for a fixed spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let intr = Intrinsics::from_fov(spec.image_size, spec.fov_deg.to_radians());
    let mut views = Vec::new();
    for az in spec.train_azimuths() {
        views.push(render_view(spec, &intr, &ring_pose(spec, az), false));
    }
    for az in spec.holdout_azimuths() {
        views.push(render_view(spec, &intr, &ring_pose(spec, az), true));
    }
    // canonical pointmaps: x_canon = pose0 ( pose_v^-1 (x_self) );
    // view 0 is the canonical frame itself, exactly
    let pose0 = views[0].pose;
    views[0].pointmap_canonical = views[0].pointmap_self.clone();
    for v in 1..views.len() {
        let to_canon = pose_compose(&pose0, &pose_inverse(&views[v].pose));
        let n = views[v].pointmap_self.len() / 3;
        let mut pm = vec![0.0; n * 3];
        for i in 0..n {
            let p = [
                views[v].pointmap_self[i * 3],
                views[v].pointmap_self[i * 3 + 1],
                views[v].pointmap_self[i * 3 + 2],
            ];
            let c = to_canon.transform(p);
            pm[i * 3..i * 3 + 3].copy_from_slice(&c);
        }
        views[v].pointmap_canonical = pm;
    }
    // pairwise overlap among train views
    let train: Vec<usize> = views
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.holdout)
        .map(|(i, _)| i)
        .collect();
    let mut pairs = Vec::new();
    let mut sum = 0.0;
    for i in 0..train.len() {
        for j in i + 1..train.len() {
            let f_ab = overlap_fraction(&views[train[i]], &views[train[j]], &intr, spec.image_size);
            let f_ba = overlap_fraction(&views[train[j]], &views[train[i]], &intr, spec.image_size);
            let f = 0.5 * (f_ab + f_ba);
            pairs.push((train[i], train[j], f));
            sum += f;
        }
    }
    let mean = if pairs.is_empty() {
        0.0
    } else {
        sum / pairs.len() as f64
    };
    let warning = spec.target_overlap.and_then(|t| {
        ((mean - t).abs() > 0.15).then(|| {
            format!("target overlap {t:.2} not reached: achieved {mean:.2} (best effort)")
        })
    });
    Ok(Scene {
        spec: spec.clone(),
        intrinsics: intr,
        views,
        overlap: OverlapReport {
            pairs,
            mean,
            warning,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestView {
    file: String,
    rotation: [f64; 4],
    translation: [f64; 3],
    holdout: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: SceneSpec,
    intrinsics: Intrinsics,
    views: Vec<ManifestView>,
    overlap: OverlapReport,
}

/// Writes images, the JSON manifest, ground-truth geometry (as a checkpoint
/// archive) and the GT point cloud PLY into `dir`.
pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut manifest_views = Vec::new();
    let mut geo = crate::diff::ParamStore::new();
    for (i, view) in scene.views.iter().enumerate() {
        let file = format!("images/view_{i:03}.png");
        view.image.save_png(dir.join(&file))?;
        manifest_views.push(ManifestView {
            file,
            rotation: view.pose.rotation,
            translation: view.pose.translation,
            holdout: view.holdout,
        });
        let size = scene.spec.image_size;
        geo.register(
            format!("view{i}.pointmap_self"),
            vec![size * size, 3],
            view.pointmap_self.clone(),
        );
        geo.register(
            format!("view{i}.pointmap_canonical"),
            vec![size * size, 3],
            view.pointmap_canonical.clone(),
        );
        geo.register(format!("view{i}.depth"), vec![size * size], view.depth.clone());
        geo.register(
            format!("view{i}.mask"),
            vec![size * size],
            view.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        );
    }
    let manifest = Manifest {
        format_version: SCENE_FORMAT_VERSION,
        spec: scene.spec.clone(),
        intrinsics: scene.intrinsics,
        views: manifest_views,
        overlap: scene.overlap.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json).map_err(|e| Error::io(dir, e))?;
    crate::diff::save_checkpoint(&geo, dir.join("geometry.bin"))?;
    scene.ground_truth_cloud().export_ply(dir.join("pointcloud.ply"))?;
    Ok(dir.to_path_buf())
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.format_version != SCENE_FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported scene format version {}",
            manifest.format_version
        )));
    }
    let geo = crate::diff::load_checkpoint(dir.join("geometry.bin"))?;
    let mut views = Vec::new();
    for (i, mv) in manifest.views.iter().enumerate() {
        let image = Image::load_png(dir.join(&mv.file))?;
        let get = |name: &str| -> Result<Vec<f64>> {
            let id = geo
                .id_of(&format!("view{i}.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing geometry view{i}.{name}")))?;
            Ok(geo.get(id).values.as_ref().clone())
        };
        views.push(SceneView {
            image,
            pose: CameraPose::new(mv.rotation, mv.translation),
            holdout: mv.holdout,
            depth: get("depth")?,
            mask: get("mask")?.iter().map(|&v| v > 0.5).collect(),
            pointmap_self: get("pointmap_self")?,
            pointmap_canonical: get("pointmap_canonical")?,
        });
    }
    Ok(Scene {
        spec: manifest.spec,
        intrinsics: manifest.intrinsics,
        views,
        overlap: manifest.overlap,
    })
}
