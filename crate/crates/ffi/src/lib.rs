//! C ABI for the pipeline: scene generation, training, evaluation, and a
//! reconstruction handle that renders novel views into caller buffers.
//!
//! Conventions:
//! - Every function returns a [`MusaSplatStatus`]; `MUSASPLAT_OK` is 0.
//! - On failure, [`musasplat_last_error_message`] returns a thread-local,
//!   NUL-terminated description valid until the next call on that thread.
//! - Complex state lives behind opaque handles; every `*_new`-style call has
//!   a matching `*_free`. Strings are UTF-8, NUL-terminated.

use musasplat::gaussian::GaussianSet;
use musasplat::heads::GaussianNodes;
use musasplat::model::Model;
use musasplat::pose::{CameraPose, Intrinsics};
use musasplat::run::{RunConfig, TrainOptions};
use musasplat::scene::{generate_scene, load_scene, SceneSpec};
use musasplat::splat::{render, RenderSettings};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MusaSplatStatus {
    MusasplatOk = 0,
    MusasplatErrInvalidArgument = 1,
    MusasplatErrIo = 2,
    MusasplatErrJson = 3,
    MusasplatErrTraining = 4,
    MusasplatErrInternal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &musasplat::Error) -> MusaSplatStatus {
    match err {
        musasplat::Error::InvalidInput(_) | musasplat::Error::ShapeMismatch { .. } => {
            MusaSplatStatus::MusasplatErrInvalidArgument
        }
        musasplat::Error::Io { .. } | musasplat::Error::Png { .. } => MusaSplatStatus::MusasplatErrIo,
        musasplat::Error::Json(_) | musasplat::Error::Checkpoint(_) => {
            MusaSplatStatus::MusasplatErrJson
        }
        musasplat::Error::Training(_) => MusaSplatStatus::MusasplatErrTraining,
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated UTF-8 string or null.
unsafe fn opt_str<'a>(ptr: *const c_char) -> Result<Option<&'a str>, MusaSplatStatus> {
    if ptr.is_null() {
        return Ok(None);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Some(s)),
        Err(_) => {
            set_error("argument is not valid UTF-8");
            Err(MusaSplatStatus::MusasplatErrInvalidArgument)
        }
    }
}

unsafe fn req_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, MusaSplatStatus> {
    match opt_str(ptr)? {
        Some(s) => Ok(s),
        None => {
            set_error(&format!("{name} must not be null"));
            Err(MusaSplatStatus::MusasplatErrInvalidArgument)
        }
    }
}

fn guard(f: impl FnOnce() -> MusaSplatStatus) -> MusaSplatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".to_string());
            set_error(&format!("internal panic: {msg}"));
            MusaSplatStatus::MusasplatErrInternal
        }
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn musasplat_version() -> *const c_char {
    static VERSION: &[u8] = b"0.1.0\0";
    VERSION.as_ptr() as *const c_char
}

/// Message of the last error on this thread; empty string when none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn musasplat_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generates a synthetic scene into `out_dir`. `spec_json` is the scene spec
/// (pass null for defaults).
///
/// # Safety
/// Pointer arguments must be null or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn musasplat_scene_generate(
    spec_json: *const c_char,
    out_dir: *const c_char,
) -> MusaSplatStatus {
    guard(|| {
        let spec = match opt_str(spec_json) {
            Ok(Some(json)) => match serde_json::from_str::<SceneSpec>(json) {
                Ok(s) => s,
                Err(e) => {
                    set_error(&format!("bad scene spec: {e}"));
                    return MusaSplatStatus::MusasplatErrJson;
                }
            },
            Ok(None) => SceneSpec::default(),
            Err(s) => return s,
        };
        let out = match req_str(out_dir, "out_dir") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match generate_scene(&spec).and_then(|sc| musasplat::scene::save_scene(&sc, out)) {
            Ok(_) => MusaSplatStatus::MusasplatOk,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Trains on a scene directory. `run_config_json` is a full run config
/// (null for the default "full" preset). Writes checkpoints and reports
/// into `out_dir`.
///
/// # Safety
/// Pointer arguments must be null or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn musasplat_train(
    run_config_json: *const c_char,
    scene_dir: *const c_char,
    out_dir: *const c_char,
) -> MusaSplatStatus {
    guard(|| {
        let mut cfg = match opt_str(run_config_json) {
            Ok(Some(json)) => match serde_json::from_str::<RunConfig>(json) {
                Ok(c) => c,
                Err(e) => {
                    set_error(&format!("bad run config: {e}"));
                    return MusaSplatStatus::MusasplatErrJson;
                }
            },
            Ok(None) => RunConfig::default(),
            Err(s) => return s,
        };
        let (scene_dir, out_dir) = match (req_str(scene_dir, "scene_dir"), req_str(out_dir, "out_dir")) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let scene = match load_scene(scene_dir) {
            Ok(s) => s,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        cfg.model.image_size = scene.spec.image_size;
        match musasplat::run::train_run(
            &cfg,
            &scene,
            out_dir,
            &TrainOptions {
                quiet: true,
                ..Default::default()
            },
        ) {
            Ok(_) => MusaSplatStatus::MusasplatOk,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Evaluates a checkpoint on a scene and writes metrics into `out_dir`.
///
/// # Safety
/// Pointer arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn musasplat_eval(
    checkpoint_path: *const c_char,
    scene_dir: *const c_char,
    out_dir: *const c_char,
) -> MusaSplatStatus {
    guard(|| {
        let (ckpt, scene_dir, out_dir) = match (
            req_str(checkpoint_path, "checkpoint_path"),
            req_str(scene_dir, "scene_dir"),
            req_str(out_dir, "out_dir"),
        ) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
        let scene = match load_scene(scene_dir) {
            Ok(s) => s,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        match musasplat::run::eval_run(ckpt, &scene, out_dir) {
            Ok(_) => MusaSplatStatus::MusasplatOk,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// A feed-forward reconstruction: the predicted Gaussian set for one scene,
/// ready to render from arbitrary poses.
pub struct MusaSplatReconstruction {
    gaussians: GaussianSet,
    intrinsics: Intrinsics,
    image_size: usize,
}

fn reconstruct_impl(ckpt: &str, scene_dir: &str) -> musasplat::Result<MusaSplatReconstruction> {
    let scene = load_scene(scene_dir)?;
    let run_dir = Path::new(ckpt)
        .parent()
        .ok_or_else(|| musasplat::Error::invalid("checkpoint has no parent directory"))?;
    let cfg_json = std::fs::read_to_string(run_dir.join("run_config.json"))
        .map_err(|e| musasplat::Error::io(run_dir.join("run_config.json"), e))?;
    let cfg: RunConfig = serde_json::from_str(&cfg_json)?;
    let mut model = Model::load_checkpoint(&cfg.model, ckpt)?;
    model.freeze_for_gaussian_training();

    let images: Vec<_> = scene.train_views().iter().map(|v| v.image.clone()).collect();
    let geom = model.infer_geometry(&images)?;
    let mut g = musasplat::diff::Graph::new();
    let (decoded, _) = model.backbone_forward(&mut g, &images)?;
    let nodes: GaussianNodes =
        model.gaussian_head_forward(&mut g, &decoded, &images, &geom.pointmaps)?;
    Ok(MusaSplatReconstruction {
        gaussians: nodes.to_set(&g),
        intrinsics: scene.intrinsics,
        image_size: scene.spec.image_size,
    })
}

/// Runs the feed-forward pass once and returns an opaque reconstruction
/// handle through `out`. Free with [`musasplat_reconstruction_free`].
///
/// # Safety
/// `checkpoint_path` and `scene_dir` must be valid strings; `out` must be a
/// valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn musasplat_reconstruct(
    checkpoint_path: *const c_char,
    scene_dir: *const c_char,
    out: *mut *mut MusaSplatReconstruction,
) -> MusaSplatStatus {
    guard(|| {
        if out.is_null() {
            set_error("out must not be null");
            return MusaSplatStatus::MusasplatErrInvalidArgument;
        }
        let (ckpt, scene_dir) = match (
            req_str(checkpoint_path, "checkpoint_path"),
            req_str(scene_dir, "scene_dir"),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match reconstruct_impl(ckpt, scene_dir) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(r));
                MusaSplatStatus::MusasplatOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Number of Gaussians in a reconstruction; 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live pointer from [`musasplat_reconstruct`].
#[no_mangle]
pub unsafe extern "C" fn musasplat_reconstruction_gaussian_count(
    handle: *const MusaSplatReconstruction,
) -> usize {
    if handle.is_null() {
        return 0;
    }
    (*handle).gaussians.len()
}

/// Renders the reconstruction from a world-to-camera pose into a caller
/// buffer of `width * height * 3` floats (RGB, linear, row-major).
/// `pose_wxyz_t` holds 7 doubles: unit quaternion w,x,y,z then translation.
///
/// # Safety
/// `handle` must be live; `pose_wxyz_t` must point at 7 doubles; `out_rgb`
/// must have room for `width * height * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn musasplat_reconstruction_render(
    handle: *const MusaSplatReconstruction,
    pose_wxyz_t: *const f64,
    width: usize,
    height: usize,
    out_rgb: *mut f32,
) -> MusaSplatStatus {
    guard(|| {
        if handle.is_null() || pose_wxyz_t.is_null() || out_rgb.is_null() {
            set_error("handle, pose and out buffer must not be null");
            return MusaSplatStatus::MusasplatErrInvalidArgument;
        }
        if width == 0 || height == 0 {
            set_error("render size must be positive");
            return MusaSplatStatus::MusasplatErrInvalidArgument;
        }
        let r = &*handle;
        let p = std::slice::from_raw_parts(pose_wxyz_t, 7);
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + p[3] * p[3]).sqrt();
        if !(norm.is_finite()) || (norm - 1.0).abs() > 1e-3 {
            set_error("pose quaternion must be unit norm");
            return MusaSplatStatus::MusasplatErrInvalidArgument;
        }
        let pose = CameraPose::new(
            [p[0] / norm, p[1] / norm, p[2] / norm, p[3] / norm],
            [p[4], p[5], p[6]],
        );
        // scale the scene intrinsics to the requested resolution
        let sx = width as f64 / r.image_size as f64;
        let sy = height as f64 / r.image_size as f64;
        let intr = Intrinsics::new(
            r.intrinsics.fx * sx,
            r.intrinsics.fy * sy,
            r.intrinsics.cx * sx,
            r.intrinsics.cy * sy,
        );
        let settings = RenderSettings::new(width, height);
        let (img, _) = render(&r.gaussians, &pose, &intr, &settings);
        let out = std::slice::from_raw_parts_mut(out_rgb, width * height * 3);
        for (dst, src) in out.iter_mut().zip(&img.data) {
            *dst = *src as f32;
        }
        MusaSplatStatus::MusasplatOk
    })
}

/// Exports the reconstruction's Gaussian means as an ASCII PLY cloud.
///
/// # Safety
/// `handle` must be live; `path` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn musasplat_reconstruction_export_ply(
    handle: *const MusaSplatReconstruction,
    path: *const c_char,
) -> MusaSplatStatus {
    guard(|| {
        if handle.is_null() {
            set_error("handle must not be null");
            return MusaSplatStatus::MusasplatErrInvalidArgument;
        }
        let path = match req_str(path, "path") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let r = &*handle;
        let mut cloud = musasplat::pointmap::PointCloud::default();
        for prim in &r.gaussians.primitives {
            let dc = [
                0.5 + musasplat::gaussian::SH_C0 * prim.sh[0],
                0.5 + musasplat::gaussian::SH_C0 * prim.sh[4],
                0.5 + musasplat::gaussian::SH_C0 * prim.sh[8],
            ];
            cloud.push(prim.mean, dc);
        }
        match cloud.export_ply(path) {
            Ok(()) => MusaSplatStatus::MusasplatOk,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Frees a reconstruction handle. Null is a no-op.
///
/// # Safety
/// `handle` must be null or a pointer from [`musasplat_reconstruct`] not yet
/// freed; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn musasplat_reconstruction_free(handle: *mut MusaSplatReconstruction) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
