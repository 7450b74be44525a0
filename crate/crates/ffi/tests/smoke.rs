//! C-ABI smoke tests: drive the exported functions exactly as a foreign
//! caller would, including the error paths.

use musasplat_ffi::*;
use std::ffi::{CStr, CString};

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(musasplat_last_error_message())
            .to_string_lossy()
            .into_owned()
    }
}

fn tiny_run_config() -> String {
    serde_json::json!({
        "label": "ffi-smoke",
        "model": {
            "image_size": 16,
            "seed": 5,
            "vit": {
                "patch_size": 4, "embed_dim": 16, "encoder_blocks": 1,
                "decoder_blocks": 1, "heads": 2, "mlp_ratio": 2
            },
            "musa": {
                "reduction_ratio": 4, "kernel_sizes": [3, 5, 7],
                "mini_grid_enabled": false, "mini_grid_p": 4, "all_zero_init": false
            },
            "ffa": {
                "tau": 0.1, "lambda_boost": 2.0, "attention_dim": null,
                "mask_floor": 1e-9, "heads": 1
            },
            "head": {
                "pixel_feature_dim": 4, "hidden_mult": 2, "sh_degree": 1,
                "scale_clamp": [-8.0, 2.0], "offset_scale": 0.05, "log_scale_bias": -3.5
            },
            "adapter_enabled": true,
            "aggregation": "Ffa"
        },
        "loss": {
            "lambda_rgb": 1.0, "lambda_aug": 0.05, "lambda_mse": 1.0,
            "lambda_lpips": 0.0, "perceptual": "None"
        },
        "optim": {
            "learning_rate": 1e-3, "weight_decay": 0.05, "clip_norm": 0.5,
            "batch_size": 4, "iterations": 3
        },
        "stage1": { "iterations": 3, "learning_rate": 1e-3 },
        "augment": {
            "enabled": true, "k": 2, "overlap_threshold": 0.3,
            "gated_by_overlap": false, "debug_dump": false
        },
        "checkpoint_every": 0,
        "metrics_every": 1
    })
    .to_string()
}

fn tiny_scene_spec() -> String {
    serde_json::json!({
        "seed": 9,
        "image_size": 16,
        "n_views": 2,
        "n_holdout": 1,
        "ring_radius": 2.6,
        "elevation_deg": 18.0,
        "azimuth_separation_deg": 22.0,
        "azimuths_deg": null,
        "fov_deg": 50.0,
        "target_overlap": null,
        "objects": [
            { "Cube": { "center": [0.0, 0.0, 0.0], "half_extent": 0.45,
                "face_colors": [[0.9,0.2,0.2],[0.2,0.5,0.9],[0.2,0.8,0.3],
                                 [0.9,0.8,0.2],[0.8,0.3,0.8],[0.2,0.8,0.8]],
                "checker": 2 } }
        ]
    })
    .to_string()
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(musasplat_version()) };
    assert_eq!(v.to_str().unwrap(), "0.1.0");
}

#[test]
fn null_arguments_are_rejected_with_messages() {
    let status = unsafe { musasplat_scene_generate(std::ptr::null(), std::ptr::null()) };
    assert_eq!(status, MusaSplatStatus::MusasplatErrInvalidArgument);
    assert!(last_error().contains("out_dir"));

    let mut handle: *mut MusaSplatReconstruction = std::ptr::null_mut();
    let status = unsafe {
        musasplat_reconstruct(std::ptr::null(), std::ptr::null(), &mut handle)
    };
    assert_eq!(status, MusaSplatStatus::MusasplatErrInvalidArgument);
    assert!(handle.is_null());
}

#[test]
fn bad_json_reports_json_error() {
    let dir = std::env::temp_dir().join("musasplat_ffi_badjson");
    let out = c(dir.to_str().unwrap());
    let bad = c("{ not json");
    let status = unsafe { musasplat_scene_generate(bad.as_ptr(), out.as_ptr()) };
    assert_eq!(status, MusaSplatStatus::MusasplatErrJson);
    assert!(last_error().contains("scene spec"));
}

#[test]
fn missing_scene_reports_io_error() {
    let cfg = c(&tiny_run_config());
    let scene = c("/nonexistent/musasplat/scene");
    let out = c("/tmp/musasplat_ffi_missing_out");
    let status = unsafe { musasplat_train(cfg.as_ptr(), scene.as_ptr(), out.as_ptr()) };
    assert_eq!(status, MusaSplatStatus::MusasplatErrIo);
}

/// Full lifecycle: generate, train, eval, reconstruct, render, free.
#[test]
fn scene_train_eval_reconstruct_render() {
    let base = std::env::temp_dir().join("musasplat_ffi_lifecycle");
    let _ = std::fs::remove_dir_all(&base);
    let scene_dir = base.join("scene");
    let run_dir = base.join("run");
    let eval_dir = base.join("eval");

    let spec = c(&tiny_scene_spec());
    let scene_c = c(scene_dir.to_str().unwrap());
    let status = unsafe { musasplat_scene_generate(spec.as_ptr(), scene_c.as_ptr()) };
    assert_eq!(status, MusaSplatStatus::MusasplatOk, "{}", last_error());
    assert!(scene_dir.join("manifest.json").is_file());

    let cfg = c(&tiny_run_config());
    let run_c = c(run_dir.to_str().unwrap());
    let status = unsafe { musasplat_train(cfg.as_ptr(), scene_c.as_ptr(), run_c.as_ptr()) };
    assert_eq!(status, MusaSplatStatus::MusasplatOk, "{}", last_error());
    let ckpt = run_dir.join("final.ckpt");
    assert!(ckpt.is_file());

    let ckpt_c = c(ckpt.to_str().unwrap());
    let eval_c = c(eval_dir.to_str().unwrap());
    let status = unsafe { musasplat_eval(ckpt_c.as_ptr(), scene_c.as_ptr(), eval_c.as_ptr()) };
    assert_eq!(status, MusaSplatStatus::MusasplatOk, "{}", last_error());
    assert!(eval_dir.join("eval_report.json").is_file());

    let mut handle: *mut MusaSplatReconstruction = std::ptr::null_mut();
    let status = unsafe { musasplat_reconstruct(ckpt_c.as_ptr(), scene_c.as_ptr(), &mut handle) };
    assert_eq!(status, MusaSplatStatus::MusasplatOk, "{}", last_error());
    assert!(!handle.is_null());
    let count = unsafe { musasplat_reconstruction_gaussian_count(handle) };
    assert_eq!(count, 2 * 16 * 16);

    // render from the canonical view (identity pose)
    let pose = [1.0f64, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let (w, h) = (16usize, 16usize);
    let mut buf = vec![0.0f32; w * h * 3];
    let status = unsafe {
        musasplat_reconstruction_render(handle, pose.as_ptr(), w, h, buf.as_mut_ptr())
    };
    assert_eq!(status, MusaSplatStatus::MusasplatOk, "{}", last_error());
    assert!(buf.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(&(*v as f64))));
    assert!(buf.iter().any(|&v| v > 0.0), "render is all black");

    // invalid pose rejected
    let bad_pose = [5.0f64, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let status = unsafe {
        musasplat_reconstruction_render(handle, bad_pose.as_ptr(), w, h, buf.as_mut_ptr())
    };
    assert_eq!(status, MusaSplatStatus::MusasplatErrInvalidArgument);

    let ply = base.join("recon.ply");
    let ply_c = c(ply.to_str().unwrap());
    let status = unsafe { musasplat_reconstruction_export_ply(handle, ply_c.as_ptr()) };
    assert_eq!(status, MusaSplatStatus::MusasplatOk, "{}", last_error());
    assert!(ply.is_file());

    unsafe { musasplat_reconstruction_free(handle) };
    unsafe { musasplat_reconstruction_free(std::ptr::null_mut()) }; // no-op
}

#[test]
fn generated_header_exists_with_expected_symbols() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/musasplat.h");
    let text = std::fs::read_to_string(&header).expect("cbindgen header missing");
    for symbol in [
        "musasplat_version",
        "musasplat_last_error_message",
        "musasplat_scene_generate",
        "musasplat_train",
        "musasplat_eval",
        "musasplat_reconstruct",
        "musasplat_reconstruction_render",
        "musasplat_reconstruction_free",
        "MusaSplatStatus",
        "MusaSplatReconstruction",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}");
    }
    assert!(text.contains("MUSASPLAT_OK"));
}
