//! Training and evaluation orchestration: the two-stage schedule (point head
//! first, then frozen-geometry Gaussian training), viewpoint augmentation
//! preprocessing, metrics logging and report emission.

use crate::augment::{interpolate_pose_chain, make_synthetic_views, AugmentConfig, SyntheticView};
use crate::diff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::img::{tile_grid, Image};
use crate::metrics::{psnr, ssim};
use crate::model::{parameter_report, Aggregation, Model, ModelConfig, ParameterReport};
use crate::perceptual::{PerceptualKind, PerceptualProxy};
use crate::pointmap::PointCloud;
use crate::pose::{pose_compose, pose_inverse, CameraPose};
use crate::scene::Scene;
use crate::splat::{render_diff, RenderSettings};
use crate::train::{clip_grad_norm, rgb_loss, total_loss, AdamW, LossConfig, OptimConfig, StepStats};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Weight of the boundary-detector entropy regularizer.
const BOUNDARY_ENTROPY_WEIGHT: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            iterations: 2000,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub label: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub stage1: Stage1Config,
    pub augment: AugmentConfig,
    pub checkpoint_every: usize,
    pub metrics_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            label: "full".to_string(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            stage1: Stage1Config::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 500,
            metrics_every: 25,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) {
        self.model.validate();
        self.loss.validate();
        self.optim.validate();
        self.augment.validate();
    }

    /// Named ablation presets mirroring the component study switches.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.label = name.to_string();
        match name {
            "full" => {}
            "no_adapter" => cfg.model.adapter_enabled = false,
            "no_aggregator" => cfg.model.aggregation = Aggregation::None,
            "memory_bank" => cfg.model.aggregation = Aggregation::MemoryBank,
            "no_aug" => cfg.augment.enabled = false,
            "mini_grid" => cfg.model.musa.mini_grid_enabled = true,
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset {other}; expected one of full, no_adapter, no_aggregator, memory_bank, no_aug, mini_grid"
                )))
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop stage 2 early once mean train-view PSNR reaches this.
    pub early_stop_train_psnr: Option<f64>,
    /// Suppress stdout progress.
    pub quiet: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub label: String,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub final_loss: f64,
    pub train_view_metrics: Vec<ViewMetrics>,
    pub mean_train_psnr_db: f64,
    pub mean_train_ssim: f64,
    pub holdout_view_metrics: Vec<ViewMetrics>,
    pub mean_holdout_psnr_db: f64,
    pub augmentation_active: bool,
    pub synthetic_views: usize,
    pub gaussian_count: usize,
    pub aggregator_invocations_per_forward: u64,
    pub memory_bank_invocations_per_forward: u64,
    pub parameter_report: ParameterReport,
    pub wall_seconds: f64,
}

struct JsonlLogger {
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl JsonlLogger {
    fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlLogger {
            file: Some(std::io::BufWriter::new(file)),
        })
    }

    fn log(&mut self, value: &serde_json::Value) {
        if let Some(f) = &mut self.file {
            let _ = serde_json::to_writer(&mut *f, value);
            let _ = writeln!(f);
            let _ = f.flush();
        }
    }
}

fn render_settings(size: usize) -> RenderSettings {
    RenderSettings::new(size, size)
}

/// Renders every pose from packed Gaussian nodes inside `g`.
#[allow(clippy::too_many_arguments)]
fn render_views(
    g: &mut Graph,
    nodes: &crate::heads::GaussianNodes,
    poses: &[CameraPose],
    intr: &crate::pose::Intrinsics,
    settings: &RenderSettings,
) -> Vec<NodeId> {
    poses
        .iter()
        .map(|pose| {
            render_diff(
                g,
                nodes.means,
                nodes.opacity_logits,
                nodes.log_scales,
                nodes.rotations,
                nodes.sh,
                pose,
                intr,
                settings,
            )
            .image
        })
        .collect()
}

fn image_metrics(g: &Graph, render: NodeId, target: &Image, view: usize) -> Result<ViewMetrics> {
    let s = g.shape(render);
    let img = Image::from_data(s[0], s[1], g.values(render).to_vec());
    Ok(ViewMetrics {
        view,
        psnr_db: psnr(&img, target)?,
        ssim: ssim(&img, target)?,
    })
}

/// Stage 1: point-head training against the scene's ground-truth geometry.
fn run_stage1(
    model: &mut Model,
    scene: &Scene,
    cfg: &RunConfig,
    log: &mut JsonlLogger,
    quiet: bool,
) -> Result<()> {
    model.freeze_for_point_head_training();
    let images: Vec<Image> = scene.train_views().iter().map(|v| v.image.clone()).collect();
    let gt_canonical: Vec<Vec<f64>> = scene
        .train_views()
        .iter()
        .map(|v| v.pointmap_canonical.clone())
        .collect();
    let gt_self: Vec<Vec<f64>> = scene
        .train_views()
        .iter()
        .map(|v| v.pointmap_self.clone())
        .collect();
    let mut opt = AdamW::new(&OptimConfig {
        learning_rate: cfg.stage1.learning_rate,
        ..cfg.optim.clone()
    });
    let n_pix = scene.spec.image_size * scene.spec.image_size;
    for it in 0..cfg.stage1.iterations {
        let t0 = Instant::now();
        model.store.zero_grads();
        let mut g = Graph::new();
        let (decoded, _) = model.backbone_forward(&mut g, &images)?;
        let views = model.point_head_forward(&mut g, &decoded)?;
        let mut acc: Option<NodeId> = None;
        for (vi, view) in views.iter().enumerate() {
            let gt_c = g.constant(vec![n_pix, 3], gt_canonical[vi].clone());
            let gt_s = g.constant(vec![n_pix, 3], gt_self[vi].clone());
            let lc = g.mse(view.canonical, gt_c);
            let ls = g.mse(view.self_frame, gt_s);
            let sum = g.add(lc, ls);
            acc = Some(match acc {
                None => sum,
                Some(a) => g.add(a, sum),
            });
        }
        let loss = g.scale(acc.unwrap(), 1.0 / images.len() as f64);
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Training(format!(
                "stage 1 loss became non-finite at iteration {it}"
            )));
        }
        let grads = g.backward(loss);
        model.store.accumulate(&g, &grads);
        let (pre, post) = clip_grad_norm(&mut model.store, cfg.optim.clip_norm);
        opt.step(&mut model.store);
        if it % cfg.metrics_every == 0 || it + 1 == cfg.stage1.iterations {
            log.log(&serde_json::json!({
                "stage": 1,
                "iteration": it,
                "loss": loss_val,
                "grad_norm_pre_clip": pre,
                "grad_norm_post_clip": post,
                "wall_ms": t0.elapsed().as_secs_f64() * 1e3,
            }));
            if !quiet {
                println!("[stage1 {it:>5}] pointmap loss {loss_val:.6}");
            }
        }
    }
    Ok(())
}

struct Stage2Inputs {
    images: Vec<Image>,
    mean_bases: Vec<Vec<f64>>,
    train_render_poses: Vec<CameraPose>,
    synthetic: Vec<SyntheticView>,
    aug_active: bool,
}

/// Geometry preprocessing between the stages: snapshot pointmaps and poses
/// from the fixed point head, build the cloud, rasterize synthetic targets.
fn prepare_stage2(model: &Model, scene: &Scene, cfg: &RunConfig) -> Result<Stage2Inputs> {
    let train_views = scene.train_views();
    let images: Vec<Image> = train_views.iter().map(|v| v.image.clone()).collect();
    let geom = model.infer_geometry(&images)?;
    let size = scene.spec.image_size;

    let aug_active = cfg.augment.active(Some(scene.overlap.mean)) && train_views.len() >= 2;
    let mut synthetic = Vec::new();
    if aug_active {
        let mut cloud = PointCloud::default();
        for (vi, view) in train_views.iter().enumerate() {
            let pm = &geom.pointmaps[vi];
            for pi in 0..size * size {
                cloud.push(
                    [pm[pi * 3], pm[pi * 3 + 1], pm[pi * 3 + 2]],
                    view.image.get(pi / size, pi % size),
                );
            }
        }
        let interp = interpolate_pose_chain(&geom.render_poses, cfg.augment.k);
        synthetic = make_synthetic_views(
            &cloud,
            &interp,
            &scene.intrinsics,
            &render_settings(size),
        )?;
    }

    let mut all_images = images;
    let mut mean_bases = geom.pointmaps.clone();
    for sv in &synthetic {
        all_images.push(sv.image.clone());
        mean_bases.push(sv.mean_base.clone());
    }
    Ok(Stage2Inputs {
        images: all_images,
        mean_bases,
        train_render_poses: geom.render_poses,
        synthetic,
        aug_active,
    })
}

/// One stage-2 optimizer step; returns stats and the per-train-view renders.
fn stage2_step(
    model: &mut Model,
    inputs: &Stage2Inputs,
    scene: &Scene,
    cfg: &RunConfig,
    proxy: Option<&PerceptualProxy>,
    opt: &mut AdamW,
) -> Result<(StepStats, Vec<Image>)> {
    let t0 = Instant::now();
    let timing = std::env::var_os("MUSASPLAT_TIMING").is_some();
    let mut marks: Vec<(&str, f64)> = Vec::new();
    let mark = |label: &'static str, marks: &mut Vec<(&str, f64)>| {
        if timing {
            marks.push((label, t0.elapsed().as_secs_f64() * 1e3));
        }
    };
    let size = scene.spec.image_size;
    let settings = render_settings(size);
    let train_views = scene.train_views();
    model.store.zero_grads();

    let mut g = Graph::new();
    let (decoded, entropy) = model.backbone_forward(&mut g, &inputs.images)?;
    mark("backbone", &mut marks);
    let nodes = model.gaussian_head_forward(&mut g, &decoded, &inputs.images, &inputs.mean_bases)?;
    mark("head", &mut marks);

    // rgb loss over the real train views at their recovered poses
    let renders = render_views(
        &mut g,
        &nodes,
        &inputs.train_render_poses,
        &scene.intrinsics,
        &settings,
    );
    let mut rgb_acc: Option<NodeId> = None;
    for (render, view) in renders.iter().zip(&train_views) {
        let tgt = g.constant(vec![size, size, 3], view.image.data.clone());
        let term = rgb_loss(&mut g, *render, tgt, &cfg.loss, proxy);
        rgb_acc = Some(match rgb_acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    let rgb = g.scale(rgb_acc.unwrap(), 1.0 / train_views.len() as f64);
    let rgb_val = g.scalar_value(rgb);
    mark("rgb_renders", &mut marks);

    // multi-view consistency over synthetic targets
    let aug = if inputs.aug_active && !inputs.synthetic.is_empty() {
        let poses: Vec<CameraPose> = inputs.synthetic.iter().map(|s| s.pose).collect();
        let aug_renders = render_views(&mut g, &nodes, &poses, &scene.intrinsics, &settings);
        let targets: Vec<&Image> = inputs.synthetic.iter().map(|s| &s.image).collect();
        Some(crate::augment::aug_loss(&mut g, &aug_renders, &targets)?)
    } else {
        None
    };
    let aug_val = aug.map_or(0.0, |a| g.scalar_value(a));
    mark("aug_renders", &mut marks);

    let mut loss = total_loss(&mut g, rgb, aug, &cfg.loss);
    if let Some(e) = entropy {
        let reg = g.scale(e, BOUNDARY_ENTROPY_WEIGHT);
        loss = g.add(loss, reg);
    }
    let loss_val = g.scalar_value(loss);
    if !loss_val.is_finite() {
        return Err(Error::Training(format!(
            "stage 2 loss became non-finite (rgb {rgb_val}, aug {aug_val})"
        )));
    }
    let grads = g.backward(loss);
    mark("backward", &mut marks);
    model.store.accumulate(&g, &grads);
    let (pre, post) = clip_grad_norm(&mut model.store, cfg.optim.clip_norm);
    opt.step(&mut model.store);
    mark("optimizer", &mut marks);
    if timing {
        let mut prev = 0.0;
        let mut line = String::from("timing:");
        for (label, t) in &marks {
            line.push_str(&format!(" {label} {:.0}ms", t - prev));
            prev = *t;
        }
        eprintln!("{line}");
    }

    let rendered: Vec<Image> = renders
        .iter()
        .map(|&r| Image::from_data(size, size, g.values(r).to_vec()))
        .collect();
    Ok((
        StepStats {
            loss: loss_val,
            rgb_loss: rgb_val,
            aug_loss: aug_val,
            grad_norm_pre_clip: pre,
            grad_norm_post_clip: post,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        },
        rendered,
    ))
}

/// Renders final outputs and computes train/holdout metrics.
fn final_metrics(
    model: &Model,
    inputs: &Stage2Inputs,
    scene: &Scene,
) -> Result<(Vec<ViewMetrics>, Vec<ViewMetrics>, Vec<Image>, Vec<Image>, usize)> {
    let size = scene.spec.image_size;
    let settings = render_settings(size);
    let mut g = Graph::new();
    let (decoded, _) = model.backbone_forward(&mut g, &inputs.images)?;
    let nodes = model.gaussian_head_forward(&mut g, &decoded, &inputs.images, &inputs.mean_bases)?;
    let count = nodes.count;

    let train_views = scene.train_views();
    let renders = render_views(
        &mut g,
        &nodes,
        &inputs.train_render_poses,
        &scene.intrinsics,
        &settings,
    );
    let mut train_metrics = Vec::new();
    let mut train_images = Vec::new();
    for (vi, (&r, view)) in renders.iter().zip(&train_views).enumerate() {
        train_metrics.push(image_metrics(&g, r, &view.image, vi)?);
        train_images.push(Image::from_data(size, size, g.values(r).to_vec()));
    }

    // held-out views: canonical -> world via the known view-0 pose, then into
    // each held-out camera (evaluation only; the model never sees poses)
    let pose0 = train_views[0].pose;
    let holdout = scene.holdout_views();
    let mut holdout_metrics = Vec::new();
    let mut holdout_images = Vec::new();
    for (hi, view) in holdout.iter().enumerate() {
        let render_pose = pose_compose(&view.pose, &pose_inverse(&pose0));
        let r = render_views(&mut g, &nodes, &[render_pose], &scene.intrinsics, &settings)[0];
        holdout_metrics.push(image_metrics(&g, r, &view.image, hi)?);
        holdout_images.push(Image::from_data(size, size, g.values(r).to_vec()));
    }
    Ok((
        train_metrics,
        holdout_metrics,
        train_images,
        holdout_images,
        count,
    ))
}

fn mean_of(metrics: &[ViewMetrics], f: impl Fn(&ViewMetrics) -> f64) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(f).sum::<f64>() / metrics.len() as f64
}

/// Full two-stage training on a scene; writes logs, checkpoints and the
/// final report under `out_dir`.
pub fn train_run(
    cfg: &RunConfig,
    scene: &Scene,
    out_dir: impl AsRef<Path>,
    options: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate();
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(
        out_dir.join("run_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )
    .map_err(|e| Error::io(out_dir, e))?;

    let t_start = Instant::now();
    let mut log = JsonlLogger::create(&out_dir.join("metrics.jsonl"))?;
    let mut model = Model::build(&cfg.model);

    run_stage1(&mut model, scene, cfg, &mut log, options.quiet)?;

    model.freeze_for_gaussian_training();
    let inputs = prepare_stage2(&model, scene, cfg)?;
    if cfg.augment.debug_dump && !inputs.synthetic.is_empty() {
        crate::augment::dump_synthetic_views(&inputs.synthetic, &out_dir.join("synthetic"))?;
    }

    let proxy = (cfg.loss.perceptual == PerceptualKind::FixedRandomConv && cfg.loss.lambda_lpips > 0.0)
        .then(PerceptualProxy::new);
    let mut opt = AdamW::new(&cfg.optim);
    let train_targets: Vec<&Image> = scene.train_views().iter().map(|v| &v.image).collect();
    let mut iterations_run = 0;
    let mut last_loss = f64::NAN;
    for it in 0..cfg.optim.iterations {
        let step = stage2_step(&mut model, &inputs, scene, cfg, proxy.as_ref(), &mut opt);
        let (stats, rendered) = match step {
            Ok(v) => v,
            Err(e) => {
                let dump = serde_json::json!({
                    "iteration": it,
                    "error": e.to_string(),
                    "last_loss": last_loss,
                });
                let _ = std::fs::write(
                    out_dir.join("abort_dump.json"),
                    serde_json::to_string_pretty(&dump).unwrap_or_default(),
                );
                return Err(e);
            }
        };
        iterations_run = it + 1;
        last_loss = stats.loss;
        if it % cfg.metrics_every == 0 || it + 1 == cfg.optim.iterations {
            let train_psnr = rendered
                .iter()
                .zip(&train_targets)
                .map(|(r, t)| psnr(r, t))
                .collect::<Result<Vec<f64>>>()?;
            let mean_psnr = train_psnr.iter().sum::<f64>() / train_psnr.len() as f64;
            log.log(&serde_json::json!({
                "stage": 2,
                "iteration": it,
                "loss": stats.loss,
                "rgb_loss": stats.rgb_loss,
                "aug_loss": stats.aug_loss,
                "grad_norm_pre_clip": stats.grad_norm_pre_clip,
                "grad_norm_post_clip": stats.grad_norm_post_clip,
                "wall_ms": stats.wall_ms,
                "train_psnr_db": mean_psnr,
            }));
            if !options.quiet {
                println!(
                    "[stage2 {it:>5}] loss {:.6} rgb {:.6} aug {:.6} psnr {:.2} dB ({:.0} ms)",
                    stats.loss, stats.rgb_loss, stats.aug_loss, mean_psnr, stats.wall_ms
                );
            }
            if let Some(target) = options.early_stop_train_psnr {
                if mean_psnr >= target {
                    if !options.quiet {
                        println!("early stop: train psnr {mean_psnr:.2} dB >= {target:.2} dB");
                    }
                    break;
                }
            }
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            model.save_checkpoint(out_dir.join(format!("checkpoint_{:06}.ckpt", it + 1)))?;
        }
    }
    model.save_checkpoint(out_dir.join("final.ckpt"))?;

    // counters for one representative forward pass
    if let Some(ffa) = &model.ffa {
        ffa.reset_counters();
    }
    if let Some(bank) = &model.memory_bank {
        bank.reset_counters();
    }
    let (train_metrics, holdout_metrics, train_images, holdout_images, gaussian_count) =
        final_metrics(&model, &inputs, scene)?;
    let ffa_invocations = model.ffa.as_ref().map_or(0, |f| f.invocations.get());
    let bank_invocations = model
        .memory_bank
        .as_ref()
        .map_or(0, |b| b.fusion_invocations.get());

    // comparison grid: renders on top, targets below (train then holdout)
    let mut panels: Vec<&Image> = train_images.iter().collect();
    panels.extend(holdout_images.iter());
    let mut targets: Vec<&Image> = train_targets.clone();
    let holdout_targets: Vec<&Image> = scene.holdout_views().iter().map(|v| &v.image).collect();
    targets.extend(holdout_targets);
    let cols = panels.len().max(1);
    panels.extend(targets);
    let grid = tile_grid(&panels, cols);
    grid.save_png(out_dir.join("comparison_grid.png"))?;

    let report = TrainReport {
        label: cfg.label.clone(),
        stage1_iterations: cfg.stage1.iterations,
        stage2_iterations: iterations_run,
        final_loss: last_loss,
        mean_train_psnr_db: mean_of(&train_metrics, |m| m.psnr_db),
        mean_train_ssim: mean_of(&train_metrics, |m| m.ssim),
        train_view_metrics: train_metrics,
        mean_holdout_psnr_db: mean_of(&holdout_metrics, |m| m.psnr_db),
        holdout_view_metrics: holdout_metrics,
        augmentation_active: inputs.aug_active,
        synthetic_views: inputs.synthetic.len(),
        gaussian_count,
        aggregator_invocations_per_forward: ffa_invocations,
        memory_bank_invocations_per_forward: bank_invocations,
        parameter_report: parameter_report(&model.store),
        wall_seconds: t_start.elapsed().as_secs_f64(),
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )
    .map_err(|e| Error::io(out_dir, e))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub train_view_metrics: Vec<ViewMetrics>,
    pub mean_train_psnr_db: f64,
    pub mean_train_ssim: f64,
    pub holdout_view_metrics: Vec<ViewMetrics>,
    pub mean_holdout_psnr_db: f64,
    pub mean_holdout_ssim: f64,
    pub gaussian_count: usize,
}

/// Loads a checkpoint produced by [`train_run`] (next to its
/// run_config.json) and evaluates it on a scene.
pub fn eval_run(
    checkpoint: impl AsRef<Path>,
    scene: &Scene,
    out_dir: impl AsRef<Path>,
) -> Result<EvalReport> {
    let checkpoint = checkpoint.as_ref();
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let run_dir = checkpoint
        .parent()
        .ok_or_else(|| Error::invalid("checkpoint has no parent directory"))?;
    let cfg_path = run_dir.join("run_config.json");
    let cfg_json =
        std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: RunConfig = serde_json::from_str(&cfg_json)?;
    let mut model = Model::load_checkpoint(&cfg.model, checkpoint)?;
    model.freeze_for_gaussian_training();

    let inputs = prepare_stage2(&model, scene, &cfg)?;
    let (train_metrics, holdout_metrics, train_images, holdout_images, gaussian_count) =
        final_metrics(&model, &inputs, scene)?;

    let mut panels: Vec<&Image> = train_images.iter().collect();
    panels.extend(holdout_images.iter());
    let train_targets: Vec<&Image> = scene.train_views().iter().map(|v| &v.image).collect();
    let holdout_targets: Vec<&Image> = scene.holdout_views().iter().map(|v| &v.image).collect();
    let cols = panels.len().max(1);
    let mut all = panels;
    all.extend(train_targets);
    all.extend(holdout_targets);
    let grid = tile_grid(&all, cols);
    grid.save_png(out_dir.join("eval_grid.png"))?;

    let report = EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        mean_train_psnr_db: mean_of(&train_metrics, |m| m.psnr_db),
        mean_train_ssim: mean_of(&train_metrics, |m| m.ssim),
        train_view_metrics: train_metrics,
        mean_holdout_psnr_db: mean_of(&holdout_metrics, |m| m.psnr_db),
        mean_holdout_ssim: mean_of(&holdout_metrics, |m| m.ssim),
        holdout_view_metrics: holdout_metrics,
        gaussian_count,
    };
    std::fs::write(
        out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report)?,
    )
    .map_err(|e| Error::io(out_dir, e))?;
    Ok(report)
}
