use musasplat::heads::HeadConfig;
use musasplat::model::{ModelConfig, Aggregation};
use musasplat::run::{train_run, RunConfig, TrainOptions, Stage1Config};
use musasplat::scene::{generate_scene, SceneSpec};
use musasplat::train::OptimConfig;
use musasplat::vit::ViTConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let s1_iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    let s2_iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let s2_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let offset: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let out: String = args.get(6).cloned().unwrap_or_else(|| "/tmp/musasplat_smoke".into());
    let scene = generate_scene(&SceneSpec { image_size: size, ..Default::default() }).unwrap();
    println!("scene overlap {:.3}", scene.overlap.mean);
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        image_size: size,
        seed: 1,
        vit: ViTConfig::default(),
        head: HeadConfig { offset_scale: offset, ..Default::default() },
        adapter_enabled: true,
        aggregation: Aggregation::Ffa,
        ..Default::default()
    };
    cfg.stage1 = Stage1Config { iterations: s1_iters, learning_rate: 3e-3 };
    cfg.optim = OptimConfig { learning_rate: s2_lr, iterations: s2_iters, ..Default::default() };
    cfg.metrics_every = 50;
    cfg.checkpoint_every = 0;
    let opts = TrainOptions { early_stop_train_psnr: Some(30.0), quiet: false };
    let t0 = std::time::Instant::now();
    let report = train_run(&cfg, &scene, &out, &opts).unwrap();
    println!("total {:.1}s  train psnr {:.2} dB  holdout {:.2} dB  gaussians {}",
        t0.elapsed().as_secs_f64(), report.mean_train_psnr_db, report.mean_holdout_psnr_db, report.gaussian_count);
}
