use musasplat::run::{train_run, RunConfig, Stage1Config, TrainOptions};
use musasplat::scene::{generate_scene, SceneSpec};
use musasplat::train::OptimConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let s1: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(800);
    let s2: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let presets: Vec<String> = args.get(4).map(|s| s.split(',').map(|x| x.to_string()).collect())
        .unwrap_or_else(|| vec!["full".into(), "no_aggregator".into(), "no_adapter".into(), "mini_grid".into()]);
    let scene = generate_scene(&SceneSpec { image_size: size, ..Default::default() }).unwrap();
    println!("overlap {:.3}", scene.overlap.mean);
    for preset in &presets {
        let mut psnrs = vec![];
        for seed in [1u64, 2, 3] {
            let mut cfg = RunConfig::preset(preset).unwrap();
            cfg.model.image_size = size;
            cfg.model.seed = seed;
            cfg.stage1 = Stage1Config { iterations: s1, learning_rate: 3e-3 };
            cfg.optim = OptimConfig { learning_rate: 2e-3, iterations: s2, ..Default::default() };
            cfg.metrics_every = 1000;
            cfg.checkpoint_every = 0;
            let out = std::env::temp_dir().join(format!("musasplat_abl_{preset}_{seed}"));
            let report = train_run(&cfg, &scene, &out, &TrainOptions { quiet: true, ..Default::default() }).unwrap();
            psnrs.push(report.mean_train_psnr_db);
        }
        let mut sorted = psnrs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("{preset:<14} median {:.3}  all {:?}", sorted[1], psnrs.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
}
