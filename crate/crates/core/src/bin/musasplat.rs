//! Command-line entry points: synthetic scene generation, training,
//! evaluation, the aggregation benchmark, gradient-check suites and report
//! aggregation.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use musasplat::bench::{bench_aggregation, summarize, write_csv, BenchConfig, Strategy};
use musasplat::run::{eval_run, train_run, RunConfig, TrainOptions};
use musasplat::scene::{generate_scene, load_scene, save_scene, SceneSpec};
use std::path::PathBuf;

/// Output root used when a command's --out is relative: $MUSASPLAT_OUT or ".".
fn out_root() -> PathBuf {
    std::env::var_os("MUSASPLAT_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_out(path: &PathBuf) -> PathBuf {
    if path.is_absolute() {
        path.clone()
    } else {
        out_root().join(path)
    }
}

#[derive(Parser)]
#[command(
    name = "musasplat",
    about = "Pose-free sparse-view 3D Gaussian splatting, desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view scene with known geometry.
    GenScene(GenSceneArgs),
    /// Train on a scene directory (two stages: point head, then Gaussians).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a scene (train + held-out views).
    Eval(EvalArgs),
    /// Benchmark single-pass fusion against the sequential memory bank.
    BenchAgg(BenchArgs),
    /// Run the finite-difference gradient suites.
    GradCheck,
    /// Aggregate run reports into a markdown summary.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of training cameras on the ring.
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 1)]
    holdout: usize,
    #[arg(long, default_value_t = 22.0)]
    azimuth_sep: f64,
    #[arg(long, default_value_t = 2.6)]
    radius: f64,
    #[arg(long, default_value_t = 18.0)]
    elevation: f64,
    /// Warn when the achieved mean overlap misses this target.
    #[arg(long)]
    overlap_target: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory produced by gen-scene.
    #[arg(long)]
    scene: PathBuf,
    /// Run output directory (checkpoints, logs, report).
    #[arg(long)]
    out: PathBuf,
    /// Ablation preset: full, no_adapter, no_aggregator, memory_bank,
    /// no_aug, mini_grid.
    #[arg(long, default_value = "full")]
    preset: String,
    /// JSON run-config file; overrides the preset entirely.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    stage1_iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop stage 2 once mean train PSNR reaches this (dB).
    #[arg(long)]
    early_stop_psnr: Option<f64>,
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file (next to its run_config.json).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated view counts.
    #[arg(long, default_value = "2,3,5,8")]
    views: String,
    /// Comma-separated strategies (ffa, memory-bank).
    #[arg(long, default_value = "ffa,memory-bank")]
    strategies: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 9)]
    reps: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories containing report.json files.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Markdown output path (defaults to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_gen_scene(args: GenSceneArgs) -> Result<()> {
    let spec = SceneSpec {
        seed: args.seed,
        image_size: args.size,
        n_views: args.views,
        n_holdout: args.holdout,
        ring_radius: args.radius,
        elevation_deg: args.elevation,
        azimuth_separation_deg: args.azimuth_sep,
        target_overlap: args.overlap_target,
        ..Default::default()
    };
    let scene = generate_scene(&spec)?;
    let out = resolve_out(&args.out);
    save_scene(&scene, &out)?;
    println!(
        "scene written to {} ({} train + {} holdout views, mean overlap {:.3})",
        out.display(),
        args.views,
        args.holdout,
        scene.overlap.mean
    );
    if let Some(w) = &scene.overlap.warning {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let json = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&json)?
        }
        None => RunConfig::preset(&args.preset)?,
    };
    if let Some(it) = args.iterations {
        cfg.optim.iterations = it;
    }
    if let Some(it) = args.stage1_iterations {
        cfg.stage1.iterations = it;
    }
    if let Some(lr) = args.learning_rate {
        cfg.optim.learning_rate = lr;
    }
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    let scene = load_scene(&args.scene)?;
    if cfg.model.image_size != scene.spec.image_size {
        cfg.model.image_size = scene.spec.image_size;
    }
    let out = resolve_out(&args.out);
    let options = TrainOptions {
        early_stop_train_psnr: args.early_stop_psnr,
        quiet: args.quiet,
    };
    let report = train_run(&cfg, &scene, &out, &options)?;
    println!(
        "run `{}` finished: {} stage-2 iterations, train {:.2} dB / holdout {:.2} dB, report at {}",
        report.label,
        report.stage2_iterations,
        report.mean_train_psnr_db,
        report.mean_holdout_psnr_db,
        out.join("report.json").display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let out = resolve_out(&args.out);
    let report = eval_run(&args.checkpoint, &scene, &out)?;
    println!(
        "eval: train {:.2} dB / {:.4} ssim, holdout {:.2} dB / {:.4} ssim ({} gaussians)",
        report.mean_train_psnr_db,
        report.mean_train_ssim,
        report.mean_holdout_psnr_db,
        report.mean_holdout_ssim,
        report.gaussian_count
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let views: Vec<usize> = args
        .views
        .split(',')
        .map(|s| s.trim().parse::<usize>().context("parsing --views"))
        .collect::<Result<_>>()?;
    let mut strategies = Vec::new();
    for s in args.strategies.split(',') {
        match s.trim() {
            "ffa" => strategies.push(Strategy::Ffa),
            "memory-bank" => strategies.push(Strategy::MemoryBank),
            other => bail!("unknown strategy {other}"),
        }
    }
    let cfg = BenchConfig {
        tokens_per_view: args.tokens,
        channels: args.channels,
        reps: args.reps,
        ..Default::default()
    };
    let rows = bench_aggregation(&views, &strategies, &cfg)?;
    let out = resolve_out(&args.out);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_csv(&rows, &out)?;
    print!("{}", summarize(&rows));
    println!("csv written to {}", out.display());
    Ok(())
}

fn cmd_grad_check() -> Result<()> {
    use musasplat::diff::{finite_difference_check_multi, DiffArray};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let random = |shape: &[usize], rng: &mut ChaCha8Rng| -> DiffArray {
        let n: usize = shape.iter().product();
        DiffArray::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    };
    let mut failures = 0;

    // adapter layer
    {
        let mut store = musasplat::diff::ParamStore::new();
        let cfg = musasplat::musa::MusaConfig {
            reduction_ratio: 2,
            ..Default::default()
        };
        let layer = musasplat::musa::MusaLayer::register(&mut store, "adapter", 8, &cfg, &mut rng);
        layer.randomize_all(&mut store, &mut rng, 0.3);
        let x = random(&[16, 8], &mut rng);
        let report = finite_difference_check_multi(&[x], 1e-5, |g, ids| {
            let out = layer.forward(g, &store, ids[0], 4, 4);
            let sq = g.mul(out, out);
            (g.sum_all(sq), 0)
        });
        let ok = report.passes(1e-4);
        failures += usize::from(!ok);
        println!(
            "{} adapter layer: max rel err {:.3e} over {} coords",
            if ok { "PASS" } else { "FAIL" },
            report.max_rel_err,
            report.checked
        );
    }

    // aggregator fuse
    {
        let mut store = musasplat::diff::ParamStore::new();
        let cfg = musasplat::ffa::FfaConfig::default();
        let ffa = musasplat::ffa::FfaState::register(&mut store, 8, &cfg, &mut rng);
        let inputs: Vec<DiffArray> = (0..3).map(|_| random(&[4, 8], &mut rng)).collect();
        let report = finite_difference_check_multi(&inputs, 1e-5, |g, ids| {
            let views: Vec<musasplat::vit::TokenStream> = ids
                .iter()
                .enumerate()
                .map(|(view, &node)| musasplat::vit::TokenStream {
                    node,
                    view,
                    grid_h: 2,
                    grid_w: 2,
                    channels: 8,
                })
                .collect();
            let out = ffa.fuse(g, &store, &views, &cfg).unwrap();
            let cat: Vec<_> = out.streams.iter().map(|s| s.node).collect();
            let all = g.concat(&cat, 0);
            let sq = g.mul(all, all);
            let fp = out.boundary.iter().fold(0u64, |a, &b| (a << 1) | u64::from(b));
            (g.sum_all(sq), fp)
        });
        let ok = report.passes(1e-4);
        failures += usize::from(!ok);
        println!(
            "{} aggregator fuse: max rel err {:.3e} over {} coords",
            if ok { "PASS" } else { "FAIL" },
            report.max_rel_err,
            report.checked
        );
    }

    // renderer
    {
        use musasplat::gaussian::{GaussianPrimitive, GaussianSet};
        use musasplat::linalg::quat_normalize;
        let mut set = GaussianSet::default();
        for _ in 0..3 {
            set.primitives.push(GaussianPrimitive {
                mean: [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(1.5..3.0),
                ],
                opacity_logit: rng.gen_range(-1.0..1.0),
                log_scale: [rng.gen_range(-3.0..-1.5); 3],
                rotation: quat_normalize([
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]),
                sh: [0.2; 12],
            });
        }
        let (means, logits, scales, quats, shs) = musasplat::splat::pack_gaussians(&set);
        let n = set.len();
        let size = 12;
        let intr = musasplat::pose::Intrinsics::from_fov(size, 50.0_f64.to_radians());
        let settings = musasplat::splat::RenderSettings::new(size, size);
        let target: Vec<f64> = (0..size * size * 3)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let inputs = vec![
            DiffArray::new(vec![n, 3], means),
            DiffArray::new(vec![n], logits),
            DiffArray::new(vec![n, 3], scales),
            DiffArray::new(vec![n, 4], quats),
            DiffArray::new(vec![n, 12], shs),
        ];
        let report = finite_difference_check_multi(&inputs, 1e-5, |g, ids| {
            let out = musasplat::splat::render_diff(
                g,
                ids[0],
                ids[1],
                ids[2],
                ids[3],
                ids[4],
                &musasplat::pose::CameraPose::identity(),
                &intr,
                &settings,
            );
            let tgt = g.constant(vec![size, size, 3], target.clone());
            (g.mse(out.image, tgt), out.aux.sort_fingerprint)
        });
        let ok = report.passes(1e-3);
        failures += usize::from(!ok);
        println!(
            "{} renderer: max rel err {:.3e} over {} coords ({} skipped)",
            if ok { "PASS" } else { "FAIL" },
            report.max_rel_err,
            report.checked,
            report.skipped
        );
    }
    println!("per-op suites run under `cargo test`; this covers the composed graphs");
    if failures > 0 {
        bail!("{failures} gradient suites failed");
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut md = String::from("# Run summary\n\n");
    md.push_str("| run | label | stage2 iters | train PSNR (dB) | train SSIM | holdout PSNR (dB) | gaussians | wall (s) |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for dir in &args.runs {
        let path = dir.join("report.json");
        let json = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let r: musasplat::run::TrainReport = serde_json::from_str(&json)?;
        md.push_str(&format!(
            "| {} | {} | {} | {:.2} | {:.4} | {:.2} | {} | {:.0} |\n",
            dir.display(),
            r.label,
            r.stage2_iterations,
            r.mean_train_psnr_db,
            r.mean_train_ssim,
            r.mean_holdout_psnr_db,
            r.gaussian_count,
            r.wall_seconds
        ));
    }
    match &args.out {
        Some(path) => {
            let out = resolve_out(path);
            std::fs::write(&out, &md)?;
            println!("report written to {}", out.display());
        }
        None => print!("{md}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenScene(args) => cmd_gen_scene(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::BenchAgg(args) => cmd_bench(args),
        Command::GradCheck => cmd_grad_check(),
        Command::Report(args) => cmd_report(args),
    }
}
