//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with --nocapture). Tolerances are pinned in the
//! constants below.

use musasplat::diff::{finite_difference_check_multi, DiffArray, Graph, NodeId, ParamStore};
use musasplat::ffa::{FfaConfig, FfaState, MemoryBank};
use musasplat::gaussian::{GaussianPrimitive, GaussianSet};
use musasplat::img::Image;
use musasplat::linalg::quat_normalize;
use musasplat::model::{Aggregation, Model, ModelConfig};
use musasplat::musa::{MusaConfig, MusaLayer};
use musasplat::pose::{CameraPose, Intrinsics};
use musasplat::scene::{generate_scene, SceneSpec};
use musasplat::splat::{pack_gaussians, render, render_diff, RenderSettings};
use musasplat::vit::TokenStream;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

const OP_GRAD_TOL: f64 = 1e-4;
const RENDER_GRAD_TOL: f64 = 1e-3;
const FD_EPS: f64 = 1e-5;
const FFA_ORACLE_TOL: f64 = 1e-6;
const MASKED_WEIGHT_TOL: f64 = 1e-6;
const CONSERVATION_TOL: f64 = 1e-6;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "{} criterion {criterion}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn random_array(shape: &[usize], rng: &mut ChaCha8Rng) -> DiffArray {
    let n: usize = shape.iter().product();
    DiffArray::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Criterion 1: finite-difference gradient suite over every op, the composed
/// adapter, the aggregator fuse and the renderer, fp64, within 5 minutes.
#[test]
fn criterion_1_gradient_suite() {
    let t0 = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_op: f64 = 0.0;

    // elementary ops in one composed graph (each op also has a dedicated
    // unit check in the library tests)
    {
        let x = random_array(&[3, 4], &mut rng);
        let w = random_array(&[4, 4], &mut rng);
        let b = random_array(&[4], &mut rng);
        let report = finite_difference_check_multi(&[x, w, b], FD_EPS, |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            let y = g.add_bias(y, ids[2]);
            let y = g.gelu(y);
            let s = g.softmax(y, 1);
            let sg = g.sigmoid(s);
            let t = g.tanh(sg);
            let e = g.exp(t);
            let l = g.log(e);
            let sq = g.mul(l, l);
            (g.sum_all(sq), 0)
        });
        worst_op = worst_op.max(report.max_rel_err);
    }
    // convs + losses
    {
        let x = random_array(&[2, 5, 5], &mut rng);
        let wdw = random_array(&[2, 3, 3], &mut rng);
        let bdw = random_array(&[2], &mut rng);
        let wpw = random_array(&[3, 2], &mut rng);
        let bpw = random_array(&[3], &mut rng);
        let tgt = random_array(&[3, 5, 5], &mut rng);
        let report = finite_difference_check_multi(&[x, wdw, bdw, wpw, bpw, tgt], FD_EPS, |g, ids| {
            let c1 = g.conv2d_depthwise(ids[0], ids[1], ids[2], 3);
            let c2 = g.conv2d_pointwise(c1, ids[3], ids[4]);
            let m = g.mse(c2, ids[5]);
            let l1 = g.l1(c2, ids[5]);
            (g.add(m, l1), 0)
        });
        worst_op = worst_op.max(report.max_rel_err);
    }

    // composed adapter
    let worst_musa = {
        let mut store = ParamStore::new();
        let cfg = MusaConfig {
            reduction_ratio: 2,
            ..Default::default()
        };
        let layer = MusaLayer::register(&mut store, "adapter", 8, &cfg, &mut rng);
        layer.randomize_all(&mut store, &mut rng, 0.3);
        let x = random_array(&[16, 8], &mut rng);
        finite_difference_check_multi(&[x], FD_EPS, |g, ids| {
            let out = layer.forward(g, &store, ids[0], 4, 4);
            let sq = g.mul(out, out);
            (g.sum_all(sq), 0)
        })
        .max_rel_err
    };

    // aggregator fuse (boundary gate fingerprinted / stop-gradient)
    let worst_ffa = {
        let mut store = ParamStore::new();
        let cfg = FfaConfig::default();
        let ffa = FfaState::register(&mut store, 8, &cfg, &mut rng);
        let inputs: Vec<DiffArray> = (0..3).map(|_| random_array(&[4, 8], &mut rng)).collect();
        finite_difference_check_multi(&inputs, FD_EPS, |g, ids| {
            let views: Vec<TokenStream> = ids
                .iter()
                .enumerate()
                .map(|(view, &node)| TokenStream {
                    node,
                    view,
                    grid_h: 2,
                    grid_w: 2,
                    channels: 8,
                })
                .collect();
            let out = ffa.fuse(g, &store, &views, &cfg).unwrap();
            let cat: Vec<NodeId> = out.streams.iter().map(|s| s.node).collect();
            let all = g.concat(&cat, 0);
            let sq = g.mul(all, all);
            let fp = out.boundary.iter().fold(0u64, |a, &b| (a << 1) | u64::from(b));
            (g.sum_all(sq), fp)
        })
        .max_rel_err
    };

    // renderer (sort-order changes skipped via fingerprint)
    let (worst_render, skipped) = {
        let set = test_scene(3, &mut rng);
        let (means, logits, scales, quats, shs) = pack_gaussians(&set);
        let n = set.len();
        let size = 12;
        let intr = Intrinsics::from_fov(size, 50.0_f64.to_radians());
        let settings = RenderSettings::new(size, size);
        let target: Vec<f64> = (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let inputs = vec![
            DiffArray::new(vec![n, 3], means),
            DiffArray::new(vec![n], logits),
            DiffArray::new(vec![n, 3], scales),
            DiffArray::new(vec![n, 4], quats),
            DiffArray::new(vec![n, 12], shs),
        ];
        let report = finite_difference_check_multi(&inputs, FD_EPS, |g, ids| {
            let out = render_diff(
                g,
                ids[0],
                ids[1],
                ids[2],
                ids[3],
                ids[4],
                &CameraPose::identity(),
                &intr,
                &settings,
            );
            let tgt = g.constant(vec![size, size, 3], target.clone());
            (g.mse(out.image, tgt), out.aux.sort_fingerprint)
        });
        (report.max_rel_err, report.skipped)
    };

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = worst_op < OP_GRAD_TOL
        && worst_musa < OP_GRAD_TOL
        && worst_ffa < OP_GRAD_TOL
        && worst_render < RENDER_GRAD_TOL
        && elapsed < 300.0;
    verdict(
        "1 (gradient suite)",
        pass,
        &format!(
            "ops {worst_op:.2e}, adapter {worst_musa:.2e}, fuse {worst_ffa:.2e}, renderer {worst_render:.2e} ({skipped} sort-skips), {elapsed:.1}s"
        ),
    );
}

fn test_scene(n: usize, rng: &mut ChaCha8Rng) -> GaussianSet {
    let mut set = GaussianSet::default();
    for _ in 0..n {
        set.primitives.push(GaussianPrimitive {
            mean: [
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(1.5..3.5),
            ],
            opacity_logit: rng.gen_range(-1.5..1.5),
            log_scale: [
                rng.gen_range(-3.0..-1.5),
                rng.gen_range(-3.0..-1.5),
                rng.gen_range(-3.0..-1.5),
            ],
            rotation: quat_normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]),
            sh: {
                let mut sh = [0.0; 12];
                for (i, v) in sh.iter_mut().enumerate() {
                    *v = if i % 4 == 0 {
                        rng.gen_range(-0.5..0.5)
                    } else {
                        rng.gen_range(-0.05..0.05)
                    };
                }
                sh
            },
        });
    }
    set
}

/// Criterion 2: with zero-initialized adapter output projections the full
/// encoder equals the adapter-free encoder at the bit level.
#[test]
fn criterion_2_identity_at_init() {
    let scene = generate_scene(&SceneSpec {
        image_size: 32,
        ..Default::default()
    })
    .unwrap();
    let images: Vec<Image> = scene.train_views().iter().map(|v| v.image.clone()).collect();

    let base_cfg = ModelConfig {
        image_size: 32,
        seed: 11,
        ..Default::default()
    };
    let with_adapters = Model::build(&base_cfg);
    let without = Model::build(&ModelConfig {
        adapter_enabled: false,
        ..base_cfg
    });

    let mut g1 = Graph::new();
    let enc1 = with_adapters.encode(&mut g1, &images).unwrap();
    let mut g2 = Graph::new();
    let enc2 = without.encode(&mut g2, &images).unwrap();

    let mut all_equal = true;
    for (a, b) in enc1.iter().zip(&enc2) {
        let va = g1.values(a.node);
        let vb = g2.values(b.node);
        if va.len() != vb.len()
            || va.iter().zip(vb).any(|(x, y)| x.to_bits() != y.to_bits())
        {
            all_equal = false;
        }
    }
    verdict(
        "2 (identity at init)",
        all_equal,
        "adapter-present encoder output is bit-identical to adapter-free",
    );
}

/// Criterion 3: with q forced to 1, b = 0 and tau = 0, fuse matches a
/// brute-force scaled-dot-product cross-attention at V=3, L=16, C=32.
#[test]
fn criterion_3_ffa_oracle_equivalence() {
    let (v, l, c) = (3usize, 16usize, 32usize);
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut store = ParamStore::new();
    let cfg = FfaConfig {
        tau: 0.0,
        ..Default::default()
    };
    let ffa = FfaState::register(&mut store, c, &cfg, &mut rng);
    {
        let p = store.get_mut(ffa.quality_w);
        let mut w = vec![0.0; c];
        w[0] = 1000.0;
        p.values = Rc::new(w);
    }
    {
        let p = store.get_mut(ffa.boundary_b2);
        p.values = Rc::new(vec![-10.0]);
    }
    let mut g = Graph::new();
    let views: Vec<TokenStream> = (0..v)
        .map(|view| {
            let mut vals: Vec<f64> = (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for tok in 0..l {
                vals[tok * c] = vals[tok * c].abs() + 1.0; // saturate quality
            }
            TokenStream {
                node: g.input(&DiffArray::new(vec![l, c], vals)),
                view,
                grid_h: 4,
                grid_w: 4,
                channels: c,
            }
        })
        .collect();
    let out = ffa.fuse(&mut g, &store, &views, &cfg).unwrap();
    assert!(out
        .quality
        .iter()
        .all(|&q| g.values(q).iter().all(|&x| x == 1.0)));
    assert!(out.boundary.iter().all(|&b| !b));

    // brute-force oracle over raw parameter arrays
    let pv = |id| -> Vec<f64> { store.get(id).values.as_ref().clone() };
    let (wq, bq) = (pv(ffa.wq), pv(ffa.bq));
    let (wk, bk) = (pv(ffa.wk), pv(ffa.bk));
    let d = ffa.dim;
    let proj = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        let rows = x.len() / c;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for j in 0..d {
                let mut acc = b[j];
                for i in 0..c {
                    acc += x[r * c + i] * w[i * d + j];
                }
                out[r * d + j] = acc;
            }
        }
        out
    };
    let mut max_diff: f64 = 0.0;
    for i in 0..v {
        let x = g.values(views[i].node).to_vec();
        let mut kv = Vec::new();
        for j in (0..v).filter(|&j| j != i) {
            kv.extend_from_slice(g.values(views[j].node));
        }
        let lk = (v - 1) * l;
        let q = proj(&x, &wq, &bq);
        let k = proj(&kv, &wk, &bk);
        let got = g.values(out.attention[i]);
        for r in 0..l {
            let mut scores = vec![0.0; lk];
            for j in 0..lk {
                let mut dot = 0.0;
                for e in 0..d {
                    dot += q[r * d + e] * k[j * d + e];
                }
                scores[j] = dot / (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..lk {
                max_diff = max_diff.max((got[r * lk + j] - exps[j] / sum).abs());
            }
        }
    }
    verdict(
        "3 (FFA oracle equivalence)",
        max_diff < FFA_ORACLE_TOL,
        &format!("max attention diff vs brute force {max_diff:.2e}"),
    );
}

/// Criterion 4: a key token with q < tau receives total attention <= 1e-6
/// across all queries under the 1e-9 mask floor.
#[test]
fn criterion_4_masking() {
    let (v, l, c) = (3usize, 16usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut store = ParamStore::new();
    let cfg = FfaConfig {
        tau: 0.1,
        mask_floor: 1e-9,
        ..Default::default()
    };
    let ffa = FfaState::register(&mut store, c, &cfg, &mut rng);
    {
        let p = store.get_mut(ffa.quality_w);
        let mut w = vec![0.0; c];
        w[0] = 1.0;
        p.values = Rc::new(w);
    }
    {
        let p = store.get_mut(ffa.boundary_b2);
        p.values = Rc::new(vec![-10.0]);
    }
    let mut g = Graph::new();
    let victim_tok = 5usize;
    let views: Vec<TokenStream> = (0..v)
        .map(|view| {
            let mut vals: Vec<f64> = (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for tok in 0..l {
                vals[tok * c] = 0.0; // q = 0.5 >= tau
            }
            if view == 1 {
                vals[victim_tok * c] = -6.0; // q ~ 0.0025 < tau
            }
            TokenStream {
                node: g.input(&DiffArray::new(vec![l, c], vals)),
                view,
                grid_h: 4,
                grid_w: 4,
                channels: c,
            }
        })
        .collect();
    let out = ffa.fuse(&mut g, &store, &views, &cfg).unwrap();
    // view 1 is a key view for queries from views 0 and 2
    let mut worst_total: f64 = 0.0;
    for (qi, &attn_node) in out.attention.iter().enumerate() {
        if qi == 1 {
            continue;
        }
        let attn = g.values(attn_node);
        let lk = (v - 1) * l;
        // key columns are other views in ascending index order
        let col = if qi == 0 { victim_tok } else { l + victim_tok };
        let total: f64 = (0..l).map(|r| attn[r * lk + col]).sum();
        worst_total = worst_total.max(total);
    }
    verdict(
        "4 (masking)",
        worst_total <= MASKED_WEIGHT_TOL,
        &format!("masked key total attention {worst_total:.2e}"),
    );
}

/// Criterion 5: invocation counts (FFA = 1 for V in 2..=8, memory bank =
/// V-1) and FFA wall time strictly below the memory bank at V = 5.
#[test]
fn criterion_5_invocation_and_memory_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut store = ParamStore::new();
    let cfg = FfaConfig::default();
    let ffa = FfaState::register(&mut store, 64, &cfg, &mut rng);
    let bank = MemoryBank::register(&mut store, 64, &mut rng);
    let mut counters_ok = true;
    for v in 2..=8 {
        ffa.reset_counters();
        bank.reset_counters();
        let mut g = Graph::new();
        let views: Vec<TokenStream> = (0..v)
            .map(|view| {
                let vals: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
                TokenStream {
                    node: g.input(&DiffArray::new(vec![64, 64], vals)),
                    view,
                    grid_h: 8,
                    grid_w: 8,
                    channels: 64,
                }
            })
            .collect();
        ffa.fuse(&mut g, &store, &views, &cfg).unwrap();
        bank.fuse_sequential(&mut g, &store, &views).unwrap();
        counters_ok &= ffa.invocations.get() == 1;
        counters_ok &= bank.fusion_invocations.get() == (v as u64 - 1);
        counters_ok &= bank.peak_retained_tokens.get() == v * 64;
    }

    // wall time at V = 5 on the default toy token size, median of repeats
    let rows = musasplat::bench::bench_aggregation(
        &[5],
        &[musasplat::bench::Strategy::Ffa, musasplat::bench::Strategy::MemoryBank],
        &musasplat::bench::BenchConfig::default(),
    )
    .unwrap();
    let ffa_ms = rows.iter().find(|r| r.strategy == "ffa").unwrap().wall_time_ms;
    let bank_ms = rows
        .iter()
        .find(|r| r.strategy == "memory-bank")
        .unwrap()
        .wall_time_ms;
    let pass = counters_ok && ffa_ms < bank_ms;
    verdict(
        "5 (invocation/memory properties)",
        pass,
        &format!(
            "counters {} | V=5 wall time ffa {ffa_ms:.2} ms vs memory-bank {bank_ms:.2} ms ({:.2}x)",
            if counters_ok { "ok" } else { "wrong" },
            bank_ms / ffa_ms
        ),
    );
}

/// Serializes the two training-heavy criteria so wall-clock assertions are
/// not distorted by parallel test threads on small machines.
static TRAINING_GATE: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn toy_run_config(label: &str, seed: u64, size: usize, stage1: usize, stage2: usize) -> musasplat::run::RunConfig {
    use musasplat::run::{RunConfig, Stage1Config};
    use musasplat::train::OptimConfig;
    let mut cfg = RunConfig::preset(label).expect("preset");
    cfg.model.image_size = size;
    cfg.model.seed = seed;
    cfg.stage1 = Stage1Config {
        iterations: stage1,
        learning_rate: 3e-3,
    };
    cfg.optim = OptimConfig {
        learning_rate: 2e-3,
        iterations: stage2,
        ..Default::default()
    };
    cfg.metrics_every = 25;
    cfg.checkpoint_every = 0;
    cfg
}

/// Criterion 6: on a seeded 2-view 64x64 synthetic scene, the full
/// configuration (adapters + aggregator + augmentation) reaches train-view
/// PSNR >= 30 dB within 2000 stage-2 iterations in under 30 minutes.
#[test]
fn criterion_6_toy_overfit() {
    let _gate = TRAINING_GATE.lock().unwrap();
    let t0 = std::time::Instant::now();
    let scene = generate_scene(&SceneSpec::default()).unwrap(); // 64x64, 2 views
    let cfg = toy_run_config("full", 1, 64, 4000, 2000);
    assert!(cfg.model.adapter_enabled && cfg.model.aggregation == Aggregation::Ffa);
    assert!(cfg.augment.enabled);
    let out = std::env::temp_dir().join("musasplat_acceptance_overfit");
    let report = musasplat::run::train_run(
        &cfg,
        &scene,
        &out,
        &musasplat::run::TrainOptions {
            early_stop_train_psnr: Some(30.0),
            quiet: true,
        },
    )
    .unwrap();
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    let pass = report.mean_train_psnr_db >= 30.0
        && report.stage2_iterations <= 2000
        && minutes < 30.0;
    verdict(
        "6 (toy overfit)",
        pass,
        &format!(
            "train PSNR {:.2} dB after {} stage-2 iterations, {:.1} min (holdout {:.2} dB)",
            report.mean_train_psnr_db,
            report.stage2_iterations,
            minutes,
            report.mean_holdout_psnr_db
        ),
    );
}

/// Criterion 7: ablation ordering under an identical budget and seed set
/// (3 seeds, 32x32, 800+300 iterations): median final train PSNR satisfies
/// full > w/o-aggregator > w/o-adapter; the mini-grid branch changes the
/// median by less than 0.2 dB.
#[test]
fn criterion_7_ablation_ordering() {
    let _gate = TRAINING_GATE.lock().unwrap();
    let scene = generate_scene(&SceneSpec {
        image_size: 32,
        ..Default::default()
    })
    .unwrap();
    let median_for = |preset: &str| -> f64 {
        let mut psnrs: Vec<f64> = [1u64, 2, 3]
            .iter()
            .map(|&seed| {
                let cfg = toy_run_config(preset, seed, 32, 800, 300);
                let out = std::env::temp_dir()
                    .join(format!("musasplat_acceptance_abl_{preset}_{seed}"));
                musasplat::run::train_run(
                    &cfg,
                    &scene,
                    &out,
                    &musasplat::run::TrainOptions {
                        quiet: true,
                        ..Default::default()
                    },
                )
                .unwrap()
                .mean_train_psnr_db
            })
            .collect();
        psnrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        psnrs[1]
    };
    let full = median_for("full");
    let no_agg = median_for("no_aggregator");
    let no_adapter = median_for("no_adapter");
    let mini = median_for("mini_grid");
    let ordering = full > no_agg && no_agg > no_adapter;
    let mini_inert = (mini - full).abs() < 0.2;
    verdict(
        "7 (ablation ordering)",
        ordering && mini_inert,
        &format!(
            "median train PSNR: full {full:.3} > w/o-aggregator {no_agg:.3} > w/o-adapter {no_adapter:.3}; mini-grid {mini:.3} (|diff| {:.3} dB)",
            (mini - full).abs()
        ),
    );
}

/// Criterion 8: loss constants. total_loss(rgb=0, aug=1) = 0.05 exactly and
/// the rgb-loss weights are lambda_mse = 1.0, lambda_lpips = 0.2.
#[test]
fn criterion_8_loss_constants() {
    use musasplat::perceptual::{PerceptualKind, PerceptualProxy};
    use musasplat::train::{rgb_loss, total_loss, LossConfig};

    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let zero = g.scalar(0.0);
    let one = g.scalar(1.0);
    let t = total_loss(&mut g, zero, Some(one), &cfg);
    let exact = g.scalar_value(t) == 0.05;

    // constructed inputs: mse term weight is exactly 1.0 with the proxy off
    let a = Image::from_data(16, 16, vec![0.2; 16 * 16 * 3]);
    let b = Image::from_data(16, 16, vec![0.3; 16 * 16 * 3]);
    let mut g2 = Graph::new();
    let an = g2.constant(vec![16, 16, 3], a.data.clone());
    let bn = g2.constant(vec![16, 16, 3], b.data.clone());
    let no_perc = LossConfig {
        perceptual: PerceptualKind::None,
        ..Default::default()
    };
    let mse_only = rgb_loss(&mut g2, an, bn, &no_perc, None);
    let mse_ok = (g2.scalar_value(mse_only) - 0.01).abs() < 1e-15;

    // with the proxy on, the extra term carries weight exactly 0.2
    let proxy = PerceptualProxy::new();
    let full = rgb_loss(&mut g2, an, bn, &cfg, Some(&proxy));
    let perc_alone = proxy.loss(&mut g2, an, bn);
    let expect = 1.0 * 0.01 + 0.2 * g2.scalar_value(perc_alone);
    let perc_ok = (g2.scalar_value(full) - expect).abs() < 1e-12;

    verdict(
        "8 (loss constants)",
        exact && mse_ok && perc_ok,
        &format!(
            "total(0,1) = {}, mse weight ok {mse_ok}, lpips weight ok {perc_ok}",
            0.05
        ),
    );
}

/// Criterion 9: per-pixel compositing weights + residual transmittance = 1
/// within 1e-6 on random scenes of <= 100 Gaussians.
#[test]
fn criterion_9_renderer_conservation() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut worst: f64 = 0.0;
    for trial in 0..5 {
        let set = test_scene(20 + trial * 20, &mut rng);
        let settings = RenderSettings::new(24, 24);
        let intr = Intrinsics::from_fov(24, 50.0_f64.to_radians());
        let (_, aux) = render(&set, &CameraPose::identity(), &intr, &settings);
        for pi in 0..24 * 24 {
            worst = worst.max((aux.weight_sum[pi] + aux.transmittance[pi] - 1.0).abs());
        }
    }
    verdict(
        "9 (renderer conservation)",
        worst < CONSERVATION_TOL,
        &format!("max |weights + T - 1| = {worst:.2e}"),
    );
}

/// Criterion 10: reported parameter counts equal the closed-form module
/// formulas exactly and the trainable fraction is below 0.25 at defaults.
#[test]
fn criterion_10_parameter_accounting() {
    use musasplat::model::{expected_module_counts, parameter_report};
    let cfg = ModelConfig::default();
    let model = Model::build(&cfg);
    let report = parameter_report(&model.store);
    let expected = expected_module_counts(&cfg);
    let mut exact = report.modules.len() == expected.len();
    for ((name, counts), (ename, ecount)) in report.modules.iter().zip(&expected) {
        exact &= name == ename && counts.total == *ecount;
    }
    let fraction_ok = report.trainable_fraction < 0.25;
    verdict(
        "10 (parameter accounting)",
        exact && fraction_ok,
        &format!(
            "closed forms exact: {exact}; trainable fraction {:.4}",
            report.trainable_fraction
        ),
    );
}

/// Criterion 11: augmentation contracts. Slerp endpoints exact, zero aug
/// loss on matching render/target, and disabling augmentation reproduces
/// lambda_rgb * rgb exactly.
#[test]
fn criterion_11_augmentation_contracts() {
    use musasplat::augment::{aug_loss, pose_interpolate};
    use musasplat::train::{total_loss, LossConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let a = CameraPose::new(
        quat_normalize([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]),
        [0.3, -0.2, 0.9],
    );
    let b = CameraPose::new(
        quat_normalize([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]),
        [-0.5, 0.4, 0.1],
    );
    let p0 = pose_interpolate(&a, &b, 0.0);
    let p1 = pose_interpolate(&a, &b, 1.0);
    let q_align = |p: [f64; 4], q: [f64; 4]| -> f64 {
        p.iter().zip(&q).map(|(x, y)| x * y).sum::<f64>().abs()
    };
    let endpoints_exact = p0.translation == a.translation
        && p1.translation == b.translation
        && (q_align(p0.rotation, a.rotation) - 1.0).abs() < 1e-12
        && (q_align(p1.rotation, b.rotation) - 1.0).abs() < 1e-12;

    // matching render/target gives exactly zero
    let img = Image::from_data(8, 8, vec![0.3; 192]);
    let mut g = Graph::new();
    let r = g.constant(vec![8, 8, 3], img.data.clone());
    let l = aug_loss(&mut g, &[r], &[&img]).unwrap();
    let zero_exact = g.scalar_value(l) == 0.0;

    // disabled augmentation: total = lambda_rgb * rgb exactly
    let cfg = LossConfig::default();
    let mut g2 = Graph::new();
    let rgb = g2.scalar(0.734);
    let total = total_loss(&mut g2, rgb, None, &cfg);
    let degenerate_exact = g2.scalar_value(total) == 0.734;

    verdict(
        "11 (augmentation contracts)",
        endpoints_exact && zero_exact && degenerate_exact,
        &format!("endpoints {endpoints_exact}, zero-loss {zero_exact}, degenerate-total {degenerate_exact}"),
    );
}
