//! Aggregation benchmark: single-pass fusion vs the sequential memory bank,
//! instrumented for invocation counts, retained tokens and wall time.

use crate::diff::{DiffArray, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::ffa::{FfaConfig, FfaState, MemoryBank};
use crate::vit::TokenStream;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Ffa,
    MemoryBank,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Ffa => "ffa",
            Strategy::MemoryBank => "memory-bank",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub views: usize,
    pub strategy: String,
    pub invocation_count: u64,
    pub peak_retained_tokens: usize,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub tokens_per_view: usize,
    pub channels: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            tokens_per_view: 64,
            channels: 64,
            reps: 9,
            seed: 17,
        }
    }
}

fn random_views(
    g: &mut Graph,
    v: usize,
    l: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenStream> {
    (0..v)
        .map(|view| {
            let vals: Vec<f64> = (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            TokenStream {
                node: g.input(&DiffArray::new(vec![l, c], vals)),
                view,
                grid_h: 1,
                grid_w: l,
                channels: c,
            }
        })
        .collect()
}

/// Runs both strategies over the requested view counts; wall time is the
/// median of `reps` forward passes.
pub fn bench_aggregation(
    view_counts: &[usize],
    strategies: &[Strategy],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ffa_cfg = FfaConfig::default();
    let ffa = FfaState::register(&mut store, cfg.channels, &ffa_cfg, &mut rng);
    let bank = MemoryBank::register(&mut store, cfg.channels, &mut rng);

    let mut rows = Vec::new();
    for &v in view_counts {
        if v < 2 {
            return Err(Error::invalid("benchmark needs V >= 2"));
        }
        for strategy in strategies {
            let mut times = Vec::with_capacity(cfg.reps);
            let mut invocations = 0;
            let mut retained = 0;
            for rep in 0..cfg.reps {
                let mut gen_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (v as u64) ^ (rep as u64) << 8);
                let mut g = Graph::new();
                let views = random_views(&mut g, v, cfg.tokens_per_view, cfg.channels, &mut gen_rng);
                match strategy {
                    Strategy::Ffa => {
                        ffa.reset_counters();
                        let t0 = Instant::now();
                        let out = ffa.fuse(&mut g, &store, &views, &ffa_cfg)?;
                        times.push(t0.elapsed().as_secs_f64() * 1e3);
                        invocations = ffa.invocations.get();
                        // the single-pass aggregator retains nothing between
                        // invocations; its working set is the batch itself
                        retained = v * cfg.tokens_per_view;
                        std::hint::black_box(g.values(out.streams[0].node)[0]);
                    }
                    Strategy::MemoryBank => {
                        bank.reset_counters();
                        let t0 = Instant::now();
                        let out = bank.fuse_sequential(&mut g, &store, &views)?;
                        times.push(t0.elapsed().as_secs_f64() * 1e3);
                        invocations = bank.fusion_invocations.get();
                        retained = bank.peak_retained_tokens.get();
                        std::hint::black_box(g.values(out[0].node)[0]);
                    }
                }
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows.push(BenchRow {
                views: v,
                strategy: strategy.name().to_string(),
                invocation_count: invocations,
                peak_retained_tokens: retained,
                wall_time_ms: times[times.len() / 2],
            });
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("views,strategy,invocation_count,peak_retained_tokens,wall_time_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            r.views, r.strategy, r.invocation_count, r.peak_retained_tokens, r.wall_time_ms
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Ratio summary (memory-bank time / ffa time per V), printed with the CSV.
pub fn summarize(rows: &[BenchRow]) -> String {
    let mut s = String::from("V  ffa_ms  membank_ms  speedup\n");
    let mut views: Vec<usize> = rows.iter().map(|r| r.views).collect();
    views.sort_unstable();
    views.dedup();
    for v in views {
        let ffa = rows
            .iter()
            .find(|r| r.views == v && r.strategy == "ffa")
            .map(|r| r.wall_time_ms);
        let bank = rows
            .iter()
            .find(|r| r.views == v && r.strategy == "memory-bank")
            .map(|r| r.wall_time_ms);
        if let (Some(f), Some(b)) = (ffa, bank) {
            s.push_str(&format!("{v}  {f:.3}  {b:.3}  {:.2}x\n", b / f));
        }
    }
    s
}
