//! Feature Fusion Aggregator: single-pass cross-view attention with per-token
//! quality scores, boundary-view boosting and confidence masking, plus a
//! sequential memory-bank baseline for efficiency comparison.

use crate::diff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::vit::{randn, TokenStream};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::rc::Rc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FfaConfig {
    /// Confidence threshold: key tokens with q < tau are masked out.
    pub tau: f64,
    /// Boundary boost, > 1.
    pub lambda_boost: f64,
    /// Attention dimension d; defaults to the channel dim when None.
    pub attention_dim: Option<usize>,
    /// Floor inside log M keeping softmax finite (log eps acts as soft -inf).
    pub mask_floor: f64,
    pub heads: usize,
}

impl Default for FfaConfig {
    fn default() -> Self {
        FfaConfig {
            tau: 0.1,
            lambda_boost: 2.0,
            attention_dim: None,
            mask_floor: 1e-9,
            heads: 1,
        }
    }
}

impl FfaConfig {
    pub fn validate(&self) {
        assert!(self.lambda_boost > 1.0, "lambda_boost must be > 1");
        assert!((0.0..1.0).contains(&self.tau), "tau must be in [0, 1)");
        assert!(self.mask_floor > 0.0, "mask_floor must be positive");
        assert!(self.heads >= 1);
    }
}

/// Trainable state: quality estimator, boundary detector, q/k/v projections
/// and the residual fusion MLP. Carries an invocation counter used by the
/// efficiency properties.
pub struct FfaState {
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub quality_w: ParamId,
    pub boundary_w1: ParamId,
    pub boundary_b1: ParamId,
    pub boundary_w2: ParamId,
    pub boundary_b2: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub fuse_w1: ParamId,
    pub fuse_b1: ParamId,
    pub fuse_w2: ParamId,
    pub fuse_b2: ParamId,
    pub invocations: Cell<u64>,
}

/// Everything a fuse pass produces, with diagnostics for the oracle and
/// masking tests.
pub struct FuseOutput {
    pub streams: Vec<TokenStream>,
    /// Per query view: attention rows over the other views' tokens, (Lq, Lk)
    /// per head concatenated along axis 0 when heads > 1.
    pub attention: Vec<NodeId>,
    /// Per query view: the pre-log mask over key tokens, (Lk,).
    pub masks: Vec<NodeId>,
    pub boundary: Vec<bool>,
    /// Per view quality scores, (L, 1).
    pub quality: Vec<NodeId>,
}

impl FfaState {
    pub fn register(
        store: &mut ParamStore,
        channels: usize,
        cfg: &FfaConfig,
        rng: &mut ChaCha8Rng,
    ) -> FfaState {
        let dim = cfg.attention_dim.unwrap_or(channels);
        assert!(dim % cfg.heads == 0, "attention dim {dim} not divisible by heads {}", cfg.heads);
        let hidden = (channels / 2).max(1);
        let w = |store: &mut ParamStore, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            store.register(
                format!("ffa.{name}"),
                shape,
                (0..n).map(|_| randn(rng) * 0.02).collect(),
            )
        };
        let z = |store: &mut ParamStore, name: &str, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            store.register(format!("ffa.{name}"), shape, vec![0.0; n])
        };
        FfaState {
            channels,
            dim,
            heads: cfg.heads,
            quality_w: w(store, "quality.w", vec![channels, 1], rng),
            boundary_w1: w(store, "boundary.w1", vec![channels, hidden], rng),
            boundary_b1: z(store, "boundary.b1", vec![hidden]),
            boundary_w2: w(store, "boundary.w2", vec![hidden, 1], rng),
            boundary_b2: z(store, "boundary.b2", vec![1]),
            wq: w(store, "attn.wq", vec![channels, dim], rng),
            bq: z(store, "attn.bq", vec![dim]),
            wk: w(store, "attn.wk", vec![channels, dim], rng),
            bk: z(store, "attn.bk", vec![dim]),
            wv: w(store, "attn.wv", vec![channels, dim], rng),
            bv: z(store, "attn.bv", vec![dim]),
            fuse_w1: w(store, "fuse.w1", vec![2 * channels, channels], rng),
            fuse_b1: z(store, "fuse.b1", vec![channels]),
            fuse_w2: w(store, "fuse.w2", vec![channels, channels], rng),
            fuse_b2: z(store, "fuse.b2", vec![channels]),
            invocations: Cell::new(0),
        }
    }

    pub fn reset_counters(&self) {
        self.invocations.set(0);
    }

    /// Closed-form parameter count for the aggregator at a channel dim.
    pub fn expected_param_count(channels: usize, cfg: &FfaConfig) -> usize {
        let d = cfg.attention_dim.unwrap_or(channels);
        let hidden = (channels / 2).max(1);
        channels                                  // quality
            + channels * hidden + hidden + hidden + 1 // boundary mlp
            + 3 * (channels * d + d)              // q/k/v
            + 3 * channels * channels + 2 * channels // fusion mlp (2C->C->C)
    }

    /// Per-token quality q = sigmoid(w_q^T f), shape (L, 1) per view.
    pub fn quality_scores(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &[TokenStream],
    ) -> Vec<NodeId> {
        let wq = g.param(store, self.quality_w);
        views
            .iter()
            .map(|v| {
                let logits = g.matmul(v.node, wq);
                g.sigmoid(logits)
            })
            .collect()
    }

    /// Boundary indicators from mean-pooled features. The > 0.5 threshold is
    /// a stop-gradient gate: the returned booleans never join the graph. The
    /// sigmoid logits are returned so an entropy regularizer can keep the
    /// detector trainable.
    pub fn boundary_mask(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &[TokenStream],
    ) -> (Vec<bool>, Vec<NodeId>) {
        let w1 = g.param(store, self.boundary_w1);
        let b1 = g.param(store, self.boundary_b1);
        let w2 = g.param(store, self.boundary_w2);
        let b2 = g.param(store, self.boundary_b2);
        let mut flags = Vec::with_capacity(views.len());
        let mut probs = Vec::with_capacity(views.len());
        for v in views {
            let pooled = g.mean_axis(v.node, 0); // (C,)
            let pooled = g.reshape(pooled, vec![1, self.channels]);
            let h = g.matmul(pooled, w1);
            let h = g.add_bias(h, b1);
            let h = g.gelu(h);
            let logit = g.matmul(h, w2);
            let logit = g.add_bias(logit, b2);
            let p = g.sigmoid(logit);
            flags.push(g.values(p)[0] > 0.5);
            probs.push(p);
        }
        (flags, probs)
    }

    /// Binary entropy of the boundary probabilities, averaged over views.
    /// Keeps detector parameters reachable by gradient despite the hard gate.
    pub fn boundary_entropy(&self, g: &mut Graph, probs: &[NodeId]) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for &p in probs {
            let pc = g.clamp(p, 1e-7, 1.0 - 1e-7);
            let lp = g.log(pc);
            let t1 = g.mul(pc, lp);
            let neg = g.scale(pc, -1.0);
            let omp = g.add_scalar(neg, 1.0);
            let lomp = g.log(omp);
            let t2 = g.mul(omp, lomp);
            let s = g.add(t1, t2);
            let h = g.scale(s, -1.0);
            acc = Some(match acc {
                None => h,
                Some(a) => g.add(a, h),
            });
        }
        let total = acc.expect("at least one view");
        let mean = g.scale(total, 1.0 / probs.len() as f64);
        g.sum_all(mean)
    }

    /// Single-pass fusion of all views (Eqs 6-9 shape): per query view the
    /// other V-1 views serve as keys/values, attention is biased by
    /// log(mask), and an MLP residual folds the attended features back in.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &[TokenStream],
        cfg: &FfaConfig,
    ) -> Result<FuseOutput> {
        if views.len() < 2 {
            return Err(Error::invalid("aggregation requires multiple views"));
        }
        self.invocations.set(self.invocations.get() + 1);
        let v = views.len();
        let l = views[0].grid_h * views[0].grid_w;
        let c = views[0].channels;
        for t in views {
            if t.grid_h * t.grid_w != l || t.channels != c {
                return Err(Error::invalid(format!(
                    "fuse: all views need identical L and C; got {}x{} c={} vs L={l} c={c}",
                    t.grid_h, t.grid_w, t.channels
                )));
            }
        }

        let quality = self.quality_scores(g, store, views);
        let (boundary, _probs) = self.boundary_mask(g, store, views);

        // per-view token weights: w = q * lambda for boundary views, else q
        let weights: Vec<NodeId> = quality
            .iter()
            .zip(&boundary)
            .map(|(&q, &b)| {
                if b {
                    g.scale(q, cfg.lambda_boost)
                } else {
                    g.scale(q, 1.0)
                }
            })
            .collect();
        // keep flags from the raw quality values (stop-gradient threshold)
        let keeps: Vec<Vec<bool>> = quality
            .iter()
            .map(|&q| g.values(q).iter().map(|&x| x >= cfg.tau).collect())
            .collect();

        let wq = g.param(store, self.wq);
        let bq = g.param(store, self.bq);
        let wk = g.param(store, self.wk);
        let bk = g.param(store, self.bk);
        let wv = g.param(store, self.wv);
        let bv = g.param(store, self.bv);
        let fw1 = g.param(store, self.fuse_w1);
        let fb1 = g.param(store, self.fuse_b1);
        let fw2 = g.param(store, self.fuse_w2);
        let fb2 = g.param(store, self.fuse_b2);

        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // project each view's keys/values once; query views share them
        let per_view_kv: Vec<(NodeId, NodeId)> = views
            .iter()
            .map(|t| {
                let k = g.matmul(t.node, wk);
                let k = g.add_bias(k, bk);
                let val = g.matmul(t.node, wv);
                let val = g.add_bias(val, bv);
                (k, val)
            })
            .collect();
        let mut streams = Vec::with_capacity(v);
        let mut attention = Vec::with_capacity(v);
        let mut masks = Vec::with_capacity(v);
        for i in 0..v {
            let others: Vec<usize> = (0..v).filter(|&j| j != i).collect();
            // stacked mask entries, other views in index order
            let wparts: Vec<NodeId> = others.iter().map(|&j| weights[j]).collect();
            let wcat = if wparts.len() == 1 {
                wparts[0]
            } else {
                g.concat(&wparts, 0)
            };
            let keep: Vec<bool> = others
                .iter()
                .flat_map(|&j| keeps[j].iter().copied())
                .collect();
            let lk = others.len() * l;
            let wflat = g.reshape(wcat, vec![lk]);
            let mask = g.masked_floor(wflat, Rc::new(keep), cfg.mask_floor);
            let log_mask = g.log(mask);

            let q = g.matmul(views[i].node, wq);
            let q = g.add_bias(q, bq);
            let ks: Vec<NodeId> = others.iter().map(|&j| per_view_kv[j].0).collect();
            let vs: Vec<NodeId> = others.iter().map(|&j| per_view_kv[j].1).collect();
            let (k, val) = if others.len() == 1 {
                (ks[0], vs[0])
            } else {
                (g.concat(&ks, 0), g.concat(&vs, 0))
            };

            let mut head_outs = Vec::with_capacity(self.heads);
            let mut head_attn = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice(q, 1, h * dh, dh);
                let kh = g.slice(k, 1, h * dh, dh);
                let vh = g.slice(val, 1, h * dh, dh);
                let kt = g.transpose2d(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let biased = g.add_bias(scores, log_mask);
                let a = g.softmax(biased, 1);
                head_attn.push(a);
                head_outs.push(g.matmul(a, vh));
            }
            let attended = if self.heads == 1 {
                head_outs[0]
            } else {
                g.concat(&head_outs, 1)
            };
            let attn_all = if self.heads == 1 {
                head_attn[0]
            } else {
                g.concat(&head_attn, 0)
            };

            let cat = g.concat(&[views[i].node, attended], 1); // (L, 2C)
            let h1 = g.matmul(cat, fw1);
            let h1 = g.add_bias(h1, fb1);
            let h1 = g.gelu(h1);
            let res = g.matmul(h1, fw2);
            let res = g.add_bias(res, fb2);
            let out = g.add(views[i].node, res);
            streams.push(TokenStream {
                node: out,
                ..views[i]
            });
            attention.push(attn_all);
            masks.push(mask);
        }
        Ok(FuseOutput {
            streams,
            attention,
            masks,
            boundary,
            quality,
        })
    }
}

/// Sequential memory-bank baseline: one pairwise fusion step per added view
/// against a persistent store of all past tokens, in the style of running
/// decoder passes per pair. Instrumented for the efficiency comparison.
pub struct MemoryBank {
    pub channels: usize,
    pub dim: usize,
    pub self_wq: ParamId,
    pub self_wk: ParamId,
    pub self_wv: ParamId,
    pub self_wo: ParamId,
    pub cross_wq: ParamId,
    pub cross_wk: ParamId,
    pub cross_wv: ParamId,
    pub write_wq: ParamId,
    pub write_wk: ParamId,
    pub write_wv: ParamId,
    pub fuse_w1: ParamId,
    pub fuse_b1: ParamId,
    pub fuse_w2: ParamId,
    pub fuse_b2: ParamId,
    pub fusion_invocations: Cell<u64>,
    pub peak_retained_tokens: Cell<usize>,
}

impl MemoryBank {
    pub fn register(store: &mut ParamStore, channels: usize, rng: &mut ChaCha8Rng) -> MemoryBank {
        let c = channels;
        let w = |store: &mut ParamStore, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            store.register(
                format!("membank.{name}"),
                shape,
                (0..n).map(|_| randn(rng) * 0.02).collect(),
            )
        };
        let z = |store: &mut ParamStore, name: &str, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            store.register(format!("membank.{name}"), shape, vec![0.0; n])
        };
        MemoryBank {
            channels: c,
            dim: c,
            self_wq: w(store, "self.wq", vec![c, c], rng),
            self_wk: w(store, "self.wk", vec![c, c], rng),
            self_wv: w(store, "self.wv", vec![c, c], rng),
            self_wo: w(store, "self.wo", vec![c, c], rng),
            cross_wq: w(store, "cross.wq", vec![c, c], rng),
            cross_wk: w(store, "cross.wk", vec![c, c], rng),
            cross_wv: w(store, "cross.wv", vec![c, c], rng),
            write_wq: w(store, "write.wq", vec![c, c], rng),
            write_wk: w(store, "write.wk", vec![c, c], rng),
            write_wv: w(store, "write.wv", vec![c, c], rng),
            fuse_w1: w(store, "fuse.w1", vec![2 * c, c], rng),
            fuse_b1: z(store, "fuse.b1", vec![c]),
            fuse_w2: w(store, "fuse.w2", vec![c, c], rng),
            fuse_b2: z(store, "fuse.b2", vec![c]),
            fusion_invocations: Cell::new(0),
            peak_retained_tokens: Cell::new(0),
        }
    }

    pub fn reset_counters(&self) {
        self.fusion_invocations.set(0);
        self.peak_retained_tokens.set(0);
    }

    pub fn expected_param_count(channels: usize) -> usize {
        let c = channels;
        10 * c * c + 3 * c * c + 2 * c
    }

    fn attention(
        &self,
        g: &mut Graph,
        q_in: NodeId,
        kv_in: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
    ) -> NodeId {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let q = g.matmul(q_in, wq);
        let k = g.matmul(kv_in, wk);
        let v = g.matmul(kv_in, wv);
        let kt = g.transpose2d(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, scale);
        let a = g.softmax(scores, 1);
        g.matmul(a, v)
    }

    /// Processes views in order: each new view reads the memory of all
    /// previously seen tokens (cross-attention), the memory is then written
    /// back (every stored token attends to the new view), and the new view's
    /// tokens are appended. The first view passes through; fusion
    /// invocations = V-1, peak retained tokens = V*L.
    pub fn fuse_sequential(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &[TokenStream],
    ) -> Result<Vec<TokenStream>> {
        if views.len() < 2 {
            return Err(Error::invalid("aggregation requires multiple views"));
        }
        let l = views[0].grid_h * views[0].grid_w;
        let swq = g.param(store, self.self_wq);
        let swk = g.param(store, self.self_wk);
        let swv = g.param(store, self.self_wv);
        let swo = g.param(store, self.self_wo);
        let cwq = g.param(store, self.cross_wq);
        let cwk = g.param(store, self.cross_wk);
        let cwv = g.param(store, self.cross_wv);
        let wwq = g.param(store, self.write_wq);
        let wwk = g.param(store, self.write_wk);
        let wwv = g.param(store, self.write_wv);
        let fw1 = g.param(store, self.fuse_w1);
        let fb1 = g.param(store, self.fuse_b1);
        let fw2 = g.param(store, self.fuse_w2);
        let fb2 = g.param(store, self.fuse_b2);

        // the memory is one growing blob, rewritten every step
        let mut memory: NodeId = views[0].node;
        let mut retained = l;
        self.peak_retained_tokens
            .set(self.peak_retained_tokens.get().max(retained));
        let mut out = vec![views[0]];
        for view in &views[1..] {
            self.fusion_invocations
                .set(self.fusion_invocations.get() + 1);
            // decode-style pairwise step: self-attention, then a cross read
            // of the whole memory (keys/values recomputed from stored tokens)
            let sa = self.attention(g, view.node, view.node, swq, swk, swv);
            let sa = g.matmul(sa, swo);
            let h = g.add(view.node, sa);
            let read = self.attention(g, h, memory, cwq, cwk, cwv);
            let cat = g.concat(&[h, read], 1);
            let f1 = g.matmul(cat, fw1);
            let f1 = g.add_bias(f1, fb1);
            let f1 = g.gelu(f1);
            let res = g.matmul(f1, fw2);
            let res = g.add_bias(res, fb2);
            let fused = g.add(h, res);
            out.push(TokenStream {
                node: fused,
                ..*view
            });
            // memory write: every stored token attends to the new view and
            // is updated in place, then the new tokens are appended
            let delta = self.attention(g, memory, view.node, wwq, wwk, wwv);
            let updated = g.add(memory, delta);
            memory = g.concat(&[updated, view.node], 0);
            retained += l;
            self.peak_retained_tokens
                .set(self.peak_retained_tokens.get().max(retained));
        }
        Ok(out)
    }
}
