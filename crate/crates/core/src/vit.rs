//! A small ViT encoder/decoder pair with patch embedding and per-block
//! adapter slots. The backbone is randomly initialized (fixed seed) and
//! frozen under the default policy; only adapters, the aggregator, and the
//! heads train.

use crate::diff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::musa::{MusaConfig, MusaLayer};
use crate::tokens::TokenGrid;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            patch_size: 8,
            embed_dim: 64,
            encoder_blocks: 4,
            decoder_blocks: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) {
        assert!(
            self.embed_dim % self.heads == 0,
            "embed_dim {} must be divisible by heads {}",
            self.embed_dim,
            self.heads
        );
        assert!(self.patch_size > 0 && self.encoder_blocks > 0);
    }
}

/// Box-Muller standard normal draw.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_weight(store: &mut ParamStore, name: String, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> ParamId {
    let n = shape.iter().product();
    store.register(name, shape, (0..n).map(|_| randn(rng) * 0.02).collect())
}

fn init_zeros(store: &mut ParamStore, name: String, shape: Vec<usize>) -> ParamId {
    let n = shape.iter().product();
    store.register(name, shape, vec![0.0; n])
}

fn init_ones(store: &mut ParamStore, name: String, shape: Vec<usize>) -> ParamId {
    let n = shape.iter().product();
    store.register(name, shape, vec![1.0; n])
}

pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn register(store: &mut ParamStore, prefix: &str, c: usize) -> Self {
        LayerNormParams {
            gamma: init_ones(store, format!("{prefix}.gamma"), vec![c]),
            beta: init_zeros(store, format!("{prefix}.beta"), vec![c]),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    fn register(store: &mut ParamStore, prefix: &str, c: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            wq: init_weight(store, format!("{prefix}.wq"), vec![c, c], rng),
            bq: init_zeros(store, format!("{prefix}.bq"), vec![c]),
            wk: init_weight(store, format!("{prefix}.wk"), vec![c, c], rng),
            bk: init_zeros(store, format!("{prefix}.bk"), vec![c]),
            wv: init_weight(store, format!("{prefix}.wv"), vec![c, c], rng),
            bv: init_zeros(store, format!("{prefix}.bv"), vec![c]),
            wo: init_weight(store, format!("{prefix}.wo"), vec![c, c], rng),
            bo: init_zeros(store, format!("{prefix}.bo"), vec![c]),
            heads,
        }
    }

    /// Multi-head scaled-dot-product attention. Queries come from `q_in`
    /// (Lq, C); keys and values from `kv_in` (Lk, C).
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, q_in: NodeId, kv_in: NodeId) -> NodeId {
        let (k, v) = self.project_kv(g, store, kv_in);
        self.apply_with_kv(g, store, q_in, k, v)
    }

    /// Key/value projections alone, so context shared by several query views
    /// is projected once.
    pub fn project_kv(&self, g: &mut Graph, store: &ParamStore, kv_in: NodeId) -> (NodeId, NodeId) {
        let linear = |g: &mut Graph, x: NodeId, w: ParamId, b: ParamId| {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let y = g.matmul(x, wn);
            g.add_bias(y, bn)
        };
        (
            linear(g, kv_in, self.wk, self.bk),
            linear(g, kv_in, self.wv, self.bv),
        )
    }

    /// Attention over pre-projected keys/values.
    pub fn apply_with_kv(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> NodeId {
        let c = g.shape(q_in)[1];
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let linear = |g: &mut Graph, x: NodeId, w: ParamId, b: ParamId| {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let y = g.matmul(x, wn);
            g.add_bias(y, bn)
        };
        let q = linear(g, q_in, self.wq, self.bq);
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh);
            let kh = g.slice(k, 1, h * dh, dh);
            let vh = g.slice(v, 1, h * dh, dh);
            let kt = g.transpose2d(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1);
            head_outs.push(g.matmul(attn, vh));
        }
        let cat = g.concat(&head_outs, 1);
        linear(g, cat, self.wo, self.bo)
    }
}

pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    fn register(store: &mut ParamStore, prefix: &str, c: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpParams {
            w1: init_weight(store, format!("{prefix}.w1"), vec![c, hidden], rng),
            b1: init_zeros(store, format!("{prefix}.b1"), vec![hidden]),
            w2: init_weight(store, format!("{prefix}.w2"), vec![hidden, c], rng),
            b2: init_zeros(store, format!("{prefix}.b2"), vec![c]),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let h = g.matmul(x, w1);
        let h = g.add_bias(h, b1);
        let h = g.gelu(h);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let y = g.matmul(h, w2);
        g.add_bias(y, b2)
    }
}

pub struct EncoderBlock {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

pub struct DecoderBlock {
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln_cross: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

/// A token stream inside a graph, tagged with its patch-grid geometry.
#[derive(Debug, Clone, Copy)]
pub struct TokenStream {
    pub node: NodeId,
    pub view: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl TokenStream {
    pub fn to_grid(&self, g: &Graph) -> TokenGrid {
        TokenGrid::from_tokens(
            self.view,
            self.grid_h,
            self.grid_w,
            self.channels,
            g.values(self.node).to_vec(),
        )
    }
}

pub struct ViT {
    pub cfg: ViTConfig,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub pos_embed: ParamId,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    /// One adapter per encoder block when enabled.
    pub adapters: Option<Vec<MusaLayer>>,
    /// Adapters for decoder blocks (config switch; off by default).
    pub decoder_adapters: Option<Vec<MusaLayer>>,
}

impl ViT {
    /// Registers the backbone (and per-block adapters when `musa` is given)
    /// for images of `image_h` x `image_w`.
    pub fn register(
        store: &mut ParamStore,
        cfg: &ViTConfig,
        musa: Option<&MusaConfig>,
        image_h: usize,
        image_w: usize,
        rng: &mut ChaCha8Rng,
    ) -> ViT {
        cfg.validate();
        assert!(
            image_h % cfg.patch_size == 0 && image_w % cfg.patch_size == 0,
            "image {image_h}x{image_w} not divisible by patch size {}",
            cfg.patch_size
        );
        let c = cfg.embed_dim;
        let grid_h = image_h / cfg.patch_size;
        let grid_w = image_w / cfg.patch_size;
        let l = grid_h * grid_w;
        let pd = cfg.patch_size * cfg.patch_size * 3;
        let patch_weight = init_weight(store, "vit.patch_embed.weight".into(), vec![pd, c], rng);
        let patch_bias = init_zeros(store, "vit.patch_embed.bias".into(), vec![c]);
        let pos_embed = init_weight(store, "vit.pos_embed".into(), vec![l, c], rng);
        let hidden = c * cfg.mlp_ratio;
        let mut encoder = Vec::new();
        for i in 0..cfg.encoder_blocks {
            encoder.push(EncoderBlock {
                ln1: LayerNormParams::register(store, &format!("vit.enc{i}.ln1"), c),
                attn: AttentionParams::register(store, &format!("vit.enc{i}.attn"), c, cfg.heads, rng),
                ln2: LayerNormParams::register(store, &format!("vit.enc{i}.ln2"), c),
                mlp: MlpParams::register(store, &format!("vit.enc{i}.mlp"), c, hidden, rng),
            });
        }
        let mut decoder = Vec::new();
        for i in 0..cfg.decoder_blocks {
            decoder.push(DecoderBlock {
                ln1: LayerNormParams::register(store, &format!("vit.dec{i}.ln1"), c),
                self_attn: AttentionParams::register(store, &format!("vit.dec{i}.self"), c, cfg.heads, rng),
                ln_cross: LayerNormParams::register(store, &format!("vit.dec{i}.ln_cross"), c),
                cross_attn: AttentionParams::register(store, &format!("vit.dec{i}.cross"), c, cfg.heads, rng),
                ln2: LayerNormParams::register(store, &format!("vit.dec{i}.ln2"), c),
                mlp: MlpParams::register(store, &format!("vit.dec{i}.mlp"), c, hidden, rng),
            });
        }
        let adapters = musa.map(|mc| {
            (0..cfg.encoder_blocks)
                .map(|i| MusaLayer::register(store, &format!("adapter.enc{i}"), c, mc, rng))
                .collect()
        });
        let decoder_adapters = musa.filter(|mc| mc.adapt_decoder).map(|mc| {
            (0..cfg.decoder_blocks)
                .map(|i| MusaLayer::register(store, &format!("adapter.dec{i}"), c, mc, rng))
                .collect()
        });
        ViT {
            cfg: cfg.clone(),
            grid_h,
            grid_w,
            patch_weight,
            patch_bias,
            pos_embed,
            encoder,
            decoder,
            adapters,
            decoder_adapters,
        }
    }

    /// Splits an image into non-overlapping patches, linearly embeds each one
    /// and adds the learned 2D positional embedding. L = (H/P)*(W/P).
    pub fn patchify(&self, g: &mut Graph, store: &ParamStore, image: &Image, view: usize) -> Result<TokenStream> {
        let p = self.cfg.patch_size;
        if image.height % p != 0 || image.width % p != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by patch size {p}",
                image.height, image.width
            )));
        }
        let gh = image.height / p;
        let gw = image.width / p;
        if gh != self.grid_h || gw != self.grid_w {
            return Err(Error::invalid(format!(
                "image {}x{} yields a {gh}x{gw} grid; backbone built for {}x{}",
                image.height, image.width, self.grid_h, self.grid_w
            )));
        }
        let l = gh * gw;
        let pd = p * p * 3;
        let img_node = g.constant(vec![image.height * image.width * 3], image.data.clone());
        let map = patch_gather_map(image.height, image.width, p);
        let patches = g.gather(img_node, map, vec![l, pd]);
        let w = g.param(store, self.patch_weight);
        let b = g.param(store, self.patch_bias);
        let emb = g.matmul(patches, w);
        let emb = g.add_bias(emb, b);
        let pos = g.param(store, self.pos_embed);
        let node = g.add(emb, pos);
        Ok(TokenStream {
            node,
            view,
            grid_h: gh,
            grid_w: gw,
            channels: self.cfg.embed_dim,
        })
    }

    /// One encoder block over the batched (V*L, C) stream. Attention is
    /// strictly per view (slices of the batched projections); layer norms,
    /// MLP and projections run on the whole batch. The adapter runs parallel
    /// to the feed-forward sublayer on the post-attention stream.
    fn encoder_block_batched(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        blk: &EncoderBlock,
        adapter: Option<&MusaLayer>,
        all: NodeId,
        views: usize,
        tokens_per_view: usize,
    ) -> NodeId {
        let c = self.cfg.embed_dim;
        let heads = blk.attn.heads;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let linear = |g: &mut Graph, x: NodeId, w: ParamId, b: ParamId| {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let y = g.matmul(x, wn);
            g.add_bias(y, bn)
        };
        let h1 = blk.ln1.apply(g, store, all);
        let q = linear(g, h1, blk.attn.wq, blk.attn.bq);
        let k = linear(g, h1, blk.attn.wk, blk.attn.bk);
        let v = linear(g, h1, blk.attn.wv, blk.attn.bv);
        let mut per_view = Vec::with_capacity(views);
        for vi in 0..views {
            let row0 = vi * tokens_per_view;
            let qv = g.slice(q, 0, row0, tokens_per_view);
            let kv = g.slice(k, 0, row0, tokens_per_view);
            let vv = g.slice(v, 0, row0, tokens_per_view);
            let mut head_outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qh = g.slice(qv, 1, hh * dh, dh);
                let kh = g.slice(kv, 1, hh * dh, dh);
                let vh = g.slice(vv, 1, hh * dh, dh);
                let kt = g.transpose2d(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let attn = g.softmax(scores, 1);
                head_outs.push(g.matmul(attn, vh));
            }
            per_view.push(g.concat(&head_outs, 1));
        }
        let attn_cat = if views == 1 {
            per_view[0]
        } else {
            g.concat(&per_view, 0)
        };
        let attn_out = linear(g, attn_cat, blk.attn.wo, blk.attn.bo);
        let x1 = g.add(all, attn_out);
        let h2 = blk.ln2.apply(g, store, x1);
        let ff = blk.mlp.apply(g, store, h2);
        let mut out = g.add(x1, ff);
        if let Some(ad) = adapter {
            let mut residuals = Vec::with_capacity(views);
            for vi in 0..views {
                let xv = g.slice(x1, 0, vi * tokens_per_view, tokens_per_view);
                residuals.push(ad.residual(g, store, xv, self.grid_h, self.grid_w));
            }
            let res = if views == 1 {
                residuals[0]
            } else {
                g.concat(&residuals, 0)
            };
            out = g.add(out, res);
        }
        out
    }

    /// Per-view encoding: patchify + encoder blocks. Views are processed as
    /// one batch; no cross-view mixing happens inside the encoder.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, images: &[Image]) -> Result<Vec<TokenStream>> {
        if images.is_empty() {
            return Err(Error::invalid("encode: need at least one view"));
        }
        let (h0, w0) = (images[0].height, images[0].width);
        if images.iter().any(|im| im.height != h0 || im.width != w0) {
            return Err(Error::invalid(format!(
                "encode: mixed resolutions, first view is {h0}x{w0}"
            )));
        }
        let views = images.len();
        let mut streams = Vec::with_capacity(views);
        for (v, image) in images.iter().enumerate() {
            streams.push(self.patchify(g, store, image, v)?);
        }
        let l = streams[0].grid_h * streams[0].grid_w;
        let nodes: Vec<NodeId> = streams.iter().map(|s| s.node).collect();
        let mut all = if views == 1 {
            nodes[0]
        } else {
            g.concat(&nodes, 0)
        };
        for (i, blk) in self.encoder.iter().enumerate() {
            let adapter = self.adapters.as_ref().map(|a| &a[i]);
            all = self.encoder_block_batched(g, store, blk, adapter, all, views, l);
        }
        let mut out = Vec::with_capacity(views);
        for (v, s) in streams.iter().enumerate() {
            let node = g.slice(all, 0, v * l, l);
            out.push(TokenStream { node, ..*s });
        }
        Ok(out)
    }

    /// Decoder with cross-view attention: every view attends to the
    /// concatenation of all other views' tokens. A single view degenerates to
    /// self-attention only. Per-view projections are batched; per-view
    /// key/value projections are shared across query views.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, fused: &[TokenStream]) -> Result<Vec<TokenStream>> {
        if fused.is_empty() {
            return Err(Error::invalid("decode: no views"));
        }
        let v = fused.len();
        let l = fused[0].grid_h * fused[0].grid_w;
        let c = self.cfg.embed_dim;
        let linear = |g: &mut Graph, x: NodeId, w: ParamId, b: ParamId| {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let y = g.matmul(x, wn);
            g.add_bias(y, bn)
        };
        let nodes: Vec<NodeId> = fused.iter().map(|s| s.node).collect();
        let mut all = if v == 1 { nodes[0] } else { g.concat(&nodes, 0) };
        for (blk_index, blk) in self.decoder.iter().enumerate() {
            // self-attention phase, batched projections, per-view attention
            {
                let heads = blk.self_attn.heads;
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let h = blk.ln1.apply(g, store, all);
                let q = linear(g, h, blk.self_attn.wq, blk.self_attn.bq);
                let k = linear(g, h, blk.self_attn.wk, blk.self_attn.bk);
                let val = linear(g, h, blk.self_attn.wv, blk.self_attn.bv);
                let mut per_view = Vec::with_capacity(v);
                for vi in 0..v {
                    let row0 = vi * l;
                    let qv = g.slice(q, 0, row0, l);
                    let kv = g.slice(k, 0, row0, l);
                    let vv = g.slice(val, 0, row0, l);
                    let mut head_outs = Vec::with_capacity(heads);
                    for hh in 0..heads {
                        let qh = g.slice(qv, 1, hh * dh, dh);
                        let kh = g.slice(kv, 1, hh * dh, dh);
                        let vh = g.slice(vv, 1, hh * dh, dh);
                        let kt = g.transpose2d(kh);
                        let scores = g.matmul(qh, kt);
                        let scores = g.scale(scores, scale);
                        let attn = g.softmax(scores, 1);
                        head_outs.push(g.matmul(attn, vh));
                    }
                    per_view.push(g.concat(&head_outs, 1));
                }
                let cat = if v == 1 { per_view[0] } else { g.concat(&per_view, 0) };
                let sa = linear(g, cat, blk.self_attn.wo, blk.self_attn.bo);
                all = g.add(all, sa);
            }
            // cross-attention phase against the other views' current streams
            if v >= 2 {
                let normed_all = blk.ln_cross.apply(g, store, all);
                let k_all = linear(g, normed_all, blk.cross_attn.wk, blk.cross_attn.bk);
                let v_all = linear(g, normed_all, blk.cross_attn.wv, blk.cross_attn.bv);
                let q_all = linear(g, normed_all, blk.cross_attn.wq, blk.cross_attn.bq);
                let heads = blk.cross_attn.heads;
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut per_view = Vec::with_capacity(v);
                for vi in 0..v {
                    // keys/values: all tokens of the other views
                    let (kcat, vcat) = if vi == 0 {
                        (g.slice(k_all, 0, l, (v - 1) * l), g.slice(v_all, 0, l, (v - 1) * l))
                    } else if vi == v - 1 {
                        (g.slice(k_all, 0, 0, (v - 1) * l), g.slice(v_all, 0, 0, (v - 1) * l))
                    } else {
                        let ka = g.slice(k_all, 0, 0, vi * l);
                        let kb = g.slice(k_all, 0, (vi + 1) * l, (v - 1 - vi) * l);
                        let va = g.slice(v_all, 0, 0, vi * l);
                        let vb = g.slice(v_all, 0, (vi + 1) * l, (v - 1 - vi) * l);
                        (g.concat(&[ka, kb], 0), g.concat(&[va, vb], 0))
                    };
                    let qv = g.slice(q_all, 0, vi * l, l);
                    let mut head_outs = Vec::with_capacity(heads);
                    for hh in 0..heads {
                        let qh = g.slice(qv, 1, hh * dh, dh);
                        let kh = g.slice(kcat, 1, hh * dh, dh);
                        let vh = g.slice(vcat, 1, hh * dh, dh);
                        let kt = g.transpose2d(kh);
                        let scores = g.matmul(qh, kt);
                        let scores = g.scale(scores, scale);
                        let attn = g.softmax(scores, 1);
                        head_outs.push(g.matmul(attn, vh));
                    }
                    per_view.push(g.concat(&head_outs, 1));
                }
                let cat = g.concat(&per_view, 0);
                let ca = linear(g, cat, blk.cross_attn.wo, blk.cross_attn.bo);
                all = g.add(all, ca);
            }
            // feed-forward phase, batched, with the optional adapter slot
            let h = blk.ln2.apply(g, store, all);
            let ff = blk.mlp.apply(g, store, h);
            let mut next = g.add(all, ff);
            if let Some(ads) = &self.decoder_adapters {
                let ad = &ads[blk_index];
                let mut residuals = Vec::with_capacity(v);
                for vi in 0..v {
                    let xv = g.slice(all, 0, vi * l, l);
                    residuals.push(ad.residual(g, store, xv, fused[0].grid_h, fused[0].grid_w));
                }
                let res = if v == 1 { residuals[0] } else { g.concat(&residuals, 0) };
                next = g.add(next, res);
            }
            all = next;
        }
        let mut out = Vec::with_capacity(v);
        for (vi, s) in fused.iter().enumerate() {
            let node = g.slice(all, 0, vi * l, l);
            out.push(TokenStream { node, ..*s });
        }
        Ok(out)
    }

    /// Closed-form backbone parameter count (excludes adapters).
    pub fn expected_backbone_param_count(cfg: &ViTConfig, grid_h: usize, grid_w: usize) -> usize {
        let c = cfg.embed_dim;
        let hidden = c * cfg.mlp_ratio;
        let pd = cfg.patch_size * cfg.patch_size * 3;
        let ln = 2 * c;
        let attn = 4 * (c * c + c);
        let mlp = c * hidden + hidden + hidden * c + c;
        let enc_block = ln + attn + ln + mlp;
        let dec_block = ln + attn + ln + attn + ln + mlp;
        pd * c + c                      // patch embed
            + grid_h * grid_w * c       // positional embedding
            + cfg.encoder_blocks * enc_block
            + cfg.decoder_blocks * dec_block
    }
}

/// Gather map taking a flat (H, W, 3) image to (L, P*P*3) patch rows.
pub fn patch_gather_map(h: usize, w: usize, p: usize) -> Rc<Vec<u32>> {
    let (gh, gw) = (h / p, w / p);
    let mut map = Vec::with_capacity(gh * gw * p * p * 3);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..3 {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        map.push(((y * w + x) * 3 + ch) as u32);
                    }
                }
            }
        }
    }
    Rc::new(map)
}

/// Which parameters stay fixed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezePolicy {
    /// Freeze the ViT backbone; adapters, aggregator and heads train.
    Backbone,
    /// Everything trainable.
    Nothing,
}

/// Applies a freeze policy over the whole store by name prefix.
pub fn freeze_backbone(store: &mut ParamStore, policy: FreezePolicy) {
    match policy {
        FreezePolicy::Backbone => {
            for p in store.iter_mut() {
                p.frozen = p.name.starts_with("vit.");
            }
        }
        FreezePolicy::Nothing => {
            for p in store.iter_mut() {
                p.frozen = false;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp_image(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let v = (y * w + x) as f64 / (h * w) as f64;
                img.set(y, x, [v, v * 0.5, 1.0 - v]);
            }
        }
        img
    }

    fn small_vit(musa: Option<&MusaConfig>, image: usize, rng: &mut ChaCha8Rng) -> (ParamStore, ViT) {
        let mut store = ParamStore::new();
        let cfg = ViTConfig {
            patch_size: 4,
            embed_dim: 16,
            encoder_blocks: 2,
            decoder_blocks: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        let vit = ViT::register(&mut store, &cfg, musa, image, image, rng);
        (store, vit)
    }

    #[test]
    fn patchify_shapes_follow_hw_over_p_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let vit = ViT::register(&mut store, &ViTConfig::default(), None, 64, 64, &mut rng);
        let mut g = Graph::new();
        let ts = vit.patchify(&mut g, &store, &ramp_image(64, 64), 0).unwrap();
        assert_eq!((ts.grid_h, ts.grid_w), (8, 8));
        assert_eq!(g.shape(ts.node), &[64, 64]); // L = 4096/64 = 64 tokens

        let mut store2 = ParamStore::new();
        let vit2 = ViT::register(&mut store2, &ViTConfig::default(), None, 8, 8, &mut rng);
        let mut g2 = Graph::new();
        let ts2 = vit2.patchify(&mut g2, &store2, &ramp_image(8, 8), 0).unwrap();
        assert_eq!((ts2.grid_h, ts2.grid_w), (1, 1));
        assert_eq!(g2.shape(ts2.node), &[1, 64]);
    }

    #[test]
    fn patchify_rejects_indivisible_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, vit) = small_vit(None, 8, &mut rng);
        let mut g = Graph::new();
        assert!(vit.patchify(&mut g, &store, &ramp_image(6, 8), 0).is_err());
    }

    /// Patch extraction against a separate index-arithmetic oracle on a ramp
    /// image: token t, element j must equal pixel (gy*P+py, gx*P+px, ch).
    #[test]
    fn patch_extraction_matches_index_oracle() {
        let (h, w, p) = (8usize, 12usize, 4usize);
        let img = ramp_image(h, w);
        let mut g = Graph::new();
        let node = g.constant(vec![h * w * 3], img.data.clone());
        let map = patch_gather_map(h, w, p);
        let patches = g.gather(node, map, vec![(h / p) * (w / p), p * p * 3]);
        let vals = g.values(patches);
        let gw = w / p;
        for t in 0..(h / p) * (w / p) {
            let (gy, gx) = (t / gw, t % gw);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..3 {
                        let j = (py * p + px) * 3 + ch;
                        let want = img.data[((gy * p + py) * w + gx * p + px) * 3 + ch];
                        assert_eq!(vals[t * (p * p * 3) + j], want);
                    }
                }
            }
        }
    }

    #[test]
    fn encode_is_per_view_and_order_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, vit) = small_vit(None, 8, &mut rng);
        let a = ramp_image(8, 8);
        let mut b = ramp_image(8, 8);
        b.data.iter_mut().for_each(|v| *v = (*v * 0.7 + 0.1).min(1.0));

        let run = |images: &[Image]| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let ts = vit.encode(&mut g, &store, images).unwrap();
            ts.iter().map(|t| g.values(t.node).to_vec()).collect()
        };
        let ab = run(&[a.clone(), b.clone()]);
        let ba = run(&[b.clone(), a.clone()]);
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);

        let dup = run(&[a.clone(), a.clone()]);
        assert_eq!(dup[0], dup[1], "identical images give identical token grids");
    }

    #[test]
    fn encode_rejects_mixed_resolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, vit) = small_vit(None, 8, &mut rng);
        let mut g = Graph::new();
        let err = vit.encode(&mut g, &store, &[ramp_image(8, 8), ramp_image(4, 4)]);
        assert!(err.is_err());
    }

    /// Encoding with zero-initialized adapters equals encoding with adapters
    /// disabled, element for element at the bit level.
    #[test]
    fn zero_adapters_match_adapter_free_encoder_bitwise() {
        let musa = MusaConfig {
            reduction_ratio: 4,
            ..Default::default()
        };
        // same seed so backbones are identical; adapter params draw after
        let mut rng1 = ChaCha8Rng::seed_from_u64(5);
        let (store_with, vit_with) = small_vit(Some(&musa), 8, &mut rng1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let (store_without, vit_without) = small_vit(None, 8, &mut rng2);

        let img = ramp_image(8, 8);
        let mut g1 = Graph::new();
        let t1 = vit_with.encode(&mut g1, &store_with, &[img.clone()]).unwrap();
        let mut g2 = Graph::new();
        let t2 = vit_without.encode(&mut g2, &store_without, &[img]).unwrap();
        let a = g1.values(t1[0].node);
        let b = g2.values(t2[0].node);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// With adapters absent each block is the standard pre-norm transformer
    /// block; checked against a straightforward loop re-implementation.
    #[test]
    fn vanilla_block_matches_reference_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, vit) = small_vit(None, 8, &mut rng);
        let blk = &vit.encoder[0];
        let (l, c) = (4usize, 16usize);
        let x: Vec<f64> = (0..l * c).map(|_| randn(&mut rng)).collect();

        let mut g = Graph::new();
        let xin = g.constant(vec![l, c], x.clone());
        let out = vit.encoder_block_batched(&mut g, &store, blk, None, xin, 1, l);
        let got = g.values(out).to_vec();

        // reference: plain loops, no graph
        let pv = |id: ParamId| store.get(id).values.as_ref().clone();
        let ln = |x: &[f64], gamma: &[f64], beta: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for r in 0..x.len() / c {
                let row = &x[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                for i in 0..c {
                    out[r * c + i] = (row[i] - mean) * inv * gamma[i] + beta[i];
                }
            }
            out
        };
        let linear = |x: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize| -> Vec<f64> {
            let rows = x.len() / din;
            let mut out = vec![0.0; rows * dout];
            for r in 0..rows {
                for j in 0..dout {
                    let mut acc = b[j];
                    for i in 0..din {
                        acc += x[r * din + i] * w[i * dout + j];
                    }
                    out[r * dout + j] = acc;
                }
            }
            out
        };
        let h1 = ln(&x, &pv(blk.ln1.gamma), &pv(blk.ln1.beta));
        let q = linear(&h1, &pv(blk.attn.wq), &pv(blk.attn.bq), c, c);
        let k = linear(&h1, &pv(blk.attn.wk), &pv(blk.attn.bk), c, c);
        let v = linear(&h1, &pv(blk.attn.wv), &pv(blk.attn.bv), c, c);
        let heads = blk.attn.heads;
        let dh = c / heads;
        let mut attn_cat = vec![0.0; l * c];
        for h in 0..heads {
            for i in 0..l {
                let mut scores = vec![0.0; l];
                for j in 0..l {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        dot += q[i * c + h * dh + d] * k[j * c + h * dh + d];
                    }
                    scores[j] = dot / (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for d in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..l {
                        acc += exps[j] / sum * v[j * c + h * dh + d];
                    }
                    attn_cat[i * c + h * dh + d] = acc;
                }
            }
        }
        let attn_out = linear(&attn_cat, &pv(blk.attn.wo), &pv(blk.attn.bo), c, c);
        let x1: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let h2 = ln(&x1, &pv(blk.ln2.gamma), &pv(blk.ln2.beta));
        let hidden = c * vit.cfg.mlp_ratio;
        let m1 = linear(&h2, &pv(blk.mlp.w1), &pv(blk.mlp.b1), c, hidden);
        let m1g: Vec<f64> = m1
            .iter()
            .map(|&v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
            .collect();
        let m2 = linear(&m1g, &pv(blk.mlp.w2), &pv(blk.mlp.b2), hidden, c);
        let want: Vec<f64> = x1.iter().zip(&m2).map(|(a, b)| a + b).collect();

        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// Shifting the image by one patch permutes the token grid exactly when
    /// positional embeddings are zeroed, and does not when they are present.
    #[test]
    fn positional_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut store, vit) = small_vit(None, 8, &mut rng);
        let p = vit.cfg.patch_size;
        let img = ramp_image(8, 8);
        // shift left by one patch (wrap)
        let mut shifted = Image::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                shifted.set(y, x, img.get(y, (x + p) % 8));
            }
        }

        let run = |store: &ParamStore, im: &Image| -> Vec<f64> {
            let mut g = Graph::new();
            let ts = vit.patchify(&mut g, store, im, 0).unwrap();
            g.values(ts.node).to_vec()
        };

        // with positional embeddings: shifted tokens differ from any permutation
        let base = run(&store, &img);
        let shift = run(&store, &shifted);
        assert_ne!(base, shift);

        // zero the positional embedding: token (gy, gx) of shifted equals
        // token (gy, (gx+1) % gw) of the original
        let pos = vit.pos_embed;
        let n = store.get(pos).numel();
        store.get_mut(pos).values = Rc::new(vec![0.0; n]);
        let base0 = run(&store, &img);
        let shift0 = run(&store, &shifted);
        let (gw, c) = (vit.grid_w, vit.cfg.embed_dim);
        for gy in 0..vit.grid_h {
            for gx in 0..gw {
                let src = gy * gw + (gx + 1) % gw;
                let dst = gy * gw + gx;
                for i in 0..c {
                    assert!(
                        (shift0[dst * c + i] - base0[src * c + i]).abs() < 1e-15,
                        "permutation mismatch at token ({gy},{gx})"
                    );
                }
            }
        }
    }

    /// V=2 decode: swapping the two input views swaps the two outputs.
    #[test]
    fn decode_is_symmetric_under_view_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (store, vit) = small_vit(None, 8, &mut rng);
        let a = ramp_image(8, 8);
        let mut b = ramp_image(8, 8);
        b.data.iter_mut().for_each(|v| *v = 1.0 - *v);

        let run = |images: &[Image]| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let enc = vit.encode(&mut g, &store, images).unwrap();
            let dec = vit.decode(&mut g, &store, &enc).unwrap();
            dec.iter().map(|t| g.values(t.node).to_vec()).collect()
        };
        let ab = run(&[a.clone(), b.clone()]);
        let ba = run(&[b, a]);
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
        // shape preservation: L x C in, L x C out
        assert_eq!(ab[0].len(), 4 * 16);
    }

    /// V=1 decode depends only on that view (cross-attention degenerates away).
    #[test]
    fn single_view_decode_works() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (store, vit) = small_vit(None, 8, &mut rng);
        let mut g = Graph::new();
        let enc = vit.encode(&mut g, &store, &[ramp_image(8, 8)]).unwrap();
        let dec = vit.decode(&mut g, &store, &enc).unwrap();
        assert_eq!(dec.len(), 1);
        assert_eq!(g.shape(dec[0].node), &[4, 16]);
    }

    #[test]
    fn freeze_policy_controls_trainable_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let musa = MusaConfig {
            reduction_ratio: 4,
            ..Default::default()
        };
        let (mut store, _vit) = small_vit(Some(&musa), 8, &mut rng);
        freeze_backbone(&mut store, FreezePolicy::Backbone);
        let trainable = store.trainable_params();
        let total = store.total_params();
        assert!(trainable > 0);
        assert!(
            (trainable as f64) < 0.25 * total as f64,
            "trainable fraction {} too large",
            trainable as f64 / total as f64
        );
        freeze_backbone(&mut store, FreezePolicy::Nothing);
        assert_eq!(store.trainable_params(), store.total_params());
    }

    #[test]
    fn backbone_param_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = ViTConfig::default();
        let _vit = ViT::register(&mut store, &cfg, None, 64, 64, &mut rng);
        assert_eq!(
            store.total_params(),
            ViT::expected_backbone_param_count(&cfg, 8, 8)
        );
    }
}
