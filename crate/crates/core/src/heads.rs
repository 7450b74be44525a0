//! The point head (pointmaps + relative poses) and the Gaussian head
//! (pixel-aligned Gaussian parameters) decoding fused tokens.
//!
//! Both heads are per-token MLPs whose outputs pixel-unshuffle each token to
//! its P x P pixels. Gaussian means are parameterized as pointmap position
//! plus a bounded learned offset; the DC color is anchored at the source
//! pixel so a zero-initialized head reproduces input colors.

use crate::diff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianPrimitive, GaussianSet, SH_C0, SH_COEFFS};
use crate::img::Image;
use crate::linalg::{mat3_to_quat, mat3_transpose, Mat3, Vec3};
use crate::pose::CameraPose;
use crate::vit::{randn, TokenStream};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Per-pixel Gaussian parameter block: offset(3) logit(1) log_scale(3)
/// quat(4) sh(12).
pub const GAUSSIAN_PIXEL_PARAMS: usize = 3 + 1 + 3 + 4 + SH_COEFFS;
/// Per-pixel point head block: canonical xyz(3) self xyz(3) confidence(1).
pub const POINT_PIXEL_PARAMS: usize = 7;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Per-pixel feature width produced by the token expansion.
    pub pixel_feature_dim: usize,
    /// Hidden width of the shared per-pixel MLP, as a multiple of
    /// pixel_feature_dim.
    pub hidden_mult: usize,
    /// 0 or 1; degree-1 adds the linear view-dependent SH band.
    pub sh_degree: usize,
    /// Log-unit clamp applied to predicted log scales.
    pub scale_clamp: (f64, f64),
    /// Learned mean offsets are offset_scale * tanh(raw), scene units.
    pub offset_scale: f64,
    /// Initial bias on the log-scale outputs (splat size at init).
    pub log_scale_bias: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            pixel_feature_dim: 8,
            hidden_mult: 2,
            sh_degree: 1,
            scale_clamp: (-8.0, 2.0),
            offset_scale: 0.15,
            log_scale_bias: -3.5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) {
        assert!(self.scale_clamp.0.is_finite() && self.scale_clamp.1.is_finite());
        assert!(self.scale_clamp.0 < self.scale_clamp.1);
        assert!(self.sh_degree <= 1, "only SH degrees 0 and 1 are supported");
        assert!(self.hidden_mult >= 1 && self.pixel_feature_dim >= 1);
    }
}

/// Graph handles for the packed per-Gaussian parameter arrays of one batch.
pub struct GaussianNodes {
    pub count: usize,
    pub means: NodeId,
    pub opacity_logits: NodeId,
    pub log_scales: NodeId,
    pub rotations: NodeId,
    pub sh: NodeId,
}

impl GaussianNodes {
    /// Extracts a concrete GaussianSet from the graph values.
    pub fn to_set(&self, g: &Graph) -> GaussianSet {
        let means = g.values(self.means);
        let logits = g.values(self.opacity_logits);
        let scales = g.values(self.log_scales);
        let quats = g.values(self.rotations);
        let shs = g.values(self.sh);
        let mut set = GaussianSet::default();
        for i in 0..self.count {
            let qn = [
                quats[i * 4],
                quats[i * 4 + 1],
                quats[i * 4 + 2],
                quats[i * 4 + 3],
            ];
            let mut sh = [0.0; SH_COEFFS];
            sh.copy_from_slice(&shs[i * SH_COEFFS..(i + 1) * SH_COEFFS]);
            set.primitives.push(GaussianPrimitive {
                mean: [means[i * 3], means[i * 3 + 1], means[i * 3 + 2]],
                opacity_logit: logits[i],
                log_scale: [scales[i * 3], scales[i * 3 + 1], scales[i * 3 + 2]],
                rotation: crate::linalg::quat_normalize(qn),
                sh,
            });
        }
        set
    }
}

pub struct GaussianHead {
    pub cfg: HeadConfig,
    pub channels: usize,
    pub patch: usize,
    expand_w: ParamId,
    expand_b: ParamId,
    pix_w1: ParamId,
    pix_b1: ParamId,
    pix_w2: ParamId,
    pix_b2: ParamId,
}

impl GaussianHead {
    pub fn register(
        store: &mut ParamStore,
        channels: usize,
        patch: usize,
        cfg: &HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> GaussianHead {
        cfg.validate();
        let f = cfg.pixel_feature_dim;
        let hidden = cfg.hidden_mult * f;
        let expanded = patch * patch * f;
        let expand_w = store.register(
            "heads.gaussian.expand.w".to_string(),
            vec![channels, expanded],
            (0..channels * expanded).map(|_| randn(rng) * 0.02).collect(),
        );
        let expand_b = store.register(
            "heads.gaussian.expand.b".to_string(),
            vec![expanded],
            vec![0.0; expanded],
        );
        let pix_w1 = store.register(
            "heads.gaussian.pix.w1".to_string(),
            vec![f, hidden],
            (0..f * hidden).map(|_| randn(rng) * 0.1).collect(),
        );
        let pix_b1 = store.register(
            "heads.gaussian.pix.b1".to_string(),
            vec![hidden],
            vec![0.0; hidden],
        );
        // output layer: zero weights; bias zero except the log-scale slots,
        // which start at log_scale_bias so initial splats are pixel-sized
        let pix_w2 = store.register(
            "heads.gaussian.pix.w2".to_string(),
            vec![hidden, GAUSSIAN_PIXEL_PARAMS],
            vec![0.0; hidden * GAUSSIAN_PIXEL_PARAMS],
        );
        let mut b2v = vec![0.0; GAUSSIAN_PIXEL_PARAMS];
        for k in 0..3 {
            b2v[4 + k] = cfg.log_scale_bias;
        }
        let pix_b2 = store.register(
            "heads.gaussian.pix.b2".to_string(),
            vec![GAUSSIAN_PIXEL_PARAMS],
            b2v,
        );
        GaussianHead {
            cfg: cfg.clone(),
            channels,
            patch,
            expand_w,
            expand_b,
            pix_w1,
            pix_b1,
            pix_w2,
            pix_b2,
        }
    }

    /// Zeroes the whole output layer (the behavior-contract initialization).
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        for id in [self.pix_w2, self.pix_b2] {
            let p = store.get_mut(id);
            let n = p.numel();
            p.values = Rc::new(vec![0.0; n]);
        }
    }

    pub fn expected_param_count(channels: usize, patch: usize, cfg: &HeadConfig) -> usize {
        let f = cfg.pixel_feature_dim;
        let hidden = cfg.hidden_mult * f;
        let expanded = patch * patch * f;
        channels * expanded + expanded          // token expansion
            + f * hidden + hidden               // per-pixel mlp in
            + hidden * GAUSSIAN_PIXEL_PARAMS + GAUSSIAN_PIXEL_PARAMS // out
    }

    /// Decodes fused tokens into pixel-aligned Gaussians. `mean_bases` holds
    /// one (H*W*3) canonical-frame position array per view (the point head's
    /// mu estimate); `images` provide the DC color anchors. N = V*H*W.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        decoded: &[TokenStream],
        images: &[Image],
        mean_bases: &[Vec<f64>],
    ) -> Result<GaussianNodes> {
        if decoded.len() != images.len() || decoded.len() != mean_bases.len() {
            return Err(Error::invalid(format!(
                "gaussian_head: {} token grids vs {} images vs {} mean bases",
                decoded.len(),
                images.len(),
                mean_bases.len()
            )));
        }
        let p = self.patch;
        let f = self.cfg.pixel_feature_dim;
        let ew = g.param(store, self.expand_w);
        let eb = g.param(store, self.expand_b);
        let pw1 = g.param(store, self.pix_w1);
        let pb1 = g.param(store, self.pix_b1);
        let pw2 = g.param(store, self.pix_w2);
        let pb2 = g.param(store, self.pix_b2);

        let mut per_view: Vec<NodeId> = Vec::new();
        let mut bases_all: Vec<f64> = Vec::new();
        let mut color_anchor: Vec<f64> = Vec::new();
        let mut total = 0usize;
        for ((ts, img), base) in decoded.iter().zip(images).zip(mean_bases) {
            let (gh, gw) = (ts.grid_h, ts.grid_w);
            if gh * p != img.height || gw * p != img.width {
                return Err(Error::invalid(format!(
                    "gaussian_head: token grid {gh}x{gw} (P={p}) does not match image {}x{}",
                    img.height, img.width
                )));
            }
            if base.len() != img.height * img.width * 3 {
                return Err(Error::invalid("gaussian_head: mean base size mismatch"));
            }
            // token expansion to per-pixel features, then pixel-unshuffle
            let expanded = {
                let a = g.matmul(ts.node, ew);
                let a = g.add_bias(a, eb); // (L, P*P*F)
                g.gelu(a)
            };
            let map = unshuffle_map(gh, gw, p, f);
            let n_pix = gh * gw * p * p;
            let feat = g.gather(expanded, map, vec![n_pix, f]);
            // shared per-pixel MLP to the parameter block
            let h = {
                let a = g.matmul(feat, pw1);
                let a = g.add_bias(a, pb1);
                g.gelu(a)
            };
            let raw = g.matmul(h, pw2);
            let raw = g.add_bias(raw, pb2); // (n_pix, K)
            per_view.push(raw);
            bases_all.extend_from_slice(base);
            // color anchor: dc coefficient reproducing the source pixel
            for y in 0..img.height {
                for x in 0..img.width {
                    let rgb = img.get(y, x);
                    for c in rgb {
                        color_anchor.push((c - 0.5) / SH_C0);
                    }
                }
            }
            total += n_pix;
        }
        let all = if per_view.len() == 1 {
            per_view[0]
        } else {
            g.concat(&per_view, 0)
        }; // (N, K)

        let k = GAUSSIAN_PIXEL_PARAMS;
        debug_assert_eq!(g.shape(all), &[total, k]);
        let offsets_raw = g.slice(all, 1, 0, 3);
        let logits = {
            let s = g.slice(all, 1, 3, 1);
            g.reshape(s, vec![total])
        };
        let scales_raw = g.slice(all, 1, 4, 3);
        let quats_raw = g.slice(all, 1, 7, 4);
        let sh_raw = g.slice(all, 1, 11, SH_COEFFS);

        // means: pointmap base + bounded offset
        let base_node = g.constant(vec![total, 3], bases_all);
        let t = g.tanh(offsets_raw);
        let off = g.scale(t, self.cfg.offset_scale);
        let means = g.add(base_node, off);

        let scales = g.clamp(scales_raw, self.cfg.scale_clamp.0, self.cfg.scale_clamp.1);

        // quaternions: raw + identity; the renderer normalizes with gradient
        let identity = g.constant(vec![4], vec![1.0, 0.0, 0.0, 0.0]);
        let quats = g.add_bias(quats_raw, identity);

        // SH: anchor dc at the source pixel color; optionally zero the
        // degree-1 band
        let mut anchor = vec![0.0; total * SH_COEFFS];
        for n in 0..total {
            for c in 0..3 {
                anchor[n * SH_COEFFS + c * 4] = color_anchor[n * 3 + c];
            }
        }
        let sh_band = if self.cfg.sh_degree == 0 {
            let mut mask = vec![0.0; SH_COEFFS];
            for c in 0..3 {
                mask[c * 4] = 1.0;
            }
            let mask_node = g.constant(vec![total * SH_COEFFS], mask.repeat(total));
            let flat = g.reshape(sh_raw, vec![total * SH_COEFFS]);
            let masked = g.mul(flat, mask_node);
            g.reshape(masked, vec![total, SH_COEFFS])
        } else {
            sh_raw
        };
        let anchor_node = g.constant(vec![total, SH_COEFFS], anchor);
        let sh = g.add(sh_band, anchor_node);

        Ok(GaussianNodes {
            count: total,
            means,
            opacity_logits: logits,
            log_scales: scales,
            rotations: quats,
            sh,
        })
    }
}

/// Gather map from (L, P*P*K) token-major rows to (H*W, K) pixel-major rows.
fn unshuffle_map(gh: usize, gw: usize, p: usize, k: usize) -> Rc<Vec<u32>> {
    let (h, w) = (gh * p, gw * p);
    let row = p * p * k;
    let mut map = Vec::with_capacity(h * w * k);
    for y in 0..h {
        for x in 0..w {
            let t = (y / p) * gw + (x / p);
            let slot = (y % p) * p + (x % p);
            for e in 0..k {
                map.push((t * row + slot * k + e) as u32);
            }
        }
    }
    Rc::new(map)
}

/// One view's recovered pointmaps and pose.
pub struct PointHeadView {
    /// (H*W, 3) canonical-frame points.
    pub canonical: NodeId,
    /// (H*W, 3) self-frame points.
    pub self_frame: NodeId,
    /// (H*W,) non-negative confidence.
    pub confidence: NodeId,
    /// Rigid transform taking this view's camera coords to the canonical
    /// frame (identity for view 0 by construction).
    pub cam_to_canonical: CameraPose,
    /// World(canonical)-to-camera pose for rendering this view.
    pub render_pose: CameraPose,
    pub degenerate: bool,
}

pub struct PointHead {
    pub channels: usize,
    pub patch: usize,
    pub pixel_feature_dim: usize,
    /// Raw xyz outputs are multiplied by this working-range scale.
    pub output_scale: f64,
    expand_w: ParamId,
    expand_b: ParamId,
    pix_w1: ParamId,
    pix_b1: ParamId,
    pix_w2: ParamId,
    pix_b2: ParamId,
}

impl PointHead {
    pub fn register(
        store: &mut ParamStore,
        channels: usize,
        patch: usize,
        cfg: &HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> PointHead {
        let f = cfg.pixel_feature_dim;
        let hidden = cfg.hidden_mult * f;
        let expanded = patch * patch * f;
        PointHead {
            channels,
            patch,
            pixel_feature_dim: f,
            output_scale: 4.0,
            expand_w: store.register(
                "heads.point.expand.w".to_string(),
                vec![channels, expanded],
                (0..channels * expanded).map(|_| randn(rng) * 0.02).collect(),
            ),
            expand_b: store.register(
                "heads.point.expand.b".to_string(),
                vec![expanded],
                vec![0.0; expanded],
            ),
            pix_w1: store.register(
                "heads.point.pix.w1".to_string(),
                vec![f, hidden],
                (0..f * hidden).map(|_| randn(rng) * 0.1).collect(),
            ),
            pix_b1: store.register(
                "heads.point.pix.b1".to_string(),
                vec![hidden],
                vec![0.0; hidden],
            ),
            pix_w2: store.register(
                "heads.point.pix.w2".to_string(),
                vec![hidden, POINT_PIXEL_PARAMS],
                (0..hidden * POINT_PIXEL_PARAMS)
                    .map(|_| randn(rng) * 0.1)
                    .collect(),
            ),
            pix_b2: store.register(
                "heads.point.pix.b2".to_string(),
                vec![POINT_PIXEL_PARAMS],
                vec![0.0; POINT_PIXEL_PARAMS],
            ),
        }
    }

    pub fn expected_param_count(channels: usize, patch: usize, cfg: &HeadConfig) -> usize {
        let f = cfg.pixel_feature_dim;
        let hidden = cfg.hidden_mult * f;
        let expanded = patch * patch * f;
        channels * expanded + expanded
            + f * hidden + hidden
            + hidden * POINT_PIXEL_PARAMS + POINT_PIXEL_PARAMS
    }

    /// Predicts per-view pointmaps (canonical + self frame) and recovers
    /// relative poses by orthogonal-Procrustes alignment between each view's
    /// self-frame pointmap and its canonical-frame pointmap.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        decoded: &[TokenStream],
    ) -> Result<Vec<PointHeadView>> {
        if decoded.len() < 2 {
            return Err(Error::invalid("point_head: need at least two views"));
        }
        let p = self.patch;
        let f = self.pixel_feature_dim;
        let ew = g.param(store, self.expand_w);
        let eb = g.param(store, self.expand_b);
        let pw1 = g.param(store, self.pix_w1);
        let pb1 = g.param(store, self.pix_b1);
        let pw2 = g.param(store, self.pix_w2);
        let pb2 = g.param(store, self.pix_b2);
        let mut out = Vec::with_capacity(decoded.len());
        for (vi, ts) in decoded.iter().enumerate() {
            let (gh, gw) = (ts.grid_h, ts.grid_w);
            let expanded = {
                let a = g.matmul(ts.node, ew);
                let a = g.add_bias(a, eb);
                g.gelu(a)
            };
            let map = unshuffle_map(gh, gw, p, f);
            let n_pix = gh * gw * p * p;
            let feat = g.gather(expanded, map, vec![n_pix, f]);
            let h = {
                let a = g.matmul(feat, pw1);
                let a = g.add_bias(a, pb1);
                g.gelu(a)
            };
            let raw = g.matmul(h, pw2);
            let px = g.add_bias(raw, pb2);
            let canonical_raw = g.slice(px, 1, 0, 3);
            let canonical = g.scale(canonical_raw, self.output_scale);
            let self_raw = g.slice(px, 1, 3, 3);
            let self_frame = g.scale(self_raw, self.output_scale);
            let conf_raw = g.slice(px, 1, 6, 1);
            let conf = {
                let s = g.softplus(conf_raw);
                g.reshape(s, vec![n_pix])
            };
            let (cam_to_canonical, degenerate) = if vi == 0 {
                (CameraPose::identity(), false)
            } else {
                let a = g.values(self_frame);
                let b = g.values(canonical);
                let wgt = g.values(conf);
                let pts_a: Vec<Vec3> = (0..n_pix).map(|i| [a[i * 3], a[i * 3 + 1], a[i * 3 + 2]]).collect();
                let pts_b: Vec<Vec3> = (0..n_pix).map(|i| [b[i * 3], b[i * 3 + 1], b[i * 3 + 2]]).collect();
                let (rot, t, degenerate) = procrustes(&pts_a, &pts_b, Some(wgt));
                (
                    CameraPose {
                        rotation: mat3_to_quat(&rot),
                        translation: t,
                    },
                    degenerate,
                )
            };
            let render_pose = crate::pose::pose_inverse(&cam_to_canonical);
            out.push(PointHeadView {
                canonical,
                self_frame,
                confidence: conf,
                cam_to_canonical,
                render_pose,
                degenerate,
            });
        }
        Ok(out)
    }
}

/// Weighted orthogonal Procrustes: the rigid (R, t) minimizing
/// sum w_i |R a_i + t - b_i|^2. Returns identity with the degenerate flag
/// set when the correspondence set is rank-deficient.
pub fn procrustes(a: &[Vec3], b: &[Vec3], weights: Option<&[f64]>) -> (Mat3, Vec3, bool) {
    let n = a.len();
    assert_eq!(n, b.len(), "procrustes: point count mismatch");
    let identity = (crate::linalg::MAT3_IDENTITY, [0.0; 3], true);
    if n < 3 {
        return identity;
    }
    let wsum: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => n as f64,
    };
    if wsum <= 1e-12 {
        return identity;
    }
    let wval = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut ca = [0.0f64; 3];
    let mut cb = [0.0f64; 3];
    for i in 0..n {
        let w = wval(i);
        for k in 0..3 {
            ca[k] += w * a[i][k];
            cb[k] += w * b[i][k];
        }
    }
    for k in 0..3 {
        ca[k] /= wsum;
        cb[k] /= wsum;
    }
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    for i in 0..n {
        let w = wval(i);
        for r in 0..3 {
            for c in 0..3 {
                h[(c, r)] += w * (a[i][r] - ca[r]) * (b[i][c] - cb[c]);
            }
        }
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    // rank-deficient correspondences (points on a line or a point)
    if sv[1] <= 1e-9 * sv[0].max(1e-300) || !sv[0].is_finite() || sv[0] == 0.0 {
        return identity;
    }
    let d = (u * vt).determinant().signum();
    let s = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let rot_na = u * s * vt;
    let mut rot = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            rot[r][c] = rot_na[(r, c)];
        }
    }
    let ra = crate::linalg::mat3_mul_vec3(&rot, ca);
    let t = crate::linalg::sub3(cb, ra);
    (rot, t, false)
}

/// Convenience: rigid transform as a CameraPose-shaped struct applied to a
/// point. Note procrustes returns b ~ R a + t.
pub fn apply_rigid(rot: &Mat3, t: Vec3, p: Vec3) -> Vec3 {
    crate::linalg::add3(crate::linalg::mat3_mul_vec3(rot, p), t)
}

/// Exports one view's canonical pointmap as a PLY cloud.
pub fn export_pointmap_ply(
    g: &Graph,
    view: &PointHeadView,
    height: usize,
    width: usize,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let vals = g.values(view.canonical);
    let conf = g.values(view.confidence);
    let mut pm = crate::pointmap::Pointmap::new(0, height, width);
    pm.points.copy_from_slice(vals);
    pm.confidence.copy_from_slice(conf);
    pm.export_ply(path, None)
}

pub fn rigid_to_pose(rot: &Mat3, t: Vec3) -> CameraPose {
    CameraPose {
        rotation: mat3_to_quat(rot),
        translation: t,
    }
}

/// Inverse of a rigid transform expressed as (R, t).
pub fn rigid_inverse(rot: &Mat3, t: Vec3) -> (Mat3, Vec3) {
    let rt = mat3_transpose(rot);
    let ti = crate::linalg::scale3(crate::linalg::mat3_mul_vec3(&rt, t), -1.0);
    (rt, ti)
}
