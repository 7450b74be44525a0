//! Multi-Scale Adapter: token-to-grid reshape, averaged multi-kernel depthwise
//! convolution, pointwise conv + GELU, zero-initialized projection back into
//! the residual stream. Includes the optional per-token mini-grid branch.

use crate::diff::{Graph, NodeId, ParamId, ParamStore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MusaConfig {
    pub reduction_ratio: usize,
    pub kernel_sizes: Vec<usize>,
    pub mini_grid_enabled: bool,
    pub mini_grid_p: usize,
    /// When true, every adapter parameter starts at zero (the fully literal
    /// reading); default zeroes only the output projection, which preserves
    /// the identity-at-init guarantee without the all-zero gradient trap.
    pub all_zero_init: bool,
    /// Insert adapters into decoder blocks as well (default: encoder only).
    pub adapt_decoder: bool,
}

impl Default for MusaConfig {
    fn default() -> Self {
        MusaConfig {
            reduction_ratio: 4,
            kernel_sizes: vec![3, 5, 7],
            mini_grid_enabled: false,
            mini_grid_p: 4,
            all_zero_init: false,
            adapt_decoder: false,
        }
    }
}

impl MusaConfig {
    pub fn validate(&self, channels: usize) {
        assert!(
            self.reduction_ratio > 0 && channels % self.reduction_ratio == 0,
            "channel dim {channels} must be divisible by reduction ratio {}",
            self.reduction_ratio
        );
        for &k in &self.kernel_sizes {
            assert!(k % 2 == 1, "kernel sizes must be odd, got {k}");
        }
        if self.mini_grid_enabled {
            let p2 = self.mini_grid_p * self.mini_grid_p;
            assert!(
                channels % p2 == 0,
                "channel dim {channels} must be divisible by p^2 = {p2} for the mini-grid branch"
            );
        }
    }
}

struct MiniGridParams {
    weight: ParamId,
}

/// One adapter layer: W_down (C x C'), per-kernel depthwise filters over the
/// patch grid, a pointwise conv, and W_up (C' x C) back to the token stream.
pub struct MusaLayer {
    pub channels: usize,
    pub reduced: usize,
    pub cfg: MusaConfig,
    down: ParamId,
    dw: Vec<(ParamId, ParamId)>,
    pw_weight: ParamId,
    pw_bias: ParamId,
    up: ParamId,
    mini: Option<MiniGridParams>,
}

impl MusaLayer {
    /// Registers all layer parameters under `prefix` in the store.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cfg: &MusaConfig,
        rng: &mut ChaCha8Rng,
    ) -> MusaLayer {
        cfg.validate(channels);
        let reduced = channels / cfg.reduction_ratio;
        let init = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            if cfg.all_zero_init {
                vec![0.0; n]
            } else {
                (0..n).map(|_| crate::vit::randn(rng) * 0.02).collect()
            }
        };
        let down = store.register(
            format!("{prefix}.down"),
            vec![channels, reduced],
            init(channels * reduced, rng),
        );
        let mut dw = Vec::new();
        for &k in &cfg.kernel_sizes {
            let w = store.register(
                format!("{prefix}.dw{k}.weight"),
                vec![reduced, k, k],
                init(reduced * k * k, rng),
            );
            let b = store.register(
                format!("{prefix}.dw{k}.bias"),
                vec![reduced],
                vec![0.0; reduced],
            );
            dw.push((w, b));
        }
        let pw_weight = store.register(
            format!("{prefix}.pw.weight"),
            vec![reduced, reduced],
            init(reduced * reduced, rng),
        );
        let pw_bias = store.register(format!("{prefix}.pw.bias"), vec![reduced], vec![0.0; reduced]);
        // the output projection alone is always zero-initialized: with W_up = 0
        // the residual is identically zero and the layer is an exact identity
        let up = store.register(
            format!("{prefix}.up"),
            vec![reduced, channels],
            vec![0.0; reduced * channels],
        );
        let mini = cfg.mini_grid_enabled.then(|| {
            let p = cfg.mini_grid_p;
            let cm = channels / (p * p);
            MiniGridParams {
                weight: store.register(
                    format!("{prefix}.mini.weight"),
                    vec![cm, 3, 3],
                    vec![0.0; cm * 9],
                ),
            }
        });
        MusaLayer {
            channels,
            reduced,
            cfg: cfg.clone(),
            down,
            dw,
            pw_weight,
            pw_bias,
            up,
            mini,
        }
    }

    /// The adapter residual X_hat for a token matrix x of shape (L, C) whose
    /// tokens tile an h x w patch grid. Shape-preserving.
    pub fn residual(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        grid_h: usize,
        grid_w: usize,
    ) -> NodeId {
        let s = g.shape(x).to_vec();
        assert_eq!(s.len(), 2, "adapter input must be (L, C), got {s:?}");
        let (l, c) = (s[0], s[1]);
        assert_eq!(
            grid_h * grid_w,
            l,
            "token count {l} does not equal patch-grid area {grid_h}x{grid_w}"
        );
        assert_eq!(
            c, self.channels,
            "adapter built for C={}, got {c}",
            self.channels
        );
        let cr = self.reduced;

        // down-projection and reshape into the spatial patch grid
        let down = g.param(store, self.down);
        let y = g.matmul(x, down); // (L, C')
        let yt = g.transpose2d(y); // (C', L)
        let ym = g.reshape(yt, vec![cr, grid_h, grid_w]);

        // averaged multi-scale depthwise convolutions
        let mut acc: Option<NodeId> = None;
        for (&k, &(w, b)) in self.cfg.kernel_sizes.iter().zip(&self.dw) {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let conv = g.conv2d_depthwise(ym, wn, bn, k);
            acc = Some(match acc {
                None => conv,
                Some(a) => g.add(a, conv),
            });
        }
        let z = g.scale(
            acc.expect("at least one kernel"),
            1.0 / self.cfg.kernel_sizes.len() as f64,
        );

        // pointwise conv, activation, projection back to C
        let pw_w = g.param(store, self.pw_weight);
        let pw_b = g.param(store, self.pw_bias);
        let p = g.conv2d_pointwise(z, pw_w, pw_b);
        let a = g.gelu(p);
        let ar = g.reshape(a, vec![cr, l]);
        let at = g.transpose2d(ar); // (L, C')
        let up = g.param(store, self.up);
        let mut xhat = g.matmul(at, up); // (L, C)

        if let Some(mini) = &self.mini {
            let mg = self.mini_grid_residual(g, store, x, mini);
            xhat = g.add(xhat, mg);
        }
        xhat
    }

    /// Full adapter op: x + residual(x).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        grid_h: usize,
        grid_w: usize,
    ) -> NodeId {
        let r = self.residual(g, store, x, grid_h, grid_w);
        g.add(x, r)
    }

    /// Mini-grid branch: each token's C channels reinterpreted as a
    /// (C/p^2, p, p) map, one shared depthwise conv, and the result averaged
    /// over each channel's map before broadcasting back to token size. The
    /// sub-patch arrangement is unknown to the model, so the branch is
    /// expected to stay near-inert.
    fn mini_grid_residual(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mini: &MiniGridParams,
    ) -> NodeId {
        let s = g.shape(x).to_vec();
        let (l, c) = (s[0], s[1]);
        let p = self.cfg.mini_grid_p;
        let cm = c / (p * p);
        // (L, C) rows are already laid out as (cm, p, p) blocks per token,
        // so all tokens batch into one depthwise conv over L*cm channels
        let xm = g.reshape(x, vec![l * cm, p, p]);
        let wn = g.param(store, mini.weight);
        let wmap: Vec<u32> = (0..l * cm * 9).map(|i| (i % (cm * 9)) as u32).collect();
        let wt = g.gather(wn, Rc::new(wmap), vec![l * cm, 3, 3]);
        let zero_bias = g.constant(vec![l * cm], vec![0.0; l * cm]);
        let conv = g.conv2d_depthwise(xm, wt, zero_bias, 3);
        // spatial average per channel map, broadcast back over the block
        let flat = g.reshape(conv, vec![l * cm, p * p]);
        let avg = g.mean_axis(flat, 1); // (L*cm,)
        let back: Vec<u32> = (0..l * c)
            .map(|i| {
                let t = i / c;
                let ch = i % c;
                (t * cm + ch / (p * p)) as u32
            })
            .collect();
        let tiled = g.gather(avg, Rc::new(back), vec![l * c]);
        g.reshape(tiled, vec![l, c])
    }

    /// Closed-form parameter count for one layer at the given config.
    pub fn expected_param_count(channels: usize, cfg: &MusaConfig) -> usize {
        let cr = channels / cfg.reduction_ratio;
        let mut n = channels * cr; // down
        for &k in &cfg.kernel_sizes {
            n += cr * k * k + cr; // depthwise weight + bias
        }
        n += cr * cr + cr; // pointwise weight + bias
        n += cr * channels; // up
        if cfg.mini_grid_enabled {
            let cm = channels / (cfg.mini_grid_p * cfg.mini_grid_p);
            n += cm * 9;
        }
        n
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids()
            .iter()
            .map(|&id| store.get(id).numel())
            .sum()
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.down, self.pw_weight, self.pw_bias, self.up];
        for &(w, b) in &self.dw {
            ids.push(w);
            ids.push(b);
        }
        if let Some(m) = &self.mini {
            ids.push(m.weight);
        }
        ids
    }

    /// Overwrites every parameter with seeded random values (test hook for
    /// exercising the non-identity regime).
    pub fn randomize_all(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
        for id in self.param_ids() {
            let p = store.get_mut(id);
            let n = p.numel();
            p.values = Rc::new((0..n).map(|_| crate::vit::randn(rng) * std).collect());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference_check_multi, DiffArray};
    use rand::Rng;
    use rand::SeedableRng;

    fn random_tokens(l: usize, c: usize, rng: &mut ChaCha8Rng) -> DiffArray {
        DiffArray::new(
            vec![l, c],
            (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    /// Identity at init is exact: zero output projection means a zero
    /// residual, so forward(x) == x bit for bit.
    #[test]
    fn zero_initialized_layer_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = MusaLayer::register(
            &mut store,
            "adapter",
            16,
            &MusaConfig {
                reduction_ratio: 4,
                ..Default::default()
            },
            &mut rng,
        );
        let x = random_tokens(4, 16, &mut rng);
        let mut g = Graph::new();
        let xid = g.input(&x);
        let out = layer.forward(&mut g, &store, xid, 2, 2);
        assert_eq!(g.values(out), x.values.as_slice());
    }

    #[test]
    fn all_zero_init_flag_is_also_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = MusaConfig {
            reduction_ratio: 2,
            all_zero_init: true,
            ..Default::default()
        };
        let layer = MusaLayer::register(&mut store, "adapter", 8, &cfg, &mut rng);
        let x = random_tokens(4, 8, &mut rng);
        let mut g = Graph::new();
        let xid = g.input(&x);
        let out = layer.forward(&mut g, &store, xid, 2, 2);
        assert_eq!(g.values(out), x.values.as_slice());
    }

    /// C=64, r=4, h=w=8: the reduced spatial map has shape 16 x 8 x 8.
    #[test]
    fn reduced_map_shape_is_c_over_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = MusaConfig::default();
        let layer = MusaLayer::register(&mut store, "adapter", 64, &cfg, &mut rng);
        assert_eq!(layer.reduced, 16);
        let x = random_tokens(64, 64, &mut rng);
        let mut g = Graph::new();
        let xid = g.input(&x);
        let down = g.param(&store, layer.down);
        let y = g.matmul(xid, down);
        let yt = g.transpose2d(y);
        let ym = g.reshape(yt, vec![16, 8, 8]);
        assert_eq!(g.shape(ym), &[16, 8, 8]);
    }

    /// Literal loop re-implementation of the down-project / multi-kernel
    /// depthwise / pointwise / GELU / up-project chain, written independently.
    #[test]
    fn matches_loop_based_oracle() {
        let (l, c, r): (usize, usize, usize) = (4, 8, 2);
        let (h, w) = (2, 2);
        let cr = c / r;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = MusaConfig {
            reduction_ratio: r,
            kernel_sizes: vec![3, 5, 7],
            ..Default::default()
        };
        let layer = MusaLayer::register(&mut store, "adapter", c, &cfg, &mut rng);
        layer.randomize_all(&mut store, &mut rng, 0.5);

        let x = random_tokens(l, c, &mut rng);
        let mut g = Graph::new();
        let xid = g.input(&x);
        let out = layer.forward(&mut g, &store, xid, h, w);
        let got = g.values(out).to_vec();

        // oracle
        let pv = |id: ParamId| store.get(id).values.as_ref().clone();
        let down = pv(layer.down);
        let up = pv(layer.up);
        let pw_w = pv(layer.pw_weight);
        let pw_b = pv(layer.pw_bias);
        // y[t][j] = sum_i x[t][i] * down[i][j], laid out on the grid
        let mut spatial = vec![0.0; cr * h * w]; // [j][gy][gx]
        for t in 0..l {
            let (gy, gx) = (t / w, t % w);
            for j in 0..cr {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += x.values[t * c + i] * down[i * cr + j];
                }
                spatial[j * h * w + gy * w + gx] = acc;
            }
        }
        // averaged depthwise convs
        let mut z = vec![0.0; cr * h * w];
        for (ki, &k) in cfg.kernel_sizes.iter().enumerate() {
            let wk = pv(layer.dw[ki].0);
            let bk = pv(layer.dw[ki].1);
            let rad = k as isize / 2;
            for j in 0..cr {
                for gy in 0..h as isize {
                    for gx in 0..w as isize {
                        let mut acc = bk[j];
                        for dy in -rad..=rad {
                            for dx in -rad..=rad {
                                let (sy, sx) = (gy + dy, gx + dx);
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let kw = wk[j * k * k
                                    + (dy + rad) as usize * k
                                    + (dx + rad) as usize];
                                acc += spatial[j * h * w + sy as usize * w + sx as usize] * kw;
                            }
                        }
                        z[j * h * w + (gy as usize) * w + gx as usize] += acc;
                    }
                }
            }
        }
        for v in &mut z {
            *v /= 3.0;
        }
        // pointwise conv + gelu
        let mut act = vec![0.0; cr * h * w];
        for o in 0..cr {
            for px in 0..h * w {
                let mut acc = pw_b[o];
                for i in 0..cr {
                    acc += pw_w[o * cr + i] * z[i * h * w + px];
                }
                act[o * h * w + px] =
                    0.5 * acc * (1.0 + libm::erf(acc / std::f64::consts::SQRT_2));
            }
        }
        // up-project and residual add
        let mut want = x.values.clone();
        for t in 0..l {
            let (gy, gx) = (t / w, t % w);
            for i in 0..c {
                let mut acc = 0.0;
                for j in 0..cr {
                    acc += act[j * h * w + gy * w + gx] * up[j * c + i];
                }
                want[t * c + i] += acc;
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// Composed adapter passes the finite-difference gradient check.
    #[test]
    fn gradient_check_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = MusaConfig {
            reduction_ratio: 2,
            ..Default::default()
        };
        let layer = MusaLayer::register(&mut store, "adapter", 8, &cfg, &mut rng);
        layer.randomize_all(&mut store, &mut rng, 0.3);
        let x = random_tokens(4, 8, &mut rng);
        let report = finite_difference_check_multi(&[x], 1e-5, |g, ids| {
            let out = layer.forward(g, &store, ids[0], 2, 2);
            let sq = g.mul(out, out);
            (g.sum_all(sq), 0)
        });
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    /// Depthwise convs are the only spatial mixing: perturbing one token moves
    /// outputs only within Chebyshev distance floor(k_max / 2) = 3.
    #[test]
    fn spatial_locality_is_bounded_by_max_kernel() {
        let (h, w, c) = (8usize, 8usize, 8usize);
        let l = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cfg = MusaConfig {
            reduction_ratio: 2,
            ..Default::default()
        };
        let layer = MusaLayer::register(&mut store, "adapter", c, &cfg, &mut rng);
        layer.randomize_all(&mut store, &mut rng, 0.5);
        let x = random_tokens(l, c, &mut rng);

        let run = |x: &DiffArray| -> Vec<f64> {
            let mut g = Graph::new();
            let xid = g.input(x);
            let out = layer.forward(&mut g, &store, xid, h, w);
            g.values(out).to_vec()
        };
        let base = run(&x);
        let mut perturbed = x.clone();
        let (ty, tx) = (4usize, 3usize);
        perturbed.values[(ty * w + tx) * c + 2] += 1.0;
        let out = run(&perturbed);
        let mut changed_inside = false;
        for t in 0..l {
            let (gy, gx) = (t / w, t % w);
            let cheb = gy.abs_diff(ty).max(gx.abs_diff(tx));
            let changed = (0..c).any(|i| (out[t * c + i] - base[t * c + i]).abs() > 1e-12);
            if cheb > 3 {
                assert!(!changed, "token ({gy},{gx}) outside radius changed");
            } else if changed {
                changed_inside = true;
            }
        }
        assert!(changed_inside, "perturbation had no effect at all");
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (c, cfg) in [
            (64, MusaConfig::default()),
            (
                64,
                MusaConfig {
                    mini_grid_enabled: true,
                    ..Default::default()
                },
            ),
            (
                32,
                MusaConfig {
                    reduction_ratio: 2,
                    kernel_sizes: vec![3, 5],
                    ..Default::default()
                },
            ),
        ] {
            let mut store = ParamStore::new();
            let layer = MusaLayer::register(&mut store, "adapter", c, &cfg, &mut rng);
            assert_eq!(
                layer.param_count(&store),
                MusaLayer::expected_param_count(c, &cfg)
            );
            assert_eq!(
                store.total_params(),
                MusaLayer::expected_param_count(c, &cfg)
            );
        }
    }

    /// p=4, C=64: each token expands to a 4 x 4 map with 4 channels.
    #[test]
    fn mini_grid_shape_and_zero_init_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = MusaConfig {
            mini_grid_enabled: true,
            ..Default::default()
        };
        let layer = MusaLayer::register(&mut store, "adapter", 64, &cfg, &mut rng);
        let mini = layer.mini.as_ref().unwrap();
        assert_eq!(store.get(mini.weight).shape, vec![4, 3, 3]);
        let x = random_tokens(4, 64, &mut rng);
        let mut g = Graph::new();
        let xid = g.input(&x);
        let out = layer.forward(&mut g, &store, xid, 2, 2);
        assert_eq!(g.values(out), x.values.as_slice());
    }

    #[test]
    fn rejects_indivisible_channels() {
        let cfg = MusaConfig::default();
        let res = std::panic::catch_unwind(|| cfg.validate(30));
        assert!(res.is_err());
    }
}
