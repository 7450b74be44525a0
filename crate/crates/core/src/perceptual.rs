//! Pluggable perceptual loss.
//!
//! The default plug-in compares feature maps of a small fixed-random-filter
//! conv stack (seeded, never trained); it stands in for a pretrained
//! perceptual network while preserving the interface a full-scale port would
//! use. Unlike plain MSE it responds to structure, not just per-pixel error.

use crate::diff::{Graph, NodeId};
use crate::vit::randn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerceptualKind {
    None,
    FixedRandomConv,
}

/// Filters are derived from this fixed seed; they are constants, not
/// parameters, and never receive gradient.
const PROXY_SEED: u64 = 0x5eed_caf3;
const STAGE1_CH: usize = 8;
const STAGE2_CH: usize = 16;

pub struct PerceptualProxy {
    pw1: Vec<f64>,
    dw1: Vec<f64>,
    pw2: Vec<f64>,
    dw2: Vec<f64>,
}

impl Default for PerceptualProxy {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualProxy {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROXY_SEED);
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| randn(&mut rng) * scale).collect()
        };
        // depthwise filters are projected to zero spatial mean, making the
        // features band-pass: structure registers, flat shifts mostly do not
        let zero_mean = |mut f: Vec<f64>, k: usize| -> Vec<f64> {
            for ch in f.chunks_mut(k * k) {
                let m = ch.iter().sum::<f64>() / (k * k) as f64;
                for v in ch.iter_mut() {
                    *v -= m;
                }
            }
            f
        };
        PerceptualProxy {
            pw1: draw(STAGE1_CH * 3, 0.5),
            dw1: zero_mean(draw(STAGE1_CH * 25, 0.2), 5),
            pw2: draw(STAGE2_CH * STAGE1_CH, 0.3),
            dw2: zero_mean(draw(STAGE2_CH * 25, 0.2), 5),
        }
    }

    /// Feature map of an (H, W, 3) image node. Requires H, W divisible by 2.
    fn features(&self, g: &mut Graph, image: NodeId) -> NodeId {
        let s = g.shape(image).to_vec();
        assert_eq!(s.len(), 3, "perceptual proxy expects (H, W, 3)");
        let (h, w) = (s[0], s[1]);
        let chw = hwc_to_chw(g, image);
        // keep the path up to the first band-pass conv linear so flat
        // brightness shifts register only through window borders
        let pw1_w = g.constant(vec![STAGE1_CH, 3], self.pw1.clone());
        let zb1 = g.constant(vec![STAGE1_CH], vec![0.0; STAGE1_CH]);
        let f = g.conv2d_pointwise(chw, pw1_w, zb1);
        let dw1_w = g.constant(vec![STAGE1_CH, 5, 5], self.dw1.clone());
        let zb1b = g.constant(vec![STAGE1_CH], vec![0.0; STAGE1_CH]);
        let f = g.conv2d_depthwise(f, dw1_w, zb1b, 5);
        let f = g.gelu(f);
        let f = mean_pool2(g, f, STAGE1_CH, h, w);
        let pw2_w = g.constant(vec![STAGE2_CH, STAGE1_CH], self.pw2.clone());
        let zb2 = g.constant(vec![STAGE2_CH], vec![0.0; STAGE2_CH]);
        let f = g.conv2d_pointwise(f, pw2_w, zb2);
        let dw2_w = g.constant(vec![STAGE2_CH, 5, 5], self.dw2.clone());
        let zb2b = g.constant(vec![STAGE2_CH], vec![0.0; STAGE2_CH]);
        let f = g.conv2d_depthwise(f, dw2_w, zb2b, 5);
        g.gelu(f)
    }

    /// MSE between the two images' fixed-filter feature maps.
    pub fn loss(&self, g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        g.mse(fa, fb)
    }
}

/// (H, W, 3) -> (3, H, W) layout change as a gather.
fn hwc_to_chw(g: &mut Graph, image: NodeId) -> NodeId {
    let s = g.shape(image).to_vec();
    let (h, w) = (s[0], s[1]);
    let mut map = Vec::with_capacity(h * w * 3);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                map.push(((y * w + x) * 3 + c) as u32);
            }
        }
    }
    g.gather(image, Rc::new(map), vec![3, h, w])
}

/// 2x2 mean pooling over a (C, H, W) node.
fn mean_pool2(g: &mut Graph, f: NodeId, c: usize, h: usize, w: usize) -> NodeId {
    assert!(h % 2 == 0 && w % 2 == 0, "mean_pool2 needs even dims");
    let r = g.reshape(f, vec![c, h / 2, 2, w / 2, 2]);
    let m = g.mean_axis(r, 4);
    let m = g.mean_axis(m, 2);
    g.reshape(m, vec![c, h / 2, w / 2])
}
