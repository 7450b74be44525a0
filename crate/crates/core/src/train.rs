//! Losses, the AdamW optimizer with global-norm clipping and decoupled
//! weight decay, and a freezing-aware step.

use crate::diff::{Graph, NodeId, ParamStore};
use crate::perceptual::{PerceptualKind, PerceptualProxy};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_rgb: f64,
    pub lambda_aug: f64,
    pub lambda_mse: f64,
    pub lambda_lpips: f64,
    pub perceptual: PerceptualKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_rgb: 1.0,
            lambda_aug: 0.05,
            lambda_mse: 1.0,
            lambda_lpips: 0.2,
            perceptual: PerceptualKind::FixedRandomConv,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) {
        assert!(
            self.lambda_rgb >= 0.0
                && self.lambda_aug >= 0.0
                && self.lambda_mse >= 0.0
                && self.lambda_lpips >= 0.0,
            "loss weights must be non-negative"
        );
    }
}

/// lambda_mse * MSE + lambda_lpips * perceptual, between (H, W, 3) nodes.
pub fn rgb_loss(
    g: &mut Graph,
    render: NodeId,
    target: NodeId,
    cfg: &LossConfig,
    proxy: Option<&PerceptualProxy>,
) -> NodeId {
    assert_eq!(
        g.shape(render),
        g.shape(target),
        "rgb_loss: incompatible shapes {:?} vs {:?}",
        g.shape(render),
        g.shape(target)
    );
    let mse = g.mse(render, target);
    let mut loss = g.scale(mse, cfg.lambda_mse);
    if cfg.lambda_lpips > 0.0 {
        if let (PerceptualKind::FixedRandomConv, Some(p)) = (cfg.perceptual, proxy) {
            let perc = p.loss(g, render, target);
            let perc = g.scale(perc, cfg.lambda_lpips);
            loss = g.add(loss, perc);
        }
    }
    loss
}

/// lambda_rgb * rgb + lambda_aug * aug.
pub fn total_loss(g: &mut Graph, rgb: NodeId, aug: Option<NodeId>, cfg: &LossConfig) -> NodeId {
    let mut total = g.scale(rgb, cfg.lambda_rgb);
    if let Some(a) = aug {
        let weighted = g.scale(a, cfg.lambda_aug);
        total = g.add(total, weighted);
    }
    total
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 5e-5,
            weight_decay: 0.05,
            clip_norm: 0.5,
            batch_size: 4,
            iterations: 2000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) {
        assert!(self.learning_rate > 0.0, "learning rate must be positive");
    }
}

/// Global L2 norm over trainable parameter gradients.
pub fn grad_global_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|p| !p.frozen)
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scales all trainable gradients so their global norm is at most `clip`.
/// Returns (pre-clip norm, post-clip norm).
pub fn clip_grad_norm(store: &mut ParamStore, clip: f64) -> (f64, f64) {
    let pre = grad_global_norm(store);
    if pre > clip && pre > 0.0 {
        let scale = clip / pre;
        for p in store.iter_mut() {
            if p.frozen {
                continue;
            }
            for g in &mut p.grad {
                *g *= scale;
            }
        }
        (pre, clip)
    } else {
        (pre, pre)
    }
}

/// AdamW: adaptive moments with decoupled weight decay. Moment buffers are
/// keyed by parameter name and lazily created.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        cfg.validate();
        AdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Frozen parameters
    /// are untouched. Gradients are left as-is; callers zero them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let values = Rc::make_mut(&mut p.values);
            for i in 0..values.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                // decoupled weight decay, then the adaptive step
                values[i] -= self.lr * self.weight_decay * values[i];
                values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Everything one optimizer step reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub rgb_loss: f64,
    pub aug_loss: f64,
    pub grad_norm_pre_clip: f64,
    pub grad_norm_post_clip: f64,
    pub wall_ms: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::Image;
    use crate::perceptual::PerceptualProxy;

    fn image_nodes(g: &mut Graph, a: &Image, b: &Image) -> (NodeId, NodeId) {
        let an = g.constant(vec![a.height, a.width, 3], a.data.clone());
        let bn = g.constant(vec![b.height, b.width, 3], b.data.clone());
        (an, bn)
    }

    #[test]
    fn rgb_loss_on_identical_images_is_zero() {
        let img = Image::from_data(8, 8, vec![0.4; 8 * 8 * 3]);
        let proxy = PerceptualProxy::new();
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let (a, b) = image_nodes(&mut g, &img, &img);
        let loss = rgb_loss(&mut g, a, b, &cfg, Some(&proxy));
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn rgb_loss_constant_gap_without_perceptual() {
        // gap 0.1 with perceptual none: lambda_mse * 0.01 = 0.01
        let a = Image::from_data(8, 8, vec![0.2; 192]);
        let b = Image::from_data(8, 8, vec![0.3; 192]);
        let cfg = LossConfig {
            perceptual: PerceptualKind::None,
            ..Default::default()
        };
        let mut g = Graph::new();
        let (an, bn) = image_nodes(&mut g, &a, &b);
        let loss = rgb_loss(&mut g, an, bn, &cfg, None);
        assert!((g.scalar_value(loss) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn total_loss_weights_are_exact() {
        let cfg = LossConfig::default();
        let eval = |rgb: f64, aug: Option<f64>| -> f64 {
            let mut g = Graph::new();
            let r = g.scalar(rgb);
            let a = aug.map(|v| g.scalar(v));
            let t = total_loss(&mut g, r, a, &cfg);
            g.scalar_value(t)
        };
        assert_eq!(eval(1.0, Some(0.0)), 1.0);
        assert_eq!(eval(0.0, Some(1.0)), 0.05);
        assert!((eval(2.0, Some(4.0)) - 2.2).abs() < 1e-15);
        // augmentation disabled: exactly lambda_rgb * rgb
        assert_eq!(eval(0.7, None), 0.7);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut store = ParamStore::new();
        let a = store.register("a", vec![2], vec![0.0, 0.0]);
        let b = store.register("b", vec![1], vec![0.0]);
        store.get_mut(a).grad = vec![0.6, 0.0];
        store.get_mut(b).grad = vec![0.8];
        let (pre, post) = clip_grad_norm(&mut store, 0.5);
        assert!((pre - 1.0).abs() < 1e-12);
        assert!((post - 0.5).abs() < 1e-12);
        assert!((grad_global_norm(&store) - 0.5).abs() < 1e-6);
        // below the threshold: untouched
        store.get_mut(a).grad = vec![0.1, 0.0];
        store.get_mut(b).grad = vec![0.2];
        let (pre2, post2) = clip_grad_norm(&mut store, 0.5);
        assert_eq!(pre2, post2);
    }

    #[test]
    fn zero_learning_rate_is_rejected_and_frozen_params_hold() {
        let cfg = OptimConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(std::panic::catch_unwind(|| cfg.validate()).is_err());

        let mut store = ParamStore::new();
        let w = store.register("w", vec![1], vec![2.0]);
        let f = store.register("f", vec![1], vec![5.0]);
        store.get_mut(f).frozen = true;
        store.get_mut(w).grad = vec![1.0];
        store.get_mut(f).grad = vec![1.0];
        let mut opt = AdamW::new(&OptimConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store);
        assert!(store.get(w).values[0] < 2.0);
        assert_eq!(store.get(f).values[0], 5.0, "frozen parameter moved");
    }

    /// Single-parameter quadratic bowl: converges within 1e-3 of the minimum
    /// in at most 500 steps (lr sized for the bowl).
    #[test]
    fn adamw_converges_on_quadratic_bowl() {
        let minimum = 1.7;
        let mut store = ParamStore::new();
        let w = store.register("w", vec![1], vec![-3.0]);
        let mut opt = AdamW::new(&OptimConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut steps = 0;
        for _ in 0..500 {
            store.zero_grads();
            let mut g = Graph::new();
            let wn = g.param(&store, w);
            let target = g.scalar(minimum);
            let loss = g.mse(wn, target);
            let grads = g.backward(loss);
            store.accumulate(&g, &grads);
            clip_grad_norm(&mut store, 0.5);
            opt.step(&mut store);
            steps += 1;
            if (store.get(w).values[0] - minimum).abs() < 1e-3 {
                break;
            }
        }
        let got = store.get(w).values[0];
        assert!(
            (got - minimum).abs() < 1e-3,
            "after {steps} steps: {got} vs {minimum}"
        );
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient: the parameter still decays toward zero by lr*wd
        let mut store = ParamStore::new();
        let w = store.register("w", vec![1], vec![1.0]);
        store.get_mut(w).grad = vec![0.0];
        let mut opt = AdamW::new(&OptimConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut store);
        assert!((store.get(w).values[0] - 0.95).abs() < 1e-12);
    }
}
