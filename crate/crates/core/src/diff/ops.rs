//! Forward builders and backward rules for every graph op.
//!
//! Shape violations are programming errors and panic with a message naming
//! the op and both shapes.

use super::{acc_into, Graph, NodeId, ParamId};
use std::rc::Rc;

/// An op with a hand-written vector-Jacobian product (e.g. the splat renderer).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Parent node ids in a fixed order.
    fn parents(&self) -> Vec<NodeId>;
    /// dL/d(parent_i) given dL/d(out); `None` entries skip accumulation.
    fn backward(&self, out_grad: &[f64], parent_values: &[&[f64]]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// (..., C) + (C,)
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    Reshape(NodeId),
    Transpose2D(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { src: NodeId, axis: usize, start: usize },
    Gather { src: NodeId, map: Rc<Vec<u32>> },
    Softmax { src: NodeId, axis: usize },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    LayerNorm { src: NodeId, gamma: NodeId, beta: NodeId },
    MeanAxis { src: NodeId, axis: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    DwConv { src: NodeId, weight: NodeId, bias: NodeId, k: usize },
    PwConv { src: NodeId, weight: NodeId, bias: NodeId },
    L1(NodeId, NodeId),
    Mse(NodeId, NodeId),
    Clamp { src: NodeId, lo: f64, hi: f64 },
    /// Clamp with straight-through gradient (used for the final image only).
    ClampSt { src: NodeId },
    /// out = keep ? max(floor, src) : floor
    MaskedFloor { src: NodeId, keep: Rc<Vec<bool>>, floor: f64 },
    Custom(Rc<dyn CustomOp>),
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn same_shape(g: &Graph, op: &'static str, a: NodeId, b: NodeId) {
    assert_eq!(
        g.shape(a),
        g.shape(b),
        "{op}: incompatible shapes {:?} vs {:?}",
        g.shape(a),
        g.shape(b)
    );
}

/// (outer, axis_len, inner) strides for an axis of a shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let d = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, d, inner)
}

#[inline]
fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let phi = (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    crate::gaussian::sigmoid(x)
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-(x.abs())).exp().ln_1p()
}

impl Graph {
    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self, "add", a, b);
        let v = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(&[a, b]);
        self.push(self.shape(a).to_vec(), v, req, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self, "sub", a, b);
        let v = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let req = self.requires(&[a, b]);
        self.push(self.shape(a).to_vec(), v, req, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self, "mul", a, b);
        let v = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(&[a, b]);
        self.push(self.shape(a).to_vec(), v, req, Op::Mul(a, b))
    }

    /// Adds a trailing-dimension bias: (..., C) + (C,).
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let c = *self.shape(a).last().expect("add_bias: scalar lhs");
        assert_eq!(
            self.shape(bias),
            &[c],
            "add_bias: incompatible shapes {:?} vs {:?}",
            self.shape(a),
            self.shape(bias)
        );
        let bv = self.values(bias).to_vec();
        let v = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % c])
            .collect();
        let req = self.requires(&[a, bias]);
        self.push(self.shape(a).to_vec(), v, req, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.values(a).iter().map(|x| x * s).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.values(a).iter().map(|x| x + s).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::AddScalar(a))
    }

    /// (m, k) x (k, n) -> (m, n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} vs {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.values(a), self.values(b), m, k, n, &mut out);
        let req = self.requires(&[a, b]);
        self.push(vec![m, n], out, req, Op::Matmul(a, b))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(a),
            "reshape: {:?} incompatible with {:?}",
            self.shape(a),
            shape
        );
        let v = self.values(a).to_vec();
        let req = self.requires(&[a]);
        self.push(shape, v, req, Op::Reshape(a))
    }

    pub fn transpose2d(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose2d: expected 2-d, got {s:?}");
        let (m, n) = (s[0], s[1]);
        let src = self.values(a);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = src[i * n + j];
            }
        }
        let req = self.requires(&[a]);
        self.push(vec![n, m], v, req, Op::Transpose2D(a))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat: no inputs");
        let base = self.shape(parts[0]).to_vec();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), base.len(), "concat: rank mismatch {s:?} vs {base:?}");
            for (d, (&x, &y)) in s.iter().zip(&base).enumerate() {
                assert!(
                    d == axis || x == y,
                    "concat: incompatible shapes {s:?} vs {base:?} on axis {axis}"
                );
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut v = vec![0.0; shape.iter().product()];
        for o in 0..outer {
            let mut off = 0;
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = self.values(p);
                let dst_start = (o * axis_total + off) * inner;
                let src_start = o * d * inner;
                v[dst_start..dst_start + d * inner]
                    .copy_from_slice(&src[src_start..src_start + d * inner]);
                off += d;
            }
        }
        let req = self.requires(parts);
        self.push(
            shape,
            v,
            req,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let s = self.shape(a).to_vec();
        assert!(
            axis < s.len() && start + len <= s[axis],
            "slice: range {start}..{} out of shape {s:?} axis {axis}",
            start + len
        );
        let (outer, d, inner) = axis_split(&s, axis);
        let src = self.values(a);
        let mut v = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * d + start) * inner;
            let dst_start = o * len * inner;
            v[dst_start..dst_start + len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let req = self.requires(&[a]);
        self.push(shape, v, req, Op::Slice { src: a, axis, start })
    }

    /// out[i] = src[map[i]]; backward scatter-adds.
    pub fn gather(&mut self, a: NodeId, map: Rc<Vec<u32>>, out_shape: Vec<usize>) -> NodeId {
        assert_eq!(
            map.len(),
            out_shape.iter().product::<usize>(),
            "gather: map len {} vs out shape {:?}",
            map.len(),
            out_shape
        );
        let src = self.values(a);
        let n = src.len();
        let v = map
            .iter()
            .map(|&i| {
                assert!((i as usize) < n, "gather: index {i} out of bounds {n}");
                src[i as usize]
            })
            .collect();
        let req = self.requires(&[a]);
        self.push(out_shape, v, req, Op::Gather { src: a, map })
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let shape = self.shape(a).to_vec();
        let (outer, d, inner) = axis_split(&shape, axis);
        let src = self.values(a);
        let mut v = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |j: usize| (o * d + j) * inner + r;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..d {
                    mx = mx.max(src[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..d {
                    let e = (src[idx(j)] - mx).exp();
                    v[idx(j)] = e;
                    sum += e;
                }
                for j in 0..d {
                    v[idx(j)] /= sum;
                }
            }
        }
        let req = self.requires(&[a]);
        self.push(shape, v, req, Op::Softmax { src: a, axis })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.values(a).iter().map(|&x| sigmoid(x)).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.values(a).iter().map(|x| x.tanh()).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.values(a).iter().map(|&x| gelu_fwd(x)).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.values(a).iter().map(|&x| softplus(x)).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.values(a).iter().map(|x| x.exp()).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.values(a).iter().map(|x| x.ln()).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::Log(a))
    }

    /// Layer norm over the last dimension with learned gamma and beta.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().expect("layer_norm: scalar input");
        assert_eq!(
            self.shape(gamma),
            &[c],
            "layer_norm: gamma shape {:?} vs input {:?}",
            self.shape(gamma),
            shape
        );
        assert_eq!(
            self.shape(beta),
            &[c],
            "layer_norm: beta shape {:?} vs input {:?}",
            self.shape(beta),
            shape
        );
        let rows = self.numel(a) / c;
        let src = self.values(a);
        let gv = self.values(gamma);
        let bv = self.values(beta);
        let mut v = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for i in 0..c {
                v[r * c + i] = (row[i] - mean) * inv * gv[i] + bv[i];
            }
        }
        let req = self.requires(&[a, gamma, beta]);
        self.push(
            shape,
            v,
            req,
            Op::LayerNorm {
                src: a,
                gamma,
                beta,
            },
        )
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let shape = self.shape(a).to_vec();
        let (outer, d, inner) = axis_split(&shape, axis);
        let src = self.values(a);
        let mut v = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..d {
                for r in 0..inner {
                    v[o * inner + r] += src[(o * d + j) * inner + r];
                }
            }
        }
        for x in &mut v {
            *x /= d as f64;
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let req = self.requires(&[a]);
        self.push(out_shape, v, req, Op::MeanAxis { src: a, axis })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = vec![self.values(a).iter().sum()];
        let req = self.requires(&[a]);
        self.push(vec![1], v, req, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.numel(a) as f64;
        let v = vec![self.values(a).iter().sum::<f64>() / n];
        let req = self.requires(&[a]);
        self.push(vec![1], v, req, Op::MeanAll(a))
    }

    /// Depthwise conv, zero same-padding, stride 1: (C,H,W) * (C,k,k) + (C,).
    pub fn conv2d_depthwise(&mut self, a: NodeId, weight: NodeId, bias: NodeId, k: usize) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "conv2d_depthwise: expected (C,H,W), got {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        assert_eq!(
            self.shape(weight),
            &[c, k, k],
            "conv2d_depthwise: weight {:?} vs input {s:?} (k={k})",
            self.shape(weight)
        );
        assert_eq!(
            self.shape(bias),
            &[c],
            "conv2d_depthwise: bias {:?} for {c} channels",
            self.shape(bias)
        );
        assert!(k % 2 == 1, "conv2d_depthwise: kernel size {k} must be odd");
        let r = k / 2;
        let src = self.values(a);
        let wv = self.values(weight);
        let bv = self.values(bias);
        let mut v = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let ker = &wv[ch * k * k..(ch + 1) * k * k];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bv[ch];
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - r as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = x as isize + dx as isize - r as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += plane[sy as usize * w + sx as usize] * ker[dy * k + dx];
                        }
                    }
                    v[ch * h * w + y * w + x] = acc;
                }
            }
        }
        let req = self.requires(&[a, weight, bias]);
        self.push(
            s,
            v,
            req,
            Op::DwConv {
                src: a,
                weight,
                bias,
                k,
            },
        )
    }

    /// Pointwise (1x1) conv: (Cin,H,W) x (Cout,Cin) + (Cout,).
    pub fn conv2d_pointwise(&mut self, a: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "conv2d_pointwise: expected (C,H,W), got {s:?}");
        let (cin, h, w) = (s[0], s[1], s[2]);
        let ws = self.shape(weight).to_vec();
        assert!(
            ws.len() == 2 && ws[1] == cin,
            "conv2d_pointwise: weight {ws:?} vs input {s:?}"
        );
        let cout = ws[0];
        assert_eq!(
            self.shape(bias),
            &[cout],
            "conv2d_pointwise: bias {:?} for {cout} channels",
            self.shape(bias)
        );
        let src = self.values(a);
        let wv = self.values(weight);
        let bv = self.values(bias);
        let hw = h * w;
        let mut v = vec![0.0; cout * hw];
        for o in 0..cout {
            let dst = &mut v[o * hw..(o + 1) * hw];
            for d in dst.iter_mut() {
                *d = bv[o];
            }
            for i in 0..cin {
                let woi = wv[o * cin + i];
                let plane = &src[i * hw..(i + 1) * hw];
                for (d, p) in dst.iter_mut().zip(plane) {
                    *d += woi * p;
                }
            }
        }
        let req = self.requires(&[a, weight, bias]);
        self.push(
            vec![cout, h, w],
            v,
            req,
            Op::PwConv {
                src: a,
                weight,
                bias,
            },
        )
    }

    /// Mean absolute error, full reduction to a scalar.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self, "l1", a, b);
        let n = self.numel(a) as f64;
        let v = vec![
            self.values(a)
                .iter()
                .zip(self.values(b))
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n,
        ];
        let req = self.requires(&[a, b]);
        self.push(vec![1], v, req, Op::L1(a, b))
    }

    /// Mean squared error, full reduction to a scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self, "mse", a, b);
        let n = self.numel(a) as f64;
        let v = vec![
            self.values(a)
                .iter()
                .zip(self.values(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n,
        ];
        let req = self.requires(&[a, b]);
        self.push(vec![1], v, req, Op::Mse(a, b))
    }

    /// Hard clamp; gradient is zero outside [lo, hi].
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.values(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::Clamp { src: a, lo, hi })
    }

    /// Clamp whose gradient passes through unchanged.
    pub fn clamp_straight_through(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.values(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let req = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), v, req, Op::ClampSt { src: a })
    }

    /// out[i] = keep[i] ? max(floor, src[i]) : floor. Gradient flows only to
    /// kept entries above the floor.
    pub fn masked_floor(&mut self, a: NodeId, keep: Rc<Vec<bool>>, floor: f64) -> NodeId {
        assert_eq!(
            keep.len(),
            self.numel(a),
            "masked_floor: mask len {} vs values {}",
            keep.len(),
            self.numel(a)
        );
        let v = self
            .values(a)
            .iter()
            .zip(keep.iter())
            .map(|(&x, &k)| if k { x.max(floor) } else { floor })
            .collect();
        let req = self.requires(&[a]);
        self.push(
            self.shape(a).to_vec(),
            v,
            req,
            Op::MaskedFloor {
                src: a,
                keep,
                floor,
            },
        )
    }

    /// Pushes a custom op node with precomputed output values.
    pub fn custom(&mut self, op: Rc<dyn CustomOp>, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        let req = self.requires(&op.parents());
        self.push(shape, values, req, Op::Custom(op))
    }
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[kk] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Accumulates dL/d(parents of `id`) into `slots` given dL/d(node id) = `g`.
pub(crate) fn backward_into(graph: &Graph, id: NodeId, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
    let node = &graph.nodes[id];
    let needs = |p: NodeId| graph.nodes[p].requires_grad;
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            for &p in &[*a, *b] {
                if needs(p) {
                    acc_into(&mut slots[p], graph.numel(p), |d| {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            if needs(*b) {
                acc_into(&mut slots[*b], graph.numel(*b), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (graph.values(*a), graph.values(*b));
            if needs(*a) {
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
            }
            if needs(*b) {
                acc_into(&mut slots[*b], graph.numel(*b), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
        }
        Op::AddBias(a, bias) => {
            if needs(*a) {
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            if needs(*bias) {
                let c = graph.numel(*bias);
                acc_into(&mut slots[*bias], c, |d| {
                    for (i, y) in g.iter().enumerate() {
                        d[i % c] += y;
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            if needs(*a) {
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y * s;
                    }
                });
            }
        }
        Op::AddScalar(a) => {
            if needs(*a) {
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (graph.shape(*a)[0], graph.shape(*a)[1]);
            let n = graph.shape(*b)[1];
            if needs(*a) {
                acc_into(&mut slots[*a], m * k, |d| {
                    matmul_nt_acc(g, graph.values(*b), m, n, k, d);
                });
            }
            if needs(*b) {
                acc_into(&mut slots[*b], k * n, |d| {
                    matmul_tn_acc(graph.values(*a), g, m, k, n, d);
                });
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
        }
        Op::Transpose2D(a) => {
            if needs(*a) {
                let s = graph.shape(*a);
                let (m, n) = (s[0], s[1]);
                acc_into(&mut slots[*a], m * n, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = &node.shape;
            let (outer, dt, inner) = axis_split(out_shape, *axis);
            let mut off = 0;
            for &p in parts {
                let d = graph.shape(p)[*axis];
                if needs(p) {
                    acc_into(&mut slots[p], graph.numel(p), |dst| {
                        for o in 0..outer {
                            let src_start = (o * dt + off) * inner;
                            let dst_start = o * d * inner;
                            for i in 0..d * inner {
                                dst[dst_start + i] += g[src_start + i];
                            }
                        }
                    });
                }
                off += d;
            }
        }
        Op::Slice { src, axis, start } => {
            if needs(*src) {
                let s = graph.shape(*src);
                let (outer, d, inner) = axis_split(s, *axis);
                let len = node.shape[*axis];
                acc_into(&mut slots[*src], graph.numel(*src), |dst| {
                    for o in 0..outer {
                        let dst_start = (o * d + start) * inner;
                        let src_start = o * len * inner;
                        for i in 0..len * inner {
                            dst[dst_start + i] += g[src_start + i];
                        }
                    }
                });
            }
        }
        Op::Gather { src, map } => {
            if needs(*src) {
                acc_into(&mut slots[*src], graph.numel(*src), |dst| {
                    for (i, &m) in map.iter().enumerate() {
                        dst[m as usize] += g[i];
                    }
                });
            }
        }
        Op::Softmax { src, axis } => {
            if needs(*src) {
                let shape = &node.shape;
                let (outer, d, inner) = axis_split(shape, *axis);
                let y = graph.values(id);
                acc_into(&mut slots[*src], graph.numel(*src), |dst| {
                    for o in 0..outer {
                        for r in 0..inner {
                            let idx = |j: usize| (o * d + j) * inner + r;
                            let mut dot = 0.0;
                            for j in 0..d {
                                dot += g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..d {
                                dst[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
        }
        Op::Sigmoid(a) => {
            if needs(*a) {
                let y = graph.values(id);
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
        }
        Op::Tanh(a) => {
            if needs(*a) {
                let y = graph.values(id);
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
        }
        Op::Gelu(a) => {
            if needs(*a) {
                let x = graph.values(*a);
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }
        }
        Op::Softplus(a) => {
            if needs(*a) {
                let x = graph.values(*a);
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(x[i]);
                    }
                });
            }
        }
        Op::Exp(a) => {
            if needs(*a) {
                let y = graph.values(id);
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
        }
        Op::Log(a) => {
            if needs(*a) {
                let x = graph.values(*a);
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                });
            }
        }
        Op::LayerNorm { src, gamma, beta } => {
            let c = *node.shape.last().unwrap();
            let rows = node.values.len() / c;
            let x = graph.values(*src);
            let gv = graph.values(*gamma);
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let grow = &g[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                if needs(*beta) {
                    acc_into(&mut slots[*beta], c, |d| {
                        for i in 0..c {
                            d[i] += grow[i];
                        }
                    });
                }
                if needs(*gamma) {
                    acc_into(&mut slots[*gamma], c, |d| {
                        for i in 0..c {
                            d[i] += grow[i] * (row[i] - mean) * inv;
                        }
                    });
                }
                if needs(*src) {
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for i in 0..c {
                        let gg = grow[i] * gv[i];
                        let xhat = (row[i] - mean) * inv;
                        mean_gg += gg;
                        mean_ggx += gg * xhat;
                    }
                    mean_gg /= c as f64;
                    mean_ggx /= c as f64;
                    acc_into(&mut slots[*src], x.len(), |d| {
                        for i in 0..c {
                            let gg = grow[i] * gv[i];
                            let xhat = (row[i] - mean) * inv;
                            d[r * c + i] += (gg - mean_gg - xhat * mean_ggx) * inv;
                        }
                    });
                }
            }
        }
        Op::MeanAxis { src, axis } => {
            if needs(*src) {
                let s = graph.shape(*src);
                let (outer, d, inner) = axis_split(s, *axis);
                acc_into(&mut slots[*src], graph.numel(*src), |dst| {
                    for o in 0..outer {
                        for j in 0..d {
                            for r in 0..inner {
                                dst[(o * d + j) * inner + r] += g[o * inner + r] / d as f64;
                            }
                        }
                    }
                });
            }
        }
        Op::SumAll(a) => {
            if needs(*a) {
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for x in d.iter_mut() {
                        *x += g[0];
                    }
                });
            }
        }
        Op::MeanAll(a) => {
            if needs(*a) {
                let n = graph.numel(*a) as f64;
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for x in d.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
        }
        Op::DwConv {
            src,
            weight,
            bias,
            k,
        } => {
            let s = graph.shape(*src);
            let (c, h, w) = (s[0], s[1], s[2]);
            let k = *k;
            let r = k / 2;
            let x = graph.values(*src);
            let wv = graph.values(*weight);
            if needs(*bias) {
                acc_into(&mut slots[*bias], c, |d| {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for i in 0..h * w {
                            acc += g[ch * h * w + i];
                        }
                        d[ch] += acc;
                    }
                });
            }
            if needs(*weight) {
                acc_into(&mut slots[*weight], c * k * k, |d| {
                    for ch in 0..c {
                        let plane = &x[ch * h * w..(ch + 1) * h * w];
                        let gp = &g[ch * h * w..(ch + 1) * h * w];
                        for dy in 0..k {
                            for dx in 0..k {
                                let mut acc = 0.0;
                                for y in 0..h {
                                    let sy = y as isize + dy as isize - r as isize;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for xx in 0..w {
                                        let sx = xx as isize + dx as isize - r as isize;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        acc += gp[y * w + xx] * plane[sy as usize * w + sx as usize];
                                    }
                                }
                                d[ch * k * k + dy * k + dx] += acc;
                            }
                        }
                    }
                });
            }
            if needs(*src) {
                acc_into(&mut slots[*src], c * h * w, |d| {
                    for ch in 0..c {
                        let ker = &wv[ch * k * k..(ch + 1) * k * k];
                        let gp = &g[ch * h * w..(ch + 1) * h * w];
                        let dp = &mut d[ch * h * w..(ch + 1) * h * w];
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = gp[y * w + xx];
                                if gv == 0.0 {
                                    continue;
                                }
                                for dy in 0..k {
                                    let sy = y as isize + dy as isize - r as isize;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..k {
                                        let sx = xx as isize + dx as isize - r as isize;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        dp[sy as usize * w + sx as usize] += gv * ker[dy * k + dx];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::PwConv { src, weight, bias } => {
            let s = graph.shape(*src);
            let (cin, h, w) = (s[0], s[1], s[2]);
            let cout = graph.shape(*weight)[0];
            let hw = h * w;
            let x = graph.values(*src);
            let wv = graph.values(*weight);
            if needs(*bias) {
                acc_into(&mut slots[*bias], cout, |d| {
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for i in 0..hw {
                            acc += g[o * hw + i];
                        }
                        d[o] += acc;
                    }
                });
            }
            if needs(*weight) {
                acc_into(&mut slots[*weight], cout * cin, |d| {
                    for o in 0..cout {
                        let gp = &g[o * hw..(o + 1) * hw];
                        for i in 0..cin {
                            let plane = &x[i * hw..(i + 1) * hw];
                            let mut acc = 0.0;
                            for (gv, pv) in gp.iter().zip(plane) {
                                acc += gv * pv;
                            }
                            d[o * cin + i] += acc;
                        }
                    }
                });
            }
            if needs(*src) {
                acc_into(&mut slots[*src], cin * hw, |d| {
                    for o in 0..cout {
                        let gp = &g[o * hw..(o + 1) * hw];
                        for i in 0..cin {
                            let woi = wv[o * cin + i];
                            if woi == 0.0 {
                                continue;
                            }
                            let dp = &mut d[i * hw..(i + 1) * hw];
                            for (dv, gv) in dp.iter_mut().zip(gp) {
                                *dv += woi * gv;
                            }
                        }
                    }
                });
            }
        }
        Op::L1(a, b) => {
            let n = graph.numel(*a) as f64;
            let (av, bv) = (graph.values(*a), graph.values(*b));
            let scale = g[0] / n;
            if needs(*a) {
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += scale * (av[i] - bv[i]).signum_or_zero();
                    }
                });
            }
            if needs(*b) {
                acc_into(&mut slots[*b], graph.numel(*b), |d| {
                    for i in 0..d.len() {
                        d[i] -= scale * (av[i] - bv[i]).signum_or_zero();
                    }
                });
            }
        }
        Op::Mse(a, b) => {
            let n = graph.numel(*a) as f64;
            let (av, bv) = (graph.values(*a), graph.values(*b));
            let scale = 2.0 * g[0] / n;
            if needs(*a) {
                acc_into(&mut slots[*a], graph.numel(*a), |d| {
                    for i in 0..d.len() {
                        d[i] += scale * (av[i] - bv[i]);
                    }
                });
            }
            if needs(*b) {
                acc_into(&mut slots[*b], graph.numel(*b), |d| {
                    for i in 0..d.len() {
                        d[i] -= scale * (av[i] - bv[i]);
                    }
                });
            }
        }
        Op::Clamp { src, lo, hi } => {
            if needs(*src) {
                let x = graph.values(*src);
                acc_into(&mut slots[*src], graph.numel(*src), |d| {
                    for i in 0..d.len() {
                        if x[i] > *lo && x[i] < *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::ClampSt { src } => {
            if needs(*src) {
                acc_into(&mut slots[*src], graph.numel(*src), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
        }
        Op::MaskedFloor { src, keep, floor } => {
            if needs(*src) {
                let x = graph.values(*src);
                acc_into(&mut slots[*src], graph.numel(*src), |d| {
                    for i in 0..d.len() {
                        if keep[i] && x[i] > *floor {
                            d[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Custom(op) => {
            let parents = op.parents();
            let parent_values: Vec<&[f64]> = parents.iter().map(|&p| graph.values(p)).collect();
            let grads = op.backward(g, &parent_values);
            assert_eq!(
                grads.len(),
                parents.len(),
                "{}: backward returned {} grads for {} parents",
                op.name(),
                grads.len(),
                parents.len()
            );
            for (p, pg) in parents.iter().zip(grads) {
                if let Some(pg) = pg {
                    if needs(*p) {
                        assert_eq!(pg.len(), graph.numel(*p));
                        acc_into(&mut slots[*p], graph.numel(*p), |d| {
                            for (x, y) in d.iter_mut().zip(&pg) {
                                *x += y;
                            }
                        });
                    }
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    #[inline]
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
