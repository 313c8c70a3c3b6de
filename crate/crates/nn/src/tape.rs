//! Reverse-mode autodiff over a linear tape of tensor operations.

use crate::kernels::{self, ConvGeom};
use crate::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    AddChannel {
        x: Var,
        v: Var,
    },
    Silu(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Upsample2(Var),
    AvgPool2(Var),
    Mse {
        x: Var,
        target: Tensor<T>,
    },
    Mean(Var),
    GaussianKl {
        mu: Var,
        logvar: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records tensor operations in evaluation order so gradients can be
/// propagated backwards from a scalar.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires gradients (inference).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (gradient tracked when the tape has gradients enabled).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (o, ci, k, k2) = wv.dims4();
        assert_eq!(k, k2, "square kernels only");
        let dims = xv.dims4();
        assert_eq!(
            dims.1, ci,
            "conv2d: input has {} channels, weight expects {ci}",
            dims.1
        );
        let g = ConvGeom::new(dims, o, k, stride, pad);
        let bias = b.map(|b| {
            assert_eq!(self.value(b).numel(), o, "conv2d bias length");
            self.value(b).data()
        });
        let out = kernels::conv2d_forward(xv.data(), wv.data(), bias, &g);
        let value = Tensor::from_vec(&[g.n, o, g.oh, g.ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// `x[n, in] · wᵀ + b` with `w[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.value(x).dims2();
        let (dout, din2) = self.value(w).dims2();
        assert_eq!(din, din2, "linear: input width {din} vs weight {din2}");
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), dout, "linear bias length");
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            beta,
            &mut out,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::from_vec(&[n, dout], out),
            Op::Linear { x, w, b },
            &inputs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c), &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Broadcast-add a per-(sample, channel) vector `v[n, c]` over the spatial dims of `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(v).shape(), &[n, c], "add_channel: vector shape");
        let hw = h * w;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let add = vv[p];
            for e in plane {
                *e = *e + add;
            }
        }
        self.push(out, Op::AddChannel { x, v }, &[x, v])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a / (T::one() + (-a).exp()));
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.push(v, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let dims = self.value(x).dims4();
        assert!(
            groups > 0 && dims.1.is_multiple_of(groups),
            "group_norm: {groups} groups do not divide {} channels",
            dims.1
        );
        let (out, means, rstds) = kernels::group_norm_forward(
            self.value(x).data(),
            dims,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let v = Tensor::from_vec(self.value(x).shape(), out);
        self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            },
            &[x, gamma, beta],
        )
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: batch/spatial mismatch");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let v = Tensor::from_vec(&[n, ca + cb, h, w], data);
        self.push(v, Op::Concat(a, b), &[a, b])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).channels(start, len);
        self.push(v, Op::SliceChannels { x, start }, &[x])
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = kernels::upsample2(self.value(x).data(), (n, c, h, w));
        self.push(
            Tensor::from_vec(&[n, c, 2 * h, 2 * w], out),
            Op::Upsample2(x),
            &[x],
        )
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = kernels::avg_pool2(self.value(x).data(), (n, c, h, w));
        self.push(
            Tensor::from_vec(&[n, c, h / 2, w / 2], out),
            Op::AvgPool2(x),
            &[x],
        )
    }

    /// Mean squared error against a constant target; scalar output.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Var {
        assert_eq!(self.value(x).shape(), target.shape(), "mse: shape mismatch");
        let n = T::from_usize(target.numel()).unwrap();
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.push(Tensor::scalar(s / n), Op::Mse { x, target }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean over elements of `KL(N(mu, exp(logvar)) ‖ N(0, 1))`; scalar output.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Var {
        let mv = self.value(mu).data();
        let lv = self.value(logvar).data();
        assert_eq!(mv.len(), lv.len(), "gaussian_kl: shape mismatch");
        let half = T::lit(0.5);
        let s: T = mv
            .iter()
            .zip(lv)
            .map(|(&m, &l)| half * (m * m + l.exp() - T::one() - l))
            .sum();
        let v = s / T::from_usize(mv.len()).unwrap();
        self.push(
            Tensor::scalar(v),
            Op::GaussianKl { mu, logvar },
            &[mu, logvar],
        )
    }

    /// Propagate from the scalar `loss` back to every node that needs a gradient.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = slots[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Grads { slots }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let acc = |slots: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut slots[v.0] {
            Some(e) => e.add_assign(&t),
            s @ None => *s = Some(t),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (o, _, k, _) = wv.dims4();
                let geom = ConvGeom::new(xv.dims4(), o, k, stride, pad);
                let want_b = b.is_some_and(|b| self.wants(b));
                let r = kernels::conv2d_backward(
                    xv.data(),
                    wv.data(),
                    g.data(),
                    &geom,
                    self.wants(x),
                    self.wants(w),
                    want_b,
                );
                if let Some(dx) = r.dx {
                    acc(slots, x, Tensor::from_vec(xv.shape(), dx));
                }
                if let Some(dw) = r.dw {
                    acc(slots, w, Tensor::from_vec(wv.shape(), dw));
                }
                if let (Some(db), Some(b)) = (r.db, b) {
                    acc(slots, b, Tensor::from_vec(self.shape(b), db));
                }
            }
            &Op::Linear { x, w, b } => {
                let (n, din) = self.value(x).dims2();
                let (dout, _) = self.value(w).dims2();
                if self.wants(x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(
                        n,
                        dout,
                        din,
                        g.data(),
                        false,
                        self.value(w).data(),
                        false,
                        T::zero(),
                        &mut dx,
                    );
                    acc(slots, x, Tensor::from_vec(&[n, din], dx));
                }
                if self.wants(w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(
                        dout,
                        n,
                        din,
                        g.data(),
                        true,
                        self.value(x).data(),
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    acc(slots, w, Tensor::from_vec(&[dout, din], dw));
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d = *d + r;
                        }
                    }
                    acc(slots, b, Tensor::from_vec(self.shape(b), db));
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    acc(slots, a, g.clone());
                }
                if self.wants(b) {
                    acc(slots, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(slots, a, g.clone());
                }
                if self.wants(b) {
                    acc(slots, b, g.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    acc(slots, a, g.zip_map(self.value(b), |d, y| d * y));
                }
                if self.wants(b) {
                    acc(slots, b, g.zip_map(self.value(a), |d, x| d * x));
                }
            }
            Op::MulConst(a, c) => {
                if self.wants(*a) {
                    acc(slots, *a, g.zip_map(c, |d, y| d * y));
                }
            }
            &Op::Scale(a, s) => {
                if self.wants(a) {
                    acc(slots, a, g.map(|d| d * s));
                }
            }
            &Op::AddChannel { x, v } => {
                if self.wants(x) {
                    acc(slots, x, g.clone());
                }
                if self.wants(v) {
                    let (n, c, h, w) = g.dims4();
                    let dv: Vec<T> = g
                        .data()
                        .chunks(h * w)
                        .map(|p| p.iter().copied().sum())
                        .collect();
                    acc(slots, v, Tensor::from_vec(&[n, c], dv));
                }
            }
            &Op::Silu(x) => {
                if self.wants(x) {
                    let d = g.zip_map(self.value(x), |d, a| {
                        let s = T::one() / (T::one() + (-a).exp());
                        d * s * (T::one() + a * (T::one() - s))
                    });
                    acc(slots, x, d);
                }
            }
            &Op::Exp(x) => {
                if self.wants(x) {
                    acc(slots, x, g.zip_map(&self.nodes[i].value, |d, y| d * y));
                }
            }
            &Op::Clamp { x, lo, hi } => {
                if self.wants(x) {
                    let d = g.zip_map(
                        self.value(x),
                        |d, a| {
                            if a < lo || a > hi {
                                T::zero()
                            } else {
                                d
                            }
                        },
                    );
                    acc(slots, x, d);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            } => {
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.value(*x).data(),
                    self.value(*x).dims4(),
                    *groups,
                    self.value(*gamma).data(),
                    means,
                    rstds,
                    g.data(),
                );
                if self.wants(*x) {
                    acc(slots, *x, Tensor::from_vec(self.shape(*x), dx));
                }
                if self.wants(*gamma) {
                    acc(slots, *gamma, Tensor::from_vec(self.shape(*gamma), dgamma));
                }
                if self.wants(*beta) {
                    acc(slots, *beta, Tensor::from_vec(self.shape(*beta), dbeta));
                }
            }
            &Op::Concat(a, b) => {
                let ca = self.value(a).dims4().1;
                let cb = self.value(b).dims4().1;
                if self.wants(a) {
                    acc(slots, a, g.channels(0, ca));
                }
                if self.wants(b) {
                    acc(slots, b, g.channels(ca, cb));
                }
            }
            &Op::SliceChannels { x, start } => {
                if self.wants(x) {
                    let (n, c, h, w) = self.value(x).dims4();
                    let len = g.dims4().1;
                    let hw = h * w;
                    let mut d = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        let src = &g.data()[b * len * hw..(b + 1) * len * hw];
                        d.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw]
                            .copy_from_slice(src);
                    }
                    acc(slots, x, d);
                }
            }
            &Op::Upsample2(x) => {
                if self.wants(x) {
                    let dims = self.value(x).dims4();
                    let d = kernels::upsample2_backward(g.data(), dims);
                    acc(slots, x, Tensor::from_vec(self.shape(x), d));
                }
            }
            &Op::AvgPool2(x) => {
                if self.wants(x) {
                    let dims = self.value(x).dims4();
                    let d = kernels::avg_pool2_backward(g.data(), dims);
                    acc(slots, x, Tensor::from_vec(self.shape(x), d));
                }
            }
            Op::Mse { x, target } => {
                if self.wants(*x) {
                    let n = T::from_usize(target.numel()).unwrap();
                    let s = g.data()[0] * T::lit(2.0) / n;
                    acc(
                        slots,
                        *x,
                        self.value(*x).zip_map(target, |a, b| (a - b) * s),
                    );
                }
            }
            &Op::Mean(x) => {
                if self.wants(x) {
                    let n = T::from_usize(self.value(x).numel()).unwrap();
                    acc(slots, x, Tensor::full(self.shape(x), g.data()[0] / n));
                }
            }
            &Op::GaussianKl { mu, logvar } => {
                let n = T::from_usize(self.value(mu).numel()).unwrap();
                let s = g.data()[0] / n;
                if self.wants(mu) {
                    acc(slots, mu, self.value(mu).map(|m| m * s));
                }
                if self.wants(logvar) {
                    let half = T::lit(0.5);
                    acc(
                        slots,
                        logvar,
                        self.value(logvar).map(|l| half * (l.exp() - T::one()) * s),
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` with respect to every element of `x0`.
    fn numeric_grad(x0: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.numel())
            .map(|i| {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn det_tensor(shape: &[usize], salt: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| ((i as f64 + salt) * 0.731).sin()).collect(),
        )
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
            assert!(rel < 1e-5, "analytic {x} vs numeric {y}");
        }
    }

    /// Builds a small graph exercising every op and returns the scalar loss.
    fn graph(tape: &mut Tape<f64>, x: Var, w: Var, b: Var, gamma: Var, beta: Var) -> Var {
        let c = tape.conv2d(x, w, Some(b), 1, 1); // [2,4,4,4]
        let n = tape.group_norm(c, gamma, beta, 2, 1e-5);
        let s = tape.silu(n);
        let d = tape.conv2d(s, w, None, 2, 1); // weight reuse, [2,4,2,2]
        let up = tape.upsample2(d);
        let pooled = tape.avg_pool2(up);
        let cat = tape.concat(pooled, d);
        let sl = tape.slice_channels(cat, 2, 4);
        let e = tape.exp(sl);
        let cl = tape.clamp(e, 0.0, 1.5);
        let prod = tape.mul(cl, sl);
        let sc = tape.scale(prod, 0.7);
        let diff = tape.sub(sc, sl);
        let target = det_tensor(tape.shape(diff), 3.0);
        tape.mse(diff, target)
    }

    #[test]
    fn backward_matches_finite_differences_on_composite_graph() {
        // w: [4, 4, 3, 3] so it can be reused for both convs (input has 4 channels).
        let x0 = det_tensor(&[2, 4, 4, 4], 0.0);
        let w0 = det_tensor(&[4, 4, 3, 3], 1.0).map(|v| v * 0.3);
        let b0 = det_tensor(&[4], 2.0);
        let g0 = det_tensor(&[4], 5.0).map(|v| 1.0 + 0.5 * v);
        let be0 = det_tensor(&[4], 7.0);

        let eval = |x: &Tensor<f64>,
                    w: &Tensor<f64>,
                    b: &Tensor<f64>,
                    ga: &Tensor<f64>,
                    be: &Tensor<f64>| {
            let mut t = Tape::new();
            let (x, w, b, ga, be) = (
                t.param(x.clone()),
                t.param(w.clone()),
                t.param(b.clone()),
                t.param(ga.clone()),
                t.param(be.clone()),
            );
            let l = graph(&mut t, x, w, b, ga, be);
            t.value(l).data()[0]
        };

        let mut t = Tape::new();
        let (x, w, b, ga, be) = (
            t.param(x0.clone()),
            t.param(w0.clone()),
            t.param(b0.clone()),
            t.param(g0.clone()),
            t.param(be0.clone()),
        );
        let l = graph(&mut t, x, w, b, ga, be);
        let grads = t.backward(l);

        assert_close(
            grads.get(x).unwrap().data(),
            &numeric_grad(&x0, |v| eval(v, &w0, &b0, &g0, &be0)),
        );
        assert_close(
            grads.get(w).unwrap().data(),
            &numeric_grad(&w0, |v| eval(&x0, v, &b0, &g0, &be0)),
        );
        assert_close(
            grads.get(b).unwrap().data(),
            &numeric_grad(&b0, |v| eval(&x0, &w0, v, &g0, &be0)),
        );
        assert_close(
            grads.get(ga).unwrap().data(),
            &numeric_grad(&g0, |v| eval(&x0, &w0, &b0, v, &be0)),
        );
        assert_close(
            grads.get(be).unwrap().data(),
            &numeric_grad(&be0, |v| eval(&x0, &w0, &b0, &g0, v)),
        );
    }

    #[test]
    fn linear_add_channel_and_kl_gradients() {
        let x0 = det_tensor(&[3, 5], 0.5);
        let w0 = det_tensor(&[2, 5], 1.5);
        let b0 = det_tensor(&[2], 2.5);
        let m0 = det_tensor(&[3, 2, 2, 2], 4.0);
        let eps = det_tensor(&[3, 2, 2, 2], 9.0);

        let build = |t: &mut Tape<f64>, x: Var, w: Var, b: Var, m: Var| {
            let y = t.linear(x, w, Some(b));
            let z = t.add_channel(m, y);
            let mz = t.mul_const(z, eps.clone());
            let k = t.gaussian_kl(z, mz);
            let q = t.mean(z);
            let two = t.add(k, q);
            t.silu(two)
        };
        let eval = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, m: &Tensor<f64>| {
            let mut t = Tape::new();
            let (x, w, b, m) = (
                t.param(x.clone()),
                t.param(w.clone()),
                t.param(b.clone()),
                t.param(m.clone()),
            );
            let l = build(&mut t, x, w, b, m);
            t.value(l).data()[0]
        };
        let mut t = Tape::new();
        let (x, w, b, m) = (
            t.param(x0.clone()),
            t.param(w0.clone()),
            t.param(b0.clone()),
            t.param(m0.clone()),
        );
        let l = build(&mut t, x, w, b, m);
        let grads = t.backward(l);
        assert_close(
            grads.get(x).unwrap().data(),
            &numeric_grad(&x0, |v| eval(v, &w0, &b0, &m0)),
        );
        assert_close(
            grads.get(w).unwrap().data(),
            &numeric_grad(&w0, |v| eval(&x0, v, &b0, &m0)),
        );
        assert_close(
            grads.get(b).unwrap().data(),
            &numeric_grad(&b0, |v| eval(&x0, &w0, v, &m0)),
        );
        assert_close(
            grads.get(m).unwrap().data(),
            &numeric_grad(&m0, |v| eval(&x0, &w0, &b0, v)),
        );
    }

    #[test]
    fn constants_and_inference_tapes_get_no_gradients() {
        let mut t = Tape::<f32>::new();
        let c = t.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let p = t.param(Tensor::full(&[1, 1, 2, 2], 2.0));
        let s = t.mul(c, p);
        let l = t.mean(s);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[0.25; 4]);

        let mut inf = Tape::<f32>::inference();
        let p = inf.param(Tensor::full(&[1], 2.0));
        let l = inf.mean(p);
        assert!(inf.backward(l).get(p).is_none());
    }
}
