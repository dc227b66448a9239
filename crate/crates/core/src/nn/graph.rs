//! Reverse-mode tape. Nodes are appended in evaluation order, so walking the
//! tape backwards is a valid topological order for backpropagation.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::separation::{separate_slice, separate_slice_vjp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    /// Per-channel `gamma * (x - mean) * inv_std + beta` with frozen statistics.
    ChannelAffine {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Upsample2(NodeId),
    Sigmoid(NodeId),
    Separation {
        d: NodeId,
        c: NodeId,
        sigma: f64,
    },
    /// Scalar computed outside the tape with precomputed input gradients.
    Custom {
        inputs: Vec<NodeId>,
        grads: Vec<Tensor>,
    },
    WeightedSum(Vec<(NodeId, f32)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs one.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input that should receive a gradient (used for probing gradient flow).
    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let e = store.entry(id);
        let trainable = e.trainable;
        self.push(e.value.clone(), Op::Param(id), trainable)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// Training-mode batch normalization; returns the output and the batch
    /// mean / biased variance per channel.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> (NodeId, Vec<f32>, Vec<f32>) {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut mean = vec![0f32; c];
        let mut var = vec![0f32; c];
        for ch in 0..c {
            let mut s = 0f64;
            for b in 0..n {
                s += xv.plane(b, ch).iter().map(|v| *v as f64).sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0f64;
            for b in 0..n {
                ss += xv.plane(b, ch).iter().map(|v| (*v as f64 - mu).powi(2)).sum::<f64>();
            }
            mean[ch] = mu as f32;
            var[ch] = (ss / m) as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0f32; xv.numel()];
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let src = xv.plane(b, ch);
                let (mu, is, g, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in 0..hw {
                    let xh = (src[i] - mu) * is;
                    xhat[off + i] = xh;
                    out.data_mut()[off + i] = g * xh + be;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        );
        (id, mean, var)
    }

    pub fn channel_affine(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f32>, inv_std: Vec<f32>) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let scale = gv[ch] * inv_std[ch];
                let shift = bv[ch] - mean[ch] * scale;
                for (o, v) in out.data_mut()[off..off + hw].iter_mut().zip(xv.plane(b, ch)) {
                    *o = v * scale + shift;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: shape mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            data.extend_from_slice(av.sample(s));
            data.extend_from_slice(bv.sample(s));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data).expect("concat shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat(a, b), needs)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let ow = 2 * w;
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = src[y * w + x];
                    let o = 2 * y * ow + 2 * x;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + ow] = v;
                    dst[o + ow + 1] = v;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample2(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = crate::separation::logistic(*v));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// `sigmoid(sigma * (d - c))`, elementwise.
    pub fn separation(&mut self, d: NodeId, c: NodeId, sigma: f64) -> NodeId {
        let (dv, cv) = (self.value(d), self.value(c));
        assert_eq!(dv.shape(), cv.shape(), "separation: shape mismatch");
        let mut out = Tensor::zeros(dv.shape());
        separate_slice(dv.data(), cv.data(), sigma, out.data_mut());
        let needs = self.needs(d) || self.needs(c);
        self.push(out, Op::Separation { d, c, sigma }, needs)
    }

    /// Scalar node whose gradients w.r.t. `inputs` were computed by the caller.
    pub fn custom_scalar(&mut self, inputs: Vec<NodeId>, value: f32, grads: Vec<Tensor>) -> NodeId {
        assert_eq!(inputs.len(), grads.len());
        for (i, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*i).shape(), g.shape(), "custom_scalar: gradient shape");
        }
        let needs = inputs.iter().any(|i| self.needs(*i));
        self.push(Tensor::scalar(value), Op::Custom { inputs, grads }, needs)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f32)>) -> NodeId {
        let mut v = 0f32;
        for (id, w) in &terms {
            v += w * self.value(*id).item();
        }
        let needs = terms.iter().any(|(i, w)| *w != 0.0 && self.needs(*i));
        self.push(Tensor::scalar(v), Op::WeightedSum(terms), needs)
    }

    pub fn backward(&self, root: NodeId) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &up, &mut grads);
            grads[idx] = Some(up);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut Tensor)) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
        f(t);
    }

    fn backprop(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let need_x = self.needs(*x);
                let (dx, dw) = conv2d_backward(xv, wv, up, *stride, *pad, need_x);
                if let Some(dx) = dx {
                    self.acc(grads, *x, |t| t.add_assign(&dx));
                }
                self.acc(grads, *w, |t| t.add_assign(&dw));
                if let Some(b) = b {
                    let [n, c, _, _] = up.shape();
                    self.acc(grads, *b, |t| {
                        for s in 0..n {
                            for ch in 0..c {
                                t.data_mut()[ch] += up.plane(s, ch).iter().sum::<f32>();
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = up.shape();
                let hw = h * w;
                let m = (n * hw) as f32;
                let mut dgamma = vec![0f32; c];
                let mut dbeta = vec![0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        let u = &up.data()[off..off + hw];
                        let xh = &xhat[off..off + hw];
                        dbeta[ch] += u.iter().sum::<f32>();
                        dgamma[ch] += u.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
                if self.needs(*x) {
                    let gv = self.value(*gamma).data();
                    self.acc(grads, *x, |t| {
                        for s in 0..n {
                            for ch in 0..c {
                                let off = (s * c + ch) * hw;
                                let k = gv[ch] * inv_std[ch] / m;
                                let (db, dg) = (dbeta[ch], dgamma[ch]);
                                for i in off..off + hw {
                                    t.data_mut()[i] += k * (m * up.data()[i] - db - xhat[i] * dg);
                                }
                            }
                        }
                    });
                }
                self.acc(grads, *gamma, |t| t.data_mut().iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b));
                self.acc(grads, *beta, |t| t.data_mut().iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b));
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let [n, c, h, w] = up.shape();
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0f32; c];
                let mut dbeta = vec![0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let u = up.plane(s, ch);
                        dbeta[ch] += u.iter().sum::<f32>();
                        dgamma[ch] += u
                            .iter()
                            .zip(xv.plane(s, ch))
                            .map(|(a, v)| a * (v - mean[ch]) * inv_std[ch])
                            .sum::<f32>();
                    }
                }
                self.acc(grads, *x, |t| {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in off..off + hw {
                                t.data_mut()[i] += k * up.data()[i];
                            }
                        }
                    }
                });
                self.acc(grads, *gamma, |t| t.data_mut().iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b));
                self.acc(grads, *beta, |t| t.data_mut().iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b));
            }
            Op::Relu(x) => {
                let out = &node.value;
                self.acc(grads, *x, |t| {
                    for ((g, u), y) in t.data_mut().iter_mut().zip(up.data()).zip(out.data()) {
                        if *y > 0.0 {
                            *g += u;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |t| t.add_assign(up));
                self.acc(grads, *b, |t| t.add_assign(up));
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).channels();
                let [n, c, h, w] = up.shape();
                let hw = h * w;
                self.acc(grads, *a, |t| {
                    for s in 0..n {
                        let src = &up.sample(s)[..ca * hw];
                        t.sample_mut(s).iter_mut().zip(src).for_each(|(g, u)| *g += u);
                    }
                });
                self.acc(grads, *b, |t| {
                    for s in 0..n {
                        let src = &up.sample(s)[ca * hw..c * hw];
                        t.sample_mut(s).iter_mut().zip(src).for_each(|(g, u)| *g += u);
                    }
                });
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.value(*x).shape();
                let ow = 2 * w;
                self.acc(grads, *x, |t| {
                    for p in 0..n * c {
                        let src = &up.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut t.data_mut()[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            for x in 0..w {
                                let o = 2 * y * ow + 2 * x;
                                dst[y * w + x] += src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
                            }
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = &node.value;
                self.acc(grads, *x, |t| {
                    for ((g, u), y) in t.data_mut().iter_mut().zip(up.data()).zip(out.data()) {
                        *g += u * y * (1.0 - y);
                    }
                });
            }
            Op::Separation { d, c, sigma } => {
                let mut gd = Tensor::zeros(up.shape());
                let mut gc = Tensor::zeros(up.shape());
                separate_slice_vjp(node.value.data(), up.data(), *sigma, gd.data_mut(), gc.data_mut());
                self.acc(grads, *d, |t| t.add_assign(&gd));
                self.acc(grads, *c, |t| t.add_assign(&gc));
            }
            Op::Custom { inputs, grads: local } => {
                let u = up.item();
                for (i, g) in inputs.iter().zip(local) {
                    self.acc(grads, *i, |t| {
                        t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += u * b)
                    });
                }
            }
            Op::WeightedSum(terms) => {
                let u = up.item();
                for (id, w) in terms {
                    if *w != 0.0 {
                        self.acc(grads, *id, |t| t.data_mut()[0] += u * w);
                    }
                }
            }
        }
    }

    /// Parameter gradients after [`Graph::backward`].
    pub fn param_grads<'a>(&'a self, grads: &'a Grads) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(pid) => grads.grads[i].as_ref().map(|g| (pid, g)),
            _ => None,
        })
    }
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [f32]) {
    let plane = ho * wo;
    for c in 0..cin {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // contiguous span with zero fringes
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - pad as isize;
                            *d = if ix >= 0 && (ix as usize) < w { srow[ix as usize] } else { 0.0 };
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix >= 0 && (ix as usize) < w { srow[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [f32]) {
    let plane = ho * wo;
    for c in 0..cin {
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            drow[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a·b + beta * c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of the given slices, checked by
    // the debug asserts at call sites via the slice lengths.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, k2] = w.shape();
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    assert_eq!(k, k2);
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(wd, k, stride, pad);
    let kk = cin * k * k;
    let plane = ho * wo;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![0f32; kk * plane] };
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for s in 0..n {
        let xs = x.sample(s);
        let bmat: &[f32] = if direct {
            xs
        } else {
            im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        let os = out.sample_mut(s);
        if let Some(b) = b {
            for (co, bv) in b.data().iter().enumerate() {
                os[co * plane..(co + 1) * plane].fill(*bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(cout, kk, plane, w.data(), kk as isize, 1, bmat, plane as isize, 1, beta, os);
    }
    out
}

/// Returns `(dx, dw)`; `dx` only when requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    up: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
) -> (Option<Tensor>, Tensor) {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let [_, _, ho, wo] = up.shape();
    let kk = cin * k * k;
    let plane = ho * wo;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![0f32; kk * plane] };
    let mut dcols = vec![0f32; kk * plane];
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    for s in 0..n {
        let xs = x.sample(s);
        let bmat: &[f32] = if direct {
            xs
        } else {
            im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        let us = up.sample(s);
        // dW (cout × kk) += dY (cout × plane) · colsᵀ (plane × kk)
        gemm(cout, plane, kk, us, plane as isize, 1, bmat, 1, plane as isize, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            // dcols (kk × plane) = Wᵀ (kk × cout) · dY (cout × plane)
            gemm(kk, cout, plane, w.data(), 1, kk as isize, us, plane as isize, 1, 0.0, &mut dcols);
            let dxs = dx.sample_mut(s);
            if direct {
                dxs.iter_mut().zip(&dcols).for_each(|(a, b)| *a += b);
            } else {
                col2im(&dcols, cin, h, wd, k, stride, pad, ho, wo, dxs);
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Direct-loop convolution as an independent reference.
    fn conv_ref(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let ho = out_size(h, k, stride, pad);
        let wo = out_size(wd, k, stride, pad);
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[co] as f64);
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((s * cin + ci) * h + iy as usize) * wd + ix as usize] as f64
                                            * w.data()[((co * cin + ci) * k + ky) * k + kx] as f64;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = rand_tensor(&mut rng, [2, 3, 8, 6]);
            let w = rand_tensor(&mut rng, [4, 3, k, k]);
            let b = rand_tensor(&mut rng, [4, 1, 1, 1]);
            let got = conv2d_forward(&x, &w, Some(&b), stride, pad);
            let want = conv_ref(&x, &w, Some(&b), stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    /// Scalar probe `sum(r ⊙ f(x))` so that a single backward call checks the full VJP.
    fn check_vjp(build: impl Fn(&mut Graph, NodeId) -> NodeId, x0: &Tensor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input_with_grad(x0.clone());
        let y = build(&mut g, x);
        let r = rand_tensor(&mut rng, g.value(y).shape());
        let yv = g.value(y).clone();
        let val: f32 = yv.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let probe = g.custom_scalar(vec![y], val, vec![r.clone()]);
        let grads = g.backward(probe);
        let analytic = grads.get(x).unwrap().clone();
        let f = |xv: &Tensor| -> f64 {
            let mut g = Graph::new();
            let x = g.input(xv.clone());
            let y = build(&mut g, x);
            g.value(y).data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let h = 1e-2f32;
        for i in (0..x0.numel()).step_by(7) {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h as f64);
            let a = analytic.data()[i] as f64;
            assert!((fd - a).abs() <= 2e-3 * (1.0 + a.abs()), "index {i}: fd {fd} vs analytic {a}");
        }
    }

    #[test]
    fn op_vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, [2, 3, 6, 6]);
        let w = rand_tensor(&mut rng, [4, 3, 3, 3]);
        let gamma = rand_tensor(&mut rng, [3, 1, 1, 1]);
        let beta = rand_tensor(&mut rng, [3, 1, 1, 1]);
        check_vjp(
            |g, x| {
                let w = g.input(w.clone());
                g.conv2d(x, w, None, 2, 1)
            },
            &x,
            3,
        );
        check_vjp(
            |g, x| {
                let (ga, be) = (g.input(gamma.clone()), g.input(beta.clone()));
                g.batch_norm(x, ga, be, 1e-5).0
            },
            &x,
            4,
        );
        check_vjp(|g, x| g.upsample2(x), &x, 5);
        check_vjp(|g, x| g.sigmoid(x), &x, 6);
        check_vjp(
            |g, x| {
                let y = g.upsample2(x);
                let z = g.input(Tensor::zeros([2, 3, 12, 12]));
                let c = g.concat(y, z);
                let s = g.add(c, c);
                g.sigmoid(s)
            },
            &x,
            7,
        );
        check_vjp(
            |g, x| {
                let c = g.input(Tensor::filled([2, 3, 6, 6], 0.1));
                g.separation(x, c, 10.0)
            },
            &x,
            8,
        );
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, [2, 2, 5, 5]);
        let w0 = rand_tensor(&mut rng, [3, 2, 3, 3]);
        let r = rand_tensor(&mut rng, [2, 3, 5, 5]);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let wi = g.input_with_grad(w0.clone());
        let y = g.conv2d(xi, wi, None, 1, 1);
        let probe = g.custom_scalar(vec![y], 0.0, vec![r.clone()]);
        let grads = g.backward(probe);
        let analytic = grads.get(wi).unwrap();
        for i in 0..w0.numel() {
            let f = |d: f32| {
                let mut w = w0.clone();
                w.data_mut()[i] += d;
                let y = conv2d_forward(&x, &w, None, 1, 1);
                y.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()
            };
            let fd = (f(1e-2) - f(-1e-2)) / 2e-2;
            assert!((fd - analytic.data()[i] as f64).abs() < 1e-3 * (1.0 + fd.abs()));
        }
    }
}
