use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w: Vec<f32> = (0..cout * cin * kernel * kernel)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_vec([cout, cin, kernel, kernel], w).expect("weight shape"),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]), true));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f32,
    eps: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = [channels, 1, 1, 1];
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(shape, 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(shape), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(shape), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::filled(shape, 1.0), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: NodeId, mode: Mode) -> NodeId {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (out, mean, var) = g.batch_norm(x, gamma, beta, self.eps);
                let [n, _, h, w] = g.value(x).shape();
                let count = (n * h * w) as f32;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = self.momentum;
                let rm = store.entry_mut(self.running_mean).value.data_mut();
                for (r, v) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                let rv = store.entry_mut(self.running_var).value.data_mut();
                for (r, v) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * v * unbias;
                }
                out
            }
            Mode::Eval => {
                let mean = store.value(self.running_mean).data().to_vec();
                let inv_std = store
                    .value(self.running_var)
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + self.eps).sqrt())
                    .collect();
                g.channel_affine(x, gamma, beta, mean, inv_std)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// 3×3 conv (no bias) → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3, stride, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: NodeId, mode: Mode) -> NodeId {
        let y = self.conv.forward(g, store, x);
        let y = self.bn.forward(g, store, y, mode);
        g.relu(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }
}
