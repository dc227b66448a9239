//! The object popping network, the three-stream segmentation network with its
//! semantic and contact-surface heads, and the semantic / total objectives.
//!
//! Both networks live in one [`ParamStore`] under the `popping.` and
//! `segmentation.` prefixes so that a single optimizer trains them end to end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, PopError, Result};
use crate::grid::{check_same_shape, BinaryMask, DepthMap, Grid, Real, RgbImage, SoftMask};
use crate::losses::LossGrad;
use crate::nn::{Conv2d, ConvBlock, Graph, Mode, NodeId, ParamStore, Tensor};
use crate::separation::{bce_grad, ContactSurface};

pub const NUM_SCALES: usize = 5;
/// Spatial sides must be divisible by this (five stride-2 stages).
pub const SIZE_MULTIPLE: usize = 1 << NUM_SCALES;

/// Channel plan shared by both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub channels: [usize; NUM_SCALES],
    pub width: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128, 256],
            width: 1.0,
        }
    }
}

impl NetConfig {
    /// Roughly the size of a ResNet-18-encoder popping network.
    pub fn full_scale() -> Self {
        Self {
            channels: [64, 128, 256, 512, 512],
            width: 1.0,
        }
    }

    pub fn with_width(width: f64) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    pub fn effective_channels(&self) -> [usize; NUM_SCALES] {
        self.channels.map(|c| ((c as f64 * self.width).round() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.width > 0.0 && self.width.is_finite(), || {
            format!("width multiplier must be > 0, got {}", self.width)
        })?;
        ensure(self.channels.iter().all(|c| *c > 0), || "channel counts must be positive".into())
    }
}

/// Five stride-2 stages, each two conv blocks.
#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<[ConvBlock; 2]>,
}

impl Encoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, ch: [usize; NUM_SCALES]) -> Self {
        let mut prev = cin;
        let stages = ch
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = [
                    ConvBlock::new(store, rng, &format!("{name}.stage{i}.down"), prev, c, 2),
                    ConvBlock::new(store, rng, &format!("{name}.stage{i}.conv"), c, c, 1),
                ];
                prev = c;
                s
            })
            .collect();
        Self { stages }
    }

    fn stage(&self, i: usize, g: &mut Graph, store: &mut ParamStore, x: NodeId, mode: Mode) -> NodeId {
        let y = self.stages[i][0].forward(g, store, x, mode);
        self.stages[i][1].forward(g, store, y, mode)
    }

    fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: NodeId, mode: Mode) -> Vec<NodeId> {
        let mut feats = Vec::with_capacity(NUM_SCALES);
        let mut cur = x;
        for i in 0..NUM_SCALES {
            cur = self.stage(i, g, store, cur, mode);
            feats.push(cur);
        }
        feats
    }
}

/// conv → BN → ReLU → 2× upsample per stage, with additive skips.
#[derive(Clone, Debug)]
struct Decoder {
    // blocks[i] maps scale-i features to the channel count of scale i-1
    blocks: Vec<ConvBlock>,
}

impl Decoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: [usize; NUM_SCALES]) -> Self {
        let blocks = (0..NUM_SCALES)
            .map(|i| ConvBlock::new(store, rng, &format!("{name}.up{i}"), ch[i], ch[i.saturating_sub(1)], 1))
            .collect();
        Self { blocks }
    }

    /// Returns full-resolution features with `ch[0]` channels.
    fn forward(&self, g: &mut Graph, store: &mut ParamStore, feats: &[NodeId], mode: Mode) -> NodeId {
        let mut x = feats[NUM_SCALES - 1];
        for i in (0..NUM_SCALES).rev() {
            x = self.blocks[i].forward(g, store, x, mode);
            x = g.upsample2(x);
            if i > 0 {
                x = g.add(x, feats[i - 1]);
            }
        }
        x
    }
}

/// RGB + source-free depth (4 channels) → popped-out depth in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PoppingNetwork {
    encoder: Encoder,
    decoder: Decoder,
    head: Conv2d,
}

impl PoppingNetwork {
    pub const PREFIX: &'static str = "popping";

    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let ch = cfg.effective_channels();
        let p = Self::PREFIX;
        Self {
            encoder: Encoder::new(store, rng, &format!("{p}.enc"), 4, ch),
            decoder: Decoder::new(store, rng, &format!("{p}.dec"), ch),
            head: Conv2d::new(store, rng, &format!("{p}.head"), ch[0], 1, 3, 1, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, rgb: NodeId, d_sf: NodeId, mode: Mode) -> NodeId {
        let x = g.concat(rgb, d_sf);
        let feats = self.encoder.forward(g, store, x, mode);
        let y = self.decoder.forward(g, store, &feats, mode);
        let logits = self.head.forward(g, store, y);
        g.sigmoid(logits)
    }
}

/// Outputs of the segmentation network.
#[derive(Clone, Copy, Debug)]
pub struct SegmentationOutputs {
    /// Semantic prediction after the logistic.
    pub s_tilde: NodeId,
    /// Contact surface in `[0, 1]`.
    pub d_c: NodeId,
}

/// Three-stream RGB-D network: RGB and depth encoders feed a fusion stream by
/// per-scale addition; a shared decoder drives the semantic and surface heads.
#[derive(Clone, Debug)]
pub struct SegmentationNetwork {
    rgb: Encoder,
    depth: Encoder,
    fusion: Encoder,
    decoder: Decoder,
    semantic_block: ConvBlock,
    semantic_out: Conv2d,
    surface_block: ConvBlock,
    surface_out: Conv2d,
}

impl SegmentationNetwork {
    pub const PREFIX: &'static str = "segmentation";
    pub const SURFACE_HEAD: &'static str = "segmentation.surface";

    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let ch = cfg.effective_channels();
        let p = Self::PREFIX;
        Self {
            rgb: Encoder::new(store, rng, &format!("{p}.rgb"), 3, ch),
            depth: Encoder::new(store, rng, &format!("{p}.depth"), 1, ch),
            fusion: Encoder::new(store, rng, &format!("{p}.fusion"), 4, ch),
            decoder: Decoder::new(store, rng, &format!("{p}.dec"), ch),
            semantic_block: ConvBlock::new(store, rng, &format!("{p}.semantic.block"), ch[0], ch[0], 1),
            semantic_out: Conv2d::new(store, rng, &format!("{p}.semantic.out"), ch[0], 1, 3, 1, true),
            surface_block: ConvBlock::new(store, rng, &format!("{p}.surface.block"), ch[0], ch[0], 1),
            surface_out: Conv2d::new(store, rng, &format!("{p}.surface.out"), ch[0], 1, 3, 1, true),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        rgb: NodeId,
        d_po: NodeId,
        mode: Mode,
    ) -> SegmentationOutputs {
        let fr = self.rgb.forward(g, store, rgb, mode);
        let fd = self.depth.forward(g, store, d_po, mode);
        let mut cur = g.concat(rgb, d_po);
        let mut fused = Vec::with_capacity(NUM_SCALES);
        for i in 0..NUM_SCALES {
            let h = self.fusion.stage(i, g, store, cur, mode);
            let h = g.add(h, fr[i]);
            cur = g.add(h, fd[i]);
            fused.push(cur);
        }
        let feat = self.decoder.forward(g, store, &fused, mode);
        let s = self.semantic_block.forward(g, store, feat, mode);
        let s = self.semantic_out.forward(g, store, s);
        let s_tilde = g.sigmoid(s);
        let c = self.surface_block.forward(g, store, feat, mode);
        let c = self.surface_out.forward(g, store, c);
        let d_c = g.sigmoid(c);
        SegmentationOutputs { s_tilde, d_c }
    }
}

/// Both networks plus their parameters.
#[derive(Clone, Debug)]
pub struct PopNet {
    pub config: NetConfig,
    pub store: ParamStore,
    pub popping: PoppingNetwork,
    pub segmentation: SegmentationNetwork,
}

/// Node handles produced by one joint forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PopNetOutputs {
    pub d_po: NodeId,
    pub s_tilde: NodeId,
    pub d_c: NodeId,
}

impl PopNet {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let popping = PoppingNetwork::new(&mut store, &mut rng, config);
        let segmentation = SegmentationNetwork::new(&mut store, &mut rng, config);
        Ok(Self {
            config: config.clone(),
            store,
            popping,
            segmentation,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn num_parameters_with_prefix(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|(_, e)| e.trainable && e.name.starts_with(prefix))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    pub fn forward(&mut self, g: &mut Graph, rgb: NodeId, d_sf: NodeId, mode: Mode) -> PopNetOutputs {
        check_input_node(g, rgb, 3);
        let d_po = self.popping.forward(g, &mut self.store, rgb, d_sf, mode);
        let seg = self.segmentation.forward(g, &mut self.store, rgb, d_po, mode);
        PopNetOutputs {
            d_po,
            s_tilde: seg.s_tilde,
            d_c: seg.d_c,
        }
    }

    /// Evaluation-mode popped-out depth for one image.
    pub fn popping_forward(&mut self, rgb: &RgbImage, d_sf: &DepthMap) -> Result<DepthMap> {
        check_input_shape(rgb.shape(), d_sf.shape())?;
        let mut g = Graph::new();
        let r = g.input(rgb_tensor(&[rgb]));
        let d = g.input(grid_tensor(&[d_sf.grid()]));
        let out = self.popping.forward(&mut g, &mut self.store, r, d, Mode::Eval);
        DepthMap::new(tensor_plane(g.value(out), 0))
    }

    /// Evaluation-mode semantic prediction and contact surface.
    pub fn segmentation_forward(&mut self, rgb: &RgbImage, d_po: &DepthMap) -> Result<(SoftMask, ContactSurface)> {
        check_input_shape(rgb.shape(), d_po.shape())?;
        let mut g = Graph::new();
        let r = g.input(rgb_tensor(&[rgb]));
        let d = g.input(grid_tensor(&[d_po.grid()]));
        let out = self.segmentation.forward(&mut g, &mut self.store, r, d, Mode::Eval);
        Ok((
            SoftMask::new(tensor_plane(g.value(out.s_tilde), 0))?,
            ContactSurface::new(tensor_plane(g.value(out.d_c), 0))?,
        ))
    }
}

fn check_input_node(g: &Graph, rgb: NodeId, channels: usize) {
    let [_, c, h, w] = g.value(rgb).shape();
    assert_eq!(c, channels);
    assert!(h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0, "input {h}x{w} not divisible by 32");
}

pub fn check_input_shape(rgb: (usize, usize), depth: (usize, usize)) -> Result<()> {
    check_same_shape(rgb, depth)?;
    let (h, w) = rgb;
    ensure(h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0, || {
        format!("input {h}x{w} must be divisible by {SIZE_MULTIPLE}")
    })
}

/// Stack images into an `N×3×H×W` tensor.
pub fn rgb_tensor(images: &[&RgbImage]) -> Tensor {
    let (h, w) = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        for c in 0..3 {
            data.extend(img.data().iter().skip(c).step_by(3).map(|v| *v as f32));
        }
    }
    Tensor::from_vec([images.len(), 3, h, w], data).expect("rgb tensor shape")
}

/// Stack grids into an `N×1×H×W` tensor.
pub fn grid_tensor<T: Real>(grids: &[&Grid<T>]) -> Tensor {
    let (h, w) = grids[0].shape();
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        data.extend(g.data().iter().map(|v| v.as_f64() as f32));
    }
    Tensor::from_vec([grids.len(), 1, h, w], data).expect("grid tensor shape")
}

/// Channel 0 of sample `n` as an f64 grid.
pub fn tensor_plane(t: &Tensor, n: usize) -> Grid<f64> {
    let p = t.plane(n, 0);
    Grid::new(t.height(), t.width(), p.iter().map(|v| *v as f64).collect()).expect("plane shape")
}

pub fn tensor_plane_f32(t: &Tensor, n: usize) -> Grid<f32> {
    Grid::new(t.height(), t.width(), t.plane(n, 0).to_vec()).expect("plane shape")
}

/// `BCE(s, g) + (1 - softIoU(s, g))`.
pub fn semantic_loss_grad<T: Real>(s: &Grid<T>, g: &BinaryMask, eps: f64) -> Result<LossGrad<T>> {
    let bce = bce_grad(s, g, eps)?;
    let mut inter = T::zero();
    let mut sum_s = T::zero();
    let mut sum_g = T::zero();
    for (p, t) in s.data().iter().zip(g.data()) {
        sum_s += *p;
        if *t {
            inter += *p;
            sum_g += T::one();
        }
    }
    let union = sum_s + sum_g - inter;
    if union <= T::zero() {
        // empty prediction and empty mask agree perfectly
        return Ok(bce);
    }
    let iou = inter / union;
    let u2 = union * union;
    let grad = bce.grad.zip_map(g.grid(), |b, t| {
        // dI/ds = t, dU/ds = 1 - t
        let d_iou = if t { T::one() / union } else { -inter / u2 };
        b - d_iou
    })?;
    Ok(LossGrad {
        value: bce.value + (T::one() - iou),
        grad,
    })
}

pub fn semantic_loss(s_tilde: &SoftMask, g: &BinaryMask) -> Result<f64> {
    Ok(semantic_loss_grad(s_tilde.grid(), g, 1e-7)?.value)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TotalLossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for TotalLossWeights {
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 1.0 }
    }
}

impl TotalLossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        ensure(ok(self.alpha1) && ok(self.alpha2), || {
            format!("total loss weights must be finite and >= 0, got {self:?}")
        })
    }
}

/// `L_pop + alpha1 * L_sep + alpha2 * L_sem`.
pub fn total_loss(l_pop: f64, l_sep: f64, l_sem: f64, w: &TotalLossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [("pop", l_pop), ("sep", l_sep), ("sem", l_sem)] {
        if !v.is_finite() || v < 0.0 {
            return Err(PopError::Validation(format!("loss component {name} = {v} must be finite and >= 0")));
        }
    }
    Ok(l_pop + w.alpha1 * l_sep + w.alpha2 * l_sem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        let w = TotalLossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let zero = TotalLossWeights { alpha1: 0.0, alpha2: 0.0 };
        assert_eq!(total_loss(0.37, 0.2, 0.9, &zero).unwrap(), 0.37);
        assert!((total_loss(0.1, 0.2, 0.3, &w).unwrap() - 0.6).abs() < 1e-15);
        assert!(total_loss(-0.1, 0.2, 0.3, &w).is_err());
    }

    #[test]
    fn semantic_loss_examples() {
        let g = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let exact = SoftMask::new(g.to_real::<f64>().map(|v| v.clamp(1e-7, 1.0 - 1e-7))).unwrap();
        assert!(semantic_loss(&exact, &g).unwrap() <= 1e-5);

        let half = SoftMask::filled(4, 4, 0.5).unwrap();
        let n: f64 = 16.0;
        let iou = (0.5 * n / 2.0) / (n / 2.0 + 0.5 * n - 0.5 * n / 2.0);
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        let want = std::f64::consts::LN_2 + 1.0 - iou;
        assert!((semantic_loss(&half, &g).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn semantic_loss_decreases_toward_target() {
        let g = BinaryMask::from_fn(6, 6, |y, x| (y + x) % 3 == 0);
        let target = g.to_real::<f64>();
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let t = k as f64 / 20.0 * 0.999;
            let s = SoftMask::new(target.map(|v| 0.5 + t * (v - 0.5))).unwrap();
            let l = semantic_loss(&s, &g).unwrap();
            assert!(l < prev, "step {k}: {l} >= {prev}");
            prev = l;
        }
    }

    #[test]
    fn channel_plan_scales_with_width() {
        assert_eq!(NetConfig::default().effective_channels(), [16, 32, 64, 128, 256]);
        assert_eq!(NetConfig::with_width(0.5).effective_channels(), [8, 16, 32, 64, 128]);
        assert!(NetConfig::with_width(0.0).validate().is_err());
    }

    #[test]
    fn inputs_must_be_divisible_by_32() {
        let mut net = PopNet::new(&NetConfig::with_width(0.25), 0).unwrap();
        let rgb = RgbImage::new(48, 48, vec![0.5; 48 * 48 * 3]).unwrap();
        let d = DepthMap::filled(48, 48, 0.5).unwrap();
        assert!(net.popping_forward(&rgb, &d).is_err());
    }
}
