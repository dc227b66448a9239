//! End-to-end training of both networks on the total objective.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, resize, AugmentationPolicy};
use crate::data::SceneSample;
use crate::error::{ensure, PopError, Result};
use crate::grid::{BinaryMask, Grid};
use crate::losses::{local_smoothness_grad, structure_loss_grad, wtv_grad, PopLossConfig, PopLossWeights, SsimConfig, WtvConfig};
use crate::networks::{grid_tensor, rgb_tensor, semantic_loss_grad, tensor_plane_f32, NetConfig, PopNet, TotalLossWeights, SIZE_MULTIPLE};
use crate::nn::{Adam, Graph, Mode, NodeId, Tensor};
use crate::separation::{bce_grad, SeparationConfig};

/// Every free scalar of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub bce_eps: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        let pop = PopLossConfig::default();
        let sep = SeparationConfig::default();
        let total = TotalLossWeights::default();
        Self {
            lambda1: pop.weights.lambda1,
            lambda2: pop.weights.lambda2,
            alpha1: total.alpha1,
            alpha2: total.alpha2,
            sigma: sep.sigma,
            gamma: pop.wtv.gamma,
            ssim_window: pop.ssim.window,
            ssim_c1: pop.ssim.c1,
            ssim_c2: pop.ssim.c2,
            bce_eps: sep.eps,
        }
    }
}

impl HyperParams {
    pub fn pop(&self) -> PopLossConfig {
        PopLossConfig {
            ssim: SsimConfig {
                window: self.ssim_window,
                c1: self.ssim_c1,
                c2: self.ssim_c2,
            },
            wtv: WtvConfig {
                gamma: self.gamma,
                ..Default::default()
            },
            weights: PopLossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
        }
    }

    pub fn separation(&self) -> SeparationConfig {
        SeparationConfig {
            sigma: self.sigma,
            eps: self.bce_eps,
        }
    }

    pub fn total(&self) -> TotalLossWeights {
        TotalLossWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pop = self.pop();
        pop.ssim.validate()?;
        pop.wtv.validate()?;
        pop.weights.validate()?;
        self.separation().validate()?;
        self.total().validate()
    }
}

/// Which auxiliary terms take part in training. The semantic loss is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub dep: bool,
    pub loc: bool,
    pub wtv: bool,
    pub sep: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub fn all() -> Self {
        Self {
            dep: true,
            loc: true,
            wtv: true,
            sep: true,
        }
    }

    pub fn none() -> Self {
        Self {
            dep: false,
            loc: false,
            wtv: false,
            sep: false,
        }
    }

    pub fn disable(&mut self, name: &str) -> Result<()> {
        let slot = match name {
            "dep" => &mut self.dep,
            "loc" => &mut self.loc,
            "wtv" => &mut self.wtv,
            "sep" => &mut self.sep,
            _ => return Err(PopError::Config(format!("unknown loss {name:?}, expected dep|loc|wtv|sep"))),
        };
        *slot = false;
        Ok(())
    }

    fn any_pop(&self) -> bool {
        self.dep || self.loc || self.wtv
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub resolution: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub net: NetConfig,
    pub hyper: HyperParams,
    pub losses: LossToggles,
    pub augment: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution: 352,
            epochs: 100,
            max_steps: None,
            batch_size: 8,
            lr: 1e-4,
            lr_decay_every: 60,
            lr_decay_factor: 0.1,
            weight_decay: 0.0,
            seed: 0,
            net: NetConfig::default(),
            hyper: HyperParams::default(),
            losses: LossToggles::all(),
            augment: AugmentationPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PopError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.resolution > 0 && self.resolution % SIZE_MULTIPLE == 0, || {
            format!("resolution must be a positive multiple of {SIZE_MULTIPLE}, got {}", self.resolution)
        })?;
        ensure(self.lr > 0.0 && self.lr.is_finite(), || format!("lr must be > 0, got {}", self.lr))?;
        ensure(self.batch_size > 0 && self.epochs > 0 && self.lr_decay_every > 0, || {
            "batch size, epochs and decay period must be positive".into()
        })?;
        ensure(self.lr_decay_factor > 0.0 && self.weight_decay >= 0.0, || {
            "decay factor must be > 0 and weight decay >= 0".into()
        })?;
        self.net.validate()?;
        self.hyper.validate()?;
        self.augment.validate()
    }

    /// Stable hash of everything that shapes the parameter tensors.
    pub fn architecture_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(&self.net).expect("net config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Deterministic child seed for a `(seed, stream, a, b)` tuple.
pub fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [stream, a, b] {
        z = splitmix(z ^ splitmix(v));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

/// Loss components of one step, batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_dep: f64,
    pub l_loc: f64,
    pub l_wtv: f64,
    pub l_pop: f64,
    pub l_sep: f64,
    pub l_sem: f64,
    pub l_total: f64,
}

impl StepLosses {
    pub fn all_finite(&self) -> bool {
        [self.l_dep, self.l_loc, self.l_wtv, self.l_pop, self.l_sep, self.l_sem, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: StepLosses,
}

/// Stacked tensors for one batch.
pub struct Batch {
    pub stems: Vec<String>,
    pub rgb: Tensor,
    pub depth: Tensor,
    pub masks: Vec<BinaryMask>,
    pub depth_grids: Vec<Grid<f32>>,
}

impl Batch {
    pub fn new(samples: &[SceneSample]) -> Self {
        let rgbs: Vec<_> = samples.iter().map(|s| &s.rgb).collect();
        let depths: Vec<_> = samples.iter().map(|s| s.depth.grid()).collect();
        Self {
            stems: samples.iter().map(|s| s.stem.clone()).collect(),
            rgb: rgb_tensor(&rgbs),
            depth: grid_tensor(&depths),
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
            depth_grids: depths.iter().map(|g| g.cast()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }
}

fn stack_grads(grads: Vec<Grid<f32>>, shape: [usize; 4]) -> Tensor {
    let data = grads.into_iter().flat_map(|g| g.into_data()).collect();
    Tensor::from_vec(shape, data).expect("gradient stack shape")
}

/// Batch-mean of a per-sample loss evaluated on channel 0 of `node`.
fn per_sample_loss(
    g: &Graph,
    node: NodeId,
    mut f: impl FnMut(usize, &Grid<f32>) -> Result<(f32, Grid<f32>)>,
) -> Result<(f64, Tensor)> {
    let t = g.value(node);
    let n = t.batch();
    let inv = 1.0 / n as f32;
    let mut total = 0.0f64;
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let (v, gr) = f(i, &tensor_plane_f32(t, i))?;
        total += v as f64;
        grads.push(gr.map(|x| x * inv));
    }
    Ok((total / n as f64, stack_grads(grads, t.shape())))
}

/// Forward the joint objective on `batch`, returning the root node and the components.
pub fn build_objective(
    net: &mut PopNet,
    g: &mut Graph,
    batch: &Batch,
    hyper: &HyperParams,
    toggles: &LossToggles,
    mode: Mode,
) -> Result<(NodeId, StepLosses)> {
    let rgb = g.input(batch.rgb.clone());
    let d_sf = g.input(batch.depth.clone());
    let out = net.forward(g, rgb, d_sf, mode);
    let pop = hyper.pop();
    let sep_cfg = hyper.separation();
    let mut losses = StepLosses::default();
    let mut terms = Vec::new();

    if toggles.any_pop() {
        let (l1, l2) = (pop.weights.lambda1 as f32, pop.weights.lambda2 as f32);
        let (mut dep, mut loc, mut wtv) = (0.0f64, 0.0f64, 0.0f64);
        let n = batch.len() as f64;
        let (l_pop, grad) = per_sample_loss(g, out.d_po, |i, d| {
            let (h, w) = d.shape();
            let mut value = 0.0f32;
            let mut grad = Grid::filled(h, w, 0.0f32);
            let mut add = |lg: crate::losses::LossGrad<f32>, k: f32, acc: &mut f64| {
                *acc += lg.value as f64 / n;
                value += k * lg.value;
                for (o, v) in grad.data_mut().iter_mut().zip(lg.grad.data()) {
                    *o += k * v;
                }
            };
            if toggles.dep {
                add(structure_loss_grad(d, &batch.depth_grids[i], &pop.ssim)?, 1.0, &mut dep);
            }
            if toggles.loc && batch.masks[i].count() > 0 {
                add(local_smoothness_grad(d, &batch.masks[i])?, l1, &mut loc);
            }
            if toggles.wtv {
                add(wtv_grad(d, &batch.masks[i], &pop.wtv)?, l2, &mut wtv);
            }
            Ok((value, grad))
        })?;
        losses.l_dep = dep;
        losses.l_loc = loc;
        losses.l_wtv = wtv;
        losses.l_pop = l_pop;
        terms.push((g.custom_scalar(vec![out.d_po], l_pop as f32, vec![grad]), 1.0f32));
    }

    if toggles.sep {
        let s_s = g.separation(out.d_po, out.d_c, sep_cfg.sigma);
        let (l_sep, grad) = per_sample_loss(g, s_s, |i, s| {
            let lg = bce_grad(s, &batch.masks[i], sep_cfg.eps)?;
            Ok((lg.value, lg.grad))
        })?;
        losses.l_sep = l_sep;
        terms.push((g.custom_scalar(vec![s_s], l_sep as f32, vec![grad]), hyper.alpha1 as f32));
    }

    let (l_sem, grad) = per_sample_loss(g, out.s_tilde, |i, s| {
        let lg = semantic_loss_grad(s, &batch.masks[i], sep_cfg.eps)?;
        Ok((lg.value, lg.grad))
    })?;
    losses.l_sem = l_sem;
    terms.push((g.custom_scalar(vec![out.s_tilde], l_sem as f32, vec![grad]), hyper.alpha2 as f32));

    let alpha1 = if toggles.sep { hyper.alpha1 } else { 0.0 };
    losses.l_total = losses.l_pop + alpha1 * losses.l_sep + hyper.alpha2 * losses.l_sem;
    Ok((g.weighted_sum(terms), losses))
}

/// Model, optimizer and position in the schedule.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: PopNet,
    pub opt: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let net = PopNet::new(&cfg.net, derive_seed(cfg.seed, STREAM_INIT, 0, 0))?;
        let opt = Adam::new(&net.store, cfg.weight_decay);
        Ok(Self { net, opt, step: 0 })
    }
}

/// Drives optimization over an in-memory training set.
pub struct Trainer {
    pub cfg: TrainConfig,
    samples: Vec<SceneSample>,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, samples: Vec<SceneSample>) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::with_state(cfg, samples, state)
    }

    pub fn with_state(cfg: TrainConfig, samples: Vec<SceneSample>, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(PopError::Data("training set is empty".into()));
        }
        let r = cfg.resolution;
        let samples = samples
            .iter()
            .map(|s| {
                s.validate().map_err(|e| PopError::Data(format!("{}: {e}", s.stem)))?;
                Ok(resize(s, r, r))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, samples, state })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.samples.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.steps_per_epoch() * self.cfg.epochs as u64;
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn epoch_of(&self, step: u64) -> usize {
        (step / self.steps_per_epoch()) as usize
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let k = self.epoch_of(step) / self.cfg.lr_decay_every;
        self.cfg.lr * self.cfg.lr_decay_factor.powi(k as i32)
    }

    /// Sample indices of the batch taken at `step`; depends only on `(seed, step)`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_SHUFFLE, epoch, 0));
        order.shuffle(&mut rng);
        let start = ((step % spe) as usize) * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(order.len())].to_vec()
    }

    fn make_batch(&self, step: u64) -> Vec<SceneSample> {
        self.batch_indices(step)
            .into_iter()
            .enumerate()
            .map(|(k, i)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_AUGMENT, step, k as u64));
                augment(&self.samples[i], &self.cfg.augment, &mut rng)
            })
            .collect()
    }

    /// One optimizer step. Non-finite losses abort with the batch stems.
    pub fn step(&mut self) -> Result<LogEntry> {
        let step = self.state.step;
        let samples = self.make_batch(step);
        let batch = Batch::new(&samples);
        let mut g = Graph::new();
        let (root, losses) = build_objective(
            &mut self.state.net,
            &mut g,
            &batch,
            &self.cfg.hyper,
            &self.cfg.losses,
            Mode::Train,
        )?;
        if !losses.all_finite() {
            return Err(PopError::Numeric(format!(
                "non-finite loss at step {step} ({losses:?}); batch stems: {}",
                batch.stems.join(", ")
            )));
        }
        let grads = g.backward(root);
        let lr = self.lr_at(step);
        let store = &mut self.state.net.store;
        store.zero_grad();
        store.accumulate(g.param_grads(&grads));
        if store.iter().any(|(_, e)| !e.grad.all_finite()) {
            return Err(PopError::Numeric(format!(
                "non-finite gradient at step {step}; batch stems: {}",
                batch.stems.join(", ")
            )));
        }
        self.state.opt.step(store, lr);
        self.state.step += 1;
        Ok(LogEntry {
            step,
            epoch: self.epoch_of(step),
            lr,
            losses,
        })
    }

    /// Step until `until` (exclusive), appending one JSON line per step to `log`.
    pub fn run_until(&mut self, until: u64, log: &mut dyn Write) -> Result<Vec<LogEntry>> {
        let until = until.min(self.total_steps());
        let mut out = Vec::new();
        while self.state.step < until {
            let entry = self.step()?;
            let line = serde_json::to_string(&entry)?;
            writeln!(log, "{line}").map_err(|e| PopError::io("<training log>", e))?;
            out.push(entry);
        }
        Ok(out)
    }

    pub fn run(&mut self, log: &mut dyn Write) -> Result<Vec<LogEntry>> {
        self.run_until(self.total_steps(), log)
    }
}

/// Network outputs for one sample, evaluation mode.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub stem: String,
    pub d_po: Grid<f64>,
    pub s_tilde: Grid<f64>,
    pub d_c: Grid<f64>,
    pub s_s: Grid<f64>,
}

/// Evaluation-mode forward pass over `samples` in chunks of `batch_size`.
pub fn predict(net: &mut PopNet, samples: &[SceneSample], sigma: f64, batch_size: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        for s in chunk {
            crate::networks::check_input_shape(s.rgb.shape(), s.depth.shape())?;
        }
        let batch = Batch::new(chunk);
        let mut g = Graph::new();
        let rgb = g.input(batch.rgb);
        let d = g.input(batch.depth);
        let o = net.forward(&mut g, rgb, d, Mode::Eval);
        let s_s = g.separation(o.d_po, o.d_c, sigma);
        for (i, s) in chunk.iter().enumerate() {
            let plane = |id| crate::networks::tensor_plane(g.value(id), i);
            out.push(Prediction {
                stem: s.stem.clone(),
                d_po: plane(o.d_po),
                s_tilde: plane(o.s_tilde),
                d_c: plane(o.d_c),
                s_s: plane(s_s),
            });
        }
    }
    Ok(out)
}

/// Mean IoU of `s_tilde > 0.5` against the ground truth.
pub fn mean_iou(preds: &[Prediction], samples: &[SceneSample]) -> Result<f64> {
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        let hard = BinaryMask::from_fn(p.s_tilde.height(), p.s_tilde.width(), |y, x| p.s_tilde.get(y, x) > 0.5);
        total += hard.iou(&s.mask)?;
    }
    Ok(total / preds.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.resolution, c.epochs, c.batch_size), (352, 100, 8));
        assert_eq!((c.lr, c.lr_decay_every, c.lr_decay_factor), (1e-4, 60, 0.1));
        assert_eq!((c.hyper.sigma, c.hyper.gamma), (10.0, 0.5));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = TrainConfig::from_toml("epochs = 3\n[hyper]\nsigma = 4.0\n").unwrap();
        assert_eq!((p.epochs, p.hyper.sigma, p.batch_size), (3, 4.0, 8));
        assert!(TrainConfig::from_toml("resolution = 100\n").is_err());
        assert!(TrainConfig::from_toml("lr = -1.0\n").is_err());
    }

    #[test]
    fn toggles_reject_unknown_names() {
        let mut t = LossToggles::all();
        t.disable("wtv").unwrap();
        assert!(!t.wtv && t.dep);
        assert!(t.disable("sem").is_err());
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        let a = derive_seed(0, 1, 0, 0);
        assert_ne!(a, derive_seed(0, 2, 0, 0));
        assert_ne!(a, derive_seed(1, 1, 0, 0));
        assert_eq!(a, derive_seed(0, 1, 0, 0));
    }
}
