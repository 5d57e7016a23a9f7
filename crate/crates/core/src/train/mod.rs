//! Heads, loss, and gradient training through the unrolled inference graph.

pub mod heads;
pub mod loss;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{make_target, Sample};
use crate::error::{invalid, shape_err, Result};
use crate::infer::{qp_k_taped, Feedback, InferenceTrace, Tape};
use crate::model::{LayerConfig, RgNetwork};
use crate::tensor::{convolve_transposed_acc, correlate, correlate_filter_grad_acc, Dims, Tensor};

pub use heads::{upsample_nearest, CoarseHead, HeadBank, HeadGrads, Tap};
pub use loss::{heatmap_loss, heatmap_loss_grad, sigmoid};

/// A network with its keypoint heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: RgNetwork,
    pub heads: HeadBank,
}

/// Identifies one parameter block of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    Filter(usize),
    Bias(usize),
    CoarseWeights,
    CoarseBias,
    /// Index into the taps, coarse to fine.
    Tap(usize),
}

impl std::fmt::Display for ParamBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamBlock::Filter(i) => write!(f, "layer {i} filters"),
            ParamBlock::Bias(i) => write!(f, "layer {i} biases"),
            ParamBlock::CoarseWeights => write!(f, "coarse head weights"),
            ParamBlock::CoarseBias => write!(f, "coarse head biases"),
            ParamBlock::Tap(t) => write!(f, "tap {t} filter"),
        }
    }
}

impl ParamBlock {
    /// Prediction scale the block belongs to (0 = coarse head), if a head.
    pub fn head_scale(self) -> Option<usize> {
        match self {
            ParamBlock::CoarseWeights | ParamBlock::CoarseBias => Some(0),
            ParamBlock::Tap(t) => Some(t + 1),
            _ => None,
        }
    }
}

impl Model {
    pub fn new(net: RgNetwork, heads: HeadBank) -> Result<Self> {
        heads.check_network(&net)?;
        Ok(Model { net, heads })
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut out = Vec::new();
        for i in 1..=self.net.num_layers() {
            out.push(ParamBlock::Filter(i));
            out.push(ParamBlock::Bias(i));
        }
        out.push(ParamBlock::CoarseWeights);
        out.push(ParamBlock::CoarseBias);
        out.extend((0..self.heads.taps().len()).map(ParamBlock::Tap));
        out
    }

    /// Parameter slices in [`Model::layout`] order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for i in 1..=self.net.num_layers() {
            out.push(self.net.filter(i).data());
            out.push(self.net.bias(i));
        }
        out.push(&self.heads.coarse().weights[..]);
        out.push(&self.heads.coarse().bias[..]);
        out.extend(self.heads.taps().iter().map(|t| t.filter.data()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.net.params_mut();
        out.extend(self.heads.params_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Random initialisation: layer filters are Gaussian with variance
    /// `2 / fan_in`, biases start at zero, heads are small Gaussians with a
    /// negative coarse bias (positives are rare in the targets).
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = self.layout();
        let fan_in: Vec<usize> = layout
            .iter()
            .map(|b| match *b {
                ParamBlock::Filter(i) => {
                    let f = self.net.filter(i);
                    f.in_channels() * f.kernel().0 * f.kernel().1
                }
                ParamBlock::CoarseWeights => self.net.dims(self.net.num_layers()).len(),
                ParamBlock::Tap(t) => self.heads.taps()[t].filter.in_channels(),
                _ => 1,
            })
            .collect();
        for ((block, p), fan) in layout.iter().zip(self.params_mut()).zip(fan_in) {
            let std = match block {
                ParamBlock::Filter(_) => (2.0 / fan as f64).sqrt(),
                ParamBlock::CoarseWeights | ParamBlock::Tap(_) => 0.1 / (fan as f64).sqrt(),
                ParamBlock::Bias(_) => 0.0,
                ParamBlock::CoarseBias => {
                    p.fill(-2.0);
                    continue;
                }
            };
            if std == 0.0 {
                p.fill(0.0);
                continue;
            }
            let dist = Normal::new(0.0, std).expect("finite std");
            for v in p.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
    }

    /// Heatmap logits after `k` passes with the `scales` coarsest scales.
    pub fn forward(&self, x: &Tensor, k: usize, scales: usize) -> Result<Tensor> {
        let (trace, _) = qp_k_taped(&self.net, x, k, Feedback::Enabled)?;
        self.heads.predict(&trace, scales)
    }

    pub fn forward_trace(&self, x: &Tensor, k: usize) -> Result<InferenceTrace> {
        Ok(qp_k_taped(&self.net, x, k, Feedback::Enabled)?.0)
    }

    pub fn output_dims(&self, scales: usize) -> Dims {
        self.heads.output_dims(&self.net, scales)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.net.input_dims(),
            layers: self.net.layers().to_vec(),
            keypoints: self.heads.keypoints(),
            grid: self.heads.coarse().grid,
            taps: self.heads.tap_layers(),
        }
    }
}

/// Everything needed to rebuild a [`Model`] with zero parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input: Dims,
    pub layers: Vec<LayerConfig>,
    pub keypoints: usize,
    pub grid: (usize, usize),
    /// Tapped layers, coarse to fine.
    pub taps: Vec<usize>,
}

impl Architecture {
    pub fn build(&self) -> Result<Model> {
        let net = RgNetwork::new(self.input, self.layers.clone())?;
        let heads = HeadBank::new(&net, self.keypoints, self.grid, &self.taps)?;
        Model::new(net, heads)
    }

    /// Describes the first difference from `other`, layers before heads.
    pub fn first_mismatch(&self, other: &Architecture) -> Option<String> {
        if self.input != other.input {
            return Some(format!("input {} vs {}", self.input, other.input));
        }
        for (n, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a != b {
                return Some(format!("layer {}: {a:?} vs {b:?}", n + 1));
            }
        }
        if self.layers.len() != other.layers.len() {
            let n = self.layers.len().min(other.layers.len()) + 1;
            return Some(format!(
                "layer {n}: present in only one ({} vs {} layers)",
                self.layers.len(),
                other.layers.len()
            ));
        }
        if self.keypoints != other.keypoints {
            return Some(format!(
                "heads: {} vs {} keypoints",
                self.keypoints, other.keypoints
            ));
        }
        if self.grid != other.grid {
            return Some(format!(
                "coarse head: grid {:?} vs {:?}",
                self.grid, other.grid
            ));
        }
        if self.taps != other.taps {
            return Some(format!("taps: {:?} vs {:?}", self.taps, other.taps));
        }
        None
    }
}

/// Gradient (or velocity) buffers in [`Model::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            blocks: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.concat()
    }
}

/// One training pair at heatmap resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub target: Tensor,
    pub visible: Vec<bool>,
}

impl Example {
    pub fn from_sample(s: &Sample, heatmap: Dims, radius: f64) -> Result<Self> {
        if s.keypoints.len() != heatmap.channels {
            return shape_err(format!(
                "sample has {} keypoints, heads predict {}",
                s.keypoints.len(),
                heatmap.channels
            ));
        }
        Ok(Example {
            image: s.image.clone(),
            target: make_target(s, (heatmap.height, heatmap.width), radius)?,
            visible: s.visible.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    /// Disabling feedback drops the top-down term from every update, so
    /// any `k` computes the bottom-up network.
    pub feedback: Feedback,
    /// Adds `weight_decay / 2 · ‖θ‖²` to the objective.
    pub weight_decay: f64,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            feedback: Feedback::Enabled,
            weight_decay: 0.0,
        }
    }
}

fn decay_term(model: &Model, wd: f64) -> f64 {
    if wd == 0.0 {
        return 0.0;
    }
    0.5 * wd
        * model
            .params()
            .iter()
            .flat_map(|p| p.iter())
            .map(|v| v * v)
            .sum::<f64>()
}

fn check_batch(model: &Model, batch: &[Example], scales: usize) -> Result<Dims> {
    if batch.is_empty() {
        return invalid("batch is empty");
    }
    if scales == 0 || scales > model.heads.num_scales() {
        return invalid(format!(
            "scales must be in 1..={}, got {scales}",
            model.heads.num_scales()
        ));
    }
    let dims = model.output_dims(scales);
    for (n, ex) in batch.iter().enumerate() {
        if ex.target.dims() != dims {
            return shape_err(format!(
                "example {n}: target is {}, heads at {scales} scales produce {dims}",
                ex.target.dims()
            ));
        }
    }
    Ok(dims)
}

/// Objective value: mean heatmap loss over the batch plus weight decay.
pub fn objective(
    model: &Model,
    batch: &[Example],
    k: usize,
    scales: usize,
    opts: BackwardOptions,
) -> Result<f64> {
    check_batch(model, batch, scales)?;
    let mut total = 0.0;
    for ex in batch {
        let (trace, _) = qp_k_taped(&model.net, &ex.image, k, opts.feedback)?;
        let logits = model.heads.predict(&trace, scales)?;
        total += heatmap_loss(&logits, &ex.target, &ex.visible)?;
    }
    Ok(total / batch.len() as f64 + decay_term(model, opts.weight_decay))
}

/// Reverse-mode gradient of [`objective`] through the `k`-pass unrolled
/// graph. Returns the objective value and its gradient.
pub fn backward(
    model: &Model,
    batch: &[Example],
    k: usize,
    scales: usize,
    opts: BackwardOptions,
) -> Result<(f64, Gradients)> {
    check_batch(model, batch, scales)?;
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for ex in batch {
        let (loss, g) = example_gradient(model, ex, k, scales, opts.feedback)?;
        total += loss;
        grads.add_scaled(&g, inv);
    }
    let wd = opts.weight_decay;
    if wd != 0.0 {
        for (g, p) in grads.blocks.iter_mut().zip(model.params()) {
            for (gv, pv) in g.iter_mut().zip(p) {
                *gv += wd * pv;
            }
        }
    }
    Ok((total * inv + decay_term(model, wd), grads))
}

fn example_gradient(
    model: &Model,
    ex: &Example,
    k: usize,
    scales: usize,
    feedback: Feedback,
) -> Result<(f64, Gradients)> {
    let net = &model.net;
    let (trace, tape) = qp_k_taped(net, &ex.image, k, feedback)?;
    let logits = model.heads.predict(&trace, scales)?;
    let (loss, g_logits) = heatmap_loss_grad(&logits, &ex.target, &ex.visible)?;

    let mut head_grads = HeadGrads::zeros_like(&model.heads);
    let mut final_grads: Vec<Option<Tensor>> = vec![None; net.num_layers()];
    model
        .heads
        .backward(&trace, scales, &g_logits, &mut head_grads, &mut final_grads)?;

    let mut grads = Gradients::zeros_like(model);
    let layers = net.num_layers();
    unroll_backward(
        net,
        &ex.image,
        &tape,
        final_grads,
        &mut grads.blocks[..2 * layers],
    );

    let base = 2 * layers;
    grads.blocks[base] = head_grads.coarse_weights;
    grads.blocks[base + 1] = head_grads.coarse_bias;
    for (t, g) in head_grads.taps.into_iter().enumerate() {
        grads.blocks[base + 2 + t] = g;
    }
    Ok((loss, grads))
}

/// Walks the tape backwards. `final_grads[i - 1]` is the adjoint of layer
/// `i`'s last state; `out` holds `[w_1, b_1, w_2, b_2, ...]` gradients.
fn unroll_backward(
    net: &RgNetwork,
    x: &Tensor,
    tape: &Tape,
    final_grads: Vec<Option<Tensor>>,
    out: &mut [Vec<f64>],
) {
    let mut adj: Vec<Vec<Option<Tensor>>> =
        tape.versions.iter().map(|v| vec![None; v.len()]).collect();
    for (i, g) in final_grads.into_iter().enumerate() {
        let last = adj[i].len() - 1;
        adj[i][last] = g;
    }
    for step in tape.steps.iter().rev() {
        let i = step.layer;
        let Some(mut g) = adj[i - 1][step.output].take() else {
            continue;
        };
        for (v, &m) in g.data_mut().iter_mut().zip(&step.mask) {
            if !m {
                *v = 0.0;
            }
        }
        if g.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let plane = g.dims().plane();
        for (c, gb) in out[2 * (i - 1) + 1].iter_mut().enumerate() {
            *gb += g.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
        let below = if i == 1 {
            x
        } else {
            &tape.versions[i - 2][step.below]
        };
        correlate_filter_grad_acc(net.filter(i), below, &g, &mut out[2 * (i - 1)]);
        if i > 1 {
            let slot = adj[i - 2][step.below].get_or_insert_with(|| Tensor::zeros(below.dims()));
            convolve_transposed_acc(net.filter(i), &g, slot);
        }
        if let Some(a) = step.above {
            // drive_i += convT(w_{i+1}, z_{i+1}); its adjoint is a correlation.
            let above = &tape.versions[i][a];
            let up = net.filter(i + 1);
            correlate_filter_grad_acc(up, &g, above, &mut out[2 * i]);
            let back = correlate(up, &g).expect("tape shapes are consistent");
            match &mut adj[i][a] {
                Some(t) => t.add_assign(&back).expect("same dims"),
                slot @ None => *slot = Some(back),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdOptions {
    pub eps: f64,
    pub backward: BackwardOptions,
    /// Check at most this many parameters, chosen by a seeded draw.
    pub max_params: Option<usize>,
    pub seed: u64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            backward: BackwardOptions::default(),
            max_params: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(block, offset)` of the worst parameter.
    pub worst: Option<(ParamBlock, usize)>,
    pub checked: usize,
    /// Parameters whose perturbation moved a rectifier or NMS decision.
    pub skipped: usize,
}

fn masks(model: &Model, batch: &[Example], k: usize, fb: Feedback) -> Result<Vec<Vec<Vec<bool>>>> {
    batch
        .iter()
        .map(|ex| {
            let (_, tape) = qp_k_taped(&model.net, &ex.image, k, fb)?;
            Ok(tape.steps.into_iter().map(|s| s.mask).collect())
        })
        .collect()
}

/// Compares [`backward`] with central differences. A parameter is skipped
/// when perturbing it by `±eps` changes which units are active.
pub fn finite_diff_check(
    model: &Model,
    batch: &[Example],
    k: usize,
    scales: usize,
    opts: &FdOptions,
) -> Result<FdReport> {
    let (_, grads) = backward(model, batch, k, scales, opts.backward)?;
    let base_masks = masks(model, batch, k, opts.backward.feedback)?;
    let layout = model.layout();
    let mut coords: Vec<(usize, usize)> = grads
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(b, g)| (0..g.len()).map(move |j| (b, j)))
        .collect();
    if let Some(n) = opts.max_params {
        if n < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            coords.shuffle(&mut rng);
            coords.truncate(n);
            coords.sort_unstable();
        }
    }
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = model.clone();
    for (b, j) in coords {
        let orig = model.params()[b][j];
        let mut eval = |v: f64| -> Result<(f64, bool)> {
            probe.params_mut()[b][j] = v;
            let f = objective(&probe, batch, k, scales, opts.backward)?;
            let same = masks(&probe, batch, k, opts.backward.feedback)? == base_masks;
            Ok((f, same))
        };
        let (fp, same_p) = eval(orig + opts.eps)?;
        let (fm, same_m) = eval(orig - opts.eps)?;
        probe.params_mut()[b][j] = orig;
        if !(same_p && same_m) {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.eps);
        let analytic = grads.blocks[b][j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((layout[b], j));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs per coarse-to-fine stage.
    pub epochs: usize,
    pub k: usize,
    /// Head parameters of a scale have their rate divided by this factor
    /// once per finer scale trained after them.
    pub lr_decay_per_finer_scale: f64,
    /// Positive-label radius in heatmap pixels.
    pub positive_radius: f64,
    pub seed: u64,
    /// Number of coarse-to-fine stages; `None` trains every scale.
    pub stages: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs: 1,
            k: 2,
            lr_decay_per_finer_scale: 10.0,
            positive_radius: 1.0,
            seed: 0,
            stages: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return invalid(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if self.k == 0 {
            return invalid("k must be at least 1");
        }
        if !(self.lr_decay_per_finer_scale >= 1.0 && self.lr_decay_per_finer_scale.is_finite()) {
            return invalid(format!(
                "lr_decay_per_finer_scale must be at least 1, got {}",
                self.lr_decay_per_finer_scale
            ));
        }
        if !(self.positive_radius >= 0.0 && self.positive_radius.is_finite()) {
            return invalid(format!(
                "positive_radius must be nonnegative, got {}",
                self.positive_radius
            ));
        }
        if self.stages == Some(0) {
            return invalid("stages must be at least 1");
        }
        Ok(())
    }
}

/// `v ← μ·v − lr·(g + λ·θ); θ ← θ + v`, elementwise.
pub fn sgd_update(
    theta: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *t);
        *t += *v;
    }
}

/// Per-block learning rates while training `scales` scales: layer
/// parameters and the finest enabled head use the base rate, each coarser
/// head is slowed by one more factor of `lr_decay_per_finer_scale`.
pub fn block_learning_rates(model: &Model, cfg: &TrainConfig, scales: usize) -> Vec<f64> {
    model
        .layout()
        .into_iter()
        .map(|b| match b.head_scale() {
            Some(s) if s < scales => {
                cfg.learning_rate / cfg.lr_decay_per_finer_scale.powi((scales - 1 - s) as i32)
            }
            // Heads of disabled scales get no gradient; keep them frozen.
            Some(_) => 0.0,
            None => cfg.learning_rate,
        })
        .collect()
}

pub fn sgd_step(
    model: &mut Model,
    grads: &Gradients,
    velocity: &mut Gradients,
    cfg: &TrainConfig,
    scales: usize,
) -> Result<()> {
    let rates = block_learning_rates(model, cfg, scales);
    let mut params = model.params_mut();
    if grads.blocks.len() != params.len() || velocity.blocks.len() != params.len() {
        return shape_err("gradient layout does not match the model");
    }
    for (n, p) in params.iter_mut().enumerate() {
        if grads.blocks[n].len() != p.len() || velocity.blocks[n].len() != p.len() {
            return shape_err(format!("gradient block {n} has the wrong length"));
        }
        if rates[n] == 0.0 {
            continue;
        }
        sgd_update(
            p,
            &grads.blocks[n],
            &mut velocity.blocks[n],
            rates[n],
            cfg.momentum,
            cfg.weight_decay,
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// Number of enabled scales, 1-based.
    pub stage: usize,
    /// Epoch within the stage, 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {} stage {} loss {:.6} time {:.2}s",
            self.epoch, self.stage, self.mean_loss, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub velocity: Gradients,
    /// Total epochs run across all stages.
    pub epoch: usize,
}

/// Coarse-to-fine training: stage `s` enables the `s` coarsest scales and
/// starts from the parameters stage `s - 1` ended with. Each stage runs
/// `cfg.epochs` epochs of minibatch SGD in a seeded shuffled order.
pub fn train(
    samples: &[Sample],
    model: &mut Model,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    cfg.validate()?;
    if samples.is_empty() {
        return invalid("training set is empty");
    }
    let stages = cfg.stages.unwrap_or(model.heads.num_scales());
    if stages > model.heads.num_scales() {
        return invalid(format!(
            "{stages} stages requested, heads have {} scales",
            model.heads.num_scales()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Gradients::zeros_like(model);
    let mut epochs_run = 0;
    let opts = BackwardOptions::default();
    for stage in 1..=stages {
        let dims = model.output_dims(stage);
        let examples: Vec<Example> = samples
            .iter()
            .map(|s| Example::from_sample(s, dims, cfg.positive_radius))
            .collect::<Result<_>>()?;
        velocity = Gradients::zeros_like(model);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for epoch in 1..=cfg.epochs {
            let start = Instant::now();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Example> = chunk.iter().map(|&n| examples[n].clone()).collect();
                let (loss, grads) = backward(model, &batch, cfg.k, stage, opts)?;
                loss_sum += loss * chunk.len() as f64;
                sgd_step(model, &grads, &mut velocity, cfg, stage)?;
            }
            epochs_run += 1;
            on_epoch(&EpochLog {
                stage,
                epoch,
                mean_loss: loss_sum / examples.len() as f64,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(TrainState {
        velocity,
        epoch: epochs_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_layer(c_in: usize, c_out: usize, k: usize, stride: usize) -> LayerConfig {
        LayerConfig {
            in_channels: c_in,
            out_channels: c_out,
            kernel: (1, k),
            stride,
            pad: (0, k / 2),
            nms: None,
        }
    }

    fn toy_model(seed: u64) -> Model {
        let net = RgNetwork::new(
            Dims::new(1, 1, 8),
            vec![row_layer(1, 3, 3, 1), row_layer(3, 2, 3, 2)],
        )
        .unwrap();
        let heads = HeadBank::new(&net, 2, (1, 2), &[2, 1]).unwrap();
        let mut m = Model::new(net, heads).unwrap();
        m.init(seed);
        m
    }

    fn toy_batch(model: &Model, scales: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = model.output_dims(scales);
        let u = Normal::new(0.5, 0.5).unwrap();
        (0..3)
            .map(|n| {
                let image = Tensor::from_vec(
                    model.net.input_dims(),
                    (0..8).map(|_| u.sample(&mut rng)).collect(),
                )
                .unwrap();
                let mut target = Tensor::zeros(dims);
                target.data_mut()[n % dims.len()] = 1.0;
                Example {
                    image,
                    target,
                    visible: vec![true, n != 1],
                }
            })
            .collect()
    }

    #[test]
    fn zero_heads_give_zero_network_gradient() {
        let mut m = toy_model(1);
        for p in m.heads.params_mut() {
            p.fill(0.0);
        }
        let batch = toy_batch(&m, 3, 2);
        let (_, g) = backward(&m, &batch, 2, 3, BackwardOptions::default()).unwrap();
        for (b, block) in m.layout().iter().zip(&g.blocks) {
            if b.head_scale().is_none() {
                assert!(block.iter().all(|&v| v == 0.0), "{b}");
            }
        }
    }

    #[test]
    fn linear_path_gradient_is_a_product_of_weights() {
        // x -> z1 = a·x -> z2 = c·z1, logit = v·z2, one pixel, t = 1.
        let one = |c_in, c_out| LayerConfig {
            in_channels: c_in,
            out_channels: c_out,
            kernel: (1, 1),
            stride: 1,
            pad: (0, 0),
            nms: None,
        };
        let net = RgNetwork::new(Dims::new(1, 1, 1), vec![one(1, 1), one(1, 1)]).unwrap();
        let heads = HeadBank::new(&net, 1, (1, 1), &[]).unwrap();
        let mut m = Model::new(net, heads).unwrap();
        let (a, c, v, x) = (0.5, 0.8, 1.5, 2.0);
        m.net.set_filter_data(1, &[a]).unwrap();
        m.net.set_filter_data(2, &[c]).unwrap();
        m.heads.coarse_mut().weights[0] = v;
        let ex = Example {
            image: Tensor::row(&[x]),
            target: Tensor::row(&[1.0]),
            visible: vec![true],
        };
        let (_, g) = backward(&m, &[ex], 1, 1, BackwardOptions::default()).unwrap();
        let logit = v * c * a * x;
        let dl = sigmoid(logit) - 1.0;
        assert!((g.blocks[0][0] - dl * v * c * x).abs() < 1e-14);
        assert!((g.blocks[2][0] - dl * v * a * x).abs() < 1e-14);
        assert!((g.blocks[4][0] - dl * c * a * x).abs() < 1e-14);
        assert!((g.blocks[1][0] - dl * v * c).abs() < 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for k in 1..=3 {
            let m = toy_model(10 + k as u64);
            let batch = toy_batch(&m, 3, k as u64);
            let opts = FdOptions {
                backward: BackwardOptions {
                    weight_decay: 1e-3,
                    ..Default::default()
                },
                ..Default::default()
            };
            let r = finite_diff_check(&m, &batch, k, 3, &opts).unwrap();
            assert!(r.checked > m.num_params() / 2, "{r:?}");
            assert!(r.max_rel_error < 1e-4, "k={k}: {r:?}");
        }
    }

    #[test]
    fn constant_predictions_match_differences() {
        let m = toy_model(3);
        let dims = m.output_dims(3);
        let batch = vec![Example {
            image: Tensor::zeros(m.net.input_dims()),
            target: Tensor::zeros(dims),
            visible: vec![true, true],
        }];
        let mut m0 = m.clone();
        for p in m0.heads.params_mut() {
            p.fill(0.0);
        }
        let (loss, g) = backward(&m0, &batch, 2, 3, BackwardOptions::default()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        // Only the coarse bias sees a nonzero input: d/db mean(log-loss) = ½·(cells per keypoint)/N.
        let expect = 0.5 * (dims.plane() as f64) / dims.len() as f64;
        assert!(g.blocks[5].iter().all(|&v| (v - expect).abs() < 1e-12));
        let r = finite_diff_check(&m0, &batch, 2, 3, &FdOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn disabled_feedback_equals_single_pass() {
        let m = toy_model(4);
        let batch = toy_batch(&m, 3, 5);
        let no_fb = BackwardOptions {
            feedback: Feedback::Disabled,
            ..Default::default()
        };
        let (l1, g1) = backward(&m, &batch, 1, 3, BackwardOptions::default()).unwrap();
        let (l2, g2) = backward(&m, &batch, 2, 3, no_fb).unwrap();
        assert_eq!(l1, l2);
        let d = g1
            .flatten()
            .iter()
            .zip(g2.flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(d <= 1e-12 * g1.max_abs().max(1.0), "{d}");
    }

    #[test]
    fn sgd_examples() {
        let mut theta = [1.0];
        let mut v = [0.0];
        sgd_update(&mut theta, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] + 0.1).abs() < 1e-15 && (theta[0] - 0.9).abs() < 1e-15);

        let mut theta = [0.3, -2.0];
        let mut v = [0.0, 0.0];
        sgd_update(&mut theta, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(theta, [0.3, -2.0]);

        // Plain gradient descent without momentum or decay.
        let mut theta = [0.7];
        let mut v = [5.0];
        sgd_update(&mut theta, &[0.25], &mut v, 0.2, 0.0, 0.0);
        assert_eq!(theta[0], 0.7 - 0.2 * 0.25);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
            TrainConfig {
                weight_decay: -1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn coarser_heads_train_slower() {
        let m = toy_model(0);
        let cfg = TrainConfig {
            learning_rate: 1.0,
            ..Default::default()
        };
        let r = block_learning_rates(&m, &cfg, 3);
        let layout = m.layout();
        let at = |b| r[layout.iter().position(|&x| x == b).unwrap()];
        assert_eq!(at(ParamBlock::Filter(1)), 1.0);
        assert_eq!(at(ParamBlock::Tap(1)), 1.0);
        assert_eq!(at(ParamBlock::Tap(0)), 0.1);
        assert!((at(ParamBlock::CoarseWeights) - 0.01).abs() < 1e-15);
        let r1 = block_learning_rates(&m, &cfg, 1);
        assert_eq!(
            r1[layout
                .iter()
                .position(|&x| x == ParamBlock::Tap(0))
                .unwrap()],
            0.0
        );
    }

    fn toy_samples(n: usize) -> Vec<Sample> {
        // One bright pixel; the keypoint sits on it.
        (0..n)
            .map(|i| {
                let pos = (i * 3) % 8;
                let mut image = Tensor::zeros(Dims::new(1, 1, 8));
                image.data_mut()[pos] = 1.0;
                Sample {
                    image,
                    keypoints: vec![(pos as f64, 0.0); 2],
                    visible: vec![true, true],
                }
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_on_a_separable_toy_set() {
        let mut m = toy_model(6);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 50,
            k: 1,
            positive_radius: 0.0,
            stages: Some(1),
            ..Default::default()
        };
        let samples = toy_samples(8);
        let mut log = Vec::new();
        train(&samples, &mut m, &cfg, |e| log.push(e.mean_loss)).unwrap();
        assert_eq!(log.len(), 50);
        assert!(log[49] < 0.1 * log[0], "{} -> {}", log[0], log[49]);
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged_and_training_is_deterministic() {
        let init = toy_model(7);
        let samples = toy_samples(5);
        let mut m = init.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        train(&samples, &mut m, &cfg, |_| {}).unwrap();
        assert_eq!(m, init);

        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.1,
            batch_size: 2,
            ..Default::default()
        };
        let mut a = init.clone();
        let mut b = init.clone();
        let sa = train(&samples, &mut a, &cfg, |_| {}).unwrap();
        let sb = train(&samples, &mut b, &cfg, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa.epoch, 6);
        assert!(train(&[], &mut a, &cfg, |_| {}).is_err());
    }
}
