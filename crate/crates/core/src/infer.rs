//! Inference: layerwise coordinate ascent on the hierarchical QP, unrolled
//! for a fixed number of passes, plus two dense reference solvers.

use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{DenseQp, GroupShape, RgNetwork};
use crate::tensor::{convolve_transposed_acc, correlate_acc, Tensor};

/// Per-layer activations `z_1 ..= z_L` (index 0 holds layer 1).
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub states: Vec<Tensor>,
    /// Snapshot of every layer after each completed pass, when requested.
    pub pass_log: Option<Vec<Vec<Tensor>>>,
    /// Largest coordinate change during the final pass.
    pub converged_gap: Option<f64>,
}

impl InferenceTrace {
    /// All variables zero, the starting point of every unrolled run.
    pub fn zeros(net: &RgNetwork) -> Self {
        InferenceTrace {
            states: (1..=net.num_layers())
                .map(|i| Tensor::zeros(net.dims(i)))
                .collect(),
            pass_log: None,
            converged_gap: None,
        }
    }

    /// State of layer `i` (1-based).
    pub fn layer(&self, i: usize) -> &Tensor {
        &self.states[i - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(Tensor::is_finite)
    }
}

/// Whether layer updates include the top-down term. Disabling it turns
/// every pass after the first into a recomputation of the bottom-up pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Feedback {
    #[default]
    Enabled,
    Disabled,
}

/// Optimal value of a single variable with self-weight -1.
#[inline]
pub fn coord_update_scalar(drive: f64) -> f64 {
    drive.max(0.0)
}

/// Keeps the rectified maximum of every group and zeroes the rest.
/// Ties go to the lowest linear index.
pub fn nms_group_update(drives: &Tensor, group: GroupShape) -> Result<Tensor> {
    if !group.tiles(drives.dims()) {
        return shape_err(format!(
            "{}x{} groups do not tile {}",
            group.h,
            group.w,
            drives.dims()
        ));
    }
    let mut out = drives.clone();
    let mut mask = vec![false; drives.len()];
    nms_in_place(&mut out, group, &mut mask);
    Ok(out)
}

/// Applies NMS + rectification in place. `mask[k]` is set iff position `k`
/// won its group with a strictly positive drive.
fn nms_in_place(t: &mut Tensor, g: GroupShape, mask: &mut [bool]) {
    let (h, w) = (t.height(), t.width());
    for c in 0..t.channels() {
        for gy in (0..h).step_by(g.h) {
            for gx in (0..w).step_by(g.w) {
                let mut best = t.index(c, gy, gx);
                let mut best_v = t.data()[best];
                for y in gy..gy + g.h {
                    for x in gx..gx + g.w {
                        let k = t.index(c, y, x);
                        if t.data()[k] > best_v {
                            best = k;
                            best_v = t.data()[k];
                        }
                    }
                }
                for y in gy..gy + g.h {
                    for x in gx..gx + g.w {
                        let k = t.index(c, y, x);
                        let keep = k == best && best_v > 0.0;
                        mask[k] = keep;
                        if !keep {
                            t.data_mut()[k] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Recomputes layer `i` from its neighbours. Returns the new state and the
/// mask of positions whose output depends on the drive (pre-activation
/// positive, and the group winner under NMS).
pub(crate) fn compute_layer(
    net: &RgNetwork,
    x: &Tensor,
    states: &[Tensor],
    i: usize,
    feedback: Feedback,
) -> (Tensor, Vec<bool>) {
    let below = if i == 1 { x } else { &states[i - 2] };
    let mut drive = Tensor::zeros(net.dims(i));
    correlate_acc(net.filter(i), below, &mut drive);
    if i < net.num_layers() && feedback == Feedback::Enabled {
        let above = &states[i];
        if above.data().iter().any(|&v| v != 0.0) {
            convolve_transposed_acc(net.filter(i + 1), above, &mut drive);
        }
    }
    let plane = drive.dims().plane();
    for (c, &b) in net.bias(i).iter().enumerate() {
        for v in &mut drive.data_mut()[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
    let mut mask = vec![false; drive.len()];
    match net.layer(i).nms {
        Some(g) => nms_in_place(&mut drive, g, &mut mask),
        None => {
            for (v, m) in drive.data_mut().iter_mut().zip(mask.iter_mut()) {
                *m = *v > 0.0;
                *v = coord_update_scalar(*v);
            }
        }
    }
    (drive, mask)
}

fn check_trace(net: &RgNetwork, trace: &InferenceTrace) -> Result<()> {
    if trace.states.len() != net.num_layers() {
        return shape_err(format!(
            "trace has {} layers, network has {}",
            trace.states.len(),
            net.num_layers()
        ));
    }
    for (n, s) in trace.states.iter().enumerate() {
        if s.dims() != net.dims(n + 1) {
            return shape_err(format!(
                "layer {} state is {}, expected {}",
                n + 1,
                s.dims(),
                net.dims(n + 1)
            ));
        }
    }
    Ok(())
}

/// One coordinate update of every variable in layer `i` (1-based):
/// `z_i = max(0, b_i + top_i + bot_i)`, followed by NMS on grouped layers.
pub fn layer_update(
    net: &RgNetwork,
    trace: &mut InferenceTrace,
    i: usize,
    x: &Tensor,
) -> Result<()> {
    if i == 0 || i > net.num_layers() {
        return invalid(format!(
            "layer index {i} out of range 1..={}",
            net.num_layers()
        ));
    }
    net.check_input(x)?;
    check_trace(net, trace)?;
    let (z, _) = compute_layer(net, x, &trace.states, i, Feedback::Enabled);
    trace.states[i - 1] = z;
    Ok(())
}

/// Layers visited by pass `p` (1-based) of an `num_layers`-deep hierarchy:
/// the first pass ascends from layer 1, even passes descend from `L - 1`,
/// later odd passes ascend from layer 2.
pub fn pass_schedule(p: usize, num_layers: usize) -> Vec<usize> {
    match p {
        0 => Vec::new(),
        1 => (1..=num_layers).collect(),
        p if p % 2 == 0 => (1..num_layers).rev().collect(),
        _ => (2..=num_layers).collect(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UnrollOptions {
    pub feedback: Feedback,
    pub record_passes: bool,
}

/// `k` passes of layerwise coordinate ascent starting from all-zero states.
pub fn qp_k(net: &RgNetwork, x: &Tensor, k: usize) -> Result<InferenceTrace> {
    qp_k_with(net, x, k, UnrollOptions::default())
}

pub fn qp_k_with(
    net: &RgNetwork,
    x: &Tensor,
    k: usize,
    opts: UnrollOptions,
) -> Result<InferenceTrace> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    net.check_input(x)?;
    let mut trace = InferenceTrace::zeros(net);
    let mut log = opts.record_passes.then(Vec::new);
    let mut gap = 0.0;
    for p in 1..=k {
        gap = run_pass(net, x, &mut trace.states, p, opts.feedback);
        if let Some(log) = log.as_mut() {
            log.push(trace.states.clone());
        }
    }
    trace.pass_log = log;
    trace.converged_gap = Some(gap);
    Ok(trace)
}

fn run_pass(net: &RgNetwork, x: &Tensor, states: &mut [Tensor], p: usize, fb: Feedback) -> f64 {
    let mut gap: f64 = 0.0;
    for i in pass_schedule(p, net.num_layers()) {
        let (z, _) = compute_layer(net, x, states, i, fb);
        gap = gap.max(z.max_abs_diff(&states[i - 1]));
        states[i - 1] = z;
    }
    gap
}

/// Alternating passes until a pass (after the first) changes no variable
/// by more than `tol`. Fails if `max_passes` is exhausted first.
pub fn qp_converge(
    net: &RgNetwork,
    x: &Tensor,
    tol: f64,
    max_passes: usize,
) -> Result<InferenceTrace> {
    net.check_input(x)?;
    let mut trace = InferenceTrace::zeros(net);
    for p in 1..=max_passes {
        let gap = run_pass(net, x, &mut trace.states, p, Feedback::Enabled);
        trace.converged_gap = Some(gap);
        if !gap.is_finite() || trace.states.iter().any(|s| !s.is_finite()) {
            break;
        }
        if p > 1 && gap < tol {
            return Ok(trace);
        }
    }
    Err(Error::InvalidArgument(format!(
        "layerwise inference did not reach gap {tol} within {max_passes} passes (last gap {:?})",
        trace.converged_gap
    )))
}

/// One recorded layer update of an unrolled run.
#[derive(Debug, Clone)]
pub(crate) struct TapeStep {
    pub layer: usize,
    /// Version of layer `i - 1` read (ignored for layer 1, which reads `x`).
    pub below: usize,
    /// Version of layer `i + 1` read through the top-down term, if any.
    pub above: Option<usize>,
    pub output: usize,
    pub mask: Vec<bool>,
}

/// Every intermediate state of an unrolled run, for reverse-mode
/// differentiation. `versions[i - 1][0]` is layer `i`'s all-zero start.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    pub versions: Vec<Vec<Tensor>>,
    pub steps: Vec<TapeStep>,
}

impl Tape {
    pub fn latest(&self, i: usize) -> usize {
        self.versions[i - 1].len() - 1
    }
}

/// `qp_k` that also records the unrolled graph. The states it returns are
/// bit-identical to `qp_k_with` under the same options.
pub(crate) fn qp_k_taped(
    net: &RgNetwork,
    x: &Tensor,
    k: usize,
    feedback: Feedback,
) -> Result<(InferenceTrace, Tape)> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    net.check_input(x)?;
    let mut trace = InferenceTrace::zeros(net);
    let mut tape = Tape {
        versions: trace.states.iter().map(|s| vec![s.clone()]).collect(),
        steps: Vec::new(),
    };
    let top = net.num_layers();
    let mut gap: f64 = 0.0;
    for p in 1..=k {
        gap = 0.0;
        for i in pass_schedule(p, top) {
            let below = if i > 1 { tape.latest(i - 1) } else { 0 };
            let above = (i < top && feedback == Feedback::Enabled).then(|| tape.latest(i + 1));
            let (z, mask) = compute_layer(net, x, &trace.states, i, feedback);
            gap = gap.max(z.max_abs_diff(&trace.states[i - 1]));
            tape.versions[i - 1].push(z.clone());
            trace.states[i - 1] = z;
            tape.steps.push(TapeStep {
                layer: i,
                below,
                above,
                output: tape.latest(i),
                mask,
            });
        }
    }
    trace.converged_gap = Some(gap);
    Ok((trace, tape))
}

pub const DIVERGENCE_LIMIT: f64 = 1e12;
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSolution {
    pub z: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Some variable exceeded [`DIVERGENCE_LIMIT`].
    pub diverged: bool,
}

/// Update blocks: each exclusivity group, plus one singleton per ungrouped
/// variable, ordered by smallest member.
fn update_blocks(qp: &DenseQp) -> Vec<Vec<usize>> {
    let n = qp.n();
    let mut grouped = vec![false; n];
    let mut blocks: Vec<Vec<usize>> = qp.groups().to_vec();
    for g in qp.groups() {
        for &i in g {
            grouped[i] = true;
        }
    }
    blocks.extend((0..n).filter(|&i| !grouped[i]).map(|i| vec![i]));
    blocks.sort_by_key(|b| *b.iter().min().unwrap());
    blocks
}

/// Exact maximization of the score over one block, others fixed. For a
/// group the feasible set is "at most one member positive", so the best
/// member is the one with the largest drive.
fn update_block(qp: &DenseQp, z: &mut [f64], block: &[usize]) -> f64 {
    let w = qp.w();
    let drive = |j: usize, z: &[f64]| -> f64 {
        let row = w.row(j);
        let mut acc = qp.b()[j];
        for (k, (&wk, &zk)) in row.iter().zip(z.iter()).enumerate() {
            if !block.contains(&k) {
                acc += wk * zk;
            }
        }
        acc
    };
    if let [j] = *block {
        let new = coord_update_scalar(drive(j, z));
        let delta = (new - z[j]).abs();
        z[j] = new;
        return delta;
    }
    let drives: Vec<f64> = block.iter().map(|&j| drive(j, z)).collect();
    let mut best = 0;
    for (n, &d) in drives.iter().enumerate() {
        if d > drives[best] || (d == drives[best] && block[n] < block[best]) {
            best = n;
        }
    }
    let mut delta: f64 = 0.0;
    for (n, &j) in block.iter().enumerate() {
        let new = if n == best {
            coord_update_scalar(drives[n])
        } else {
            0.0
        };
        delta = delta.max((new - z[j]).abs());
        z[j] = new;
    }
    delta
}

fn check_unit_diagonal(qp: &DenseQp) -> Result<()> {
    for i in 0..qp.n() {
        if qp.w().get(i, i) != -1.0 {
            return invalid(format!(
                "coordinate updates need diag(W) = -1, found W[{i}][{i}] = {}",
                qp.w().get(i, i)
            ));
        }
    }
    Ok(())
}

/// Cyclic block coordinate ascent from `z = 0`, stopping when a sweep
/// moves no coordinate by `tol` or more.
pub fn dense_coordinate_descent(
    qp: &DenseQp,
    max_sweeps: usize,
    tol: f64,
) -> Result<DenseSolution> {
    dense_coordinate_descent_observed(qp, max_sweeps, tol, |_, _| {})
}

/// As [`dense_coordinate_descent`], calling `observe(block, z)` after
/// every block update.
pub fn dense_coordinate_descent_observed(
    qp: &DenseQp,
    max_sweeps: usize,
    tol: f64,
    mut observe: impl FnMut(&[usize], &[f64]),
) -> Result<DenseSolution> {
    check_unit_diagonal(qp)?;
    let blocks = update_blocks(qp);
    let mut z = vec![0.0; qp.n()];
    for sweep in 1..=max_sweeps {
        let mut change: f64 = 0.0;
        for block in &blocks {
            change = change.max(update_block(qp, &mut z, block));
            observe(block, &z);
        }
        if z.iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
        {
            return Ok(DenseSolution {
                z,
                sweeps: sweep,
                converged: false,
                diverged: true,
            });
        }
        if change < tol {
            return Ok(DenseSolution {
                z,
                sweeps: sweep,
                converged: true,
                diverged: false,
            });
        }
    }
    Ok(DenseSolution {
        z,
        sweeps: max_sweeps,
        converged: false,
        diverged: false,
    })
}

/// The classical baseline: `z ← max(0, z + step·(Wz + b))` from `z = 0`.
pub fn projected_gradient(qp: &DenseQp, step: f64, iters: usize) -> Result<Vec<f64>> {
    if !qp.groups().is_empty() {
        return invalid("projected gradient has no projection onto exclusivity groups");
    }
    if step <= 0.0 || !step.is_finite() {
        return invalid(format!("step must be positive, got {step}"));
    }
    let mut z = vec![0.0; qp.n()];
    for _ in 0..iters {
        let grad = qp.w().mul_vec(&z);
        for ((zi, gi), bi) in z.iter_mut().zip(grad).zip(qp.b()) {
            *zi = (*zi + step * (gi + bi)).max(0.0);
        }
    }
    Ok(z)
}
