//! The hierarchical rectified Gaussian: layer geometry, weights, the
//! quadratic score, and an explicit dense expansion of the same model.
//!
//! Layers are numbered from 1; layer 0 is the observed input `x`. Self
//! weights are fixed at -1 and lateral inhibition inside an NMS group is a
//! hard exclusivity constraint, so neither is stored.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{correlate, Dims, FilterBank, Tensor};

/// Extent of a non-overlapping NMS window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupShape {
    pub h: usize,
    pub w: usize,
}

impl GroupShape {
    pub const fn square(g: usize) -> Self {
        GroupShape { h: g, w: g }
    }

    pub const fn size(&self) -> usize {
        self.h * self.w
    }

    pub fn tiles(&self, dims: Dims) -> bool {
        self.h > 0 && self.w > 0 && dims.height % self.h == 0 && dims.width % self.w == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: (usize, usize),
    pub nms: Option<GroupShape>,
}

impl LayerConfig {
    /// Square kernel with "same" padding (`k / 2` per side).
    pub fn same(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        LayerConfig {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride,
            pad: (k / 2, k / 2),
            nms: None,
        }
    }

    pub fn with_nms(mut self, group: GroupShape) -> Self {
        self.nms = Some(group);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgNetwork {
    input: Dims,
    layers: Vec<LayerConfig>,
    filters: Vec<FilterBank>,
    biases: Vec<Vec<f64>>,
    dims: Vec<Dims>,
}

impl RgNetwork {
    /// Builds a network with all weights and biases zero.
    pub fn new(input: Dims, layers: Vec<LayerConfig>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("a network needs at least one layer");
        }
        let mut dims = vec![input];
        let mut filters = Vec::with_capacity(layers.len());
        let mut biases = Vec::with_capacity(layers.len());
        for (n, layer) in layers.iter().enumerate() {
            let below = *dims.last().unwrap();
            if layer.in_channels != below.channels {
                return Err(Error::Architecture(format!(
                    "layer {} expects {} input channels but layer {n} has {}",
                    n + 1,
                    layer.in_channels,
                    below.channels
                )));
            }
            let f = FilterBank::zeros(
                layer.out_channels,
                layer.in_channels,
                layer.kernel,
                layer.stride,
                layer.pad,
            )?;
            let d = f.output_dims(below)?;
            if let Some(g) = layer.nms {
                if !g.tiles(d) {
                    return Err(Error::Architecture(format!(
                        "layer {} ({d}) is not tiled by {}x{} NMS groups",
                        n + 1,
                        g.h,
                        g.w
                    )));
                }
            }
            dims.push(d);
            filters.push(f);
            biases.push(vec![0.0; layer.out_channels]);
        }
        Ok(RgNetwork {
            input,
            layers,
            filters,
            biases,
            dims,
        })
    }

    /// Parameter slices in the order `w_1, b_1, w_2, b_2, ...`.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.filters.len());
        for (f, b) in self.filters.iter_mut().zip(self.biases.iter_mut()) {
            out.push(f.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dims(&self) -> Dims {
        self.input
    }

    /// Dims of layer `i`; `i = 0` is the input.
    pub fn dims(&self, i: usize) -> Dims {
        self.dims[i]
    }

    pub fn layer(&self, i: usize) -> &LayerConfig {
        &self.layers[i - 1]
    }

    pub fn layers(&self) -> &[LayerConfig] {
        &self.layers
    }

    /// Filters connecting layer `i - 1` to layer `i`.
    pub fn filter(&self, i: usize) -> &FilterBank {
        &self.filters[i - 1]
    }

    pub fn filter_mut(&mut self, i: usize) -> &mut FilterBank {
        &mut self.filters[i - 1]
    }

    pub fn bias(&self, i: usize) -> &[f64] {
        &self.biases[i - 1]
    }

    pub fn bias_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.biases[i - 1]
    }

    pub fn set_filter_data(&mut self, i: usize, data: &[f64]) -> Result<()> {
        let f = self.filter_mut(i);
        if data.len() != f.data().len() {
            return shape_err(format!(
                "layer {i} has {} weights, got {}",
                f.data().len(),
                data.len()
            ));
        }
        f.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn set_bias(&mut self, i: usize, data: &[f64]) -> Result<()> {
        let b = self.bias_mut(i);
        if data.len() != b.len() {
            return shape_err(format!(
                "layer {i} has {} biases, got {}",
                b.len(),
                data.len()
            ));
        }
        b.copy_from_slice(data);
        Ok(())
    }

    pub fn latent_count(&self) -> usize {
        self.dims[1..].iter().map(Dims::len).sum()
    }

    /// Offset of layer `i`'s first variable in the dense ordering
    /// (layer-major, then channel, then row-major).
    pub fn latent_offset(&self, i: usize) -> usize {
        self.dims[1..i].iter().map(Dims::len).sum()
    }

    pub fn has_nms(&self) -> bool {
        self.layers.iter().any(|l| l.nms.is_some())
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dims() != self.input {
            return shape_err(format!("network input is {}, got {}", self.input, x.dims()));
        }
        Ok(())
    }

    /// Score of a full configuration computed layer by layer:
    /// `Σ_i -½‖z_i‖² + b_i·z_i + ⟨z_i, correlate(w_i, z_{i-1})⟩` with `z_0 = x`.
    /// The constant self-energy of the observed input is dropped. Returns
    /// `None` when some NMS group holds two positive activations.
    pub fn layered_score(&self, x: &Tensor, states: &[Tensor]) -> Result<Option<f64>> {
        self.check_input(x)?;
        if states.len() != self.num_layers() {
            return shape_err(format!(
                "expected {} layer states, got {}",
                self.num_layers(),
                states.len()
            ));
        }
        let mut total = 0.0;
        for i in 1..=self.num_layers() {
            let z = &states[i - 1];
            if z.dims() != self.dims(i) {
                return shape_err(format!(
                    "layer {i} state is {}, expected {}",
                    z.dims(),
                    self.dims(i)
                ));
            }
            if let Some(g) = self.layer(i).nms {
                if !groups_exclusive(z, g) {
                    return Ok(None);
                }
            }
            let below = if i == 1 { x } else { &states[i - 2] };
            let bot = correlate(self.filter(i), below)?;
            let plane = z.dims().plane();
            for (c, &b) in self.bias(i).iter().enumerate() {
                for (k, &v) in z.channel(c).iter().enumerate() {
                    total += -0.5 * v * v + b * v + v * bot.channel(c)[k];
                }
                debug_assert_eq!(z.channel(c).len(), plane);
            }
        }
        Ok(Some(total))
    }
}

fn groups_exclusive(z: &Tensor, g: GroupShape) -> bool {
    for c in 0..z.channels() {
        for gy in (0..z.height()).step_by(g.h) {
            for gx in (0..z.width()).step_by(g.w) {
                let mut active = 0;
                for y in gy..gy + g.h {
                    for x in gx..gx + g.w {
                        if z.get(c, y, x) > 0.0 {
                            active += 1;
                        }
                    }
                }
                if active > 1 {
                    return false;
                }
            }
        }
    }
    true
}

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return shape_err("matrix rows must all have length n");
        }
        Ok(SquareMatrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return shape_err(format!("{n}x{n} matrix needs {} entries", n * n));
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn quad_form(&self, z: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| z[i] * self.row(i).iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    pub fn mul_vec(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn negated(&self) -> SquareMatrix {
        SquareMatrix {
            n: self.n,
            data: self.data.iter().map(|v| -v).collect(),
        }
    }
}

/// `max ½zᵀWz + bᵀz` over `z ≥ 0`, with at most one positive entry per group.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    w: SquareMatrix,
    b: Vec<f64>,
    groups: Vec<Vec<usize>>,
}

impl DenseQp {
    pub fn new(w: SquareMatrix, b: Vec<f64>, groups: Vec<Vec<usize>>) -> Result<Self> {
        let n = w.n();
        if b.len() != n {
            return shape_err(format!("bias has length {}, expected {n}", b.len()));
        }
        if !w.is_symmetric(1e-12) {
            return invalid("W must be symmetric");
        }
        let mut seen = vec![false; n];
        for g in &groups {
            if g.is_empty() {
                return invalid("empty exclusivity group");
            }
            for &i in g {
                if i >= n {
                    return invalid(format!("group index {i} out of range for n = {n}"));
                }
                if seen[i] {
                    return invalid(format!("variable {i} appears in more than one group"));
                }
                seen[i] = true;
            }
        }
        Ok(DenseQp { w, b, groups })
    }

    pub fn n(&self) -> usize {
        self.w.n()
    }

    pub fn w(&self) -> &SquareMatrix {
        &self.w
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Finite(f64),
    /// Some exclusivity group has two or more positive entries.
    Infeasible,
}

impl Score {
    pub fn value(self) -> Option<f64> {
        match self {
            Score::Finite(v) => Some(v),
            Score::Infeasible => None,
        }
    }
}

/// `½zᵀWz + bᵀz`, or [`Score::Infeasible`] when an exclusivity group is violated.
pub fn score(qp: &DenseQp, z: &[f64]) -> Result<Score> {
    if z.len() != qp.n() {
        return shape_err(format!("z has length {}, expected {}", z.len(), qp.n()));
    }
    if let Some(i) = z.iter().position(|&v| v < 0.0 || v.is_nan()) {
        return invalid(format!("z[{i}] = {} is not nonnegative", z[i]));
    }
    for g in qp.groups() {
        if g.iter().filter(|&&i| z[i] > 0.0).count() > 1 {
            return Ok(Score::Infeasible);
        }
    }
    let lin: f64 = qp.b.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok(Score::Finite(0.5 * qp.w.quad_form(z) + lin))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Copositivity {
    CopositiveOnGrid { min_value: f64 },
    Counterexample { z: Vec<f64>, value: f64 },
}

pub const COPOSITIVE_MAX_N: usize = 12;
const COPOSITIVE_MAX_POINTS: u128 = 50_000_000;
const COPOSITIVE_TOL: f64 = -1e-12;

/// Minimizes `zᵀMz` over the simplex grid `{z ≥ 0, Σz = 1, z ∈ ℤⁿ/resolution}`.
///
/// Only certifies "copositive on the grid"; a counterexample, when
/// returned, is re-evaluated and genuinely has `zᵀMz < 0`.
pub fn check_copositive_grid(m: &SquareMatrix, resolution: usize) -> Result<Copositivity> {
    let n = m.n();
    if n == 0 || resolution == 0 {
        return invalid("matrix size and resolution must be positive");
    }
    if n > COPOSITIVE_MAX_N {
        return Err(Error::Scale(format!(
            "grid copositivity search supports n <= {COPOSITIVE_MAX_N}, got n = {n}"
        )));
    }
    if !m.is_symmetric(1e-12) {
        return invalid("copositivity check needs a symmetric matrix");
    }
    let points = binomial((resolution + n - 1) as u128, (n - 1) as u128);
    if points > COPOSITIVE_MAX_POINTS {
        return Err(Error::Scale(format!(
            "{points} grid points at resolution {resolution} exceeds {COPOSITIVE_MAX_POINTS}"
        )));
    }

    let r = resolution as f64;
    let mut counts = vec![0usize; n];
    let mut z = vec![0.0; n];
    let mut best_value = f64::INFINITY;
    let mut best = Vec::new();
    // Walk all compositions of `resolution` into n parts.
    counts[0] = resolution;
    loop {
        for (zi, &c) in z.iter_mut().zip(&counts) {
            *zi = c as f64 / r;
        }
        let v = m.quad_form(&z);
        if v < best_value {
            best_value = v;
            best.clone_from(&z);
        }
        if !next_composition(&mut counts) {
            break;
        }
    }

    if best_value < COPOSITIVE_TOL && m.quad_form(&best) < COPOSITIVE_TOL {
        Ok(Copositivity::Counterexample {
            value: m.quad_form(&best),
            z: best,
        })
    } else {
        Ok(Copositivity::CopositiveOnGrid {
            min_value: best_value,
        })
    }
}

/// Advances to the next composition in reverse-lexicographic order.
fn next_composition(c: &mut [usize]) -> bool {
    let n = c.len();
    // Find the last nonzero entry before the final slot.
    let Some(k) = (0..n - 1).rev().find(|&k| c[k] > 0) else {
        return false;
    };
    let tail = c[n - 1];
    c[n - 1] = 0;
    c[k] -= 1;
    c[k + 1] = tail + 1;
    true
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

pub const DENSE_MAX_VARS: usize = 4096;

/// Explicit dense QP over the latent variables of `net` with the observed
/// input folded into the linear term of layer 1.
pub fn dense_expand(net: &RgNetwork, x: &Tensor) -> Result<DenseQp> {
    net.check_input(x)?;
    let n = net.latent_count();
    if n > DENSE_MAX_VARS {
        return Err(Error::Scale(format!(
            "{n} latent variables exceeds the dense limit of {DENSE_MAX_VARS}"
        )));
    }
    let mut w = SquareMatrix::zeros(n);
    let mut b = vec![0.0; n];
    let mut groups = Vec::new();

    for i in 1..=net.num_layers() {
        let d = net.dims(i);
        let off = net.latent_offset(i);
        for c in 0..d.channels {
            for k in 0..d.plane() {
                let u = off + c * d.plane() + k;
                w.set(u, u, -1.0);
                b[u] = net.bias(i)[c];
            }
        }
        if let Some(g) = net.layer(i).nms {
            for c in 0..d.channels {
                for gy in (0..d.height).step_by(g.h) {
                    for gx in (0..d.width).step_by(g.w) {
                        let mut members = Vec::with_capacity(g.size());
                        for y in gy..gy + g.h {
                            for xx in gx..gx + g.w {
                                members.push(off + (c * d.height + y) * d.width + xx);
                            }
                        }
                        groups.push(members);
                    }
                }
            }
        }

        let f = net.filter(i);
        let below = net.dims(i - 1);
        let (ph, pw) = f.pad();
        let s = f.stride();
        let (kh, kw) = f.kernel();
        for o in 0..d.channels {
            for uy in 0..d.height {
                for ux in 0..d.width {
                    let u = off + (o * d.height + uy) * d.width + ux;
                    for ic in 0..below.channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let vy = (uy * s + ky) as isize - ph as isize;
                                let vx = (ux * s + kx) as isize - pw as isize;
                                if vy < 0
                                    || vx < 0
                                    || vy as usize >= below.height
                                    || vx as usize >= below.width
                                {
                                    continue;
                                }
                                let (vy, vx) = (vy as usize, vx as usize);
                                let wt = f.get(o, ic, ky, kx);
                                if i == 1 {
                                    b[u] += wt * x.get(ic, vy, vx);
                                } else {
                                    let v = net.latent_offset(i - 1)
                                        + (ic * below.height + vy) * below.width
                                        + vx;
                                    w.set(u, v, wt);
                                    w.set(v, u, wt);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    DenseQp::new(w, b, groups)
}

/// Packs per-layer states into the dense variable ordering.
pub fn flatten_states(states: &[Tensor]) -> Vec<f64> {
    states
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

/// Splits a dense vector back into per-layer tensors of `net`.
pub fn unflatten_states(net: &RgNetwork, z: &[f64]) -> Result<Vec<Tensor>> {
    if z.len() != net.latent_count() {
        return shape_err(format!(
            "vector has {} entries, network has {} latents",
            z.len(),
            net.latent_count()
        ));
    }
    (1..=net.num_layers())
        .map(|i| {
            let off = net.latent_offset(i);
            let d = net.dims(i);
            Tensor::from_vec(d, z[off..off + d.len()].to_vec())
        })
        .collect()
}
