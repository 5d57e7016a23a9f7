//! Multi-scale linear keypoint predictors.
//!
//! A spatially-varying coarse head maps the whole top layer to an
//! `M x gh x gw` grid. Each tap is a 1x1 filter bank on some layer; the
//! running prediction is upsampled (nearest neighbour, integer factor) to
//! the tap's resolution and the tap's output is added.

use crate::error::{invalid, shape_err, Error, Result};
use crate::infer::InferenceTrace;
use crate::model::RgNetwork;
use crate::tensor::{
    convolve_transposed_acc, correlate, correlate_filter_grad_acc, Dims, FilterBank, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseHead {
    pub grid: (usize, usize),
    /// Row-major `(M * gh * gw) x top_len`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub layer: usize,
    pub filter: FilterBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadBank {
    keypoints: usize,
    top_layer: usize,
    top_len: usize,
    coarse: CoarseHead,
    /// Ordered coarse to fine.
    taps: Vec<Tap>,
}

impl HeadBank {
    /// Zero-initialised heads for `net`: the coarse head reads the top
    /// layer, `tap_layers` are listed coarse to fine.
    pub fn new(
        net: &RgNetwork,
        keypoints: usize,
        grid: (usize, usize),
        tap_layers: &[usize],
    ) -> Result<Self> {
        if keypoints == 0 {
            return invalid("at least one keypoint is required");
        }
        if grid.0 == 0 || grid.1 == 0 {
            return invalid("coarse grid must be nonempty");
        }
        let top_layer = net.num_layers();
        let top_len = net.dims(top_layer).len();
        let mut seen = Vec::new();
        let mut res = grid;
        let mut taps = Vec::with_capacity(tap_layers.len());
        for &layer in tap_layers {
            if layer == 0 || layer > top_layer {
                return Err(Error::Architecture(format!(
                    "tap on layer {layer}, network has layers 1..={top_layer}"
                )));
            }
            if seen.contains(&layer) {
                return Err(Error::Architecture(format!(
                    "layer {layer} is tapped twice"
                )));
            }
            seen.push(layer);
            let d = net.dims(layer);
            if d.height % res.0 != 0 || d.width % res.1 != 0 {
                return Err(Error::Architecture(format!(
                    "tap layer {layer} ({}x{}) is not an integer upsampling of {}x{}",
                    d.height, d.width, res.0, res.1
                )));
            }
            res = (d.height, d.width);
            taps.push(Tap {
                layer,
                filter: FilterBank::zeros(keypoints, d.channels, (1, 1), 1, (0, 0))?,
            });
        }
        Ok(HeadBank {
            keypoints,
            top_layer,
            top_len,
            coarse: CoarseHead {
                grid,
                weights: vec![0.0; keypoints * grid.0 * grid.1 * top_len],
                bias: vec![0.0; keypoints],
            },
            taps,
        })
    }

    pub fn keypoints(&self) -> usize {
        self.keypoints
    }

    pub fn coarse(&self) -> &CoarseHead {
        &self.coarse
    }

    pub fn coarse_mut(&mut self) -> &mut CoarseHead {
        &mut self.coarse
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [Tap] {
        &mut self.taps
    }

    pub fn tap_layers(&self) -> Vec<usize> {
        self.taps.iter().map(|t| t.layer).collect()
    }

    /// Parameter slices: coarse weights, coarse bias, then each tap.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.coarse.weights, &mut self.coarse.bias];
        for t in &mut self.taps {
            out.push(t.filter.data_mut());
        }
        out
    }

    /// Whether `trace`-producing `net` has the layer shapes these heads read.
    pub fn check_network(&self, net: &RgNetwork) -> Result<()> {
        if net.num_layers() != self.top_layer || net.dims(self.top_layer).len() != self.top_len {
            return Err(Error::Architecture(format!(
                "coarse head reads {} values from layer {}, network top layer {} has {}",
                self.top_len,
                self.top_layer,
                net.num_layers(),
                net.dims(net.num_layers()).len()
            )));
        }
        let mut res = self.coarse.grid;
        for tap in &self.taps {
            if tap.layer == 0 || tap.layer > net.num_layers() {
                return Err(Error::Architecture(format!(
                    "tap on missing layer {}",
                    tap.layer
                )));
            }
            let d = net.dims(tap.layer);
            if d.channels != tap.filter.in_channels()
                || d.height % res.0 != 0
                || d.width % res.1 != 0
            {
                return Err(Error::Architecture(format!(
                    "tap on layer {} does not fit that layer ({d})",
                    tap.layer
                )));
            }
            res = (d.height, d.width);
        }
        Ok(())
    }

    /// Number of prediction scales: the coarse head plus each tap.
    pub fn num_scales(&self) -> usize {
        1 + self.taps.len()
    }

    /// Heatmap dims when the `scales` coarsest scales are enabled.
    pub fn output_dims(&self, net: &RgNetwork, scales: usize) -> Dims {
        let (h, w) = if scales <= 1 {
            self.coarse.grid
        } else {
            let d = net.dims(self.taps[scales - 2].layer);
            (d.height, d.width)
        };
        Dims::new(self.keypoints, h, w)
    }

    fn check_scales(&self, scales: usize) -> Result<()> {
        if scales == 0 || scales > self.num_scales() {
            return invalid(format!(
                "scales must be in 1..={}, got {scales}",
                self.num_scales()
            ));
        }
        Ok(())
    }

    fn check_trace(&self, trace: &InferenceTrace, scales: usize) -> Result<()> {
        let top = trace
            .states
            .get(self.top_layer - 1)
            .ok_or_else(|| Error::Shape("trace is missing the top layer".into()))?;
        if top.len() != self.top_len {
            return shape_err(format!(
                "coarse head expects {} top-layer values, trace has {}",
                self.top_len,
                top.len()
            ));
        }
        for tap in &self.taps[..scales - 1] {
            let z = trace.states.get(tap.layer - 1).ok_or_else(|| {
                Error::Shape(format!("trace is missing tapped layer {}", tap.layer))
            })?;
            if z.channels() != tap.filter.in_channels() {
                return shape_err(format!(
                    "tap on layer {} expects {} channels, trace has {}",
                    tap.layer,
                    tap.filter.in_channels(),
                    z.channels()
                ));
            }
        }
        Ok(())
    }

    fn coarse_forward(&self, top: &Tensor) -> Tensor {
        let (gh, gw) = self.coarse.grid;
        let cells = gh * gw;
        let mut out = Tensor::zeros(Dims::new(self.keypoints, gh, gw));
        for m in 0..self.keypoints {
            for p in 0..cells {
                let row = &self.coarse.weights[(m * cells + p) * self.top_len..][..self.top_len];
                let acc: f64 = row.iter().zip(top.data()).map(|(a, b)| a * b).sum();
                out.data_mut()[m * cells + p] = acc + self.coarse.bias[m];
            }
        }
        out
    }

    /// Logits `y = Vᵀz` with the `scales` coarsest scales enabled.
    pub fn predict(&self, trace: &InferenceTrace, scales: usize) -> Result<Tensor> {
        self.check_scales(scales)?;
        self.check_trace(trace, scales)?;
        let mut y = self.coarse_forward(&trace.states[self.top_layer - 1]);
        for tap in &self.taps[..scales - 1] {
            let fine = correlate(&tap.filter, &trace.states[tap.layer - 1])?;
            let mut up = upsample_nearest(&y, fine.height(), fine.width())?;
            up.add_assign(&fine)?;
            y = up;
        }
        Ok(y)
    }

    /// Back-propagates `g` (gradient w.r.t. the logits of `predict`) into
    /// head parameters and into the tapped / top layer states.
    pub(crate) fn backward(
        &self,
        trace: &InferenceTrace,
        scales: usize,
        g: &Tensor,
        grads: &mut HeadGrads,
        state_grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut g = g.clone();
        for (t, tap) in self.taps[..scales - 1].iter().enumerate().rev() {
            let z = &trace.states[tap.layer - 1];
            correlate_filter_grad_acc(&tap.filter, z, &g, &mut grads.taps[t]);
            let sg = state_grads[tap.layer - 1].get_or_insert_with(|| Tensor::zeros(z.dims()));
            convolve_transposed_acc(&tap.filter, &g, sg);
            let below = if t == 0 {
                self.coarse.grid
            } else {
                let d = trace.states[self.taps[t - 1].layer - 1].dims();
                (d.height, d.width)
            };
            g = sum_pool(&g, below.0, below.1)?;
        }
        let top = &trace.states[self.top_layer - 1];
        let cells = self.coarse.grid.0 * self.coarse.grid.1;
        let sg = state_grads[self.top_layer - 1].get_or_insert_with(|| Tensor::zeros(top.dims()));
        for m in 0..self.keypoints {
            let mut bias_acc = 0.0;
            for p in 0..cells {
                let gv = g.data()[m * cells + p];
                bias_acc += gv;
                if gv == 0.0 {
                    continue;
                }
                let base = (m * cells + p) * self.top_len;
                let row = &self.coarse.weights[base..base + self.top_len];
                let grow = &mut grads.coarse_weights[base..base + self.top_len];
                for ((gw, &zj), (s, &wj)) in grow
                    .iter_mut()
                    .zip(top.data())
                    .zip(sg.data_mut().iter_mut().zip(row))
                {
                    *gw += gv * zj;
                    *s += gv * wj;
                }
            }
            grads.coarse_bias[m] += bias_acc;
        }
        Ok(())
    }
}

/// Gradient buffers shaped like a [`HeadBank`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub coarse_weights: Vec<f64>,
    pub coarse_bias: Vec<f64>,
    pub taps: Vec<Vec<f64>>,
}

impl HeadGrads {
    pub fn zeros_like(h: &HeadBank) -> Self {
        HeadGrads {
            coarse_weights: vec![0.0; h.coarse.weights.len()],
            coarse_bias: vec![0.0; h.coarse.bias.len()],
            taps: h
                .taps
                .iter()
                .map(|t| vec![0.0; t.filter.data().len()])
                .collect(),
        }
    }
}

/// Nearest-neighbour upsampling by integer factors to `h x w`.
pub fn upsample_nearest(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if t.height() == 0 || t.width() == 0 || h % t.height() != 0 || w % t.width() != 0 {
        return shape_err(format!(
            "cannot upsample {}x{} to {h}x{w} by an integer factor",
            t.height(),
            t.width()
        ));
    }
    let (fy, fx) = (h / t.height(), w / t.width());
    let mut out = Tensor::zeros(Dims::new(t.channels(), h, w));
    for c in 0..t.channels() {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, t.get(c, y / fy, x / fx));
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: sums each factor block into `h x w`.
pub(crate) fn sum_pool(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 || t.height() % h != 0 || t.width() % w != 0 {
        return shape_err(format!(
            "cannot pool {}x{} to {h}x{w}",
            t.height(),
            t.width()
        ));
    }
    let (fy, fx) = (t.height() / h, t.width() / w);
    let mut out = Tensor::zeros(Dims::new(t.channels(), h, w));
    for c in 0..t.channels() {
        for y in 0..t.height() {
            for x in 0..t.width() {
                let i = out.index(c, y / fy, x / fx);
                out.data_mut()[i] += t.get(c, y, x);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerConfig;

    fn row_layer(k: usize, stride: usize) -> LayerConfig {
        LayerConfig {
            in_channels: 1,
            out_channels: 1,
            kernel: (1, k),
            stride,
            pad: (0, 0),
            nms: None,
        }
    }

    fn trace_of(states: Vec<Tensor>) -> InferenceTrace {
        InferenceTrace {
            states,
            pass_log: None,
            converged_gap: None,
        }
    }

    #[test]
    fn single_tap_is_a_linear_map() {
        let net = RgNetwork::new(Dims::new(1, 1, 2), vec![row_layer(1, 1)]).unwrap();
        let mut heads = HeadBank::new(&net, 1, (1, 1), &[1]).unwrap();
        heads.taps_mut()[0].filter.data_mut()[0] = 2.0;
        let trace = trace_of(vec![Tensor::row(&[1.0, 3.0])]);
        // The coarse grid (1x1, zero weights) contributes nothing.
        let y = heads.predict(&trace, 2).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0]);
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let net =
            RgNetwork::new(Dims::new(1, 1, 4), vec![row_layer(1, 1), row_layer(1, 2)]).unwrap();
        let heads = HeadBank::new(&net, 3, (1, 2), &[1]).unwrap();
        let trace = trace_of(vec![
            Tensor::row(&[1.0, 2.0, 3.0, 4.0]),
            Tensor::row(&[5.0, 6.0]),
        ]);
        let y = heads.predict(&trace, 2).unwrap();
        assert_eq!(y.dims(), Dims::new(3, 1, 4));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coarse_prediction_is_upsampled_and_added() {
        let net =
            RgNetwork::new(Dims::new(1, 1, 4), vec![row_layer(1, 1), row_layer(1, 2)]).unwrap();
        let mut heads = HeadBank::new(&net, 1, (1, 2), &[1]).unwrap();
        // Coarse: grid cell p reads top-layer unit p with weight 1, so coarse = [1, 3].
        heads
            .coarse_mut()
            .weights
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        heads.taps_mut()[0].filter.data_mut()[0] = 0.5;
        let trace = trace_of(vec![
            Tensor::row(&[1.0, -1.0, 0.0, 0.0]),
            Tensor::row(&[1.0, 3.0]),
        ]);
        let y = heads.predict(&trace, 2).unwrap();
        assert_eq!(y.data(), &[1.5, 0.5, 3.0, 3.0]);
        let coarse_only = heads.predict(&trace, 1).unwrap();
        assert_eq!(coarse_only.data(), &[1.0, 3.0]);
    }

    #[test]
    fn invalid_taps_are_rejected() {
        let net =
            RgNetwork::new(Dims::new(1, 1, 6), vec![row_layer(1, 1), row_layer(1, 2)]).unwrap();
        assert!(HeadBank::new(&net, 1, (1, 3), &[1, 1]).is_err());
        assert!(HeadBank::new(&net, 1, (1, 3), &[3]).is_err());
        assert!(HeadBank::new(&net, 1, (1, 4), &[1]).is_err());
    }

    #[test]
    fn sum_pool_is_adjoint_of_upsample() {
        let a = Tensor::from_vec(
            Dims::new(2, 2, 3),
            (0..12).map(|v| v as f64 - 4.5).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(
            Dims::new(2, 4, 6),
            (0..48).map(|v| (v as f64).sin()).collect(),
        )
        .unwrap();
        let lhs = upsample_nearest(&a, 4, 6).unwrap().dot(&b).unwrap();
        let rhs = a.dot(&sum_pool(&b, 2, 3).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
