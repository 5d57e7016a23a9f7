//! Dense rank-3 tensors and the filtering kernels the hierarchy is built from.
//!
//! Layout is channel-major, then row-major: element `(c, y, x)` lives at
//! `(c * height + y) * width + x`. Checkpoints depend on this ordering.
//!
//! Every kernel here is a plain sequential loop with a fixed accumulation
//! order, so results are bit-reproducible.

use crate::error::{invalid, shape_err, Result};

/// Channel / height / width extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Dims {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: Dims) -> Self {
        Tensor {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return shape_err(format!(
                "tensor {dims} needs {} elements, got {}",
                dims.len(),
                data.len()
            ));
        }
        Ok(Tensor { dims, data })
    }

    /// Single-channel, single-row tensor; handy for 1-D examples.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            dims: Dims::new(1, 1, values.len()),
            data: values.to_vec(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims.channels
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.dims.height + y) * self.dims.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.dims.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.dims.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return shape_err(format!("dot of {} with {}", self.dims, other.dims));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!("add of {} into {}", other.dims, self.dims));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// A bank of 2-D filters connecting `in_channels` to `out_channels`,
/// applied with a common stride and zero padding.
///
/// Weight `(o, i, ky, kx)` is stored at `((o * in + i) * k_h + ky) * k_w + kx`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    out_channels: usize,
    in_channels: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        (k_h, k_w): (usize, usize),
        stride: usize,
        (pad_h, pad_w): (usize, usize),
        data: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || k_h == 0 || k_w == 0 {
            return invalid("filter bank extents must be positive");
        }
        if !(1..=2).contains(&stride) {
            return invalid(format!("stride must be 1 or 2, got {stride}"));
        }
        // The transposed route re-pads by k - 1 - pad, which must stay nonnegative.
        if pad_h >= k_h || pad_w >= k_w {
            return invalid(format!(
                "padding ({pad_h},{pad_w}) must be smaller than the kernel ({k_h},{k_w})"
            ));
        }
        let n = out_channels * in_channels * k_h * k_w;
        if data.len() != n {
            return shape_err(format!(
                "filter bank {out_channels}x{in_channels}x{k_h}x{k_w} needs {n} weights, got {}",
                data.len()
            ));
        }
        Ok(FilterBank {
            out_channels,
            in_channels,
            k_h,
            k_w,
            stride,
            pad_h,
            pad_w,
            data,
        })
    }

    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Self> {
        let n = out_channels * in_channels * kernel.0 * kernel.1;
        Self::new(out_channels, in_channels, kernel, stride, pad, vec![0.0; n])
    }

    /// 1x1x1xN filter with the given taps; for 1-D experiments.
    pub fn row(taps: &[f64], stride: usize, pad: usize) -> Result<Self> {
        Self::new(1, 1, (1, taps.len()), stride, (0, pad), taps.to_vec())
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.k_h, self.k_w)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> (usize, usize) {
        (self.pad_h, self.pad_w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.k_h + ky) * self.k_w + kx
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[self.index(o, i, ky, kx)]
    }

    /// Output spatial extents of correlating an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if ph < self.k_h || pw < self.k_w {
            return shape_err(format!(
                "padded input {ph}x{pw} is smaller than kernel {}x{}",
                self.k_h, self.k_w
            ));
        }
        Ok((
            (ph - self.k_h) / self.stride + 1,
            (pw - self.k_w) / self.stride + 1,
        ))
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        if input.channels != self.in_channels {
            return shape_err(format!(
                "filter bank expects {} input channels, input is {input}",
                self.in_channels
            ));
        }
        let (h, w) = self.output_hw(input.height, input.width)?;
        Ok(Dims::new(self.out_channels, h, w))
    }

    /// The 180°-rotated, channel-transposed bank, at stride 1 with the
    /// complementary padding `k - 1 - pad`. Correlating a zero-interlaced
    /// signal with it is the adjoint of correlating with `self`.
    pub fn rotated_transpose(&self) -> FilterBank {
        let mut data = vec![0.0; self.data.len()];
        let (kh, kw) = (self.k_h, self.k_w);
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dst =
                            ((i * self.out_channels + o) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx);
                        data[dst] = self.get(o, i, ky, kx);
                    }
                }
            }
        }
        FilterBank {
            out_channels: self.in_channels,
            in_channels: self.out_channels,
            k_h: kh,
            k_w: kw,
            stride: 1,
            pad_h: kh - 1 - self.pad_h,
            pad_w: kw - 1 - self.pad_w,
            data,
        }
    }
}

/// Range of output positions `o` for which `o * stride + k - pad` lands
/// inside an input of length `n`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, n: usize, m: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if n + pad > k {
        ((n - 1 + pad - k) / stride + 1).min(m)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Bottom-up filtering: `out[o][u] = Σ_{i,τ} f[o][i][τ] · x_padded[i][u·stride + τ]`.
pub fn correlate(f: &FilterBank, x: &Tensor) -> Result<Tensor> {
    let od = f.output_dims(x.dims())?;
    let mut out = Tensor::zeros(od);
    correlate_acc(f, x, &mut out);
    Ok(out)
}

/// Accumulates `correlate(f, x)` into `out`; shapes are assumed checked.
pub(crate) fn correlate_acc(f: &FilterBank, x: &Tensor, out: &mut Tensor) {
    let (ih, iw) = (x.height(), x.width());
    let (oh, ow) = (out.height(), out.width());
    let s = f.stride;
    for o in 0..f.out_channels {
        let out_plane = out.channel_mut(o);
        for i in 0..f.in_channels {
            let in_plane = x.channel(i);
            for ky in 0..f.k_h {
                let (y0, y1) = valid_range(ky, f.pad_h, s, ih, oh);
                for kx in 0..f.k_w {
                    let wv = f.get(o, i, ky, kx);
                    let (x0, x1) = valid_range(kx, f.pad_w, s, iw, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - f.pad_h;
                        let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            out_row[ox] += wv * in_row[ox * s + kx - f.pad_w];
                        }
                    }
                }
            }
        }
    }
}

/// Top-down filtering: the exact linear adjoint of `correlate(f, ·)` with
/// the same stride and padding, producing a tensor of shape `out_dims`.
pub fn convolve_transposed(f: &FilterBank, z: &Tensor, out_dims: Dims) -> Result<Tensor> {
    check_transposed_shapes(f, z, out_dims)?;
    let mut out = Tensor::zeros(out_dims);
    convolve_transposed_acc(f, z, &mut out);
    Ok(out)
}

fn check_transposed_shapes(f: &FilterBank, z: &Tensor, out_dims: Dims) -> Result<()> {
    if z.channels() != f.out_channels {
        return shape_err(format!(
            "transposed filtering expects {} channels, got {}",
            f.out_channels,
            z.channels()
        ));
    }
    let expected = f.output_dims(out_dims).map_err(|_| {
        crate::Error::Shape(format!(
            "output shape {out_dims} is inconsistent with the filter bank"
        ))
    })?;
    if expected != z.dims() {
        return shape_err(format!(
            "output shape {out_dims} would correlate to {expected}, not {}",
            z.dims()
        ));
    }
    Ok(())
}

/// Scatter form of the transposed filter; skips the interlaced zeros.
/// Kernel offsets are visited in descending order so each output element
/// accumulates its terms in the same order as the interlaced route.
pub(crate) fn convolve_transposed_acc(f: &FilterBank, z: &Tensor, out: &mut Tensor) {
    let (zh, zw) = (z.height(), z.width());
    let (oh, ow) = (out.height(), out.width());
    let s = f.stride;
    for o in 0..f.out_channels {
        let z_plane = z.channel(o);
        for i in 0..f.in_channels {
            let out_plane = out.channel_mut(i);
            for ky in (0..f.k_h).rev() {
                let (y0, y1) = valid_range(ky, f.pad_h, s, oh, zh);
                for kx in (0..f.k_w).rev() {
                    let wv = f.get(o, i, ky, kx);
                    let (x0, x1) = valid_range(kx, f.pad_w, s, ow, zw);
                    for uy in y0..y1 {
                        let vy = uy * s + ky - f.pad_h;
                        let z_row = &z_plane[uy * zw..(uy + 1) * zw];
                        let out_row = &mut out_plane[vy * ow..(vy + 1) * ow];
                        for ux in x0..x1 {
                            out_row[ux * s + kx - f.pad_w] += wv * z_row[ux];
                        }
                    }
                }
            }
        }
    }
}

/// The transposed filter computed literally: zero-interlace `z` back onto
/// the stride-1 output grid, then correlate with the rotated, transposed
/// bank (a full convolution) cropped to `out_dims` via its padding.
pub fn convolve_transposed_interlaced(
    f: &FilterBank,
    z: &Tensor,
    out_dims: Dims,
) -> Result<Tensor> {
    check_transposed_shapes(f, z, out_dims)?;
    let grid = (
        out_dims.height + 2 * f.pad_h - f.k_h + 1,
        out_dims.width + 2 * f.pad_w - f.k_w + 1,
    );
    let spread = interlace_zeros(z, f.stride, grid)?;
    correlate(&f.rotated_transpose(), &spread)
}

/// Places `z[u]` at `u * stride` along both spatial axes of a `target`
/// grid; every other position is exactly zero.
pub fn interlace_zeros(z: &Tensor, stride: usize, target: (usize, usize)) -> Result<Tensor> {
    if stride == 0 {
        return invalid("stride must be positive");
    }
    let (th, tw) = target;
    if th.div_ceil(stride) != z.height() || tw.div_ceil(stride) != z.width() {
        return shape_err(format!(
            "cannot interlace {}x{} at stride {stride} onto {th}x{tw}",
            z.height(),
            z.width()
        ));
    }
    let mut out = Tensor::zeros(Dims::new(z.channels(), th, tw));
    for c in 0..z.channels() {
        for y in 0..z.height() {
            for x in 0..z.width() {
                out.set(c, y * stride, x * stride, z.get(c, y, x));
            }
        }
    }
    Ok(out)
}

/// `out[u] = x[u * stride]`, keeping `ceil(n / stride)` positions per axis.
pub fn subsample(x: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 0 {
        return invalid("stride must be positive");
    }
    let dims = Dims::new(
        x.channels(),
        x.height().div_ceil(stride),
        x.width().div_ceil(stride),
    );
    let mut out = Tensor::zeros(dims);
    for c in 0..dims.channels {
        for y in 0..dims.height {
            for xx in 0..dims.width {
                out.set(c, y, xx, x.get(c, y * stride, xx * stride));
            }
        }
    }
    Ok(out)
}

pub fn rectify(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    rectify_in_place(&mut out);
    out
}

pub fn rectify_in_place(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
}

/// Gradient of `⟨g, correlate(f, x)⟩` with respect to the weights of `f`,
/// accumulated into `grad` (same layout as `f.data()`).
pub(crate) fn correlate_filter_grad_acc(f: &FilterBank, x: &Tensor, g: &Tensor, grad: &mut [f64]) {
    let (ih, iw) = (x.height(), x.width());
    let (oh, ow) = (g.height(), g.width());
    let s = f.stride;
    for o in 0..f.out_channels {
        let g_plane = g.channel(o);
        for i in 0..f.in_channels {
            let in_plane = x.channel(i);
            for ky in 0..f.k_h {
                let (y0, y1) = valid_range(ky, f.pad_h, s, ih, oh);
                for kx in 0..f.k_w {
                    let (x0, x1) = valid_range(kx, f.pad_w, s, iw, ow);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - f.pad_h;
                        let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            acc += g_row[ox] * in_row[ox * s + kx - f.pad_w];
                        }
                    }
                    grad[f.index(o, i, ky, kx)] += acc;
                }
            }
        }
    }
}

/// Public wrapper over the weight gradient of correlation.
pub fn correlate_filter_grad(f: &FilterBank, x: &Tensor, g: &Tensor) -> Result<Vec<f64>> {
    let od = f.output_dims(x.dims())?;
    if od != g.dims() {
        return shape_err(format!("gradient {} does not match output {od}", g.dims()));
    }
    let mut grad = vec![0.0; f.data.len()];
    correlate_filter_grad_acc(f, x, g, &mut grad);
    Ok(grad)
}
