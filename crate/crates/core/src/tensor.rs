//! Dense row-major `f64` tensors and the handful of kernels the fusion
//! modules are built from: bilinear sampling (with its exact backward pass),
//! softmax, fully connected and 3x3 convolution layers, channel concat, and a
//! central-difference gradient checker.
//!
//! Feature maps use the `C x H x W` layout. Pixel `(col, row)` has its center
//! at continuous coordinate `(x, y) = (col, row)`.

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{shape_err, Error, Result};

/// Seeded generator used for every parameter initialization.
pub type ParamRng = Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> ParamRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn random_uniform(shape: &[usize], bound: f64, rng: &mut ParamRng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    fn chw(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!(
                "{what}: expected rank-3 C x H x W, got {:?}",
                self.shape
            )),
        }
    }

    /// Channel slice `c` of a `C x H x W` tensor.
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([out, _], [b]) if out == b => Ok(Self { weight, bias }),
            (w, b) => shape_err(format!("linear weight {w:?} incompatible with bias {b:?}")),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut p = Self::zeros(dim, dim);
        for i in 0..dim {
            p.weight.set(&[i, i], 1.0);
        }
        p
    }

    /// `uniform(-1/sqrt(in), 1/sqrt(in))` for weight and bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut ParamRng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Tensor::random_uniform(&[out_dim, in_dim], bound, rng),
            bias: Tensor::random_uniform(&[out_dim], bound, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim() {
            return shape_err(format!(
                "linear expects input of length {}, got {}",
                self.in_dim(),
                input.len()
            ));
        }
        let mut out = vec![0.0; self.out_dim()];
        self.apply_into(input, &mut out);
        Ok(out)
    }

    pub(crate) fn apply_into(&self, input: &[f64], out: &mut [f64]) {
        let n_in = self.in_dim();
        let w = self.weight.data();
        for (o, (row, b)) in out
            .iter_mut()
            .zip(w.chunks_exact(n_in).zip(self.bias.data()))
        {
            let mut acc = *b;
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            *o = acc;
        }
    }

    /// Accumulates parameter gradients into `grads` and adds the input
    /// gradient into `grad_input`.
    pub(crate) fn backward_into(
        &self,
        input: &[f64],
        grad_out: &[f64],
        grads: &mut LinearParams,
        grad_input: &mut [f64],
    ) {
        let n_in = self.in_dim();
        let w = self.weight.data();
        let gw = grads.weight.data_mut();
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = &mut gw[o * n_in..(o + 1) * n_in];
            for k in 0..n_in {
                grow[k] += g * input[k];
                grad_input[k] += g * row[k];
            }
        }
        for (gb, g) in grads.bias.data_mut().iter_mut().zip(grad_out) {
            *gb += g;
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_dim(), self.in_dim())
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(self.bias.data());
    }

    /// Reads parameters back from `src`, returning the unconsumed tail.
    pub fn assign_from<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let (w, rest) = src.split_at(self.weight.len());
        let (b, rest) = rest.split_at(self.bias.len());
        self.weight.data_mut().copy_from_slice(w);
        self.bias.data_mut().copy_from_slice(b);
        rest
    }

    pub fn axpy(&mut self, alpha: f64, other: &LinearParams) {
        self.weight.axpy(alpha, &other.weight);
        self.bias.axpy(alpha, &other.bias);
    }
}

/// 3x3, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        match (kernel.shape(), bias.shape()) {
            ([co, _, 3, 3], [b]) if co == b => Ok(Self { kernel, bias }),
            (k, b) => shape_err(format!(
                "conv kernel {k:?} must be C_out x C_in x 3 x 3 with bias [C_out], got bias {b:?}"
            )),
        }
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[c_out, c_in, 3, 3]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn init(c_out: usize, c_in: usize, rng: &mut ParamRng) -> Self {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        Self {
            kernel: Tensor::random_uniform(&[c_out, c_in, 3, 3], bound, rng),
            bias: Tensor::random_uniform(&[c_out], bound, rng),
        }
    }

    /// Kernel whose output channel `o` copies input channel `offset + o`
    /// times `gain` at the center tap.
    pub fn center_delta(c_out: usize, c_in: usize, offset: usize, gain: f64) -> Self {
        let mut p = Self::zeros(c_out, c_in);
        for o in 0..c_out {
            p.kernel.set(&[o, offset + o, 1, 1], gain);
        }
        p
    }

    /// Center-tap average of `blocks` stacked groups of `channels` channels.
    pub fn block_average(channels: usize, blocks: usize) -> Self {
        let mut p = Self::zeros(channels, channels * blocks);
        for b in 0..blocks {
            for o in 0..channels {
                p.kernel
                    .set(&[o, b * channels + o, 1, 1], 1.0 / blocks as f64);
            }
        }
        p
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }
}

/// Bilinear sample of all channels of a `C x H x W` map at `(x, y)`.
///
/// Corners outside the map contribute zero, so points within one pixel of
/// the border blend with zeros and points farther out return zeros.
pub fn bilinear_sample(feature: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let (c, h, w) = feature.chw("bilinear_sample")?;
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sample coordinates must be finite, got ({x}, {y})"
        )));
    }
    let mut out = vec![0.0; c];
    sample_into(feature.data(), h, w, 0..c, x, y, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGrad {
    pub feature: Tensor,
    pub x: f64,
    pub y: f64,
}

pub fn bilinear_sample_backward(
    feature: &Tensor,
    x: f64,
    y: f64,
    grad_out: &[f64],
) -> Result<BilinearGrad> {
    let (c, h, w) = feature.chw("bilinear_sample_backward")?;
    if grad_out.len() != c {
        return shape_err(format!(
            "grad_out has {} entries, map has {c} channels",
            grad_out.len()
        ));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sample coordinates must be finite, got ({x}, {y})"
        )));
    }
    let mut grad = Tensor::zeros(feature.shape());
    let (gx, gy) =
        sample_backward_into(feature.data(), grad.data_mut(), h, w, 0..c, x, y, grad_out);
    Ok(BilinearGrad {
        feature: grad,
        x: gx,
        y: gy,
    })
}

struct Corners {
    // (flat pixel index, weight); index is None when the corner is off-map
    taps: [(Option<usize>, f64); 4],
    fx: f64,
    fy: f64,
}

#[inline]
fn corners(h: usize, w: usize, x: f64, y: f64) -> Corners {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let pix = |cx: f64, cy: f64| -> Option<usize> {
        if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
            Some(cy as usize * w + cx as usize)
        } else {
            None
        }
    };
    Corners {
        taps: [
            (pix(x0, y0), (1.0 - fx) * (1.0 - fy)),
            (pix(x0 + 1.0, y0), fx * (1.0 - fy)),
            (pix(x0, y0 + 1.0), (1.0 - fx) * fy),
            (pix(x0 + 1.0, y0 + 1.0), fx * fy),
        ],
        fx,
        fy,
    }
}

/// Samples `channels` of a flat CHW buffer into `out` (overwrites).
#[inline]
pub(crate) fn sample_into(
    data: &[f64],
    h: usize,
    w: usize,
    channels: Range<usize>,
    x: f64,
    y: f64,
    out: &mut [f64],
) {
    let hw = h * w;
    let cs = corners(h, w, x, y);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (pix, wt) in cs.taps {
        if let Some(p) = pix {
            for (o, c) in out.iter_mut().zip(channels.clone()) {
                *o += wt * data[c * hw + p];
            }
        }
    }
}

/// Scatters `grad_out` into `grad_data` and returns `(d/dx, d/dy)`.
///
/// At integer coordinates the derivative is taken from the cell
/// `[floor(x), floor(x) + 1]`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn sample_backward_into(
    data: &[f64],
    grad_data: &mut [f64],
    h: usize,
    w: usize,
    channels: Range<usize>,
    x: f64,
    y: f64,
    grad_out: &[f64],
) -> (f64, f64) {
    let hw = h * w;
    let cs = corners(h, w, x, y);
    let (fx, fy) = (cs.fx, cs.fy);
    // d weight / dx and d weight / dy for the four taps
    let dwx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
    let dwy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (k, (pix, wt)) in cs.taps.into_iter().enumerate() {
        if let Some(p) = pix {
            let mut dot = 0.0;
            for (g, c) in grad_out.iter().zip(channels.clone()) {
                let i = c * hw + p;
                grad_data[i] += wt * g;
                dot += g * data[i];
            }
            gx += dwx[k] * dot;
            gy += dwy[k] * dot;
        }
    }
    (gx, gy)
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(input: &[f64]) -> Result<Vec<f64>> {
    if input.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    let mut out = vec![0.0; input.len()];
    softmax_into(input, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(input: &[f64], out: &mut [f64]) {
    let m = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(input) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Given softmax outputs `probs` and upstream gradient, writes the gradient
/// with respect to the logits.
pub(crate) fn softmax_backward_into(probs: &[f64], grad: &[f64], grad_logits: &mut [f64]) {
    let dot: f64 = probs.iter().zip(grad).map(|(p, g)| p * g).sum();
    for ((gl, p), g) in grad_logits.iter_mut().zip(probs).zip(grad) {
        *gl = p * (g - dot);
    }
}

pub fn linear_apply(params: &LinearParams, input: &[f64]) -> Result<Vec<f64>> {
    params.apply(input)
}

/// 3x3 cross-correlation, stride 1, zero padding 1, plus bias.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let (c_in, h, w) = input.chw("conv2d")?;
    if params.in_channels() != c_in {
        return shape_err(format!(
            "conv2d expects {} input channels, got {c_in}",
            params.in_channels()
        ));
    }
    let c_out = params.out_channels();
    let hw = h * w;
    let src = input.data();
    let k = params.kernel.data();
    let mut out = vec![0.0; c_out * hw];
    for o in 0..c_out {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.iter_mut().for_each(|v| *v = params.bias.data()[o]);
        for ci in 0..c_in {
            let taps = &k[(o * c_in + ci) * 9..(o * c_in + ci + 1) * 9];
            let chan = &src[ci * hw..(ci + 1) * hw];
            for (t, &kv) in taps.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let dy = t as isize / 3 - 1;
                let dx = t as isize % 3 - 1;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let srow = &chan[sr as usize * w..(sr as usize + 1) * w];
                    let orow = &mut plane[r * w..(r + 1) * w];
                    let c_lo = (-dx).max(0) as usize;
                    let c_hi = (w as isize - dx).min(w as isize) as usize;
                    for col in c_lo..c_hi {
                        orow[col] += kv * srow[(col as isize + dx) as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out)
}

/// Stacks the channels of `a` before those of `b`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.chw("concat_channels")?;
    let (cb, hb, wb) = b.chw("concat_channels")?;
    if (ha, wa) != (hb, wb) {
        return shape_err(format!(
            "concat_channels spatial mismatch {ha}x{wa} vs {hb}x{wb}"
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, ha, wa], data)
}

/// Compares an analytic gradient with central differences.
///
/// `f` returns the value and its analytic gradient at the given point. The
/// result is `max_k |analytic_k - numeric_k| / max(1, |numeric_k|)`.
pub fn grad_check<F>(mut f: F, theta: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let (f0, analytic) = f(theta);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("f({theta:?}) = {f0}")));
    }
    if analytic.len() != theta.len() {
        return shape_err(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        ));
    }
    let mut point = theta.to_vec();
    let mut worst = 0.0f64;
    for k in 0..theta.len() {
        point[k] = theta[k] + eps;
        let fp = f(&point).0;
        point[k] = theta[k] - eps;
        let fm = f(&point).0;
        point[k] = theta[k];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "f is not finite near coordinate {k}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_corner_oracle(f: &Tensor, x: f64, y: f64) -> Vec<f64> {
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let at = |ch: usize, col: i64, row: i64| -> f64 {
            if col < 0 || row < 0 || col >= w as i64 || row >= h as i64 {
                0.0
            } else {
                f.get(&[ch, row as usize, col as usize])
            }
        };
        let (x0, y0) = (x.floor() as i64, y.floor() as i64);
        let (a, b) = (x - x0 as f64, y - y0 as f64);
        (0..c)
            .map(|ch| {
                at(ch, x0, y0) * (1.0 - a) * (1.0 - b)
                    + at(ch, x0 + 1, y0) * a * (1.0 - b)
                    + at(ch, x0, y0 + 1) * (1.0 - a) * b
                    + at(ch, x0 + 1, y0 + 1) * a * b
            })
            .collect()
    }

    #[test]
    fn sample_at_grid_node_is_exact() {
        let mut f = Tensor::zeros(&[2, 5, 6]);
        f.set(&[0, 2, 3], 0.123456789);
        f.set(&[1, 2, 3], -7.5);
        assert_eq!(
            bilinear_sample(&f, 3.0, 2.0).unwrap(),
            vec![0.123456789, -7.5]
        );
    }

    #[test]
    fn sample_midpoint_is_corner_mean() {
        let f = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let v = bilinear_sample(&f, 0.5, 0.5).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn sample_far_outside_is_zero() {
        let f = Tensor::filled(&[3, 4, 4], 2.0);
        assert_eq!(bilinear_sample(&f, 14.0, 1.0).unwrap(), vec![0.0; 3]);
        assert_eq!(bilinear_sample(&f, 1.0, -1.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn partial_overlap_blends_with_zero() {
        let f = Tensor::filled(&[1, 4, 4], 2.0);
        let v = bilinear_sample(&f, -0.25, 1.0).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn sample_rejects_wrong_rank() {
        let f = Tensor::zeros(&[4, 4]);
        assert!(matches!(
            bilinear_sample(&f, 0.0, 0.0),
            Err(Error::Shape(_))
        ));
        assert!(bilinear_sample_backward(&f, 0.0, 0.0, &[1.0]).is_err());
    }

    #[test]
    fn sample_matches_four_corner_oracle() {
        let mut rng = seeded_rng(11);
        for _ in 0..20 {
            let f = Tensor::random_uniform(&[1, 4, 4], 1.0, &mut rng);
            let x = rng.random_range(0.0..3.0);
            let y = rng.random_range(0.0..3.0);
            let got = bilinear_sample(&f, x, y).unwrap();
            let want = four_corner_oracle(&f, x, y);
            assert!((got[0] - want[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn sample_backward_zero_grad_out() {
        let mut rng = seeded_rng(3);
        let f = Tensor::random_uniform(&[2, 5, 5], 1.0, &mut rng);
        let g = bilinear_sample_backward(&f, 1.3, 2.7, &[0.0, 0.0]).unwrap();
        assert!(g.feature.data().iter().all(|&v| v == 0.0));
        assert_eq!((g.x, g.y), (0.0, 0.0));
    }

    #[test]
    fn sample_backward_constant_map_has_no_coordinate_grad() {
        let f = Tensor::filled(&[2, 6, 6], 3.25);
        let g = bilinear_sample_backward(&f, 2.4, 3.9, &[1.0, -2.0]).unwrap();
        assert!(g.x.abs() < 1e-14 && g.y.abs() < 1e-14);
    }

    #[test]
    fn sample_backward_matches_finite_differences() {
        let mut rng = seeded_rng(5);
        for _ in 0..20 {
            let f = Tensor::random_uniform(&[3, 6, 7], 1.0, &mut rng);
            let go: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = rng.random_range(0.2..5.8);
            let y = rng.random_range(0.2..4.8);
            let n = f.len();
            let mut theta = f.data().to_vec();
            theta.push(x);
            theta.push(y);
            let err = grad_check(
                |p: &[f64]| {
                    let fm = Tensor::new(vec![3, 6, 7], p[..n].to_vec()).unwrap();
                    let s = bilinear_sample(&fm, p[n], p[n + 1]).unwrap();
                    let val: f64 = s.iter().zip(&go).map(|(a, b)| a * b).sum();
                    let g = bilinear_sample_backward(&fm, p[n], p[n + 1], &go).unwrap();
                    let mut grad = g.feature.into_data();
                    grad.push(g.x);
                    grad.push(g.y);
                    (val, grad)
                },
                &theta,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn integer_coordinate_uses_forward_cell() {
        let mut f = Tensor::zeros(&[1, 3, 3]);
        f.set(&[0, 1, 1], 1.0);
        f.set(&[0, 1, 2], 5.0);
        // derivative at x=1 taken from [1, 2]: 5 - 1
        let g = bilinear_sample_backward(&f, 1.0, 1.0, &[1.0]).unwrap();
        assert_eq!(g.x, 4.0);
    }

    #[test]
    fn linear_identity_and_bias() {
        let id = LinearParams::identity(3);
        assert_eq!(id.apply(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        let mut p = LinearParams::zeros(2, 3);
        p.bias = Tensor::new(vec![2], vec![0.5, -4.0]).unwrap();
        assert_eq!(p.apply(&[9.0, 9.0, 9.0]).unwrap(), vec![0.5, -4.0]);
        assert!(matches!(p.apply(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_matches_double_loop() {
        let mut rng = seeded_rng(8);
        let p = LinearParams::init(2, 3, &mut rng);
        let x = [0.3, -1.2, 2.2];
        let got = linear_apply(&p, &x).unwrap();
        for o in 0..2 {
            let mut want = p.bias.get(&[o]);
            for i in 0..3 {
                want += p.weight.get(&[o, i]) * x[i];
            }
            assert!((got[o] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_cases() {
        let v = softmax(&[0.7; 5]).unwrap();
        assert!(v.iter().all(|p| (p - 0.2).abs() < 1e-15));
        let v = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        let a = softmax(&[1.0, -2.0, 0.5]).unwrap();
        let b = softmax(&[101.0, 98.0, 100.5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(softmax(&[]).is_err());
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!(big.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn conv_identity_and_bias() {
        let mut rng = seeded_rng(2);
        let x = Tensor::random_uniform(&[1, 4, 5], 1.0, &mut rng);
        let id = ConvParams::center_delta(1, 1, 0, 1.0);
        assert_eq!(conv2d(&x, &id).unwrap(), x);
        let mut z = ConvParams::zeros(2, 1);
        z.bias = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap();
        let y = conv2d(&x, &z).unwrap();
        assert!(y.channel(0).iter().all(|&v| v == 1.5));
        assert!(y.channel(1).iter().all(|&v| v == -0.5));
        assert!(matches!(
            conv2d(&x, &ConvParams::zeros(1, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = seeded_rng(21);
        let x = Tensor::random_uniform(&[2, 5, 5], 1.0, &mut rng);
        let p = ConvParams::init(3, 2, &mut rng);
        let y = conv2d(&x, &p).unwrap();
        for o in 0..3 {
            for r in 0..5i64 {
                for c in 0..5i64 {
                    let mut want = p.bias.get(&[o]);
                    for i in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sr, sc) = (r + ky - 1, c + kx - 1);
                                if (0..5).contains(&sr) && (0..5).contains(&sc) {
                                    want += p.kernel.get(&[o, i, ky as usize, kx as usize])
                                        * x.get(&[i, sr as usize, sc as usize]);
                                }
                            }
                        }
                    }
                    let got = y.get(&[o, r as usize, c as usize]);
                    assert!((got - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), &[2, 2, 2]);
        assert_eq!(ab.channel(0), a.data());
        assert_eq!(ab.channel(1), b.data());
        let empty = Tensor::new(vec![0, 2, 2], vec![]).unwrap();
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        let wrong = Tensor::zeros(&[1, 3, 2]);
        assert!(matches!(concat_channels(&a, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_check_exact_for_polynomials() {
        let theta = [0.3, -1.7, 2.5, 10.0];
        let quad = grad_check(
            |p: &[f64]| {
                (
                    p.iter().map(|v| v * v).sum(),
                    p.iter().map(|v| 2.0 * v).collect(),
                )
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(quad <= 1e-6, "{quad}");
        let c = [1.5, -2.0, 0.25, 4.0];
        let lin = grad_check(
            |p: &[f64]| (p.iter().zip(&c).map(|(a, b)| a * b).sum(), c.to_vec()),
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(lin <= 1e-7, "{lin}");
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let r = grad_check(|_: &[f64]| (f64::NAN, vec![0.0]), &[1.0], 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(grad_check(|_: &[f64]| (0.0, vec![0.0]), &[1.0], 0.0).is_err());
    }
}
