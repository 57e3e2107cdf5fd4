//! Forward kernels for every layer type of the bundled architecture, plus
//! backward kernels for the layers updated during head fine-tuning
//! (fully connected, ReLU, dropout, softmax/cross-entropy).
//!
//! All kernels are pure functions of their inputs; dropout takes an explicit
//! seeded stream. Accumulations run in f64 and outputs are rounded to f32.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use rand::Rng;

/// Epsilon added inside the cross-entropy log so a zero probability cannot
/// produce an infinite loss.
pub const CROSS_ENTROPY_EPS: f64 = 1e-12;

/// Convolution parameters. Weights are stored flat in
/// `[out_channel][in_channel][ky][kx]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvParams {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<ConvParams> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Config(
                "conv channels, kernel, and stride must be positive".into(),
            ));
        }
        let expect = out_channels * in_channels * kernel * kernel;
        if weights.len() != expect {
            return Err(Error::Config(format!(
                "conv weights length {} does not match {}x{}x{}x{}",
                weights.len(),
                out_channels,
                in_channels,
                kernel,
                kernel
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Config(format!(
                "conv bias length {} does not match {} output channels",
                bias.len(),
                out_channels
            )));
        }
        Ok(ConvParams {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weights,
            bias,
        })
    }
}

/// Local response normalization hyperparameters. `n` is the cross-channel
/// window size; the denominator is `(k + alpha * sum of squares)^beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrnParams {
    pub k: f32,
    pub n: usize,
    pub alpha: f32,
    pub beta: f32,
}

impl LrnParams {
    pub fn new(k: f32, n: usize, alpha: f32, beta: f32) -> Result<LrnParams> {
        if n == 0 || n % 2 == 0 {
            return Err(Error::Config(format!(
                "lrn window must be a positive odd int, got {n}"
            )));
        }
        if !(alpha >= 0.0) || !(beta >= 0.0) || !k.is_finite() {
            return Err(Error::Config(
                "lrn k must be finite, alpha and beta non-negative".into(),
            ));
        }
        Ok(LrnParams { k, n, alpha, beta })
    }
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            k: 2.0,
            n: 5,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

/// Fully connected parameters. Weights are row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcParams {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl FcParams {
    pub fn new(
        out_dim: usize,
        in_dim: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<FcParams> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::Config("fc dims must be positive".into()));
        }
        if weights.len() != out_dim * in_dim {
            return Err(Error::Config(format!(
                "fc weights length {} does not match {}x{}",
                weights.len(),
                out_dim,
                in_dim
            )));
        }
        if bias.len() != out_dim {
            return Err(Error::Config(format!(
                "fc bias length {} does not match out dim {}",
                bias.len(),
                out_dim
            )));
        }
        Ok(FcParams {
            out_dim,
            in_dim,
            weights,
            bias,
        })
    }
}

/// Gradients returned by [`fc_backward`].
#[derive(Debug, Clone)]
pub struct FcGrads {
    pub input: Vec<f32>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Output spatial extent of a strided window op: `(len + 2*pad - k)/stride + 1`.
fn out_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation over a rank-3 input, one bias per output channel.
pub fn conv_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let dims = input.shape().dims();
    if input.shape().rank() != 3 {
        return Err(Error::Shape(format!(
            "conv input must be rank 3, got {}",
            input.shape()
        )));
    }
    let (c_in, h, w) = (dims[0], dims[1], dims[2]);
    if c_in != p.in_channels {
        return Err(Error::Config(format!(
            "conv expects {} input channels, got {}",
            p.in_channels, c_in
        )));
    }
    let out_h = out_extent(h, p.kernel, p.stride, p.pad).ok_or_else(|| {
        Error::Shape(format!(
            "conv kernel {} exceeds padded input height {}",
            p.kernel,
            h + 2 * p.pad
        ))
    })?;
    let out_w = out_extent(w, p.kernel, p.stride, p.pad).ok_or_else(|| {
        Error::Shape(format!(
            "conv kernel {} exceeds padded input width {}",
            p.kernel,
            w + 2 * p.pad
        ))
    })?;

    // Zero-pad once so the inner loops run over contiguous rows.
    let (ph, pw) = (h + 2 * p.pad, w + 2 * p.pad);
    let mut padded = vec![0f32; c_in * ph * pw];
    for c in 0..c_in {
        for y in 0..h {
            let src = &input.data()[(c * h + y) * w..(c * h + y) * w + w];
            let dst_off = (c * ph + y + p.pad) * pw + p.pad;
            padded[dst_off..dst_off + w].copy_from_slice(src);
        }
    }

    let k = p.kernel;
    let mut out = vec![0f32; p.out_channels * out_h * out_w];
    let mut plane = vec![0f64; out_h * out_w];
    for o in 0..p.out_channels {
        let b = f64::from(p.bias[o]);
        plane.iter_mut().for_each(|v| *v = b);
        for c in 0..c_in {
            for ky in 0..k {
                let wrow = &p.weights[((o * c_in + c) * k + ky) * k..][..k];
                for oy in 0..out_h {
                    let in_row = &padded[(c * ph + oy * p.stride + ky) * pw..][..pw];
                    let orow = &mut plane[oy * out_w..][..out_w];
                    for (ox, acc) in orow.iter_mut().enumerate() {
                        let window = &in_row[ox * p.stride..][..k];
                        let mut s = 0f64;
                        for (wv, iv) in wrow.iter().zip(window) {
                            s += f64::from(*wv) * f64::from(*iv);
                        }
                        *acc += s;
                    }
                }
            }
        }
        let dst = &mut out[o * out_h * out_w..][..out_h * out_w];
        for (d, v) in dst.iter_mut().zip(plane.iter()) {
            *d = *v as f32;
        }
    }
    Tensor::from_vec(Shape::map(p.out_channels, out_h, out_w)?, out)
}

/// Elementwise max(x, 0), any rank.
pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape().clone(), data).expect("shape preserved")
}

/// Gradient of ReLU: passes `upstream` where the forward input was positive.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "relu backward shapes differ: {} vs {}",
            x.shape(),
            upstream.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape().clone(), data)
}

/// Per-channel max over kernel x kernel windows; no partial windows.
pub fn maxpool_forward(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    if input.shape().rank() != 3 {
        return Err(Error::Shape(format!(
            "maxpool input must be rank 3, got {}",
            input.shape()
        )));
    }
    if kernel == 0 || stride == 0 {
        return Err(Error::Config(
            "maxpool kernel and stride must be positive".into(),
        ));
    }
    let dims = input.shape().dims();
    let (c_n, h, w) = (dims[0], dims[1], dims[2]);
    let out_h = out_extent(h, kernel, stride, 0)
        .ok_or_else(|| Error::Shape(format!("pool window {kernel} exceeds input height {h}")))?;
    let out_w = out_extent(w, kernel, stride, 0)
        .ok_or_else(|| Error::Shape(format!("pool window {kernel} exceeds input width {w}")))?;

    let mut out = vec![0f32; c_n * out_h * out_w];
    for c in 0..c_n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    let row = &input.data()[(c * h + oy * stride + ky) * w..][..w];
                    for &v in &row[ox * stride..ox * stride + kernel] {
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(c * out_h + oy) * out_w + ox] = best;
            }
        }
    }
    Tensor::from_vec(Shape::map(c_n, out_h, out_w)?, out)
}

/// Cross-channel response normalization at fixed (y, x):
/// `b[i] = a[i] / (k + alpha * sum_{j in window(i)} a[j]^2)^beta`, with the
/// window spanning `n` channels centered on `i` and clipped to the channel
/// range.
pub fn lrn_forward(input: &Tensor, p: &LrnParams) -> Result<Tensor> {
    if input.shape().rank() != 3 {
        return Err(Error::Shape(format!(
            "lrn input must be rank 3, got {}",
            input.shape()
        )));
    }
    let dims = input.shape().dims();
    let (c_n, h, w) = (dims[0], dims[1], dims[2]);
    let plane = h * w;
    let half = p.n / 2;
    let k = f64::from(p.k);
    let alpha = f64::from(p.alpha);
    let beta = f64::from(p.beta);

    let data = input.data();
    let mut out = vec![0f32; data.len()];
    for y in 0..h {
        for x in 0..w {
            let at = |j: usize| f64::from(data[j * plane + y * w + x]);
            // Sliding sum of squares across the channel window.
            let mut sum: f64 = (0..=half.min(c_n - 1)).map(|j| at(j) * at(j)).sum();
            for i in 0..c_n {
                let denom = k + alpha * sum;
                if denom <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "lrn denominator base {denom} is not positive at channel {i}"
                    )));
                }
                out[i * plane + y * w + x] = (at(i) / denom.powf(beta)) as f32;
                if i + half + 1 < c_n {
                    let v = at(i + half + 1);
                    sum += v * v;
                }
                if i >= half {
                    let v = at(i - half);
                    sum -= v * v;
                }
            }
        }
    }
    Tensor::from_vec(input.shape().clone(), out)
}

/// Affine map `weights * x + bias`.
pub fn fc_forward(x: &[f32], p: &FcParams) -> Result<Vec<f32>> {
    if x.len() != p.in_dim {
        return Err(Error::Shape(format!(
            "fc expects input length {}, got {}",
            p.in_dim,
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(p.out_dim);
    for o in 0..p.out_dim {
        let row = &p.weights[o * p.in_dim..][..p.in_dim];
        let mut acc = f64::from(p.bias[o]);
        for (wv, xv) in row.iter().zip(x) {
            acc += f64::from(*wv) * f64::from(*xv);
        }
        out.push(acc as f32);
    }
    Ok(out)
}

/// Gradients of the affine map: `grad_x = W^T u`, `grad_w = u (outer) x`,
/// `grad_b = u`.
pub fn fc_backward(x: &[f32], p: &FcParams, upstream: &[f32]) -> Result<FcGrads> {
    if x.len() != p.in_dim {
        return Err(Error::Shape(format!(
            "fc backward expects input length {}, got {}",
            p.in_dim,
            x.len()
        )));
    }
    if upstream.len() != p.out_dim {
        return Err(Error::Shape(format!(
            "fc backward expects upstream length {}, got {}",
            p.out_dim,
            upstream.len()
        )));
    }
    let mut grad_x = vec![0f64; p.in_dim];
    let mut grad_w = vec![0f32; p.out_dim * p.in_dim];
    for o in 0..p.out_dim {
        let u = f64::from(upstream[o]);
        let row = &p.weights[o * p.in_dim..][..p.in_dim];
        let grow = &mut grad_w[o * p.in_dim..][..p.in_dim];
        for i in 0..p.in_dim {
            grad_x[i] += f64::from(row[i]) * u;
            grow[i] = (u * f64::from(x[i])) as f32;
        }
    }
    Ok(FcGrads {
        input: grad_x.into_iter().map(|v| v as f32).collect(),
        weights: grad_w,
        bias: upstream.to_vec(),
    })
}

/// Inverted dropout. In train mode each element is zeroed independently with
/// probability `rate` and survivors are scaled by `1/(1-rate)`; inference is
/// the identity with an all-ones mask.
pub fn dropout_forward(
    x: &[f32],
    rate: f32,
    train: bool,
    rng: &mut (impl Rng + ?Sized),
) -> Result<(Vec<f32>, Vec<bool>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !train {
        return Ok((x.to_vec(), vec![true; x.len()]));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut out = Vec::with_capacity(x.len());
    let mut mask = Vec::with_capacity(x.len());
    for &v in x {
        if rng.gen::<f32>() < rate {
            out.push(0.0);
            mask.push(false);
        } else {
            out.push(v * scale);
            mask.push(true);
        }
    }
    Ok((out, mask))
}

/// Gradient through inverted dropout given the forward mask.
pub fn dropout_backward(upstream: &[f32], mask: &[bool], rate: f32) -> Vec<f32> {
    let scale = 1.0 / (1.0 - rate);
    upstream
        .iter()
        .zip(mask)
        .map(|(&u, &m)| if m { u * scale } else { 0.0 })
        .collect()
}

/// Max-subtracted softmax; sums to 1 within 1e-6 and never overflows.
pub fn softmax(x: &[f32]) -> Vec<f32> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = x.iter().map(|&v| f64::from(v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total) as f32).collect()
}

/// Cross-entropy of softmax probabilities against a class index. Returns the
/// loss and the gradient with respect to the pre-softmax logits,
/// `probs - onehot(label)`.
pub fn cross_entropy(probs: &[f32], label: usize) -> Result<(f32, Vec<f32>)> {
    if label >= probs.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let loss = -(f64::from(probs[label]) + CROSS_ENTROPY_EPS).ln();
    let mut grad = probs.to_vec();
    grad[label] -= 1.0;
    Ok((loss as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tensor_new;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(Shape::new(dims).unwrap(), data).unwrap()
    }

    // Naive six-loop oracle, independent of the padded-buffer path above.
    fn conv_oracle(input: &Tensor, p: &ConvParams) -> Tensor {
        let d = input.shape().dims();
        let (c_in, h, w) = (d[0], d[1], d[2]);
        let out_h = (h + 2 * p.pad - p.kernel) / p.stride + 1;
        let out_w = (w + 2 * p.pad - p.kernel) / p.stride + 1;
        let mut out = vec![0f32; p.out_channels * out_h * out_w];
        for o in 0..p.out_channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = f64::from(p.bias[o]);
                    for c in 0..c_in {
                        for ky in 0..p.kernel {
                            for kx in 0..p.kernel {
                                let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                                let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input.get3(c, iy as usize, ix as usize);
                                let wv =
                                    p.weights[((o * c_in + c) * p.kernel + ky) * p.kernel + kx];
                                acc += f64::from(iv) * f64::from(wv);
                            }
                        }
                    }
                    out[(o * out_h + oy) * out_w + ox] = acc as f32;
                }
            }
        }
        Tensor::from_vec(Shape::map(p.out_channels, out_h, out_w).unwrap(), out).unwrap()
    }

    fn pool_oracle(input: &Tensor, kernel: usize, stride: usize) -> Tensor {
        let d = input.shape().dims();
        let (c_n, h, w) = (d[0], d[1], d[2]);
        let out_h = (h - kernel) / stride + 1;
        let out_w = (w - kernel) / stride + 1;
        let mut out = vec![0f32; c_n * out_h * out_w];
        for c in 0..c_n {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            best = best.max(input.get3(c, oy * stride + ky, ox * stride + kx));
                        }
                    }
                    out[(c * out_h + oy) * out_w + ox] = best;
                }
            }
        }
        Tensor::from_vec(Shape::map(c_n, out_h, out_w).unwrap(), out).unwrap()
    }

    // Recomputes the window bounds literally for every (channel, pixel).
    fn lrn_oracle(input: &Tensor, p: &LrnParams) -> Tensor {
        let d = input.shape().dims();
        let (c_n, h, w) = (d[0], d[1], d[2]);
        let half = p.n / 2;
        let mut out = vec![0f32; input.data().len()];
        for i in 0..c_n {
            for y in 0..h {
                for x in 0..w {
                    let lo = i.saturating_sub(half);
                    let hi = (i + half).min(c_n - 1);
                    let mut sum = 0f64;
                    for j in lo..=hi {
                        let a = f64::from(input.get3(j, y, x));
                        sum += a * a;
                    }
                    let denom = (f64::from(p.k) + f64::from(p.alpha) * sum).powf(f64::from(p.beta));
                    out[(i * h + y) * w + x] = (f64::from(input.get3(i, y, x)) / denom) as f32;
                }
            }
        }
        Tensor::from_vec(input.shape().clone(), out).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn conv_identity_kernel() {
        let input = tensor_new(&[1, 3, 3], 1.0).unwrap();
        let p = ConvParams::new(1, 1, 1, 1, 0, vec![1.0], vec![0.0]).unwrap();
        let out = conv_forward(&input, &p).unwrap();
        assert_eq!(out.shape().dims(), &[1, 3, 3]);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_first_layer_geometry() {
        // 96 kernels of 11x11 at stride 4 on a 3x227x227 input -> 96x55x55.
        let input = tensor_new(&[3, 227, 227], 0.5).unwrap();
        let p =
            ConvParams::new(3, 96, 11, 4, 0, vec![0.0; 96 * 3 * 11 * 11], vec![0.0; 96]).unwrap();
        let out = conv_forward(&input, &p).unwrap();
        assert_eq!(out.shape().dims(), &[96, 55, 55]);
    }

    #[test]
    fn conv_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let c_in = rng.gen_range(1..=4);
            let c_out = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=2);
            let h = rng.gen_range(k..=8);
            let w = rng.gen_range(k..=8);
            let weights = (0..c_out * c_in * k * k)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let bias = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = ConvParams::new(c_in, c_out, k, stride, pad, weights, bias).unwrap();
            let input = random_tensor(&mut rng, &[c_in, h, w]);
            let got = conv_forward(&input, &p).unwrap();
            let want = conv_oracle(&input, &p);
            assert!(
                max_abs_diff(&got, &want) < 1e-5,
                "conv case {case} diverged from oracle"
            );
        }
    }

    #[test]
    fn conv_channel_mismatch_is_config_error() {
        let input = tensor_new(&[2, 4, 4], 0.0).unwrap();
        let p = ConvParams::new(3, 1, 1, 1, 0, vec![0.0; 3], vec![0.0]).unwrap();
        assert!(matches!(conv_forward(&input, &p), Err(Error::Config(_))));
    }

    #[test]
    fn conv_kernel_too_large_is_shape_error() {
        let input = tensor_new(&[1, 2, 2], 0.0).unwrap();
        let p = ConvParams::new(1, 1, 5, 1, 0, vec![0.0; 25], vec![0.0]).unwrap();
        assert!(matches!(conv_forward(&input, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_piecewise() {
        let x = Tensor::from_slice(&[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let x = tensor_new(&[2, 2], -3.0).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0; 4]);
    }

    #[test]
    fn relu_backward_masks_upstream() {
        let x = Tensor::from_slice(&[-1.0, 2.0]).unwrap();
        let up = Tensor::from_slice(&[5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &up).unwrap().data(), &[0.0, 5.0]);

        let x_pos = Tensor::from_slice(&[1.0, 2.0, 3.0]).unwrap();
        let up3 = Tensor::from_slice(&[0.5, -0.25, 4.0]).unwrap();
        assert_eq!(relu_backward(&x_pos, &up3).unwrap().data(), up3.data());

        let bad = Tensor::from_slice(&[1.0]).unwrap();
        assert!(matches!(relu_backward(&x, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        // d/dx [g . relu(x)] via central differences, away from the kink.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16;
        let x: Vec<f32> = (0..n)
            .map(|_| {
                let v: f32 = rng.gen_range(0.1f32..2.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let g: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::from_slice(&x).unwrap();
        let gt = Tensor::from_slice(&g).unwrap();
        let grad = relu_backward(&xt, &gt).unwrap();

        let f = |vals: &[f64]| -> f64 {
            vals.iter()
                .zip(&g)
                .map(|(&v, &gv)| if v > 0.0 { v * f64::from(gv) } else { 0.0 })
                .sum()
        };
        let step = 1e-3;
        for i in 0..n {
            let mut hi: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
            let mut lo = hi.clone();
            hi[i] += step;
            lo[i] -= step;
            let fd = (f(&hi) - f(&lo)) / (2.0 * step);
            let got = f64::from(grad.data()[i]);
            let denom = fd.abs().max(1e-8);
            assert!(
                (got - fd).abs() / denom < 1e-3,
                "relu grad {i}: got {got}, fd {fd}"
            );
        }
    }

    #[test]
    fn maxpool_constant_input() {
        let input = tensor_new(&[2, 5, 5], 0.75).unwrap();
        let out = maxpool_forward(&input, 3, 2).unwrap();
        assert_eq!(out.shape().dims(), &[2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn maxpool_geometry_55_to_27() {
        let input = tensor_new(&[96, 55, 55], 0.0).unwrap();
        let out = maxpool_forward(&input, 3, 2).unwrap();
        assert_eq!(out.shape().dims(), &[96, 27, 27]);
    }

    #[test]
    fn maxpool_matches_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let c = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=3);
            let s = rng.gen_range(1..=3);
            let h = rng.gen_range(k..=8);
            let w = rng.gen_range(k..=8);
            let input = random_tensor(&mut rng, &[c, h, w]);
            let got = maxpool_forward(&input, k, s).unwrap();
            let want = pool_oracle(&input, k, s);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn maxpool_window_too_large() {
        let input = tensor_new(&[1, 2, 2], 0.0).unwrap();
        assert!(matches!(
            maxpool_forward(&input, 3, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn lrn_alpha_zero_k_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_tensor(&mut rng, &[4, 3, 3]);
        let p = LrnParams::new(1.0, 5, 0.0, 0.75).unwrap();
        let out = lrn_forward(&input, &p).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn lrn_single_channel_scalar() {
        // a=2, k=1, n=1, alpha=1, beta=1 -> 2 / (1 + 4) = 0.4
        let input = tensor_new(&[1, 1, 1], 2.0).unwrap();
        let p = LrnParams::new(1.0, 1, 1.0, 1.0).unwrap();
        let out = lrn_forward(&input, &p).unwrap();
        assert_relative_eq!(out.data()[0], 0.4, max_relative = 1e-6);
    }

    #[test]
    fn lrn_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..40 {
            let c = rng.gen_range(1..=6);
            let h = rng.gen_range(1..=5);
            let w = rng.gen_range(1..=5);
            let n = [1, 3, 5][rng.gen_range(0..3)];
            let input = random_tensor(&mut rng, &[c, h, w]);
            let p = LrnParams::new(2.0, n, 1e-4, 0.75).unwrap();
            let got = lrn_forward(&input, &p).unwrap();
            let want = lrn_oracle(&input, &p);
            assert!(max_abs_diff(&got, &want) < 1e-6);
        }
    }

    #[test]
    fn lrn_window_must_be_odd() {
        assert!(matches!(
            LrnParams::new(2.0, 4, 1e-4, 0.75),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fc_identity() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let p = FcParams::new(3, 3, w, vec![0.0; 3]).unwrap();
        let x = [1.5, -2.0, 0.25];
        assert_eq!(fc_forward(&x, &p).unwrap(), x.to_vec());
    }

    #[test]
    fn fc_output_length() {
        let p = FcParams::new(8, 16, vec![0.0; 128], vec![0.0; 8]).unwrap();
        assert_eq!(fc_forward(&[0.0; 16], &p).unwrap().len(), 8);
        assert!(matches!(fc_forward(&[0.0; 4], &p), Err(Error::Shape(_))));
    }

    #[test]
    fn fc_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let in_dim = rng.gen_range(1..=12);
            let out_dim = rng.gen_range(1..=12);
            let weights: Vec<f32> = (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let bias: Vec<f32> = (0..out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f32> = (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = FcParams::new(out_dim, in_dim, weights.clone(), bias.clone()).unwrap();
            let got = fc_forward(&x, &p).unwrap();
            for o in 0..out_dim {
                let mut want = f64::from(bias[o]);
                for i in 0..in_dim {
                    want += f64::from(weights[o * in_dim + i]) * f64::from(x[i]);
                }
                assert!((f64::from(got[o]) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fc_backward_zero_upstream() {
        let p = FcParams::new(2, 3, vec![1.0; 6], vec![0.0; 2]).unwrap();
        let g = fc_backward(&[1.0, 2.0, 3.0], &p, &[0.0, 0.0]).unwrap();
        assert!(g.input.iter().all(|&v| v == 0.0));
        assert!(g.weights.iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc_backward_scalar_case() {
        let p = FcParams::new(1, 1, vec![3.0], vec![0.0]).unwrap();
        let g = fc_backward(&[2.0], &p, &[1.0]).unwrap();
        assert_eq!(g.input, vec![3.0]);
        assert_eq!(g.weights, vec![2.0]);
        assert_eq!(g.bias, vec![1.0]);
    }

    #[test]
    fn fc_backward_matches_finite_differences() {
        // loss = g . (Wx + b); check d(loss)/dW and d(loss)/dx.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (out_dim, in_dim) = (4, 5);
        let weights: Vec<f32> = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let bias: Vec<f32> = (0..out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f32> = (0..out_dim).map(|_| rng.gen_range(0.5..1.5)).collect();
        let p = FcParams::new(out_dim, in_dim, weights.clone(), bias.clone()).unwrap();
        let grads = fc_backward(&x, &p, &g).unwrap();

        let loss = |w: &[f64], xv: &[f64]| -> f64 {
            (0..out_dim)
                .map(|o| {
                    let mut acc = f64::from(bias[o]);
                    for i in 0..in_dim {
                        acc += w[o * in_dim + i] * xv[i];
                    }
                    acc * f64::from(g[o])
                })
                .sum()
        };
        let w64: Vec<f64> = weights.iter().map(|&v| f64::from(v)).collect();
        let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let step = 1e-3;
        for idx in 0..w64.len() {
            let mut hi = w64.clone();
            let mut lo = w64.clone();
            hi[idx] += step;
            lo[idx] -= step;
            let fd = (loss(&hi, &x64) - loss(&lo, &x64)) / (2.0 * step);
            let got = f64::from(grads.weights[idx]);
            assert!((got - fd).abs() / fd.abs().max(1e-8) < 1e-4);
        }
        for idx in 0..x64.len() {
            let mut hi = x64.clone();
            let mut lo = x64.clone();
            hi[idx] += step;
            lo[idx] -= step;
            let fd = (loss(&w64, &hi) - loss(&w64, &lo)) / (2.0 * step);
            let got = f64::from(grads.input[idx]);
            assert!((got - fd).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn dropout_inference_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = [1.0, -2.0, 3.0];
        let (out, mask) = dropout_forward(&x, 0.5, false, &mut rng).unwrap();
        assert_eq!(out, x.to_vec());
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn dropout_rate_zero_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = [1.0, -2.0, 3.0];
        let (out, mask) = dropout_forward(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(out, x.to_vec());
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn dropout_half_rate_drops_about_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = vec![1.0f32; 10_000];
        let (out, mask) = dropout_forward(&x, 0.5, true, &mut rng).unwrap();
        let zeroed = mask.iter().filter(|&&m| !m).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&zeroed), "zeroed fraction {zeroed}");
        for (v, m) in out.iter().zip(&mask) {
            if *m {
                assert_eq!(*v, 2.0); // survivor scaled by 1/(1-0.5)
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            dropout_forward(&[1.0], 1.0, true, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let big = softmax(&[1000.0, 1000.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert_relative_eq!(big[0], 0.5, max_relative = 1e-6);
    }

    #[test]
    fn softmax_closed_form() {
        let out = softmax(&[0.0, 3f32.ln()]);
        assert_relative_eq!(out[0], 0.25, max_relative = 1e-6);
        assert_relative_eq!(out[1], 0.75, max_relative = 1e-6);
    }

    #[test]
    fn cross_entropy_onehot_and_uniform() {
        let mut onehot = vec![0.0f32; 4];
        onehot[2] = 1.0;
        let (loss, grad) = cross_entropy(&onehot, 2).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(grad.iter().all(|&g| g.abs() < 1e-6));

        let uniform = vec![1.0 / 9.0; 9];
        let (loss9, _) = cross_entropy(&uniform, 0).unwrap();
        assert_relative_eq!(loss9, 9f32.ln(), max_relative = 1e-5);

        assert!(matches!(cross_entropy(&uniform, 9), Err(Error::Data(_))));
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let n = rng.gen_range(2..=8);
            let logits: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let label = rng.gen_range(0..n);
            let (_, grad) = cross_entropy(&softmax(&logits), label).unwrap();

            let loss64 = |z: &[f64]| -> f64 {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                -((exps[label] / total).ln())
            };
            let z64: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
            let step = 1e-3;
            for i in 0..n {
                let mut hi = z64.clone();
                let mut lo = z64.clone();
                hi[i] += step;
                lo[i] -= step;
                let fd = (loss64(&hi) - loss64(&lo)) / (2.0 * step);
                let got = f64::from(grad[i]);
                assert!(
                    (got - fd).abs() / fd.abs().max(1e-4) < 1e-3,
                    "logit {i}: got {got}, fd {fd}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(values in proptest::collection::vec(-10.0f32..10.0, 1..32)) {
            let x = Tensor::from_slice(&values).unwrap();
            let once = relu_forward(&x);
            let twice = relu_forward(&once);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn softmax_sums_to_one_and_keeps_argmax(
            values in proptest::collection::vec(-50.0f32..50.0, 2..16)
        ) {
            let probs = softmax(&values);
            let total: f64 = probs.iter().map(|&p| f64::from(p)).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            let argmax_in = values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let argmax_out = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            prop_assert_eq!(values[argmax_in], values[argmax_out]);
        }

        #[test]
        fn shape_preserving_ops(
            c in 1usize..4, h in 2usize..6, w in 2usize..6
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let n = c * h * w;
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let t = Tensor::from_vec(Shape::map(c, h, w).unwrap(), data).unwrap();
            let relu = relu_forward(&t);
            prop_assert_eq!(relu.shape(), t.shape());
            let lrn = lrn_forward(&t, &LrnParams::default()).unwrap();
            prop_assert_eq!(lrn.shape(), t.shape());
        }
    }
}
