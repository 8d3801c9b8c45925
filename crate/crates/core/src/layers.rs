//! A closed vocabulary of differentiable layers with hand-derived backward
//! passes. Backward computes exact vector-Jacobian products for the
//! documented forward; every kind is certified against finite differences.

use crate::error::{Result, SgaError};
use crate::linalg::{matmul_at_b_into, matmul_into};
use crate::rng::RngState;
use crate::tensor::{adaptive_avg_pool, adaptive_avg_pool_backward, Tensor};

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
        in_ch: usize,
        out_ch: usize,
    },
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
    Silu,
    GroupNorm {
        groups: usize,
        channels: usize,
    },
    /// Adaptive average pooling to a fixed target grid.
    AvgPool {
        target: (usize, usize),
    },
    UpsampleNearest {
        factor: usize,
    },
    /// h*w*c -> (h*w) x c row-major.
    FlattenToPatches,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
    pub grads: Vec<Tensor>,
}

impl Layer {
    pub fn relu() -> Self {
        Layer {
            kind: LayerKind::Relu,
            params: vec![],
            grads: vec![],
        }
    }

    pub fn silu() -> Self {
        Layer {
            kind: LayerKind::Silu,
            params: vec![],
            grads: vec![],
        }
    }

    pub fn avg_pool(target: (usize, usize)) -> Self {
        Layer {
            kind: LayerKind::AvgPool { target },
            params: vec![],
            grads: vec![],
        }
    }

    pub fn upsample_nearest(factor: usize) -> Self {
        Layer {
            kind: LayerKind::UpsampleNearest { factor },
            params: vec![],
            grads: vec![],
        }
    }

    pub fn flatten_to_patches() -> Self {
        Layer {
            kind: LayerKind::FlattenToPatches,
            params: vec![],
            grads: vec![],
        }
    }

    /// He-style initialization, rounded through f32 so parameters survive
    /// checkpointing bit-exactly.
    pub fn conv2d(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut RngState,
    ) -> Self {
        let fan_in = (kernel * kernel * in_ch) as f64;
        let mut weight = Tensor::randn(&[kernel * kernel, in_ch, out_ch], (2.0 / fan_in).sqrt(), rng);
        let mut bias = Tensor::zeros(&[out_ch]);
        weight.round_to_f32();
        bias.round_to_f32();
        let grads = vec![Tensor::zeros(weight.dims()), Tensor::zeros(bias.dims())];
        Layer {
            kind: LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                in_ch,
                out_ch,
            },
            params: vec![weight, bias],
            grads,
        }
    }

    pub fn linear(in_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        let mut weight = Tensor::randn(&[in_dim, out_dim], (1.0 / in_dim as f64).sqrt(), rng);
        let mut bias = Tensor::zeros(&[out_dim]);
        weight.round_to_f32();
        bias.round_to_f32();
        let grads = vec![Tensor::zeros(weight.dims()), Tensor::zeros(bias.dims())];
        Layer {
            kind: LayerKind::Linear { in_dim, out_dim },
            params: vec![weight, bias],
            grads,
        }
    }

    pub fn group_norm(groups: usize, channels: usize) -> Self {
        assert!(channels % groups == 0, "groups must divide channels");
        let gamma = Tensor::filled(&[channels], 1.0);
        let beta = Tensor::zeros(&[channels]);
        let grads = vec![Tensor::zeros(&[channels]), Tensor::zeros(&[channels])];
        Layer {
            kind: LayerKind::GroupNorm { groups, channels },
            params: vec![gamma, beta],
            grads,
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                in_ch,
                out_ch,
            } => conv2d_forward(
                x,
                &self.params[0],
                &self.params[1],
                *kernel,
                *stride,
                *padding,
                *in_ch,
                *out_ch,
            ),
            LayerKind::Linear { in_dim, out_dim } => {
                linear_forward(x, &self.params[0], &self.params[1], *in_dim, *out_dim)
            }
            LayerKind::Relu => Ok(map(x, |v| v.max(0.0))),
            LayerKind::Silu => Ok(map(x, |v| v * sigmoid(v))),
            LayerKind::GroupNorm { groups, channels } => {
                group_norm_forward(x, &self.params[0], &self.params[1], *groups, *channels)
            }
            LayerKind::AvgPool { target } => adaptive_avg_pool(x, *target),
            LayerKind::UpsampleNearest { factor } => upsample_forward(x, *factor),
            LayerKind::FlattenToPatches => {
                if x.rank() != 3 {
                    return Err(SgaError::shape("flatten_to_patches expects rank-3"));
                }
                x.reshape(&[x.dims()[0] * x.dims()[1], x.dims()[2]])
            }
        }
    }

    /// Returns the gradient w.r.t. the input and accumulates parameter
    /// gradients into `self.grads`.
    pub fn backward(&mut self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                in_ch,
                out_ch,
            } => {
                let (kernel, stride, padding, in_ch, out_ch) =
                    (*kernel, *stride, *padding, *in_ch, *out_ch);
                let (dx, dw, db) = conv2d_backward(
                    x,
                    &self.params[0],
                    upstream,
                    kernel,
                    stride,
                    padding,
                    in_ch,
                    out_ch,
                )?;
                self.grads[0].add_assign(&dw)?;
                self.grads[1].add_assign(&db)?;
                Ok(dx)
            }
            LayerKind::Linear { in_dim, out_dim } => {
                let (in_dim, out_dim) = (*in_dim, *out_dim);
                let (dx, dw, db) =
                    linear_backward(x, &self.params[0], upstream, in_dim, out_dim)?;
                self.grads[0].add_assign(&dw)?;
                self.grads[1].add_assign(&db)?;
                Ok(dx)
            }
            LayerKind::Relu => zip(x, upstream, |v, u| if v > 0.0 { u } else { 0.0 }),
            LayerKind::Silu => zip(x, upstream, |v, u| {
                let s = sigmoid(v);
                u * s * (1.0 + v * (1.0 - s))
            }),
            LayerKind::GroupNorm { groups, channels } => {
                let (groups, channels) = (*groups, *channels);
                let (dx, dgamma, dbeta) =
                    group_norm_backward(x, &self.params[0], upstream, groups, channels)?;
                self.grads[0].add_assign(&dgamma)?;
                self.grads[1].add_assign(&dbeta)?;
                Ok(dx)
            }
            LayerKind::AvgPool { target } => adaptive_avg_pool_backward(x.dims(), *target, upstream),
            LayerKind::UpsampleNearest { factor } => upsample_backward(x.dims(), *factor, upstream),
            LayerKind::FlattenToPatches => upstream.reshape(x.dims()),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn zip(x: &Tensor, u: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !x.same_shape(u) {
        return Err(SgaError::shape("upstream shape mismatch"));
    }
    let mut out = Tensor::zeros(x.dims());
    for ((o, &a), &b) in out.data_mut().iter_mut().zip(x.data()).zip(u.data()) {
        *o = f(a, b);
    }
    Ok(out)
}

fn conv_out_extent(h: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = h + 2 * padding;
    if padded < kernel {
        return Err(SgaError::shape(format!(
            "conv kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// im2col: rows are output positions, columns are (ky, kx, ci) taps.
fn im2col(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let cols = kernel * kernel * c;
    let mut patches = vec![0.0; oh * ow * cols];
    let src = x.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * cols;
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src_off = ((iy as usize) * w + ix as usize) * c;
                    let dst_off = row + (ky * kernel + kx) * c;
                    patches[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
                }
            }
        }
    }
    patches
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    in_ch: usize,
    out_ch: usize,
) -> Result<Tensor> {
    if x.rank() != 3 || x.dims()[2] != in_ch {
        return Err(SgaError::shape(format!(
            "conv2d expects h*w*{in_ch}, got {:?}",
            x.dims()
        )));
    }
    let (h, w) = (x.dims()[0], x.dims()[1]);
    let oh = conv_out_extent(h, kernel, stride, padding)?;
    let ow = conv_out_extent(w, kernel, stride, padding)?;
    let patches = im2col(x, kernel, stride, padding, oh, ow);
    let cols = kernel * kernel * in_ch;
    let mut out = Tensor::zeros(&[oh, ow, out_ch]);
    matmul_into(&patches, weight.data(), out.data_mut(), oh * ow, cols, out_ch);
    for pos in 0..oh * ow {
        for co in 0..out_ch {
            out.data_mut()[pos * out_ch + co] += bias.data()[co];
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    in_ch: usize,
    out_ch: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w) = (x.dims()[0], x.dims()[1]);
    let oh = conv_out_extent(h, kernel, stride, padding)?;
    let ow = conv_out_extent(w, kernel, stride, padding)?;
    if upstream.dims() != [oh, ow, out_ch] {
        return Err(SgaError::shape(format!(
            "conv2d upstream {:?}, expected [{oh}, {ow}, {out_ch}]",
            upstream.dims()
        )));
    }
    let cols = kernel * kernel * in_ch;
    let patches = im2col(x, kernel, stride, padding, oh, ow);

    // dW = patches^T * upstream
    let mut dw = Tensor::zeros(weight.dims());
    matmul_at_b_into(
        &patches,
        upstream.data(),
        dw.data_mut(),
        oh * ow,
        cols,
        out_ch,
    );

    let mut db = Tensor::zeros(&[out_ch]);
    for pos in 0..oh * ow {
        for co in 0..out_ch {
            db.data_mut()[co] += upstream.data()[pos * out_ch + co];
        }
    }

    // grad_patches = upstream * W^T, scattered back through col2im
    let mut grad_patches = vec![0.0; oh * ow * cols];
    // C[pos, col] += sum_co up[pos, co] * W[col, co]
    for pos in 0..oh * ow {
        let uprow = &upstream.data()[pos * out_ch..(pos + 1) * out_ch];
        let prow = &mut grad_patches[pos * cols..(pos + 1) * cols];
        for col in 0..cols {
            let wrow = &weight.data()[col * out_ch..(col + 1) * out_ch];
            let mut acc = 0.0;
            for co in 0..out_ch {
                acc += uprow[co] * wrow[co];
            }
            prow[col] = acc;
        }
    }
    let mut dx = Tensor::zeros(x.dims());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * cols;
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let dst = ((iy as usize) * w + ix as usize) * in_ch;
                    let src = row + (ky * kernel + kx) * in_ch;
                    for ci in 0..in_ch {
                        dx.data_mut()[dst + ci] += grad_patches[src + ci];
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

fn linear_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    in_dim: usize,
    out_dim: usize,
) -> Result<Tensor> {
    let (rows, flat);
    match x.rank() {
        1 => {
            rows = 1;
            flat = x.len();
        }
        2 => {
            rows = x.dims()[0];
            flat = x.dims()[1];
        }
        _ => return Err(SgaError::shape("linear expects rank-1 or rank-2")),
    }
    if flat != in_dim {
        return Err(SgaError::shape(format!(
            "linear expects inner dim {in_dim}, got {flat}"
        )));
    }
    let mut out = vec![0.0; rows * out_dim];
    matmul_into(x.data(), weight.data(), &mut out, rows, in_dim, out_dim);
    for r in 0..rows {
        for j in 0..out_dim {
            out[r * out_dim + j] += bias.data()[j];
        }
    }
    if x.rank() == 1 {
        Tensor::new(vec![out_dim], out)
    } else {
        Tensor::new(vec![rows, out_dim], out)
    }
}

fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
    in_dim: usize,
    out_dim: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let rows = if x.rank() == 1 { 1 } else { x.dims()[0] };
    if upstream.len() != rows * out_dim {
        return Err(SgaError::shape("linear upstream shape mismatch"));
    }
    let mut dw = Tensor::zeros(&[in_dim, out_dim]);
    matmul_at_b_into(
        x.data(),
        upstream.data(),
        dw.data_mut(),
        rows,
        in_dim,
        out_dim,
    );
    let mut db = Tensor::zeros(&[out_dim]);
    for r in 0..rows {
        for j in 0..out_dim {
            db.data_mut()[j] += upstream.data()[r * out_dim + j];
        }
    }
    let mut dx = Tensor::zeros(x.dims());
    // dx = upstream * W^T
    for r in 0..rows {
        let uprow = &upstream.data()[r * out_dim..(r + 1) * out_dim];
        let dxrow = &mut dx.data_mut()[r * in_dim..(r + 1) * in_dim];
        for i in 0..in_dim {
            let wrow = &weight.data()[i * out_dim..(i + 1) * out_dim];
            let mut acc = 0.0;
            for j in 0..out_dim {
                acc += uprow[j] * wrow[j];
            }
            dxrow[i] = acc;
        }
    }
    Ok((dx, dw, db))
}

fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    channels: usize,
) -> Result<Tensor> {
    if x.rank() != 3 || x.dims()[2] != channels {
        return Err(SgaError::shape(format!(
            "group_norm expects h*w*{channels}, got {:?}",
            x.dims()
        )));
    }
    let (h, w) = (x.dims()[0], x.dims()[1]);
    let per = channels / groups;
    let m = (h * w * per) as f64;
    let mut out = Tensor::zeros(x.dims());
    for g in 0..groups {
        let ch0 = g * per;
        let mut mean = 0.0;
        for pos in 0..h * w {
            for ch in ch0..ch0 + per {
                mean += x.data()[pos * channels + ch];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for pos in 0..h * w {
            for ch in ch0..ch0 + per {
                let d = x.data()[pos * channels + ch] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for pos in 0..h * w {
            for ch in ch0..ch0 + per {
                let xhat = (x.data()[pos * channels + ch] - mean) * inv_std;
                out.data_mut()[pos * channels + ch] = gamma.data()[ch] * xhat + beta.data()[ch];
            }
        }
    }
    Ok(out)
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    upstream: &Tensor,
    groups: usize,
    channels: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    if !x.same_shape(upstream) {
        return Err(SgaError::shape("group_norm upstream mismatch"));
    }
    let (h, w) = (x.dims()[0], x.dims()[1]);
    let per = channels / groups;
    let m = (h * w * per) as f64;
    let mut dx = Tensor::zeros(x.dims());
    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);
    for g in 0..groups {
        let ch0 = g * per;
        let mut mean = 0.0;
        for pos in 0..h * w {
            for ch in ch0..ch0 + per {
                mean += x.data()[pos * channels + ch];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for pos in 0..h * w {
            for ch in ch0..ch0 + per {
                let d = x.data()[pos * channels + ch] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();

        // accumulate the two group-level reductions over gup = gamma .* up
        let mut sum_gup = 0.0;
        let mut sum_gup_xhat = 0.0;
        for pos in 0..h * w {
            for ch in ch0..ch0 + per {
                let idx = pos * channels + ch;
                let xhat = (x.data()[idx] - mean) * inv_std;
                let up = upstream.data()[idx];
                let gup = gamma.data()[ch] * up;
                sum_gup += gup;
                sum_gup_xhat += gup * xhat;
                dgamma.data_mut()[ch] += up * xhat;
                dbeta.data_mut()[ch] += up;
            }
        }
        let mean_gup = sum_gup / m;
        let mean_gup_xhat = sum_gup_xhat / m;
        for pos in 0..h * w {
            for ch in ch0..ch0 + per {
                let idx = pos * channels + ch;
                let xhat = (x.data()[idx] - mean) * inv_std;
                let gup = gamma.data()[ch] * upstream.data()[idx];
                dx.data_mut()[idx] = inv_std * (gup - mean_gup - xhat * mean_gup_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

fn upsample_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(SgaError::shape("upsample expects rank-3"));
    }
    let (h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut out = Tensor::zeros(&[h * factor, w * factor, c]);
    for oy in 0..h * factor {
        let iy = oy / factor;
        for ox in 0..w * factor {
            let ix = ox / factor;
            let src = (iy * w + ix) * c;
            let dst = (oy * w * factor + ox) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Ok(out)
}

fn upsample_backward(input_dims: &[usize], factor: usize, upstream: &Tensor) -> Result<Tensor> {
    let (h, w, c) = (input_dims[0], input_dims[1], input_dims[2]);
    if upstream.dims() != [h * factor, w * factor, c] {
        return Err(SgaError::shape("upsample upstream mismatch"));
    }
    let mut dx = Tensor::zeros(input_dims);
    for oy in 0..h * factor {
        let iy = oy / factor;
        for ox in 0..w * factor {
            let ix = ox / factor;
            let dst = (iy * w + ix) * c;
            let src = (oy * w * factor + ox) * c;
            for ch in 0..c {
                dx.data_mut()[dst + ch] += upstream.data()[src + ch];
            }
        }
    }
    Ok(dx)
}

/// An ordered stack of layers with a cached forward for chained backward.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Self {
        LayerStack { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Forward pass that records each layer's input (needed for backward).
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            inputs.push(cur.clone());
            cur = layer.forward(&cur)?;
        }
        Ok((cur, inputs))
    }

    /// Walks the stack in reverse, accumulating parameter gradients and
    /// returning the gradient w.r.t. the stack input.
    pub fn backward(&mut self, inputs: &[Tensor], upstream: &Tensor) -> Result<Tensor> {
        let mut grad = upstream.clone();
        for (layer, input) in self.layers.iter_mut().zip(inputs.iter()).rev() {
            grad = layer.backward(input, &grad)?;
        }
        Ok(grad)
    }

    pub fn zero_grads(&mut self) {
        for layer in self.layers.iter_mut() {
            layer.zero_grads();
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn grads(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.grads.iter())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }
}
