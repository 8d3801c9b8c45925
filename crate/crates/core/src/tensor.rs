//! Dense row-major tensors of rank 1-4 (channel-last for images).

use crate::error::{Result, SgaError};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(SgaError::shape(format!("rank {} outside 1..=4", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(SgaError::shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], v: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn randn(dims: &[usize], scale: f64, rng: &mut RngState) -> Self {
        let mut t = Tensor::zeros(dims);
        for v in t.data.iter_mut() {
            *v = rng.normal() * scale;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Reinterprets the same buffer under new dims (element count must match).
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(SgaError::numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= s;
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(SgaError::shape(format!(
                "add_assign {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(SgaError::shape(format!(
                "axpy {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * *b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(SgaError::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(SgaError::shape("dot on mismatched shapes".to_string()));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Rounds every element through f32 so the value survives the
    /// 32-bit checkpoint format bit-exactly.
    pub fn round_to_f32(&mut self) {
        for v in self.data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// The half-open integer-bin boundaries for adaptive pooling:
/// bin i covers input indices [floor(i*n/m), ceil((i+1)*n/m)).
pub fn pool_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = i * input / output;
    let hi = ((i + 1) * input).div_ceil(output);
    (lo, hi)
}

/// Adaptive average pooling of an h*w*c map to an n_h*n_w*c map.
pub fn adaptive_avg_pool(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    if map.rank() != 3 {
        return Err(SgaError::shape(format!(
            "adaptive_avg_pool expects rank-3 h*w*c, got {:?}",
            map.dims()
        )));
    }
    let (h, w, c) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let (nh, nw) = target;
    if nh == 0 || nw == 0 || nh > h || nw > w {
        return Err(SgaError::shape(format!(
            "pool target ({nh},{nw}) invalid for input ({h},{w})"
        )));
    }
    let mut out = Tensor::zeros(&[nh, nw, c]);
    let src = map.data();
    for i in 0..nh {
        let (r0, r1) = pool_bin(i, h, nh);
        for j in 0..nw {
            let (c0, c1) = pool_bin(j, w, nw);
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for r in r0..r1 {
                    for cc in c0..c1 {
                        acc += src[(r * w + cc) * c + ch];
                    }
                }
                out.data_mut()[(i * nw + j) * c + ch] = acc / count;
            }
        }
    }
    Ok(out)
}

/// Backward of `adaptive_avg_pool`: distributes each output cell's upstream
/// uniformly over its (possibly overlapping) input bin.
pub fn adaptive_avg_pool_backward(
    input_dims: &[usize],
    target: (usize, usize),
    upstream: &Tensor,
) -> Result<Tensor> {
    let (h, w, c) = (input_dims[0], input_dims[1], input_dims[2]);
    let (nh, nw) = target;
    if upstream.dims() != [nh, nw, c] {
        return Err(SgaError::shape("pool upstream shape mismatch".to_string()));
    }
    let mut grad = Tensor::zeros(input_dims);
    let up = upstream.data();
    for i in 0..nh {
        let (r0, r1) = pool_bin(i, h, nh);
        for j in 0..nw {
            let (c0, c1) = pool_bin(j, w, nw);
            let inv = 1.0 / (((r1 - r0) * (c1 - c0)) as f64);
            for ch in 0..c {
                let g = up[(i * nw + j) * c + ch] * inv;
                for r in r0..r1 {
                    for cc in c0..c1 {
                        grad.data_mut()[(r * w + cc) * c + ch] += g;
                    }
                }
            }
        }
    }
    Ok(grad)
}
