//! Gram-based spatial alignment losses.
//!
//! Features are N x C patch matrices. Losses take raw (pre-normalization)
//! features and row-normalize internally; normalization happens in exactly
//! one place so the unit-diagonal Gram invariant cannot be silently broken.

use crate::error::{Result, SgaError};
use crate::layers::Layer;
use crate::linalg::{matmul, transpose};
use crate::rng::RngState;
use crate::tensor::{adaptive_avg_pool, adaptive_avg_pool_backward, Tensor};
use std::io::{Read, Write};
use std::path::Path;

/// An N x C matrix of patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Tensor,
}

impl FeatureMatrix {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 2 {
            return Err(SgaError::shape(format!(
                "feature matrix must be rank-2, got {:?}",
                data.dims()
            )));
        }
        Ok(FeatureMatrix { data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, |r| r.len());
        let mut flat = Vec::with_capacity(n * c);
        for r in rows {
            if r.len() != c {
                return Err(SgaError::shape("ragged feature rows"));
            }
            flat.extend_from_slice(r);
        }
        FeatureMatrix::new(Tensor::new(vec![n, c], flat)?)
    }

    pub fn random(n: usize, c: usize, rng: &mut RngState) -> Self {
        FeatureMatrix {
            data: Tensor::randn(&[n, c], 1.0, rng),
        }
    }

    pub fn n(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn c(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data.data()[i * self.c()..(i + 1) * self.c()]
    }
}

/// An N x N symmetric patch self-similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    data: Tensor,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn from_symmetric(data: Tensor) -> Result<Self> {
        if data.rank() != 2 || data.dims()[0] != data.dims()[1] {
            return Err(SgaError::shape("gram matrix must be square"));
        }
        let n = data.dims()[0];
        for i in 0..n {
            for j in (i + 1)..n {
                if (data.data()[i * n + j] - data.data()[j * n + i]).abs() > 1e-6 {
                    return Err(SgaError::contract("gram matrix asymmetric"));
                }
            }
        }
        Ok(GramMatrix { data })
    }
}

const ROW_NORM_FLOOR: f64 = 1e-12;
const UNIT_ROW_TOL: f64 = 1e-6;

/// Divides every row by its Euclidean norm. Near-zero rows are a hard error
/// naming the offending row.
pub fn row_l2_normalize(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    let (n, c) = (m.n(), m.c());
    let mut out = m.clone();
    for i in 0..n {
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ROW_NORM_FLOOR {
            return Err(SgaError::DegenerateRow { row: i, norm });
        }
        for j in 0..c {
            out.data.data_mut()[i * c + j] /= norm;
        }
    }
    Ok(out)
}

/// G = M M^T for row-normalized M. Rejects non-normalized input.
pub fn gram(m: &FeatureMatrix) -> Result<GramMatrix> {
    for i in 0..m.n() {
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_ROW_TOL {
            return Err(SgaError::contract(format!(
                "gram input row {i} has norm {norm}, expected 1"
            )));
        }
    }
    let g = matmul(m.tensor(), &transpose(m.tensor()))?;
    Ok(GramMatrix { data: g })
}

fn check_pair(h_g: &FeatureMatrix, h_f: &FeatureMatrix) -> Result<()> {
    if h_g.n() != h_f.n() {
        return Err(SgaError::shape(format!(
            "patch counts disagree: {} vs {}",
            h_g.n(),
            h_f.n()
        )));
    }
    Ok(())
}

/// The spatial Gram alignment loss (1/N^2) ||G_g - G_f||_F^2.
/// Inputs are raw features; normalization happens here.
pub fn sga_loss(h_g_proj: &FeatureMatrix, h_f: &FeatureMatrix) -> Result<f64> {
    check_pair(h_g_proj, h_f)?;
    let hg = row_l2_normalize(h_g_proj)?;
    let hf = row_l2_normalize(h_f)?;
    let gg = gram(&hg)?;
    let gf = gram(&hf)?;
    let n = h_g_proj.n() as f64;
    let diff = gg.data.sub(&gf.data)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / (n * n))
}

/// Composes the per-row normalization Jacobian (I - h~ h~^T)/||h|| with an
/// upstream gradient expressed w.r.t. the normalized rows.
fn through_row_normalization(
    raw: &FeatureMatrix,
    normalized: &FeatureMatrix,
    grad_normalized: &Tensor,
) -> Result<Tensor> {
    let (n, c) = (raw.n(), raw.c());
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let norm = raw.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let hrow = normalized.row(i);
        let grow = &grad_normalized.data()[i * c..(i + 1) * c];
        let radial: f64 = hrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out.data_mut()[i * c + j] = (grow[j] - radial * hrow[j]) / norm;
        }
    }
    Ok(out)
}

/// Analytic gradient of `sga_loss` w.r.t. the raw projected features:
/// (4/N^2) (G_g - G_f) H~_g chained through the normalization Jacobian.
pub fn sga_loss_grad(h_g_proj: &FeatureMatrix, h_f: &FeatureMatrix) -> Result<Tensor> {
    check_pair(h_g_proj, h_f)?;
    let hg = row_l2_normalize(h_g_proj)?;
    let hf = row_l2_normalize(h_f)?;
    let gg = gram(&hg)?;
    let gf = gram(&hf)?;
    let n = h_g_proj.n() as f64;
    let diff = gg.data.sub(&gf.data)?;
    let grad_normalized = matmul(&diff, hg.tensor())?.scale(4.0 / (n * n));
    through_row_normalization(h_g_proj, &hg, &grad_normalized)
}

/// Patch-wise REPA baseline: (1/N) ||H~_g - H~_f||_F^2, equivalently
/// 2 - (2/N) tr(H~_g H~_f^T).
pub fn repa_loss(h_g_proj: &FeatureMatrix, h_f: &FeatureMatrix) -> Result<f64> {
    check_pair(h_g_proj, h_f)?;
    let hg = row_l2_normalize(h_g_proj)?;
    let hf = row_l2_normalize(h_f)?;
    let n = h_g_proj.n() as f64;
    Ok(hg.tensor().sub(hf.tensor())?.norm().powi(2) / n)
}

/// Gradient of `repa_loss` w.r.t. the raw projected features.
pub fn repa_loss_grad(h_g_proj: &FeatureMatrix, h_f: &FeatureMatrix) -> Result<Tensor> {
    check_pair(h_g_proj, h_f)?;
    let hg = row_l2_normalize(h_g_proj)?;
    let hf = row_l2_normalize(h_f)?;
    let n = h_g_proj.n() as f64;
    let grad_normalized = hg.tensor().sub(hf.tensor())?.scale(2.0 / n);
    through_row_normalization(h_g_proj, &hg, &grad_normalized)
}

/// The projection head phi: a 3x3 same-padded convolution (stride 1 or 2)
/// followed by optional adaptive pooling, flattened to patch rows.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub conv: Layer,
    pub pool_target: Option<(usize, usize)>,
}

impl ProjectionHead {
    pub fn new(
        c_in: usize,
        c_out: usize,
        stride: usize,
        pool_target: Option<(usize, usize)>,
        rng: &mut RngState,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        ProjectionHead {
            conv: Layer::conv2d(c_in, c_out, 3, stride, 1, rng),
            pool_target,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.conv.kind {
            crate::layers::LayerKind::Conv2d { out_ch, .. } => out_ch,
            _ => unreachable!("projection head holds a conv layer"),
        }
    }

    /// conv, then pooling when set, then row-major flatten to N x C_f.
    pub fn project(&self, hidden: &Tensor) -> Result<FeatureMatrix> {
        let conv_out = self.conv.forward(hidden)?;
        let pooled = match self.pool_target {
            Some(t) => adaptive_avg_pool(&conv_out, t)?,
            None => conv_out,
        };
        let (h, w, c) = (pooled.dims()[0], pooled.dims()[1], pooled.dims()[2]);
        FeatureMatrix::new(pooled.reshape(&[h * w, c])?)
    }

    /// Backward through flatten, pool, and conv. Accumulates conv parameter
    /// gradients; returns the gradient w.r.t. `hidden`.
    pub fn project_backward(&mut self, hidden: &Tensor, grad_features: &Tensor) -> Result<Tensor> {
        let conv_out = self.conv.forward(hidden)?;
        let conv_dims = conv_out.dims().to_vec();
        let grad_pooled = match self.pool_target {
            Some((nh, nw)) => {
                let up = grad_features.reshape(&[nh, nw, conv_dims[2]])?;
                adaptive_avg_pool_backward(&conv_dims, (nh, nw), &up)?
            }
            None => grad_features.reshape(&conv_dims)?,
        };
        self.conv.backward(hidden, &grad_pooled)
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"SGAFEAT1";

/// Binary feature-matrix format: magic "SGAFEAT1", N and C as u64 LE, then
/// N*C f64 LE row-major.
pub fn write_feature_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + m.n() * m.c() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(m.n() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.c() as u64).to_le_bytes());
    for v in m.tensor().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != FEATURE_MAGIC {
        return Err(SgaError::contract(format!(
            "{} is not an SGAFEAT1 file",
            path.display()
        )));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let c = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = 24 + n * c * 8;
    if bytes.len() != expected {
        return Err(SgaError::contract(format!(
            "SGAFEAT1 payload length {} != expected {expected}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n * c);
    for chunk in bytes[24..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    FeatureMatrix::new(Tensor::new(vec![n, c], data)?)
}
