//! Frozen feature prior: a deterministic, seeded convolutional pyramid
//! standing in for a pre-trained vision backbone. Four stride-2 stages map
//! H x W x 3 images to an (H/16) x (W/16) feature map, which is pooled to
//! a fixed patch grid and flattened to an N x C_f feature matrix.
//!
//! Stages use 2x2 kernels with no padding, so every output position has an
//! exact, disjoint 16x16 receptive field: constant images give identical
//! rows and edits outside a patch's block leave its row bit-unchanged.

use crate::alignment::FeatureMatrix;
use crate::error::{Result, SgaError};
use crate::layers::Layer;
use crate::rng::RngState;
use crate::tensor::{adaptive_avg_pool, Tensor};
use sha2::{Digest, Sha256};

const RMS_EPS: f64 = 1e-6;

/// Immutable after construction; equal seeds give bitwise-equal features.
#[derive(Debug, Clone)]
pub struct FoundationPrior {
    convs: Vec<Layer>,
    pub seed: u64,
    pub grid: (usize, usize),
    pub c_f: usize,
}

impl FoundationPrior {
    pub fn new(seed: u64, c_f: usize, grid: (usize, usize)) -> Self {
        assert!(c_f >= 1 && grid.0 >= 1 && grid.1 >= 1);
        let mut rng = RngState::new(seed);
        let channels = [3usize, 8, 16, 32, c_f];
        let mut convs = Vec::with_capacity(4);
        for stage in 0..4 {
            let mut conv = Layer::conv2d(channels[stage], channels[stage + 1], 2, 2, 0, &mut rng);
            // random biases keep channels distinct on dark or constant
            // images, where activations would otherwise collapse
            let mut bias = Tensor::randn(&[channels[stage + 1]], 0.1, &mut rng);
            bias.round_to_f32();
            conv.params[1] = bias;
            convs.push(conv);
        }
        FoundationPrior {
            convs,
            seed,
            grid,
            c_f,
        }
    }

    /// Per-position RMS over channels (epsilon-guarded) after each stage;
    /// local, so it preserves the disjoint receptive-field structure.
    fn response_normalize(x: &mut Tensor) {
        let c = *x.dims().last().unwrap();
        let positions = x.len() / c;
        for p in 0..positions {
            let row = &mut x.data_mut()[p * c..(p + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let denom = ms.sqrt() + RMS_EPS;
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
    }

    /// Forward through the frozen stack, pool to the patch grid, flatten
    /// row-major to N x C_f.
    pub fn extract_features(&self, x: &Tensor) -> Result<FeatureMatrix> {
        if x.rank() != 3 || x.dims()[2] != 3 {
            return Err(SgaError::shape(format!(
                "prior expects h*w*3 images, got {:?}",
                x.dims()
            )));
        }
        if x.dims()[0] % 16 != 0 || x.dims()[1] % 16 != 0 {
            return Err(SgaError::shape(format!(
                "image size {}x{} not divisible by 16",
                x.dims()[0],
                x.dims()[1]
            )));
        }
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = conv.forward(&cur)?;
            // leaky rectifier: a plain ReLU can zero a whole position's
            // channel vector, which would survive normalization as a
            // degenerate all-zero feature row
            for v in cur.data_mut() {
                if *v < 0.0 {
                    *v *= 0.1;
                }
            }
            Self::response_normalize(&mut cur);
        }
        let pooled = adaptive_avg_pool(&cur, self.grid)?;
        let (h, w, c) = (pooled.dims()[0], pooled.dims()[1], pooled.dims()[2]);
        FeatureMatrix::new(pooled.reshape(&[h * w, c])?)
    }

    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Parameters with their checkpoint names ("prior." prefix).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("prior.conv{i}.weight"), &conv.params[0]));
            out.push((format!("prior.conv{i}.bias"), &conv.params[1]));
        }
        out
    }

    /// Digest over parameter bytes; the freeze invariant compares this
    /// before and after training runs.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_params() {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Output patch grid for an image: the long edge gets `patch_budget`
/// cells, the short edge scales by aspect ratio (nearest, minimum 1).
pub fn grid_for_resolution(height: usize, width: usize, patch_budget: usize) -> (usize, usize) {
    assert!(patch_budget >= 1 && height >= 1 && width >= 1);
    if height >= width {
        let short = ((patch_budget as f64 * width as f64 / height as f64).round() as usize).max(1);
        (patch_budget, short)
    } else {
        let short = ((patch_budget as f64 * height as f64 / width as f64).round() as usize).max(1);
        (short, patch_budget)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{gram, row_l2_normalize};

    #[test]
    fn frozen_determinism() {
        let p1 = FoundationPrior::new(11, 6, (2, 2));
        let p2 = FoundationPrior::new(11, 6, (2, 2));
        let mut rng = RngState::new(1);
        let x = Tensor::randn(&[32, 32, 3], 0.5, &mut rng);
        let a = p1.extract_features(&x).unwrap();
        let b = p1.extract_features(&x).unwrap();
        let c = p2.extract_features(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(p1.checksum(), p2.checksum());
    }

    #[test]
    fn constant_image_rows_equal_gram_all_ones() {
        let p = FoundationPrior::new(3, 5, (2, 2));
        let x = Tensor::filled(&[32, 32, 3], -0.8);
        let feats = p.extract_features(&x).unwrap();
        for i in 1..feats.n() {
            for j in 0..feats.c() {
                assert_eq!(feats.row(i)[j], feats.row(0)[j]);
            }
        }
        let g = gram(&row_l2_normalize(&feats).unwrap()).unwrap();
        for v in g.tensor().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn receptive_field_locality() {
        let p = FoundationPrior::new(5, 6, (2, 2));
        let mut rng = RngState::new(2);
        let x = Tensor::randn(&[32, 32, 3], 0.5, &mut rng);
        let mut y = x.clone();
        // edit the top-left 16x16 block only
        for row in 0..16 {
            for col in 0..16 {
                for ch in 0..3 {
                    y.data_mut()[(row * 32 + col) * 3 + ch] = 0.9;
                }
            }
        }
        let fx = p.extract_features(&x).unwrap();
        let fy = p.extract_features(&y).unwrap();
        // rows 1..3 cover untouched blocks
        for i in 1..4 {
            for j in 0..fx.c() {
                assert!((fx.row(i)[j] - fy.row(i)[j]).abs() < 1e-9, "row {i}");
            }
        }
        // row 0 covers the edited block and must move
        let moved: f64 = (0..fx.c()).map(|j| (fx.row(0)[j] - fy.row(0)[j]).abs()).sum();
        assert!(moved > 1e-6);
    }

    #[test]
    fn seed_separation() {
        let p1 = FoundationPrior::new(100, 6, (2, 2));
        let p2 = FoundationPrior::new(101, 6, (2, 2));
        let mut rng = RngState::new(4);
        let x = Tensor::randn(&[32, 32, 3], 0.5, &mut rng);
        let g1 = gram(&row_l2_normalize(&p1.extract_features(&x).unwrap()).unwrap()).unwrap();
        let g2 = gram(&row_l2_normalize(&p2.extract_features(&x).unwrap()).unwrap()).unwrap();
        assert!(g1.tensor().sub(g2.tensor()).unwrap().norm() > 0.0);
    }

    #[test]
    fn rejects_indivisible_size() {
        let p = FoundationPrior::new(1, 4, (2, 2));
        let x = Tensor::zeros(&[30, 32, 3]);
        assert!(p.extract_features(&x).is_err());
    }

    #[test]
    fn grid_for_resolution_cases() {
        assert_eq!(grid_for_resolution(64, 64, 32), (32, 32));
        assert_eq!(grid_for_resolution(32, 64, 32), (16, 32));
        assert_eq!(grid_for_resolution(64, 32, 32), (32, 16));
        assert_eq!(grid_for_resolution(64, 64, 1), (1, 1));
        // extreme aspect ratio floors at 1
        assert_eq!(grid_for_resolution(16, 1024, 8), (1, 8));
    }
}
