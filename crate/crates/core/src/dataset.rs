//! Seeded synthetic image corpus: every sample is regenerated on demand
//! from (seed, index) alone. Images compose a smooth background gradient,
//! one to three anti-aliased geometric shapes (the dominant shape kind is
//! the class label), and a high-frequency texture band, so they carry both
//! macroscopic structure and fine detail.

use crate::error::{Result, SgaError};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const SHAPE_KINDS: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub n: usize,
    pub size: usize,
}

impl SyntheticDataset {
    pub fn new(seed: u64, n: usize, size: usize) -> Result<Self> {
        if n < 1 {
            return Err(SgaError::config("dataset needs at least one image"));
        }
        if size % 16 != 0 {
            return Err(SgaError::config(format!(
                "image size {size} not divisible by 16"
            )));
        }
        Ok(SyntheticDataset { seed, n, size })
    }

    pub fn sample(&self, index: usize) -> (Tensor, usize) {
        generate_image(self.seed, index as u64, self.size)
    }

    /// Index-hash split: true for the ~10% held-out part.
    pub fn is_held_out(&self, index: usize) -> bool {
        let mut probe = RngState::new(self.seed ^ 0x9e3779b9).split(index as u64);
        probe.next_below(10) == 0
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|i| !self.is_held_out(*i)).collect()
    }

    pub fn held_out_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|i| self.is_held_out(*i)).collect()
    }
}

struct Shape {
    kind: usize,
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

fn signed_distance(shape: &Shape, x: f64, y: f64) -> f64 {
    let dx = x - shape.cx;
    let dy = y - shape.cy;
    let r = shape.r;
    let (adx, ady) = (dx.abs(), dy.abs());
    match shape.kind {
        0 => (dx * dx + dy * dy).sqrt() - r,
        1 => adx.max(ady) - r,
        2 => adx + ady - r,
        3 => ((dx * dx + dy * dy).sqrt() - r).abs() - 0.3 * r,
        4 => (ady - 0.35 * r).max(adx - r),
        5 => (adx - 0.35 * r).max(ady - r),
        6 => {
            let h = (ady - 0.35 * r).max(adx - r);
            let v = (adx - 0.35 * r).max(ady - r);
            h.min(v)
        }
        7 => (adx * 0.866 + dy * 0.5).max(-dy) - 0.5 * r,
        8 => ((dx / 1.6) * (dx / 1.6) + dy * dy).sqrt() - 0.8 * r,
        _ => {
            // rounded square
            let qx = (adx - 0.7 * r).max(0.0);
            let qy = (ady - 0.7 * r).max(0.0);
            (qx * qx + qy * qy).sqrt() + (adx - 0.7 * r).max(ady - 0.7 * r).min(0.0) - 0.3 * r
        }
    }
}

/// Deterministic in (seed, index). Returns the image and its class label.
pub fn generate_image(seed: u64, index: u64, size: usize) -> (Tensor, usize) {
    let mut rng = RngState::new(seed).split(index);
    let s = size as f64;

    let label = rng.next_below(SHAPE_KINDS as u64) as usize;

    // background gradient between two random colors along a random axis
    let c0: [f64; 3] = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
    let c1: [f64; 3] = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());

    // dominant shape carries the label; extras are smaller
    let n_shapes = 1 + rng.next_below(3) as usize;
    let mut shapes = Vec::with_capacity(n_shapes);
    shapes.push(Shape {
        kind: label,
        cx: rng.uniform(0.3, 0.7) * s,
        cy: rng.uniform(0.3, 0.7) * s,
        r: rng.uniform(0.22, 0.38) * s,
        color: [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
    });
    for _ in 1..n_shapes {
        shapes.push(Shape {
            kind: rng.next_below(SHAPE_KINDS as u64) as usize,
            cx: rng.uniform(0.15, 0.85) * s,
            cy: rng.uniform(0.15, 0.85) * s,
            r: rng.uniform(0.06, 0.16) * s,
            color: [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
        });
    }

    // texture band parameters
    let band_top = rng.uniform(0.1, 0.7) * s;
    let band_height = s / 8.0;
    let freq = rng.uniform(8.0, 16.0);
    let band_phase = rng.uniform(0.0, std::f64::consts::TAU);

    let mut img = Tensor::zeros(&[size, size, 3]);
    let aa = 1.5;
    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let g = ((x * gx + y * gy) / (s * std::f64::consts::SQRT_2) + 0.5).clamp(0.0, 1.0);
            let mut rgb = [
                c0[0] + (c1[0] - c0[0]) * g,
                c0[1] + (c1[1] - c0[1]) * g,
                c0[2] + (c1[2] - c0[2]) * g,
            ];
            for shape in &shapes {
                let d = signed_distance(shape, x, y);
                let alpha = (0.5 - d / aa).clamp(0.0, 1.0);
                for ch in 0..3 {
                    rgb[ch] = rgb[ch] + alpha * (shape.color[ch] - rgb[ch]);
                }
            }
            if y >= band_top && y < band_top + band_height {
                let stripe = 0.3 * (std::f64::consts::TAU * freq * x / s + band_phase).sin();
                for v in rgb.iter_mut() {
                    *v += stripe;
                }
            }
            for (ch, v) in rgb.iter().enumerate() {
                img.data_mut()[(py * size + px) * 3 + ch] = v.clamp(-1.0, 1.0);
            }
        }
    }
    (img, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitwise_deterministic() {
        let (a, la) = generate_image(7, 3, 32);
        let (b, lb) = generate_image(7, 3, 32);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = generate_image(7, 4, 32);
        assert_ne!(a, c);
    }

    #[test]
    fn values_in_range() {
        for idx in 0..8 {
            let (img, _) = generate_image(1, idx, 32);
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn class_histogram_roughly_uniform() {
        let mut counts = [0usize; SHAPE_KINDS];
        let n = 10_000;
        for idx in 0..n {
            let mut rng = RngState::new(5).split(idx);
            let label = rng.next_below(SHAPE_KINDS as u64) as usize;
            counts[label] += 1;
        }
        for (k, c) in counts.iter().enumerate() {
            let frac = *c as f64 / n as f64;
            assert!((frac - 0.1).abs() < 0.05 * 1.0, "class {k} fraction {frac}");
        }
    }

    #[test]
    fn label_matches_image_generator_draw() {
        for idx in 0..20 {
            let (_, label) = generate_image(5, idx, 32);
            let mut rng = RngState::new(5).split(idx);
            assert_eq!(label, rng.next_below(SHAPE_KINDS as u64) as usize);
        }
    }

    #[test]
    fn split_is_roughly_ten_percent_and_stable() {
        let ds = SyntheticDataset::new(3, 1000, 32).unwrap();
        let held = ds.held_out_indices();
        let frac = held.len() as f64 / 1000.0;
        assert!((frac - 0.1).abs() < 0.04, "held-out fraction {frac}");
        assert_eq!(held, ds.held_out_indices());
        assert_eq!(held.len() + ds.train_indices().len(), 1000);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(SyntheticDataset::new(1, 0, 32).is_err());
        assert!(SyntheticDataset::new(1, 10, 30).is_err());
    }
}
