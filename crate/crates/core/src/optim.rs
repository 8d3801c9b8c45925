//! Adam with decoupled weight decay over an ordered parameter list.
//! Updated parameters are rounded through f32 after every step so they
//! survive the f32 checkpoint format bit-exactly.

use crate::error::{Result, SgaError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over a fixed parameter ordering; the ordering must not
    /// change between steps (moments are positional).
    pub fn step<'a, 'b>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor>,
        grads: impl Iterator<Item = &'b Tensor>,
    ) -> Result<()> {
        let params: Vec<&'a mut Tensor> = params.collect();
        let grads: Vec<&'b Tensor> = grads.collect();
        if params.len() != grads.len() {
            return Err(SgaError::contract("param/grad count mismatch"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.dims())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.dims())).collect();
        }
        if self.m.len() != params.len() {
            return Err(SgaError::contract("optimizer state size mismatch"));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !p.same_shape(g) {
                return Err(SgaError::shape("grad shape does not match param"));
            }
            for i in 0..p.len() {
                let gi = g.data()[i];
                if !gi.is_finite() {
                    return Err(SgaError::numeric("non-finite gradient in optimizer step"));
                }
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pi = p.data()[i];
                p.data_mut()[i] = pi - c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pi);
            }
            p.round_to_f32();
        }
        Ok(())
    }

    /// Moments paired with parameter names for checkpointing, in step order.
    pub fn named_moments<'a>(
        &'a self,
        param_names: &[String],
    ) -> Result<Vec<(String, &'a Tensor)>> {
        if !self.m.is_empty() && param_names.len() != self.m.len() {
            return Err(SgaError::contract("moment/name count mismatch"));
        }
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, name) in param_names.iter().enumerate().take(self.m.len()) {
            out.push((format!("opt.{name}.m"), &self.m[i]));
            out.push((format!("opt.{name}.v"), &self.v[i]));
        }
        Ok(out)
    }

    pub fn load_moments(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
