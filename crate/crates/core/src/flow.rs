//! Stage-2 model: rectified-flow training of a small conditional denoiser
//! over VAE latents, with an intermediate hidden-state tap for alignment
//! and an Euler sampler with classifier-free guidance.

use crate::alignment::{repa_loss, repa_loss_grad, sga_loss, sga_loss_grad, FeatureMatrix, ProjectionHead};
use crate::error::{Result, SgaError};
use crate::layers::Layer;
use crate::optim::AdamW;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 10;
/// Embedding row used for classifier-free guidance.
pub const NULL_LABEL: usize = CLASS_COUNT;

/// t = sigmoid(u), u ~ N(0,1); every draw is strictly inside (0,1).
pub fn sample_timestep_logit_normal(rng: &mut RngState, n: usize) -> Vec<f64> {
    assert!(n >= 1);
    (0..n).map(|_| 1.0 / (1.0 + (-rng.normal()).exp())).collect()
}

/// z_t = t z_1 + (1 - t) z_0.
pub fn interpolate(z_1: &Tensor, z_0: &Tensor, t: f64) -> Result<Tensor> {
    if !z_1.same_shape(z_0) {
        return Err(SgaError::shape("interpolation endpoints disagree"));
    }
    let mut out = Tensor::zeros(z_1.dims());
    for i in 0..out.len() {
        out.data_mut()[i] = t * z_1.data()[i] + (1.0 - t) * z_0.data()[i];
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    /// Maps the conditioning embedding to a per-channel bias.
    pub cond: Layer,
    pub conv: Layer,
}

/// Velocity network: stem conv, residual blocks with additive conditioning,
/// head conv back to latent channels. Output shape equals input shape.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub stem: Layer,
    pub blocks: Vec<ResBlock>,
    pub head: Layer,
    pub class_embed: Tensor,
    pub embed_dim: usize,
    pub tap_index: usize,
    pub width: usize,
    pub c: usize,
}

impl DenoiserParams {
    pub fn new(
        c: usize,
        width: usize,
        n_blocks: usize,
        embed_dim: usize,
        tap_index: usize,
        rng: &mut RngState,
    ) -> Self {
        assert!(tap_index < n_blocks, "tap_index must name a block");
        assert!(embed_dim % 2 == 0, "sinusoidal embedding needs even dim");
        let stem = Layer::conv2d(c, width, 3, 1, 1, rng);
        let blocks = (0..n_blocks)
            .map(|_| ResBlock {
                cond: Layer::linear(embed_dim, width, rng),
                conv: Layer::conv2d(width, width, 3, 1, 1, rng),
            })
            .collect();
        let head = Layer::conv2d(width, c, 3, 1, 1, rng);
        let mut class_embed = Tensor::randn(&[CLASS_COUNT + 1, embed_dim], 0.02, rng);
        class_embed.round_to_f32();
        DenoiserParams {
            stem,
            blocks,
            head,
            class_embed,
            embed_dim,
            tap_index,
            width,
            c,
        }
    }

    /// Sinusoidal timestep code plus the learned class row.
    pub fn embed(&self, t: f64, label: usize) -> Tensor {
        let e = self.embed_dim;
        let half = e / 2;
        let mut out = Tensor::zeros(&[e]);
        for i in 0..half {
            let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
            out.data_mut()[2 * i] = (1000.0 * t * freq).sin();
            out.data_mut()[2 * i + 1] = (1000.0 * t * freq).cos();
        }
        let row = &self.class_embed.data()[label * e..(label + 1) * e];
        for i in 0..e {
            out.data_mut()[i] += row[i];
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.stem.params[0], &self.stem.params[1]];
        for b in &self.blocks {
            out.extend([&b.cond.params[0], &b.cond.params[1]]);
            out.extend([&b.conv.params[0], &b.conv.params[1]]);
        }
        out.extend([&self.head.params[0], &self.head.params[1]]);
        out.push(&self.class_embed);
        out
    }

    pub fn zero_grads(&mut self) {
        self.stem.zero_grads();
        for b in self.blocks.iter_mut() {
            b.cond.zero_grads();
            b.conv.zero_grads();
        }
        self.head.zero_grads();
    }
}

/// Per-sample forward tape for the custom backward pass.
pub struct DenoiserTape {
    emb: Tensor,
    label: usize,
    stem_in: Tensor,
    /// per block: (input x, pre-activation a = x + bias, silu(a))
    block_cache: Vec<(Tensor, Tensor, Tensor)>,
    head_in: Tensor,
    pub tapped: Tensor,
    pub v: Tensor,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn denoiser_forward(
    p: &DenoiserParams,
    z_t: &Tensor,
    t: f64,
    label: usize,
) -> Result<DenoiserTape> {
    if label > NULL_LABEL {
        return Err(SgaError::contract(format!("label {label} out of range")));
    }
    let emb = p.embed(t, label);
    let mut x = p.stem.forward(z_t)?;
    let mut block_cache = Vec::with_capacity(p.blocks.len());
    let mut tapped = None;
    for (i, b) in p.blocks.iter().enumerate() {
        let bias = b.cond.forward(&emb)?;
        let mut a = x.clone();
        let w = p.width;
        for pos in 0..a.len() / w {
            for ch in 0..w {
                a.data_mut()[pos * w + ch] += bias.data()[ch];
            }
        }
        let mut s = a.clone();
        for v in s.data_mut() {
            *v *= sigmoid(*v);
        }
        let delta = b.conv.forward(&s)?;
        let y = x.add(&delta)?;
        block_cache.push((x, a, s));
        x = y;
        if i == p.tap_index {
            tapped = Some(x.clone());
        }
    }
    let head_in = x;
    let v = p.head.forward(&head_in)?;
    Ok(DenoiserTape {
        emb,
        label,
        stem_in: z_t.clone(),
        block_cache,
        head_in,
        tapped: tapped.expect("tap_index < block count"),
        v,
    })
}

/// Backward from a velocity-space gradient plus an optional gradient
/// injected at the tapped hidden state. Accumulates parameter gradients
/// into `p` and the class-embedding gradient into `class_grad`.
pub fn denoiser_backward(
    p: &mut DenoiserParams,
    tape: &DenoiserTape,
    dv: &Tensor,
    tap_grad: Option<&Tensor>,
    class_grad: &mut Tensor,
) -> Result<Tensor> {
    let mut dx = p.head.backward(&tape.head_in, dv)?;
    let mut demb = Tensor::zeros(&[p.embed_dim]);
    let w = p.width;
    for i in (0..p.blocks.len()).rev() {
        if i == p.tap_index {
            if let Some(tg) = tap_grad {
                dx.add_assign(tg)?;
            }
        }
        let (x_in, a, s) = &tape.block_cache[i];
        let ds = p.blocks[i].conv.backward(s, &dx)?;
        // silu'(a) = sig(a) (1 + a (1 - sig(a)))
        let mut da = ds.clone();
        for (v, &av) in da.data_mut().iter_mut().zip(a.data()) {
            let sg = sigmoid(av);
            *v *= sg * (1.0 + av * (1.0 - sg));
        }
        let mut dbias = Tensor::zeros(&[w]);
        for pos in 0..da.len() / w {
            for ch in 0..w {
                dbias.data_mut()[ch] += da.data()[pos * w + ch];
            }
        }
        demb.add_assign(&p.blocks[i].cond.backward(&tape.emb, &dbias)?)?;
        dx.add_assign(&da)?;
        let _ = x_in;
    }
    let dz = p.stem.backward(&tape.stem_in, &dx)?;
    // class row gradient (the sinusoidal part has no parameters)
    let e = p.embed_dim;
    for j in 0..e {
        class_grad.data_mut()[tape.label * e + j] += demb.data()[j];
    }
    Ok(dz)
}

#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub z_1: Vec<Tensor>,
    pub z_0: Vec<Tensor>,
    pub t: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.z_1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_1.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty()
            || self.z_0.len() != self.len()
            || self.t.len() != self.len()
            || self.labels.len() != self.len()
        {
            return Err(SgaError::contract("flow batch field lengths disagree"));
        }
        for (i, t) in self.t.iter().enumerate() {
            if !(0.0..=1.0).contains(t) {
                return Err(SgaError::contract(format!("t[{i}] = {t} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Mean squared velocity error over the batch, with the tapped hidden
/// state of each sample for alignment.
pub fn flow_matching_loss(p: &DenoiserParams, batch: &FlowBatch) -> Result<(f64, Vec<Tensor>)> {
    batch.validate()?;
    let mut loss = 0.0;
    let mut tapped = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let z_t = interpolate(&batch.z_1[i], &batch.z_0[i], batch.t[i])?;
        let tape = denoiser_forward(p, &z_t, batch.t[i], batch.labels[i])?;
        let target = batch.z_1[i].sub(&batch.z_0[i])?;
        loss += tape.v.sub(&target)?.norm().powi(2) / target.len() as f64;
        tapped.push(tape.tapped);
    }
    Ok((loss / batch.len() as f64, tapped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentMode {
    None,
    Sga,
    Patchwise,
}

#[derive(Debug, Clone, Copy)]
pub struct FlowStepConfig {
    pub lambda_s: f64,
    pub mode: AlignmentMode,
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct FlowLosses {
    pub fm: f64,
    pub sga: f64,
    pub total: f64,
}

/// One optimizer step on L_fm plus the configured alignment penalty at the
/// tap. Prior features must come from each sample's clean image.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_train_step(
    p: &mut DenoiserParams,
    head: &mut ProjectionHead,
    prior_features: &[FeatureMatrix],
    batch: &FlowBatch,
    cfg: &FlowStepConfig,
    opt: &mut AdamW,
) -> Result<FlowLosses> {
    batch.validate()?;
    if cfg.mode != AlignmentMode::None && prior_features.len() != batch.len() {
        return Err(SgaError::contract("prior feature count mismatch"));
    }
    let b = batch.len() as f64;
    p.zero_grads();
    head.conv.zero_grads();
    let mut class_grad = Tensor::zeros(p.class_embed.dims());
    let mut losses = FlowLosses::default();

    for i in 0..batch.len() {
        let z_t = interpolate(&batch.z_1[i], &batch.z_0[i], batch.t[i])?;
        let tape = denoiser_forward(p, &z_t, batch.t[i], batch.labels[i])?;
        let target = batch.z_1[i].sub(&batch.z_0[i])?;
        let n = target.len() as f64;
        losses.fm += tape.v.sub(&target)?.norm().powi(2) / (n * b);
        let dv = tape.v.sub(&target)?.scale(2.0 / (n * b));

        let tap_grad = if cfg.mode != AlignmentMode::None && cfg.lambda_s != 0.0 {
            let projected = head.project(&tape.tapped)?;
            let (l, gfeat) = match cfg.mode {
                AlignmentMode::Sga => (
                    sga_loss(&projected, &prior_features[i])?,
                    sga_loss_grad(&projected, &prior_features[i])?,
                ),
                AlignmentMode::Patchwise => (
                    repa_loss(&projected, &prior_features[i])?,
                    repa_loss_grad(&projected, &prior_features[i])?,
                ),
                AlignmentMode::None => unreachable!(),
            };
            losses.sga += l / b;
            Some(head.project_backward(&tape.tapped, &gfeat.scale(cfg.lambda_s / b))?)
        } else {
            if cfg.mode != AlignmentMode::None {
                let projected = head.project(&tape.tapped)?;
                losses.sga += match cfg.mode {
                    AlignmentMode::Sga => sga_loss(&projected, &prior_features[i])?,
                    AlignmentMode::Patchwise => repa_loss(&projected, &prior_features[i])?,
                    AlignmentMode::None => unreachable!(),
                } / b;
            }
            None
        };
        denoiser_backward(p, &tape, &dv, tap_grad.as_ref(), &mut class_grad)?;
    }
    losses.total = losses.fm + cfg.lambda_s * losses.sga;
    if !losses.fm.is_finite() {
        return Err(SgaError::Divergence {
            component: "loss_fm".to_string(),
            step: cfg.step,
        });
    }
    if !losses.sga.is_finite() {
        return Err(SgaError::Divergence {
            component: "loss_sga".to_string(),
            step: cfg.step,
        });
    }

    let mut grads: Vec<Tensor> = Vec::new();
    grads.extend(p.stem.grads.iter().cloned());
    for blk in &p.blocks {
        grads.extend(blk.cond.grads.iter().cloned());
        grads.extend(blk.conv.grads.iter().cloned());
    }
    grads.extend(p.head.grads.iter().cloned());
    grads.push(class_grad);
    grads.extend(head.conv.grads.iter().cloned());

    let params_iter = {
        let mut v: Vec<&mut Tensor> = Vec::new();
        v.extend(p.stem.params.iter_mut());
        for blk in p.blocks.iter_mut() {
            v.extend(blk.cond.params.iter_mut());
            v.extend(blk.conv.params.iter_mut());
        }
        v.extend(p.head.params.iter_mut());
        v.push(&mut p.class_embed);
        v.extend(head.conv.params.iter_mut());
        v
    };
    opt.step(params_iter.into_iter(), grads.iter())?;
    Ok(losses)
}

/// Euler integration of the learned field from z_0 ~ N(0,I) at t = 0 to
/// t = 1, with classifier-free guidance.
pub fn euler_sample(
    p: &DenoiserParams,
    label: usize,
    latent_hw: (usize, usize),
    steps: usize,
    guidance_scale: f64,
    rng: &mut RngState,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(SgaError::contract("sampler needs at least one step"));
    }
    let mut z = Tensor::randn(&[latent_hw.0, latent_hw.1, p.c], 1.0, rng);
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 * dt;
        let v_cond = denoiser_forward(p, &z, t, label)?.v;
        let v = if guidance_scale == 1.0 {
            v_cond
        } else {
            let v_uncond = denoiser_forward(p, &z, t, NULL_LABEL)?.v;
            let mut v = v_uncond.clone();
            for i in 0..v.len() {
                v.data_mut()[i] += guidance_scale * (v_cond.data()[i] - v_uncond.data()[i]);
            }
            v
        };
        for i in 0..z.len() {
            z.data_mut()[i] += dt * v.data()[i];
        }
        if z.norm() > 1e6 {
            return Err(SgaError::Divergence {
                component: "sampler_state".to_string(),
                step: k as u64,
            });
        }
    }
    Ok(z)
}
