//! Stage-1 model: a small convolutional VAE trained with a composite
//! objective — reconstruction, perceptual proxy, patch-hinge adversarial
//! loss with a gradient-norm-adaptive weight, moment anchoring to a frozen
//! reference encoder, and gradient-norm-balanced Gram alignment on the
//! latent mean map.

use crate::alignment::{sga_loss, sga_loss_grad, FeatureMatrix, ProjectionHead};
use crate::error::{Result, SgaError};
use crate::layers::{Layer, LayerStack};
use crate::optim::AdamW;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Encoder maps H x W x 3 -> h x w x 2c (mean and log-variance channels);
/// decoder maps h x w x c back to H x W x 3. F = H/h is 4 or 8.
#[derive(Debug, Clone)]
pub struct VaeParams {
    pub encoder: LayerStack,
    pub decoder: LayerStack,
    pub f: usize,
    pub c: usize,
}

impl VaeParams {
    pub fn new(c: usize, f: usize, width: usize, rng: &mut RngState) -> Self {
        assert!(f == 4 || f == 8, "compression factor must be 4 or 8");
        let halvings = if f == 4 { 2 } else { 3 };
        let mut enc = Vec::new();
        let mut in_ch = 3;
        for _ in 0..halvings {
            enc.push(Layer::conv2d(in_ch, width, 3, 2, 1, rng));
            enc.push(Layer::silu());
            in_ch = width;
        }
        enc.push(Layer::conv2d(width, 2 * c, 3, 1, 1, rng));

        let mut dec = vec![Layer::conv2d(c, width, 3, 1, 1, rng), Layer::silu()];
        for _ in 0..halvings {
            dec.push(Layer::upsample_nearest(2));
            dec.push(Layer::conv2d(width, width, 3, 1, 1, rng));
            dec.push(Layer::silu());
        }
        dec.push(Layer::conv2d(width, 3, 3, 1, 1, rng));

        VaeParams {
            encoder: LayerStack::new(enc),
            decoder: LayerStack::new(dec),
            f,
            c,
        }
    }

    /// Index of the designated gradient-anchor layer of the encoder (its
    /// last conv).
    pub fn encoder_anchor(&self) -> usize {
        self.encoder.layers.len() - 1
    }

    pub fn decoder_anchor(&self) -> usize {
        self.decoder.layers.len() - 1
    }
}

/// Patch discriminator: H x W x 3 -> logit map with >= 1 patch.
#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub stack: LayerStack,
}

impl DiscriminatorParams {
    pub fn new(width: usize, rng: &mut RngState) -> Self {
        DiscriminatorParams {
            stack: LayerStack::new(vec![
                Layer::conv2d(3, width, 3, 2, 1, rng),
                Layer::silu(),
                Layer::conv2d(width, width, 3, 2, 1, rng),
                Layer::silu(),
                Layer::conv2d(width, 1, 3, 1, 1, rng),
            ]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentMoments {
    pub mu: Tensor,
    pub log_var: Tensor,
}

/// Splits an encoder output map into clamped moments.
pub fn split_moments(enc_out: &Tensor, c: usize) -> Result<LatentMoments> {
    if enc_out.rank() != 3 || enc_out.dims()[2] != 2 * c {
        return Err(SgaError::shape(format!(
            "encoder output {:?}, expected h*w*{}",
            enc_out.dims(),
            2 * c
        )));
    }
    let (h, w) = (enc_out.dims()[0], enc_out.dims()[1]);
    let mut mu = Tensor::zeros(&[h, w, c]);
    let mut log_var = Tensor::zeros(&[h, w, c]);
    for pos in 0..h * w {
        for ch in 0..c {
            mu.data_mut()[pos * c + ch] = enc_out.data()[pos * 2 * c + ch];
            log_var.data_mut()[pos * c + ch] =
                enc_out.data()[pos * 2 * c + c + ch].clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        }
    }
    Ok(LatentMoments { mu, log_var })
}

/// z = mu + exp(log_var / 2) .* eps, returning eps for backward use.
pub fn reparameterize(m: &LatentMoments, rng: &mut RngState) -> (Tensor, Tensor) {
    let mut eps = Tensor::zeros(m.mu.dims());
    rng.fill_normal(eps.data_mut());
    let mut z = m.mu.clone();
    for i in 0..z.len() {
        z.data_mut()[i] += (0.5 * m.log_var.data()[i]).exp() * eps.data()[i];
    }
    (z, eps)
}

pub fn encode(params: &VaeParams, x: &Tensor, rng: &mut RngState) -> Result<(LatentMoments, Tensor)> {
    if x.rank() != 3 || x.dims()[2] != 3 {
        return Err(SgaError::shape("encode expects h*w*3 images"));
    }
    if x.dims()[0] % params.f != 0 || x.dims()[1] % params.f != 0 {
        return Err(SgaError::shape(format!(
            "image {:?} not divisible by compression factor {}",
            x.dims(),
            params.f
        )));
    }
    let enc_out = params.encoder.forward(x)?;
    let moments = split_moments(&enc_out, params.c)?;
    let (z, _eps) = reparameterize(&moments, rng);
    Ok((moments, z))
}

/// Sum over coordinates of squared mean and log-variance deviations from
/// the frozen reference.
pub fn moment_loss(m: &LatentMoments, m_star: &LatentMoments) -> Result<f64> {
    if !m.mu.same_shape(&m_star.mu) || !m.log_var.same_shape(&m_star.log_var) {
        return Err(SgaError::shape("moment shapes disagree"));
    }
    let a = m.mu.sub(&m_star.mu)?.norm().powi(2);
    let b = m.log_var.sub(&m_star.log_var)?.norm().powi(2);
    Ok(a + b)
}

/// Gradient of `moment_loss` w.r.t. (mu, log_var).
pub fn moment_loss_grad(m: &LatentMoments, m_star: &LatentMoments) -> Result<(Tensor, Tensor)> {
    Ok((
        m.mu.sub(&m_star.mu)?.scale(2.0),
        m.log_var.sub(&m_star.log_var)?.scale(2.0),
    ))
}

/// Mean absolute error.
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if !x.same_shape(x_hat) {
        return Err(SgaError::shape("reconstruction shapes disagree"));
    }
    let n = x.len() as f64;
    Ok(x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

pub fn reconstruction_loss_grad(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if !x.same_shape(x_hat) {
        return Err(SgaError::shape("reconstruction shapes disagree"));
    }
    let n = x.len() as f64;
    let mut g = Tensor::zeros(x.dims());
    for i in 0..x.len() {
        g.data_mut()[i] = (x_hat.data()[i] - x.data()[i]).signum() / n;
    }
    Ok(g)
}

/// Frozen seeded conv stack whose feature-space MSE at two depths stands
/// in for a learned perceptual metric.
#[derive(Debug, Clone)]
pub struct PerceptualProxy {
    stack: LayerStack,
    taps: [usize; 2],
}

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let mut rng = RngState::new(seed);
        PerceptualProxy {
            stack: LayerStack::new(vec![
                Layer::conv2d(3, 8, 3, 1, 1, &mut rng),
                Layer::relu(),
                Layer::conv2d(8, 8, 3, 2, 1, &mut rng),
                Layer::relu(),
                Layer::conv2d(8, 8, 3, 1, 1, &mut rng),
            ]),
            taps: [0, 4], // after the first and last conv
        }
    }

    fn tapped(&self, x: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let (_, inputs) = self.stack.forward_cached(x)?;
        let mut features = Vec::with_capacity(self.taps.len());
        for &t in &self.taps {
            features.push(self.stack.layers[t].forward(&inputs[t])?);
        }
        Ok((features, inputs))
    }

    pub fn loss(&self, x: &Tensor, x_hat: &Tensor) -> Result<f64> {
        if !x.same_shape(x_hat) {
            return Err(SgaError::shape("perceptual shapes disagree"));
        }
        let (fx, _) = self.tapped(x)?;
        let (fh, _) = self.tapped(x_hat)?;
        let mut total = 0.0;
        for (a, b) in fx.iter().zip(fh.iter()) {
            total += a.sub(b)?.norm().powi(2) / a.len() as f64;
        }
        Ok(total)
    }

    /// Gradient w.r.t. `x_hat` (the stack is frozen: parameter gradients
    /// are discarded).
    pub fn loss_grad(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        let (fx, _) = self.tapped(x)?;
        let (fh, inputs) = self.tapped(x_hat)?;
        let mut total = Tensor::zeros(x_hat.dims());
        for (ti, &tap) in self.taps.iter().enumerate() {
            let mut up = fh[ti].sub(&fx[ti])?.scale(2.0 / fh[ti].len() as f64);
            let mut scratch = self.stack.clone();
            for li in (0..=tap).rev() {
                up = scratch.layers[li].backward(&inputs[li], &up)?;
            }
            total.add_assign(&up)?;
        }
        Ok(total)
    }
}

/// Hinge discriminator loss and non-saturating generator loss.
pub fn adversarial_losses(
    d: &DiscriminatorParams,
    x_real: &Tensor,
    x_fake: &Tensor,
) -> Result<(f64, f64)> {
    if !x_real.same_shape(x_fake) {
        return Err(SgaError::shape("adversarial shapes disagree"));
    }
    let lr = d.stack.forward(x_real)?;
    let lf = d.stack.forward(x_fake)?;
    let n = lr.len() as f64;
    let d_loss = lr.data().iter().map(|v| (1.0 - v).max(0.0)).sum::<f64>() / n
        + lf.data().iter().map(|v| (1.0 + v).max(0.0)).sum::<f64>() / n;
    let g_loss = -lf.mean();
    Ok((d_loss, g_loss))
}

/// Gradient of the generator loss -mean(D(fake)) w.r.t. the fake image.
pub fn generator_loss_grad(d: &DiscriminatorParams, x_fake: &Tensor) -> Result<Tensor> {
    let mut scratch = d.stack.clone();
    let (logits, inputs) = scratch.forward_cached(x_fake)?;
    let up = Tensor::filled(logits.dims(), -1.0 / logits.len() as f64);
    scratch.backward(&inputs, &up)
}

/// ||g_num|| / (||g_den|| + 1e-8) clamped to [0, 1e4]; treated as a
/// detached constant by callers.
pub fn grad_norm_ratio(num_grads: &[Tensor], den_grads: &[Tensor]) -> f64 {
    let joint_norm = |gs: &[Tensor]| -> f64 {
        gs.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt()
    };
    (joint_norm(num_grads) / (joint_norm(den_grads) + 1e-8)).clamp(0.0, 1e4)
}

#[derive(Debug, Clone, Default)]
pub struct VaeLosses {
    pub rec: f64,
    pub perc: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub moment: f64,
    pub sga: f64,
    pub total: f64,
    pub w_adv: f64,
    pub w_sga: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct VaeStepConfig {
    pub lambda_m: f64,
    pub lambda_s: f64,
    pub lambda_lpips: f64,
    pub lambda_adv: f64,
    /// Generator-side adversarial weight gate (false during warm-up).
    pub adv_active: bool,
    pub step: u64,
}

fn check_finite(value: f64, component: &str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SgaError::Divergence {
            component: component.to_string(),
            step,
        })
    }
}

/// Parameter gradient norms of one cloned layer under a given upstream,
/// without touching the live gradient buffers.
fn anchor_param_grads(layer: &Layer, input: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
    let mut probe = layer.clone();
    probe.zero_grads();
    probe.backward(input, upstream)?;
    Ok(probe.grads)
}

/// One full step of the stage-1 objective on a batch: discriminator first,
/// then encoder, decoder, and projection head jointly.
#[allow(clippy::too_many_arguments)]
pub fn vae_train_step(
    params: &mut VaeParams,
    d_params: &mut DiscriminatorParams,
    head: &mut ProjectionHead,
    proxy: &PerceptualProxy,
    prior_features: &[FeatureMatrix],
    batch: &[Tensor],
    m_star: &[LatentMoments],
    cfg: &VaeStepConfig,
    gen_opt: &mut AdamW,
    d_opt: &mut AdamW,
    rng: &mut RngState,
) -> Result<VaeLosses> {
    if batch.is_empty() || batch.len() != m_star.len() || batch.len() != prior_features.len() {
        return Err(SgaError::contract("batch / reference length mismatch"));
    }
    let b = batch.len() as f64;
    let c = params.c;
    let mut losses = VaeLosses::default();

    // ---- forward pass per sample, caching everything backward needs ----
    struct SampleCache {
        enc_inputs: Vec<Tensor>,
        enc_out: Tensor,
        moments: LatentMoments,
        eps: Tensor,
        dec_inputs: Vec<Tensor>,
        x_hat: Tensor,
    }
    let mut caches = Vec::with_capacity(batch.len());
    for x in batch {
        let (enc_out, enc_inputs) = params.encoder.forward_cached(x)?;
        let moments = split_moments(&enc_out, c)?;
        let (z, eps) = reparameterize(&moments, rng);
        let (x_hat, dec_inputs) = params.decoder.forward_cached(&z)?;
        if !x_hat.same_shape(x) {
            return Err(SgaError::shape("decoder output shape mismatch"));
        }
        if !enc_out.all_finite() {
            return Err(SgaError::Divergence {
                component: "encoder_output".to_string(),
                step: cfg.step,
            });
        }
        if !x_hat.all_finite() {
            return Err(SgaError::Divergence {
                component: "decoder_output".to_string(),
                step: cfg.step,
            });
        }
        caches.push(SampleCache {
            enc_inputs,
            enc_out,
            moments,
            eps,
            dec_inputs,
            x_hat,
        });
    }

    // ---- discriminator update (Algorithm step order: D before G) ----
    d_params.stack.zero_grads();
    for (x, cache) in batch.iter().zip(&caches) {
        let (d_loss, g_loss) = adversarial_losses(d_params, x, &cache.x_hat)?;
        losses.adv_d += d_loss / b;
        losses.adv_g += g_loss / b;
    }
    check_finite(losses.adv_d, "loss_adv_d", cfg.step)?;
    for (x, cache) in batch.iter().zip(&caches) {
        // hinge subgradients on the two logit maps
        let (lr, real_inputs) = d_params.stack.forward_cached(x)?;
        let n = lr.len() as f64;
        let mut up_real = Tensor::zeros(lr.dims());
        for i in 0..lr.len() {
            if 1.0 - lr.data()[i] > 0.0 {
                up_real.data_mut()[i] = -1.0 / (n * b);
            }
        }
        let mut d_stack = std::mem::replace(&mut d_params.stack, LayerStack::new(vec![]));
        d_stack.backward(&real_inputs, &up_real)?;
        d_params.stack = d_stack;

        let (lf, fake_inputs) = d_params.stack.forward_cached(&cache.x_hat)?;
        let mut up_fake = Tensor::zeros(lf.dims());
        for i in 0..lf.len() {
            if 1.0 + lf.data()[i] > 0.0 {
                up_fake.data_mut()[i] = 1.0 / (n * b);
            }
        }
        let mut d_stack = std::mem::replace(&mut d_params.stack, LayerStack::new(vec![]));
        d_stack.backward(&fake_inputs, &up_fake)?;
        d_params.stack = d_stack;
    }
    {
        let grads: Vec<Tensor> = d_params.stack.grads().cloned().collect();
        d_opt.step(d_params.stack.params_mut(), grads.iter())?;
    }

    // ---- generator-side losses and adaptive weights ----
    let enc_anchor = params.encoder_anchor();
    let dec_anchor = params.decoder_anchor();
    let mut sga_grads_mu: Vec<Tensor> = Vec::with_capacity(batch.len());
    let mut anchor_m: Vec<Tensor> = vec![];
    let mut anchor_sga: Vec<Tensor> = vec![];
    let mut anchor_perc: Vec<Tensor> = vec![];
    let mut anchor_adv: Vec<Tensor> = vec![];

    for ((x, cache), (ms, pf)) in batch
        .iter()
        .zip(&caches)
        .zip(m_star.iter().zip(prior_features))
    {
        losses.rec += reconstruction_loss(x, &cache.x_hat)? / b;
        losses.perc += proxy.loss(x, &cache.x_hat)? / b;
        losses.moment += moment_loss(&cache.moments, ms)? / b;
        let projected = head.project(&cache.moments.mu)?;
        losses.sga += sga_loss(&projected, pf)? / b;
        sga_grads_mu.push({
            let gfeat = sga_loss_grad(&projected, pf)?;
            let mut probe = head.clone();
            probe.project_backward(&cache.moments.mu, &gfeat)?
        });

        // anchor-layer gradient norms for the two adaptive weights
        let (mg_mu, mg_lv) = moment_loss_grad(&cache.moments, ms)?;
        let enc_up = merge_moment_grads(&cache.enc_out, c, &mg_mu, &mg_lv)?;
        accumulate_grads(
            &mut anchor_m,
            anchor_param_grads(
                &params.encoder.layers[enc_anchor],
                &cache.enc_inputs[enc_anchor],
                &enc_up.scale(1.0 / b),
            )?,
        )?;
        let sga_up = merge_moment_grads(
            &cache.enc_out,
            c,
            sga_grads_mu.last().unwrap(),
            &Tensor::zeros(mg_lv.dims()),
        )?;
        accumulate_grads(
            &mut anchor_sga,
            anchor_param_grads(
                &params.encoder.layers[enc_anchor],
                &cache.enc_inputs[enc_anchor],
                &sga_up.scale(1.0 / b),
            )?,
        )?;
        let perc_up = proxy.loss_grad(x, &cache.x_hat)?;
        accumulate_grads(
            &mut anchor_perc,
            anchor_param_grads(
                &params.decoder.layers[dec_anchor],
                &cache.dec_inputs[dec_anchor],
                &perc_up.scale(1.0 / b),
            )?,
        )?;
        let adv_up = generator_loss_grad(d_params, &cache.x_hat)?;
        accumulate_grads(
            &mut anchor_adv,
            anchor_param_grads(
                &params.decoder.layers[dec_anchor],
                &cache.dec_inputs[dec_anchor],
                &adv_up.scale(1.0 / b),
            )?,
        )?;
    }
    for (value, name) in [
        (losses.rec, "loss_rec"),
        (losses.perc, "loss_perc"),
        (losses.adv_g, "loss_adv"),
        (losses.moment, "loss_moment"),
        (losses.sga, "loss_sga"),
    ] {
        check_finite(value, name, cfg.step)?;
    }

    losses.w_sga = if cfg.lambda_s == 0.0 {
        0.0
    } else {
        cfg.lambda_s * grad_norm_ratio(&anchor_m, &anchor_sga)
    };
    losses.w_adv = if cfg.lambda_adv == 0.0 || !cfg.adv_active {
        0.0
    } else {
        cfg.lambda_adv * grad_norm_ratio(&anchor_perc, &anchor_adv)
    };

    // ---- assemble the full generator gradient ----
    params.encoder.zero_grads();
    params.decoder.zero_grads();
    head.conv.zero_grads();
    for ((x, cache), (ms, _pf)) in batch
        .iter()
        .zip(&caches)
        .zip(m_star.iter().zip(prior_features))
    {
        // image-space gradient
        let mut dxhat = reconstruction_loss_grad(x, &cache.x_hat)?;
        if cfg.lambda_lpips != 0.0 {
            dxhat.add_assign(&proxy.loss_grad(x, &cache.x_hat)?.scale(cfg.lambda_lpips))?;
        }
        if losses.w_adv != 0.0 {
            dxhat.add_assign(&generator_loss_grad(d_params, &cache.x_hat)?.scale(losses.w_adv))?;
        }
        let mut dec_stack = std::mem::replace(&mut params.decoder, LayerStack::new(vec![]));
        let dz = dec_stack.backward(&cache.dec_inputs, &dxhat.scale(1.0 / b))?;
        params.decoder = dec_stack;

        // latent-space gradient: reparameterization plus moment and SGA terms
        let (mg_mu, mg_lv) = moment_loss_grad(&cache.moments, ms)?;
        let mut dmu = dz.clone();
        dmu.add_assign(&mg_mu.scale(cfg.lambda_m / b))?;
        if losses.w_sga != 0.0 {
            // real head gradients this time, with the final weight applied
            let projected = head.project(&cache.moments.mu)?;
            let gfeat = sga_loss_grad(&projected, _pf)?.scale(losses.w_sga / b);
            let dmu_sga = head.project_backward(&cache.moments.mu, &gfeat)?;
            dmu.add_assign(&dmu_sga)?;
        }
        let mut dlv = mg_lv.scale(cfg.lambda_m / b);
        for i in 0..dlv.len() {
            // dz/dlv = eps * exp(lv/2) / 2
            dlv.data_mut()[i] +=
                dz.data()[i] * cache.eps.data()[i] * (0.5 * cache.moments.log_var.data()[i]).exp()
                    * 0.5;
        }
        let enc_up = merge_moment_grads_masked(&cache.enc_out, c, &dmu, &dlv)?;
        let mut enc_stack = std::mem::replace(&mut params.encoder, LayerStack::new(vec![]));
        enc_stack.backward(&cache.enc_inputs, &enc_up)?;
        params.encoder = enc_stack;
    }

    losses.total = losses.rec
        + cfg.lambda_lpips * losses.perc
        + losses.w_adv * losses.adv_g
        + cfg.lambda_m * losses.moment
        + losses.w_sga * losses.sga;
    check_finite(losses.total, "loss_total", cfg.step)?;

    // single exclusive parameter-application phase
    let grads: Vec<Tensor> = params
        .encoder
        .grads()
        .chain(params.decoder.grads())
        .chain(head.conv.grads.iter())
        .cloned()
        .collect();
    let (enc, dec) = (&mut params.encoder, &mut params.decoder);
    gen_opt.step(
        enc.params_mut()
            .chain(dec.params_mut())
            .chain(head.conv.params.iter_mut()),
        grads.iter(),
    )?;

    Ok(losses)
}

/// Interleaves separate mu / log-var gradients back into the encoder
/// output layout (no clamp mask).
fn merge_moment_grads(enc_out: &Tensor, c: usize, dmu: &Tensor, dlv: &Tensor) -> Result<Tensor> {
    let (h, w) = (enc_out.dims()[0], enc_out.dims()[1]);
    let mut out = Tensor::zeros(&[h, w, 2 * c]);
    for pos in 0..h * w {
        for ch in 0..c {
            out.data_mut()[pos * 2 * c + ch] = dmu.data()[pos * c + ch];
            out.data_mut()[pos * 2 * c + c + ch] = dlv.data()[pos * c + ch];
        }
    }
    Ok(out)
}

/// As above, but zeroes log-var gradients where the clamp saturated.
fn merge_moment_grads_masked(
    enc_out: &Tensor,
    c: usize,
    dmu: &Tensor,
    dlv: &Tensor,
) -> Result<Tensor> {
    let (h, w) = (enc_out.dims()[0], enc_out.dims()[1]);
    let mut out = Tensor::zeros(&[h, w, 2 * c]);
    for pos in 0..h * w {
        for ch in 0..c {
            out.data_mut()[pos * 2 * c + ch] = dmu.data()[pos * c + ch];
            let raw = enc_out.data()[pos * 2 * c + c + ch];
            if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw) {
                out.data_mut()[pos * 2 * c + c + ch] = dlv.data()[pos * c + ch];
            }
        }
    }
    Ok(out)
}

fn accumulate_grads(acc: &mut Vec<Tensor>, grads: Vec<Tensor>) -> Result<()> {
    if acc.is_empty() {
        *acc = grads;
    } else {
        for (a, g) in acc.iter_mut().zip(grads) {
            a.add_assign(&g)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, relative_grad_error};
    use crate::optim::AdamConfig;
    use crate::prior::FoundationPrior;

    fn tiny_vae(rng: &mut RngState) -> VaeParams {
        VaeParams::new(2, 4, 6, rng)
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let mut rng = RngState::new(1);
        let params = tiny_vae(&mut rng);
        let x = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
        let mut r1 = RngState::new(7);
        let mut r2 = RngState::new(7);
        let (m1, z1) = encode(&params, &x, &mut r1).unwrap();
        let (m2, z2) = encode(&params, &x, &mut r2).unwrap();
        assert_eq!(m1.mu.dims(), &[2, 2, 2]);
        assert_eq!(z1.dims(), &[2, 2, 2]);
        assert_eq!(z1, z2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn encode_collapses_to_mean_at_clamp_floor() {
        let mut rng = RngState::new(2);
        let params = tiny_vae(&mut rng);
        let x = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
        let enc_out = params.encoder.forward(&x).unwrap();
        let mut m = split_moments(&enc_out, 2).unwrap();
        m.log_var = Tensor::filled(m.log_var.dims(), LOG_VAR_MIN);
        let (z, _) = reparameterize(&m, &mut rng);
        assert!(z.sub(&m.mu).unwrap().norm() < 1e-6);
    }

    #[test]
    fn reparameterized_moments_match_monte_carlo() {
        let mut rng = RngState::new(3);
        let mu = Tensor::randn(&[2, 2, 2], 1.0, &mut rng);
        let log_var = Tensor::randn(&[2, 2, 2], 0.3, &mut rng);
        let m = LatentMoments {
            mu: mu.clone(),
            log_var: log_var.clone(),
        };
        let draws = 10_000usize;
        let mut sum = vec![0.0; mu.len()];
        let mut sum_sq = vec![0.0; mu.len()];
        for _ in 0..draws {
            let (z, _) = reparameterize(&m, &mut rng);
            for i in 0..z.len() {
                sum[i] += z.data()[i];
                sum_sq[i] += z.data()[i] * z.data()[i];
            }
        }
        for i in 0..mu.len() {
            let mean = sum[i] / draws as f64;
            let var = sum_sq[i] / draws as f64 - mean * mean;
            let sigma = (log_var.data()[i]).exp().sqrt();
            assert!(
                (mean - mu.data()[i]).abs() <= 3.0 * sigma / (draws as f64).sqrt() * 1.5,
                "coordinate {i} mean {mean} vs {}",
                mu.data()[i]
            );
            let target = log_var.data()[i].exp();
            assert!((var - target).abs() / target < 0.1, "variance off at {i}");
        }
    }

    #[test]
    fn moment_loss_cases() {
        let mu = Tensor::zeros(&[2, 2, 2]);
        let lv = Tensor::zeros(&[2, 2, 2]);
        let m = LatentMoments {
            mu: mu.clone(),
            log_var: lv.clone(),
        };
        assert_eq!(moment_loss(&m, &m).unwrap(), 0.0);
        let shifted = LatentMoments {
            mu: Tensor::filled(&[2, 2, 2], 1.0),
            log_var: lv,
        };
        // all-ones difference on 8 coordinates
        assert!((moment_loss(&shifted, &m).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn moment_loss_grad_matches_finite_differences() {
        let mut rng = RngState::new(4);
        let m = LatentMoments {
            mu: Tensor::randn(&[2, 2, 2], 1.0, &mut rng),
            log_var: Tensor::randn(&[2, 2, 2], 0.5, &mut rng),
        };
        let m_star = LatentMoments {
            mu: Tensor::randn(&[2, 2, 2], 1.0, &mut rng),
            log_var: Tensor::randn(&[2, 2, 2], 0.5, &mut rng),
        };
        let (gmu, glv) = moment_loss_grad(&m, &m_star).unwrap();
        let nmu = finite_diff_grad(
            |t| {
                moment_loss(
                    &LatentMoments {
                        mu: t.clone(),
                        log_var: m.log_var.clone(),
                    },
                    &m_star,
                )
            },
            &m.mu,
            1e-5,
        )
        .unwrap();
        assert!(relative_grad_error(&gmu, &nmu) <= 1e-5);
        let nlv = finite_diff_grad(
            |t| {
                moment_loss(
                    &LatentMoments {
                        mu: m.mu.clone(),
                        log_var: t.clone(),
                    },
                    &m_star,
                )
            },
            &m.log_var,
            1e-5,
        )
        .unwrap();
        assert!(relative_grad_error(&glv, &nlv) <= 1e-5);
    }

    #[test]
    fn reconstruction_loss_cases() {
        let x = Tensor::zeros(&[2, 2, 3]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let ones = Tensor::filled(&[2, 2, 3], 1.0);
        assert_eq!(reconstruction_loss(&x, &ones).unwrap(), 1.0);
    }

    #[test]
    fn perceptual_proxy_zero_and_quadratic_scaling() {
        let proxy = PerceptualProxy::new(9);
        let mut rng = RngState::new(5);
        let x = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
        assert_eq!(proxy.loss(&x, &x).unwrap(), 0.0);

        let noise = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let a = 1e-3;
        let x1 = x.add(&noise.scale(a)).unwrap();
        let x2 = x.add(&noise.scale(2.0 * a)).unwrap();
        let l1 = proxy.loss(&x, &x1).unwrap();
        let l2 = proxy.loss(&x, &x2).unwrap();
        let ratio = l2 / l1;
        assert!((ratio - 4.0).abs() / 4.0 < 0.1, "ratio {ratio}");
    }

    #[test]
    fn perceptual_grad_matches_finite_differences() {
        let proxy = PerceptualProxy::new(10);
        let mut rng = RngState::new(6);
        let x = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
        let x_hat = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
        let analytic = proxy.loss_grad(&x, &x_hat).unwrap();
        let numeric = finite_diff_grad(|t| proxy.loss(&x, t), &x_hat, 1e-4).unwrap();
        assert!(relative_grad_error(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn adversarial_loss_cases() {
        let mut rng = RngState::new(7);
        let mut d = DiscriminatorParams::new(4, &mut rng);
        // zero the last conv so logits are identically 0
        let last = d.stack.layers.len() - 1;
        for p in d.stack.layers[last].params.iter_mut() {
            p.data_mut().fill(0.0);
        }
        let x = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
        let y = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
        let (d_loss, g_loss) = adversarial_losses(&d, &x, &y).unwrap();
        assert!((d_loss - 2.0).abs() < 1e-12);
        assert!(g_loss.abs() < 1e-12);

        // saturated hinge: logits +-1 via constant bias
        d.stack.layers[last].params[1] = Tensor::filled(&[1], 1.0);
        let lr = d.stack.forward(&x).unwrap();
        assert!(lr.data().iter().all(|v| *v >= 1.0));
    }

    #[test]
    fn generator_grad_matches_finite_differences() {
        let mut rng = RngState::new(8);
        let d = DiscriminatorParams::new(4, &mut rng);
        let x_fake = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
        let analytic = generator_loss_grad(&d, &x_fake).unwrap();
        let numeric = finite_diff_grad(
            |t| {
                let logits = d.stack.forward(t)?;
                Ok(-logits.mean())
            },
            &x_fake,
            1e-4,
        )
        .unwrap();
        assert!(relative_grad_error(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn grad_norm_ratio_cases() {
        let a = Tensor::filled(&[4], 1.0);
        let b = Tensor::filled(&[4], 1.0);
        assert!((grad_norm_ratio(&[a.clone()], &[b.clone()]) - 1.0).abs() < 1e-7);
        let zero = Tensor::zeros(&[4]);
        assert_eq!(grad_norm_ratio(&[a.clone()], &[zero]), 1e4);
        // exact homogeneity in the numerator
        let r1 = grad_norm_ratio(&[a.scale(3.0)], &[b.clone()]);
        let r0 = grad_norm_ratio(&[a], &[b]);
        assert!((r1 - 3.0 * r0).abs() < 1e-9);
    }

    fn step_setup(
        seed: u64,
    ) -> (
        VaeParams,
        DiscriminatorParams,
        ProjectionHead,
        PerceptualProxy,
        Vec<FeatureMatrix>,
        Vec<Tensor>,
        Vec<LatentMoments>,
    ) {
        let mut rng = RngState::new(seed);
        let params = tiny_vae(&mut rng);
        let d = DiscriminatorParams::new(4, &mut rng);
        let prior = FoundationPrior::new(77, 5, (2, 2));
        let head = ProjectionHead::new(2, 5, 1, Some((2, 2)), &mut rng);
        let proxy = PerceptualProxy::new(3);
        let batch: Vec<Tensor> = (0..2)
            .map(|_| Tensor::randn(&[32, 32, 3], 0.5, &mut rng))
            .collect();
        let prior_features: Vec<FeatureMatrix> = batch
            .iter()
            .map(|x| prior.extract_features(x).unwrap())
            .collect();
        let reference = tiny_vae(&mut rng);
        let m_star: Vec<LatentMoments> = batch
            .iter()
            .map(|x| split_moments(&reference.encoder.forward(x).unwrap(), 2).unwrap())
            .collect();
        (params, d, head, proxy, prior_features, batch, m_star)
    }

    fn run_step(seed: u64, cfg: &VaeStepConfig) -> (VaeParams, VaeLosses) {
        let (mut params, mut d, mut head, proxy, pf, batch, m_star) = step_setup(seed);
        let mut gen_opt = AdamW::new(AdamConfig::with_lr(1e-3));
        let mut d_opt = AdamW::new(AdamConfig::with_lr(1e-3));
        let mut rng = RngState::new(1234);
        let losses = vae_train_step(
            &mut params,
            &mut d,
            &mut head,
            &proxy,
            &pf,
            &batch,
            &m_star,
            cfg,
            &mut gen_opt,
            &mut d_opt,
            &mut rng,
        )
        .unwrap();
        (params, losses)
    }

    #[test]
    fn step_is_bit_reproducible() {
        let cfg = VaeStepConfig {
            lambda_m: 1.0,
            lambda_s: 1.0,
            lambda_lpips: 0.1,
            lambda_adv: 0.05,
            adv_active: true,
            step: 0,
        };
        let (p1, l1) = run_step(42, &cfg);
        let (p2, l2) = run_step(42, &cfg);
        assert_eq!(l1.total, l2.total);
        for (a, b) in p1.encoder.params().zip(p2.encoder.params()) {
            assert_eq!(a, b);
        }
        for (a, b) in p1.decoder.params().zip(p2.decoder.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_weights_reduce_to_reconstruction_training() {
        let zeroed = VaeStepConfig {
            lambda_m: 0.0,
            lambda_s: 0.0,
            lambda_lpips: 0.0,
            lambda_adv: 0.0,
            adv_active: true,
            step: 0,
        };
        let (p_zero, losses) = run_step(42, &zeroed);
        // components still reported
        assert!(losses.rec > 0.0);
        assert!(losses.moment > 0.0);
        assert!(losses.sga >= 0.0);

        // a hand-rolled pure-reconstruction step reaches the same encoder
        // and decoder parameters
        let (mut params, _d, _head, _proxy, _pf, batch, _m_star) = step_setup(42);
        let mut gen_opt = AdamW::new(AdamConfig::with_lr(1e-3));
        let mut rng = RngState::new(1234);
        let b = batch.len() as f64;
        params.encoder.zero_grads();
        params.decoder.zero_grads();
        let mut caches = Vec::new();
        for x in &batch {
            let (enc_out, enc_inputs) = params.encoder.forward_cached(x).unwrap();
            let m = split_moments(&enc_out, 2).unwrap();
            let (z, eps) = reparameterize(&m, &mut rng);
            let (x_hat, dec_inputs) = params.decoder.forward_cached(&z).unwrap();
            caches.push((enc_out, enc_inputs, m, z, eps, dec_inputs, x_hat));
        }
        for (x, (enc_out, enc_inputs, m, _z, eps, dec_inputs, x_hat)) in
            batch.iter().zip(&caches)
        {
            let dxhat = reconstruction_loss_grad(x, x_hat).unwrap();
            let dz = params
                .decoder
                .backward(dec_inputs, &dxhat.scale(1.0 / b))
                .unwrap();
            let mut dlv = Tensor::zeros(m.log_var.dims());
            for i in 0..dlv.len() {
                dlv.data_mut()[i] =
                    dz.data()[i] * eps.data()[i] * (0.5 * m.log_var.data()[i]).exp() * 0.5;
            }
            let up = merge_moment_grads_masked(enc_out, 2, &dz, &dlv).unwrap();
            params.encoder.backward(enc_inputs, &up).unwrap();
        }
        // mirror the full step's parameter ordering (head params included)
        let mut head_for_order = {
            let mut rng2 = RngState::new(999);
            ProjectionHead::new(2, 5, 1, Some((2, 2)), &mut rng2)
        };
        // head grads are zero in both runs; only ordering matters for Adam
        head_for_order.conv.zero_grads();
        let grads: Vec<Tensor> = params
            .encoder
            .grads()
            .chain(params.decoder.grads())
            .chain(head_for_order.conv.grads.iter())
            .cloned()
            .collect();
        let (enc, dec) = (&mut params.encoder, &mut params.decoder);
        gen_opt
            .step(
                enc.params_mut()
                    .chain(dec.params_mut())
                    .chain(head_for_order.conv.params.iter_mut()),
                grads.iter(),
            )
            .unwrap();
        for (a, b) in p_zero.encoder.params().zip(params.encoder.params()) {
            assert_eq!(a, b);
        }
        for (a, b) in p_zero.decoder.params().zip(params.decoder.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nan_input_raises_divergence() {
        let (mut params, mut d, mut head, proxy, pf, mut batch, m_star) = step_setup(11);
        batch[0].data_mut()[0] = f64::NAN;
        let cfg = VaeStepConfig {
            lambda_m: 1.0,
            lambda_s: 1.0,
            lambda_lpips: 0.1,
            lambda_adv: 0.05,
            adv_active: true,
            step: 3,
        };
        let mut gen_opt = AdamW::new(AdamConfig::with_lr(1e-3));
        let mut d_opt = AdamW::new(AdamConfig::with_lr(1e-3));
        let mut rng = RngState::new(1);
        let err = vae_train_step(
            &mut params, &mut d, &mut head, &proxy, &pf, &batch, &m_star, &cfg, &mut gen_opt,
            &mut d_opt, &mut rng,
        )
        .unwrap_err();
        match err {
            SgaError::Divergence { step, .. } => assert_eq!(step, 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
