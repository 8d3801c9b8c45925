//! Run orchestration: run directories keyed by the config hash, metrics
//! logging, named checkpoints, the two training stages, the alignment
//! conflict experiment, sampling, and PCA feature pixmaps.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::alignment::{FeatureMatrix, ProjectionHead};
use crate::checkpoint::{find_tensor, read_checkpoint, write_checkpoint};
use crate::config::RunConfig;
use crate::dataset::SyntheticDataset;
use crate::error::{Result, SgaError};
use crate::flow::{
    diffusion_train_step, euler_sample, flow_matching_loss, sample_timestep_logit_normal,
    AlignmentMode, DenoiserParams, FlowBatch, FlowStepConfig, CLASS_COUNT, NULL_LABEL,
};
use crate::layers::{Layer, LayerStack};
use crate::linalg::pca_project;
use crate::metrics::{metric_nmse, metric_psnr, metric_ssim, to_unit_range};
use crate::optim::{AdamConfig, AdamW};
use crate::prior::{grid_for_resolution, FoundationPrior};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::vae::{
    split_moments, vae_train_step, DiscriminatorParams, LatentMoments, PerceptualProxy, VaeParams,
    VaeStepConfig,
};

// independent rng stream tags, xor-ed into the run seed
const TAG_VAE_INIT: u64 = 0x7661655f696e6974;
const TAG_VAE_STEP: u64 = 0x7661655f73746570;
const TAG_DIFF_INIT: u64 = 0x6466695f696e6974;
const TAG_DIFF_STEP: u64 = 0x6466695f73746570;
const TAG_EVAL: u64 = 0x6576616c5f726e67;
const TAG_SAMPLE: u64 = 0x73616d706c655f72;
const TAG_PROXY: u64 = 0x70726f78795f7267;

/// Held-out samples scored per evaluation pass.
const EVAL_CAP: usize = 16;
/// Samples drawn per arm when scoring the conflict experiment.
const CONFLICT_SAMPLES: u64 = 8;
/// Fraction of labels dropped to the null class during stage-2 training,
/// so classifier-free guidance has an unconditional branch to lean on.
const LABEL_DROP_ONE_IN: u64 = 10;

pub const METRICS_HEADER: &str =
    "step,loss_rec,loss_perc,loss_adv,loss_moment,loss_sga,loss_fm,nmse,psnr,ssim,wall_seconds";

/// A run directory named by the config hash. Opening takes an exclusive
/// lock file and writes the canonical resolved config; the lock is removed
/// on drop.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn open(cfg: &RunConfig) -> Result<RunDir> {
        cfg.validate()?;
        let path = Path::new(&cfg.run_root).join(cfg.hash());
        fs::create_dir_all(&path)?;
        let lock = path.join("LOCK");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(SgaError::contract(format!(
                    "run directory {} is locked; remove {} if no other process is using it",
                    path.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        fs::write(path.join("config.resolved"), cfg.resolved_dump())?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join("LOCK"));
    }
}

/// Per-step CSV log. The wall_seconds column is pinned to 0 so two runs of
/// the same config produce byte-identical files; real timing goes to
/// stderr only.
struct MetricsLog {
    out: BufWriter<fs::File>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<MetricsLog> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsLog { out })
    }

    fn row(&mut self, step: u64, vals: &[f64; 9]) -> Result<()> {
        write!(self.out, "{step}")?;
        for v in vals {
            write!(self.out, ",{v}")?;
        }
        writeln!(self.out, ",0")?;
        // flushed per row so an aborted run keeps its partial log
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReconMetrics {
    pub nmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

// ---------------------------------------------------------------------------
// named checkpoints
// ---------------------------------------------------------------------------

fn layer_named(prefix: &str, layer: &Layer, out: &mut Vec<(String, Tensor)>) {
    for (j, p) in layer.params.iter().enumerate() {
        let tag = if j == 0 { "w" } else { "b" };
        out.push((format!("{prefix}.{tag}"), p.clone()));
    }
}

fn load_layer(prefix: &str, layer: &mut Layer, tensors: &[(String, Tensor)]) -> Result<()> {
    for (j, p) in layer.params.iter_mut().enumerate() {
        let tag = if j == 0 { "w" } else { "b" };
        let name = format!("{prefix}.{tag}");
        let t = find_tensor(tensors, &name)?;
        if !p.same_shape(t) {
            return Err(SgaError::shape(format!(
                "checkpoint tensor {name} has dims {:?}, model expects {:?}",
                t.dims(),
                p.dims()
            )));
        }
        *p = t.clone();
    }
    Ok(())
}

fn stack_named(prefix: &str, stack: &LayerStack, out: &mut Vec<(String, Tensor)>) {
    for (i, layer) in stack.layers.iter().enumerate() {
        layer_named(&format!("{prefix}.{i}"), layer, out);
    }
}

fn load_stack(prefix: &str, stack: &mut LayerStack, tensors: &[(String, Tensor)]) -> Result<()> {
    for (i, layer) in stack.layers.iter_mut().enumerate() {
        load_layer(&format!("{prefix}.{i}"), layer, tensors)?;
    }
    Ok(())
}

fn write_named(path: &Path, named: &[(String, Tensor)]) -> Result<()> {
    let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_checkpoint(path, &refs)
}

pub fn save_vae_checkpoint(
    path: &Path,
    vae: &VaeParams,
    disc: &DiscriminatorParams,
    head: &ProjectionHead,
    step: u64,
) -> Result<()> {
    let mut named = Vec::new();
    stack_named("encoder", &vae.encoder, &mut named);
    stack_named("decoder", &vae.decoder, &mut named);
    layer_named("head", &head.conv, &mut named);
    stack_named("disc", &disc.stack, &mut named);
    named.push((
        "meta.step".to_string(),
        Tensor::new(vec![1], vec![step as f64])?,
    ));
    write_named(path, &named)
}

fn fresh_stage1_models(cfg: &RunConfig) -> (VaeParams, DiscriminatorParams, ProjectionHead) {
    let grid = grid_for_resolution(cfg.image_size, cfg.image_size, cfg.prior_patch_budget);
    let mut rng = RngState::new(cfg.seed ^ TAG_VAE_INIT);
    let vae = VaeParams::new(cfg.vae_c, cfg.vae_f, cfg.vae_width, &mut rng);
    let disc = DiscriminatorParams::new(cfg.vae_width, &mut rng);
    let head = ProjectionHead::new(cfg.vae_c, cfg.prior_c_f, 1, Some(grid), &mut rng);
    (vae, disc, head)
}

pub fn load_vae_checkpoint(
    path: &Path,
    cfg: &RunConfig,
) -> Result<(VaeParams, DiscriminatorParams, ProjectionHead, u64)> {
    let tensors = read_checkpoint(path)?;
    let (mut vae, mut disc, mut head) = fresh_stage1_models(cfg);
    load_stack("encoder", &mut vae.encoder, &tensors)?;
    load_stack("decoder", &mut vae.decoder, &tensors)?;
    load_layer("head", &mut head.conv, &tensors)?;
    load_stack("disc", &mut disc.stack, &tensors)?;
    let step = find_tensor(&tensors, "meta.step")?.data()[0] as u64;
    Ok((vae, disc, head, step))
}

fn denoiser_named(p: &DenoiserParams, head: &ProjectionHead, step: u64) -> Result<Vec<(String, Tensor)>> {
    let mut named = Vec::new();
    layer_named("stem", &p.stem, &mut named);
    for (i, blk) in p.blocks.iter().enumerate() {
        layer_named(&format!("block{i}.cond"), &blk.cond, &mut named);
        layer_named(&format!("block{i}.conv"), &blk.conv, &mut named);
    }
    layer_named("out", &p.head, &mut named);
    named.push(("class_embed".to_string(), p.class_embed.clone()));
    layer_named("align", &head.conv, &mut named);
    named.push((
        "meta.step".to_string(),
        Tensor::new(vec![1], vec![step as f64])?,
    ));
    Ok(named)
}

pub fn save_denoiser_checkpoint(
    path: &Path,
    p: &DenoiserParams,
    head: &ProjectionHead,
    step: u64,
) -> Result<()> {
    write_named(path, &denoiser_named(p, head, step)?)
}

fn fresh_stage2_models(cfg: &RunConfig) -> (DenoiserParams, ProjectionHead) {
    let grid = grid_for_resolution(cfg.image_size, cfg.image_size, cfg.prior_patch_budget);
    let mut rng = RngState::new(cfg.seed ^ TAG_DIFF_INIT);
    let den = DenoiserParams::new(
        cfg.vae_c,
        cfg.diff_width,
        cfg.diff_blocks,
        cfg.diff_embed_dim,
        cfg.diff_tap_index,
        &mut rng,
    );
    let head = ProjectionHead::new(cfg.diff_width, cfg.prior_c_f, 1, Some(grid), &mut rng);
    (den, head)
}

pub fn load_denoiser_checkpoint(
    path: &Path,
    cfg: &RunConfig,
) -> Result<(DenoiserParams, ProjectionHead, u64)> {
    let tensors = read_checkpoint(path)?;
    let (mut den, mut head) = fresh_stage2_models(cfg);
    load_layer("stem", &mut den.stem, &tensors)?;
    for i in 0..den.blocks.len() {
        load_layer(&format!("block{i}.cond"), &mut den.blocks[i].cond, &tensors)?;
        load_layer(&format!("block{i}.conv"), &mut den.blocks[i].conv, &tensors)?;
    }
    load_layer("out", &mut den.head, &tensors)?;
    let ce = find_tensor(&tensors, "class_embed")?;
    if !den.class_embed.same_shape(ce) {
        return Err(SgaError::shape("checkpoint class_embed dims disagree"));
    }
    den.class_embed = ce.clone();
    load_layer("align", &mut head.conv, &tensors)?;
    let step = find_tensor(&tensors, "meta.step")?.data()[0] as u64;
    Ok((den, head, step))
}

/// Digest of the autoencoder parameters, used to assert that stage 2 never
/// touches the frozen stage-1 model.
pub fn vae_checksum(vae: &VaeParams) -> [u8; 32] {
    let mut named = Vec::new();
    stack_named("encoder", &vae.encoder, &mut named);
    stack_named("decoder", &vae.decoder, &mut named);
    let mut h = Sha256::new();
    for (name, t) in &named {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update((*v as f32).to_le_bytes());
        }
    }
    h.finalize().into()
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn prior_features_for(
    prior: &FoundationPrior,
    ds: &SyntheticDataset,
    cache: &mut HashMap<usize, FeatureMatrix>,
    idx: usize,
) -> Result<FeatureMatrix> {
    if let Some(f) = cache.get(&idx) {
        return Ok(f.clone());
    }
    let (x, _) = ds.sample(idx);
    let f = prior.extract_features(&x)?;
    cache.insert(idx, f.clone());
    Ok(f)
}

fn reference_moments(
    reference: &VaeParams,
    ds: &SyntheticDataset,
    cache: &mut HashMap<usize, LatentMoments>,
    idx: usize,
) -> Result<LatentMoments> {
    if let Some(m) = cache.get(&idx) {
        return Ok(m.clone());
    }
    let (x, _) = ds.sample(idx);
    let m = split_moments(&reference.encoder.forward(&x)?, reference.c)?;
    cache.insert(idx, m.clone());
    Ok(m)
}

fn latent_for(
    vae: &VaeParams,
    ds: &SyntheticDataset,
    cache: &mut HashMap<usize, (Tensor, usize)>,
    idx: usize,
) -> Result<(Tensor, usize)> {
    if let Some(e) = cache.get(&idx) {
        return Ok(e.clone());
    }
    let (x, label) = ds.sample(idx);
    let m = split_moments(&vae.encoder.forward(&x)?, vae.c)?;
    cache.insert(idx, (m.mu.clone(), label));
    Ok((m.mu, label))
}

fn eval_indices(ds: &SyntheticDataset) -> Vec<usize> {
    let mut idxs = ds.held_out_indices();
    if idxs.is_empty() {
        idxs = ds.train_indices();
    }
    idxs.truncate(EVAL_CAP);
    idxs
}

fn eval_reconstruction(vae: &VaeParams, ds: &SyntheticDataset) -> Result<ReconMetrics> {
    let idxs = eval_indices(ds);
    let n = idxs.len() as f64;
    let mut m = ReconMetrics::default();
    for &i in &idxs {
        let (x, _) = ds.sample(i);
        let moments = split_moments(&vae.encoder.forward(&x)?, vae.c)?;
        let x_hat = vae.decoder.forward(&moments.mu)?;
        m.nmse += metric_nmse(&x, &x_hat)? / n;
        let (xu, xh) = (to_unit_range(&x), to_unit_range(&x_hat));
        m.psnr += metric_psnr(&xu, &xh)? / n;
        m.ssim += metric_ssim(&xu, &xh)? / n;
    }
    Ok(m)
}

/// Mean velocity-matching error on the held-out split with fixed noise and
/// timesteps per index, so every model sees the same evaluation problem.
fn held_out_flow_loss(
    cfg: &RunConfig,
    den: &DenoiserParams,
    vae: &VaeParams,
    ds: &SyntheticDataset,
    latents: &mut HashMap<usize, (Tensor, usize)>,
) -> Result<f64> {
    let idxs = eval_indices(ds);
    let mut total = 0.0;
    for &i in &idxs {
        let (mu, label) = latent_for(vae, ds, latents, i)?;
        let mut stream = RngState::new(cfg.seed ^ TAG_EVAL).split(i as u64);
        let mut z0 = Tensor::zeros(mu.dims());
        stream.fill_normal(z0.data_mut());
        let t = sample_timestep_logit_normal(&mut stream, 1);
        let fb = FlowBatch {
            z_1: vec![mu],
            z_0: vec![z0],
            t,
            labels: vec![label],
        };
        total += flow_matching_loss(den, &fb)?.0;
    }
    Ok(total / idxs.len() as f64)
}

// ---------------------------------------------------------------------------
// stage 1
// ---------------------------------------------------------------------------

/// Runs the stage-1 loop and writes `<stem>.ckpt` plus `metrics_<stem>.csv`
/// into the run directory. With `reference == None` this is the plain
/// autoencoding pre-training pass that later provides the frozen anchor
/// encoder; otherwise the full objective is active against it.
fn stage1_loop(
    cfg: &RunConfig,
    run: &RunDir,
    stem: &str,
    mut vae: VaeParams,
    mut disc: DiscriminatorParams,
    mut head: ProjectionHead,
    reference: Option<&VaeParams>,
) -> Result<PathBuf> {
    let ds = SyntheticDataset::new(cfg.seed, cfg.n_images, cfg.image_size)?;
    let grid = grid_for_resolution(cfg.image_size, cfg.image_size, cfg.prior_patch_budget);
    let prior = FoundationPrior::new(cfg.prior_seed, cfg.prior_c_f, grid);
    let proxy = PerceptualProxy::new(cfg.prior_seed ^ TAG_PROXY);
    let train = ds.train_indices();
    if train.is_empty() {
        return Err(SgaError::config("no training images after the held-out split"));
    }
    let bs = cfg.batch_size.min(train.len());
    let steps = cfg.vae_steps as u64;
    let warmup = steps / 5;
    let mut gen_opt = AdamW::new(AdamConfig::with_lr(cfg.vae_lr));
    let mut d_opt = AdamW::new(AdamConfig::with_lr(cfg.vae_lr));
    let mut feats: HashMap<usize, FeatureMatrix> = HashMap::new();
    let mut m_ref: HashMap<usize, LatentMoments> = HashMap::new();
    let latent = cfg.image_size / cfg.vae_f;
    let zero_moments = LatentMoments {
        mu: Tensor::zeros(&[latent, latent, cfg.vae_c]),
        log_var: Tensor::zeros(&[latent, latent, cfg.vae_c]),
    };
    let mut log = MetricsLog::create(&run.file(&format!("metrics_{stem}.csv")))?;
    let mut eval = ReconMetrics::default();
    let started = std::time::Instant::now();
    let mut last_good: Option<(VaeParams, DiscriminatorParams, ProjectionHead, u64)> = None;

    for step in 0..steps {
        let mut rng = RngState::new(cfg.seed ^ TAG_VAE_STEP).split(step);
        let mut batch = Vec::with_capacity(bs);
        let mut pf = Vec::with_capacity(bs);
        let mut ms = Vec::with_capacity(bs);
        for j in 0..bs {
            let idx = train[(step as usize * bs + j) % train.len()];
            pf.push(prior_features_for(&prior, &ds, &mut feats, idx)?);
            ms.push(match reference {
                Some(r) => reference_moments(r, &ds, &mut m_ref, idx)?,
                None => zero_moments.clone(),
            });
            batch.push(ds.sample(idx).0);
        }
        let fine_tune = reference.is_some();
        let scfg = VaeStepConfig {
            lambda_m: if fine_tune { cfg.vae_lambda_m } else { 0.0 },
            lambda_s: if fine_tune { cfg.vae_lambda_s } else { 0.0 },
            lambda_lpips: cfg.vae_lambda_lpips,
            lambda_adv: if fine_tune { cfg.vae_lambda_adv } else { 0.0 },
            adv_active: fine_tune && step >= warmup,
            step,
        };
        let losses = match vae_train_step(
            &mut vae, &mut disc, &mut head, &proxy, &pf, &batch, &ms, &scfg, &mut gen_opt,
            &mut d_opt, &mut rng,
        ) {
            Ok(l) => l,
            Err(e @ SgaError::Divergence { .. }) => {
                if let Some((v, d, h, s)) = last_good {
                    save_vae_checkpoint(&run.file(&format!("{stem}_lastgood.ckpt")), &v, &d, &h, s)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let is_eval = cfg.eval_every != 0 && (step + 1) % cfg.eval_every as u64 == 0;
        if is_eval || step + 1 == steps {
            eval = eval_reconstruction(&vae, &ds)?;
            eprintln!(
                "[{stem}] step {} rec {:.4} sga {:.4} psnr {:.2} ({:.1}s)",
                step + 1,
                losses.rec,
                losses.sga,
                eval.psnr,
                started.elapsed().as_secs_f64()
            );
        }
        log.row(
            step,
            &[
                losses.rec,
                losses.perc,
                losses.adv_g,
                losses.moment,
                losses.sga,
                0.0,
                eval.nmse,
                eval.psnr,
                eval.ssim,
            ],
        )?;
        if cfg.checkpoint_every != 0 && (step + 1) % cfg.checkpoint_every as u64 == 0 {
            save_vae_checkpoint(
                &run.file(&format!("{stem}_step{:06}.ckpt", step + 1)),
                &vae,
                &disc,
                &head,
                step + 1,
            )?;
        }
        last_good = Some((vae.clone(), disc.clone(), head.clone(), step + 1));
    }

    let out = run.file(&format!("{stem}.ckpt"));
    save_vae_checkpoint(&out, &vae, &disc, &head, steps)?;
    Ok(out)
}

fn pretrain_vae_locked(cfg: &RunConfig, run: &RunDir) -> Result<PathBuf> {
    let (vae, disc, head) = fresh_stage1_models(cfg);
    stage1_loop(cfg, run, "vae_ref", vae, disc, head, None)
}

/// Plain autoencoding pass that produces the frozen reference encoder.
pub fn pretrain_vae(cfg: &RunConfig) -> Result<PathBuf> {
    let run = RunDir::open(cfg)?;
    pretrain_vae_locked(cfg, &run)
}

/// Full stage-1 fine-tuning pass. Runs the pre-training pass first when
/// its checkpoint is absent.
pub fn train_vae(cfg: &RunConfig) -> Result<PathBuf> {
    let run = RunDir::open(cfg)?;
    let ref_path = run.file("vae_ref.ckpt");
    if !ref_path.exists() {
        pretrain_vae_locked(cfg, &run)?;
    }
    let (reference, disc, head, _) = load_vae_checkpoint(&ref_path, cfg)?;
    let vae = reference.clone();
    stage1_loop(cfg, &run, "vae", vae, disc, head, Some(&reference))
}

// ---------------------------------------------------------------------------
// stage 2
// ---------------------------------------------------------------------------

fn stage2_loop(
    cfg: &RunConfig,
    run: &RunDir,
    mode: AlignmentMode,
    stem: &str,
    init: Option<&Path>,
) -> Result<(PathBuf, f64)> {
    let vae_path = run.file("vae.ckpt");
    if !vae_path.exists() {
        return Err(SgaError::config(
            "stage 2 needs the stage-1 checkpoint vae.ckpt; run train-vae first",
        ));
    }
    let (vae, _, _, _) = load_vae_checkpoint(&vae_path, cfg)?;
    let frozen = vae_checksum(&vae);

    let ds = SyntheticDataset::new(cfg.seed, cfg.n_images, cfg.image_size)?;
    let grid = grid_for_resolution(cfg.image_size, cfg.image_size, cfg.prior_patch_budget);
    let prior = FoundationPrior::new(cfg.prior_seed, cfg.prior_c_f, grid);
    let train = ds.train_indices();
    if train.is_empty() {
        return Err(SgaError::config("no training images after the held-out split"));
    }
    let bs = cfg.batch_size.min(train.len());
    let (mut den, mut head) = match init {
        Some(p) => {
            let (d, h, _) = load_denoiser_checkpoint(p, cfg)?;
            (d, h)
        }
        None => fresh_stage2_models(cfg),
    };
    let mut opt = AdamW::new(AdamConfig::with_lr(cfg.diff_lr));
    let mut feats: HashMap<usize, FeatureMatrix> = HashMap::new();
    let mut latents: HashMap<usize, (Tensor, usize)> = HashMap::new();
    let mut log = MetricsLog::create(&run.file(&format!("metrics_{stem}.csv")))?;
    let steps = cfg.diff_steps as u64;
    let started = std::time::Instant::now();
    let mut last_good: Option<(DenoiserParams, ProjectionHead, u64)> = None;

    for step in 0..steps {
        let mut rng = RngState::new(cfg.seed ^ TAG_DIFF_STEP).split(step);
        let mut fb = FlowBatch {
            z_1: Vec::with_capacity(bs),
            z_0: Vec::with_capacity(bs),
            t: sample_timestep_logit_normal(&mut rng, bs),
            labels: Vec::with_capacity(bs),
        };
        let mut pf = Vec::with_capacity(bs);
        for j in 0..bs {
            let idx = train[(step as usize * bs + j) % train.len()];
            let (mu, label) = latent_for(&vae, &ds, &mut latents, idx)?;
            pf.push(prior_features_for(&prior, &ds, &mut feats, idx)?);
            let mut z0 = Tensor::zeros(mu.dims());
            rng.fill_normal(z0.data_mut());
            fb.z_1.push(mu);
            fb.z_0.push(z0);
            fb.labels.push(if rng.next_below(LABEL_DROP_ONE_IN) == 0 {
                NULL_LABEL
            } else {
                label
            });
        }
        let scfg = FlowStepConfig {
            lambda_s: cfg.diff_lambda_s,
            mode,
            step,
        };
        let losses = match diffusion_train_step(&mut den, &mut head, &pf, &fb, &scfg, &mut opt) {
            Ok(l) => l,
            Err(e @ SgaError::Divergence { .. }) => {
                if let Some((d, h, s)) = last_good {
                    save_denoiser_checkpoint(&run.file(&format!("{stem}_lastgood.ckpt")), &d, &h, s)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if cfg.eval_every != 0 && (step + 1) % cfg.eval_every as u64 == 0 {
            let fm = held_out_flow_loss(cfg, &den, &vae, &ds, &mut latents)?;
            eprintln!(
                "[{stem}] step {} fm {:.4} sga {:.4} heldout {:.4} ({:.1}s)",
                step + 1,
                losses.fm,
                losses.sga,
                fm,
                started.elapsed().as_secs_f64()
            );
        }
        log.row(
            step,
            &[0.0, 0.0, 0.0, 0.0, losses.sga, losses.fm, 0.0, 0.0, 0.0],
        )?;
        if cfg.checkpoint_every != 0 && (step + 1) % cfg.checkpoint_every as u64 == 0 {
            save_denoiser_checkpoint(
                &run.file(&format!("{stem}_step{:06}.ckpt", step + 1)),
                &den,
                &head,
                step + 1,
            )?;
        }
        last_good = Some((den.clone(), head.clone(), step + 1));
    }

    if vae_checksum(&vae) != frozen {
        return Err(SgaError::contract(
            "frozen stage-1 autoencoder drifted during stage 2",
        ));
    }
    let fm = held_out_flow_loss(cfg, &den, &vae, &ds, &mut latents)?;
    let out = run.file(&format!("{stem}.ckpt"));
    save_denoiser_checkpoint(&out, &den, &head, steps)?;
    Ok((out, fm))
}

/// Stage-2 pass with alignment disabled; its checkpoint is the shared
/// starting point for fine-tuning and the conflict arms.
pub fn pretrain_diffusion(cfg: &RunConfig) -> Result<PathBuf> {
    let run = RunDir::open(cfg)?;
    stage2_loop(cfg, &run, AlignmentMode::None, "diff_base", None).map(|(p, _)| p)
}

/// Stage-2 pass under the configured alignment mode, starting from the
/// no-alignment baseline checkpoint when one exists.
pub fn train_diffusion(cfg: &RunConfig) -> Result<PathBuf> {
    let run = RunDir::open(cfg)?;
    let base = run.file("diff_base.ckpt");
    let init = if base.exists() {
        Some(base.clone())
    } else {
        None
    };
    stage2_loop(cfg, &run, cfg.diff_alignment_mode, "diff", init.as_deref()).map(|(p, _)| p)
}

// ---------------------------------------------------------------------------
// conflict experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConflictArm {
    pub name: String,
    pub heldout_fm: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct ConflictReport {
    pub arms: Vec<ConflictArm>,
}

impl ConflictReport {
    pub fn verdict(&self) -> String {
        let best = self
            .arms
            .iter()
            .min_by(|a, b| a.heldout_fm.total_cmp(&b.heldout_fm))
            .expect("report has arms");
        format!(
            "verdict: {} attains the lowest held-out velocity error",
            best.name
        )
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>14} {:>10} {:>10}\n",
            "arm", "heldout_fm", "psnr", "ssim"
        );
        for a in &self.arms {
            out.push_str(&format!(
                "{:<10} {:>14.6} {:>10.3} {:>10.4}\n",
                a.name, a.heldout_fm, a.psnr, a.ssim
            ));
        }
        out.push_str(&self.verdict());
        out.push('\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,heldout_fm,psnr,ssim\n");
        for a in &self.arms {
            out.push_str(&format!(
                "{},{},{},{}\n",
                a.name, a.heldout_fm, a.psnr, a.ssim
            ));
        }
        out
    }
}

/// Mean PSNR/SSIM of guided samples against decoded dataset latents of the
/// same class. Samples whose integration diverges are skipped.
fn sample_fidelity(
    cfg: &RunConfig,
    den: &DenoiserParams,
    vae: &VaeParams,
    ds: &SyntheticDataset,
) -> Result<(f64, f64)> {
    // one decoded reference per class, from the first matching train image
    let mut refs: Vec<Option<Tensor>> = vec![None; CLASS_COUNT];
    let mut latents: HashMap<usize, (Tensor, usize)> = HashMap::new();
    for idx in ds.train_indices() {
        if refs.iter().all(|r| r.is_some()) {
            break;
        }
        let (mu, label) = latent_for(vae, ds, &mut latents, idx)?;
        if refs[label].is_none() {
            refs[label] = Some(vae.decoder.forward(&mu)?);
        }
    }
    let hw = cfg.image_size / cfg.vae_f;
    let (mut psnr, mut ssim, mut count) = (0.0, 0.0, 0usize);
    for k in 0..CONFLICT_SAMPLES {
        let label = (k as usize) % CLASS_COUNT;
        let Some(reference) = refs[label].as_ref() else {
            continue;
        };
        let mut stream = RngState::new(cfg.seed ^ TAG_SAMPLE).split(k);
        let z = match euler_sample(
            den,
            label,
            (hw, hw),
            cfg.diff_sampler_steps,
            cfg.diff_guidance_scale,
            &mut stream,
        ) {
            Ok(z) => z,
            Err(SgaError::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        let x = vae.decoder.forward(&z)?;
        psnr += metric_psnr(&to_unit_range(reference), &to_unit_range(&x))?;
        ssim += metric_ssim(&to_unit_range(reference), &to_unit_range(&x))?;
        count += 1;
    }
    if count == 0 {
        Ok((0.0, 0.0))
    } else {
        Ok((psnr / count as f64, ssim / count as f64))
    }
}

/// Fine-tunes three equal-budget arms (no alignment, spatial Gram,
/// patchwise) from the shared no-alignment baseline and scores each on the
/// held-out split. Writes conflict_report.{txt,csv} into the run directory.
pub fn run_conflict_experiment(cfg: &RunConfig) -> Result<ConflictReport> {
    let run = RunDir::open(cfg)?;
    if !run.file("vae.ckpt").exists() {
        return Err(SgaError::config(
            "the conflict experiment needs vae.ckpt; run train-vae first",
        ));
    }
    let base = run.file("diff_base.ckpt");
    if !base.exists() {
        stage2_loop(cfg, &run, AlignmentMode::None, "diff_base", None)?;
    }
    let (vae, _, _, _) = load_vae_checkpoint(&run.file("vae.ckpt"), cfg)?;
    let ds = SyntheticDataset::new(cfg.seed, cfg.n_images, cfg.image_size)?;

    let mut arms = Vec::new();
    for (name, mode) in [
        ("none", AlignmentMode::None),
        ("sga", AlignmentMode::Sga),
        ("patchwise", AlignmentMode::Patchwise),
    ] {
        let (ckpt, fm) = stage2_loop(cfg, &run, mode, &format!("conflict_{name}"), Some(&base))?;
        let (den, _, _) = load_denoiser_checkpoint(&ckpt, cfg)?;
        let (psnr, ssim) = sample_fidelity(cfg, &den, &vae, &ds)?;
        arms.push(ConflictArm {
            name: name.to_string(),
            heldout_fm: fm,
            psnr,
            ssim,
        });
    }
    let report = ConflictReport { arms };
    fs::write(run.file("conflict_report.txt"), report.to_table())?;
    fs::write(run.file("conflict_report.csv"), report.to_csv())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// sampling, evaluation, visualization
// ---------------------------------------------------------------------------

/// Draws `count` guided samples (per-index label cycling unless one is
/// fixed), decodes them, and writes P6 pixmaps under `<run>/samples/`.
pub fn sample_images(cfg: &RunConfig, label: Option<usize>, count: usize) -> Result<Vec<PathBuf>> {
    if let Some(l) = label {
        if l >= CLASS_COUNT {
            return Err(SgaError::config(format!(
                "label {l} outside 0..{CLASS_COUNT}"
            )));
        }
    }
    let run = RunDir::open(cfg)?;
    if !run.file("vae.ckpt").exists() {
        return Err(SgaError::config("sampling needs vae.ckpt; run train-vae first"));
    }
    let den_path = if run.file("diff.ckpt").exists() {
        run.file("diff.ckpt")
    } else if run.file("diff_base.ckpt").exists() {
        run.file("diff_base.ckpt")
    } else {
        return Err(SgaError::config(
            "sampling needs a denoiser checkpoint; run train-diffusion first",
        ));
    };
    let (vae, _, _, _) = load_vae_checkpoint(&run.file("vae.ckpt"), cfg)?;
    let (den, _, _) = load_denoiser_checkpoint(&den_path, cfg)?;
    let dir = run.path.join("samples");
    fs::create_dir_all(&dir)?;
    let hw = cfg.image_size / cfg.vae_f;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let lbl = label.unwrap_or(i % CLASS_COUNT);
        let mut stream =
            RngState::new(cfg.seed ^ TAG_SAMPLE).split(((lbl as u64) << 32) | i as u64);
        let z = euler_sample(
            &den,
            lbl,
            (hw, hw),
            cfg.diff_sampler_steps,
            cfg.diff_guidance_scale,
            &mut stream,
        )?;
        let x = vae.decoder.forward(&z)?;
        let path = dir.join(format!("sample_l{lbl}_{i:03}.ppm"));
        write_image_pixmap(&path, &x)?;
        out.push(path);
    }
    Ok(out)
}

/// Scores whatever checkpoints the run directory holds and writes eval.txt.
pub fn evaluate_run(cfg: &RunConfig) -> Result<String> {
    let run = RunDir::open(cfg)?;
    let ds = SyntheticDataset::new(cfg.seed, cfg.n_images, cfg.image_size)?;
    let mut text = format!("run {}\n", cfg.hash());
    if run.file("vae.ckpt").exists() {
        let (vae, _, _, _) = load_vae_checkpoint(&run.file("vae.ckpt"), cfg)?;
        let m = eval_reconstruction(&vae, &ds)?;
        text.push_str(&format!(
            "reconstruction: nmse {:.6} psnr {:.3} ssim {:.4}\n",
            m.nmse, m.psnr, m.ssim
        ));
        for name in ["diff.ckpt", "diff_base.ckpt"] {
            if run.file(name).exists() {
                let (den, _, _) = load_denoiser_checkpoint(&run.file(name), cfg)?;
                let fm = held_out_flow_loss(cfg, &den, &vae, &ds, &mut HashMap::new())?;
                text.push_str(&format!("{name}: held-out velocity mse {fm:.6}\n"));
            }
        }
    } else {
        text.push_str("no stage-1 checkpoint\n");
    }
    fs::write(run.file("eval.txt"), &text)?;
    Ok(text)
}

/// PCA pixmap of the frozen prior's features for one dataset image.
pub fn visualize_prior(cfg: &RunConfig, index: usize) -> Result<PathBuf> {
    let run = RunDir::open(cfg)?;
    if index >= cfg.n_images {
        return Err(SgaError::config(format!(
            "index {index} outside the {}-image dataset",
            cfg.n_images
        )));
    }
    let ds = SyntheticDataset::new(cfg.seed, cfg.n_images, cfg.image_size)?;
    let grid = grid_for_resolution(cfg.image_size, cfg.image_size, cfg.prior_patch_budget);
    let prior = FoundationPrior::new(cfg.prior_seed, cfg.prior_c_f, grid);
    let f = prior.extract_features(&ds.sample(index).0)?;
    let path = run.file(&format!("prior_pca_{index:04}.ppm"));
    emit_pca_visualization(&f, grid, &path)?;
    Ok(path)
}

/// Top-3 PCA of the rows of a feature matrix as an RGB pixmap over the
/// patch grid. Component signs are canonicalized (largest-magnitude score
/// made positive) so channel permutations of the input leave the image
/// unchanged; missing components (rank < 3) render as zero.
pub fn emit_pca_visualization(
    features: &FeatureMatrix,
    grid: (usize, usize),
    path: &Path,
) -> Result<()> {
    let (gh, gw) = grid;
    if features.n() != gh * gw {
        return Err(SgaError::shape(format!(
            "{} feature rows do not tile a {gh}x{gw} grid",
            features.n()
        )));
    }
    let n = features.n();
    let k = 3.min(n.min(features.c()));
    let mut scores = pca_project(features.tensor(), k)?;
    for j in 0..k {
        let mut arg = 0;
        for i in 0..n {
            if scores.data()[i * k + j].abs() > scores.data()[arg * k + j].abs() {
                arg = i;
            }
        }
        if scores.data()[arg * k + j] < 0.0 {
            for i in 0..n {
                scores.data_mut()[i * k + j] = -scores.data()[i * k + j];
            }
        }
    }
    let mut bytes = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    let mut ranges = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<f64> = (0..n).map(|i| scores.data()[i * k + j]).collect();
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ranges.push((lo, hi));
    }
    for i in 0..n {
        for j in 0..3 {
            let b = if j < k {
                let (lo, hi) = ranges[j];
                if hi - lo < 1e-12 {
                    0
                } else {
                    (((scores.data()[i * k + j] - lo) / (hi - lo)) * 255.0).round() as u8
                }
            } else {
                0
            };
            bytes.push(b);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes an h*w*3 image with values in [-1, 1] as a binary P6 pixmap.
pub fn write_image_pixmap(path: &Path, img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.dims()[2] != 3 {
        return Err(SgaError::shape("pixmap writer expects h*w*3 images"));
    }
    let (h, w) = (img.dims()[0], img.dims()[1]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in img.data() {
        bytes.push((((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg(root: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.run_root = root.to_string_lossy().into_owned();
        cfg.image_size = 16;
        cfg.n_images = 30;
        cfg.batch_size = 2;
        cfg.eval_every = 2;
        cfg.checkpoint_every = 2;
        cfg.vae_width = 4;
        cfg.vae_c = 2;
        cfg.vae_lr = 1e-3;
        cfg.vae_steps = 2;
        cfg.diff_width = 6;
        cfg.diff_blocks = 2;
        cfg.diff_tap_index = 1;
        cfg.diff_embed_dim = 8;
        cfg.diff_lr = 1e-3;
        cfg.diff_steps = 2;
        cfg.diff_sampler_steps = 2;
        cfg.diff_guidance_scale = 1.0;
        cfg.prior_c_f = 4;
        cfg.prior_patch_budget = 1;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn run_dir_lock_excludes_and_releases() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let run = RunDir::open(&cfg).unwrap();
        assert!(run.file("config.resolved").exists());
        let mut back = RunConfig::default();
        back.apply_text(&fs::read_to_string(run.file("config.resolved")).unwrap())
            .unwrap();
        assert_eq!(back, cfg);
        assert!(RunDir::open(&cfg).is_err());
        drop(run);
        let again = RunDir::open(&cfg).unwrap();
        drop(again);
    }

    #[test]
    fn stage1_zero_steps_emits_initialized_checkpoint() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.vae_steps = 0;
        let ckpt = train_vae(&cfg).unwrap();
        assert!(ckpt.exists());
        let (vae, _, _, step) = load_vae_checkpoint(&ckpt, &cfg).unwrap();
        assert_eq!(step, 0);
        assert_eq!(vae.c, cfg.vae_c);
        let csv = fs::read_to_string(ckpt.parent().unwrap().join("metrics_vae.csv")).unwrap();
        assert_eq!(csv.trim_end(), METRICS_HEADER);
    }

    #[test]
    fn vae_checkpoint_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let (vae, disc, head) = fresh_stage1_models(&cfg);
        let path = dir.path().join("t.ckpt");
        save_vae_checkpoint(&path, &vae, &disc, &head, 7).unwrap();
        let (v2, d2, h2, step) = load_vae_checkpoint(&path, &cfg).unwrap();
        assert_eq!(step, 7);
        assert_eq!(vae_checksum(&vae), vae_checksum(&v2));
        for (a, b) in vae.encoder.params().zip(v2.encoder.params()) {
            assert_eq!(a, b);
        }
        for (a, b) in disc.stack.params().zip(d2.stack.params()) {
            assert_eq!(a, b);
        }
        assert_eq!(head.conv.params, h2.conv.params);
    }

    #[test]
    fn stage2_requires_stage1_checkpoint() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let err = train_diffusion(&cfg).unwrap_err();
        assert!(matches!(err, SgaError::Config(_)), "{err}");
    }

    #[test]
    fn metrics_log_is_byte_reproducible() {
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        let csv = |root: &Path| {
            let cfg = tiny_cfg(root);
            let ckpt = train_vae(&cfg).unwrap();
            fs::read(ckpt.parent().unwrap().join("metrics_vae.csv")).unwrap()
        };
        let (ca, cb) = (csv(a.path()), csv(b.path()));
        assert!(!ca.is_empty());
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        for line in text.lines().skip(1) {
            assert_eq!(line.split(',').count(), 11);
            assert!(line.ends_with(",0"), "wall clock leaked into {line}");
        }
    }

    #[test]
    fn full_pipeline_runs_and_samples() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        train_vae(&cfg).unwrap();
        let ckpt = train_diffusion(&cfg).unwrap();
        assert!(ckpt.exists());
        let (_, _, step) = load_denoiser_checkpoint(&ckpt, &cfg).unwrap();
        assert_eq!(step, cfg.diff_steps as u64);
        let imgs = sample_images(&cfg, Some(3), 1).unwrap();
        assert_eq!(imgs.len(), 1);
        let bytes = fs::read(&imgs[0]).unwrap();
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 16 * 16 * 3);
        let text = evaluate_run(&cfg).unwrap();
        assert!(text.contains("psnr"), "{text}");
        assert!(text.contains("diff.ckpt"), "{text}");
    }

    #[test]
    fn conflict_report_has_three_reproducible_arms() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.diff_steps = 1;
        train_vae(&cfg).unwrap();
        let report = run_conflict_experiment(&cfg).unwrap();
        let names: Vec<&str> = report.arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["none", "sga", "patchwise"]);
        let run_path = Path::new(&cfg.run_root).join(cfg.hash());
        let txt = fs::read_to_string(run_path.join("conflict_report.txt")).unwrap();
        assert!(txt.contains("verdict:"), "{txt}");
        let csv = fs::read_to_string(run_path.join("conflict_report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(txt, report.to_table());
    }

    #[test]
    fn divergence_halts_and_keeps_last_good() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        // the run directory is keyed by the config hash, so the bad
        // learning rate has to be set before stage 1
        // beyond f32 range: one optimizer step pushes weights to infinity
        cfg.diff_lr = 1e300;
        cfg.diff_steps = 5;
        train_vae(&cfg).unwrap();
        let err = train_diffusion(&cfg).unwrap_err();
        assert!(matches!(err, SgaError::Divergence { .. }), "{err}");
        let run_path = Path::new(&cfg.run_root).join(cfg.hash());
        assert!(run_path.join("diff_lastgood.ckpt").exists());
        assert!(load_denoiser_checkpoint(&run_path.join("diff_lastgood.ckpt"), &cfg).is_ok());
    }

    #[test]
    fn pca_pixmap_invariant_to_channel_permutation() {
        let mut rng = RngState::new(11);
        let grid = (2, 3);
        let f = FeatureMatrix::random(6, 5, &mut rng);
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ppm");
        emit_pca_visualization(&f, grid, &p1).unwrap();
        let bytes = fs::read(&p1).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6 * 3);

        // rotate the feature channels; the PCA image must not change
        let mut rot = Tensor::zeros(&[6, 5]);
        for i in 0..6 {
            for j in 0..5 {
                rot.data_mut()[i * 5 + (j + 1) % 5] = f.tensor().data()[i * 5 + j];
            }
        }
        let fr = FeatureMatrix::new(rot).unwrap();
        let p2 = dir.path().join("b.ppm");
        emit_pca_visualization(&fr, grid, &p2).unwrap();
        assert_eq!(bytes, fs::read(&p2).unwrap());
    }

    #[test]
    fn image_pixmap_clamps_and_sizes() {
        let dir = tempdir().unwrap();
        let img = Tensor::new(vec![1, 2, 3], vec![-2.0, -1.0, 0.0, 1.0, 2.0, 0.5]).unwrap();
        let p = dir.path().join("i.ppm");
        write_image_pixmap(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 0, 128, 255, 255, 191]);
    }

    #[test]
    fn visualize_prior_writes_grid_pixmap() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.image_size = 32;
        cfg.prior_patch_budget = 2;
        let p = visualize_prior(&cfg, 0).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
    }
}
