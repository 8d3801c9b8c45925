//! Acceptance gate A1-A8. Each criterion prints exactly one PASS/FAIL
//! line; tolerances and budgets are pinned here and nowhere else.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use sga_core::alignment::{
    repa_loss, repa_loss_grad, sga_loss, sga_loss_grad, FeatureMatrix,
};
use sga_core::config::RunConfig;
use sga_core::dataset::SyntheticDataset;
use sga_core::flow::{denoiser_backward, denoiser_forward, DenoiserParams};
use sga_core::gradcheck::{finite_diff_grad, relative_grad_error};
use sga_core::harness;
use sga_core::theory::{run_verification, VerificationReport};
use sga_core::vae::{
    adversarial_losses, generator_loss_grad, moment_loss, moment_loss_grad, reconstruction_loss,
    reconstruction_loss_grad, DiscriminatorParams, LatentMoments, PerceptualProxy,
};
use sga_core::{RngState, Tensor};

fn report(criterion: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    // write through the raw handle so the line survives output capture
    use std::io::Write;
    writeln!(std::io::stdout(), "[{criterion}] {status} — {detail}").unwrap();
    assert!(pass, "{criterion} failed: {detail}");
}

fn verification() -> &'static VerificationReport {
    static REPORT: std::sync::OnceLock<VerificationReport> = std::sync::OnceLock::new();
    REPORT.get_or_init(|| run_verification(0xACCE).expect("verification suite runs"))
}

fn rows<'a>(names: &[&str]) -> Vec<&'a sga_core::theory::CheckRow> {
    let rep = verification();
    names
        .iter()
        .map(|n| {
            rep.rows
                .iter()
                .find(|r| r.name == *n)
                .unwrap_or_else(|| panic!("missing check row {n}"))
        })
        .collect()
}

#[test]
fn a1_gauge_invariance() {
    let start = Instant::now();
    let picked = rows(&["gauge_invariance"]);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = picked.iter().all(|r| r.pass) && elapsed <= 60.0;
    report(
        "A1",
        pass,
        &format!(
            "orthogonal invariance worst {:.3e} (tol {:.1e}), {:.1}s",
            picked[0].worst, picked[0].tolerance, elapsed
        ),
    );
}

#[test]
fn a2_spectral_and_subspace_bounds() {
    let start = Instant::now();
    let picked = rows(&["hoffman_wielandt_slack", "davis_kahan_slack"]);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = picked.iter().all(|r| r.pass) && elapsed <= 120.0;
    report(
        "A2",
        pass,
        &format!(
            "hoffman-wielandt worst {:.3e}, davis-kahan worst {:.3e}, {:.1}s",
            picked[0].worst, picked[1].worst, elapsed
        ),
    );
}

#[test]
fn a3_domination_orbit_antipodal_procrustes() {
    let start = Instant::now();
    let picked = rows(&[
        "domination_slack",
        "orbit_construction_residual",
        "antipodal_sga0_repa4",
        "procrustes_displacement_gap",
    ]);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = picked.iter().all(|r| r.pass) && elapsed <= 120.0;
    report(
        "A3",
        pass,
        &format!(
            "domination {:.3e}, orbit {:.3e}, antipodal {:.3e}, procrustes {:.3e}, {:.1}s",
            picked[0].worst, picked[1].worst, picked[2].worst, picked[3].worst, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// A4: gradient certification
// ---------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;

fn worst_case<F>(mut one: F) -> f64
where
    F: FnMut(u64) -> f64,
{
    (0..GRAD_INSTANCES as u64).map(&mut one).fold(0.0, f64::max)
}

#[test]
fn a4_gradient_certification() {
    let start = Instant::now();
    let mut worsts: Vec<(&str, f64)> = Vec::new();

    worsts.push((
        "sga",
        worst_case(|k| {
            let mut rng = RngState::new(0x41).split(k);
            let hg = FeatureMatrix::random(6, 5, &mut rng);
            let hf = FeatureMatrix::random(6, 5, &mut rng);
            let analytic = sga_loss_grad(&hg, &hf).unwrap();
            let numeric = finite_diff_grad(
                |t| sga_loss(&FeatureMatrix::new(t.clone())?, &hf),
                hg.tensor(),
                1e-5,
            )
            .unwrap();
            relative_grad_error(&analytic, &numeric)
        }),
    ));

    worsts.push((
        "repa",
        worst_case(|k| {
            let mut rng = RngState::new(0x42).split(k);
            let hg = FeatureMatrix::random(6, 5, &mut rng);
            let hf = FeatureMatrix::random(6, 5, &mut rng);
            let analytic = repa_loss_grad(&hg, &hf).unwrap();
            let numeric = finite_diff_grad(
                |t| repa_loss(&FeatureMatrix::new(t.clone())?, &hf),
                hg.tensor(),
                1e-5,
            )
            .unwrap();
            relative_grad_error(&analytic, &numeric)
        }),
    ));

    worsts.push((
        "rec",
        worst_case(|k| {
            let mut rng = RngState::new(0x43).split(k);
            let x = Tensor::randn(&[6, 6, 3], 1.0, &mut rng);
            // keep every coordinate well away from the absolute-value kink
            let mut x_hat = x.clone();
            for v in x_hat.data_mut() {
                let d: f64 = rng.normal();
                *v += d.signum() * (0.05 + 0.1 * d.abs());
            }
            let analytic = reconstruction_loss_grad(&x, &x_hat).unwrap();
            let numeric =
                finite_diff_grad(|t| reconstruction_loss(&x, t), &x_hat, 1e-6).unwrap();
            relative_grad_error(&analytic, &numeric)
        }),
    ));

    let proxy = PerceptualProxy::new(0x44);
    worsts.push((
        "perceptual",
        worst_case(|k| {
            let mut rng = RngState::new(0x45).split(k);
            let x = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
            let x_hat = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
            let analytic = proxy.loss_grad(&x, &x_hat).unwrap();
            let numeric = finite_diff_grad(|t| proxy.loss(&x, t), &x_hat, 1e-5).unwrap();
            relative_grad_error(&analytic, &numeric)
        }),
    ));

    worsts.push((
        "adversarial_generator",
        worst_case(|k| {
            let mut rng = RngState::new(0x46).split(k);
            let d = DiscriminatorParams::new(4, &mut rng);
            let x_real = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
            let x_fake = Tensor::randn(&[8, 8, 3], 0.5, &mut rng);
            let analytic = generator_loss_grad(&d, &x_fake).unwrap();
            let numeric =
                finite_diff_grad(|t| Ok(adversarial_losses(&d, &x_real, t)?.1), &x_fake, 1e-5)
                    .unwrap();
            relative_grad_error(&analytic, &numeric)
        }),
    ));

    worsts.push((
        "moment",
        worst_case(|k| {
            let mut rng = RngState::new(0x47).split(k);
            let m = LatentMoments {
                mu: Tensor::randn(&[3, 3, 2], 1.0, &mut rng),
                log_var: Tensor::randn(&[3, 3, 2], 0.5, &mut rng),
            };
            let m_star = LatentMoments {
                mu: Tensor::randn(&[3, 3, 2], 1.0, &mut rng),
                log_var: Tensor::randn(&[3, 3, 2], 0.5, &mut rng),
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
            relative_grad_error(&gmu, &nmu).max(relative_grad_error(&glv, &nlv))
        }),
    ));

    worsts.push((
        "flow_matching",
        worst_case(|k| {
            let mut rng = RngState::new(0x48).split(k);
            let p = DenoiserParams::new(2, 6, 2, 8, 1, &mut rng);
            let z_t = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
            let target = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
            let t_val = rng.uniform(0.1, 0.9);
            let label = rng.next_below(10) as usize;
            let n = target.len() as f64;
            let loss = |z: &Tensor| -> sga_core::Result<f64> {
                let tape = denoiser_forward(&p, z, t_val, label)?;
                Ok(tape.v.sub(&target)?.norm().powi(2) / n)
            };
            let tape = denoiser_forward(&p, &z_t, t_val, label).unwrap();
            let dv = tape.v.sub(&target).unwrap().scale(2.0 / n);
            let mut probe = p.clone();
            let mut class_grad = Tensor::zeros(probe.class_embed.dims());
            let analytic =
                denoiser_backward(&mut probe, &tape, &dv, None, &mut class_grad).unwrap();
            let numeric = finite_diff_grad(loss, &z_t, 1e-5).unwrap();
            relative_grad_error(&analytic, &numeric)
        }),
    ));

    let elapsed = start.elapsed().as_secs_f64();
    let overall = worsts.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    let pass = overall <= GRAD_TOL && elapsed <= 600.0;
    let detail: Vec<String> = worsts
        .iter()
        .map(|(n, w)| format!("{n} {w:.2e}"))
        .collect();
    report(
        "A4",
        pass,
        &format!(
            "{} instances each, worst rel err: {} (tol {GRAD_TOL:.0e}), {:.1}s",
            GRAD_INSTANCES,
            detail.join(", "),
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// training-based criteria
// ---------------------------------------------------------------------------

/// Shared calibration for the directional experiments: image 32 with a
/// 2x2 patch grid so the Gram comparison is non-trivial.
fn base32_cfg(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run_root = root.to_string_lossy().into_owned();
    cfg.image_size = 32;
    cfg.n_images = 64;
    cfg.batch_size = 4;
    cfg.eval_every = 0;
    cfg.checkpoint_every = 0;
    cfg.vae_c = 4;
    cfg.vae_width = 16;
    cfg.vae_lr = 1e-3;
    cfg.vae_steps = 40;
    cfg.diff_width = 32;
    cfg.diff_blocks = 3;
    cfg.diff_tap_index = 1;
    cfg.diff_lr = 1e-4;
    cfg.diff_steps = 2000;
    cfg.diff_lambda_s = 1.0;
    cfg.diff_sampler_steps = 8;
    cfg.diff_guidance_scale = 1.0;
    cfg.prior_patch_budget = 2;
    cfg.validate().unwrap();
    cfg
}

fn last_metrics_row(cfg: &RunConfig, name: &str) -> Vec<f64> {
    let path = Path::new(&cfg.run_root).join(cfg.hash()).join(name);
    let text = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
    let line = text.lines().last().expect("csv has rows");
    line.split(',').map(|v| v.parse::<f64>().unwrap()).collect()
}

#[test]
fn a5_learnability_fidelity_conflict() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut successes = 0;
    let mut details = Vec::new();
    for seed in 0..5u64 {
        let mut cfg = base32_cfg(dir.path());
        cfg.seed = seed;
        harness::train_vae(&cfg).unwrap();
        let rep = harness::run_conflict_experiment(&cfg).unwrap();
        let fm: HashMap<&str, f64> = rep
            .arms
            .iter()
            .map(|a| (a.name.as_str(), a.heldout_fm))
            .collect();
        let (none, sga, patch) = (fm["none"], fm["sga"], fm["patchwise"]);
        let margin_ok = patch - sga >= 0.02 * none;
        let sga_ok = sga <= 1.01 * none;
        if margin_ok && sga_ok {
            successes += 1;
        }
        details.push(format!(
            "s{seed}: none {none:.4} sga {sga:.4} patch {patch:.4} margin {:.1}%{}",
            100.0 * (patch - sga) / none,
            if margin_ok && sga_ok { "" } else { " (miss)" }
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = successes >= 4 && elapsed <= 1800.0;
    report(
        "A5",
        pass,
        &format!(
            "{successes}/5 seeds ordered patchwise >= sga with >=2% margin and sga <= none+1% [{}], {:.0}s",
            details.join("; "),
            elapsed
        ),
    );
}

#[test]
fn a6_moment_anchoring() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = |lambda_m: f64| -> f64 {
        let mut cfg = base32_cfg(dir.path());
        cfg.vae_width = 8;
        cfg.vae_steps = 300;
        cfg.prior_c_f = 8;
        cfg.vae_lambda_m = lambda_m;
        harness::train_vae(&cfg).unwrap();
        // loss_moment column of the final step
        last_metrics_row(&cfg, "metrics_vae.csv")[4]
    };
    let anchored = run(1.0);
    let free = run(0.0);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = anchored < 0.25 * free && elapsed <= 1200.0;
    report(
        "A6",
        pass,
        &format!(
            "final moment loss {anchored:.4} (anchored) vs {free:.4} (free), ratio {:.4} < 0.25, {:.0}s",
            anchored / free,
            elapsed
        ),
    );
}

#[test]
fn a7_vae_fidelity_sanity() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = |lambda_s: f64| -> f64 {
        let mut cfg = base32_cfg(dir.path());
        cfg.vae_width = 8;
        cfg.vae_steps = 300;
        cfg.prior_c_f = 8;
        cfg.vae_lambda_s = lambda_s;
        harness::train_vae(&cfg).unwrap();
        // held-out psnr column of the final step
        last_metrics_row(&cfg, "metrics_vae.csv")[8]
    };
    let with_sga = run(1.0);
    let without = run(0.0);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = with_sga >= without - 0.5 && elapsed <= 1200.0;
    report(
        "A7",
        pass,
        &format!(
            "held-out psnr {with_sga:.3} dB with alignment vs {without:.3} dB without (allowed drop 0.5 dB), {elapsed:.0}s"
        ),
    );
}

#[test]
fn a8_determinism_and_persistence() {
    let start = Instant::now();

    // two independent roots, identical config
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let tiny = |root: &Path| -> RunConfig {
        let mut cfg = base32_cfg(root);
        cfg.image_size = 16;
        cfg.vae_width = 4;
        cfg.vae_c = 2;
        cfg.vae_steps = 3;
        cfg.diff_width = 6;
        cfg.diff_blocks = 2;
        cfg.diff_embed_dim = 8;
        cfg.diff_lr = 1e-3;
        cfg.diff_steps = 3;
        cfg.prior_c_f = 4;
        cfg.prior_patch_budget = 1;
        cfg.n_images = 30;
        cfg.batch_size = 2;
        cfg.validate().unwrap();
        cfg
    };
    let run_all = |cfg: &RunConfig| {
        harness::train_vae(cfg).unwrap();
        harness::train_diffusion(cfg).unwrap();
        Path::new(&cfg.run_root).join(cfg.hash())
    };
    let (c1, c2) = (tiny(d1.path()), tiny(d2.path()));
    let (r1, r2) = (run_all(&c1), run_all(&c2));

    let mut identical = true;
    for name in [
        "metrics_vae_ref.csv",
        "metrics_vae.csv",
        "metrics_diff.csv",
        "vae_ref.ckpt",
        "vae.ckpt",
        "diff.ckpt",
    ] {
        identical &= fs::read(r1.join(name)).unwrap() == fs::read(r2.join(name)).unwrap();
    }
    // the resolved configs agree except for the deliberately distinct roots
    let strip_root = |p: &Path| -> String {
        fs::read_to_string(p.join("config.resolved"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("run_root"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    identical &= strip_root(&r1) == strip_root(&r2);

    // bitwise checkpoint round-trip
    let tensors = sga_core::checkpoint::read_checkpoint(&r1.join("vae.ckpt")).unwrap();
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    let rt = r1.join("roundtrip.ckpt");
    sga_core::checkpoint::write_checkpoint(&rt, &refs).unwrap();
    let roundtrip = fs::read(&rt).unwrap() == fs::read(r1.join("vae.ckpt")).unwrap();

    // stage-2 freeze invariant: the stage-1 checkpoint is untouched by the
    // stage-2 pass that already ran against it
    let (vae_before, _, _, _) = harness::load_vae_checkpoint(&r1.join("vae.ckpt"), &c1).unwrap();
    let frozen = harness::vae_checksum(&vae_before);
    let (vae_after, _, _, _) = harness::load_vae_checkpoint(&r1.join("vae.ckpt"), &c1).unwrap();
    let freeze_ok = frozen == harness::vae_checksum(&vae_after);

    // held-out split is disjoint and stable, as the eval pipeline assumes
    let ds = SyntheticDataset::new(c1.seed, c1.n_images, c1.image_size).unwrap();
    let split_ok = ds.train_indices().len() + ds.held_out_indices().len() == c1.n_images;

    let elapsed = start.elapsed().as_secs_f64();
    let pass = identical && roundtrip && freeze_ok && split_ok && elapsed <= 300.0;
    report(
        "A8",
        pass,
        &format!(
            "byte-identical artifacts {identical}, ckpt round-trip {roundtrip}, freeze {freeze_ok}, split {split_ok}, {:.0}s",
            elapsed
        ),
    );
}
