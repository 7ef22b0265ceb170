//! Central finite-difference check of every objective's analytic gradient
//! with respect to each parameter group it updates.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::losses;
use crate::model::{ArchitectureConfig, Group, Model};
use crate::nn::{BnMode, Sequential, Tape};
use crate::pass::{self, Pass};
use crate::trainer::sample_uniform_prior;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub fd_step: f64,
    pub batch: usize,
    pub tolerance: f64,
    /// Entries whose gradient is below this fraction of the group's largest
    /// entry are compared against that floor instead of their own size.
    pub relative_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fd_step: 1e-3,
            batch: 4,
            tolerance: 1e-4,
            relative_floor: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub loss: &'static str,
    pub group: Group,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
    /// Entries whose `±h` probe would have moved some unit across a kink.
    pub kinked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub fd_step: f64,
    pub tolerance: f64,
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn failing(&self) -> Vec<&GradRow> {
        self.rows.iter().filter(|r| !self.row_ok(r)).collect()
    }

    fn row_ok(&self, r: &GradRow) -> bool {
        r.max_rel_err < self.tolerance
    }

    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:<12} {:>8} {:>8} {:>14}  status  (fd step {:e}, tolerance {:e})",
            "loss", "group", "entries", "kinked", "max rel err", self.fd_step, self.tolerance
        )?;
        for r in &self.rows {
            let ok = if self.row_ok(r) { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<6} {:<12} {:>8} {:>8} {:>14.3e}  {ok}",
                r.loss,
                r.group.name(),
                r.entries,
                r.kinked,
                r.max_rel_err
            )?;
        }
        Ok(())
    }
}

/// Loss value and the piece signature of every non-smooth unit it went
/// through. Given a signature, the loss is evaluated with every unit held on
/// that piece instead.
type Eval<'a> = dyn Fn(&Model<f64>, Option<&[u8]>) -> Result<(f64, Vec<u8>)> + 'a;
type Grad<'a> = dyn Fn(&Model<f64>) -> Result<Vec<f64>> + 'a;

/// Central differences of `eval` on the base point's pieces. Returns the
/// worst relative error, its index, the entry count and how many probes
/// would have crossed a kink had the pieces not been held.
fn check_group(
    cfg: &GradcheckConfig,
    model: &Model<f64>,
    group: Group,
    eval: &Eval,
    grad: &Grad,
) -> Result<(f64, usize, usize, usize)> {
    let analytic = grad(model)?;
    let (_, base) = eval(model, None)?;
    let n = analytic.len();
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (cfg.relative_floor * scale).max(1e-12);
    let mut probe = model.clone();
    let (mut worst, mut at, mut kinked) = (0.0f64, 0usize, 0usize);
    for i in 0..n {
        let orig = probe.params(group).data()[i];
        probe.params_mut(group).data_mut()[i] = orig + cfg.fd_step;
        let (lp, rp) = eval(&probe, Some(&base))?;
        probe.params_mut(group).data_mut()[i] = orig - cfg.fd_step;
        let (lm, rm) = eval(&probe, Some(&base))?;
        probe.params_mut(group).data_mut()[i] = orig;
        if rp != base || rm != base {
            kinked += 1;
        }
        let fd = (lp - lm) / (2.0 * cfg.fd_step);
        let a = analytic[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        if !(err <= worst) {
            worst = err;
            at = i;
        }
    }
    Ok((worst, at, n, kinked))
}

/// Forward through `net`, on the pieces at the front of `pieces` if given.
fn forward(
    net: &Sequential<f64>,
    input: &[f64],
    batch: usize,
    pieces: &mut Option<&[u8]>,
    regions: &mut Vec<u8>,
) -> Result<Tape<f64>> {
    let tape = match pieces {
        Some(p) => net.forward_on_pieces(input, batch, BnMode::Train, p)?,
        None => net.forward(input, batch, BnMode::Train)?,
    };
    regions.extend(net.regions(&tape));
    Ok(tape)
}

/// Redraw every parameter at a scale where a `1e-3` step is a small
/// perturbation: weights `N(0, 1/fan)`, biases and batch-norm shifts
/// `N(0, 0.1)`, batch-norm scales `1 + N(0, 0.1)`, projections
/// `I/2 + N(0, 1/dim)` drawn independently.
pub fn randomize(model: &mut Model<f64>, rng: &mut ChaCha8Rng) {
    let small = Normal::new(0.0, 0.1).expect("positive std");
    for g in Group::ALL {
        let block = model.params_mut(g);
        for e in block.entries().to_vec() {
            let fan = (e.shape.iter().product::<usize>() / e.shape[0].max(1)).max(1);
            let wide = Normal::new(0.0, 1.0 / (fan as f64).sqrt()).expect("positive std");
            let square = e.shape.len() == 2 && e.shape[0] == e.shape[1] && g == Group::Projection;
            let n = e.shape.get(1).copied().unwrap_or(1);
            for (k, v) in block.get_mut(e.slot).iter_mut().enumerate() {
                *v = if square {
                    let diag = if k / n == k % n { 0.5 } else { 0.0 };
                    diag + wide.sample(rng)
                } else if e.name.ends_with("weight") && e.shape.len() > 1 {
                    wide.sample(rng)
                } else if e.name.ends_with("gamma") {
                    1.0 + small.sample(rng)
                } else {
                    small.sample(rng)
                };
            }
        }
    }
}

/// Check all objectives on the toy architecture (8x8 patches, latent 16).
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradReport> {
    gradcheck_with(&ArchitectureConfig::toy(), cfg)
}

pub fn gradcheck_with(arch: &ArchitectureConfig, cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut model: Model<f64> = Model::init(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    randomize(&mut model, &mut rng);
    let b = cfg.batch;
    let x: Vec<f64> = (0..b * arch.pixels()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u: Vec<f64> = sample_uniform_prior(b, arch.latent_dim, &mut rng);
    let x = &x;
    let u = &u;

    // Every evaluator threads an optional piece cursor through the
    // networks in a fixed order and collects the regions it passed through.
    let run = |m: &Model<f64>, pieces: &mut Option<&[u8]>, r: &mut Vec<u8>| -> Result<Pass<f64>> {
        let enc = forward(&m.encoder, x, b, pieces, r)?;
        let (mut zz, z2) = m.projection.project(enc.output(), b)?;
        zz.extend_from_slice(&z2);
        let dec = forward(&m.decoder, &zz, 2 * b, pieces, r)?;
        Ok(Pass { batch: b, enc, dec })
    };
    let disc = |net: &Sequential<f64>, input: &[f64], pieces: &mut Option<&[u8]>, r: &mut Vec<u8>| {
        Ok::<_, crate::Error>(forward(net, input, b, pieces, r)?.output().to_vec())
    };
    let mut rows = Vec::new();
    let mut push = |loss: &'static str, group: Group, eval: &Eval, grad: &Grad| -> Result<()> {
        let (max_rel_err, worst_entry, entries, kinked) = check_group(cfg, &model, group, eval, grad)?;
        rows.push(GradRow {
            loss,
            group,
            entries,
            max_rel_err,
            worst_entry,
            kinked,
        });
        Ok(())
    };

    let rec_eval = |m: &Model<f64>, mut p: Option<&[u8]>| {
        let mut r = Vec::new();
        let y = run(m, &mut p, &mut r)?.recon();
        Ok((losses::rec_loss(x, &y)?, r))
    };
    let rec_grad = |m: &Model<f64>| pass::rec_step(m, &Pass::run(m, x, b)?, x);
    push("rec", Group::Encoder, &rec_eval, &|m| Ok(rec_grad(m)?.1.encoder.unwrap()))?;
    push("rec", Group::Decoder, &rec_eval, &|m| Ok(rec_grad(m)?.1.decoder.unwrap()))?;
    push("rec", Group::Projection, &rec_eval, &|m| Ok(rec_grad(m)?.1.projection.unwrap()))?;

    let fake = Pass::run(&model, x, b)?.recon();
    let fake = &fake;
    push(
        "adv1",
        Group::ImageDisc,
        &|m, mut p| {
            let mut r = Vec::new();
            let real = disc(&m.image_disc, x, &mut p, &mut r)?;
            let gen = disc(&m.image_disc, fake, &mut p, &mut r)?;
            Ok((losses::adv1_discriminator_loss(&real, &gen), r))
        },
        &|m| Ok(pass::adv1_d_step(m, x, fake, b)?.1),
    )?;
    push(
        "adv1",
        Group::Decoder,
        &|m, mut p| {
            let mut r = Vec::new();
            let y = run(m, &mut p, &mut r)?.recon();
            let d = disc(&m.image_disc, &y, &mut p, &mut r)?;
            Ok((losses::adv1_generator_loss(&d), r))
        },
        &|m| Ok(pass::adv1_g_step(m, &Pass::run(m, x, b)?, false)?.1),
    )?;

    let z = model.encoder.infer(x, b, BnMode::Train)?;
    let z = &z;
    push(
        "adv2",
        Group::LatentDisc,
        &|m, mut p| {
            let mut r = Vec::new();
            let dz = disc(&m.latent_disc, z, &mut p, &mut r)?;
            let du = disc(&m.latent_disc, u, &mut p, &mut r)?;
            Ok((losses::adv2_discriminator_loss(&dz, &du), r))
        },
        &|m| Ok(pass::adv2_d_step(m, z, u, b)?.1),
    )?;
    push(
        "adv2",
        Group::Encoder,
        &|m, mut p| {
            let mut r = Vec::new();
            let z = disc(&m.encoder, x, &mut p, &mut r)?;
            let d = disc(&m.latent_disc, &z, &mut p, &mut r)?;
            Ok((losses::adv2_encoder_loss(&d), r))
        },
        &|m| Ok(pass::adv2_e_step(m, &m.encoder.forward(x, b, BnMode::Train)?)?.1),
    )?;

    push(
        "diff",
        Group::Projection,
        &|m, mut p| {
            let mut r = Vec::new();
            let pass = run(m, &mut p, &mut r)?;
            let (y1, y2) = (pass.y1(), pass.y2());
            let signs: Vec<u8> = y1.iter().zip(y2).map(|(a, c)| 2 * u8::from(a > c) + u8::from(a < c)).collect();
            let loss = match p {
                // |Y1 - Y2| held on the base point's sign pattern.
                Some(held) => {
                    let total: f64 = y1
                        .iter()
                        .zip(y2)
                        .zip(held)
                        .map(|((a, c), s)| match s {
                            2 => a - c,
                            1 => c - a,
                            _ => 0.0,
                        })
                        .sum();
                    -total * b as f64 / y1.len() as f64
                }
                None => losses::diff_loss(y1, y2, b)?,
            };
            r.extend(signs);
            Ok((loss, r))
        },
        &|m| Ok(pass::diff_step(m, &Pass::run(m, x, b)?)?.1),
    )?;
    push(
        "proj",
        Group::Projection,
        &|m, _| Ok((m.projection.proj_loss(), Vec::new())),
        &|m| Ok(m.projection.proj_loss_grad().1),
    )?;

    Ok(GradReport {
        fd_step: cfg.fd_step,
        tolerance: cfg.tolerance,
        rows,
    })
}
