//! Composite training loop: the ordered per-batch update schedule, the
//! uniform prior, per-group Adam state, metrics and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, RngState};
use crate::config::{parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::model::{ArchitectureConfig, Group, Model};
use crate::nn::BnMode;
use crate::optim::{Adam, AdamConfig};
use crate::pass::{self, Pass};
use crate::projection::idempotency_residual;
use crate::real::Real;

/// Images used for the per-epoch latent-orthogonality probe.
pub const PROBE_SIZE: usize = 16;
/// Stream id separating the trainer's generator from the initializer's.
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub adv1: f64,
    pub adv2: f64,
    pub diff: f64,
    pub proj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            adv1: 1.0,
            adv2: 1.0,
            diff: 1.0,
            proj: 1.0,
        }
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half cosine from 1 at the first epoch toward 0 after the last.
    Cosine,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        }
    }

    /// Multiplier for 0-based epoch `e` of `total`.
    pub fn factor(self, e: usize, total: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * e as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("lr_schedule must be constant or cosine, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_proj: f64,
    pub lr_image_disc: f64,
    pub lr_latent_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_schedule: LrSchedule,
    pub weights: LossWeights,
    pub seed: u64,
    pub non_saturating_g: bool,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    pub deterministic: bool,
    /// Test hook: force the named loss to NaN on the first step.
    pub inject_nan: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            lr_encoder: 1e-4,
            lr_decoder: 1e-4,
            lr_proj: 1e-4,
            lr_image_disc: 1e-4,
            lr_latent_disc: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            lr_schedule: LrSchedule::Constant,
            weights: LossWeights::default(),
            seed: 0,
            non_saturating_g: false,
            checkpoint_every: 0,
            grad_clip: None,
            deterministic: false,
            inject_nan: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("lr_proj", self.lr_proj),
            ("lr_image_disc", self.lr_image_disc),
            ("lr_latent_disc", self.lr_latent_disc),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        let w = &self.weights;
        for (name, v) in [
            ("weight_rec", w.rec),
            ("weight_adv1", w.adv1),
            ("weight_adv2", w.adv2),
            ("weight_diff", w.diff),
            ("weight_proj", w.proj),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn lr(&self, group: Group) -> f64 {
        match group {
            Group::Encoder => self.lr_encoder,
            Group::Decoder => self.lr_decoder,
            Group::ImageDisc => self.lr_image_disc,
            Group::LatentDisc => self.lr_latent_disc,
            Group::Projection => self.lr_proj,
        }
    }
}

impl KeyValue for TrainConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.weights;
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_encoder", self.lr_encoder.to_string()),
            ("lr_decoder", self.lr_decoder.to_string()),
            ("lr_proj", self.lr_proj.to_string()),
            ("lr_image_disc", self.lr_image_disc.to_string()),
            ("lr_latent_disc", self.lr_latent_disc.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("lr_schedule", self.lr_schedule.as_str().into()),
            ("weight_rec", w.rec.to_string()),
            ("weight_adv1", w.adv1.to_string()),
            ("weight_adv2", w.adv2.to_string()),
            ("weight_diff", w.diff.to_string()),
            ("weight_proj", w.proj.to_string()),
            ("seed", self.seed.to_string()),
            ("non_saturating_g", self.non_saturating_g.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            (
                "grad_clip",
                self.grad_clip.map_or_else(|| "none".into(), |c| c.to_string()),
            ),
            ("inject_nan", self.inject_nan.clone().unwrap_or_else(|| "none".into())),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => {
                let lr: f64 = parse_value(key, value)?;
                self.lr_encoder = lr;
                self.lr_decoder = lr;
                self.lr_proj = lr;
                self.lr_image_disc = lr;
                self.lr_latent_disc = lr;
            }
            "lr_encoder" => self.lr_encoder = parse_value(key, value)?,
            "lr_decoder" => self.lr_decoder = parse_value(key, value)?,
            "lr_proj" => self.lr_proj = parse_value(key, value)?,
            "lr_image_disc" => self.lr_image_disc = parse_value(key, value)?,
            "lr_latent_disc" => self.lr_latent_disc = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "weight_rec" => self.weights.rec = parse_value(key, value)?,
            "weight_adv1" => self.weights.adv1 = parse_value(key, value)?,
            "weight_adv2" => self.weights.adv2 = parse_value(key, value)?,
            "weight_diff" => self.weights.diff = parse_value(key, value)?,
            "weight_proj" => self.weights.proj = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "non_saturating_g" => self.non_saturating_g = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "none" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "inject_nan" => {
                self.inject_nan = match value {
                    "none" | "" => None,
                    v => Some(v.to_string()),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// The six sub-steps of one training step, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubStep {
    Rec,
    Adv1D,
    Adv1G,
    Adv2D,
    Adv2E,
    ProjDiff,
}

impl SubStep {
    pub const ORDER: [SubStep; 6] = [
        SubStep::Rec,
        SubStep::Adv1D,
        SubStep::Adv1G,
        SubStep::Adv2D,
        SubStep::Adv2E,
        SubStep::ProjDiff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SubStep::Rec => "rec",
            SubStep::Adv1D => "adv1_d",
            SubStep::Adv1G => "adv1_g",
            SubStep::Adv2D => "adv2_d",
            SubStep::Adv2E => "adv2_e",
            SubStep::ProjDiff => "proj+diff",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubStepEvent {
    pub epoch: usize,
    pub step: usize,
    pub sub: SubStep,
    /// L2 norm of each group's parameter change, indexed like [`Group::ALL`].
    /// Only filled when the hook asks for it.
    pub deltas: Option<[f64; 5]>,
}

pub trait StepHook {
    fn wants_deltas(&self) -> bool {
        false
    }
    fn on_substep(&mut self, event: &SubStepEvent);
}

/// Hook that ignores everything.
pub struct NoHook;

impl StepHook for NoHook {
    fn on_substep(&mut self, _: &SubStepEvent) {}
}

/// Hook that keeps every event.
#[derive(Clone, Debug, Default)]
pub struct SubStepRecorder {
    pub with_deltas: bool,
    pub events: Vec<SubStepEvent>,
}

impl StepHook for SubStepRecorder {
    fn wants_deltas(&self) -> bool {
        self.with_deltas
    }

    fn on_substep(&mut self, event: &SubStepEvent) {
        self.events.push(event.clone());
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub idempotency_p1: f64,
    pub idempotency_p2: f64,
    pub latent_orthogonality: f64,
    pub wall_seconds: f64,
}

/// `batch x dim` samples from `U[0, 1]`.
pub fn sample_uniform_prior<T: Real, R: Rng>(batch: usize, dim: usize, rng: &mut R) -> Vec<T> {
    (0..batch * dim).map(|_| T::lit(rng.random::<f64>())).collect()
}

/// Training state: model, optimizers, generator and progress counter.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizers: Vec<Adam<T>>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
    step_in_epoch: usize,
}

fn l2_delta<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn scale<T: Real>(g: &mut [T], w: f64) {
    if w != 1.0 {
        let w = T::lit(w);
        g.iter_mut().for_each(|v| *v *= w);
    }
}

impl<T: Real> Trainer<T> {
    pub fn new(arch: &ArchitectureConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(arch, config.seed)?;
        let optimizers = Group::ALL
            .iter()
            .map(|&g| {
                let cfg = AdamConfig {
                    lr: config.lr(g),
                    beta1: config.beta1,
                    beta2: config.beta2,
                    ..Default::default()
                };
                Adam::new(cfg, model.params(g).len())
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            model,
            optimizers,
            config,
            epoch: 0,
            rng,
            step_in_epoch: 0,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optimizers: self.optimizers.clone(),
            epoch: self.epoch,
            config: self.config.clone(),
            rng: self.rng_state(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.config.validate()?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        Ok(Self {
            model: ckpt.model,
            optimizers: ckpt.optimizers,
            config: ckpt.config,
            epoch: ckpt.epoch,
            rng,
            step_in_epoch: 0,
        })
    }

    fn snapshot(&self, on: bool) -> Option<Vec<Vec<T>>> {
        on.then(|| Group::ALL.iter().map(|&g| self.model.params(g).data().to_vec()).collect())
    }

    fn emit(&self, hook: &mut dyn StepHook, sub: SubStep, before: Option<Vec<Vec<T>>>) {
        let deltas = before.map(|snap| {
            let mut d = [0.0; 5];
            for (i, &g) in Group::ALL.iter().enumerate() {
                d[i] = l2_delta(&snap[i], self.model.params(g).data());
            }
            d
        });
        hook.on_substep(&SubStepEvent {
            epoch: self.epoch + 1,
            step: self.step_in_epoch,
            sub,
            deltas,
        });
    }

    fn apply(&mut self, group: Group, mut grad: Vec<T>, weight: f64) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        scale(&mut grad, weight);
        let idx = group as usize;
        let clip = self.config.grad_clip;
        self.optimizers[idx].update(self.model.params_mut(group).data_mut(), &grad, clip)
    }

    fn poison(&self, name: &str, v: T) -> T {
        match &self.config.inject_nan {
            Some(n) if n == name && self.epoch == 0 && self.step_in_epoch == 0 => T::nan(),
            _ => v,
        }
    }

    /// One full ordered update on a batch of `batch` images.
    pub fn train_step(
        &mut self,
        x: &[T],
        batch: usize,
        hook: &mut dyn StepHook,
    ) -> Result<LossBundle> {
        let w = self.config.weights;
        let track = hook.wants_deltas();
        let mut out = LossBundle::default();

        // rec: E, G, P1, P2
        let before = self.snapshot(track);
        let p = Pass::run(&self.model, x, batch)?;
        let (l, g) = pass::rec_step(&self.model, &p, x)?;
        out.l_rec = self.poison("l_rec", l).as_f64();
        self.check(&out)?;
        self.model.encoder.commit_running_stats(&p.enc);
        self.model.decoder.commit_running_stats(&p.dec);
        drop(p);
        self.apply(Group::Encoder, g.encoder.expect("requested"), w.rec)?;
        self.apply(Group::Decoder, g.decoder.expect("requested"), w.rec)?;
        self.apply(Group::Projection, g.projection.expect("requested"), w.rec)?;
        self.emit(hook, SubStep::Rec, before);

        // adv1: D1, then G. E, G, P are unchanged between the halves, so the
        // forward pass is shared.
        let before = self.snapshot(track);
        let p = Pass::run(&self.model, x, batch)?;
        let fake = p.recon();
        let (l, g) = pass::adv1_d_step(&self.model, x, &fake, batch)?;
        out.l_adv1_d = self.poison("l_adv1_d", l).as_f64();
        self.check(&out)?;
        self.apply(Group::ImageDisc, g, w.adv1)?;
        self.emit(hook, SubStep::Adv1D, before);

        let before = self.snapshot(track);
        let (l, g) = pass::adv1_g_step(&self.model, &p, self.config.non_saturating_g)?;
        out.l_adv1_g = self.poison("l_adv1_g", l).as_f64();
        self.check(&out)?;
        self.apply(Group::Decoder, g, w.adv1)?;
        self.emit(hook, SubStep::Adv1G, before);
        let enc = p.enc;

        // adv2: D2, then E. The encoder tape above is still current.
        let before = self.snapshot(track);
        let dim = self.model.arch.latent_dim;
        let u: Vec<T> = sample_uniform_prior(batch, dim, &mut self.rng);
        let (l, g) = pass::adv2_d_step(&self.model, enc.output(), &u, batch)?;
        out.l_adv2_d = self.poison("l_adv2_d", l).as_f64();
        self.check(&out)?;
        self.apply(Group::LatentDisc, g, w.adv2)?;
        self.emit(hook, SubStep::Adv2D, before);

        let before = self.snapshot(track);
        let (l, g) = pass::adv2_e_step(&self.model, &enc)?;
        out.l_adv2_e = self.poison("l_adv2_e", l).as_f64();
        self.check(&out)?;
        self.apply(Group::Encoder, g, w.adv2)?;
        self.emit(hook, SubStep::Adv2E, before);
        drop(enc);

        // proj + diff: P1, P2 only.
        let before = self.snapshot(track);
        let p = Pass::run(&self.model, x, batch)?;
        let (l, mut g) = pass::diff_step(&self.model, &p)?;
        drop(p);
        out.l_diff = self.poison("l_diff", l).as_f64();
        let (lp, gp) = self.model.projection.proj_loss_grad();
        out.l_proj = self.poison("l_proj", lp).as_f64();
        self.check(&out)?;
        let (wd, wp) = (T::lit(w.diff), T::lit(w.proj));
        for (a, &b) in g.iter_mut().zip(&gp) {
            *a = wd * *a + wp * b;
        }
        if w.diff != 0.0 || w.proj != 0.0 {
            self.apply(Group::Projection, g, 1.0)?;
        }
        self.emit(hook, SubStep::ProjDiff, before);

        self.step_in_epoch += 1;
        Ok(out)
    }

    fn check(&self, b: &LossBundle) -> Result<()> {
        match b.first_non_finite() {
            Some(loss) => Err(Error::Divergence {
                loss: loss.into(),
                epoch: self.epoch + 1,
            }),
            None => Ok(()),
        }
    }

    /// One pass over `images` (`count` patches) in a freshly shuffled order.
    pub fn train_epoch(
        &mut self,
        images: &[T],
        count: usize,
        hook: &mut dyn StepHook,
    ) -> Result<MetricsRecord> {
        let start = Instant::now();
        let px = self.model.arch.pixels();
        if count == 0 || images.len() != count * px {
            return Err(Error::Shape(format!(
                "expected {count} images of {px} pixels, got {} values",
                images.len()
            )));
        }
        let f = self.config.lr_schedule.factor(self.epoch, self.config.epochs);
        for (opt, &g) in self.optimizers.iter_mut().zip(Group::ALL.iter()) {
            opt.config.lr = self.config.lr(g) * f;
        }
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut self.rng);
        self.step_in_epoch = 0;
        let mut sum = LossBundle::default();
        let mut steps = 0usize;
        let mut x = Vec::with_capacity(self.config.batch_size * px);
        for chunk in order.chunks(self.config.batch_size) {
            x.clear();
            for &i in chunk {
                x.extend_from_slice(&images[i * px..(i + 1) * px]);
            }
            let b = self.train_step(&x, chunk.len(), hook)?;
            sum.accumulate(&b);
            steps += 1;
        }
        self.epoch += 1;
        let probe = count.min(PROBE_SIZE);
        let z = self.model.encode(&images[..probe * px], probe, BnMode::Eval)?;
        let orth = self.model.projection.mean_latent_orthogonality(&z, probe)?;
        let n = self.model.arch.latent_dim;
        Ok(MetricsRecord {
            epoch: self.epoch,
            losses: sum.scaled(1.0 / steps as f64),
            idempotency_p1: idempotency_residual(self.model.projection.p1(), n)?.as_f64(),
            idempotency_p2: idempotency_residual(self.model.projection.p2(), n)?.as_f64(),
            latent_orthogonality: orth.as_f64(),
            wall_seconds: if self.config.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
        })
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.lfa";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.lfa"))
}

/// Read every record of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Decode {
            path: path.into(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Run the remaining epochs. With `out_dir`, each record is appended to
/// `metrics.jsonl` as soon as it exists, periodic checkpoints are written,
/// and the final state lands in `checkpoint_final.lfa`.
pub fn train<T: Real>(
    trainer: &mut Trainer<T>,
    images: &[T],
    count: usize,
    out_dir: Option<&Path>,
    hook: &mut dyn StepHook,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let mut records = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let rec = trainer.train_epoch(images, count, hook)?;
        on_epoch(&rec);
        if let Some((path, f)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&rec).expect("metrics serialize");
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(&*path, e))?;
        }
        records.push(rec);
        if let Some(dir) = out_dir {
            let every = trainer.config.checkpoint_every;
            if every > 0 && trainer.epoch % every == 0 && trainer.epoch < trainer.config.epochs {
                checkpoint::save(&trainer.checkpoint(), &checkpoint_path(dir, trainer.epoch))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&trainer.checkpoint(), &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_images(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * 64).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn toy_trainer(cfg: TrainConfig) -> Trainer<f64> {
        Trainer::new(&ArchitectureConfig::toy(), cfg).unwrap()
    }

    #[test]
    fn cosine_schedule_values_and_epoch_rates() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.factor(0, 10), 1.0);
        assert!((c.factor(5, 10) - 0.5).abs() < 1e-15);
        assert!(c.factor(9, 10) > 0.0);
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
        assert_eq!("cosine".parse::<LrSchedule>().unwrap(), c);
        assert!("step".parse::<LrSchedule>().is_err());

        let mut t = toy_trainer(TrainConfig {
            epochs: 4,
            batch_size: 4,
            lr_schedule: c,
            lr_proj: 1e-2,
            ..Default::default()
        });
        let x = toy_images(4, 1);
        t.train_epoch(&x, 4, &mut NoHook).unwrap();
        t.train_epoch(&x, 4, &mut NoHook).unwrap();
        let p = Group::Projection as usize;
        assert!((t.optimizers[p].config.lr - 1e-2 * 0.5 * (1.0 + (std::f64::consts::PI / 4.0).cos())).abs() < 1e-15);
        assert!((t.optimizers[0].config.lr - 1e-4 * c.factor(1, 4)).abs() < 1e-18);
    }

    #[test]
    fn prior_support_mean_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = sample_uniform_prior(10, 1000, &mut rng);
        assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let big: Vec<f64> = sample_uniform_prior(100, 1000, &mut rng);
        let mean = big.iter().sum::<f64>() / big.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        let a: Vec<f32> = sample_uniform_prior(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let b: Vec<f32> = sample_uniform_prior(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn step_runs_subs_in_order_and_touches_every_group() {
        let mut t = toy_trainer(TrainConfig::default());
        let x = toy_images(4, 1);
        let mut rec = SubStepRecorder {
            with_deltas: true,
            ..Default::default()
        };
        let before: Vec<f64> = Group::ALL.iter().map(|&g| t.model.params(g).norm()).collect();
        t.train_step(&x, 4, &mut rec).unwrap();
        let seq: Vec<SubStep> = rec.events.iter().map(|e| e.sub).collect();
        assert_eq!(seq, SubStep::ORDER);
        for (i, &g) in Group::ALL.iter().enumerate() {
            assert_ne!(t.model.params(g).norm(), before[i], "{g:?} unchanged");
        }
        let last = rec.events.last().unwrap().deltas.unwrap();
        for g in [Group::Encoder, Group::Decoder, Group::ImageDisc, Group::LatentDisc] {
            assert_eq!(last[g as usize], 0.0);
        }
        assert!(last[Group::Projection as usize] > 0.0);
    }

    #[test]
    fn plain_autoencoder_reduces_reconstruction_loss() {
        let mut cfg = TrainConfig {
            weights: LossWeights {
                rec: 1.0,
                adv1: 0.0,
                adv2: 0.0,
                diff: 0.0,
                proj: 0.0,
            },
            ..Default::default()
        };
        cfg.set("lr", "1e-3").unwrap();
        let mut t = toy_trainer(cfg);
        let x = toy_images(16, 2);
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let b = t.train_step(&x, 16, &mut NoHook).unwrap();
            assert!(b.l_rec < prev, "{} !< {prev}", b.l_rec);
            prev = b.l_rec;
        }
    }

    #[test]
    fn one_epoch_of_sixteen_with_batch_eight_is_two_steps() {
        let mut t = toy_trainer(TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        });
        let x = toy_images(16, 3);
        let mut rec = SubStepRecorder::default();
        let m = train(&mut t, &x, 16, None, &mut rec, |_| {}).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(rec.events.len(), 2 * 6);
        assert_eq!(m[0].epoch, 1);
    }

    #[test]
    fn injected_nan_aborts_with_loss_name() {
        let mut t = toy_trainer(TrainConfig {
            inject_nan: Some("l_adv2_d".into()),
            ..Default::default()
        });
        let err = t.train_step(&toy_images(2, 4), 2, &mut NoHook).unwrap_err();
        assert!(matches!(err, Error::Divergence { ref loss, epoch: 1 } if loss == "l_adv2_d"));
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let mut a = TrainConfig::default();
        a.set("lr_proj", "0.001").unwrap();
        a.set("grad_clip", "5").unwrap();
        a.set("non_saturating_g", "true").unwrap();
        let mut b = TrainConfig::default();
        for (k, v) in a.entries() {
            assert!(b.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(a, b);
        assert!(!b.set("nope", "1").unwrap());
        assert!(matches!(b.set("epochs", "x"), Err(Error::Config(_))));
        assert!(TrainConfig { epochs: 0, ..a.clone() }.validate().is_err());
        assert!(TrainConfig { lr_decoder: 0.0, ..a }.validate().is_err());
    }
}
