use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lfa_core::annotator::{self, Annotation};
use lfa_core::attrib::{self, TraceAxis, HILBERT_CONVENTION};
use lfa_core::checkpoint;
use lfa_core::config::RunConfig;
use lfa_core::data::{self, DatasetManifest, Sample};
use lfa_core::gradcheck::{self, GradcheckConfig};
use lfa_core::trainer::{self, NoHook, Trainer};
use lfa_core::{DType, Error, Real};

#[derive(Parser)]
#[command(name = "lfa", version, about = "Self-supervised structure annotation by latent factorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled synthetic patch set (images, masks, manifest).
    GenerateData(Common),
    /// Train on the images listed in a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Confidence maps, masks and panels for every manifest image.
    Annotate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Side-by-side confidence and instantaneous-attribute panels.
    CompareBaseline {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// rows or columns
        #[arg(long, default_value = "columns")]
        trace_axis: String,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every analytic gradient on toy sizes.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        fd_step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct Common {
    /// key = value file applied before the overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` (several values are joined with commas,
    /// a bare flag means true).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Divergence { .. }) => 3,
            _ => 2,
        };
        Self { code, error }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> std::result::Result<u8, Failure> {
    match cli.command {
        Command::GenerateData(c) => generate(&resolve(&c)?)?,
        Command::Train {
            manifest,
            resume,
            common,
        } => train(&resolve(&common)?, &manifest, resume.as_deref())?,
        Command::Annotate {
            checkpoint,
            manifest,
            common,
        } => annotate(&resolve(&common)?, &checkpoint, &manifest)?,
        Command::CompareBaseline {
            checkpoint,
            manifest,
            trace_axis,
            common,
        } => compare(&resolve(&common)?, &checkpoint, &manifest, trace_axis.parse()?)?,
        Command::Gradcheck {
            fd_step,
            seed,
            tolerance,
        } => return Ok(run_gradcheck(fd_step, seed, tolerance)?),
    }
    Ok(0)
}

/// Split `--key v1 v2 --flag` into `(key, "v1,v2")` and `(flag, "true")`.
fn override_pairs(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for a in args {
        if let Some(key) = a.strip_prefix("--") {
            let (k, v) = match key.split_once('=') {
                Some((k, v)) => (k, vec![v.to_string()]),
                None => (key, Vec::new()),
            };
            if k.is_empty() {
                bail!("empty option name");
            }
            out.push((k.to_string(), v));
        } else {
            let last = out.last_mut().ok_or_else(|| anyhow!("value `{a}` does not follow an option"))?;
            last.1.push(a.clone());
        }
    }
    Ok(out
        .into_iter()
        .map(|(k, v)| {
            let v = if v.is_empty() { "true".into() } else { v.join(",") };
            (k, v)
        })
        .collect())
}

fn deterministic_env() -> bool {
    std::env::var("LFA_DETERMINISTIC").is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

/// Defaults, then the config file, then flags, then the environment.
fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &c.config {
        cfg.apply_file(p)?;
    }
    for (k, v) in override_pairs(&c.overrides)? {
        cfg.set(&k, &v)?;
    }
    if deterministic_env() {
        cfg.set("deterministic", "true")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The run directory, defaulting to a timestamped one outside deterministic
/// mode. The resolved config is echoed into it before any work.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &cfg.run.out_dir {
        Some(d) => d.clone(),
        None if cfg.run.deterministic => {
            bail!(Error::Config("deterministic mode needs an explicit --out directory".into()))
        }
        None => PathBuf::from("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string()),
    };
    let path = cfg.write_resolved(&dir)?;
    println!("config: {}", path.display());
    Ok(dir)
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out(cfg)?;
    let pairs = data::generate_synthetic(&cfg.synthetic)?;
    let manifest = data::write_synthetic(&dir, &pairs)?;
    println!(
        "wrote {} images and {} masks; manifest {}",
        manifest.entries.len(),
        manifest.entries.iter().filter(|e| e.mask.is_some()).count(),
        dir.join(data::MANIFEST_FILE).display()
    );
    Ok(())
}

fn load_samples(manifest: &Path, patch_size: usize) -> Result<Vec<Sample>> {
    let m = DatasetManifest::load(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    Ok(data::load_dataset(&m, patch_size)?)
}

fn train(cfg: &RunConfig, manifest: &Path, resume: Option<&Path>) -> Result<()> {
    let samples = load_samples(manifest, cfg.arch.patch_size)?;
    if samples.is_empty() {
        bail!(Error::Config(format!("{} lists no images", manifest.display())));
    }
    let dir = prepare_out(cfg)?;
    match cfg.run.dtype {
        DType::F32 => train_as::<f32>(cfg, &samples, &dir, resume),
        DType::F64 => train_as::<f64>(cfg, &samples, &dir, resume),
    }
}

fn train_as<T: Real>(cfg: &RunConfig, samples: &[Sample], dir: &Path, resume: Option<&Path>) -> Result<()> {
    let mut t = match resume {
        Some(p) => {
            let mut ck = checkpoint::load::<T>(p)?;
            // Only the schedule length may change on resume.
            ck.config.epochs = cfg.train.epochs;
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::<T>::new(&cfg.arch, cfg.train.clone())?,
    };
    let refs: Vec<_> = samples.iter().map(|s| &s.patch).collect();
    let images: Vec<T> = data::stack(&refs);
    println!("training on {} images for {} epochs", samples.len(), t.config.epochs);
    trainer::train(&mut t, &images, samples.len(), Some(dir), &mut NoHook, |r| {
        let l = &r.losses;
        println!(
            "epoch {:>4}  rec {:.5}  adv1 d/g {:.4}/{:.4}  adv2 d/e {:.4}/{:.4}  diff {:.4}  proj {:.5}  orth {:.4}",
            r.epoch, l.l_rec, l.l_adv1_d, l.l_adv1_g, l.l_adv2_d, l.l_adv2_e, l.l_diff, l.l_proj, r.latent_orthogonality
        );
    })?;
    println!("final checkpoint {}", dir.join(trainer::FINAL_CHECKPOINT).display());
    Ok(())
}

/// Model outputs for every sample, whichever precision the checkpoint holds.
fn annotate_all(cfg: &RunConfig, ckpt: &Path, samples: &[Sample]) -> Result<Vec<Annotation>> {
    let bytes = fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let radius = cfg.run.smoothing_radius;
    let batch = cfg.train.batch_size;
    let patches: Vec<_> = samples.iter().map(|s| s.patch.clone()).collect();
    Ok(match checkpoint::peek_dtype(&bytes)? {
        DType::F32 => {
            let c = checkpoint::from_bytes::<f32>(&bytes)?;
            annotator::annotate(&c.model, &patches, radius, batch)?
        }
        DType::F64 => {
            let c = checkpoint::from_bytes::<f64>(&bytes)?;
            annotator::annotate(&c.model, &patches, radius, batch)?
        }
    })
}

/// Patch size comes from the checkpoint, not the flags.
fn checkpoint_patch_size(ckpt: &Path) -> Result<usize> {
    let bytes = fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    Ok(match checkpoint::peek_dtype(&bytes)? {
        DType::F32 => checkpoint::from_bytes::<f32>(&bytes)?.model.arch.patch_size,
        DType::F64 => checkpoint::from_bytes::<f64>(&bytes)?.model.arch.patch_size,
    })
}

fn subdir(dir: &Path, name: &str) -> Result<PathBuf> {
    let d = dir.join(name);
    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn annotate(cfg: &RunConfig, ckpt: &Path, manifest: &Path) -> Result<()> {
    let samples = load_samples(manifest, checkpoint_patch_size(ckpt)?)?;
    let dir = prepare_out(cfg)?;
    let notes = annotate_all(cfg, ckpt, &samples)?;
    let (conf_dir, panel_dir) = (subdir(&dir, "confidence")?, subdir(&dir, "panels")?);
    let mut log = create(&dir.join("annotations.jsonl"))?;
    let mut ious = Vec::new();
    for (s, a) in samples.iter().zip(&notes) {
        let id = &a.source_id;
        annotator::write_confidence_png(&conf_dir.join(format!("{id}.png")), &a.conf)?;
        annotator::write_raw_f32(&conf_dir.join(format!("{id}.f32")), a.conf.height, a.conf.width, &a.conf.values)?;
        annotator::render_panels(&a.x, &a.y1, &a.y2, &a.recon, &a.diff, &a.conf, &panel_dir.join(format!("{id}.png")))?;
        writeln!(
            log,
            "{{\"source_id\":{},\"mse_y1\":{},\"mse_y2\":{},\"mse_recon\":{}}}",
            json_str(id),
            a.mse_y1,
            a.mse_y2,
            a.mse_recon
        )?;
        if let Some(m) = &s.mask {
            let pred = annotator::threshold_mask(&a.conf, cfg.run.tau)?;
            ious.push((id.clone(), annotator::iou(&pred, &m.mask)?));
        }
    }
    println!("annotated {} images into {}", notes.len(), dir.display());
    if !ious.is_empty() {
        let mut f = create(&dir.join("iou.jsonl"))?;
        for (id, v) in &ious {
            writeln!(f, "{{\"source_id\":{},\"iou\":{v}}}", json_str(id))?;
        }
        let mean = ious.iter().map(|p| p.1).sum::<f64>() / ious.len() as f64;
        writeln!(f, "{{\"mean_iou\":{mean},\"tau\":{},\"count\":{}}}", cfg.run.tau, ious.len())?;
        println!("mean IoU {mean:.4} over {} masks at tau {}", ious.len(), cfg.run.tau);
    }
    Ok(())
}

fn json_str(s: &str) -> String {
    format!("{s:?}")
}

fn compare(cfg: &RunConfig, ckpt: &Path, manifest: &Path, axis: TraceAxis) -> Result<()> {
    let samples = load_samples(manifest, checkpoint_patch_size(ckpt)?)?;
    let dir = prepare_out(cfg)?;
    fs::write(dir.join("attributes.txt"), format!("{HILBERT_CONVENTION}\ntrace_axis = {axis:?}\n"))?;
    let notes = annotate_all(cfg, ckpt, &samples)?;
    let out = subdir(&dir, "comparison")?;
    for a in &notes {
        let attrs = attrib::attributes(&a.x, a.conf.height, a.conf.width, axis, &a.source_id)?;
        attrib::compare_panels(&a.x, &a.conf, &attrs, &out.join(format!("{}.png", a.source_id)))?;
    }
    println!("wrote {} comparison panels into {}", notes.len(), out.display());
    Ok(())
}

fn run_gradcheck(fd_step: f64, seed: u64, tolerance: f64) -> Result<u8> {
    if !(fd_step > 0.0 && tolerance > 0.0) {
        bail!(Error::Param("fd step and tolerance must be positive".into()));
    }
    let cfg = GradcheckConfig {
        seed,
        fd_step,
        tolerance,
        ..Default::default()
    };
    println!("seed = {seed}\nfd_step = {fd_step:e}\ntolerance = {tolerance:e}");
    let report = gradcheck::gradcheck(&cfg)?;
    print!("{report}");
    let failing = report.failing();
    if failing.is_empty() {
        println!("all rows within tolerance");
        return Ok(0);
    }
    for r in &failing {
        eprintln!("failing: {} w.r.t. {} (max rel err {:.3e})", r.loss, r.group.name(), r.max_rel_err);
    }
    Ok(1)
}
