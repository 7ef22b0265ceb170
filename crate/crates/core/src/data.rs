//! Patch datasets: normalization, synthetic texture composites with
//! ground-truth masks, manifests and batch streams.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{parse_list, parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::raster::{self, box_blur};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassTag {
    Horizon,
    Fault,
    Chaotic,
    Salt,
    Synthetic,
}

impl ClassTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassTag::Horizon => "horizon",
            ClassTag::Fault => "fault",
            ClassTag::Chaotic => "chaotic",
            ClassTag::Salt => "salt",
            ClassTag::Synthetic => "synthetic",
        }
    }
}

impl FromStr for ClassTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "horizon" | "horizons" => ClassTag::Horizon,
            "fault" | "faults" => ClassTag::Fault,
            "chaotic" => ClassTag::Chaotic,
            "salt" | "salt_dome" | "salt_domes" => ClassTag::Salt,
            "synthetic" => ClassTag::Synthetic,
            other => return Err(Error::Config(format!("unknown class tag `{other}`"))),
        })
    }
}

/// Single-channel image with values in `[-1, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    /// Metadata only; never read by training.
    pub class_tag: Option<ClassTag>,
    pub source_id: String,
}

impl ImagePatch {
    pub fn check_range(&self) -> Result<()> {
        if self.pixels.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "{}: {} pixels for a {}x{} patch",
                self.source_id,
                self.pixels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(v) = self.pixels.iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::Param(format!("{}: pixel {v} outside [-1, 1]", self.source_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub source_id: String,
}

impl GroundTruthMask {
    pub fn area_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }
}

/// `raw / 127.5 - 1` for a rectangular grid of 8-bit rows.
pub fn normalize(rows: &[Vec<u8>]) -> Result<Vec<f64>> {
    let w = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || w == 0 {
        return Err(Error::Shape("raw image is empty".into()));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != w) {
        return Err(Error::Shape(format!("row {i} has {} values, expected {w}", r.len())));
    }
    Ok(rows.iter().flatten().map(|&v| normalize_value(v)).collect())
}

pub fn normalize_value(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize_value`], rounding and saturating.
pub fn denormalize_value(p: f64) -> u8 {
    ((p + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StructureKind {
    Blob,
    FaultLine,
    ChaoticPatch,
    LayeredBand,
}

impl StructureKind {
    pub const ALL: [StructureKind; 4] = [
        StructureKind::Blob,
        StructureKind::FaultLine,
        StructureKind::ChaoticPatch,
        StructureKind::LayeredBand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StructureKind::Blob => "blob",
            StructureKind::FaultLine => "fault_line",
            StructureKind::ChaoticPatch => "chaotic_patch",
            StructureKind::LayeredBand => "layered_band",
        }
    }

    /// The geological class each synthetic structure imitates.
    pub fn class_tag(self) -> ClassTag {
        match self {
            StructureKind::Blob => ClassTag::Salt,
            StructureKind::FaultLine => ClassTag::Fault,
            StructureKind::ChaoticPatch => ClassTag::Chaotic,
            StructureKind::LayeredBand => ClassTag::Horizon,
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StructureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StructureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown structure kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundSpec {
    /// Cycles per patch width.
    pub frequency: (f64, f64),
    /// Degrees from horizontal.
    pub dip: (f64, f64),
    pub layers: (usize, usize),
    pub amplitude: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            frequency: (2.0, 5.0),
            dip: (-20.0, 20.0),
            layers: (2, 4),
            amplitude: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub patch_size: usize,
    pub n_per_class: usize,
    pub structure_kinds: Vec<StructureKind>,
    pub background: BackgroundSpec,
    pub structure_area_fraction: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            patch_size: 64,
            n_per_class: 50,
            structure_kinds: StructureKind::ALL.to_vec(),
            background: BackgroundSpec::default(),
            structure_area_fraction: (0.1, 0.4),
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

const MAX_ATTEMPTS: usize = 200;

fn pair_str<A: fmt::Display>(p: (A, A)) -> String {
    format!("{},{}", p.0, p.1)
}

fn parse_pair<V: FromStr>(key: &str, value: &str) -> Result<(V, V)> {
    let v: Vec<V> = parse_list(key, value)?;
    match <[V; 2]>::try_from(v) {
        Ok([a, b]) => Ok((a, b)),
        Err(_) => Err(Error::Config(format!("`{key}` takes two comma-separated values"))),
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.structure_area_fraction;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "structure area fraction [{lo}, {hi}] must be a nonempty interval inside (0, 1)"
            )));
        }
        if self.patch_size < 8 {
            return Err(Error::Config("synthetic patch_size must be at least 8".into()));
        }
        if self.structure_kinds.is_empty() {
            return Err(Error::Config("at least one structure kind is required".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        let b = &self.background;
        if b.layers.0 == 0 || b.layers.0 > b.layers.1 || b.frequency.0 > b.frequency.1 || b.dip.0 > b.dip.1 {
            return Err(Error::Config("background ranges must be nonempty".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_per_class * self.structure_kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl KeyValue for SyntheticSpec {
    fn entries(&self) -> Vec<(&'static str, String)> {
        let kinds: Vec<&str> = self.structure_kinds.iter().map(|k| k.as_str()).collect();
        vec![
            ("synthetic_patch_size", self.patch_size.to_string()),
            ("n_per_class", self.n_per_class.to_string()),
            ("structure_kinds", kinds.join(",")),
            ("background_frequency", pair_str(self.background.frequency)),
            ("background_dip", pair_str(self.background.dip)),
            ("background_layers", pair_str(self.background.layers)),
            ("background_amplitude", self.background.amplitude.to_string()),
            ("area_fraction", pair_str(self.structure_area_fraction)),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "synthetic_patch_size" => self.patch_size = parse_value(key, value)?,
            "n_per_class" => self.n_per_class = parse_value(key, value)?,
            "structure_kinds" => {
                self.structure_kinds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "background_frequency" => self.background.frequency = parse_pair(key, value)?,
            "background_dip" => self.background.dip = parse_pair(key, value)?,
            "background_layers" => self.background.layers = parse_pair(key, value)?,
            "background_amplitude" => self.background.amplitude = parse_value(key, value)?,
            "area_fraction" => self.structure_area_fraction = parse_pair(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn normal_field(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Smoothed Gaussian noise scaled to unit peak magnitude.
fn smooth_noise(rng: &mut ChaCha8Rng, n: usize, radius: usize, passes: usize) -> Vec<f64> {
    let mut a = normal_field(rng, n * n);
    for _ in 0..passes {
        a = box_blur(&a, n, n, radius);
    }
    let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().map(|v| v / peak).collect()
}

/// Sum of dipping sinusoidal layers, scaled to the configured peak amplitude.
fn background(rng: &mut ChaCha8Rng, n: usize, spec: &BackgroundSpec) -> Vec<f64> {
    let k = rng.random_range(spec.layers.0..=spec.layers.1);
    let mut b = vec![0.0; n * n];
    for _ in 0..k {
        let f = rng.random_range(spec.frequency.0..=spec.frequency.1);
        let dip = rng.random_range(spec.dip.0..=spec.dip.1).to_radians();
        let ph = rng.random_range(0.0..std::f64::consts::TAU);
        let a = rng.random_range(0.5..1.0);
        let (c, s) = (dip.cos(), dip.sin());
        for y in 0..n {
            for x in 0..n {
                let t = y as f64 * c + x as f64 * s;
                b[y * n + x] += a * (std::f64::consts::TAU * f * t / n as f64 + ph).sin();
            }
        }
    }
    let peak = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    b.iter().map(|v| spec.amplitude * v / peak).collect()
}

/// One attempt at a structure: support mask and fill texture.
fn structure_attempt(rng: &mut ChaCha8Rng, kind: StructureKind, n: usize) -> (Vec<bool>, Vec<f64>) {
    let nf = n as f64;
    let mut mask = vec![false; n * n];
    let fill;
    match kind {
        StructureKind::Blob => {
            let cy = rng.random_range(0.3 * nf..0.7 * nf);
            let cx = rng.random_range(0.3 * nf..0.7 * nf);
            let r0 = rng.random_range(0.15 * nf..0.35 * nf);
            let wobble = rng.random_range(0.0..6.0);
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let th = dy.atan2(dx);
                    mask[y * n + x] = dy.hypot(dx) < r0 * (1.0 + 0.2 * (3.0 * th + wobble).sin());
                }
            }
            fill = smooth_noise(rng, n, 3, 3).iter().map(|v| 0.7 + 0.15 * v).collect();
        }
        StructureKind::FaultLine => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let ang = rng.random_range(55.0f64..80.0).to_radians() * sign;
            let c = rng.random_range(0.35 * nf..0.65 * nf);
            let w = rng.random_range(0.06 * nf..0.16 * nf);
            for y in 0..n {
                for x in 0..n {
                    let d = (x as f64 - c) * ang.cos() + (y as f64 - nf / 2.0) * ang.sin();
                    mask[y * n + x] = d.abs() < w;
                }
            }
            fill = smooth_noise(rng, n, 3, 3).iter().map(|v| -0.7 + 0.15 * v).collect();
        }
        StructureKind::ChaoticPatch => {
            let cy = rng.random_range(0.3 * nf..0.7 * nf);
            let cx = rng.random_range(0.3 * nf..0.7 * nf);
            let hy = rng.random_range(0.15 * nf..0.3 * nf);
            let hx = rng.random_range(0.15 * nf..0.3 * nf);
            for y in 0..n {
                for x in 0..n {
                    mask[y * n + x] = (y as f64 - cy).abs() < hy && (x as f64 - cx).abs() < hx;
                }
            }
            fill = smooth_noise(rng, n, 2, 3).iter().map(|v| 0.8 * v).collect();
        }
        StructureKind::LayeredBand => {
            let c = rng.random_range(0.3 * nf..0.7 * nf);
            let w = rng.random_range(0.08 * nf..0.18 * nf);
            let ph = rng.random_range(0.0..6.0);
            let mut f = vec![0.0; n * n];
            for y in 0..n {
                let v = 0.8 * (std::f64::consts::TAU * y as f64 / 8.0 + ph).sin();
                for x in 0..n {
                    mask[y * n + x] = (y as f64 - c).abs() < w;
                    f[y * n + x] = v;
                }
            }
            fill = f;
        }
    }
    (mask, fill)
}

/// Deterministic texture composites: `n_per_class` images per structure kind,
/// each a layered background with one structure pasted over it. Pixels are
/// quantized to 8 bits so that writing and re-reading them is lossless.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<(ImagePatch, GroundTruthMask)>> {
    spec.validate()?;
    let n = spec.patch_size;
    let (lo, hi) = spec.structure_area_fraction;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.len());
    for &kind in &spec.structure_kinds {
        for i in 0..spec.n_per_class {
            let bg = background(&mut rng, n, &spec.background);
            let mut found = None;
            let mut last_frac = 0.0;
            for _ in 0..MAX_ATTEMPTS {
                let (m, s) = structure_attempt(&mut rng, kind, n);
                let frac = m.iter().filter(|&&v| v).count() as f64 / (n * n) as f64;
                last_frac = frac;
                if (lo..=hi).contains(&frac) {
                    found = Some((m, s));
                    break;
                }
            }
            let (mask, fill) = found.ok_or_else(|| Error::Generation {
                kind: kind.as_str().into(),
                reason: format!(
                    "no draw in {MAX_ATTEMPTS} attempts covered a fraction in [{lo}, {hi}] (last {last_frac:.3})"
                ),
            })?;
            let pixels = (0..n * n)
                .map(|j| {
                    let v = if mask[j] { fill[j] } else { bg[j] };
                    let noise: f64 = rng.sample(StandardNormal);
                    normalize_value(denormalize_value((v + spec.noise_sigma * noise).clamp(-1.0, 1.0)))
                })
                .collect();
            let source_id = format!("{}_{i:04}", kind.as_str());
            out.push((
                ImagePatch {
                    height: n,
                    width: n,
                    pixels,
                    class_tag: Some(kind.class_tag()),
                    source_id: source_id.clone(),
                },
                GroundTruthMask {
                    height: n,
                    width: n,
                    mask,
                    source_id,
                },
            ));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub class_tag: Option<ClassTag>,
}

impl ManifestEntry {
    pub fn source_id(&self) -> String {
        self.image
            .file_stem()
            .map_or_else(|| self.image.display().to_string(), |s| s.to_string_lossy().into_owned())
    }
}

/// Dataset index: tab-separated `image<TAB>mask-or-dash<TAB>class` lines.
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
/// Sidecar file holding the normalization record.
pub const NORMALIZATION_FILE: &str = "normalization.txt";

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Config(format!(
                    "manifest line {}: expected 2 or 3 tab-separated fields",
                    i + 1
                )));
            }
            let mask = match fields[1] {
                "-" | "" => None,
                m => Some(PathBuf::from(m)),
            };
            let class_tag = match fields.get(2).map(|s| s.trim()) {
                None | Some("") | Some("-") => None,
                Some(t) => Some(t.parse()?),
            };
            entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                mask,
                class_tag,
            });
        }
        let m = Self {
            entries,
            root: root.to_path_buf(),
        };
        m.check_unique()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            let id = e.source_id();
            if !seen.insert(id.clone()) {
                return Err(Error::Config(format!("duplicate source id `{id}` in manifest")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let mask = e.mask.as_ref().map_or_else(|| "-".into(), |m| m.display().to_string());
            let tag = e.class_tag.map_or("-", ClassTag::as_str);
            s.push_str(&format!("{}\t{mask}\t{tag}\n", e.image.display()));
        }
        s
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn has_masks(&self) -> bool {
        self.entries.iter().any(|e| e.mask.is_some())
    }
}

pub fn normalization_record() -> String {
    "raw_min = 0\nraw_max = 255\nmapping = raw / 127.5 - 1\n".into()
}

/// Write generated pairs as PNG files plus a manifest under `dir`.
pub fn write_synthetic(dir: &Path, pairs: &[(ImagePatch, GroundTruthMask)]) -> Result<DatasetManifest> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = DatasetManifest {
        entries: Vec::new(),
        root: dir.to_path_buf(),
    };
    for (img, mask) in pairs {
        let ip = PathBuf::from("images").join(format!("{}.png", img.source_id));
        let mp = PathBuf::from("masks").join(format!("{}.png", mask.source_id));
        let raw = img.pixels.iter().map(|&p| denormalize_value(p)).collect();
        raster::write_gray(&dir.join(&ip), img.height, img.width, raw)?;
        let mraw = mask.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        raster::write_gray(&dir.join(&mp), mask.height, mask.width, mraw)?;
        manifest.entries.push(ManifestEntry {
            image: ip,
            mask: Some(mp),
            class_tag: img.class_tag,
        });
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
    let npath = dir.join(NORMALIZATION_FILE);
    fs::write(&npath, normalization_record()).map_err(|e| Error::io(&npath, e))?;
    Ok(manifest)
}

/// A loaded, resized, normalized patch and its optional mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patch: ImagePatch,
    pub mask: Option<GroundTruthMask>,
}

/// Read every manifest entry, resizing images bilinearly (masks by nearest
/// neighbour) to `patch_size` and normalizing to `[-1, 1]`.
pub fn load_dataset(manifest: &DatasetManifest, patch_size: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = manifest.resolve(&e.image);
        let g = raster::read_gray(&path)?;
        let raw: Vec<f64> = g.data.iter().map(|&v| normalize_value(v)).collect();
        let pixels = raster::resize_bilinear(&raw, g.height, g.width, patch_size, patch_size);
        let source_id = e.source_id();
        let patch = ImagePatch {
            height: patch_size,
            width: patch_size,
            pixels,
            class_tag: e.class_tag,
            source_id: source_id.clone(),
        };
        debug_assert!(patch.check_range().is_ok());
        let mask = match &e.mask {
            Some(m) => {
                let mp = manifest.resolve(m);
                let mg = raster::read_gray(&mp)?;
                let bits: Vec<bool> = mg.data.iter().map(|&v| v >= 128).collect();
                Some(GroundTruthMask {
                    height: patch_size,
                    width: patch_size,
                    mask: raster::resize_nearest(&bits, mg.height, mg.width, patch_size, patch_size),
                    source_id,
                })
            }
            None => None,
        };
        out.push(Sample { patch, mask });
    }
    Ok(out)
}

/// Deterministically shuffled mini-batches of sample indices.
pub struct BatchStream {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch: usize, shuffle_seed: u64) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        Self {
            order,
            batch: batch.max(1),
            pos: 0,
        }
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(b)
    }
}

/// Stack patches into one contiguous buffer of element type `T`.
pub fn stack<T: crate::Real>(patches: &[&ImagePatch]) -> Vec<T> {
    patches
        .iter()
        .flat_map(|p| p.pixels.iter().map(|&v| T::lit(v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_and_oracle() {
        assert!(normalize(&vec![vec![0; 3]; 2]).unwrap().iter().all(|&v| v == -1.0));
        assert!(normalize(&vec![vec![255; 3]; 2]).unwrap().iter().all(|&v| v == 1.0));
        let v = normalize(&[vec![127]]).unwrap()[0];
        assert!((v + 0.003921568627451).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<u8>> = (0..8).map(|_| (0..8).map(|_| rng.random()).collect()).collect();
        let got = normalize(&rows).unwrap();
        for (i, r) in rows.iter().enumerate() {
            for (j, &raw) in r.iter().enumerate() {
                assert!((got[i * 8 + j] - (raw as f64 * 2.0 / 255.0 - 1.0)).abs() < 1e-12);
            }
        }
        assert!(matches!(normalize(&[vec![1, 2], vec![3]]), Err(Error::Shape(_))));
    }

    #[test]
    fn denormalize_inverts_exactly_on_integers() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_value(normalize_value(v)), v);
        }
    }

    #[test]
    fn synthetic_generation_counts_fractions_determinism() {
        let spec = SyntheticSpec {
            patch_size: 32,
            n_per_class: 6,
            seed: 11,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 24);
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        for (p, m) in &a {
            p.check_range().unwrap();
            let f = m.area_fraction();
            assert!((0.1..=0.4).contains(&f), "{} {f}", m.source_id);
        }
        let other = generate_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn unsatisfiable_area_names_the_kind() {
        let spec = SyntheticSpec {
            patch_size: 16,
            n_per_class: 1,
            structure_kinds: vec![StructureKind::LayeredBand],
            structure_area_fraction: (0.9, 0.95),
            ..Default::default()
        };
        match generate_synthetic(&spec) {
            Err(Error::Generation { kind, .. }) => assert_eq!(kind, "layered_band"),
            other => panic!("{other:?}"),
        }
        let empty = SyntheticSpec {
            structure_area_fraction: (0.9, 0.8),
            ..Default::default()
        };
        assert!(matches!(empty.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_text_round_trip_and_duplicates() {
        let text = "images/a.png\tmasks/a.png\tsalt\nimages/b.png\t-\t-\n";
        let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].mask, None);
        assert_eq!(m.to_text(), text);
        assert_eq!(m.resolve(&m.entries[0].image), PathBuf::from("/data/images/a.png"));
        let dup = "x/a.png\t-\t-\ny/a.png\t-\t-\n";
        assert!(matches!(DatasetManifest::parse(dup, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn batch_stream_is_replayable() {
        let a: Vec<Vec<usize>> = BatchStream::new(10, 4, 3).collect();
        let b: Vec<Vec<usize>> = BatchStream::new(10, 4, 3).collect();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(BatchStream::new(0, 4, 3).count(), 0);
    }

    #[test]
    fn spec_key_values_round_trip() {
        let mut a = SyntheticSpec::default();
        a.set("area_fraction", "0.2,0.3").unwrap();
        a.set("structure_kinds", "blob,fault_line").unwrap();
        let mut b = SyntheticSpec::default();
        for (k, v) in a.entries() {
            assert!(b.set(k, &v).unwrap());
        }
        assert_eq!(a, b);
    }
}
