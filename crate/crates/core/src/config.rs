//! Flat `key = value` configuration: parsing, merging and the resolved echo.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ArchitectureConfig;
use crate::real::DType;
use crate::trainer::TrainConfig;

pub const RESOLVED_FILE: &str = "config.resolved.txt";

/// A configuration section addressable by flat keys.
pub trait KeyValue {
    fn entries(&self) -> Vec<(&'static str, String)>;
    /// Returns `Ok(false)` if the key does not belong to this section.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

pub fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn join_list<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl KeyValue for ArchitectureConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("patch_size", self.patch_size.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("channels", join_list(&self.channels)),
            ("image_disc_channels", join_list(&self.image_disc_channels)),
            ("kernel", self.kernel.to_string()),
            ("stride", self.stride.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "latent_dim" => self.latent_dim = parse_value(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "image_disc_channels" => self.image_disc_channels = parse_list(key, value)?,
            "kernel" => self.kernel = parse_value(key, value)?,
            "stride" => self.stride = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Settings that belong to no library section.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub dtype: DType,
    pub smoothing_radius: usize,
    pub tau: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            out_dir: None,
            deterministic: false,
            dtype: DType::F32,
            smoothing_radius: 1,
            tau: 0.5,
        }
    }
}

impl KeyValue for RunSettings {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            (
                "out",
                self.out_dir.as_ref().map_or_else(String::new, |p| p.display().to_string()),
            ),
            ("deterministic", self.deterministic.to_string()),
            ("dtype", self.dtype.as_str().into()),
            ("smoothing_radius", self.smoothing_radius.to_string()),
            ("tau", self.tau.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "out" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "deterministic" => self.deterministic = parse_value(key, value)?,
            "dtype" => {
                self.dtype = DType::parse(value)
                    .ok_or_else(|| Error::Config(format!("dtype must be f32 or f64, got `{value}`")))?
            }
            "smoothing_radius" => self.smoothing_radius = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub run: RunSettings,
}

impl RunConfig {
    /// Route one key to the section that owns it. `seed` feeds both the
    /// generator and the trainer.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().trim_start_matches("--").replace('-', "_");
        let mut hit = false;
        if key == "seed" {
            self.synthetic.set(&key, value)?;
            self.train.set(&key, value)?;
            hit = true;
        } else {
            for section in [
                &mut self.run as &mut dyn KeyValue,
                &mut self.arch,
                &mut self.train,
                &mut self.synthetic,
            ] {
                if section.set(&key, value)? {
                    hit = true;
                    break;
                }
            }
        }
        if !hit {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        self.train.deterministic = self.run.deterministic;
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// The fully resolved configuration as `key = value` lines, one section
    /// after another. Feeding it back through [`Self::apply_text`] yields an
    /// equal config.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (title, entries) in [
            ("run", self.run.entries()),
            ("architecture", self.arch.entries()),
            ("training", self.train.entries()),
            ("synthetic data", self.synthetic.entries()),
        ] {
            s.push_str(&format!("# {title}\n"));
            for (k, v) in entries {
                // The shared seed is printed once, under training.
                if title == "synthetic data" && k == "seed" && v == self.train.seed.to_string() {
                    continue;
                }
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s.push_str("# branch difference reduction: mean over pixels, sum over images\n");
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.resolved_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if !(0.0..=1.0).contains(&self.run.tau) {
            return Err(Error::Param(format!("tau must lie in [0, 1], got {}", self.run.tau)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut a = RunConfig::default();
        a.apply_text("epochs = 7\nchannels = 8,16,32,64,256 # narrow\nseed=3\nlr_proj=0.001\ndeterministic=true")
            .unwrap();
        assert_eq!(a.train.epochs, 7);
        assert_eq!(a.synthetic.seed, 3);
        assert!(a.train.deterministic);
        let mut b = RunConfig::default();
        b.apply_text(&a.resolved_text()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("no equals sign"), Err(Error::Config(_))));
        assert!(matches!(c.set("epochs", "-1"), Err(Error::Config(_))));
        c.set("--batch-size", "4").unwrap();
        assert_eq!(c.train.batch_size, 4);
    }
}
