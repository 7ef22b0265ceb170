//! Single-file checkpoint container.
//!
//! Layout: a UTF-8 header of `key = value` lines opened by the magic line
//! `LFACKPT <version>` and closed by `end`, then the named arrays
//! (`u32` name length, name, `u32` rank, `u64` dims, little-endian values),
//! then a SHA-256 digest of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, Group, Model};
use crate::nn::ParamBlock;
use crate::optim::{Adam, AdamConfig};
use crate::real::{DType, Real};
use crate::trainer::TrainConfig;

pub const MAGIC: &str = "LFACKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    /// One per [`Group::ALL`] entry, same order.
    pub optimizers: Vec<Adam<T>>,
    pub epoch: usize,
    pub config: TrainConfig,
    pub rng: RngState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// Short digest of the architecture and training configuration.
pub fn config_hash(arch: &ArchitectureConfig, train: &TrainConfig) -> String {
    let mut h = Sha256::new();
    for (k, v) in arch.entries().into_iter().chain(train.entries()) {
        h.update(format!("{k}={v}\n"));
    }
    hex(&h.finalize()[..8])
}

struct Writer<T> {
    buf: Vec<u8>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real> Writer<T> {
    fn array(&mut self, name: &str, shape: &[usize], data: &[T]) {
        self.buf.extend((name.len() as u32).to_le_bytes());
        self.buf.extend(name.as_bytes());
        self.buf.extend((shape.len() as u32).to_le_bytes());
        for &d in shape {
            self.buf.extend((d as u64).to_le_bytes());
        }
        T::write_le(data, &mut self.buf);
    }

    fn block(&mut self, b: &ParamBlock<T>) {
        for e in b.entries() {
            self.array(&e.name, &e.shape, b.get(e.slot));
        }
    }
}

pub fn to_bytes<T: Real>(c: &Checkpoint<T>) -> Vec<u8> {
    let arch = &c.model.arch;
    let mut head = format!("{MAGIC} {VERSION}\n");
    head += &format!("epoch = {}\n", c.epoch);
    head += &format!("dtype = {}\n", T::DTYPE.as_str());
    head += &format!("config_hash = {}\n", config_hash(arch, &c.config));
    head += &format!("rng_seed = {}\n", hex(&c.rng.seed));
    head += &format!("rng_stream = {}\n", c.rng.stream);
    head += &format!("rng_word_pos = {}\n", c.rng.word_pos);
    for (k, v) in arch.entries() {
        head += &format!("arch.{k} = {v}\n");
    }
    for (k, v) in c.config.entries() {
        head += &format!("train.{k} = {v}\n");
    }
    head += &format!("train.deterministic = {}\n", c.config.deterministic);
    for (g, opt) in Group::ALL.iter().zip(&c.optimizers) {
        head += &format!("opt.{}.step = {}\n", g.name(), opt.step);
    }
    head += "end\n";

    let mut w = Writer::<T> {
        buf: head.into_bytes(),
        _t: Default::default(),
    };
    for g in Group::ALL {
        w.block(c.model.params(g));
    }
    for (_, b) in c.model.buffers() {
        w.block(b);
    }
    for (g, opt) in Group::ALL.iter().zip(&c.optimizers) {
        let n = opt.m.len();
        w.array(&format!("opt.{}.m", g.name()), &[n], &opt.m);
        w.array(&format!("opt.{}.v", g.name()), &[n], &opt.v);
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn save<T: Real>(c: &Checkpoint<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(c)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Header fields of a checkpoint, readable without knowing its element type.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    let (head, _) = split_header(bytes)?;
    let v = header_value(&head, "dtype")?;
    DType::parse(v).ok_or_else(|| Error::Incompatible(format!("unknown dtype `{v}`")))
}

fn split_header(bytes: &[u8]) -> Result<(Vec<(String, String)>, usize)> {
    let first = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let magic = std::str::from_utf8(&bytes[..first]).unwrap_or("");
    let mut parts = magic.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::Incompatible("not a checkpoint file (bad magic)".into()));
    }
    let version = parts.next().and_then(|v| v.parse::<u32>().ok());
    if version != Some(VERSION) {
        return Err(Error::Incompatible(format!(
            "format version {} is not supported (expected {VERSION})",
            parts_display(magic)
        )));
    }
    if bytes.len() < DIGEST_LEN {
        return Err(Error::Integrity("file is truncated".into()));
    }
    let body_end = bytes.len() - DIGEST_LEN;
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(Error::Integrity("checksum mismatch (truncated or modified file)".into()));
    }
    let mut pos = first + 1;
    let mut head = Vec::new();
    loop {
        let rest = &bytes[pos.min(body_end)..body_end];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Integrity("header is not terminated".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Integrity("header is not valid UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Integrity(format!("malformed header line `{line}`")))?;
        head.push((k.to_string(), v.to_string()));
    }
    Ok((head, pos))
}

fn parts_display(magic: &str) -> &str {
    magic.split(' ').nth(1).unwrap_or("?")
}

fn header_value<'a>(head: &'a [(String, String)], key: &str) -> Result<&'a str> {
    head.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Integrity(format!("header lacks `{key}`")))
}

fn parsed<V: std::str::FromStr>(head: &[(String, String)], key: &str) -> Result<V> {
    let v = header_value(head, key)?;
    v.parse()
        .map_err(|_| Error::Integrity(format!("header `{key}` has bad value `{v}`")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("array section is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array<T: Real>(&mut self) -> Result<(String, Vec<usize>, Vec<T>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("array name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * T::BYTES)?;
        let data = T::read_le(raw);
        Ok((name, shape, data))
    }
}

fn fill_block<T: Real>(
    block: &mut ParamBlock<T>,
    arrays: &mut std::collections::HashMap<String, (Vec<usize>, Vec<T>)>,
) -> Result<()> {
    let entries = block.entries().to_vec();
    for e in entries {
        let (shape, data) = arrays
            .remove(&e.name)
            .ok_or_else(|| Error::Incompatible(format!("array `{}` is missing", e.name)))?;
        if shape != e.shape {
            return Err(Error::Incompatible(format!(
                "array `{}` has shape {shape:?}, expected {:?}",
                e.name, e.shape
            )));
        }
        block.get_mut(e.slot).copy_from_slice(&data);
    }
    Ok(())
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (head, body) = split_header(bytes)?;
    let dtype = header_value(&head, "dtype")?;
    if dtype != T::DTYPE.as_str() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {dtype} values, expected {}",
            T::DTYPE.as_str()
        )));
    }
    let mut arch = ArchitectureConfig::default();
    let mut config = TrainConfig::default();
    for (k, v) in &head {
        if let Some(k) = k.strip_prefix("arch.") {
            if !arch.set(k, v)? {
                return Err(Error::Incompatible(format!("unknown architecture key `{k}`")));
            }
        } else if let Some(k) = k.strip_prefix("train.") {
            if k == "deterministic" {
                config.deterministic = parse_value(k, v)?;
            } else if !config.set(k, v)? {
                return Err(Error::Incompatible(format!("unknown training key `{k}`")));
            }
        }
    }
    if parsed::<String>(&head, "config_hash")? != config_hash(&arch, &config) {
        return Err(Error::Integrity("configuration hash does not match header".into()));
    }
    let seed: [u8; 32] = unhex(header_value(&head, "rng_seed")?)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::Integrity("bad rng_seed".into()))?;
    let rng = RngState {
        seed,
        stream: parsed(&head, "rng_stream")?,
        word_pos: parsed(&head, "rng_word_pos")?,
    };

    let mut reader = Reader {
        bytes: &bytes[..bytes.len() - DIGEST_LEN],
        pos: body,
    };
    let mut arrays = std::collections::HashMap::new();
    while reader.pos < reader.bytes.len() {
        let (name, shape, data) = reader.array::<T>()?;
        arrays.insert(name, (shape, data));
    }

    let mut model = Model::<T>::init(&arch, 0).map_err(|e| Error::Incompatible(e.to_string()))?;
    for g in Group::ALL {
        fill_block(model.params_mut(g), &mut arrays)?;
    }
    for b in model.buffers_mut() {
        fill_block(b, &mut arrays)?;
    }
    let mut optimizers = Vec::new();
    for g in Group::ALL {
        let n = model.params(g).len();
        let mut take = |suffix: &str| -> Result<Vec<T>> {
            let name = format!("opt.{}.{suffix}", g.name());
            match arrays.remove(&name) {
                Some((s, d)) if s == [n] => Ok(d),
                _ => Err(Error::Incompatible(format!("optimizer array `{name}` missing or misshapen"))),
            }
        };
        let (m, v) = (take("m")?, take("v")?);
        optimizers.push(Adam {
            config: AdamConfig {
                lr: config.lr(g),
                beta1: config.beta1,
                beta2: config.beta2,
                ..Default::default()
            },
            step: parsed(&head, &format!("opt.{}.step", g.name()))?,
            m,
            v,
        });
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Incompatible(format!("unexpected array `{extra}`")));
    }
    Ok(Checkpoint {
        model,
        optimizers,
        epoch: parsed(&head, "epoch")?,
        config,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Trainer;

    fn sample() -> Checkpoint<f32> {
        let mut t: Trainer<f32> = Trainer::new(&ArchitectureConfig::toy(), TrainConfig::default()).unwrap();
        let x: Vec<f32> = (0..4 * 64).map(|i| ((i * 7 % 13) as f32 / 6.5) - 1.0).collect();
        t.train_step(&x, 4, &mut crate::trainer::NoHook).unwrap();
        t.epoch = 3;
        t.checkpoint()
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back: Checkpoint<f32> = from_bytes(&to_bytes(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(to_bytes(&back), to_bytes(&c));
        assert_eq!(peek_dtype(&to_bytes(&c)).unwrap(), DType::F32);
    }

    #[test]
    fn bumped_version_is_incompatible() {
        let mut b = to_bytes(&sample());
        b[MAGIC.len() + 1] = b'2';
        assert!(matches!(from_bytes::<f32>(&b), Err(Error::Incompatible(_))));
    }

    #[test]
    fn truncation_and_corruption_fail_integrity() {
        let b = to_bytes(&sample());
        for cut in [b.len() - 1, b.len() / 2, 40] {
            assert!(matches!(from_bytes::<f32>(&b[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut flipped = b.clone();
        let i = flipped.len() - 100;
        flipped[i] ^= 1;
        assert!(matches!(from_bytes::<f32>(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn wrong_dtype_is_incompatible() {
        let b = to_bytes(&sample());
        assert!(matches!(from_bytes::<f64>(&b), Err(Error::Incompatible(_))));
    }
}
