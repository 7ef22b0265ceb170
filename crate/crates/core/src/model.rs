//! The four networks: encoder, decoder/generator, image discriminator and
//! latent discriminator, plus the projection pair that sits between encoder
//! and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BnMode, ConvGeom, ParamBlock, Sequential, SequentialBuilder};
use crate::projection::ProjectionPair;
use crate::real::Real;

pub const WEIGHT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub patch_size: usize,
    pub latent_dim: usize,
    /// Encoder output channels per layer; the decoder mirrors this list.
    pub channels: Vec<usize>,
    pub image_disc_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            latent_dim: 1024,
            channels: vec![32, 64, 128, 256, 256],
            image_disc_channels: vec![32, 64, 128, 256],
            kernel: 5,
            stride: 2,
        }
    }
}

impl ArchitectureConfig {
    /// Small configuration used by gradient checks: 8x8 patches, latent 16.
    pub fn toy() -> Self {
        Self {
            patch_size: 8,
            latent_dim: 16,
            channels: vec![3, 4],
            image_disc_channels: vec![3, 4, 4, 4],
            kernel: 5,
            stride: 2,
        }
    }

    /// Side length of the encoder's final feature map.
    pub fn bottleneck_side(&self) -> usize {
        let mut side = self.patch_size;
        for _ in &self.channels {
            side /= self.stride.max(1);
        }
        side
    }

    pub fn pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("encoder channel schedule must be nonempty and positive".into()));
        }
        if self.image_disc_channels.is_empty() || self.image_disc_channels.contains(&0) {
            return Err(Error::Config(
                "image discriminator channel schedule must be nonempty and positive".into(),
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.stride < 2 {
            return Err(Error::Config(format!("stride must be at least 2, got {}", self.stride)));
        }
        let layers = self.channels.len() as u32;
        let factor = self.stride.pow(layers);
        if self.patch_size % factor != 0 || self.patch_size / factor < 2 {
            return Err(Error::Config(format!(
                "patch_size / {}^{} must be an integer >= 2 (patch_size = {})",
                self.stride, layers, self.patch_size
            )));
        }
        let side = self.patch_size / factor;
        let volume = side * side * self.channels[self.channels.len() - 1];
        if volume != self.latent_dim {
            return Err(Error::Config(format!(
                "final feature volume {side}x{side}x{} = {volume} differs from latent_dim {}",
                self.channels[self.channels.len() - 1],
                self.latent_dim
            )));
        }
        if self.latent_dim < 4 {
            return Err(Error::Config("latent_dim must be at least 4".into()));
        }
        Ok(())
    }

    pub fn latent_disc_hidden(&self) -> (usize, usize) {
        ((self.latent_dim / 2).max(1), (self.latent_dim / 4).max(1))
    }
}

/// Parameter groups, each with its own optimizer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Decoder,
    ImageDisc,
    LatentDisc,
    Projection,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Encoder,
        Group::Decoder,
        Group::ImageDisc,
        Group::LatentDisc,
        Group::Projection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::ImageDisc => "image_disc",
            Group::LatentDisc => "latent_disc",
            Group::Projection => "proj",
        }
    }
}

/// All trainable state of the composite model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: ArchitectureConfig,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
    pub image_disc: Sequential<T>,
    pub latent_disc: Sequential<T>,
    pub projection: ProjectionPair<T>,
}

fn build_encoder<T: Real>(arch: &ArchitectureConfig, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let pad = arch.kernel / 2;
    let mut b = SequentialBuilder::new("encoder", rng, WEIGHT_STD);
    let (mut c, mut side) = (1, arch.patch_size);
    let last = arch.channels.len() - 1;
    for (i, &out) in arch.channels.iter().enumerate() {
        let geom = ConvGeom::new(c, side, side, out, arch.kernel, arch.stride, pad);
        b = b.conv(geom).batch_norm(out, geom.small_h * geom.small_w);
        // The final block's activation is the bounding sigmoid.
        b = if i < last { b.leaky_relu(LEAKY_SLOPE) } else { b.sigmoid() };
        c = out;
        side = geom.small_h;
    }
    b.build()
}

fn build_decoder<T: Real>(arch: &ArchitectureConfig, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let pad = arch.kernel / 2;
    let mut b = SequentialBuilder::new("decoder", rng, WEIGHT_STD);
    let mut side = arch.bottleneck_side();
    let mut schedule: Vec<usize> = arch.channels.iter().rev().copied().collect();
    schedule.push(1);
    let layers = schedule.len() - 1;
    for i in 0..layers {
        let (cin, cout) = (schedule[i], schedule[i + 1]);
        let big = side * arch.stride;
        let geom = ConvGeom::new(cout, big, big, cin, arch.kernel, arch.stride, pad);
        debug_assert_eq!(geom.small_h, side);
        b = b.conv_transpose(geom);
        if i + 1 < layers {
            b = b.batch_norm(cout, big * big).relu();
        }
        side = big;
    }
    b.build()
}

fn build_image_disc<T: Real>(arch: &ArchitectureConfig, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let pad = arch.kernel / 2;
    let mut b = SequentialBuilder::new("image_disc", rng, WEIGHT_STD);
    let (mut c, mut side) = (1, arch.patch_size);
    for &out in &arch.image_disc_channels {
        let geom = ConvGeom::new(c, side, side, out, arch.kernel, arch.stride, pad);
        b = b.conv(geom).leaky_relu(LEAKY_SLOPE);
        c = out;
        side = geom.small_h;
    }
    b.global_avg_pool(c, side * side)
        .linear(c, 1)
        .sigmoid()
        .clamp_prob(PROB_CLAMP)
        .build()
}

fn build_latent_disc<T: Real>(arch: &ArchitectureConfig, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let (h1, h2) = arch.latent_disc_hidden();
    SequentialBuilder::new("latent_disc", rng, WEIGHT_STD)
        .linear(arch.latent_dim, h1)
        .leaky_relu(LEAKY_SLOPE)
        .linear(h1, h2)
        .leaky_relu(LEAKY_SLOPE)
        .linear(h2, 1)
        .sigmoid()
        .clamp_prob(PROB_CLAMP)
        .build()
}

impl<T: Real> Model<T> {
    /// Deterministic initialization: weights `N(0, 0.02)`, batch-norm scale 1
    /// and shift 0, projections `I/2` plus `N(0, 0.01)` noise.
    pub fn init(arch: &ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = build_encoder(arch, &mut rng);
        let decoder = build_decoder(arch, &mut rng);
        let image_disc = build_image_disc(arch, &mut rng);
        let latent_disc = build_latent_disc(arch, &mut rng);
        let projection = ProjectionPair::init(arch.latent_dim, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            encoder,
            decoder,
            image_disc,
            latent_disc,
            projection,
        })
    }

    pub fn params(&self, group: Group) -> &ParamBlock<T> {
        match group {
            Group::Encoder => &self.encoder.params,
            Group::Decoder => &self.decoder.params,
            Group::ImageDisc => &self.image_disc.params,
            Group::LatentDisc => &self.latent_disc.params,
            Group::Projection => &self.projection.params,
        }
    }

    pub fn params_mut(&mut self, group: Group) -> &mut ParamBlock<T> {
        match group {
            Group::Encoder => &mut self.encoder.params,
            Group::Decoder => &mut self.decoder.params,
            Group::ImageDisc => &mut self.image_disc.params,
            Group::LatentDisc => &mut self.latent_disc.params,
            Group::Projection => &mut self.projection.params,
        }
    }

    /// Non-trainable arrays (batch-norm running statistics) by network.
    pub fn buffers(&self) -> [(&'static str, &ParamBlock<T>); 2] {
        [("encoder", &self.encoder.buffers), ("decoder", &self.decoder.buffers)]
    }

    pub fn buffers_mut(&mut self) -> [&mut ParamBlock<T>; 2] {
        [&mut self.encoder.buffers, &mut self.decoder.buffers]
    }

    fn check_images(&self, x: &[T], batch: usize) -> Result<()> {
        if batch == 0 || x.len() != batch * self.arch.pixels() {
            return Err(Error::Shape(format!(
                "expected {batch} images of {0}x{0}, got {1} values",
                self.arch.patch_size,
                x.len()
            )));
        }
        Ok(())
    }

    fn check_latents(&self, z: &[T], batch: usize) -> Result<()> {
        if batch == 0 || z.len() != batch * self.arch.latent_dim {
            return Err(Error::Shape(format!(
                "expected {batch} latents of length {}, got {} values",
                self.arch.latent_dim,
                z.len()
            )));
        }
        Ok(())
    }

    /// Images to latents in `[0, 1]`.
    pub fn encode(&self, x: &[T], batch: usize, mode: BnMode) -> Result<Vec<T>> {
        self.check_images(x, batch)?;
        self.encoder.infer(x, batch, mode)
    }

    /// Latents to branch images; linear output, unbounded.
    pub fn decode(&self, z: &[T], batch: usize, mode: BnMode) -> Result<Vec<T>> {
        self.check_latents(z, batch)?;
        self.decoder.infer(z, batch, mode)
    }

    pub fn discriminate_image(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        self.check_images(x, batch)?;
        self.image_disc.infer(x, batch, BnMode::Train)
    }

    pub fn discriminate_latent(&self, z: &[T], batch: usize) -> Result<Vec<T>> {
        self.check_latents(z, batch)?;
        self.latent_disc.infer(z, batch, BnMode::Train)
    }

    /// Full factorized pass `X -> z -> (z1, z2) -> (Y1, Y2)`.
    pub fn factorize(&self, x: &[T], batch: usize, mode: BnMode) -> Result<Factorized<T>> {
        let z = self.encode(x, batch, mode)?;
        let (z1, z2) = self.projection.project(&z, batch)?;
        let mut zz = z1.clone();
        zz.extend_from_slice(&z2);
        let y = self.decoder.infer(&zz, 2 * batch, mode)?;
        let half = batch * self.arch.pixels();
        let y2 = y[half..].to_vec();
        let mut y1 = y;
        y1.truncate(half);
        Ok(Factorized { z, z1, z2, y1, y2 })
    }
}

/// Outputs of [`Model::factorize`].
#[derive(Clone, Debug)]
pub struct Factorized<T> {
    pub z: Vec<T>,
    pub z1: Vec<T>,
    pub z2: Vec<T>,
    pub y1: Vec<T>,
    pub y2: Vec<T>,
}

impl<T: Real> Factorized<T> {
    pub fn reconstruction(&self) -> Vec<T> {
        self.y1.iter().zip(&self.y2).map(|(&a, &b)| a + b).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    #[test]
    fn default_architecture_has_2x2x256_bottleneck() {
        let arch = ArchitectureConfig::default();
        arch.validate().unwrap();
        assert_eq!(arch.bottleneck_side(), 2);
        let m: Model<f32> = Model::init(&arch, 0).unwrap();
        let last_conv = m
            .encoder
            .layers()
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv { geom, .. } => Some(*geom),
                _ => None,
            })
            .unwrap();
        assert_eq!((last_conv.small_c, last_conv.small_h, last_conv.small_w), (256, 2, 2));
        assert_eq!(m.encoder.out_size(), 1024);
        assert_eq!(m.decoder.in_size(), 1024);
        assert_eq!(m.decoder.out_size(), 64 * 64);
    }

    #[test]
    fn patch_16_with_five_layers_is_rejected() {
        let arch = ArchitectureConfig {
            patch_size: 16,
            ..Default::default()
        };
        let err = arch.validate().unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("patch_size")), "{err}");
    }

    #[test]
    fn mismatched_latent_dim_is_rejected() {
        let arch = ArchitectureConfig {
            latent_dim: 512,
            ..Default::default()
        };
        assert!(matches!(arch.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let arch = ArchitectureConfig::toy();
        let a: Model<f64> = Model::init(&arch, 9).unwrap();
        let b: Model<f64> = Model::init(&arch, 9).unwrap();
        let c: Model<f64> = Model::init(&arch, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_names_are_unique() {
        let m: Model<f32> = Model::init(&ArchitectureConfig::default(), 0).unwrap();
        let mut names: Vec<&str> = Group::ALL
            .iter()
            .flat_map(|&g| m.params(g).entries().iter().map(|e| e.name.as_str()))
            .chain(m.buffers().iter().flat_map(|(_, b)| b.entries().iter().map(|e| e.name.as_str())))
            .collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert!(m.projection.params.find("proj.P1").is_some());
        assert!(m.projection.params.find("proj.P2").is_some());
    }

    #[test]
    fn zero_parameters_give_half_latents_zero_images_and_half_probabilities() {
        let arch = ArchitectureConfig::toy();
        let mut m: Model<f64> = Model::init(&arch, 1).unwrap();
        for g in Group::ALL {
            m.params_mut(g).data_mut().fill(0.0);
        }
        let x: Vec<f64> = (0..3 * 64).map(|i| (i as f64).sin()).collect();
        assert!(m.encode(&x, 3, BnMode::Train).unwrap().iter().all(|&v| v == 0.5));
        let z = vec![0.0; 2 * 16];
        assert!(m.decode(&z, 2, BnMode::Train).unwrap().iter().all(|&v| v == 0.0));
        assert!(m.discriminate_image(&x, 3).unwrap().iter().all(|&v| v == 0.5));
        let wild = vec![7.5; 16];
        assert_eq!(m.discriminate_latent(&wild, 1).unwrap(), vec![0.5]);
    }

    #[test]
    fn shapes_round_trip_through_the_default_model() {
        let arch = ArchitectureConfig::default();
        let m: Model<f32> = Model::init(&arch, 3).unwrap();
        let x: Vec<f32> = (0..2 * 4096).map(|i| ((i % 97) as f32 / 48.0) - 1.0).collect();
        let z = m.encode(&x, 2, BnMode::Eval).unwrap();
        assert_eq!(z.len(), 2 * 1024);
        let y = m.decode(&z, 2, BnMode::Eval).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(matches!(m.encode(&x[1..], 2, BnMode::Eval), Err(Error::Shape(_))));
        assert!(matches!(m.decode(&z[..100], 2, BnMode::Eval), Err(Error::Shape(_))));
    }
}
