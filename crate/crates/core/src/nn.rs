//! Layer kernels and a sequential network with an explicit backward pass.
//!
//! All activations are stored batch-major (`N x C x H x W`, flattened). A
//! forward pass returns a [`Tape`] holding every intermediate activation so
//! that [`Sequential::backward`] can produce parameter and input gradients
//! without recomputation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::real::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Location of one named array inside a [`ParamBlock`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
}

/// Contiguous storage for a set of named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    entries: Vec<ParamEntry>,
    data: Vec<T>,
}

impl<T: Real> Default for ParamBlock<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            data: Vec::new(),
        }
    }
}

impl<T: Real> ParamBlock<T> {
    pub fn push(&mut self, name: String, shape: Vec<usize>, mut fill: impl FnMut() -> T) -> Slot {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate {name}");
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.data.len(),
            len,
        };
        self.data.extend((0..len).map(|_| fill()));
        self.entries.push(ParamEntry { name, shape, slot });
        slot
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, slot: Slot) -> &[T] {
        &self.data[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [T] {
        &mut self.data[slot.range()]
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Geometry of a strided 2-D convolution from a "big" grid to a "small" one.
///
/// A forward convolution maps big to small. A transposed convolution uses the
/// same geometry in reverse, so both share `im2col`/`col2im`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub big_c: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub small_c: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        big_c: usize,
        big_h: usize,
        big_w: usize,
        small_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let small_h = (big_h + 2 * pad - kernel) / stride + 1;
        let small_w = (big_w + 2 * pad - kernel) / stride + 1;
        Self {
            big_c,
            big_h,
            big_w,
            small_c,
            small_h,
            small_w,
            kernel,
            stride,
            pad,
        }
    }

    pub fn big_size(&self) -> usize {
        self.big_c * self.big_h * self.big_w
    }

    pub fn small_size(&self) -> usize {
        self.small_c * self.small_h * self.small_w
    }

    fn col_rows(&self) -> usize {
        self.big_c * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.small_h * self.small_w
    }
}

/// Unfold one big-grid sample into `(big_c * k * k) x (small_h * small_w)`.
pub fn im2col<T: Real>(g: &ConvGeom, big: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.big_c {
        let plane = &big[c * g.big_h * g.big_w..(c + 1) * g.big_h * g.big_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.small_h {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.small_w..(oy + 1) * g.small_w];
                    if y < 0 || y >= g.big_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.big_w..(y as usize + 1) * g.big_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if x < 0 || x >= g.big_w as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the big grid.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], big: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.big_c {
        let plane = &mut big[c * g.big_h * g.big_w..(c + 1) * g.big_h * g.big_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.small_h {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= g.big_h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.big_w..(y as usize + 1) * g.big_w];
                    for ox in 0..g.small_w {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x >= 0 && x < g.big_w as isize {
                            dst[x as usize] += src[oy * g.small_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Layer {
    /// Weight `[small_c, big_c, k, k]`; maps big to small.
    Conv {
        geom: ConvGeom,
        weight: Slot,
        bias: Slot,
    },
    /// Weight `[small_c, big_c, k, k]` (input channels first); maps small to big.
    ConvTranspose {
        geom: ConvGeom,
        weight: Slot,
        bias: Slot,
    },
    BatchNorm {
        channels: usize,
        spatial: usize,
        gamma: Slot,
        beta: Slot,
        running_mean: Slot,
        running_var: Slot,
    },
    Linear {
        inputs: usize,
        outputs: usize,
        weight: Slot,
        bias: Slot,
    },
    GlobalAvgPool {
        channels: usize,
        spatial: usize,
    },
    LeakyRelu {
        size: usize,
        slope: f64,
    },
    Relu {
        size: usize,
    },
    Sigmoid {
        size: usize,
    },
    /// Clamp into `[eps, 1 - eps]`; zero gradient where the clamp is active.
    ClampProb {
        size: usize,
        eps: f64,
    },
}

impl Layer {
    pub fn in_size(&self) -> usize {
        match *self {
            Layer::Conv { geom, .. } => geom.big_size(),
            Layer::ConvTranspose { geom, .. } => geom.small_size(),
            Layer::BatchNorm {
                channels, spatial, ..
            } => channels * spatial,
            Layer::Linear { inputs, .. } => inputs,
            Layer::GlobalAvgPool { channels, spatial } => channels * spatial,
            Layer::LeakyRelu { size, .. }
            | Layer::Relu { size }
            | Layer::Sigmoid { size }
            | Layer::ClampProb { size, .. } => size,
        }
    }

    pub fn out_size(&self) -> usize {
        match *self {
            Layer::Conv { geom, .. } => geom.small_size(),
            Layer::ConvTranspose { geom, .. } => geom.big_size(),
            Layer::GlobalAvgPool { channels, .. } => channels,
            Layer::Linear { outputs, .. } => outputs,
            _ => self.in_size(),
        }
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Saved activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    batch: usize,
    mode: BnMode,
    acts: Vec<Vec<T>>,
    bn: Vec<Option<BnCache<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("tape has input")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub params: Option<Vec<T>>,
    pub input: Option<Vec<T>>,
}

/// A feed-forward stack of [`Layer`]s with its own parameter storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    layers: Vec<Layer>,
    pub params: ParamBlock<T>,
    pub buffers: ParamBlock<T>,
}

impl<T: Real> Sequential<T> {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_size(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_size)
    }

    pub fn out_size(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_size)
    }

    pub fn forward(&self, input: &[T], batch: usize, mode: BnMode) -> Result<Tape<T>> {
        let per = self.in_size();
        if batch == 0 || input.len() != batch * per {
            return Err(Error::Shape(format!(
                "expected {batch} x {per} inputs, got {} values",
                input.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut bn = Vec::with_capacity(self.layers.len());
        acts.push(input.to_vec());
        for layer in &self.layers {
            let x = acts.last().unwrap();
            let (y, cache) = self.layer_forward(layer, x, batch, mode);
            acts.push(y);
            bn.push(cache);
        }
        Ok(Tape {
            batch,
            mode,
            acts,
            bn,
        })
    }

    /// Forward pass keeping only the output.
    pub fn infer(&self, input: &[T], batch: usize, mode: BnMode) -> Result<Vec<T>> {
        let mut tape = self.forward(input, batch, mode)?;
        Ok(tape.acts.pop().unwrap())
    }

    /// Which linear piece each non-smooth unit sat on during `tape`'s
    /// forward pass. Two passes with equal regions lie on one smooth piece.
    pub fn regions(&self, tape: &Tape<T>) -> Vec<u8> {
        let mut out = Vec::new();
        for (layer, x) in self.layers.iter().zip(&tape.acts) {
            match *layer {
                Layer::LeakyRelu { .. } | Layer::Relu { .. } => {
                    out.extend(x.iter().map(|&v| u8::from(v > T::zero())))
                }
                Layer::ClampProb { eps, .. } => {
                    let (lo, hi) = (T::lit(eps), T::one() - T::lit(eps));
                    out.extend(x.iter().map(|&v| u8::from(v >= lo) + u8::from(v > hi)))
                }
                _ => {}
            }
        }
        out
    }

    /// Forward pass that keeps every non-smooth unit on the piece recorded
    /// in `pieces` (as produced by [`Self::regions`]), consuming it from the
    /// front. Inside one piece the network is smooth in its parameters.
    pub fn forward_on_pieces(
        &self,
        input: &[T],
        batch: usize,
        mode: BnMode,
        pieces: &mut &[u8],
    ) -> Result<Tape<T>> {
        let per = self.in_size();
        if batch == 0 || input.len() != batch * per {
            return Err(Error::Shape(format!(
                "expected {batch} x {per} inputs, got {} values",
                input.len()
            )));
        }
        let mut acts = vec![input.to_vec()];
        let mut bn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = acts.last().unwrap();
            let fixed = |pieces: &mut &[u8], f: &dyn Fn(T, u8) -> T| -> Result<Vec<T>> {
                if pieces.len() < x.len() {
                    return Err(Error::Shape("piece list shorter than the network".into()));
                }
                let (head, rest) = pieces.split_at(x.len());
                *pieces = rest;
                Ok(x.iter().zip(head).map(|(&v, &r)| f(v, r)).collect())
            };
            let (y, cache) = match *layer {
                Layer::LeakyRelu { slope, .. } => {
                    let a = T::lit(slope);
                    (fixed(pieces, &|v, r| if r == 1 { v } else { v * a })?, None)
                }
                Layer::Relu { .. } => (fixed(pieces, &|v, r| if r == 1 { v } else { T::zero() })?, None),
                Layer::ClampProb { eps, .. } => {
                    let (lo, hi) = (T::lit(eps), T::one() - T::lit(eps));
                    let f = |v, r| match r {
                        0 => lo,
                        1 => v,
                        _ => hi,
                    };
                    (fixed(pieces, &f)?, None)
                }
                _ => self.layer_forward(layer, x, batch, mode),
            };
            acts.push(y);
            bn.push(cache);
        }
        Ok(Tape {
            batch,
            mode,
            acts,
            bn,
        })
    }

    fn layer_forward(
        &self,
        layer: &Layer,
        x: &[T],
        n: usize,
        mode: BnMode,
    ) -> (Vec<T>, Option<BnCache<T>>) {
        let p = &self.params;
        match *layer {
            Layer::Conv { geom, weight, bias } => {
                let w = p.get(weight);
                let b = p.get(bias);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let mut cols = vec![T::zero(); rows * ncols];
                let mut y = vec![T::zero(); n * geom.small_size()];
                for s in 0..n {
                    im2col(&geom, &x[s * geom.big_size()..(s + 1) * geom.big_size()], &mut cols);
                    let out = &mut y[s * geom.small_size()..(s + 1) * geom.small_size()];
                    for (c, row) in out.chunks_mut(ncols).enumerate() {
                        row.fill(b[c]);
                    }
                    gemm(false, false, geom.small_c, ncols, rows, T::one(), w, &cols, T::one(), out);
                }
                (y, None)
            }
            Layer::ConvTranspose { geom, weight, bias } => {
                let w = p.get(weight);
                let b = p.get(bias);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let mut cols = vec![T::zero(); rows * ncols];
                let plane = geom.big_h * geom.big_w;
                let mut y = vec![T::zero(); n * geom.big_size()];
                for s in 0..n {
                    let xs = &x[s * geom.small_size()..(s + 1) * geom.small_size()];
                    gemm(true, false, rows, ncols, geom.small_c, T::one(), w, xs, T::zero(), &mut cols);
                    let out = &mut y[s * geom.big_size()..(s + 1) * geom.big_size()];
                    for (c, ch) in out.chunks_mut(plane).enumerate() {
                        ch.fill(b[c]);
                    }
                    col2im(&geom, &cols, out);
                }
                (y, None)
            }
            Layer::BatchNorm {
                channels,
                spatial,
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let g = p.get(gamma);
                let bt = p.get(beta);
                let eps = T::lit(BN_EPS);
                let mut y = vec![T::zero(); x.len()];
                match mode {
                    BnMode::Eval => {
                        let rm = self.buffers.get(running_mean);
                        let rv = self.buffers.get(running_var);
                        for s in 0..n {
                            for c in 0..channels {
                                let inv = (rv[c] + eps).sqrt().recip();
                                let base = (s * channels + c) * spatial;
                                for i in base..base + spatial {
                                    y[i] = g[c] * (x[i] - rm[c]) * inv + bt[c];
                                }
                            }
                        }
                        (y, None)
                    }
                    BnMode::Train => {
                        let m = T::lit((n * spatial) as f64);
                        let mut mean = vec![T::zero(); channels];
                        let mut var = vec![T::zero(); channels];
                        for s in 0..n {
                            for c in 0..channels {
                                let base = (s * channels + c) * spatial;
                                mean[c] += x[base..base + spatial].iter().copied().sum::<T>();
                            }
                        }
                        for v in mean.iter_mut() {
                            *v /= m;
                        }
                        for s in 0..n {
                            for c in 0..channels {
                                let base = (s * channels + c) * spatial;
                                let mu = mean[c];
                                var[c] += x[base..base + spatial]
                                    .iter()
                                    .map(|&v| (v - mu) * (v - mu))
                                    .sum::<T>();
                            }
                        }
                        for v in var.iter_mut() {
                            *v /= m;
                        }
                        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                        let mut xhat = vec![T::zero(); x.len()];
                        for s in 0..n {
                            for c in 0..channels {
                                let base = (s * channels + c) * spatial;
                                for i in base..base + spatial {
                                    xhat[i] = (x[i] - mean[c]) * inv_std[c];
                                    y[i] = g[c] * xhat[i] + bt[c];
                                }
                            }
                        }
                        (
                            y,
                            Some(BnCache {
                                xhat,
                                inv_std,
                                mean,
                                var,
                            }),
                        )
                    }
                }
            }
            Layer::Linear {
                inputs,
                outputs,
                weight,
                bias,
            } => {
                let b = p.get(bias);
                let mut y = vec![T::zero(); n * outputs];
                for row in y.chunks_mut(outputs) {
                    row.copy_from_slice(b);
                }
                gemm(false, true, n, outputs, inputs, T::one(), x, p.get(weight), T::one(), &mut y);
                (y, None)
            }
            Layer::GlobalAvgPool { channels, spatial } => {
                let scale = T::lit(1.0 / spatial as f64);
                let y = (0..n * channels)
                    .map(|i| x[i * spatial..(i + 1) * spatial].iter().copied().sum::<T>() * scale)
                    .collect();
                (y, None)
            }
            Layer::LeakyRelu { slope, .. } => {
                let a = T::lit(slope);
                (x.iter().map(|&v| if v > T::zero() { v } else { v * a }).collect(), None)
            }
            Layer::Relu { .. } => (x.iter().map(|&v| v.max(T::zero())).collect(), None),
            Layer::Sigmoid { .. } => (x.iter().map(|&v| sigmoid(v)).collect(), None),
            Layer::ClampProb { eps, .. } => {
                let lo = T::lit(eps);
                let hi = T::one() - lo;
                (x.iter().map(|&v| v.max(lo).min(hi)).collect(), None)
            }
        }
    }

    /// Backpropagate `dy` (gradient of a scalar w.r.t. the tape output).
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dy: &[T],
        want_params: bool,
        want_input: bool,
    ) -> Result<Gradients<T>> {
        if dy.len() != tape.output().len() {
            return Err(Error::Shape(format!(
                "output gradient has {} values, tape output has {}",
                dy.len(),
                tape.output().len()
            )));
        }
        let n = tape.batch;
        let mut gp = if want_params {
            Some(vec![T::zero(); self.params.len()])
        } else {
            None
        };
        let mut g = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = want_input || i > 0;
            let x = &tape.acts[i];
            let y = &tape.acts[i + 1];
            g = self.layer_backward(
                layer,
                x,
                y,
                tape.bn[i].as_ref(),
                tape.mode,
                n,
                &g,
                gp.as_deref_mut(),
                need_dx,
            );
            if !need_dx {
                break;
            }
        }
        Ok(Gradients {
            params: gp,
            input: if want_input { Some(g) } else { None },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        layer: &Layer,
        x: &[T],
        y: &[T],
        cache: Option<&BnCache<T>>,
        mode: BnMode,
        n: usize,
        dy: &[T],
        gp: Option<&mut [T]>,
        need_dx: bool,
    ) -> Vec<T> {
        let p = &self.params;
        match *layer {
            Layer::Conv { geom, weight, bias } => {
                let w = p.get(weight);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let mut cols = vec![T::zero(); rows * ncols];
                let mut dx = if need_dx {
                    vec![T::zero(); n * geom.big_size()]
                } else {
                    Vec::new()
                };
                let mut gp = gp;
                for s in 0..n {
                    let dys = &dy[s * geom.small_size()..(s + 1) * geom.small_size()];
                    if let Some(gp) = gp.as_deref_mut() {
                        im2col(&geom, &x[s * geom.big_size()..(s + 1) * geom.big_size()], &mut cols);
                        let gw = &mut gp[weight.range()];
                        gemm(false, true, geom.small_c, rows, ncols, T::one(), dys, &cols, T::one(), gw);
                        let gb = &mut gp[bias.range()];
                        for (c, row) in dys.chunks(ncols).enumerate() {
                            gb[c] += row.iter().copied().sum::<T>();
                        }
                    }
                    if need_dx {
                        gemm(true, false, rows, ncols, geom.small_c, T::one(), w, dys, T::zero(), &mut cols);
                        col2im(&geom, &cols, &mut dx[s * geom.big_size()..(s + 1) * geom.big_size()]);
                    }
                }
                dx
            }
            Layer::ConvTranspose { geom, weight, bias } => {
                let w = p.get(weight);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let mut cols = vec![T::zero(); rows * ncols];
                let plane = geom.big_h * geom.big_w;
                let mut dx = if need_dx {
                    vec![T::zero(); n * geom.small_size()]
                } else {
                    Vec::new()
                };
                let mut gp = gp;
                for s in 0..n {
                    let dys = &dy[s * geom.big_size()..(s + 1) * geom.big_size()];
                    im2col(&geom, dys, &mut cols);
                    if let Some(gp) = gp.as_deref_mut() {
                        let xs = &x[s * geom.small_size()..(s + 1) * geom.small_size()];
                        let gw = &mut gp[weight.range()];
                        gemm(false, true, geom.small_c, rows, ncols, T::one(), xs, &cols, T::one(), gw);
                        let gb = &mut gp[bias.range()];
                        for (c, ch) in dys.chunks(plane).enumerate() {
                            gb[c] += ch.iter().copied().sum::<T>();
                        }
                    }
                    if need_dx {
                        let out = &mut dx[s * geom.small_size()..(s + 1) * geom.small_size()];
                        gemm(false, false, geom.small_c, ncols, rows, T::one(), w, &cols, T::zero(), out);
                    }
                }
                dx
            }
            Layer::BatchNorm {
                channels,
                spatial,
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let g = p.get(gamma);
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                let mut dx = vec![T::zero(); dy.len()];
                match (mode, cache) {
                    (BnMode::Train, Some(c)) => {
                        let m = T::lit((n * spatial) as f64);
                        let mut sum_dxhat = vec![T::zero(); channels];
                        let mut sum_dxhat_xhat = vec![T::zero(); channels];
                        for s in 0..n {
                            for ch in 0..channels {
                                let base = (s * channels + ch) * spatial;
                                for i in base..base + spatial {
                                    dbeta[ch] += dy[i];
                                    dgamma[ch] += dy[i] * c.xhat[i];
                                    let d = dy[i] * g[ch];
                                    sum_dxhat[ch] += d;
                                    sum_dxhat_xhat[ch] += d * c.xhat[i];
                                }
                            }
                        }
                        if need_dx {
                            for s in 0..n {
                                for ch in 0..channels {
                                    let base = (s * channels + ch) * spatial;
                                    let k = c.inv_std[ch] / m;
                                    for i in base..base + spatial {
                                        let d = dy[i] * g[ch];
                                        dx[i] = k
                                            * (m * d - sum_dxhat[ch] - c.xhat[i] * sum_dxhat_xhat[ch]);
                                    }
                                }
                            }
                        }
                    }
                    _ => {
                        let rm = self.buffers.get(running_mean);
                        let rv = self.buffers.get(running_var);
                        for s in 0..n {
                            for ch in 0..channels {
                                let inv = (rv[ch] + T::lit(BN_EPS)).sqrt().recip();
                                let base = (s * channels + ch) * spatial;
                                for i in base..base + spatial {
                                    dbeta[ch] += dy[i];
                                    dgamma[ch] += dy[i] * (x[i] - rm[ch]) * inv;
                                    dx[i] = dy[i] * g[ch] * inv;
                                }
                            }
                        }
                    }
                }
                if let Some(gp) = gp {
                    for (d, v) in gp[gamma.range()].iter_mut().zip(&dgamma) {
                        *d += *v;
                    }
                    for (d, v) in gp[beta.range()].iter_mut().zip(&dbeta) {
                        *d += *v;
                    }
                }
                dx
            }
            Layer::Linear {
                inputs,
                outputs,
                weight,
                bias,
            } => {
                if let Some(gp) = gp {
                    gemm(true, false, outputs, inputs, n, T::one(), dy, x, T::one(), &mut gp[weight.range()]);
                    let gb = &mut gp[bias.range()];
                    for row in dy.chunks(outputs) {
                        for (d, v) in gb.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                }
                let mut dx = vec![T::zero(); if need_dx { n * inputs } else { 0 }];
                if need_dx {
                    gemm(false, false, n, inputs, outputs, T::one(), dy, p.get(weight), T::zero(), &mut dx);
                }
                dx
            }
            Layer::GlobalAvgPool { channels, spatial } => {
                let scale = T::lit(1.0 / spatial as f64);
                let mut dx = vec![T::zero(); n * channels * spatial];
                for (i, chunk) in dx.chunks_mut(spatial).enumerate() {
                    chunk.fill(dy[i] * scale);
                }
                dx
            }
            Layer::LeakyRelu { slope, .. } => {
                let a = T::lit(slope);
                x.iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > T::zero() { d } else { d * a })
                    .collect()
            }
            Layer::Relu { .. } => x
                .iter()
                .zip(dy)
                .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                .collect(),
            Layer::Sigmoid { .. } => y
                .iter()
                .zip(dy)
                .map(|(&s, &d)| d * s * (T::one() - s))
                .collect(),
            Layer::ClampProb { eps, .. } => {
                let lo = T::lit(eps);
                let hi = T::one() - lo;
                x.iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v < lo || v > hi { T::zero() } else { d })
                    .collect()
            }
        }
    }

    /// Fold the batch statistics recorded on `tape` into the running averages.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        let mom = T::lit(BN_MOMENTUM);
        for (layer, cache) in self.layers.iter().zip(&tape.bn) {
            if let (
                Layer::BatchNorm {
                    spatial,
                    running_mean,
                    running_var,
                    ..
                },
                Some(c),
            ) = (layer, cache)
            {
                let m = (tape.batch * spatial) as f64;
                let unbias = T::lit(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
                for (r, &v) in self.buffers.get_mut(*running_mean).iter_mut().zip(&c.mean) {
                    *r = (T::one() - mom) * *r + mom * v;
                }
                for (r, &v) in self.buffers.get_mut(*running_var).iter_mut().zip(&c.var) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
            }
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Incrementally assembles a [`Sequential`], drawing initial weights as it goes.
pub struct SequentialBuilder<'r, T, R: Rng> {
    prefix: String,
    rng: &'r mut R,
    weight_std: f64,
    layers: Vec<Layer>,
    params: ParamBlock<T>,
    buffers: ParamBlock<T>,
}

impl<'r, T: Real, R: Rng> SequentialBuilder<'r, T, R> {
    pub fn new(prefix: &str, rng: &'r mut R, weight_std: f64) -> Self {
        Self {
            prefix: prefix.to_string(),
            rng,
            weight_std,
            layers: Vec::new(),
            params: ParamBlock::default(),
            buffers: ParamBlock::default(),
        }
    }

    fn idx(&self) -> usize {
        self.layers.len()
    }

    fn normal_weights(&mut self, name: String, shape: Vec<usize>) -> Slot {
        let normal = Normal::new(0.0, self.weight_std).expect("positive std");
        let rng = &mut *self.rng;
        self.params
            .push(name, shape, || T::lit(normal.sample(rng)))
    }

    pub fn conv(mut self, geom: ConvGeom) -> Self {
        let i = self.idx();
        let k = geom.kernel;
        let weight = self.normal_weights(
            format!("{}.{i}.conv.weight", self.prefix),
            vec![geom.small_c, geom.big_c, k, k],
        );
        let bias = self
            .params
            .push(format!("{}.{i}.conv.bias", self.prefix), vec![geom.small_c], T::zero);
        self.layers.push(Layer::Conv { geom, weight, bias });
        self
    }

    pub fn conv_transpose(mut self, geom: ConvGeom) -> Self {
        let i = self.idx();
        let k = geom.kernel;
        let weight = self.normal_weights(
            format!("{}.{i}.deconv.weight", self.prefix),
            vec![geom.small_c, geom.big_c, k, k],
        );
        let bias = self
            .params
            .push(format!("{}.{i}.deconv.bias", self.prefix), vec![geom.big_c], T::zero);
        self.layers.push(Layer::ConvTranspose { geom, weight, bias });
        self
    }

    pub fn batch_norm(mut self, channels: usize, spatial: usize) -> Self {
        let i = self.idx();
        let p = &self.prefix;
        let gamma = self.params.push(format!("{p}.{i}.bn.gamma"), vec![channels], T::one);
        let beta = self.params.push(format!("{p}.{i}.bn.beta"), vec![channels], T::zero);
        let running_mean = self
            .buffers
            .push(format!("{p}.{i}.bn.running_mean"), vec![channels], T::zero);
        let running_var = self
            .buffers
            .push(format!("{p}.{i}.bn.running_var"), vec![channels], T::one);
        self.layers.push(Layer::BatchNorm {
            channels,
            spatial,
            gamma,
            beta,
            running_mean,
            running_var,
        });
        self
    }

    pub fn linear(mut self, inputs: usize, outputs: usize) -> Self {
        let i = self.idx();
        let weight = self.normal_weights(
            format!("{}.{i}.linear.weight", self.prefix),
            vec![outputs, inputs],
        );
        let bias = self
            .params
            .push(format!("{}.{i}.linear.bias", self.prefix), vec![outputs], T::zero);
        self.layers.push(Layer::Linear {
            inputs,
            outputs,
            weight,
            bias,
        });
        self
    }

    pub fn global_avg_pool(mut self, channels: usize, spatial: usize) -> Self {
        self.layers.push(Layer::GlobalAvgPool { channels, spatial });
        self
    }

    fn last_size(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_size)
    }

    pub fn leaky_relu(mut self, slope: f64) -> Self {
        let size = self.last_size();
        self.layers.push(Layer::LeakyRelu { size, slope });
        self
    }

    pub fn relu(mut self) -> Self {
        let size = self.last_size();
        self.layers.push(Layer::Relu { size });
        self
    }

    pub fn sigmoid(mut self) -> Self {
        let size = self.last_size();
        self.layers.push(Layer::Sigmoid { size });
        self
    }

    pub fn clamp_prob(mut self, eps: f64) -> Self {
        let size = self.last_size();
        self.layers.push(Layer::ClampProb { size, eps });
        self
    }

    pub fn build(self) -> Sequential<T> {
        Sequential {
            layers: self.layers,
            params: self.params,
            buffers: self.buffers,
        }
    }
}
