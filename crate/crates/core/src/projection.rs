//! Learnable projection pair `(P1, P2)` acting on the latent space, the
//! projection-algebra penalty, and its diagnostics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{dot, frobenius_sq, gemm, matmul_sq};
use crate::nn::{ParamBlock, Slot};
use crate::real::Real;

pub const NORM_EPS: f64 = 1e-12;
pub const INIT_NOISE_STD: f64 = 0.01;

/// Two square `dim x dim` matrices stored row-major as `proj.P1`, `proj.P2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionPair<T> {
    dim: usize,
    p1: Slot,
    p2: Slot,
    pub params: ParamBlock<T>,
}

impl<T: Real> ProjectionPair<T> {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_NOISE_STD).expect("positive std");
        let mut draw = |k: usize| {
            let (i, j) = (k / dim, k % dim);
            let base = if i == j { 0.5 } else { 0.0 };
            T::lit(base + normal.sample(rng))
        };
        let a: Vec<T> = (0..dim * dim).map(&mut draw).collect();
        let b: Vec<T> = (0..dim * dim).map(&mut draw).collect();
        Self::from_matrices(dim, a, b).expect("sizes match")
    }

    pub fn from_matrices(dim: usize, p1: Vec<T>, p2: Vec<T>) -> Result<Self> {
        if dim == 0 || p1.len() != dim * dim || p2.len() != dim * dim {
            return Err(Error::Shape(format!(
                "projection matrices must be {dim}x{dim}, got {} and {} entries",
                p1.len(),
                p2.len()
            )));
        }
        if p1.iter().chain(&p2).any(|v| !v.is_finite()) {
            return Err(Error::Param("projection entries must be finite".into()));
        }
        let mut params = ParamBlock::default();
        let mut it = p1.into_iter();
        let s1 = params.push("proj.P1".into(), vec![dim, dim], || it.next().unwrap());
        let mut it = p2.into_iter();
        let s2 = params.push("proj.P2".into(), vec![dim, dim], || it.next().unwrap());
        Ok(Self {
            dim,
            p1: s1,
            p2: s2,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p1(&self) -> &[T] {
        self.params.get(self.p1)
    }

    pub fn p2(&self) -> &[T] {
        self.params.get(self.p2)
    }

    pub fn slots(&self) -> (Slot, Slot) {
        (self.p1, self.p2)
    }

    /// `z1 = P1 z`, `z2 = P2 z` for each of `batch` row vectors in `z`.
    pub fn project(&self, z: &[T], batch: usize) -> Result<(Vec<T>, Vec<T>)> {
        let d = self.dim;
        if z.len() != batch * d {
            return Err(Error::Shape(format!(
                "expected {batch} latents of length {d}, got {} values",
                z.len()
            )));
        }
        let mut z1 = vec![T::zero(); batch * d];
        let mut z2 = vec![T::zero(); batch * d];
        gemm(false, true, batch, d, d, T::one(), z, self.p1(), T::zero(), &mut z1);
        gemm(false, true, batch, d, d, T::one(), z, self.p2(), T::zero(), &mut z2);
        Ok((z1, z2))
    }

    /// Chain rule through [`Self::project`]. Returns the parameter gradient
    /// (laid out like `params`) when requested, and `dL/dz`.
    pub fn project_backward(
        &self,
        z: &[T],
        dz1: &[T],
        dz2: &[T],
        batch: usize,
        want_params: bool,
    ) -> (Option<Vec<T>>, Vec<T>) {
        let d = self.dim;
        let gp = want_params.then(|| {
            let mut g = vec![T::zero(); self.params.len()];
            gemm(true, false, d, d, batch, T::one(), dz1, z, T::zero(), &mut g[self.p1.range()]);
            gemm(true, false, d, d, batch, T::one(), dz2, z, T::zero(), &mut g[self.p2.range()]);
            g
        });
        let mut dz = vec![T::zero(); batch * d];
        gemm(false, false, batch, d, d, T::one(), dz1, self.p1(), T::zero(), &mut dz);
        gemm(false, false, batch, d, d, T::one(), dz2, self.p2(), T::one(), &mut dz);
        (gp, dz)
    }

    /// Projection-algebra penalty:
    /// `2 ||P1^T P2||_F^2 + ||P1^2 - P1||_F^2 + ||P2^2 - P2||_F^2`.
    pub fn proj_loss(&self) -> T {
        self.proj_loss_terms().total()
    }

    pub fn proj_loss_terms(&self) -> ProjLossTerms<T> {
        let n = self.dim;
        let cross = matmul_sq(n, true, self.p1(), false, self.p2());
        let s1 = idempotency_defect(n, self.p1());
        let s2 = idempotency_defect(n, self.p2());
        ProjLossTerms {
            cross: T::lit(2.0) * frobenius_sq(&cross),
            idem1: frobenius_sq(&s1),
            idem2: frobenius_sq(&s2),
        }
    }

    /// Value and gradient (laid out like `params`) of [`Self::proj_loss`].
    pub fn proj_loss_grad(&self) -> (T, Vec<T>) {
        let n = self.dim;
        let (p1, p2) = (self.p1(), self.p2());
        let a = matmul_sq(n, true, p1, false, p2);
        let s1 = idempotency_defect(n, p1);
        let s2 = idempotency_defect(n, p2);
        let loss = T::lit(2.0) * frobenius_sq(&a) + frobenius_sq(&s1) + frobenius_sq(&s2);

        let mut g = vec![T::zero(); self.params.len()];
        let four = T::lit(4.0);
        // d/dP1 2||P1^T P2||^2 = 4 P2 A^T ; d/dP2 = 4 P1 A
        gemm(false, true, n, n, n, four, p2, &a, T::zero(), &mut g[self.p1.range()]);
        gemm(false, false, n, n, n, four, p1, &a, T::zero(), &mut g[self.p2.range()]);
        idempotency_grad_into(n, p1, &s1, &mut g[self.p1.range()]);
        idempotency_grad_into(n, p2, &s2, &mut g[self.p2.range()]);
        (loss, g)
    }

    /// `||P1^T P2||_F / (||P1||_F ||P2||_F)`.
    pub fn cross_residual(&self) -> T {
        let n = self.dim;
        let a = matmul_sq(n, true, self.p1(), false, self.p2());
        let denom = (frobenius_sq(self.p1()) * frobenius_sq(self.p2()))
            .sqrt()
            .max(T::lit(NORM_EPS));
        frobenius_sq(&a).sqrt() / denom
    }

    /// `|z1^T z2| / max(||z1|| ||z2||, eps)` for a single latent vector.
    pub fn latent_orthogonality(&self, z: &[T]) -> Result<T> {
        let (z1, z2) = self.project(z, 1)?;
        Ok(cosine_magnitude(&z1, &z2))
    }

    /// Mean of [`Self::latent_orthogonality`] over a batch.
    pub fn mean_latent_orthogonality(&self, z: &[T], batch: usize) -> Result<T> {
        let (z1, z2) = self.project(z, batch)?;
        let d = self.dim;
        let sum: T = (0..batch)
            .map(|i| cosine_magnitude(&z1[i * d..(i + 1) * d], &z2[i * d..(i + 1) * d]))
            .sum();
        Ok(sum / T::lit(batch as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjLossTerms<T> {
    pub cross: T,
    pub idem1: T,
    pub idem2: T,
}

impl<T: Real> ProjLossTerms<T> {
    pub fn total(&self) -> T {
        self.cross + self.idem1 + self.idem2
    }
}

fn cosine_magnitude<T: Real>(a: &[T], b: &[T]) -> T {
    let denom = (dot(a, a).sqrt() * dot(b, b).sqrt()).max(T::lit(NORM_EPS));
    dot(a, b).abs() / denom
}

/// `P^2 - P`.
fn idempotency_defect<T: Real>(n: usize, p: &[T]) -> Vec<T> {
    let mut s = p.to_vec();
    gemm(false, false, n, n, n, T::one(), p, p, -T::one(), &mut s);
    s
}

/// Accumulate `2 (S P^T + P^T S - S)`, the gradient of `||P^2 - P||_F^2`.
fn idempotency_grad_into<T: Real>(n: usize, p: &[T], s: &[T], out: &mut [T]) {
    let two = T::lit(2.0);
    gemm(false, true, n, n, n, two, s, p, T::one(), out);
    gemm(true, false, n, n, n, two, p, s, T::one(), out);
    for (o, &v) in out.iter_mut().zip(s) {
        *o -= two * v;
    }
}

/// `||P^2 - P||_F / max(||P||_F, eps)`; zero exactly for idempotent `P`.
pub fn idempotency_residual<T: Real>(p: &[T], n: usize) -> Result<T> {
    if p.len() != n * n {
        return Err(Error::Shape(format!("expected a {n}x{n} matrix, got {} entries", p.len())));
    }
    let s = idempotency_defect(n, p);
    Ok(frobenius_sq(&s).sqrt() / frobenius_sq(p).sqrt().max(T::lit(NORM_EPS)))
}
