//! The five training objectives and their input gradients.
//!
//! Sign conventions: every function returns the quantity its owner
//! *descends*. Probabilities are expected to arrive already clamped away from
//! 0 and 1 by the discriminator networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Scalar loss values from one training step (or an epoch average).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_rec: f64,
    pub l_adv1_d: f64,
    pub l_adv1_g: f64,
    pub l_adv2_d: f64,
    pub l_adv2_e: f64,
    pub l_diff: f64,
    pub l_proj: f64,
}

impl LossBundle {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("l_rec", self.l_rec),
            ("l_adv1_d", self.l_adv1_d),
            ("l_adv1_g", self.l_adv1_g),
            ("l_adv2_d", self.l_adv2_d),
            ("l_adv2_e", self.l_adv2_e),
            ("l_diff", self.l_diff),
            ("l_proj", self.l_proj),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn accumulate(&mut self, other: &LossBundle) {
        self.l_rec += other.l_rec;
        self.l_adv1_d += other.l_adv1_d;
        self.l_adv1_g += other.l_adv1_g;
        self.l_adv2_d += other.l_adv2_d;
        self.l_adv2_e += other.l_adv2_e;
        self.l_diff += other.l_diff;
        self.l_proj += other.l_proj;
    }

    pub fn scaled(&self, s: f64) -> LossBundle {
        LossBundle {
            l_rec: self.l_rec * s,
            l_adv1_d: self.l_adv1_d * s,
            l_adv1_g: self.l_adv1_g * s,
            l_adv2_d: self.l_adv2_d * s,
            l_adv2_e: self.l_adv2_e * s,
            l_diff: self.l_diff * s,
            l_proj: self.l_proj * s,
        }
    }
}

fn same_len<T>(a: &[T], b: &[T], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: operands have {} and {} values",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn mean<T: Real>(v: impl Iterator<Item = T>, n: usize) -> T {
    v.sum::<T>() / T::lit(n as f64)
}

/// Mean squared error over all images and pixels.
pub fn rec_loss<T: Real>(x: &[T], r: &[T]) -> Result<T> {
    same_len(x, r, "rec_loss")?;
    if x.is_empty() {
        return Ok(T::zero());
    }
    Ok(mean(x.iter().zip(r).map(|(&a, &b)| (a - b) * (a - b)), x.len()))
}

/// `dL/dR` of [`rec_loss`].
pub fn rec_loss_grad<T: Real>(x: &[T], r: &[T]) -> Result<Vec<T>> {
    same_len(x, r, "rec_loss")?;
    let k = T::lit(2.0 / x.len().max(1) as f64);
    Ok(x.iter().zip(r).map(|(&a, &b)| k * (b - a)).collect())
}

/// `-[mean log d_real + mean log(1 - d_fake)]`.
pub fn adv1_discriminator_loss<T: Real>(d_real: &[T], d_fake: &[T]) -> T {
    -(mean(d_real.iter().map(|&p| p.ln()), d_real.len())
        + mean(d_fake.iter().map(|&p| (T::one() - p).ln()), d_fake.len()))
}

/// Gradients of [`adv1_discriminator_loss`] w.r.t. `d_real` and `d_fake`.
pub fn adv1_discriminator_loss_grad<T: Real>(d_real: &[T], d_fake: &[T]) -> (Vec<T>, Vec<T>) {
    let nr = T::lit(d_real.len() as f64);
    let nf = T::lit(d_fake.len() as f64);
    (
        d_real.iter().map(|&p| -T::one() / (p * nr)).collect(),
        d_fake.iter().map(|&p| T::one() / ((T::one() - p) * nf)).collect(),
    )
}

/// Saturating generator objective `mean log(1 - d_fake)`.
pub fn adv1_generator_loss<T: Real>(d_fake: &[T]) -> T {
    mean(d_fake.iter().map(|&p| (T::one() - p).ln()), d_fake.len())
}

pub fn adv1_generator_loss_grad<T: Real>(d_fake: &[T]) -> Vec<T> {
    let n = T::lit(d_fake.len() as f64);
    d_fake.iter().map(|&p| -T::one() / ((T::one() - p) * n)).collect()
}

/// Non-saturating alternative `-mean log d_fake`.
pub fn adv1_generator_loss_non_saturating<T: Real>(d_fake: &[T]) -> T {
    -mean(d_fake.iter().map(|&p| p.ln()), d_fake.len())
}

pub fn adv1_generator_loss_non_saturating_grad<T: Real>(d_fake: &[T]) -> Vec<T> {
    let n = T::lit(d_fake.len() as f64);
    d_fake.iter().map(|&p| -T::one() / (p * n)).collect()
}

/// `-[mean log d_encoded + mean log(1 - d_uniform)]`.
///
/// `d_encoded = D2(E(x))`, `d_uniform = D2(u)` with `u ~ U[0,1]`. The latent
/// discriminator labels encoder output as 1 and prior samples as 0.
pub fn adv2_discriminator_loss<T: Real>(d_encoded: &[T], d_uniform: &[T]) -> T {
    adv1_discriminator_loss(d_encoded, d_uniform)
}

pub fn adv2_discriminator_loss_grad<T: Real>(d_encoded: &[T], d_uniform: &[T]) -> (Vec<T>, Vec<T>) {
    adv1_discriminator_loss_grad(d_encoded, d_uniform)
}

/// `mean log d_encoded`; the encoder descends this.
pub fn adv2_encoder_loss<T: Real>(d_encoded: &[T]) -> T {
    mean(d_encoded.iter().map(|&p| p.ln()), d_encoded.len())
}

pub fn adv2_encoder_loss_grad<T: Real>(d_encoded: &[T]) -> Vec<T> {
    let n = T::lit(d_encoded.len() as f64);
    d_encoded.iter().map(|&p| T::one() / (p * n)).collect()
}

/// `-sum_i mean_pixels |Y1_i - Y2_i|` over a batch of `batch` images.
pub fn diff_loss<T: Real>(y1: &[T], y2: &[T], batch: usize) -> Result<T> {
    same_len(y1, y2, "diff_loss")?;
    if batch == 0 || y1.len() % batch != 0 {
        return Err(Error::Shape(format!(
            "diff_loss: {} values do not split into {batch} images",
            y1.len()
        )));
    }
    let pixels = y1.len() / batch;
    let total: T = y1.iter().zip(y2).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(-total / T::lit(pixels as f64))
}

/// Gradients of [`diff_loss`] w.r.t. `Y1` (the `Y2` gradient is its negation).
/// Uses the subgradient 0 where `Y1 = Y2`.
pub fn diff_loss_grad<T: Real>(y1: &[T], y2: &[T], batch: usize) -> Result<Vec<T>> {
    same_len(y1, y2, "diff_loss")?;
    if batch == 0 || y1.len() % batch != 0 {
        return Err(Error::Shape(format!(
            "diff_loss: {} values do not split into {batch} images",
            y1.len()
        )));
    }
    let k = T::lit(batch as f64 / y1.len() as f64);
    Ok(y1
        .iter()
        .zip(y2)
        .map(|(&a, &b)| {
            let d = a - b;
            if d > T::zero() {
                -k
            } else if d < T::zero() {
                k
            } else {
                T::zero()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.05..0.95)).collect()
    }

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut xp = x.to_vec();
        xp[i] += h;
        let lp = f(&xp);
        xp[i] -= 2.0 * h;
        let lm = f(&xp);
        (lp - lm) / (2.0 * h)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn rec_loss_values() {
        let x = vec![0.3; 16];
        assert_eq!(rec_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(rec_loss(&[1.0; 16], &[0.0; 16]).unwrap(), 1.0);
        assert!(matches!(rec_loss(&[1.0; 3], &[1.0; 4]), Err(Error::Shape(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, p) = (3, 5);
        let a: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..p {
                acc += (a[i * p + j] - b[i * p + j]).powi(2);
            }
        }
        assert!((rec_loss(&a, &b).unwrap() - acc / (n * p) as f64).abs() < 1e-10);
    }

    #[test]
    fn adversarial_closed_forms() {
        let half = [0.5; 4];
        assert!((adv1_discriminator_loss(&half, &half) - 2.0 * LN2).abs() < 1e-12);
        assert!((adv2_discriminator_loss(&half, &half) - 2.0 * LN2).abs() < 1e-12);
        assert!((adv1_generator_loss(&half) + LN2).abs() < 1e-12);
        assert!((adv2_encoder_loss(&half) + LN2).abs() < 1e-12);

        let (floor, ceil) = (1e-6, 1.0 - 1e-6);
        let optimal = adv1_discriminator_loss(&[ceil; 3], &[floor; 3]);
        assert!(optimal > 0.0 && optimal < 3e-6);
        assert!(adv2_discriminator_loss(&[ceil], &[floor]) < 3e-6);
        assert!((adv1_generator_loss(&[ceil]) - (1e-6f64).ln()).abs() < 1e-6);
        assert!((adv1_generator_loss(&[ceil]) + 13.8155).abs() < 1e-4);
        assert!((adv2_encoder_loss(&[floor]) + 13.8155).abs() < 1e-4);
    }

    #[test]
    fn adversarial_losses_match_scalar_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (probs(&mut rng, 9), probs(&mut rng, 7));
        let want_d = -(a.iter().map(|p| p.ln()).sum::<f64>() / 9.0
            + b.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 7.0);
        assert!((adv1_discriminator_loss(&a, &b) - want_d).abs() < 1e-12);
        assert!((adv2_discriminator_loss(&a, &b) - want_d).abs() < 1e-12);
        let want_g = b.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 7.0;
        assert!((adv1_generator_loss(&b) - want_g).abs() < 1e-12);
        let want_e = a.iter().map(|p| p.ln()).sum::<f64>() / 9.0;
        assert!((adv2_encoder_loss(&a) - want_e).abs() < 1e-12);
    }

    #[test]
    fn diff_loss_values() {
        let y = vec![0.2; 32];
        assert_eq!(diff_loss(&y, &y, 2).unwrap(), 0.0);
        assert_eq!(diff_loss(&[1.0; 16], &[0.0; 16], 1).unwrap(), -1.0);
        assert!(matches!(diff_loss(&[1.0; 3], &[1.0; 4], 1), Err(Error::Shape(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, p) = (4, 6);
        let a: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut want = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..p {
                s += (a[i * p + j] - b[i * p + j]).abs();
            }
            want -= s / p as f64;
        }
        assert!((diff_loss(&a, &b, n).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = rec_loss_grad(&x, &r).unwrap();
        for i in 0..16 {
            assert!(rel(g[i], fd(|v| rec_loss(&x, v).unwrap(), &r, i)) < 1e-5);
        }
        let g = diff_loss_grad(&x, &r, 1).unwrap();
        for i in 0..16 {
            assert!(rel(g[i], fd(|v| diff_loss(v, &r, 1).unwrap(), &x, i)) < 1e-5);
        }

        let (a, b) = (probs(&mut rng, 16), probs(&mut rng, 16));
        let (ga, gb) = adv1_discriminator_loss_grad(&a, &b);
        for i in 0..16 {
            assert!(rel(ga[i], fd(|v| adv1_discriminator_loss(v, &b), &a, i)) < 1e-5);
            assert!(rel(gb[i], fd(|v| adv1_discriminator_loss(&a, v), &b, i)) < 1e-5);
        }
        let g = adv1_generator_loss_grad(&b);
        let gn = adv1_generator_loss_non_saturating_grad(&b);
        let ge = adv2_encoder_loss_grad(&a);
        for i in 0..16 {
            assert!(rel(g[i], fd(adv1_generator_loss, &b, i)) < 1e-5);
            assert!(rel(gn[i], fd(adv1_generator_loss_non_saturating, &b, i)) < 1e-5);
            assert!(rel(ge[i], fd(adv2_encoder_loss, &a, i)) < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn sign_constraints_hold(
            a in proptest::collection::vec(-3.0f64..3.0, 12),
            b in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            prop_assert!(rec_loss(&a, &b).unwrap() >= 0.0);
            prop_assert!(diff_loss(&a, &b, 3).unwrap() <= 0.0);
            prop_assert_eq!(rec_loss(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(diff_loss(&b, &b, 4).unwrap(), 0.0);
        }

        #[test]
        fn adversarial_losses_ignore_batch_order(
            p in proptest::collection::vec(0.01f64..0.99, 2..10),
            q in proptest::collection::vec(0.01f64..0.99, 2..10),
        ) {
            let mut pr = p.clone();
            pr.reverse();
            let mut qr = q.clone();
            qr.rotate_left(1);
            prop_assert!((adv1_discriminator_loss(&p, &q) - adv1_discriminator_loss(&pr, &qr)).abs() < 1e-12);
            prop_assert!((adv1_generator_loss(&q) - adv1_generator_loss(&qr)).abs() < 1e-12);
            prop_assert!((adv2_encoder_loss(&p) - adv2_encoder_loss(&pr)).abs() < 1e-12);
        }
    }
}
