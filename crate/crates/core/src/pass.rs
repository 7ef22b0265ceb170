//! Forward passes through the composite model with enough saved state to
//! backpropagate each objective to the groups that own it.

use crate::error::Result;
use crate::losses;
use crate::model::Model;
use crate::nn::{BnMode, Tape};
use crate::real::Real;

/// `X -> z -> (z1, z2) -> [Y1; Y2]` with both network tapes kept.
pub struct Pass<T> {
    pub batch: usize,
    pub enc: Tape<T>,
    pub dec: Tape<T>,
}

impl<T: Real> Pass<T> {
    pub fn run(model: &Model<T>, x: &[T], batch: usize) -> Result<Self> {
        let enc = model.encoder.forward(x, batch, BnMode::Train)?;
        let (mut zz, z2) = model.projection.project(enc.output(), batch)?;
        zz.extend_from_slice(&z2);
        let dec = model.decoder.forward(&zz, 2 * batch, BnMode::Train)?;
        Ok(Self { batch, enc, dec })
    }

    pub fn z(&self) -> &[T] {
        self.enc.output()
    }

    fn half(&self) -> usize {
        self.dec.output().len() / 2
    }

    pub fn y1(&self) -> &[T] {
        &self.dec.output()[..self.half()]
    }

    pub fn y2(&self) -> &[T] {
        &self.dec.output()[self.half()..]
    }

    pub fn recon(&self) -> Vec<T> {
        self.y1().iter().zip(self.y2()).map(|(&a, &b)| a + b).collect()
    }
}

/// Parameter gradients of one objective, `None` for groups not requested.
#[derive(Default)]
pub struct ChainGrads<T> {
    pub encoder: Option<Vec<T>>,
    pub decoder: Option<Vec<T>>,
    pub projection: Option<Vec<T>>,
}

/// Backpropagate `(dY1, dY2)` through decoder, projections and encoder.
pub fn backprop_branches<T: Real>(
    model: &Model<T>,
    pass: &Pass<T>,
    dy1: &[T],
    dy2: &[T],
    want_e: bool,
    want_g: bool,
    want_p: bool,
) -> Result<ChainGrads<T>> {
    let mut dy = dy1.to_vec();
    dy.extend_from_slice(dy2);
    let need_dz = want_e || want_p;
    let g = model.decoder.backward(&pass.dec, &dy, want_g, need_dz)?;
    let mut out = ChainGrads {
        decoder: g.params,
        ..Default::default()
    };
    if let Some(dzz) = g.input {
        let (dz1, dz2) = dzz.split_at(dzz.len() / 2);
        let (gp, dz) = model
            .projection
            .project_backward(pass.z(), dz1, dz2, pass.batch, want_p);
        out.projection = gp;
        if want_e {
            out.encoder = model.encoder.backward(&pass.enc, &dz, true, false)?.params;
        }
    }
    Ok(out)
}

/// Reconstruction loss and its gradients for encoder, decoder and projections.
pub fn rec_step<T: Real>(model: &Model<T>, pass: &Pass<T>, x: &[T]) -> Result<(T, ChainGrads<T>)> {
    let r = pass.recon();
    let loss = losses::rec_loss(x, &r)?;
    let dr = losses::rec_loss_grad(x, &r)?;
    let g = backprop_branches(model, pass, &dr, &dr, true, true, true)?;
    Ok((loss, g))
}

/// D1 objective on `[real; fake]` and its D1 gradient.
pub fn adv1_d_step<T: Real>(model: &Model<T>, x: &[T], fake: &[T], batch: usize) -> Result<(T, Vec<T>)> {
    let mut both = x.to_vec();
    both.extend_from_slice(fake);
    let tape = model.image_disc.forward(&both, 2 * batch, BnMode::Train)?;
    let (dr, df) = tape.output().split_at(batch);
    let loss = losses::adv1_discriminator_loss(dr, df);
    let (mut g, gf) = losses::adv1_discriminator_loss_grad(dr, df);
    g.extend(gf);
    let grads = model.image_disc.backward(&tape, &g, true, false)?;
    Ok((loss, grads.params.expect("requested")))
}

/// Generator objective through D1 and the decoder; decoder gradient only.
pub fn adv1_g_step<T: Real>(
    model: &Model<T>,
    pass: &Pass<T>,
    non_saturating: bool,
) -> Result<(T, Vec<T>)> {
    let r = pass.recon();
    let b = pass.batch;
    let tape = model.image_disc.forward(&r, b, BnMode::Train)?;
    let d = tape.output();
    let (loss, g) = if non_saturating {
        (
            losses::adv1_generator_loss_non_saturating(d),
            losses::adv1_generator_loss_non_saturating_grad(d),
        )
    } else {
        (losses::adv1_generator_loss(d), losses::adv1_generator_loss_grad(d))
    };
    let dr = model.image_disc.backward(&tape, &g, false, true)?.input.expect("requested");
    let grads = backprop_branches(model, pass, &dr, &dr, false, true, false)?;
    Ok((loss, grads.decoder.expect("requested")))
}

/// D2 objective on `[encoded; prior]` and its D2 gradient.
pub fn adv2_d_step<T: Real>(model: &Model<T>, z: &[T], u: &[T], batch: usize) -> Result<(T, Vec<T>)> {
    let mut both = z.to_vec();
    both.extend_from_slice(u);
    let tape = model.latent_disc.forward(&both, 2 * batch, BnMode::Train)?;
    let (de, du) = tape.output().split_at(batch);
    let loss = losses::adv2_discriminator_loss(de, du);
    let (mut g, gu) = losses::adv2_discriminator_loss_grad(de, du);
    g.extend(gu);
    let grads = model.latent_disc.backward(&tape, &g, true, false)?;
    Ok((loss, grads.params.expect("requested")))
}

/// Encoder objective through D2; encoder gradient only.
pub fn adv2_e_step<T: Real>(model: &Model<T>, enc: &Tape<T>) -> Result<(T, Vec<T>)> {
    let tape = model.latent_disc.forward(enc.output(), enc.batch(), BnMode::Train)?;
    let d = tape.output();
    let loss = losses::adv2_encoder_loss(d);
    let g = losses::adv2_encoder_loss_grad(d);
    let dz = model.latent_disc.backward(&tape, &g, false, true)?.input.expect("requested");
    let grads = model.encoder.backward(enc, &dz, true, false)?;
    Ok((loss, grads.params.expect("requested")))
}

/// Branch-difference objective; projection gradient only (decoder frozen).
pub fn diff_step<T: Real>(model: &Model<T>, pass: &Pass<T>) -> Result<(T, Vec<T>)> {
    let (y1, y2) = (pass.y1(), pass.y2());
    let loss = losses::diff_loss(y1, y2, pass.batch)?;
    let g1 = losses::diff_loss_grad(y1, y2, pass.batch)?;
    let g2: Vec<T> = g1.iter().map(|&v| -v).collect();
    let grads = backprop_branches(model, pass, &g1, &g2, false, false, true)?;
    Ok((loss, grads.projection.expect("requested")))
}
