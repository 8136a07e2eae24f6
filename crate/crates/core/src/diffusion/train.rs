use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::plane_to_chw;
use super::{NoiseSchedule, TextInput, TextSrModel, UnetInput};
use crate::nn::{Adam, AdamConfig, Grads, Scalar, Tape, Tensor, Var};
use crate::rng::{keyed_rng, stage};
use crate::textcodec::{tokenize, ByteTokenSeq};
use crate::{Error, ImagePlane, Result};

/// Probabilities of replacing each condition by its null encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub drop_text: f64,
    pub drop_image: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            drop_text: 0.3,
            drop_image: 0.1,
        }
    }
}

/// One training example before noising.
#[derive(Debug, Clone)]
pub struct TrainingPair<'a> {
    pub lr: &'a ImagePlane,
    pub hr: &'a ImagePlane,
    pub text: &'a str,
}

/// Noised training batch. `x0` is the diffusion target: `(HR − LR)/2`, or
/// `HR/2` for samples whose image condition is dropped (the residual base
/// is then the zero image).
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub x0: Vec<ImagePlane>,
    pub c_i: Vec<ImagePlane>,
    pub text: Vec<ByteTokenSeq>,
    pub drop_text: Vec<bool>,
    pub drop_image: Vec<bool>,
    pub t: Vec<usize>,
    pub eps: Vec<ImagePlane>,
}

impl DiffusionBatch {
    /// Draws timesteps, noise and dropout flags from the stream keyed by `(seed, index)`.
    pub fn sample(
        pairs: &[TrainingPair<'_>],
        schedule: &NoiseSchedule,
        dropout: DropoutConfig,
        max_len: usize,
        seed: u64,
        index: u64,
    ) -> Result<Self> {
        let mut rng = keyed_rng(seed, index, stage::TRAIN_NOISE);
        let mut b = DiffusionBatch {
            x0: Vec::new(),
            c_i: Vec::new(),
            text: Vec::new(),
            drop_text: Vec::new(),
            drop_image: Vec::new(),
            t: Vec::new(),
            eps: Vec::new(),
        };
        for p in pairs {
            p.lr.ensure_same_shape(p.hr)?;
            let drop_text = rng.random::<f64>() < dropout.drop_text;
            let drop_image = rng.random::<f64>() < dropout.drop_image;
            let t = rng.random_range(0..schedule.len());
            let (h, w, c) = p.hr.dims();
            let noise: Vec<f64> = (0..h * w * c).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x0 = if drop_image {
                p.hr.map(|v| v / 2.0)
            } else {
                p.hr.zip_map(p.lr, |a, b| (a - b) / 2.0)?
            };
            b.x0.push(x0);
            b.c_i.push(p.lr.clone());
            b.text.push(tokenize(p.text, max_len));
            b.drop_text.push(drop_text);
            b.drop_image.push(drop_image);
            b.t.push(t);
            b.eps.push(ImagePlane::new(h, w, c, noise)?);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::shape("empty batch"));
        }
        let lens = [
            self.c_i.len(),
            self.text.len(),
            self.drop_text.len(),
            self.drop_image.len(),
            self.t.len(),
            self.eps.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::shape(format!("batch fields disagree in length: {n} vs {lens:?}")));
        }
        for i in 0..n {
            self.x0[i].ensure_same_shape(&self.x0[0])?;
            self.x0[i].ensure_same_shape(&self.c_i[i])?;
            self.x0[i].ensure_same_shape(&self.eps[i])?;
            if self.t[i] >= schedule.len() {
                return Err(Error::InvalidRange(format!("timestep {} outside schedule", self.t[i])));
            }
        }
        Ok(())
    }
}

fn stack(planes: &[ImagePlane], f: impl Fn(usize, &ImagePlane) -> Vec<f64>) -> Vec<f64> {
    planes.iter().enumerate().flat_map(|(i, p)| f(i, p)).collect()
}

/// Eq. 1 loss for one batch and its gradients with respect to every parameter.
pub fn training_step<F: Scalar>(model: &TextSrModel<F>, batch: &DiffusionBatch) -> Result<(f64, Grads<F>)> {
    let (tape, loss, value) = record_loss(model, batch)?;
    Ok((value, tape.backward(loss)))
}

/// The loss of [`training_step`] without the backward pass.
pub fn training_loss<F: Scalar>(model: &TextSrModel<F>, batch: &DiffusionBatch) -> Result<f64> {
    Ok(record_loss(model, batch)?.2)
}

fn record_loss<F: Scalar>(model: &TextSrModel<F>, batch: &DiffusionBatch) -> Result<(Tape<F>, Var, f64)> {
    batch.validate(&model.schedule)?;
    let n = batch.len();
    let (h, w, c) = batch.x0[0].dims();
    let shape = [n, c, h, w];
    let mut tape = Tape::<F>::new();
    let x_t = stack(&batch.x0, |i, x0| {
        model
            .schedule
            .q_sample_slice(&plane_to_chw(x0), batch.t[i], &plane_to_chw(&batch.eps[i]))
    });
    let x_t = tape.leaf(Tensor::from_f64(&shape, &x_t));
    let c_i = stack(&batch.c_i, |i, p| {
        if batch.drop_image[i] {
            vec![0.0; h * w * c]
        } else {
            plane_to_chw(p)
        }
    });
    let c_i = tape.leaf(Tensor::from_f64(&shape, &c_i));

    let keep: Vec<bool> = batch.drop_text.iter().map(|d| !d).collect();
    let mask: Vec<bool> = batch.text.iter().flat_map(|s| s.mask().iter().copied()).collect();
    let text = if keep.iter().any(|&k| k) {
        let seqs: Vec<&ByteTokenSeq> = batch.text.iter().collect();
        Some(TextInput {
            features: model.encoder.forward(&mut tape, &model.store, &seqs)?,
            mask: &mask,
            keep: &keep,
        })
    } else {
        None
    };
    let eps_hat = model.unet.forward(
        &mut tape,
        &model.store,
        &UnetInput {
            x_t,
            cond_image: c_i,
            t: &batch.t,
            image_null: &batch.drop_image,
            text,
        },
    )?;
    if !tape.value(eps_hat).all_finite() {
        return Err(Error::NonFiniteActivation("denoiser output".into()));
    }
    let target = Tensor::from_f64(&shape, &stack(&batch.eps, |_, p| plane_to_chw(p)));
    let per = tape.per_sample_mse(eps_hat, &target);
    let loss = tape.mean_sorted(per);
    let value = tape.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((tape, loss, value))
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer<F = f32> {
    pub model: TextSrModel<F>,
    pub optimizer: Adam<F>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: TextSrModel<F>, config: AdamConfig) -> Self {
        let optimizer = Adam::new(config, &model.store);
        Trainer { model, optimizer }
    }

    /// One optimizer update; parameters are left untouched when the loss is not finite.
    pub fn step(&mut self, batch: &DiffusionBatch) -> Result<f64> {
        let (loss, grads) = training_step(&self.model, batch)?;
        if !grads.global_norm().is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        self.optimizer.update(&mut self.model.store, &grads);
        self.model.step += 1;
        Ok(loss)
    }
}
