use super::EpsModel;
use crate::guidance::{cfg_combine, GuidanceConfig};
use crate::rng::{normal_vec, stage};
use crate::textcodec::TextFeatures;
use crate::{Error, ImagePlane, Result};

/// Deterministic (η = 0) DDIM from `T−1` down to 0 with guided noise
/// estimates, returning `clamp(c_I + 2·x̂0)`.
///
/// The chain starts at `√(1−ᾱ_{T−1})·z`, the forward process applied to a
/// zero residual, with `z` drawn from `seed`. Each step clips `x̂0` to
/// [−1, 1] and re-derives the noise direction from the clipped value. With
/// `null_image` the condition and the residual base are both the zero image.
pub fn ddim_sample<M: EpsModel + ?Sized>(
    model: &M,
    c_i: &ImagePlane,
    text: Option<&TextFeatures>,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<ImagePlane> {
    guidance.validate()?;
    let (h, w, c) = c_i.dims();
    if c != model.image_channels() {
        return Err(Error::shape(format!("model expects {} channels, got {c}", model.image_channels())));
    }
    let schedule = model.schedule();
    let cond = if guidance.null_image { None } else { Some(c_i) };
    let omega = guidance.omega;
    let z = normal_vec(seed, 0, stage::SAMPLE_NOISE, h * w * c);
    let timesteps = schedule.ddim_timesteps(guidance.ddim_steps);
    let eps_at = |x: &ImagePlane, t: usize| -> Result<ImagePlane> {
        match text {
            Some(tf) if omega != 0.0 => {
                let cond_eps = model.predict_eps(x, t, cond, Some(tf))?;
                if omega == 1.0 {
                    Ok(cond_eps)
                } else {
                    let uncond = model.predict_eps(x, t, cond, None)?;
                    cfg_combine(&uncond, &cond_eps, omega)
                }
            }
            _ => model.predict_eps(x, t, cond, None),
        }
    };
    let x0 = ddim_loop(schedule, &timesteps, z, h, w, c, eps_at)?;
    let restored: Vec<f64> = match cond {
        Some(ci) => ci.data().iter().zip(x0.data()).map(|(&b, &r)| (b + 2.0 * r).clamp(-1.0, 1.0)).collect(),
        None => x0.data().iter().map(|&r| (2.0 * r).clamp(-1.0, 1.0)).collect(),
    };
    ImagePlane::new(h, w, c, restored)
}

/// The DDIM recursion on a single image; returns the final `x̂0`.
pub(crate) fn ddim_loop(
    schedule: &super::NoiseSchedule,
    timesteps: &[usize],
    z: Vec<f64>,
    h: usize,
    w: usize,
    c: usize,
    mut eps_at: impl FnMut(&ImagePlane, usize) -> Result<ImagePlane>,
) -> Result<ImagePlane> {
    let (_, s0) = schedule.coefficients(timesteps[0]);
    let mut x = ImagePlane::new(h, w, c, z.iter().map(|&v| s0 * v).collect())?;
    let mut x0 = x.clone();
    for (i, &t) in timesteps.iter().enumerate() {
        let eps = eps_at(&x, t)?;
        let (a, s) = schedule.coefficients(t);
        let pred: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xv, &e)| ((xv - s * e) / a).clamp(-1.0, 1.0))
            .collect();
        x0 = ImagePlane::new(h, w, c, pred)?;
        if let Some(&next) = timesteps.get(i + 1) {
            let (an, sn) = schedule.coefficients(next);
            let data: Vec<f64> = x
                .data()
                .iter()
                .zip(x0.data())
                .map(|(&xv, &p)| {
                    let e = if s > 0.0 { (xv - a * p) / s } else { 0.0 };
                    an * p + sn * e
                })
                .collect();
            x = ImagePlane::new(h, w, c, data)?;
        }
    }
    Ok(x0)
}
