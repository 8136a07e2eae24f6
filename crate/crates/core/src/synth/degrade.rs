use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{area_resize, bilinear_resize, lowpass};
use crate::rng::{keyed_rng, stage};
use crate::{Error, ImagePlane, Result};

/// Sampling ranges for the blur → noise → downsample → quantize chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    pub blur_sigma: [f64; 2],
    pub noise_std: [f64; 2],
    /// Downsample factors, ≥ 1.
    pub downsample: [f64; 2],
    /// Quantization levels over [−1, 1]; `[0, 0]` disables quantization.
    pub quantize_levels: [u32; 2],
    pub second_order: bool,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            blur_sigma: [0.5, 2.0],
            noise_std: [0.0, 0.08],
            downsample: [2.0, 4.0],
            quantize_levels: [16, 64],
            second_order: true,
        }
    }
}

impl DegradationConfig {
    /// No-op chain (σ 0, no noise, factor 1, no quantization).
    pub fn identity() -> Self {
        DegradationConfig {
            blur_sigma: [0.0, 0.0],
            noise_std: [0.0, 0.0],
            downsample: [1.0, 1.0],
            quantize_levels: [0, 0],
            second_order: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !ordered(self.blur_sigma) || self.blur_sigma[0] < 0.0 {
            return Err(Error::Config(format!("blur_sigma range {:?}", self.blur_sigma)));
        }
        if !ordered(self.noise_std) || self.noise_std[0] < 0.0 {
            return Err(Error::Config(format!("noise_std range {:?}", self.noise_std)));
        }
        if !ordered(self.downsample) || self.downsample[0] < 1.0 {
            return Err(Error::Config(format!("downsample range {:?}", self.downsample)));
        }
        let [ql, qh] = self.quantize_levels;
        if ql > qh || (ql < 2 && (ql, qh) != (0, 0)) {
            return Err(Error::Config(format!("quantize_levels range {:?}", self.quantize_levels)));
        }
        Ok(())
    }
}

/// Parameters drawn for one pass of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassParams {
    pub blur_sigma: f64,
    pub noise_std: f64,
    pub downsample: f64,
    pub quantize_levels: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub passes: Vec<PassParams>,
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn quantize(v: f64, levels: u32) -> f64 {
    let l = (levels - 1) as f64;
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * l).round() / l * 2.0 - 1.0
}

/// Deterministic degradation keyed by `seed`; also returns the drawn parameters.
pub fn degrade_with_params(hr: &ImagePlane, config: &DegradationConfig, seed: u64) -> Result<(ImagePlane, DegradeParams)> {
    config.validate()?;
    let (h, w, c) = hr.dims();
    let mut x = hr.clone();
    let mut passes = Vec::new();
    let n_pass = if config.second_order { 2 } else { 1 };
    for pass in 0..n_pass {
        let key = if pass == 0 { stage::DEGRADE } else { stage::DEGRADE_SECOND };
        let mut rng = keyed_rng(seed, 0, key);
        let p = PassParams {
            blur_sigma: uniform(&mut rng, config.blur_sigma),
            noise_std: uniform(&mut rng, config.noise_std),
            downsample: uniform(&mut rng, config.downsample),
            quantize_levels: match config.quantize_levels {
                [0, 0] => 0,
                [lo, hi] => rng.random_range(lo..=hi),
            },
        };
        x = lowpass(&x, p.blur_sigma);
        if p.noise_std > 0.0 {
            for v in x.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += p.noise_std * n;
            }
        }
        let lh = ((h as f64 / p.downsample).round() as usize).max(1);
        let lw = ((w as f64 / p.downsample).round() as usize).max(1);
        x = area_resize(&x, lh, lw);
        if p.quantize_levels > 0 {
            for v in x.data_mut() {
                *v = quantize(*v, p.quantize_levels);
            }
        }
        x = bilinear_resize(&x, h, w);
        passes.push(p);
    }
    let out = ImagePlane::new(h, w, c, x.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect())?;
    Ok((out, DegradeParams { passes }))
}

pub fn degrade(hr: &ImagePlane, config: &DegradationConfig, seed: u64) -> Result<ImagePlane> {
    Ok(degrade_with_params(hr, config, seed)?.0)
}
