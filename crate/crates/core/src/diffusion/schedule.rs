use serde::{Deserialize, Serialize};

use crate::{Error, ImagePlane, Result};

/// Parameters of a linear β schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_lo: 1e-4,
            beta_hi: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_lo, self.beta_hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear β from `beta_lo` to `beta_hi` over `t` steps.
pub fn make_schedule(t: usize, beta_lo: f64, beta_hi: f64) -> Result<NoiseSchedule> {
    if t == 0 || !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
        return Err(Error::InvalidRange(format!(
            "schedule needs T >= 1 and 0 < beta_lo <= beta_hi < 1, got T={t}, [{beta_lo}, {beta_hi}]"
        )));
    }
    let beta: Vec<f64> = (0..t)
        .map(|i| {
            if t == 1 {
                beta_lo
            } else {
                beta_lo + (beta_hi - beta_lo) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `(√ᾱₜ, √(1−ᾱₜ))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }

    pub fn q_sample_slice(&self, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let (a, s) = self.coefficients(t);
        x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect()
    }

    /// DDIM timestep subsequence: `steps` values with uniform stride from
    /// `T−1` down to 0 (just `T−1` for a single step).
    pub fn ddim_timesteps(&self, steps: usize) -> Vec<usize> {
        let t = self.len();
        let steps = steps.clamp(1, t);
        if steps == 1 {
            return vec![t - 1];
        }
        let mut out: Vec<usize> = (0..steps)
            .map(|i| (((t - 1) * (steps - 1 - i)) as f64 / (steps - 1) as f64).round() as usize)
            .collect();
        out.dedup();
        out
    }
}

/// `x_t = √ᾱₜ·x0 + √(1−ᾱₜ)·eps`.
pub fn q_sample(x0: &ImagePlane, t: usize, eps: &ImagePlane, schedule: &NoiseSchedule) -> Result<ImagePlane> {
    x0.ensure_same_shape(eps)?;
    if t >= schedule.len() {
        return Err(Error::InvalidRange(format!("timestep {t} outside [0, {})", schedule.len())));
    }
    let (h, w, c) = x0.dims();
    ImagePlane::new(h, w, c, schedule.q_sample_slice(x0.data(), t, eps.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar, vec![0.5]);
    }

    #[test]
    fn default_schedule_ends_near_zero() {
        let s = ScheduleConfig::default().build().unwrap();
        // independent product in log space
        let log: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        assert!((s.alpha_bar[999] - log.exp()).abs() < 1e-10);
        assert!(s.alpha_bar[999] < 5e-5);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.beta.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let x0 = ImagePlane::filled(1, 1, 1, 0.6);
        let eps = ImagePlane::filled(1, 1, 1, -0.2);
        let sched = NoiseSchedule {
            beta: vec![0.75],
            alpha_bar: vec![0.25],
        };
        let xt = q_sample(&x0, 0, &eps, &sched).unwrap();
        assert!((xt.data()[0] - (0.3 - 0.75f64.sqrt() * 0.2)).abs() < 1e-12);
        assert!((xt.data()[0] - 0.1268).abs() < 1e-4);
        let one = NoiseSchedule {
            beta: vec![0.0],
            alpha_bar: vec![1.0],
        };
        assert_eq!(q_sample(&x0, 0, &eps, &one).unwrap(), x0);
        let zero = NoiseSchedule {
            beta: vec![1.0],
            alpha_bar: vec![0.0],
        };
        assert_eq!(q_sample(&x0, 0, &eps, &zero).unwrap(), eps);
    }

    #[test]
    fn ddim_subsequence_has_endpoints() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.ddim_timesteps(5), vec![999, 749, 500, 250, 0]);
        assert_eq!(s.ddim_timesteps(1), vec![999]);
        assert_eq!(s.ddim_timesteps(1000).len(), 1000);
        assert_eq!(s.ddim_timesteps(5000).len(), 1000);
    }
}
