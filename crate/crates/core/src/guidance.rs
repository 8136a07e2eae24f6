//! Dual-condition classifier-free guidance and iterative OCR conditioning.

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample, EpsModel};
use crate::ocr::Recognizer;
use crate::rng::derive_seed;
use crate::{Error, ImagePlane, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega: f64,
    /// OCR/restore iterations (`R`).
    pub iterations: usize,
    pub ddim_steps: usize,
    /// Text-only mode: the image condition is replaced by the null image.
    pub null_image: bool,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            omega: 1.0,
            iterations: 0,
            ddim_steps: 5,
            null_image: false,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ddim_steps == 0 {
            return Err(Error::Config("ddim_steps must be at least 1".into()));
        }
        if !self.omega.is_finite() {
            return Err(Error::Config(format!("omega must be finite, got {}", self.omega)));
        }
        Ok(())
    }
}

/// `(1−ω)·ε_uncond + ω·ε_cond`.
pub fn cfg_combine(eps_uncond: &ImagePlane, eps_cond: &ImagePlane, omega: f64) -> Result<ImagePlane> {
    if omega == 0.0 {
        eps_uncond.ensure_same_shape(eps_cond)?;
        return Ok(eps_uncond.clone());
    }
    if omega == 1.0 {
        eps_uncond.ensure_same_shape(eps_cond)?;
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| (1.0 - omega) * u + omega * c)
}

/// One guided DDIM run. `text = None` (or an empty string) uses the
/// image-only branch alone.
pub fn restore<M: EpsModel + ?Sized>(
    model: &M,
    c_i: &ImagePlane,
    text: Option<&str>,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<ImagePlane> {
    let feats = match text {
        Some(t) if !t.is_empty() && cfg.omega != 0.0 => Some(model.encode_text(t)?),
        _ => None,
    };
    ddim_sample(model, c_i, feats.as_ref(), cfg, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case")]
pub enum TraceEvent {
    Restore { text: Option<String>, seed: u64 },
    Ocr { text: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    pub image: ImagePlane,
    /// OCR transcripts in call order.
    pub transcripts: Vec<String>,
    pub trace: Vec<TraceEvent>,
}

impl IterativeOutcome {
    pub fn restore_calls(&self) -> usize {
        self.trace.iter().filter(|e| matches!(e, TraceEvent::Restore { .. })).count()
    }

    pub fn ocr_calls(&self) -> usize {
        self.trace.iter().filter(|e| matches!(e, TraceEvent::Ocr { .. })).count()
    }
}

/// R-iterative OCR conditioning.
///
/// `R = 0`: restore with the transcript of `c_I`. `R ≥ 1`: restore without
/// text, then `R` times recognize the current estimate and restore with that
/// transcript. Restore call `k` of `R + 1` uses seed `hash(cfg.seed, R − k)`,
/// so the final call always uses the same seed whatever `R` is.
pub fn iterative_restore<M: EpsModel + ?Sized, O: Recognizer + ?Sized>(
    model: &M,
    c_i: &ImagePlane,
    cfg: &GuidanceConfig,
    ocr: &O,
) -> Result<IterativeOutcome> {
    cfg.validate()?;
    let r = cfg.iterations;
    let seed_for = |k: usize| derive_seed(cfg.seed, (r - k) as u64, 0);
    let mut trace = Vec::new();
    let mut transcripts = Vec::new();
    let run = |text: Option<String>, k: usize, trace: &mut Vec<TraceEvent>| -> Result<ImagePlane> {
        let seed = seed_for(k);
        let img = restore(model, c_i, text.as_deref(), cfg, seed)?;
        trace.push(TraceEvent::Restore { text, seed });
        Ok(img)
    };
    let image = if r == 0 {
        let text = ocr.recognize(c_i)?.text;
        trace.push(TraceEvent::Ocr { text: text.clone() });
        transcripts.push(text.clone());
        run(Some(text), 0, &mut trace)?
    } else {
        let mut x = run(None, 0, &mut trace)?;
        for k in 1..=r {
            let text = ocr.recognize(&x)?.text;
            trace.push(TraceEvent::Ocr { text: text.clone() });
            transcripts.push(text.clone());
            x = run(Some(text), k, &mut trace)?;
        }
        x
    };
    Ok(IterativeOutcome {
        image,
        transcripts,
        trace,
    })
}
