//! Recognizer contract and built-in recognizers.

mod command;
mod oracle;
mod template;

use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, stage};
use crate::synth::GlyphAtlas;
use crate::{Error, ImagePlane, Result};

pub use command::CommandOcr;
pub use oracle::{noisy_oracle, NoisyOracle};
pub use template::{template_recognize, TemplateOcr, BACKGROUND_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrResult {
    pub text: String,
    /// One value in [0, 1] per character of `text`.
    pub per_char_confidence: Vec<f64>,
}

impl OcrResult {
    pub fn empty() -> Self {
        OcrResult {
            text: String::new(),
            per_char_confidence: Vec::new(),
        }
    }
}

/// A text recognizer `ψ`.
pub trait Recognizer {
    fn recognize(&self, crop: &ImagePlane) -> Result<OcrResult>;
}

impl<R: Recognizer + ?Sized> Recognizer for &R {
    fn recognize(&self, crop: &ImagePlane) -> Result<OcrResult> {
        (**self).recognize(crop)
    }
}

/// Always returns the empty transcript, which guidance treats as null text.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoOcr;

impl Recognizer for NoOcr {
    fn recognize(&self, _: &ImagePlane) -> Result<OcrResult> {
        Ok(OcrResult::empty())
    }
}

/// Recognizer choice as written on the command line:
/// `toy`, `oracle:<rate>`, `cmd:<path>` or `none`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OcrSpec {
    Toy,
    Oracle { error_rate: f64 },
    Command { program: String },
    None,
}

impl std::str::FromStr for OcrSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown OCR spec {s:?} (expected toy, oracle:<rate>, cmd:<path> or none)"));
        match s {
            "toy" => Ok(OcrSpec::Toy),
            "none" => Ok(OcrSpec::None),
            _ => {
                if let Some(rate) = s.strip_prefix("oracle:") {
                    let error_rate: f64 = rate.parse().map_err(|_| bad())?;
                    if !(0.0..=1.0).contains(&error_rate) {
                        return Err(Error::Config(format!("oracle error rate {error_rate} outside [0, 1]")));
                    }
                    Ok(OcrSpec::Oracle { error_rate })
                } else if let Some(p) = s.strip_prefix("cmd:") {
                    if p.is_empty() {
                        return Err(bad());
                    }
                    Ok(OcrSpec::Command { program: p.into() })
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl std::fmt::Display for OcrSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OcrSpec::Toy => write!(f, "toy"),
            OcrSpec::Oracle { error_rate } => write!(f, "oracle:{error_rate}"),
            OcrSpec::Command { program } => write!(f, "cmd:{program}"),
            OcrSpec::None => write!(f, "none"),
        }
    }
}

impl OcrSpec {
    /// Instantiates the recognizer; `seed` keys the oracle's corruption.
    pub fn build(&self, atlas: &GlyphAtlas, seed: u64) -> Result<OcrFactory> {
        Ok(match self {
            OcrSpec::Toy => OcrFactory::Toy(TemplateOcr::new(atlas.clone())),
            OcrSpec::Oracle { error_rate } => OcrFactory::Oracle {
                error_rate: *error_rate,
                charset: atlas.charset().to_vec(),
                seed,
            },
            OcrSpec::Command { program } => OcrFactory::Command(CommandOcr::new(program.clone())?),
            OcrSpec::None => OcrFactory::None,
        })
    }
}

/// A built [`OcrSpec`]; hands out the recognizer for one crop.
#[derive(Debug)]
pub enum OcrFactory {
    Toy(TemplateOcr),
    Oracle { error_rate: f64, charset: Vec<char>, seed: u64 },
    Command(CommandOcr),
    None,
}

impl OcrFactory {
    /// Recognizer for crop `index` whose ground truth is `gt` (only the
    /// oracle reads it).
    pub fn for_item(&self, gt: &str, index: u64) -> Box<dyn Recognizer + '_> {
        match self {
            OcrFactory::Toy(t) => Box::new(t),
            OcrFactory::Oracle { error_rate, charset, seed } => Box::new(NoisyOracle {
                gt_text: gt.to_string(),
                error_rate: *error_rate,
                charset: charset.clone(),
                seed: derive_seed(*seed, index, stage::OCR_NOISE),
            }),
            OcrFactory::Command(c) => Box::new(c),
            OcrFactory::None => Box::new(NoOcr),
        }
    }
}
