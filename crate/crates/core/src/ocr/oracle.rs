use rand::Rng;

use super::{OcrResult, Recognizer};
use crate::rng::{keyed_rng, stage};
use crate::{ImagePlane, Result};

/// Corrupts `gt_text`: each character independently, with probability
/// `error_rate`, becomes a uniformly drawn different charset character.
pub fn noisy_oracle(gt_text: &str, error_rate: f64, charset: &[char], seed: u64) -> OcrResult {
    assert!((0.0..=1.0).contains(&error_rate), "error rate must lie in [0, 1]");
    let mut rng = keyed_rng(seed, 0, stage::OCR_NOISE);
    let text: String = gt_text
        .chars()
        .map(|c| {
            let flip = rng.random::<f64>() < error_rate;
            let others: Vec<char> = charset.iter().copied().filter(|&o| o != c).collect();
            if flip && !others.is_empty() {
                others[rng.random_range(0..others.len())]
            } else {
                c
            }
        })
        .collect();
    let n = text.chars().count();
    OcrResult {
        text,
        per_char_confidence: vec![1.0 - error_rate; n],
    }
}

/// [`noisy_oracle`] bound to one crop's ground truth; the image is ignored,
/// so every call on the same oracle returns the same transcript.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    pub gt_text: String,
    pub error_rate: f64,
    pub charset: Vec<char>,
    pub seed: u64,
}

impl Recognizer for NoisyOracle {
    fn recognize(&self, _: &ImagePlane) -> Result<OcrResult> {
        Ok(noisy_oracle(&self.gt_text, self.error_rate, &self.charset, self.seed))
    }
}
