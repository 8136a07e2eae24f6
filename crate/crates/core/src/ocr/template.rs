use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{OcrResult, Recognizer};
use crate::synth::{scaled_glyph, GlyphAtlas};
use crate::{ImagePlane, Result};

/// Cells whose best correlation falls below this are background.
pub const BACKGROUND_THRESHOLD: f64 = 0.2;

/// Zero-mean, unit-norm template; `None` for a flat patch.
fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let centred: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = centred.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    Some(centred.into_iter().map(|x| x / norm).collect())
}

fn templates(atlas: &GlyphAtlas, height: usize) -> Vec<Option<Vec<f64>>> {
    (0..atlas.charset().len())
        .map(|i| normalized(&scaled_glyph(atlas, i, height).data().iter().map(|c| 1.0 - 2.0 * c).collect::<Vec<_>>()))
        .collect()
}

fn gray_cell(crop: &ImagePlane, x0: usize, pitch: usize) -> Vec<f64> {
    let c = crop.channels();
    let mut v = Vec::with_capacity(crop.height() * pitch);
    for y in 0..crop.height() {
        for x in x0..x0 + pitch {
            v.push((0..c).map(|ch| crop.get(y, x, ch)).sum::<f64>() / c as f64);
        }
    }
    v
}

fn recognize_with(crop: &ImagePlane, atlas: &GlyphAtlas, tpl: &[Option<Vec<f64>>]) -> OcrResult {
    let pitch = atlas.pitch(crop.height());
    let mut out = OcrResult::empty();
    for k in 0..crop.width() / pitch {
        let Some(cell) = normalized(&gray_cell(crop, k * pitch, pitch)) else {
            continue;
        };
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, t) in tpl.iter().enumerate() {
            if let Some(t) = t {
                let ncc: f64 = cell.iter().zip(t).map(|(a, b)| a * b).sum();
                if ncc > best.0 {
                    best = (ncc, i);
                }
            }
        }
        if best.0 >= BACKGROUND_THRESHOLD {
            out.text.push(atlas.charset()[best.1]);
            out.per_char_confidence.push(best.0.clamp(0.0, 1.0));
        }
    }
    out
}

/// Fixed-pitch segmentation plus normalized cross-correlation against every
/// atlas glyph. Ties go to the earlier charset entry.
pub fn template_recognize(crop: &ImagePlane, atlas: &GlyphAtlas) -> OcrResult {
    recognize_with(crop, atlas, &templates(atlas, crop.height()))
}

/// [`template_recognize`] with templates cached per crop height.
#[derive(Debug, Clone)]
pub struct TemplateOcr {
    atlas: Arc<GlyphAtlas>,
    cache: Arc<Mutex<HashMap<usize, Arc<Vec<Option<Vec<f64>>>>>>>,
}

impl TemplateOcr {
    pub fn new(atlas: GlyphAtlas) -> Self {
        TemplateOcr {
            atlas: Arc::new(atlas),
            cache: Arc::default(),
        }
    }

    pub fn atlas(&self) -> &GlyphAtlas {
        &self.atlas
    }
}

impl Recognizer for TemplateOcr {
    fn recognize(&self, crop: &ImagePlane) -> Result<OcrResult> {
        let h = crop.height();
        let tpl = {
            let mut cache = self.cache.lock().expect("template cache poisoned");
            cache.entry(h).or_insert_with(|| Arc::new(templates(&self.atlas, h))).clone()
        };
        Ok(recognize_with(crop, &self.atlas, &tpl))
    }
}
