use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::upscale::{check_factor, BackgroundUpscaler};
use crate::diffusion::{EpsModel, ModelConfig};
use crate::geometry::{
    blend_crop, invert_affine, paste_regions, slice_line, warp, AffineParams, CoverageReport, TextRegion, BLEND_SIGMA,
    TILE_OVERLAP,
};
use crate::guidance::{iterative_restore, GuidanceConfig};
use crate::ocr::Recognizer;
use crate::parallel::par_map;
use crate::rng::derive_seed;
use crate::{Error, ImagePlane, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Output scale, 1, 2 or 4.
    pub factor: usize,
    /// Model line size; region crops must be `tile_height` tall.
    pub tile_height: usize,
    pub tile_width: usize,
    pub tile_overlap: usize,
    pub blend_sigma: f64,
    pub workers: usize,
}

impl PipelineConfig {
    pub fn for_model(model: &ModelConfig, factor: usize) -> Self {
        PipelineConfig {
            factor,
            tile_height: model.denoiser.height,
            tile_width: model.denoiser.width,
            tile_overlap: TILE_OVERLAP,
            blend_sigma: BLEND_SIGMA,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionStatus {
    Processed,
    /// Restored and pasted, but the crop reached outside the input image.
    Clipped,
    /// Skipped; the output keeps `f(I)` there.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionOutcome {
    pub region_id: String,
    pub status: RegionStatus,
    pub tiles: usize,
    /// OCR transcripts per tile, in call order.
    #[serde(rename = "transcript_history")]
    pub transcripts: Vec<Vec<String>>,
    pub restore_calls: usize,
    pub ocr_calls: usize,
    pub error: Option<String>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub factor: usize,
    pub regions_processed: usize,
    pub regions_clipped: usize,
    pub regions_failed: usize,
    pub regions: Vec<RegionOutcome>,
    pub coverage: CoverageReport,
}

/// Seed stream of a region; keyed by id so results do not depend on
/// manifest position.
fn region_key(region_id: &str) -> u64 {
    let d = Sha256::digest(region_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn reaches_outside(theta: &AffineParams, (h, w): (usize, usize), image: &ImagePlane) -> Result<bool> {
    let inv = invert_affine(theta)?;
    let (hf, wf) = ((h - 1) as f64, (w - 1) as f64);
    let tol = 1e-6;
    let (iw, ih) = ((image.width() - 1) as f64, (image.height() - 1) as f64);
    Ok([[0.0, 0.0], [wf, 0.0], [0.0, hf], [wf, hf]].iter().any(|&p| {
        let [x, y] = inv.apply(p);
        x < -tol || y < -tol || x > iw + tol || y > ih + tol
    }))
}

/// A line restored tile by tile.
#[derive(Debug, Clone, PartialEq)]
pub struct LineOutcome {
    pub image: ImagePlane,
    pub tiles: usize,
    /// OCR transcripts per tile, in call order.
    pub transcripts: Vec<Vec<String>>,
    pub restore_calls: usize,
    pub ocr_calls: usize,
}

/// Runs [`iterative_restore`] on each `tile_width` tile of a
/// `tile_height`-tall line and stitches the results back to the line width.
/// Tile `t` samples with seed `derive_seed(seed, t, 0)`.
pub fn restore_line<M: EpsModel + ?Sized, O: Recognizer + ?Sized>(
    model: &M,
    line: &ImagePlane,
    pcfg: &PipelineConfig,
    seed: u64,
    guidance: &GuidanceConfig,
    ocr: &O,
) -> Result<LineOutcome> {
    if line.height() != pcfg.tile_height {
        return Err(Error::shape(format!(
            "line height {} differs from the model line height {}",
            line.height(),
            pcfg.tile_height
        )));
    }
    let sliced = slice_line(line, pcfg.tile_width, pcfg.tile_overlap)?;
    let mut outs = Vec::with_capacity(sliced.tiles.len());
    let (mut transcripts, mut restore_calls, mut ocr_calls) = (Vec::new(), 0, 0);
    for (t, tile) in sliced.tiles.iter().enumerate() {
        let cfg = GuidanceConfig {
            seed: derive_seed(seed, t as u64, 0),
            ..*guidance
        };
        let out = iterative_restore(model, tile, &cfg, ocr)?;
        restore_calls += out.restore_calls();
        ocr_calls += out.ocr_calls();
        transcripts.push(out.transcripts);
        outs.push(out.image);
    }
    Ok(LineOutcome {
        image: sliced.stitch(&outs, pcfg.tile_overlap)?,
        tiles: outs.len(),
        transcripts,
        restore_calls,
        ocr_calls,
    })
}

struct Restored {
    crop: ImagePlane,
    theta_k: AffineParams,
    clipped: bool,
    tiles: usize,
    transcripts: Vec<Vec<String>>,
    restore_calls: usize,
    ocr_calls: usize,
}

#[allow(clippy::too_many_arguments)]
fn restore_region<M: EpsModel + ?Sized>(
    image: &ImagePlane,
    upscaled: &ImagePlane,
    region: &TextRegion,
    model: &M,
    guidance: &GuidanceConfig,
    pcfg: &PipelineConfig,
    ocr: &dyn Recognizer,
) -> Result<Restored> {
    let (h, w) = region.dst_size;
    if h != pcfg.tile_height {
        return Err(Error::shape(format!("crop height {h} differs from the model line height {}", pcfg.tile_height)));
    }
    let clipped = reaches_outside(&region.theta, region.dst_size, image)?;
    let crop = warp(image, &region.theta, (h, w))?.to_channels(model.image_channels())?;
    let line = restore_line(model, &crop, pcfg, derive_seed(guidance.seed, region_key(&region.region_id), 0), guidance, ocr)?;
    let restored = line.image.to_channels(image.channels())?;
    // f(I) coordinates → crop coordinates.
    let theta_k = region.theta.compose(&AffineParams::scaling(1.0 / pcfg.factor as f64));
    let f_crop = warp(upscaled, &theta_k, (h, w))?;
    Ok(Restored {
        crop: blend_crop(&restored, &f_crop, pcfg.blend_sigma)?,
        theta_k,
        clipped,
        tiles: line.tiles,
        transcripts: line.transcripts,
        restore_calls: line.restore_calls,
        ocr_calls: line.ocr_calls,
    })
}

/// `I′ = f(I) ⊕ Φ(T₁′, θ₁⁻¹) ⊕ …`.
///
/// `ocr_for` supplies the recognizer for each region. Regions are restored
/// independently (up to `pcfg.workers` at a time) and pasted in order; a
/// region that fails is reported and left as `f(I)`.
pub fn restore_full_image<'o, M, U, F>(
    image: &ImagePlane,
    regions: &[TextRegion],
    upscaler: &U,
    model: &M,
    guidance: &GuidanceConfig,
    pcfg: &PipelineConfig,
    ocr_for: F,
) -> Result<(ImagePlane, RestorationReport)>
where
    M: EpsModel + Sync + ?Sized,
    U: BackgroundUpscaler + ?Sized,
    F: Fn(&TextRegion) -> Result<Box<dyn Recognizer + 'o>> + Sync,
{
    check_factor(pcfg.factor)?;
    guidance.validate()?;
    let upscaled = upscaler.upscale(image, pcfg.factor)?;
    let (h, w) = (image.height() * pcfg.factor, image.width() * pcfg.factor);
    if (upscaled.height(), upscaled.width(), upscaled.channels()) != (h, w, image.channels()) {
        return Err(Error::shape(format!("upscaler returned {:?}, expected ({h}, {w}, {})", upscaled.dims(), image.channels())));
    }
    let results = par_map(regions, pcfg.workers, |_, region| {
        let start = Instant::now();
        let r = ocr_for(region).and_then(|ocr| restore_region(image, &upscaled, region, model, guidance, pcfg, ocr.as_ref()));
        (r, start.elapsed().as_secs_f64() * 1e3)
    });
    let mut pastes = Vec::new();
    let mut outcomes = Vec::with_capacity(regions.len());
    for (region, (r, wall_ms)) in regions.iter().zip(results) {
        let outcome = match r {
            Ok(done) => {
                let o = RegionOutcome {
                    region_id: region.region_id.clone(),
                    status: if done.clipped { RegionStatus::Clipped } else { RegionStatus::Processed },
                    tiles: done.tiles,
                    transcripts: done.transcripts,
                    restore_calls: done.restore_calls,
                    ocr_calls: done.ocr_calls,
                    error: None,
                    wall_ms,
                };
                pastes.push((done.crop, done.theta_k));
                o
            }
            Err(e) => {
                log::warn!("region {} skipped: {e}", region.region_id);
                RegionOutcome {
                    region_id: region.region_id.clone(),
                    status: RegionStatus::Failed,
                    tiles: 0,
                    transcripts: Vec::new(),
                    restore_calls: 0,
                    ocr_calls: 0,
                    error: Some(e.to_string()),
                    wall_ms,
                }
            }
        };
        outcomes.push(outcome);
    }
    let (out, coverage) = paste_regions(&upscaled, &pastes)?;
    let count = |s: RegionStatus| outcomes.iter().filter(|o| o.status == s).count();
    Ok((
        out,
        RestorationReport {
            factor: pcfg.factor,
            regions_processed: count(RegionStatus::Processed),
            regions_clipped: count(RegionStatus::Clipped),
            regions_failed: count(RegionStatus::Failed),
            regions: outcomes,
            coverage,
        },
    ))
}
