use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{summarize, EvalRecord};
use crate::diffusion::EpsModel;
use crate::geometry::resize_to_height;
use crate::guidance::GuidanceConfig;
use crate::ocr::{OcrFactory, Recognizer};
use crate::parallel::par_map;
use crate::pipeline::{restore_line, PipelineConfig};
use crate::rng::{derive_seed, stage};
use crate::synth::DatasetManifest;
use crate::{Error, ImagePlane, Result};

/// One held-out crop at model height and channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub gt_text: String,
    pub height_px: usize,
    pub lr: ImagePlane,
    pub hr: ImagePlane,
}

/// Loads up to `limit` manifest records, resized to `line_h` and converted
/// to `channels`.
pub fn load_eval_items(manifest: &DatasetManifest, line_h: usize, channels: usize, limit: Option<usize>) -> Result<Vec<EvalItem>> {
    let n = limit.unwrap_or(usize::MAX).min(manifest.records.len());
    manifest.records[..n]
        .iter()
        .map(|rec| {
            let (lr, hr) = manifest.load_pair(rec)?;
            Ok(EvalItem {
                id: rec.id.clone(),
                gt_text: rec.text.clone(),
                height_px: rec.height_px,
                lr: resize_to_height(&lr, line_h).to_channels(channels)?,
                hr: resize_to_height(&hr, line_h).to_channels(channels)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    #[serde(rename = "R")]
    pub r: usize,
    pub word_acc: f64,
    pub cer: f64,
    pub n: usize,
    pub wall_ms: f64,
}

/// The machine-readable sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

impl SweepTable {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>7} {:>3} {:>9} {:>7} {:>5} {:>10}\n", "omega", "R", "word_acc", "cer", "n", "wall_ms");
        for r in &self.rows {
            s += &format!(
                "{:>7.2} {:>3} {:>9.4} {:>7.4} {:>5} {:>10.0}\n",
                r.omega, r.r, r.word_acc, r.cer, r.n, r.wall_ms
            );
        }
        s += &format!("config {}\n", self.config_hash);
        s
    }

    /// Row for `(omega, r)`.
    pub fn cell(&self, omega: f64, r: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|row| row.omega == omega && row.r == r)
    }
}

/// Per-cell detail behind a table row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub omega: f64,
    pub r: usize,
    pub records: Vec<EvalRecord>,
    /// Pixel MSE of each restored crop against its HR crop.
    pub mse_to_hr: Vec<f64>,
    pub transcripts: Vec<Vec<Vec<String>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub table: SweepTable,
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub omegas: Vec<f64>,
    pub rs: Vec<usize>,
    /// Supplies `ddim_steps`, `null_image` and the base seed; `omega` and
    /// `iterations` are overridden per cell.
    pub guidance: GuidanceConfig,
    pub workers: usize,
}

/// Sampling seed of item `i`; shared by every cell so cells compare pairwise.
pub fn item_seed(base: u64, i: usize) -> u64 {
    derive_seed(base, i as u64, stage::SAMPLE_NOISE)
}

/// For each `(ω, R)` cell, restores every item with `iterative_restore`
/// (guided by `ocr`) and reads the result back with `evaluator`.
pub fn sweep<M: EpsModel + Sync + ?Sized, E: Recognizer + Sync + ?Sized>(
    items: &[EvalItem],
    model: &M,
    pcfg: &PipelineConfig,
    spec: &SweepSpec,
    ocr: &OcrFactory,
    evaluator: &E,
    config_hash: &str,
) -> Result<SweepResult> {
    if spec.omegas.is_empty() || spec.rs.is_empty() {
        return Err(Error::Config("omega and R lists must be non-empty".into()));
    }
    if items.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &omega in &spec.omegas {
        for &r in &spec.rs {
            let g = GuidanceConfig {
                omega,
                iterations: r,
                ..spec.guidance
            };
            g.validate()?;
            let start = Instant::now();
            let per_item = par_map(items, spec.workers, |i, item| -> Result<_> {
                let psi = ocr.for_item(&item.gt_text, i as u64);
                let out = restore_line(model, &item.lr, pcfg, item_seed(spec.guidance.seed, i), &g, psi.as_ref())?;
                let pred = evaluator.recognize(&out.image)?.text;
                Ok((
                    EvalRecord::new(&item.id, &item.gt_text, pred, item.height_px),
                    out.image.mse(&item.hr),
                    out.transcripts,
                ))
            });
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let mut cell = SweepCell {
                omega,
                r,
                records: Vec::with_capacity(items.len()),
                mse_to_hr: Vec::with_capacity(items.len()),
                transcripts: Vec::with_capacity(items.len()),
            };
            for res in per_item {
                let (rec, mse, tr) = res?;
                cell.records.push(rec);
                cell.mse_to_hr.push(mse);
                cell.transcripts.push(tr);
            }
            let (word_acc, cer) = summarize(&cell.records)?;
            rows.push(SweepRow {
                omega,
                r,
                word_acc,
                cer,
                n: items.len(),
                wall_ms,
            });
            cells.push(cell);
        }
    }
    let seeds = BTreeMap::from([("sample".to_string(), spec.guidance.seed)]);
    Ok(SweepResult {
        table: SweepTable {
            rows,
            config_hash: config_hash.into(),
            seeds,
        },
        cells,
    })
}
