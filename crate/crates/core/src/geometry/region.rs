use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::affine::{affine_from_boxes, AffineParams, Point};
use crate::{Error, Result};

/// A text region: three source corners (top-left, bottom-left, bottom-right)
/// and the crop they are mapped onto.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRegion {
    pub region_id: String,
    pub src_triangle: [Point; 3],
    /// `(height, width)` of the crop.
    pub dst_size: (usize, usize),
    pub theta: AffineParams,
    pub text: Option<String>,
}

impl TextRegion {
    pub fn new(region_id: impl Into<String>, src_triangle: [Point; 3], dst_size: (usize, usize), text: Option<String>) -> Result<Self> {
        let (h, w) = dst_size;
        if h == 0 || w == 0 {
            return Err(Error::InvalidRange(format!("crop size {h}x{w}")));
        }
        let dst = [[0.0, 0.0], [0.0, h as f64], [w as f64, h as f64]];
        let theta = affine_from_boxes(&src_triangle, &dst)?;
        Ok(TextRegion {
            region_id: region_id.into(),
            src_triangle,
            dst_size,
            theta,
            text,
        })
    }

    /// Crop of height `line_h` whose width keeps the source aspect ratio.
    pub fn at_height(region_id: impl Into<String>, src_triangle: [Point; 3], line_h: usize, text: Option<String>) -> Result<Self> {
        let [a, b, c] = src_triangle;
        let side = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let base = ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2)).sqrt();
        if side < 1e-9 {
            return Err(Error::DegenerateTriangle(side));
        }
        let w = ((base * line_h as f64 / side).round() as usize).max(1);
        TextRegion::new(region_id, src_triangle, (line_h, w), text)
    }
}

/// One line of the region manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub region_id: String,
    pub image_id: String,
    pub src_triangle: [Point; 3],
    pub text: Option<String>,
}

impl RegionRecord {
    pub fn to_region(&self, line_h: usize) -> Result<TextRegion> {
        TextRegion::at_height(self.region_id.clone(), self.src_triangle, line_h, self.text.clone())
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what,
            msg: format!("{}:{}: {e}", path.display(), i + 1),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_region_manifest(path: &Path) -> Result<Vec<RegionRecord>> {
    read_jsonl(path, "region manifest")
}

pub fn write_region_manifest(path: &Path, records: &[RegionRecord]) -> Result<()> {
    write_jsonl(path, records)
}
