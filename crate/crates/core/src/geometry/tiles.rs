use serde::{Deserialize, Serialize};

use crate::{Error, ImagePlane, Result};

pub const TILE_WIDTH: usize = 480;
pub const TILE_OVERLAP: usize = 16;

/// A text line cut into fixed-width tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedLine {
    pub tiles: Vec<ImagePlane>,
    pub starts: Vec<usize>,
    /// Width of the original line; the stitched result is cropped back to it.
    pub line_w: usize,
    /// The line was narrower than one tile and was edge-padded.
    pub padded: bool,
}

/// Tile start columns: stride `tile_w − overlap`, last tile right-aligned.
pub fn tile_starts(line_w: usize, tile_w: usize, overlap: usize) -> Vec<usize> {
    if line_w <= tile_w {
        return vec![0];
    }
    let stride = tile_w - overlap;
    let mut starts = Vec::new();
    let mut s = 0;
    while s + tile_w < line_w {
        starts.push(s);
        s += stride;
    }
    let last = line_w - tile_w;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

pub fn slice_line(line: &ImagePlane, tile_w: usize, overlap: usize) -> Result<SlicedLine> {
    if tile_w <= 2 * overlap {
        return Err(Error::InvalidRange(format!("tile width {tile_w} must exceed twice the overlap {overlap}")));
    }
    let w = line.width();
    if w < tile_w {
        return Ok(SlicedLine {
            tiles: vec![line.pad_right_replicate(tile_w)],
            starts: vec![0],
            line_w: w,
            padded: true,
        });
    }
    let starts = tile_starts(w, tile_w, overlap);
    let tiles = starts.iter().map(|&s| line.crop_cols(s, tile_w)).collect::<Result<_>>()?;
    Ok(SlicedLine {
        tiles,
        starts,
        line_w: w,
        padded: false,
    })
}

/// Reassembles tiles, cross-fading linearly wherever two tiles overlap.
///
/// In a zone of `L` shared columns the incoming tile's weight at column `k`
/// is `(k+1)/(L+1)`. Columns past `line_w` are dropped.
pub fn stitch_tiles(tiles: &[ImagePlane], starts: &[usize], line_w: usize, overlap: usize) -> Result<ImagePlane> {
    if tiles.is_empty() || tiles.len() != starts.len() {
        return Err(Error::shape(format!("{} tiles with {} starts", tiles.len(), starts.len())));
    }
    if line_w == 0 {
        return Err(Error::InvalidRange("line width 0".into()));
    }
    let (h, _, c) = tiles[0].dims();
    for t in tiles {
        if t.height() != h || t.channels() != c {
            return Err(Error::shape(format!("tile {:?} vs {:?}", t.dims(), tiles[0].dims())));
        }
    }
    if starts.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidRange(format!("tile starts not strictly increasing: {starts:?}")));
    }
    if starts[0] > 0 {
        return Err(Error::GapBetweenTiles(0));
    }
    let mut out = ImagePlane::filled(h, line_w, c, 0.0);
    let mut covered = 0;
    for (i, (tile, &s)) in tiles.iter().zip(starts).enumerate() {
        if s > covered {
            return Err(Error::GapBetweenTiles(covered));
        }
        let zone = covered - s;
        if i > 0 && zone < overlap.min(line_w - s) {
            return Err(Error::InvalidRange(format!(
                "tiles {} and {i} share {zone} columns, need {overlap}",
                i - 1
            )));
        }
        let end = (s + tile.width()).min(line_w);
        for x in s..end {
            let k = x - s;
            let wt = if k < zone { (k + 1) as f64 / (zone + 1) as f64 } else { 1.0 };
            for y in 0..h {
                for ch in 0..c {
                    let v = tile.get(y, k, ch);
                    let blended = if wt < 1.0 { (1.0 - wt) * out.get(y, x, ch) + wt * v } else { v };
                    out.set(y, x, ch, blended);
                }
            }
        }
        covered = covered.max(end);
    }
    if covered < line_w {
        return Err(Error::GapBetweenTiles(covered));
    }
    Ok(out)
}

impl SlicedLine {
    /// Stitches `tiles` laid out like this slicing (e.g. restored versions of `self.tiles`).
    pub fn stitch(&self, tiles: &[ImagePlane], overlap: usize) -> Result<ImagePlane> {
        stitch_tiles(tiles, &self.starts, self.line_w, overlap)
    }
}

/// Serializable summary of a slicing, for reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub starts: Vec<usize>,
    pub line_w: usize,
    pub padded: bool,
}

impl From<&SlicedLine> for TileLayout {
    fn from(s: &SlicedLine) -> Self {
        TileLayout {
            starts: s.starts.clone(),
            line_w: s.line_w,
            padded: s.padded,
        }
    }
}
