use super::GlyphAtlas;
use crate::geometry::area_resize;
use crate::{Error, ImagePlane, Result};

/// Ink coverage of glyph `i` scaled to `height × pitch` (area sampling).
pub(crate) fn scaled_glyph(atlas: &GlyphAtlas, i: usize, height: usize) -> ImagePlane {
    let (ch, cw) = atlas.cell();
    let cell = ImagePlane::from_fn(ch, cw, 1, |y, x, _| atlas.coverage(i, y, x));
    area_resize(&cell, height, atlas.pitch(height))
}

/// Dark (−1) glyphs on a light (+1) background on a fixed-pitch grid.
/// The empty string renders as one blank cell.
pub fn render_text(text: &str, atlas: &GlyphAtlas, height: usize) -> Result<ImagePlane> {
    if height == 0 {
        return Err(Error::InvalidRange("render height 0".into()));
    }
    let idx = text
        .chars()
        .map(|c| atlas.index_of(c).ok_or(Error::UnknownGlyph(c)))
        .collect::<Result<Vec<_>>>()?;
    let pitch = atlas.pitch(height);
    let cells = idx.len().max(1);
    let mut img = ImagePlane::filled(height, cells * pitch, 1, 1.0);
    for (k, &i) in idx.iter().enumerate() {
        let g = scaled_glyph(atlas, i, height);
        for y in 0..height {
            for x in 0..pitch {
                img.set(y, k * pitch + x, 0, 1.0 - 2.0 * g.get(y, x, 0));
            }
        }
    }
    Ok(img)
}
