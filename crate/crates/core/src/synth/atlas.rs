use std::io::Write;
use std::path::Path;

use font8x8::UnicodeFonts;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hand-drawn 8×8 Han characters ('#' = ink); `font8x8` has no Han block.
const HAN: [(char, [&str; 8]); 10] = [
    ('一', ["........", "........", "........", "#######.", "........", "........", "........", "........"]),
    ('二', ["........", ".#####..", "........", "........", "........", "#######.", "........", "........"]),
    ('三', [".######.", "........", "........", "..####..", "........", "........", "#######.", "........"]),
    ('十', ["...#....", "...#....", "...#....", "#######.", "...#....", "...#....", "...#....", "........"]),
    ('口', ["........", "######..", "#....#..", "#....#..", "#....#..", "#....#..", "######..", "........"]),
    ('日', [".#####..", ".#...#..", ".#...#..", ".#####..", ".#...#..", ".#...#..", ".#####..", "........"]),
    ('田', ["#######.", "#..#..#.", "#..#..#.", "#######.", "#..#..#.", "#..#..#.", "#######.", "........"]),
    ('中', ["...#....", "#######.", "#..#..#.", "#..#..#.", "#######.", "...#....", "...#....", "........"]),
    ('王', ["#######.", "...#....", "...#....", ".#####..", "...#....", "...#....", "#######.", "........"]),
    ('工', ["#######.", "...#....", "...#....", "...#....", "...#....", "...#....", "#######.", "........"]),
];

pub const DIGITS: &str = "0123456789";
pub const UPPERCASE: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// The ten Han glyphs drawn in-repo.
pub fn han_chars() -> String {
    HAN.iter().map(|(c, _)| *c).collect()
}

/// Digits, uppercase Latin and the ten Han glyphs.
pub fn default_charset() -> String {
    format!("{DIGITS}{UPPERCASE}{}", han_chars())
}

fn glyph8(c: char) -> Option<[[bool; 8]; 8]> {
    if let Some((_, rows)) = HAN.iter().find(|(h, _)| *h == c) {
        let mut g = [[false; 8]; 8];
        for (y, row) in rows.iter().enumerate() {
            for (x, b) in row.bytes().enumerate() {
                g[y][x] = b == b'#';
            }
        }
        return Some(g);
    }
    let rows = font8x8::BASIC_FONTS
        .get(c)
        .or_else(|| font8x8::LATIN_FONTS.get(c))
        .or_else(|| font8x8::GREEK_FONTS.get(c))
        .or_else(|| font8x8::HIRAGANA_FONTS.get(c))?;
    let mut g = [[false; 8]; 8];
    for (y, r) in rows.iter().enumerate() {
        for (x, px) in g[y].iter_mut().enumerate() {
            *px = r >> x & 1 == 1;
        }
    }
    Some(g)
}

/// Monospace bitmap font: one `cell_h × cell_w` coverage map per character.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphAtlas {
    charset: Vec<char>,
    cell_h: usize,
    cell_w: usize,
    /// `charset.len() × cell_h × cell_w`, 0 = background, 255 = ink.
    bitmaps: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtlasHeader {
    format: String,
    charset: String,
    cell_h: usize,
    cell_w: usize,
}

const ATLAS_FORMAT: &str = "textsr-atlas-1";

impl GlyphAtlas {
    /// 16×8 cells: 8×8 bitmaps with every row doubled. Fails on characters without a bitmap.
    pub fn builtin(charset: &str) -> Result<Self> {
        let mut chars: Vec<char> = Vec::new();
        for c in charset.chars() {
            if !chars.contains(&c) {
                chars.push(c);
            }
        }
        let mut bitmaps = Vec::with_capacity(chars.len() * 128);
        for &c in &chars {
            let g = glyph8(c).ok_or(Error::UnknownGlyph(c))?;
            if g.iter().flatten().all(|&p| !p) {
                return Err(Error::Config(format!("glyph {c:?} is blank")));
            }
            for y in 0..16 {
                bitmaps.extend(g[y / 2].iter().map(|&p| if p { 255 } else { 0 }));
            }
        }
        Ok(GlyphAtlas {
            charset: chars,
            cell_h: 16,
            cell_w: 8,
            bitmaps,
        })
    }

    pub fn default_desk() -> Self {
        GlyphAtlas::builtin(&default_charset()).expect("built-in glyphs exist")
    }

    pub fn charset(&self) -> &[char] {
        &self.charset
    }

    pub fn cell(&self) -> (usize, usize) {
        (self.cell_h, self.cell_w)
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.charset.iter().position(|&x| x == c)
    }

    pub fn contains(&self, c: char) -> bool {
        self.index_of(c).is_some()
    }

    /// Ink coverage in [0, 1] of glyph `i` at cell pixel `(y, x)`.
    #[inline]
    pub fn coverage(&self, i: usize, y: usize, x: usize) -> f64 {
        self.bitmaps[(i * self.cell_h + y) * self.cell_w + x] as f64 / 255.0
    }

    /// Width in pixels of one character rendered at `height`.
    pub fn pitch(&self, height: usize) -> usize {
        ((self.cell_w * height) as f64 / self.cell_h as f64).round().max(1.0) as usize
    }

    /// Writes the JSON header line followed by the raw bitmap block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = AtlasHeader {
            format: ATLAS_FORMAT.into(),
            charset: self.charset.iter().collect(),
            cell_h: self.cell_h,
            cell_w: self.cell_w,
        };
        let mut buf = serde_json::to_vec(&header).expect("header serializes");
        buf.push(b'\n');
        buf.extend_from_slice(&self.bitmaps);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Format { what: "atlas", msg };
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
        let header: AtlasHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
        if header.format != ATLAS_FORMAT {
            return Err(bad(format!("unknown format {:?}", header.format)));
        }
        let charset: Vec<char> = header.charset.chars().collect();
        let want = charset.len() * header.cell_h * header.cell_w;
        let body = &bytes[nl + 1..];
        if body.len() != want || header.cell_h == 0 || header.cell_w == 0 {
            return Err(bad(format!("bitmap block has {} bytes, header implies {want}", body.len())));
        }
        Ok(GlyphAtlas {
            charset,
            cell_h: header.cell_h,
            cell_w: header.cell_w,
            bitmaps: body.to_vec(),
        })
    }
}
