//! Glyph rendering, degradation, and LR/HR/text dataset synthesis.

mod atlas;
mod dataset;
mod degrade;
mod render;

pub use atlas::{default_charset, han_chars, GlyphAtlas, DIGITS, UPPERCASE};
pub use dataset::{
    build_dataset, language_tag, sample_text, DatasetHeader, DatasetManifest, DatasetRecord, DatasetSpec, MANIFEST_NAME,
    MAX_HEIGHT, MIN_HEIGHT,
};
pub use degrade::{degrade, degrade_with_params, DegradationConfig, DegradeParams, PassParams};
pub use render::render_text;
pub(crate) use render::scaled_glyph;
