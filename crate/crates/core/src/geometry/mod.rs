//! Affine region extraction and insertion, low-pass blending, and line tiling.

mod affine;
mod filter;
mod region;
mod resample;
mod tiles;

pub use affine::{affine_from_boxes, invert_affine, paste_regions, warp, AffineParams, CoverageReport, Point, RegionCoverage};
pub use filter::{blend_crop, gaussian_kernel, lowpass};
pub use region::{read_jsonl, read_region_manifest, write_jsonl, write_region_manifest, RegionRecord, TextRegion};
pub use resample::{area_resize, bilinear_resize, resize_to_height};
pub use tiles::{slice_line, stitch_tiles, tile_starts, SlicedLine, TileLayout, TILE_OVERLAP, TILE_WIDTH};

/// Blend σ for [`blend_crop`].
pub const BLEND_SIGMA: f64 = 3.0;
