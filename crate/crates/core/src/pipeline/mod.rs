//! Full-image composition: background upscaling plus per-region restoration,
//! blending and pasting.

mod restore;
mod upscale;

pub use restore::{restore_full_image, restore_line, LineOutcome, PipelineConfig, RegionOutcome, RegionStatus, RestorationReport};
pub use upscale::{bicubic_upscale, check_factor, Bicubic, CommandUpscaler, BackgroundUpscaler};
