//! Slide ingestion: foreground detection, tiling into patch stacks, stain
//! normalization, augmentation and the dataset manifest.

mod augment;
mod manifest;
mod mask;
mod stain;
mod tile;

pub use augment::{
    apply_geometric, apply_photometric, augment, draw as draw_augmentation, AugmentPolicy, GeometricDraw,
    PhotometricDraw,
};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestRecord, Split};
pub use mask::{foreground_mask, is_foreground, Mask, SATURATION_MIN, VALUE_MAX};
pub use stain::{lab_stats, lab_to_rgb, rgb_to_lab, stain_normalize, stain_normalize_masked, LabStats};
pub use tile::{candidate_windows, tile_slide, tile_slide_with_mask, PatchStack};
