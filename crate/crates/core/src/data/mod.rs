//! Core data model, synthetic RF generation, and ROI extraction.

mod geometry;
mod preprocess;
mod roi;
mod store;
mod synth;
mod types;

pub use geometry::{needle_rectangle, needle_mask_intervals, AxisIntervals, Rectangle};
pub use preprocess::{normalize_rescale, resize_bilinear, standardize};
pub use roi::{extract_patches, extract_roi_grid, preprocess_window, RoiParams, RoiWindow};
pub use store::{
    load_core, load_dataset, read_manifest, write_core, write_dataset, CoreMeta, DatasetManifest,
};
pub use synth::{measure_separability, synth_generate, Separability, SynthConfig, TextureParams};
pub use types::{
    BiopsyCore, CancerSpan, Dataset, Matrix, NeedleGeometry, ProstateMask, RfFrame, RoiPatch,
};
