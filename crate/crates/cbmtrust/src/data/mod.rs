//! Datasets: procedural part-annotated generation, CUB-format ingestion,
//! on-disk manifests, and patch-drop masking.

mod cub;
mod manifest;
mod patch;
mod schema;
mod synthetic;

pub use cub::load_cub_annotations;
pub use manifest::{load_dataset, save_dataset};
pub use patch::{apply_patch_drop, rect_pixel_count, DropMode, DropRegion};
pub use schema::{
    concept_part_groups, ConceptDef, ConceptSchema, Dataset, ImageSample, PartAnnotation,
    PartDef, Rect, Split,
};
pub use synthetic::{generate_synthetic_dataset, GeneratorSpec};
