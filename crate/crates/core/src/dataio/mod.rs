//! Dataset ingestion, image decoding and preprocessing, synthetic data
//! generation, and the on-disk manifest formats.

pub mod manifest;
pub mod pnm;
pub mod preprocess;
pub mod records;
pub mod synthetic;

pub use manifest::{read_gt_boxes, write_gt_boxes, DatasetManifest, GroundTruthBox};
pub use pnm::{read_pnm, write_pnm, RawImage};
pub use preprocess::{
    bilinear_resize, coordinate_map, preprocess_image, resize_side, CoordinateMap, IMAGENET_MEAN,
    IMAGENET_STD,
};
pub use records::{
    assign_splits, load_metadata, validate_records, Gender, ImageRecord, Split, SplitSpec,
    ViewPosition,
};
pub use synthetic::{generate_synthetic, SyntheticConfig};
