//! Point-cloud files, dataset manifests and synthetic shape datasets.

mod manifest;
mod pointfile;
mod synth;

pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use pointfile::{
    decode_binary, decode_text, encode_binary, encode_text, load_point_cloud, save_point_cloud, PointFormat,
    BINARY_MAGIC, BINARY_VERSION, TEXT_MAGIC,
};
pub use synth::{
    sample_shape, synth_classification_dataset, synth_segmentation_dataset, write_dataset, ShapeFamily, SynthDataset,
    SynthPlan, SynthSample, SyntheticSpec,
};
