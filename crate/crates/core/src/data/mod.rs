//! Feature files, the synthetic generator, manifests and batching.

mod batch;
mod features;
mod generate;
mod manifest;

pub use batch::{make_batch, sample_batch, Batch, MIN_T_TRAIN};
pub use features::{
    decode_feature_bytes, encode_feature_bytes, read_feature_file, read_feature_header, write_feature_file, Bag,
    FeatureSequence, Modality, FEATURE_MAGIC,
};
pub use generate::{generate_dataset, generate_with_traces, GenConfig, PlantedTrace};
pub use manifest::{
    read_frame_labels, read_manifest, write_dataset, write_manifest, DatasetIndex, Dims, ManifestEntry, MANIFEST_FILE,
    MANIFEST_FORMAT,
};
