//! Dataset ingestion and clip assembly.
//!
//! Frames come from per-video directories of numbered images (or from
//! memory); object boxes from an external detector's CSV; ground truth from
//! per-split JSON. [`assemble_stclips`] turns (frames, boxes) into the
//! 32×32 spatio-temporal clips the model consumes. [`synthetic`] generates a
//! deterministic desk-scale dataset with labeled anomalies.

pub mod boxes;
pub mod clips;
pub mod frames;
pub mod labels;
pub mod synthetic;

pub use boxes::{load_boxes, BoxIngestReport, ObjectBox, DEFAULT_CONFIDENCE_THRESHOLD};
pub use clips::{assemble_stclips, crop_resize, ClipStream, STClip};
pub use frames::{ChannelMode, FrameStore, VideoMeta};
pub use labels::{load_labels, read_label_file, LabelTrack};
pub use synthetic::{
    generate_synthetic_dataset, write_synthetic_dataset, SplitData, SyntheticConfig,
    SyntheticDataset,
};
