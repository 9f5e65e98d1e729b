//! Annotation ingestion, clip assembly, augmentation and synthetic data.

pub mod annotations;
pub mod clip;
pub mod dataset;
pub mod synth;

pub use annotations::{
    body_box_unclamped, clamp_box, derive_body_box, load_annotations, parse_annotations, write_annotations,
    AnnotationRecord, BBox, SpeakLabel, Track,
};
pub use clip::{
    augment_visual, mix_at_snr, negative_audio_mix, sample_clip, window_clip, AugmentationConfig, GeometricTransform,
};
pub use dataset::{assemble_track, load_dataset, save_dataset, Dataset, DatasetMeta, FrameDirectorySource, MediaSource, TrackData};
pub use synth::{generate_synthetic, SignalChannel, SyntheticSpec};
