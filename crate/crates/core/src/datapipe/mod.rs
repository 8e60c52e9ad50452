//! Dataset scanning and splitting, frame sampling, augmentation,
//! normalization and the synthetic dataset generator.

pub mod augment;
pub mod frames;
pub mod image;
pub mod scan;
pub mod synth;

pub use self::augment::{augment, AugmentConfig, Augmented, Transform};
pub use self::frames::{frame_indices, pick, sample_frames, SampleMode};
pub use self::image::{denormalize, load_rgb, normalize, save_rgb, Normalization};
pub use self::scan::{
    assign_splits, list_frames, read_manifest, scan_dataset, write_manifest, Label, SampleRecord, Scan, Split,
    SplitRatios, VideoRecord,
};
pub use self::synth::{gen_synthetic, SynthConfig, SynthSummary};
