//! Run configuration and datasets shared by the command-line driver and the
//! experiment harness.

mod config;
mod dataset;
mod gradcheck;
mod splits;

pub use config::{AdaptParams, RunConfig, SplitSizes, TrainParams};
pub use dataset::{
    clip_example, clip_seed, generate_examples, load_examples, mix_seed, read_annotation,
    read_manifest, read_wav, render_clip, write_annotation, write_manifest, write_scene, write_wav,
    Domain, RenderedClip, SceneMeta, SceneRecord, SyntheticStream, MANIFEST_NAME,
};
pub use gradcheck::{end_to_end_suite, gradcheck_suite, END_TO_END_TOLERANCE, SPOT_CHECKS};
pub use splits::{simulate_split, Split};
