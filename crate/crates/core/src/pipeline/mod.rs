//! End-to-end drivers: configuration, dataset synthesis, training,
//! inference, and paired ablation experiments.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod infer;
pub mod train;

pub use ablate::{run_ablation, AblationOutcome, VariantStats, ABLATION_NAMES};
pub use config::{LossTerms, TrainConfig};
pub use dataset::{dataset_file_hash, load_dataset, save_dataset, synth_dataset, Dataset, SamplePair};
pub use infer::{default_spec, fuse_images, fuse_to_files, parse_spec_arg, FuseOutputs};
pub use train::{train, TrainSummary, CHECKPOINT_EVERY};
