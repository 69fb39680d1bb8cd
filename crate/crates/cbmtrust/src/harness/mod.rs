//! Training loop, evaluation, benchmark runner, patch-drop experiment,
//! configuration and checkpoints.

mod adam;
mod bench;
mod checkpoint;
mod config;
mod localizers;
mod train;

pub use adam::Adam;
pub use bench::{
    default_suite, patch_drop_experiment, run_benchmark, BenchRow, BenchmarkReport, DropShape,
    GroupDrop, PatchDropReport,
};
pub use checkpoint::{load_checkpoint, load_checkpoint_checked, save_checkpoint, Checkpoint};
pub use config::{DatasetSource, ModelKind, TrainConfig};
pub use localizers::{CamLocalizer, ProtoLocalizer};
pub use train::{build_model, evaluate, train, EpochStats, RunRecord, RunResults, StepRecord};

/// SplitMix64 step; used to derive independent seeds from a master seed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
