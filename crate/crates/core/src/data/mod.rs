//! Paired `(y, x)` datasets built from simulator trajectories.
//!
//! `y` is the low-resolution vorticity `zeta_l`, `x` the high-resolution
//! `zeta_h` at the same instant. Each trajectory contributes its earliest
//! snapshots to the training split and its latest to the test split, with a
//! gap in between so that no test sample is a near-copy of a training one.

mod batches;
mod build;
mod dataset;

pub use batches::{epoch_batches, Batch};
pub use build::{build_dataset, plan_split, SplitPlan, SplitSpec};
pub use dataset::{ChannelStats, Dataset, DatasetManifest, FileEntry, Normalization, PairRef, SourceRef, DATASET_FORMAT_VERSION};
