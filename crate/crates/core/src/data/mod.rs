//! Region-feature datasets: stroke parsing, the synthetic generator, and
//! the on-disk format.

pub mod format;
pub mod strokes;
pub mod synth;

pub use synth::{generate, Dataset, DetailLevel, MergeTree, RegionFeatureRecord, SyntheticSpec};
