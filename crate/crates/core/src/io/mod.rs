//! On-disk formats: run configuration, volumes and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod volume;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use config::RunConfig;
pub use volume::{ValueType, Volume, VolumeData, VolumeHeader};
