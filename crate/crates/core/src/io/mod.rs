//! File formats: PGM rasters, checkpoints and synthetic datasets.

pub mod checkpoint;
pub mod pgm;
pub mod synth;
