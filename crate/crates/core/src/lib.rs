//! Dilated U-Net: neighborhood and dilated neighborhood attention inside a
//! U-shaped encoder/decoder for 2-D segmentation, on a small reverse-mode
//! autodiff engine.

pub mod attention;
pub mod bench;
pub mod block;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod params;
pub mod probes;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};
