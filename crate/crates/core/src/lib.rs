//! Non-aligned video dehazing at desk scale.
//!
//! Haze synthesis with known misalignment, sliding-window reference
//! matching, flow-guided cosine attention alignment, deformable cosine
//! attention fusion, the training losses and a small end-to-end pipeline,
//! all built on a dense `f64` tensor type with a reverse-mode tape.

pub mod align;
pub mod autodiff;
pub mod embed;
pub mod error;
pub mod flow;
pub mod haze;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nrfm;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
