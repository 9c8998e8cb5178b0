//! Learning visible watermarks that are hard to remove by inpainting under a
//! normalizing-flow generative prior.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod flow;
pub mod harvim;
pub mod io;
pub mod nn;
pub mod rng;
pub mod solver;
pub mod tensor;
pub mod watermark;

pub use autodiff::{backward, grad, Tape, Var};
pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{Real, Tensor};
