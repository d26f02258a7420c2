//! Dense matrices, a reverse-mode tape, power iteration, seeded randomness and the PXB1 file format.

mod matrix;
pub mod pxb;
mod rng;
mod spectral;
pub mod tape;

pub use matrix::Matrix;
pub use rng::SplitMix64;
pub use spectral::spectral_norm_sq;
pub use tape::{GradientMap, OpKind, Tape, Var};
