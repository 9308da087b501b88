//! Finite-horizon sequences and causal operators acting on them.

mod causal;
pub mod io;
mod kernel;
mod norm;
mod sequence;

pub use causal::{CausalMap, Causality, Operator};
pub use kernel::LinearCausalKernel;
pub use norm::{spectral_norm, Norm};
pub use sequence::Sequence;
