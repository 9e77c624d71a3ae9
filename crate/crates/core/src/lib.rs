//! Residual networks with learned halting.
//!
//! Blocks can run every unit (`halting=none`), stop per image once the
//! accumulated halting score reaches `1 - epsilon` (`act`), or stop per
//! spatial position (`sact`), evaluating later units only where needed.
//! Training adds `tau` times the ponder cost to the task loss.
//!
//! Entry points: [`arch::NetworkSpec`] describes a network,
//! [`network::Network`] holds its parameters, [`model::forward_graph`] builds
//! the differentiable training graph, [`train::train`] fits it, and
//! [`flops::count_flops`] prices a configuration.

pub mod act;
pub mod arch;
pub mod autodiff;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod model;
pub mod network;
pub mod perforated;
pub mod saliency;
pub mod sact;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ActiveMask, ConvSpec, DType, Padding, Scalar, Tensor};
