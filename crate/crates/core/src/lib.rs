//! Training-time perturbation of per-channel feature statistics, plus the
//! machinery needed to study it at desk scale: a small tensor engine with
//! reverse-mode differentiation, channel-statistic tools (instance stats,
//! AdaIN, MMD), a staged convolutional classifier, a synthetic photometric
//! domain-shift benchmark, and domain-gap diagnostics and ablation sweeps.

pub mod diagnostics;
pub mod domains;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod net;
pub mod np;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod tensor;

pub use element::{Dtype, Element};
pub use error::{CoreError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
