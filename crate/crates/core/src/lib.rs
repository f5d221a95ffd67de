//! Mean-field interacting particle systems on the circle: interaction
//! kernels, the `τ·∫|f'''|₊` synchronization criterion, particle dynamics,
//! stationary-point classification and packaged numerical experiments.

// NaN must fail validation, so negated comparisons are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod criterion;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod interaction;
pub mod io;
pub mod numerics;
pub mod stability;

pub use error::{Result, SyncError};
pub use interaction::{AngleFrame, AngleInterval, CosProfile, InteractionKernel, KernelFamily, L1Method, PositiveRegion};
