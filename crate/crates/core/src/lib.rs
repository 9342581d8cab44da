//! Inference-time latent optimization on cross-attention maps.
//!
//! The crate splits into the attention primitives ([`attention`]), the
//! attendance and binding losses ([`losses`]), the nursing loop that updates
//! a latent during sampling ([`nursing`]), a toy diffusion testbed
//! ([`testbed`]), a benchmark harness ([`bench`]) and file formats plus the
//! command-line surface ([`io`], [`cli`]).

pub mod attention;
pub mod error;
pub mod io;
pub mod losses;
pub mod nursing;
pub mod bench;
pub mod cli;
pub mod testbed;

pub use attention::{AttentionStack, Grid2D, NormalizedMap, PromptSpec, TokenMap};
pub use error::{Error, Result};
pub use losses::{LossValue, Objective};
pub use nursing::{Latent, Mode, NursingSchedule};
