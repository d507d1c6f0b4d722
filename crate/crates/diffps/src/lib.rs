//! Desk-scale person search pipeline.
//!
//! A frozen hierarchical-feature backbone (synthetic by default, with an
//! adapter slot for a real diffusion UNet) feeds two fully decoupled
//! branches: a detection branch whose region proposals are guided by a
//! Gaussian prior built from a "person" cross-attention map, and a re-ID
//! branch that refines multi-scale features in the wavelet domain, weights
//! them by body-part text similarity, and encodes stripe embeddings trained
//! with an online instance-matching loss.

pub mod autograd;
pub mod backbone;
pub mod boxes;
pub mod dgrpn;
pub mod error;
pub mod eval;
pub mod heads;
pub mod msfrn;
pub mod nn;
pub mod pipeline;
pub mod sfan;
pub mod util;
pub mod wavelet;

pub use error::{Error, Result};
