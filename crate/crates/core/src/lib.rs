//! Step-consistent block-autoregressive diffusion on synthetic latent
//! trajectories, with a bounded segmented KV cache whose aged entries are
//! summarized by a strided convolution.

pub mod error;
pub mod io;
pub mod numerics;
pub mod schedule;
pub mod streaming;
pub mod convkv;
pub mod model;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
