//! Self-supervised pre-training for 3-D point clouds.
//!
//! The artifact implements dual-masked autoencoding: a point cloud is grouped
//! into local patches, two independent random masks are applied to the patch
//! tokens, a shared transformer encoder processes each visible set, and two
//! decoders reconstruct the masked patches. Tokens masked by both masks are
//! additionally pulled together in feature space by a cosine contrastive term.
//!
//! Everything is CPU-only and deterministic: a small tape-based autodiff
//! engine ([`tensor`]), point-cloud geometry kernels ([`geometry`]), the dual
//! masking scheme ([`masking`]), the transformer model ([`model`]), losses
//! ([`losses`]), the training loop with checkpointing ([`training`]),
//! synthetic shape data ([`data`]), downstream probes ([`eval`]), and
//! independent oracle checks ([`verify`]). The `pointcmae` binary exposes the
//! whole pipeline via subcommands ([`cli`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod masking;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
