//! Masked-autoencoder pre-training for high-resolution grayscale X-ray-like
//! images with context-aware token masking, plus a frozen-encoder linear probe.
//!
//! The pipeline: an image is cut into non-overlapping patches ([`patch`]),
//! most tokens are masked with a bias toward the chest region ([`masking`]),
//! the visible tokens run through a ViT encoder and the full grid through a
//! light decoder ([`model`]), all differentiated by an eager tape
//! ([`tape`]) and optimized by AdamW ([`optim`], [`trainer`]). Synthetic
//! chest phantoms ([`phantom`]) stand in for real radiographs, and
//! [`probe`] measures what the encoder learned.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod masking;
pub mod model;
pub mod optim;
pub mod par;
pub mod patch;
pub mod phantom;
pub mod probe;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use masking::{MaskPlan, RegionMask};
pub use model::{ModelParams, ViTConfig};
pub use par::Execution;
pub use patch::{ImageGray, PatchConfig};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
