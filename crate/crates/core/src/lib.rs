//! Contrastive speaker-representation learning at desk scale.
//!
//! The crate covers the full pipeline: MFCC front-end, waveform and spectral
//! augmentation, a TDNN encoder trained with SimCLR, momentum contrast,
//! prototypical contrast or supervised contrast, and a cosine-scoring
//! verification back-end reporting EER and minDCF.

pub mod augment;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod harness;
pub mod numerics;
pub mod par;
pub mod prototypes;
pub mod rng;

pub use error::{Error, Result};
