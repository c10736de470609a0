//! The anchor downsampling operator, its pseudo-inverses, and fitting of the
//! low-resolution blur kernel k^L.

pub mod downsample;
pub mod klow;
pub mod pinv;

pub use downsample::DownsampleOperator;
pub use klow::{klow_side, KlowFit, KlowFitter, KlowMlp, KlowMlpConfig};
pub use pinv::{
    fit_learned_pinv, project, right_inverse_rms, ExactPinv, LearnedPinv, PinvFit, PinvFitConfig,
    PseudoInverse,
};
