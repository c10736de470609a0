//! Blur kernels and synthesis of degraded low-resolution observations.

pub mod blur;
pub mod kernel;
pub mod resample;
pub mod spec;
pub mod synth;
pub mod trajectory;

pub use blur::{blur, Boundary};
pub use kernel::{compose_kernels, gaussian_kernel, gaussian_side, linear_motion_kernel, BlurKernel, Kernel};
pub use resample::{bicubic_downsample, bicubic_resize, bicubic_upsample};
pub use spec::{sample_spec, DegradationSpec, Family, Motion};
pub use synth::{anchor_kernel, anchor_sigma, degrade, synthesize, SamplePair};
pub use trajectory::{anxiety_from_exponent, trajectory_kernel};
