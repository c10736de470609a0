//! Image fidelity metrics and analytic compute-cost accounting.

pub mod macs;
mod quality;
mod report;

pub use macs::{conv_macs, fft_macs, mac_count, MacCount};
pub use quality::{psnr, ssim, PSNR_CAP, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use report::{ImageScore, MetricsReport, Summary};
