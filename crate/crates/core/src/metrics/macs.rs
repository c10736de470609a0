//! Analytic multiply-accumulate counts.
//!
//! Counting rules: a convolution costs `Cout·Hout·Wout·Cin·kh·kw`; a
//! deformable convolution adds 4 per bilinearly sampled tap; a dynamic
//! filter costs `(2p+1)²` per output value; pixel shuffles, activations and
//! additions are free; an FFT of `n` points costs `5·n·log2 n`, two per
//! channel for the Wiener deconvolution (the kernel spectrum is not counted).

use crate::cascade::arch::{walk, PinvCost, ShapeBuilder};
use crate::cascade::config::CHANNELS;
use crate::cascade::CascadeConfig;
use crate::error::Result;
use crate::operator::pinv::PINV_WIDTH;
use crate::operator::DownsampleOperator;

/// MACs of one stride-1 style convolution layer.
pub fn conv_macs(cin: usize, cout: usize, k: usize, ho: usize, wo: usize) -> u128 {
    (cout * ho * wo * cin * k * k) as u128
}

/// `5·n·log2 n` for an `h × w` transform.
pub fn fft_macs(h: usize, w: usize) -> u128 {
    let n = (h * w) as f64;
    (5.0 * n * n.log2()).round() as u128
}

/// MACs of the learned pseudo-inverse per LR pixel (all channels).
pub fn learned_pinv_macs_per_pixel(s: usize) -> u128 {
    let w = PINV_WIDTH;
    (w * CHANNELS * 49 + w * w * 25 + CHANNELS * s * s * w * 9) as u128
}

/// Per-module and total MACs of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacCount {
    pub wiener: u128,
    /// `(sub-module, MACs)` in forward order.
    pub modules: Vec<(&'static str, u128)>,
    pub total: u128,
}

impl MacCount {
    pub fn module(&self, name: &str) -> Option<u128> {
        self.modules.iter().find(|(n, _)| *n == name).map(|&(_, m)| m)
    }
}

/// MACs of the cascade on one `3 × h × w` LR image, with the learned
/// pseudo-inverse as the projection backend.
pub fn mac_count(cfg: &CascadeConfig, h: usize, w: usize) -> Result<MacCount> {
    mac_count_with(cfg, h, w, PinvCost::PerPixel(learned_pinv_macs_per_pixel(cfg.scale)))
}

/// [`mac_count`] with an explicit cost model for `A⁺`.
pub fn mac_count_with(cfg: &CascadeConfig, h: usize, w: usize, pinv: PinvCost) -> Result<MacCount> {
    cfg.validate()?;
    cfg.check_lr_dims(h, w)?;
    let k = DownsampleOperator::anchor(cfg.scale)?.composite_kernel()?;
    let mut b = ShapeBuilder::new(cfg.scale, (k.height() * k.width()) as u128, pinv);
    walk(cfg, h, w, &mut b)?;
    let wiener = if cfg.ablation.use_wiener_input {
        2 * CHANNELS as u128 * fft_macs(h, w)
    } else {
        0
    };
    Ok(MacCount {
        wiener,
        total: b.macs + wiener,
        modules: b.stages,
    })
}
