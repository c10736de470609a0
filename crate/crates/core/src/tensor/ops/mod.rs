//! Forward kernels (and their adjoints) behind the [`Graph`](super::Graph) operations.
//!
//! The free functions here work on plain tensors and are usable without a
//! graph, e.g. for inference.

pub mod conv;
pub mod deform;
pub mod dynfilter;
pub mod sample;
pub mod shuffle;

pub use conv::conv2d;
pub use deform::deformable_conv2d;
pub use dynfilter::dynamic_local_filter;
pub use sample::bilinear_sample;
pub use shuffle::{pixel_shuffle, pixel_unshuffle};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const CHARBONNIER_EPS: f64 = 1e-3;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// `Σ √((u − v)² + ε²)`, summed with Neumaier compensation.
pub fn charbonnier(u: &Tensor, v: &Tensor, eps: f64) -> Result<f64> {
    u.expect_same_shape(v)?;
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for (a, b) in u.data().iter().zip(v.data()) {
        let term = ((a - b) * (a - b) + eps * eps).sqrt();
        let t = sum + term;
        carry += if sum.abs() >= term.abs() {
            (sum - t) + term
        } else {
            (term - t) + sum
        };
        sum = t;
    }
    Ok(sum + carry)
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat: {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
        total += pc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[b * pc * plane..(b + 1) * pc * plane]);
        }
    }
    Tensor::new(&[n, total, h, w], data)
}
