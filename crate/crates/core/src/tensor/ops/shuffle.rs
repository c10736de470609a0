//! Sub-pixel rearrangement between channels and space.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(N, C·s², H, W) → (N, C, sH, sW)`; input channel `c·s² + i·s + j` lands
/// at sub-position `(i, j)` of each output block.
pub fn pixel_shuffle(input: &Tensor, s: usize) -> Result<Tensor> {
    let (n, cin, h, w) = input.dims4()?;
    if s == 0 || cin % (s * s) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {cin} channels not divisible by {s}²"
        )));
    }
    let c = cin / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; input.len()];
    let src = input.data();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let plane = ((b * cin) + ch * s * s + i * s + j) * h * w;
                    for y in 0..h {
                        let dst_row = ((b * c + ch) * oh + y * s + i) * ow;
                        for x in 0..w {
                            out[dst_row + x * s + j] = src[plane + y * w + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(input: &Tensor, s: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = input.dims4()?;
    if s == 0 || oh % s != 0 || ow % s != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle: {oh}x{ow} not divisible by {s}"
        )));
    }
    let (h, w) = (oh / s, ow / s);
    let cout = c * s * s;
    let mut out = vec![0.0; input.len()];
    let src = input.data();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let plane = ((b * cout) + ch * s * s + i * s + j) * h * w;
                    for y in 0..h {
                        let src_row = ((b * c + ch) * oh + y * s + i) * ow;
                        for x in 0..w {
                            out[plane + y * w + x] = src[src_row + x * s + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_channels_fill_a_block() {
        let t = Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&t, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn scale_one_is_identity() {
        let t = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64);
        assert_eq!(pixel_shuffle(&t, 1).unwrap(), t);
    }

    #[test]
    fn indivisible_channels_rejected() {
        assert!(pixel_shuffle(&Tensor::zeros(&[1, 6, 2, 2]), 2).is_err());
        assert!(pixel_unshuffle(&Tensor::zeros(&[1, 1, 3, 4]), 2).is_err());
    }
}
