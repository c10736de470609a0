//! Separable bicubic resampling with antialiasing on reduction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Sparse interpolation weights of one output sample: `(input index, weight)`.
pub type Taps = Vec<(usize, f64)>;

/// Weights mapping `len_in` samples to `len_out`, replicate boundaries.
///
/// Output `o` is centered at input coordinate `(o + 0.5)/scale − 0.5`. When
/// shrinking, the kernel is stretched by `1/scale` so it also low-passes.
/// Weights of each output sum to one.
pub fn axis_weights(len_in: usize, len_out: usize) -> Vec<Taps> {
    let scale = len_out as f64 / len_in as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..len_out)
        .map(|o| {
            let u = (o as f64 + 0.5) / scale - 0.5;
            let first = (u - support).floor() as isize + 1;
            let last = (u + support).ceil() as isize - 1;
            let mut taps: Taps = Vec::new();
            let mut total = 0.0;
            for i in first..=last {
                let wgt = cubic((u - i as f64) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                total += wgt;
                let idx = i.clamp(0, len_in as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

fn apply_rows(src: &[f64], h: usize, w: usize, weights: &[Taps]) -> Vec<f64> {
    let wo = weights.len();
    let mut out = vec![0.0; h * wo];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for (o, taps) in weights.iter().enumerate() {
            out[r * wo + o] = taps.iter().map(|&(i, v)| v * row[i]).sum();
        }
    }
    out
}

fn apply_cols(src: &[f64], w: usize, weights: &[Taps]) -> Vec<f64> {
    let ho = weights.len();
    let mut out = vec![0.0; ho * w];
    for (o, taps) in weights.iter().enumerate() {
        let dst = &mut out[o * w..(o + 1) * w];
        for &(i, v) in taps {
            for (d, s) in dst.iter_mut().zip(&src[i * w..(i + 1) * w]) {
                *d += v * s;
            }
        }
    }
    out
}

/// Bicubic resize of every plane of `(N, C, H, W)` to `out_h × out_w`.
pub fn bicubic_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("cannot resize to or from an empty image"));
    }
    let wy = axis_weights(h, out_h);
    let wx = axis_weights(w, out_w);
    let mut data = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        let rows = apply_rows(plane, h, w, &wx);
        data.extend(apply_cols(&rows, out_w, &wy));
    }
    Tensor::new(&[n, c, out_h, out_w], data)
}

/// Antialiased bicubic reduction by an integer factor `s`.
pub fn bicubic_downsample(x: &Tensor, s: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!("{h}x{w} image is not divisible by scale {s}")));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    bicubic_resize(x, h / s, w / s)
}

/// Bicubic enlargement by an integer factor `s` (the baseline upsampler).
pub fn bicubic_upsample(x: &Tensor, s: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if s == 0 {
        return Err(Error::invalid("scale must be positive"));
    }
    bicubic_resize(x, h * s, w * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_interpolates() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_one() {
        for (a, b) in [(16, 8), (16, 4), (7, 13), (10, 10)] {
            for taps in axis_weights(a, b) {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 5, 6], |i| (i as f64 * 0.37).sin());
        assert_eq!(bicubic_downsample(&x, 1).unwrap(), x);
        let y = bicubic_resize(&x, 5, 6).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::full(&[1, 3, 12, 16], 0.42);
        let y = bicubic_downsample(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 4]);
        assert!(y.data().iter().all(|v| (v - 0.42).abs() < 1e-14));
        let z = bicubic_upsample(&x, 2).unwrap();
        assert!(z.data().iter().all(|v| (v - 0.42).abs() < 1e-14));
    }

    #[test]
    fn indivisible_dims_rejected() {
        assert!(bicubic_downsample(&Tensor::zeros(&[1, 1, 5, 4]), 2).is_err());
    }
}
