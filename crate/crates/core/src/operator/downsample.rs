use rayon::prelude::*;

use crate::degrade::resample::{axis_weights, Taps};
use crate::degrade::{anchor_kernel, blur, bicubic_downsample, BlurKernel, Boundary, Kernel};
use crate::error::{Error, Result};
use crate::tensor::ops::conv2d;
use crate::tensor::{Conv2dOpts, LinearMap, Tensor};

/// The anchor degradation `A x = [x ⊛ k^D]↓s`: replicate-boundary blur
/// followed by antialiased bicubic reduction.
///
/// [`LinearMap::apply`] uses that definition literally; the adjoint is its
/// exact transpose. [`DownsampleOperator::apply_strided`] is the equivalent
/// single strided convolution, identical away from the borders.
#[derive(Clone, Debug)]
pub struct DownsampleOperator {
    scale: usize,
    kernel: BlurKernel,
}

impl DownsampleOperator {
    pub fn new(scale: usize, kernel: BlurKernel) -> Result<Self> {
        if scale == 0 {
            return Err(Error::invalid("scale must be positive"));
        }
        Ok(DownsampleOperator { scale, kernel })
    }

    /// Operator with the scale's standard anchor Gaussian.
    pub fn anchor(scale: usize) -> Result<Self> {
        Self::new(scale, anchor_kernel(scale)?)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn kernel(&self) -> &BlurKernel {
        &self.kernel
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if h % self.scale != 0 || w % self.scale != 0 {
            return Err(Error::invalid(format!(
                "{h}x{w} image is not divisible by scale {}",
                self.scale
            )));
        }
        Ok((n, c, h, w))
    }

    /// Correlation weights of one interior output over the input window
    /// `so − R ..= so + R`, where `R = 2s + ⌈s/2⌉ + kernel radius` covers the
    /// antialiased bicubic footprint (centered at `so + (s−1)/2`) and the blur.
    pub fn composite_kernel(&self) -> Result<Kernel> {
        let s = self.scale;
        let r = self.kernel.height().max(self.kernel.width()) / 2;
        let radius = 2 * s + s.div_ceil(2) + r;
        // an image large enough that the window around the middle output
        // never touches the border
        let m = 2 * (radius / s + 3) + 1;
        let side = m * s;
        let mut e = Tensor::zeros(&[1, 1, m, m]);
        e.data_mut()[(m / 2) * m + m / 2] = 1.0;
        let row = self.adjoint(&e)?;
        let so = (m / 2) * s;
        let k = 2 * radius + 1;
        let mut taps = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                taps.push(row.data()[(so + a - radius) * side + so + b - radius]);
            }
        }
        Kernel::new(k, k, taps)
    }

    /// `A x` as one stride-`s` convolution with the composite kernel
    /// (zero padding, so only interior outputs agree with [`LinearMap::apply`]).
    pub fn apply_strided(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.check(x)?;
        let k = self.composite_kernel()?;
        let weight = k.to_tensor();
        let planes = x.clone().reshape(&[n * c, 1, h, w])?;
        let y = conv2d(&planes, &weight, None, Conv2dOpts::strided(self.scale))?;
        y.reshape(&[n, c, h / self.scale, w / self.scale])
    }

    /// Row-major `(H/s·W/s) × (H·W)` matrix of `A` on one `h × w` plane.
    pub fn dense_matrix(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        self.check(&Tensor::zeros(&[1, 1, h, w]))?;
        let (ho, wo) = (h / self.scale, w / self.scale);
        let rows: Vec<Vec<f64>> = (0..ho * wo)
            .into_par_iter()
            .map(|r| {
                let mut e = Tensor::zeros(&[1, 1, ho, wo]);
                e.data_mut()[r] = 1.0;
                self.adjoint(&e).map(Tensor::into_data)
            })
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }
}

/// Transpose of the replicate-boundary convolution in [`blur`].
fn blur_adjoint(y: &Tensor, k: &Kernel) -> Result<Tensor> {
    let (n, c, h, w) = y.dims4()?;
    let (kh, kw) = (k.height(), k.width());
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; n * c * h * w];
    out.par_chunks_mut(h * w)
        .zip(y.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let g = src[(i * w as isize + j) as usize];
                    if g == 0.0 {
                        continue;
                    }
                    for a in 0..kh as isize {
                        let si = (i - a + ry).clamp(0, h as isize - 1) as usize;
                        for b in 0..kw as isize {
                            let sj = (j - b + rx).clamp(0, w as isize - 1) as usize;
                            dst[si * w + sj] += k.at(a as usize, b as usize) * g;
                        }
                    }
                }
            }
        });
    Tensor::new(&[n, c, h, w], out)
}

/// Transpose of the separable bicubic reduction.
fn resample_adjoint(y: &Tensor, wy: &[Taps], wx: &[Taps], h: usize, w: usize) -> Result<Tensor> {
    let (n, c, ho, wo) = y.dims4()?;
    let mut out = vec![0.0; n * c * h * w];
    for (dst, src) in out.chunks_mut(h * w).zip(y.data().chunks(ho * wo)) {
        // columns first: (ho × wo) → (h × wo)
        let mut mid = vec![0.0; h * wo];
        for (o, taps) in wy.iter().enumerate() {
            for &(i, v) in taps {
                for (m, s) in mid[i * wo..(i + 1) * wo].iter_mut().zip(&src[o * wo..(o + 1) * wo]) {
                    *m += v * s;
                }
            }
        }
        for r in 0..h {
            for (o, taps) in wx.iter().enumerate() {
                let g = mid[r * wo + o];
                for &(j, v) in taps {
                    dst[r * w + j] += v * g;
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

impl LinearMap for DownsampleOperator {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        bicubic_downsample(&blur(x, &self.kernel, Boundary::Replicate)?, self.scale)
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let (_, _, ho, wo) = y.dims4()?;
        let (h, w) = (ho * self.scale, wo * self.scale);
        let down = if self.scale == 1 {
            y.clone()
        } else {
            resample_adjoint(y, &axis_weights(h, ho), &axis_weights(w, wo), h, w)?
        };
        blur_adjoint(&down, &self.kernel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: usize) -> Tensor {
        Tensor::from_fn(shape, |i| (((i + seed) * 7919) % 1009) as f64 / 1008.0 - 0.5)
    }

    #[test]
    fn adjoint_identity() {
        for s in [2, 4] {
            let op = DownsampleOperator::anchor(s).unwrap();
            let x = pseudo(&[1, 2, 16, 24], 1);
            let y = pseudo(&[1, 2, 16 / s, 24 / s], 2);
            let lhs: f64 = op.apply(&x).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(op.adjoint(&y).unwrap().data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn constant_is_preserved() {
        let op = DownsampleOperator::anchor(2).unwrap();
        let y = op.apply(&Tensor::full(&[1, 3, 8, 8], 0.25)).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-14));
    }

    #[test]
    fn composite_kernel_sums_to_one() {
        for s in [2, 4] {
            let k = DownsampleOperator::anchor(s).unwrap().composite_kernel().unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12);
        }
    }
}
