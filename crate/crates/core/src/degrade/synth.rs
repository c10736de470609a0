use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::blur::{blur, Boundary};
use super::kernel::{gaussian_kernel, gaussian_side, BlurKernel, Kernel};
use super::resample::bicubic_downsample;
use super::spec::DegradationSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// rng stream reserved for the noise draw of a spec seed.
const NOISE_STREAM: u64 = 1;

/// σ of the anchor Gaussian `k^D` at scale `s`.
pub fn anchor_sigma(s: usize) -> Result<f64> {
    match s {
        2 => Ok(0.8),
        4 => Ok(1.8),
        _ => Err(Error::invalid(format!("no anchor kernel for scale {s}"))),
    }
}

/// The anchor kernel `k^D` at scale `s`.
pub fn anchor_kernel(s: usize) -> Result<BlurKernel> {
    let sigma = anchor_sigma(s)?;
    gaussian_kernel(sigma, gaussian_side(sigma))
}

/// One training tuple.
#[derive(Clone, Debug)]
pub struct SamplePair {
    /// High-resolution image, values in `[0, 1]`.
    pub x: Tensor,
    /// Degraded low-resolution observation.
    pub y: Tensor,
    pub kernel: BlurKernel,
    /// Low-resolution-space kernel fitted to `kernel`.
    pub klow: Kernel,
    /// `x` degraded by the anchor kernel instead of `kernel`, noiseless.
    pub anchor: Tensor,
    pub spec: DegradationSpec,
}

/// `↓s(x ⊛ k) + n` with replicate boundaries; noise is not clipped.
pub fn degrade(x: &Tensor, k: &Kernel, s: usize, noise: f64, seed: u64) -> Result<Tensor> {
    let mut y = bicubic_downsample(&blur(x, k, Boundary::Replicate)?, s)?;
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(NOISE_STREAM);
        for v in y.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise * z;
        }
    }
    Ok(y)
}

/// Builds a [`SamplePair`] from `x`; `fit_klow` maps `(k, s)` to `k^L`.
pub fn synthesize<F>(x: &Tensor, spec: &DegradationSpec, fit_klow: F) -> Result<SamplePair>
where
    F: FnOnce(&BlurKernel, usize) -> Result<Kernel>,
{
    spec.validate()?;
    let (_, _, h, w) = x.dims4()?;
    let s = spec.scale;
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!("{h}x{w} image is not divisible by scale {s}")));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("HR image values must lie in [0, 1]"));
    }
    let kernel = spec.kernel()?;
    let y = degrade(x, &kernel, s, spec.noise, spec.seed)?;
    let anchor = degrade(x, anchor_kernel(s)?.kernel(), s, 0.0, 0)?;
    let klow = fit_klow(&kernel, s)?;
    Ok(SamplePair {
        x: x.clone(),
        y,
        kernel,
        klow,
        anchor,
        spec: *spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::spec::Motion;

    fn spec(noise: f64) -> DegradationSpec {
        DegradationSpec {
            scale: 2,
            sigma: 0.0,
            motion: Motion::None,
            noise,
            seed: 5,
        }
    }

    fn image() -> Tensor {
        Tensor::from_fn(&[1, 3, 16, 16], |i| ((i * 37) % 97) as f64 / 96.0)
    }

    #[test]
    fn delta_noiseless_is_plain_downsample() {
        let x = image();
        let p = synthesize(&x, &spec(0.0), |k, _| Ok(k.kernel().clone())).unwrap();
        assert_eq!(p.y, bicubic_downsample(&x, 2).unwrap());
        assert_eq!(p.y.shape(), p.anchor.shape());
    }

    #[test]
    fn noise_is_seeded() {
        let x = image();
        let a = synthesize(&x, &spec(0.01), |k, _| Ok(k.kernel().clone())).unwrap();
        let b = synthesize(&x, &spec(0.01), |k, _| Ok(k.kernel().clone())).unwrap();
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn anchor_sigmas() {
        assert_eq!(anchor_sigma(2).unwrap(), 0.8);
        assert_eq!(anchor_sigma(4).unwrap(), 1.8);
        assert!(anchor_sigma(3).is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let x = Tensor::full(&[1, 3, 8, 8], 1.5);
        assert!(synthesize(&x, &spec(0.0), |k, _| Ok(k.kernel().clone())).is_err());
    }
}
