//! Frequency-domain Wiener deconvolution and its regularization rule.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::degrade::Kernel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the regularizer so a zero noise estimate stays finite.
pub const EPSILON_FLOOR: f64 = 1e-8;
/// Upper bound on the regularizer.
pub const EPSILON_CAP: f64 = 1e-3;
/// Extra replicate margin beyond the kernel radius in padded mode.
pub const EXTRA_MARGIN: usize = 8;
/// `|K|² + ε` below this is treated as a division by zero.
const DEGENERATE_DENOMINATOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WienerBoundary {
    /// Replicate-pad, deconvolve periodically, crop back.
    Padded,
    /// Treat the image as periodic (exact for circularly blurred input).
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WienerConfig {
    pub epsilon: f64,
    pub boundary: WienerBoundary,
    /// Padding per side in padded mode; `None` uses kernel radius + 8.
    pub margin: Option<usize>,
}

impl WienerConfig {
    pub fn padded(epsilon: f64) -> Self {
        WienerConfig {
            epsilon,
            boundary: WienerBoundary::Padded,
            margin: None,
        }
    }

    pub fn circular(epsilon: f64) -> Self {
        WienerConfig {
            epsilon,
            boundary: WienerBoundary::Circular,
            margin: None,
        }
    }
}

/// In-place 2-D FFT of a row-major `h × w` buffer; the inverse is scaled by `1/(hw)`.
pub fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(buf);
    let mut t = vec![Complex::new(0.0, 0.0); h * w];
    transpose(buf, &mut t, h, w);
    col.process(&mut t);
    transpose(&t, buf, w, h);
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        for v in buf.iter_mut() {
            *v *= norm;
        }
    }
}

fn transpose(src: &[Complex<f64>], dst: &mut [Complex<f64>], h: usize, w: usize) {
    for i in 0..h {
        for j in 0..w {
            dst[j * h + i] = src[i * w + j];
        }
    }
}

/// Transfer function of `k` on an `h × w` periodic grid, kernel centered at the origin.
pub fn kernel_spectrum(k: &Kernel, h: usize, w: usize) -> Result<Vec<Complex<f64>>> {
    if k.height() > h || k.width() > w {
        return Err(Error::invalid(format!(
            "{}x{} kernel does not fit a {h}x{w} grid",
            k.height(),
            k.width()
        )));
    }
    let (ry, rx) = ((k.height() / 2) as isize, (k.width() / 2) as isize);
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    for a in 0..k.height() {
        for b in 0..k.width() {
            let i = (a as isize - ry).rem_euclid(h as isize) as usize;
            let j = (b as isize - rx).rem_euclid(w as isize) as usize;
            buf[i * w + j].re += k.at(a, b);
        }
    }
    fft2(&mut buf, h, w, false);
    Ok(buf)
}

/// `max |K| / (|K|² + ε)` — the worst-case gain of the filter.
pub fn amplification(spectrum: &[Complex<f64>], epsilon: f64) -> f64 {
    spectrum
        .iter()
        .map(|k| k.norm() / (k.norm_sqr() + epsilon))
        .fold(0.0, f64::max)
}

/// Regularizer rule: `max(1e-8, min(1e-3, estimate))`.
pub fn wiener_epsilon(noise_std_estimate: f64) -> f64 {
    EPSILON_FLOOR.max(EPSILON_CAP.min(noise_std_estimate))
}

/// Robust noise level from horizontal first differences: `median|Δ| / (0.6745·√2)`.
pub fn estimate_noise_std(y: &Tensor) -> Result<f64> {
    let (_, _, _, w) = y.dims4()?;
    if w < 2 {
        return Err(Error::invalid("noise estimation needs at least two columns"));
    }
    let mut diffs: Vec<f64> = y
        .data()
        .chunks(w)
        .flat_map(|row| row.windows(2).map(|p| (p[1] - p[0]).abs()))
        .collect();
    let mid = diffs.len() / 2;
    let median = if diffs.len() % 2 == 1 {
        *diffs.select_nth_unstable_by(mid, f64::total_cmp).1
    } else {
        let hi = *diffs.select_nth_unstable_by(mid, f64::total_cmp).1;
        let lo = diffs[..mid].iter().cloned().fold(f64::MIN, f64::max);
        0.5 * (lo + hi)
    };
    Ok(median / (0.6745 * std::f64::consts::SQRT_2))
}

fn replicate_pad(plane: &[f64], h: usize, w: usize, m: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * m, w + 2 * m);
    let mut out = vec![0.0; ph * pw];
    for i in 0..ph {
        let si = (i as isize - m as isize).clamp(0, h as isize - 1) as usize;
        for j in 0..pw {
            let sj = (j as isize - m as isize).clamp(0, w as isize - 1) as usize;
            out[i * pw + j] = plane[si * w + sj];
        }
    }
    out
}

/// Deconvolves every plane of `y`; also returns the largest discarded imaginary part.
pub fn wiener_with_residue(y: &Tensor, k: &Kernel, cfg: &WienerConfig) -> Result<(Tensor, f64)> {
    let (n, c, h, w) = y.dims4()?;
    if !(cfg.epsilon >= 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be >= 0, got {}", cfg.epsilon)));
    }
    let m = match cfg.boundary {
        WienerBoundary::Circular => 0,
        WienerBoundary::Padded => cfg
            .margin
            .unwrap_or(k.height().max(k.width()) / 2 + EXTRA_MARGIN),
    };
    let (ph, pw) = (h + 2 * m, w + 2 * m);
    let spec = kernel_spectrum(k, ph, pw)?;
    if spec.iter().any(|kf| kf.norm_sqr() + cfg.epsilon < DEGENERATE_DENOMINATOR) {
        return Err(Error::NonFinite(format!(
            "wiener filter: kernel spectrum has zeros and epsilon is {}",
            cfg.epsilon
        )));
    }
    let filter: Vec<Complex<f64>> = spec
        .iter()
        .map(|kf| kf.conj() / (kf.norm_sqr() + cfg.epsilon))
        .collect();
    let mut out = Vec::with_capacity(n * c * h * w);
    let mut residue = 0.0f64;
    for plane in y.data().chunks(h * w) {
        let padded = if m > 0 {
            replicate_pad(plane, h, w, m)
        } else {
            plane.to_vec()
        };
        let mut buf: Vec<Complex<f64>> = padded.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut buf, ph, pw, false);
        for (b, f) in buf.iter_mut().zip(&filter) {
            *b *= f;
        }
        fft2(&mut buf, ph, pw, true);
        for i in 0..h {
            for j in 0..w {
                let v = buf[(i + m) * pw + j + m];
                residue = residue.max(v.im.abs());
                out.push(v.re);
            }
        }
    }
    let t = Tensor::new(&[n, c, h, w], out)?;
    if !t.all_finite() {
        return Err(Error::NonFinite("wiener output".into()));
    }
    Ok((t, residue))
}

/// `F⁻¹( conj(K)·Y / (|K|² + ε) )` per plane.
pub fn wiener(y: &Tensor, k: &Kernel, cfg: &WienerConfig) -> Result<Tensor> {
    wiener_with_residue(y, k, cfg).map(|(t, _)| t)
}

/// Padded Wiener deconvolution with `ε` chosen from the estimated noise level.
pub fn wiener_auto(y: &Tensor, k: &Kernel) -> Result<Tensor> {
    let eps = wiener_epsilon(estimate_noise_std(y)?);
    wiener(y, k, &WienerConfig::padded(eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        Tensor::from_fn(&[1, 2, 10, 12], |i| ((i * 7919) % 113) as f64 / 112.0)
    }

    #[test]
    fn delta_without_regularization_is_identity() {
        let y = image();
        let out = wiener(&y, &Kernel::delta(1), &WienerConfig::circular(0.0)).unwrap();
        assert!(out.max_abs_diff(&y) < 1e-14);
    }

    #[test]
    fn delta_with_regularization_scales() {
        let y = image();
        for cfg in [WienerConfig::circular(0.5), WienerConfig::padded(0.5)] {
            let out = wiener(&y, &Kernel::delta(3), &cfg).unwrap();
            assert!(out.max_abs_diff(&y.scale(1.0 / 1.5)) < 1e-14);
        }
    }

    #[test]
    fn epsilon_rule() {
        assert_eq!(wiener_epsilon(0.01), 0.001);
        assert_eq!(wiener_epsilon(0.0001), 0.0001);
        assert_eq!(wiener_epsilon(0.0), 1e-8);
    }

    #[test]
    fn constant_image_has_no_noise() {
        assert_eq!(estimate_noise_std(&Tensor::full(&[1, 3, 8, 8], 0.7)).unwrap(), 0.0);
    }

    #[test]
    fn spectral_zero_without_regularization_is_reported() {
        // a two-tap box has a zero at the Nyquist frequency of an even grid
        let k = Kernel::new(1, 3, vec![0.5, 0.5, 0.0]).unwrap();
        let y = image();
        assert!(wiener(&y, &k, &WienerConfig::circular(0.0)).is_err());
    }

    #[test]
    fn fft_round_trip() {
        let mut buf: Vec<Complex<f64>> = (0..35).map(|i| Complex::new(i as f64, -(i as f64) / 3.0)).collect();
        let orig = buf.clone();
        fft2(&mut buf, 5, 7, false);
        fft2(&mut buf, 5, 7, true);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
