//! Camera-shake kernels from a simulated random-acceleration trajectory.
//!
//! The camera moves at constant speed while its velocity is perturbed every
//! substep by Gaussian shake and an occasional near-reversal impulse, plus a
//! weak pull back towards the origin. Both the speed and the perturbation
//! strength grow with the anxiety parameter, so low anxiety yields short,
//! smooth streaks and high anxiety long, jittery ones. Positions visited
//! during the exposure are splatted bilinearly onto the kernel grid.

use rand::Rng;
use rand_distr::StandardNormal;

use super::kernel::{splat, BlurKernel, Kernel, MAX_KERNEL_SIDE};
use crate::error::{Error, Result};

pub const SUBSTEPS: usize = 2000;
pub const DEFAULT_EXPOSURE: f64 = 0.8;
pub const MIN_SIDE: usize = 11;

/// Path speed in pixels per unit time at the lowest anxiety.
const BASE_SPEED: f64 = 5.0;
/// Shake strength relative to the path speed scale.
const SHAKE: f64 = 6.0;
/// Expected impulses per unit time at the lowest anxiety.
const IMPULSE_RATE: f64 = 1.0;
const MAX_CENTRIPETAL: f64 = 2.0;

/// Anxiety `10^R / 1000` for an exponent `R ∈ [0, 1]`.
pub fn anxiety_from_exponent(r: f64) -> f64 {
    10f64.powf(r) / 1000.0
}

/// Simulates one trajectory and rasterizes the portion inside `exposure`.
pub fn trajectory_kernel<R: Rng + ?Sized>(
    rng: &mut R,
    exposure: f64,
    anxiety: f64,
) -> Result<BlurKernel> {
    if !(exposure > 0.0 && exposure <= 1.0) {
        return Err(Error::invalid(format!("exposure {exposure} outside (0, 1]")));
    }
    if !(anxiety > 0.0 && anxiety.is_finite()) {
        return Err(Error::invalid(format!("anxiety must be positive, got {anxiety}")));
    }
    let path = simulate(rng, exposure, anxiety);
    rasterize(&path)
}

fn simulate<R: Rng + ?Sized>(rng: &mut R, exposure: f64, anxiety: f64) -> Vec<(f64, f64)> {
    let a = anxiety * 1000.0;
    let dt = 1.0 / SUBSTEPS as f64;
    let speed = BASE_SPEED * a;
    let centripetal = MAX_CENTRIPETAL * rng.random::<f64>();
    let angle = std::f64::consts::TAU * rng.random::<f64>();
    let mut v = (speed * angle.sin(), speed * angle.cos());
    let mut p = (0.0f64, 0.0f64);
    let steps = (exposure * SUBSTEPS as f64).round() as usize;
    let mut path = Vec::with_capacity(steps + 1);
    path.push(p);
    for _ in 0..steps {
        let ny: f64 = rng.sample(StandardNormal);
        let nx: f64 = rng.sample(StandardNormal);
        let kick = a * SHAKE * dt.sqrt();
        v.0 += kick * ny - centripetal * p.0 * dt;
        v.1 += kick * nx - centripetal * p.1 * dt;
        if rng.random::<f64>() < IMPULSE_RATE * a * dt {
            let turn = std::f64::consts::PI + (rng.random::<f64>() - 0.5);
            let (s, c) = turn.sin_cos();
            v = (c * v.0 + s * v.1, -s * v.0 + c * v.1);
        }
        let norm = v.0.hypot(v.1).max(1e-12);
        v = (v.0 / norm * speed, v.1 / norm * speed);
        p = (p.0 + v.0 * dt, p.1 + v.1 * dt);
        path.push(p);
    }
    path
}

/// Smallest odd side holding an extent of `ext` pixels after bilinear splatting.
fn side_for(ext: f64) -> usize {
    2 * (ext / 2.0).ceil() as usize + 3
}

fn rasterize(path: &[(f64, f64)]) -> Result<BlurKernel> {
    let (mut lo, mut hi) = ((f64::MAX, f64::MAX), (f64::MIN, f64::MIN));
    for &(y, x) in path {
        lo = (lo.0.min(y), lo.1.min(x));
        hi = (hi.0.max(y), hi.1.max(x));
    }
    let ext = (hi.0 - lo.0, hi.1 - lo.1);
    // shrink paths that would not fit in the largest kernel
    let limit = (MAX_KERNEL_SIDE - 3) as f64;
    let shrink = (limit / ext.0.max(ext.1).max(1e-12)).min(1.0);
    let ext = (ext.0 * shrink, ext.1 * shrink);
    let h = side_for(ext.0).clamp(MIN_SIDE, MAX_KERNEL_SIDE);
    let w = side_for(ext.1).clamp(MIN_SIDE, MAX_KERNEL_SIDE);
    let mid = ((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mut taps = vec![0.0; h * w];
    let mass = 1.0 / path.len() as f64;
    for &(y, x) in path {
        splat(
            &mut taps,
            h,
            w,
            cy + (y - mid.0) * shrink,
            cx + (x - mid.1) * shrink,
            mass,
        );
    }
    BlurKernel::new(Kernel::new(h, w, taps)?.normalized()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sides_and_mass() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = seed as f64 / 49.0;
            let k = trajectory_kernel(&mut rng, DEFAULT_EXPOSURE, anxiety_from_exponent(r)).unwrap();
            for side in [k.height(), k.width()] {
                assert!((MIN_SIDE..=MAX_KERNEL_SIDE).contains(&side) && side % 2 == 1);
            }
            assert!((k.sum() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let a = trajectory_kernel(&mut ChaCha8Rng::seed_from_u64(9), 0.8, 0.005).unwrap();
        let b = trajectory_kernel(&mut ChaCha8Rng::seed_from_u64(9), 0.8, 0.005).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(trajectory_kernel(&mut rng, 0.0, 0.01).is_err());
        assert!(trajectory_kernel(&mut rng, 0.8, 0.0).is_err());
    }
}
