use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernel::{compose_kernels, gaussian_kernel, gaussian_side, linear_motion_kernel, BlurKernel};
use super::trajectory::{anxiety_from_exponent, trajectory_kernel, DEFAULT_EXPOSURE};
use crate::error::{Error, Result};

/// Noise level of the GaussianCM family.
pub const CM_NOISE: f64 = 0.01;

/// Kernel families used for training data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Gaussian blur combined with straight-line motion, noiseless.
    GaussianSM,
    /// Gaussian blur combined with camera-shake trajectories, plus noise.
    GaussianCM,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sm" | "gaussiansm" => Ok(Family::GaussianSM),
            "cm" | "gaussiancm" => Ok(Family::GaussianCM),
            _ => Err(Error::invalid(format!("unknown kernel family {s:?}"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::GaussianSM => "sm",
            Family::GaussianCM => "cm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    None,
    /// `angle` in degrees within `[0, 180)`, `length` in pixels ≥ 1.
    Linear { angle: f64, length: f64 },
    /// Anxiety is `10^exponent / 1000`.
    Trajectory { seed: u64, exposure: f64, exponent: f64 },
}

/// Everything needed to reproduce one degradation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub scale: usize,
    /// Gaussian component; zero means no Gaussian blur.
    pub sigma: f64,
    pub motion: Motion,
    /// Standard deviation of the additive white Gaussian noise.
    pub noise: f64,
    /// Seeds the noise draw.
    pub seed: u64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::invalid(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise must be >= 0, got {}", self.noise)));
        }
        match self.motion {
            Motion::Linear { length, .. } if length < 1.0 => {
                Err(Error::invalid(format!("motion length must be >= 1, got {length}")))
            }
            Motion::Trajectory { exponent, .. } if !(0.0..=1.0).contains(&exponent) => {
                Err(Error::invalid(format!("anxiety exponent {exponent} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// The blur kernel `k` this spec describes.
    pub fn kernel(&self) -> Result<BlurKernel> {
        self.validate()?;
        let motion = match self.motion {
            Motion::None => BlurKernel::delta(),
            Motion::Linear { angle, length } => linear_motion_kernel(angle, length)?,
            Motion::Trajectory {
                seed,
                exposure,
                exponent,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                trajectory_kernel(&mut rng, exposure, anxiety_from_exponent(exponent))?
            }
        };
        if self.sigma == 0.0 {
            return Ok(motion);
        }
        let g = gaussian_kernel(self.sigma, gaussian_side(self.sigma))?;
        compose_kernels(&g, &motion)
    }
}

/// Largest Gaussian σ and motion length of a family at scale `s`.
fn ranges(family: Family, s: usize) -> (f64, f64) {
    match (family, s) {
        (Family::GaussianSM, 2) => (2.0, 9.0),
        (Family::GaussianSM, _) => (4.0, 15.0),
        (Family::GaussianCM, 2) => (1.0, 0.0),
        (Family::GaussianCM, _) => (2.0, 0.0),
    }
}

/// Draws a spec uniformly from the family's parameter ranges.
pub fn sample_spec<R: Rng + ?Sized>(rng: &mut R, family: Family, s: usize) -> Result<DegradationSpec> {
    if !matches!(s, 2 | 4) {
        return Err(Error::invalid(format!("scale must be 2 or 4, got {s}")));
    }
    let (sigma_max, length_max) = ranges(family, s);
    let sigma = rng.random_range(0.2..=sigma_max);
    let (motion, noise) = match family {
        Family::GaussianSM => (
            Motion::Linear {
                angle: rng.random_range(0.0..180.0),
                length: rng.random_range(1.0..=length_max),
            },
            0.0,
        ),
        Family::GaussianCM => (
            Motion::Trajectory {
                seed: rng.random(),
                exposure: DEFAULT_EXPOSURE,
                exponent: rng.random_range(0.0..=1.0),
            },
            CM_NOISE,
        ),
    };
    Ok(DegradationSpec {
        scale: s,
        sigma,
        motion,
        noise,
        seed: rng.random(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_names_round_trip() {
        for f in [Family::GaussianSM, Family::GaussianCM] {
            assert_eq!(f.to_string().parse::<Family>().unwrap(), f);
        }
        assert!("xx".parse::<Family>().is_err());
    }

    #[test]
    fn sampled_specs_produce_valid_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for family in [Family::GaussianSM, Family::GaussianCM] {
            for s in [2, 4] {
                for _ in 0..10 {
                    let spec = sample_spec(&mut rng, family, s).unwrap();
                    let k = spec.kernel().unwrap();
                    assert!((k.sum() - 1.0).abs() < 1e-8);
                    assert!(k.taps().iter().all(|&t| t >= 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_sigma_without_motion_is_delta() {
        let spec = DegradationSpec {
            scale: 2,
            sigma: 0.0,
            motion: Motion::None,
            noise: 0.0,
            seed: 0,
        };
        assert_eq!(spec.kernel().unwrap(), BlurKernel::delta());
    }
}
