use caduf::corpus::procedural_corpus;
use caduf::degrade::resample::cubic;
use caduf::degrade::*;
use caduf::tensor::Tensor;
use caduf::wiener::{fft2, kernel_spectrum};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

fn assert_valid(k: &BlurKernel) {
    assert!((k.sum() - 1.0).abs() < 1e-8, "sum {}", k.sum());
    assert!(k.taps().iter().all(|&t| t >= 0.0 && t.is_finite()));
    assert!(k.height() % 2 == 1 && k.width() % 2 == 1);
    assert!(k.height() <= 45 && k.width() <= 45);
}

#[test]
fn calm_trajectories_are_compact() {
    let mut fits = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = trajectory_kernel(&mut rng, 0.8, anxiety_from_exponent(0.0)).unwrap();
        let (h, w) = k.support();
        if h <= 15 && w <= 15 {
            fits += 1;
        }
    }
    assert!(fits >= 900, "only {fits}/1000 kernels fit in 15x15");
}

#[test]
fn trajectory_sides_within_bounds() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = (seed % 11) as f64 / 10.0;
        let k = trajectory_kernel(&mut rng, 0.8, anxiety_from_exponent(r)).unwrap();
        assert!((11..=45).contains(&k.height()) && (11..=45).contains(&k.width()));
        assert_valid(&k);
    }
}

#[test]
fn circular_blur_matches_fft_product() {
    let x = &procedural_corpus(3, 1, 24, 30).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = trajectory_kernel(&mut rng, 0.8, 0.004).unwrap();
    let y = blur(x, &k, Boundary::Circular).unwrap();
    let spec = kernel_spectrum(&k, 24, 30).unwrap();
    for (c, plane) in x.data().chunks(24 * 30).enumerate() {
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut buf, 24, 30, false);
        for (b, kf) in buf.iter_mut().zip(&spec) {
            *b *= kf;
        }
        fft2(&mut buf, 24, 30, true);
        for (i, v) in buf.iter().enumerate() {
            let got = y.data()[c * 720 + i];
            assert!((got - v.re).abs() < 1e-10, "{got} vs {}", v.re);
        }
    }
}

/// Dense per-axis reduction matrix built straight from the definition.
fn dense_axis(len: usize, s: usize) -> Vec<Vec<f64>> {
    let out = len / s;
    let sf = s as f64;
    (0..out)
        .map(|o| {
            let center = (o as f64 + 0.5) * sf - 0.5;
            let mut row = vec![0.0; len];
            let mut total = 0.0;
            let reach = 2 * s as i64 + 1;
            let base = center.floor() as i64;
            for i in base - reach..=base + reach {
                let wgt = cubic((center - i as f64) / sf);
                total += wgt;
                row[i.clamp(0, len as i64 - 1) as usize] += wgt;
            }
            row.iter().map(|v| v / total).collect()
        })
        .collect()
}

#[test]
fn bicubic_matches_dense_reference() {
    let x = &procedural_corpus(4, 1, 32, 24).unwrap()[0];
    for s in [2, 4] {
        let got = bicubic_downsample(x, s).unwrap();
        let my = dense_axis(32, s);
        let mx = dense_axis(24, s);
        let (ho, wo) = (32 / s, 24 / s);
        for c in 0..3 {
            let p = &x.data()[c * 768..(c + 1) * 768];
            for i in 0..ho {
                for j in 0..wo {
                    let mut v = 0.0;
                    for a in 0..32 {
                        for b in 0..24 {
                            v += my[i][a] * mx[j][b] * p[a * 24 + b];
                        }
                    }
                    let g = got.data()[c * ho * wo + i * wo + j];
                    assert!((g - v).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn family_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let sm2 = sample_spec(&mut rng, Family::GaussianSM, 2).unwrap();
        assert!((0.2..=2.0).contains(&sm2.sigma));
        assert_eq!(sm2.noise, 0.0);
        let Motion::Linear { angle, length } = sm2.motion else { panic!() };
        assert!((0.0..180.0).contains(&angle) && (1.0..=9.0).contains(&length));

        let sm4 = sample_spec(&mut rng, Family::GaussianSM, 4).unwrap();
        assert!((0.2..=4.0).contains(&sm4.sigma));
        let Motion::Linear { length, .. } = sm4.motion else { panic!() };
        assert!((1.0..=15.0).contains(&length));

        let cm2 = sample_spec(&mut rng, Family::GaussianCM, 2).unwrap();
        assert!((0.2..=1.0).contains(&cm2.sigma));
        assert_eq!(cm2.noise, 0.01);
        let cm4 = sample_spec(&mut rng, Family::GaussianCM, 4).unwrap();
        assert!((0.2..=2.0).contains(&cm4.sigma));
        let Motion::Trajectory { exposure, exponent, .. } = cm4.motion else { panic!() };
        assert_eq!(exposure, 0.8);
        assert!((0.0..=1.0).contains(&exponent));
    }
}

#[test]
fn noise_level_is_as_specified() {
    let x = &procedural_corpus(5, 1, 384, 384).unwrap()[0];
    let k = BlurKernel::delta();
    let clean = degrade(x, &k, 2, 0.0, 0).unwrap();
    let noisy = degrade(x, &k, 2, 0.01, 77).unwrap();
    assert!(clean.len() >= 100_000);
    let d: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    assert!((0.009..=0.011).contains(&std), "{std}");
}

#[test]
fn synthesis_is_deterministic() {
    let x = &procedural_corpus(6, 1, 64, 64).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = sample_spec(&mut rng, Family::GaussianCM, 2).unwrap();
    let fit = |k: &BlurKernel, _s: usize| Ok(k.kernel().clone());
    let a = synthesize(x, &spec, fit).unwrap();
    let b = synthesize(x, &spec, fit).unwrap();
    assert_eq!(a.y, b.y);
    assert_eq!(a.kernel, b.kernel);
    assert_eq!(a.anchor, b.anchor);
    assert_eq!(a.y.shape(), &[1, 3, 32, 32]);
}

#[test]
fn anchor_uses_scale_specific_gaussian() {
    let x = &procedural_corpus(9, 1, 32, 32).unwrap()[0];
    let spec = DegradationSpec {
        scale: 4,
        sigma: 1.8,
        motion: Motion::None,
        noise: 0.0,
        seed: 1,
    };
    let p = synthesize(x, &spec, |k, _| Ok(k.kernel().clone())).unwrap();
    // the degradation kernel is the anchor kernel, so the two observations agree
    assert!(p.y.max_abs_diff(&p.anchor) < 1e-12);
    assert_eq!(anchor_kernel(4).unwrap(), gaussian_kernel(1.8, 13).unwrap());
}

#[test]
fn delta_spec_gives_plain_downsample() {
    let x = Tensor::from_fn(&[1, 3, 16, 16], |i| (i % 13) as f64 / 12.0);
    let spec = DegradationSpec {
        scale: 2,
        sigma: 0.0,
        motion: Motion::None,
        noise: 0.0,
        seed: 3,
    };
    let p = synthesize(&x, &spec, |k, _| Ok(k.kernel().clone())).unwrap();
    assert_eq!(p.y, bicubic_downsample(&x, 2).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaussian_kernels_are_valid(sigma in 0.05f64..4.0) {
        let k = gaussian_kernel(sigma, gaussian_side(sigma)).unwrap();
        assert_valid(&k);
    }

    #[test]
    fn motion_kernels_are_valid(angle in 0.0f64..180.0, length in 1.0f64..15.0) {
        let k = linear_motion_kernel(angle, length).unwrap();
        assert_valid(&k);
    }

    #[test]
    fn sampled_kernels_are_valid(seed in any::<u64>(), cm in any::<bool>(), four in any::<bool>()) {
        let family = if cm { Family::GaussianCM } else { Family::GaussianSM };
        let s = if four { 4 } else { 2 };
        let spec = sample_spec(&mut ChaCha8Rng::seed_from_u64(seed), family, s).unwrap();
        assert_valid(&spec.kernel().unwrap());
    }

    #[test]
    fn blur_preserves_constants(value in 0.0f64..1.0, sigma in 0.2f64..2.0) {
        let x = Tensor::full(&[1, 2, 16, 16], value);
        let k = gaussian_kernel(sigma, gaussian_side(sigma)).unwrap();
        let y = blur(&x, &k, Boundary::Replicate).unwrap();
        prop_assert!(y.data().iter().all(|v| (v - value).abs() < 1e-12));
    }
}
