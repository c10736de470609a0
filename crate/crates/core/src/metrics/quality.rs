use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value reported when two images match exactly.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB over every value, capped at [`PSNR_CAP`].
pub fn psnr(u: &Tensor, v: &Tensor, peak: f64) -> Result<f64> {
    u.expect_same_shape(v)?;
    if u.is_empty() {
        return Err(Error::invalid("psnr of empty images"));
    }
    let mse = u
        .data()
        .iter()
        .zip(v.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / u.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn window_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane with `g`.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = g.iter().zip(&p[i * w + j..i * w + j + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for (k, gk) in g.iter().enumerate() {
            for j in 0..wo {
                out[i * wo + j] += gk * rows[(i + k) * wo + j];
            }
        }
    }
    out
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), dynamic range 1,
/// averaged over channels and all window positions fully inside the image.
pub fn ssim(u: &Tensor, v: &Tensor) -> Result<f64> {
    u.expect_same_shape(v)?;
    let (_, _, h, w) = u.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = window_1d();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in u.data().chunks(h * w).zip(v.data().chunks(h * w)) {
        let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
        let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(a, h, w, &g);
        let mu_b = filter_valid(b, h, w, &g);
        let e_aa = filter_valid(&aa, h, w, &g);
        let e_bb = filter_valid(&bb, h, w, &g);
        let e_ab = filter_valid(&ab, h, w, &g);
        for k in 0..mu_a.len() {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let va = e_aa[k] - ma * ma;
            let vb = e_bb[k] - mb * mb;
            let cov = e_ab[k] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}
