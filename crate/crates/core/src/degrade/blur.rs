//! Spatially invariant 2-D convolution of image planes.

use rayon::prelude::*;

use super::kernel::Kernel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Edge pixels extend outwards.
    Replicate,
    /// The image tiles the plane periodically.
    Circular,
}

fn index(i: isize, n: usize, mode: Boundary) -> usize {
    match mode {
        Boundary::Replicate => i.clamp(0, n as isize - 1) as usize,
        Boundary::Circular => i.rem_euclid(n as isize) as usize,
    }
}

/// `y(i, j) = Σ k(a, b) · x(i − a + ry, j − b + rx)` for every plane of `x`.
///
/// True convolution (the kernel is flipped), so asymmetric kernels displace
/// content along their mass.
pub fn blur(x: &Tensor, k: &Kernel, mode: Boundary) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (kh, kw) = (k.height(), k.width());
    if kh > h || kw > w {
        return Err(Error::invalid(format!(
            "{kh}x{kw} kernel is larger than the {h}x{w} image"
        )));
    }
    let (ry, rx) = (kh / 2, kw / 2);
    let (ph, pw) = (h + kh - 1, w + kw - 1);
    let rows: Vec<usize> = (0..ph).map(|i| index(i as isize - ry as isize, h, mode)).collect();
    let cols: Vec<usize> = (0..pw).map(|j| index(j as isize - rx as isize, w, mode)).collect();
    let mut out = vec![0.0; n * c * h * w];
    out.par_chunks_mut(h * w)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            // padded copy so the inner loop needs no boundary logic
            let mut pad = vec![0.0; ph * pw];
            for (pi, &si) in rows.iter().enumerate() {
                for (pj, &sj) in cols.iter().enumerate() {
                    pad[pi * pw + pj] = src[si * w + sj];
                }
            }
            for a in 0..kh {
                for b in 0..kw {
                    let kv = k.at(kh - 1 - a, kw - 1 - b);
                    if kv == 0.0 {
                        continue;
                    }
                    for i in 0..h {
                        let prow = &pad[(i + a) * pw + b..(i + a) * pw + b + w];
                        for (d, s) in dst[i * w..(i + 1) * w].iter_mut().zip(prow) {
                            *d += kv * s;
                        }
                    }
                }
            }
        });
    Tensor::new(&[n, c, h, w], out)
}
