//! Per-site dynamic filtering: `ẑ[i,j] = r[i,j] + Σ_{l,m} c[i,j,l,m] · z[⌊i/s⌋+l, ⌊j/s⌋+m]`.
//!
//! `c` holds one `(2p+1)²` filter per output site, shared by all channels of
//! `z`. With `s > 1` the output lives on the `s`-times finer grid and each
//! site reads the neighbourhood around its parent low-resolution pixel.
//! Borders are replicate padded.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Geom {
    ch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    radius: usize,
    scale: usize,
}

impl Geom {
    fn side(&self) -> usize {
        2 * self.radius + 1
    }

    #[inline]
    fn src(&self, out: usize, tap: usize, len: usize) -> usize {
        ((out / self.scale) as isize + tap as isize - self.radius as isize)
            .clamp(0, len as isize - 1) as usize
    }
}

fn check(z: &Tensor, c: &Tensor, r: &Tensor, radius: usize, scale: usize) -> Result<Geom> {
    let (n, ch, h, w) = z.dims4()?;
    let (cn, taps, oh, ow) = c.dims4()?;
    if scale == 0 {
        return Err(Error::invalid("dynamic filter scale must be at least 1"));
    }
    let side = 2 * radius + 1;
    if taps != side * side || cn != n {
        return Err(Error::shape(format!(
            "filters {:?}: expected batch {n} and {} coefficients per site",
            c.shape(),
            side * side
        )));
    }
    if oh != h * scale || ow != w * scale {
        return Err(Error::shape(format!(
            "filter grid {oh}x{ow} is not {scale}x the input {h}x{w}"
        )));
    }
    if r.shape() != [n, ch, oh, ow] {
        return Err(Error::shape(format!(
            "residual {:?}, expected [{n}, {ch}, {oh}, {ow}]",
            r.shape()
        )));
    }
    Ok(Geom {
        ch,
        h,
        w,
        oh,
        ow,
        radius,
        scale,
    })
}

pub fn dynamic_local_filter(
    z: &Tensor,
    c: &Tensor,
    r: &Tensor,
    radius: usize,
    scale: usize,
) -> Result<Tensor> {
    let g = check(z, c, r, radius, scale)?;
    let side = g.side();
    let (zp, op) = (g.h * g.w, g.oh * g.ow);
    let mut out = r.data().to_vec();
    out.par_chunks_mut(g.ch * op)
        .enumerate()
        .for_each(|(b, o)| {
            let cb = &c.data()[b * side * side * op..(b + 1) * side * side * op];
            for k in 0..side * side {
                let (l, m) = (k / side, k % side);
                let ck = &cb[k * op..(k + 1) * op];
                for i in 0..g.oh {
                    let si = g.src(i, l, g.h);
                    for j in 0..g.ow {
                        let sj = g.src(j, m, g.w);
                        let coef = ck[i * g.ow + j];
                        for chn in 0..g.ch {
                            o[chn * op + i * g.ow + j] +=
                                coef * z.data()[(b * g.ch + chn) * zp + si * g.w + sj];
                        }
                    }
                }
            }
        });
    Tensor::new(r.shape(), out)
}

pub(crate) fn dynamic_local_filter_backward(
    z: &Tensor,
    c: &Tensor,
    grad_out: &Tensor,
    radius: usize,
    scale: usize,
) -> Result<(Tensor, Tensor)> {
    let g = check(z, c, grad_out, radius, scale)?;
    let side = g.side();
    let (zp, op) = (g.h * g.w, g.oh * g.ow);
    let mut dz = Tensor::zeros(z.shape());
    let mut dc = Tensor::zeros(c.shape());
    dz.data_mut()
        .par_chunks_mut(g.ch * zp)
        .zip(dc.data_mut().par_chunks_mut(side * side * op))
        .enumerate()
        .for_each(|(b, (dzb, dcb))| {
            let cb = &c.data()[b * side * side * op..(b + 1) * side * side * op];
            let gb = &grad_out.data()[b * g.ch * op..(b + 1) * g.ch * op];
            let zb = &z.data()[b * g.ch * zp..(b + 1) * g.ch * zp];
            for k in 0..side * side {
                let (l, m) = (k / side, k % side);
                for i in 0..g.oh {
                    let si = g.src(i, l, g.h);
                    for j in 0..g.ow {
                        let sj = g.src(j, m, g.w);
                        let site = i * g.ow + j;
                        let coef = cb[k * op + site];
                        let mut acc = 0.0;
                        for chn in 0..g.ch {
                            let go = gb[chn * op + site];
                            acc += go * zb[chn * zp + si * g.w + sj];
                            dzb[chn * zp + si * g.w + sj] += go * coef;
                        }
                        dcb[k * op + site] += acc;
                    }
                }
            }
        });
    Ok((dz, dc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + seed) * 0.53).cos())
    }

    fn center_delta(n: usize, radius: usize, h: usize, w: usize) -> Tensor {
        let side = 2 * radius + 1;
        let mut c = Tensor::zeros(&[n, side * side, h, w]);
        let center = side * side / 2;
        for b in 0..n {
            let base = (b * side * side + center) * h * w;
            c.data_mut()[base..base + h * w].fill(1.0);
        }
        c
    }

    #[test]
    fn center_delta_is_identity() {
        let z = pseudo(&[2, 3, 5, 6], 0.0);
        let c = center_delta(2, 2, 5, 6);
        let out = dynamic_local_filter(&z, &c, &Tensor::zeros(z.shape()), 2, 1).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn center_delta_upsamples_by_replication() {
        let z = pseudo(&[1, 1, 3, 2], 0.0);
        let c = center_delta(1, 1, 6, 4);
        let out = dynamic_local_filter(&z, &c, &Tensor::zeros(&[1, 1, 6, 4]), 1, 2).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                assert_eq!(out.data()[i * 4 + j], z.data()[(i / 2) * 2 + j / 2]);
            }
        }
    }

    #[test]
    fn uniform_filter_is_box_blur_inside() {
        let (h, w, p) = (8, 9, 2);
        let z = pseudo(&[1, 2, h, w], 0.3);
        let side = 2 * p + 1;
        let c = Tensor::full(&[1, side * side, h, w], 1.0 / (side * side) as f64);
        let out = dynamic_local_filter(&z, &c, &Tensor::zeros(&[1, 2, h, w]), p, 1).unwrap();
        for ch in 0..2 {
            for i in p..h - p {
                for j in p..w - p {
                    let mut acc = 0.0;
                    for di in 0..side {
                        for dj in 0..side {
                            acc += z.data()[ch * h * w + (i + di - p) * w + (j + dj - p)];
                        }
                    }
                    acc /= (side * side) as f64;
                    assert!((out.data()[ch * h * w + i * w + j] - acc).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_coefficient_count() {
        let z = Tensor::zeros(&[1, 1, 4, 4]);
        let c = Tensor::zeros(&[1, 24, 4, 4]);
        assert!(dynamic_local_filter(&z, &c, &Tensor::zeros(&[1, 1, 4, 4]), 2, 1).is_err());
        let c = Tensor::zeros(&[1, 25, 7, 8]);
        assert!(dynamic_local_filter(&z, &c, &Tensor::zeros(&[1, 1, 7, 8]), 2, 2).is_err());
    }
}
