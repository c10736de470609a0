//! Modulated deformable convolution.
//!
//! Output at site `m` is `Σ_o w_o · a_{m,o} · f(m + o + Δm_{m,o})`, with `f`
//! read by bilinear interpolation. Sampling positions are clamped to the
//! input rectangle, so zero offsets with unit modulation reproduce a
//! replicate-padded [`conv2d`](super::conv::conv2d).
//!
//! Offsets are laid out as `(N, 2·O, H, W)` with channel `2o` the row shift
//! and `2o + 1` the column shift of tap `o` (taps in row-major kernel order).

use rayon::prelude::*;

use super::sample::Tap;
use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl Geom {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn k(&self) -> usize {
        self.cin * self.taps()
    }

    /// Sampling taps for one sample, indexed `o * plane + p`.
    fn locate(&self, offsets: &[f64]) -> Vec<Tap> {
        let plane = self.plane();
        let (ph, pw) = ((self.kh / 2) as f64, (self.kw / 2) as f64);
        let mut taps = Vec::with_capacity(self.taps() * plane);
        for o in 0..self.taps() {
            let (ky, kx) = ((o / self.kw) as f64, (o % self.kw) as f64);
            let dy = &offsets[2 * o * plane..(2 * o + 1) * plane];
            let dx = &offsets[(2 * o + 1) * plane..(2 * o + 2) * plane];
            for p in 0..plane {
                let (oy, ox) = ((p / self.w) as f64, (p % self.w) as f64);
                taps.push(Tap::new(
                    oy + ky - ph + dy[p],
                    ox + kx - pw + dx[p],
                    self.h,
                    self.w,
                ));
            }
        }
        taps
    }

    /// Unmodulated samples `S[(ci, o), p]`.
    fn sampled(&self, x: &[f64], taps: &[Tap]) -> Vec<f64> {
        let plane = self.plane();
        let o_n = self.taps();
        let mut s = vec![0.0; self.k() * plane];
        for ci in 0..self.cin {
            let xp = &x[ci * plane..(ci + 1) * plane];
            for o in 0..o_n {
                let row = &mut s[(ci * o_n + o) * plane..(ci * o_n + o + 1) * plane];
                for (p, v) in row.iter_mut().enumerate() {
                    *v = taps[o * plane + p].value(xp, self.w);
                }
            }
        }
        s
    }

    fn modulate(&self, s: &mut [f64], a: &[f64]) {
        let plane = self.plane();
        let o_n = self.taps();
        for ci in 0..self.cin {
            for o in 0..o_n {
                let row = &mut s[(ci * o_n + o) * plane..(ci * o_n + o + 1) * plane];
                for (v, m) in row.iter_mut().zip(&a[o * plane..(o + 1) * plane]) {
                    *v *= m;
                }
            }
        }
    }
}

fn check(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    offsets: &Tensor,
    modulation: &Tensor,
) -> Result<Geom> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "deformable weight expects {wcin} input channels, input has {cin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!("deformable kernel {kh}x{kw} must have odd sides")));
    }
    let o = kh * kw;
    if offsets.shape() != [n, 2 * o, h, w] {
        return Err(Error::shape(format!(
            "offsets {:?}, expected [{n}, {}, {h}, {w}]",
            offsets.shape(),
            2 * o
        )));
    }
    if modulation.shape() != [n, o, h, w] {
        return Err(Error::shape(format!(
            "modulation {:?}, expected [{n}, {o}, {h}, {w}]",
            modulation.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(format!("bias {:?}, expected [{cout}]", b.shape())));
        }
    }
    if !offsets.all_finite() {
        return Err(Error::NonFinite("deformable offsets".into()));
    }
    Ok(Geom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
    })
}

pub fn deformable_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    offsets: &Tensor,
    modulation: &Tensor,
) -> Result<Tensor> {
    let g = check(input, weight, bias, offsets, modulation)?;
    let plane = g.plane();
    let o_n = g.taps();
    let mut out = vec![0.0; g.n * g.cout * plane];
    out.par_chunks_mut(g.cout * plane)
        .enumerate()
        .for_each(|(b, o)| {
            let x = &input.data()[b * g.cin * plane..(b + 1) * g.cin * plane];
            let off = &offsets.data()[b * 2 * o_n * plane..(b + 1) * 2 * o_n * plane];
            let a = &modulation.data()[b * o_n * plane..(b + 1) * o_n * plane];
            let taps = g.locate(off);
            let mut col = g.sampled(x, &taps);
            g.modulate(&mut col, a);
            if let Some(bias) = bias {
                for (co, &bv) in bias.data().iter().enumerate() {
                    o[co * plane..(co + 1) * plane].fill(bv);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(
                MatRef::new(weight.data(), g.cout, g.k()),
                MatRef::new(&col, g.k(), plane),
                beta,
                o,
            );
        });
    Tensor::new(&[g.n, g.cout, g.h, g.w], out)
}

pub(crate) struct DeformGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
    pub offsets: Tensor,
    pub modulation: Tensor,
}

pub(crate) fn deformable_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    offsets: &Tensor,
    modulation: &Tensor,
    grad_out: &Tensor,
) -> Result<DeformGrads> {
    let g = check(input, weight, None, offsets, modulation)?;
    let plane = g.plane();
    let o_n = g.taps();
    let k = g.k();
    let in_len = g.cin * plane;

    struct Sample {
        dx: Vec<f64>,
        dw: Vec<f64>,
        doff: Vec<f64>,
        da: Vec<f64>,
    }

    let per_sample: Vec<Sample> = (0..g.n)
        .into_par_iter()
        .map(|b| {
            let x = &input.data()[b * in_len..(b + 1) * in_len];
            let off = &offsets.data()[b * 2 * o_n * plane..(b + 1) * 2 * o_n * plane];
            let a = &modulation.data()[b * o_n * plane..(b + 1) * o_n * plane];
            let go = &grad_out.data()[b * g.cout * plane..(b + 1) * g.cout * plane];
            let gom = MatRef::new(go, g.cout, plane);

            let taps = g.locate(off);
            let s = g.sampled(x, &taps);
            let mut col = s.clone();
            g.modulate(&mut col, a);

            let mut dw = vec![0.0; g.cout * k];
            gemm(gom, MatRef::new(&col, k, plane).t(), 0.0, &mut dw);
            let mut dcol = vec![0.0; k * plane];
            gemm(MatRef::new(weight.data(), g.cout, k).t(), gom, 0.0, &mut dcol);

            let mut dx = vec![0.0; in_len];
            let mut doff = vec![0.0; 2 * o_n * plane];
            let mut da = vec![0.0; o_n * plane];
            for ci in 0..g.cin {
                let xp = &x[ci * plane..(ci + 1) * plane];
                let dxp = &mut dx[ci * plane..(ci + 1) * plane];
                for o in 0..o_n {
                    let row = (ci * o_n + o) * plane;
                    for p in 0..plane {
                        let gc = dcol[row + p];
                        if gc == 0.0 {
                            continue;
                        }
                        da[o * plane + p] += gc * s[row + p];
                        let ga = gc * a[o * plane + p];
                        let tap = &taps[o * plane + p];
                        let (sy, sx) = tap.slope(xp, g.w);
                        doff[2 * o * plane + p] += ga * sy;
                        doff[(2 * o + 1) * plane + p] += ga * sx;
                        tap.scatter(dxp, g.w, ga);
                    }
                }
            }
            Sample { dx, dw, doff, da }
        })
        .collect();

    let mut dx = Vec::with_capacity(g.n * in_len);
    let mut doff = Vec::with_capacity(offsets.len());
    let mut da = Vec::with_capacity(modulation.len());
    let mut dw = vec![0.0; g.cout * k];
    for s in &per_sample {
        dx.extend_from_slice(&s.dx);
        doff.extend_from_slice(&s.doff);
        da.extend_from_slice(&s.da);
        for (acc, v) in dw.iter_mut().zip(&s.dw) {
            *acc += v;
        }
    }
    let mut db = vec![0.0; g.cout];
    for go in grad_out.data().chunks(g.cout * plane) {
        for (co, d) in db.iter_mut().enumerate() {
            *d += go[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
    }
    Ok(DeformGrads {
        input: Tensor::new(input.shape(), dx)?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[g.cout], db)?,
        offsets: Tensor::new(offsets.shape(), doff)?,
        modulation: Tensor::new(modulation.shape(), da)?,
    })
}
