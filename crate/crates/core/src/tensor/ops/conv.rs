//! 2-D convolution (cross-correlation) via im2col and GEMM.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

/// Convolution options. Padding is always "same": `dilation·(k−1)/2` pixels
/// per side, so a stride-1 convolution preserves spatial dims.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts {
            stride: 1,
            dilation: 1,
            padding: Padding::Zero,
        }
    }
}

impl Conv2dOpts {
    pub fn strided(stride: usize) -> Self {
        Conv2dOpts {
            stride,
            ..Default::default()
        }
    }

    pub fn dilated(dilation: usize) -> Self {
        Conv2dOpts {
            dilation,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub opts: Conv2dOpts,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, opts: Conv2dOpts) -> Self {
        let pad_h = opts.dilation * (kh - 1) / 2;
        let pad_w = opts.dilation * (kw - 1) / 2;
        let ho = (h + 2 * pad_h - opts.dilation * (kh - 1) - 1) / opts.stride + 1;
        let wo = (w + 2 * pad_w - opts.dilation * (kw - 1) - 1) / opts.stride + 1;
        ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            pad_h,
            pad_w,
            opts,
        }
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1
    }

    /// Source index along one axis, or `None` for a zero-padded tap.
    #[inline]
    fn source(&self, out: usize, tap: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (out * self.opts.stride + tap * self.opts.dilation) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            match self.opts.padding {
                Padding::Zero => None,
                Padding::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
            }
        }
    }

    /// Fills `col` (k × out_plane) from one sample `x` (cin × h × w).
    pub fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let src_y = self.source(oy, ky, self.pad_h, self.h);
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match src_y {
                            None => d.fill(0.0),
                            Some(iy) => {
                                let xr = &xc[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in d.iter_mut().enumerate() {
                                    *v = match self.source(ox, kx, self.pad_w, self.w) {
                                        Some(ix) => xr[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatters `col` gradients back into `dx` (accumulating).
    pub fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.pad_h, self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.pad_w, self.w) {
                                dxc[iy * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn check_conv(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    opts: Conv2dOpts,
) -> Result<(usize, ConvGeom, usize)> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!("conv2d kernel {kh}x{kw} must have odd sides")));
    }
    if opts.stride == 0 || opts.dilation == 0 {
        return Err(Error::invalid("stride and dilation must be at least 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?}, expected [{cout}]",
                b.shape()
            )));
        }
    }
    Ok((n, ConvGeom::new(cin, h, w, kh, kw, opts), cout))
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    opts: Conv2dOpts,
) -> Result<Tensor> {
    let (n, g, cout) = check_conv(input, weight, bias, opts)?;
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let mut out = vec![0.0; n * cout * plane];
    out.par_chunks_mut(cout * plane)
        .zip(input.data().par_chunks(in_len))
        .for_each(|(o, x)| {
            if let Some(b) = bias {
                for (co, &bv) in b.data().iter().enumerate() {
                    o[co * plane..(co + 1) * plane].fill(bv);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            let wm = MatRef::new(weight.data(), cout, g.k());
            if g.is_pointwise() {
                gemm(wm, MatRef::new(x, g.k(), plane), beta, o);
            } else {
                let mut col = vec![0.0; g.k() * plane];
                g.im2col(x, &mut col);
                gemm(wm, MatRef::new(&col, g.k(), plane), beta, o);
            }
        });
    Tensor::new(&[n, cout, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    opts: Conv2dOpts,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let (n, g, cout) = check_conv(input, weight, None, opts)?;
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let k = g.k();
    let wm = MatRef::new(weight.data(), cout, k);

    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = input
        .data()
        .par_chunks(in_len)
        .zip(grad_out.data().par_chunks(cout * plane))
        .map(|(x, go)| {
            let gom = MatRef::new(go, cout, plane);
            let owned_col;
            let col: &[f64] = if g.is_pointwise() {
                x
            } else if need[1] {
                let mut c = vec![0.0; k * plane];
                g.im2col(x, &mut c);
                owned_col = c;
                &owned_col
            } else {
                &[]
            };
            let dw = need[1].then(|| {
                let mut dw = vec![0.0; cout * k];
                gemm(gom, MatRef::new(col, k, plane).t(), 0.0, &mut dw);
                dw
            });
            let dx = need[0].then(|| {
                if g.is_pointwise() {
                    let mut dx = vec![0.0; in_len];
                    gemm(wm.t(), gom, 0.0, &mut dx);
                    dx
                } else {
                    let mut dcol = vec![0.0; k * plane];
                    gemm(wm.t(), gom, 0.0, &mut dcol);
                    let mut dx = vec![0.0; in_len];
                    g.col2im(&dcol, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let input_grad = if need[0] {
        let mut data = Vec::with_capacity(n * in_len);
        for (dx, _) in &per_sample {
            data.extend_from_slice(dx.as_ref().expect("input grad computed"));
        }
        Some(Tensor::new(input.shape(), data)?)
    } else {
        None
    };
    let weight_grad = if need[1] {
        let mut acc = vec![0.0; cout * k];
        for (_, dw) in &per_sample {
            for (a, b) in acc.iter_mut().zip(dw.as_ref().expect("weight grad computed")) {
                *a += b;
            }
        }
        Some(Tensor::new(weight.shape(), acc)?)
    } else {
        None
    };
    let bias_grad = if has_bias && need[2] {
        let mut db = vec![0.0; cout];
        for go in grad_out.data().chunks(cout * plane) {
            for (co, d) in db.iter_mut().enumerate() {
                *d += go[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        Some(Tensor::new(&[cout], db)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop reference.
    fn conv_direct(x: &Tensor, w: &Tensor, b: Option<&Tensor>, opts: Conv2dOpts) -> Tensor {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, kh, kw) = w.dims4().unwrap();
        let g = ConvGeom::new(cin, h, wd, kh, kw, opts);
        let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
        for b_ in 0..n {
            for co in 0..cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * opts.stride + ky * opts.dilation) as isize
                                        - g.pad_h as isize;
                                    let ix = (ox * opts.stride + kx * opts.dilation) as isize
                                        - g.pad_w as isize;
                                    let (iy, ix) = match opts.padding {
                                        Padding::Zero => {
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            (iy as usize, ix as usize)
                                        }
                                        Padding::Replicate => (
                                            iy.clamp(0, h as isize - 1) as usize,
                                            ix.clamp(0, wd as isize - 1) as usize,
                                        ),
                                    };
                                    acc += w.data()[((co * cin + ci) * kh + ky) * kw + kx]
                                        * x.data()[((b_ * cin + ci) * h + iy) * wd + ix];
                                }
                            }
                        }
                        out.data_mut()[((b_ * cout + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + seed) * 0.7316).sin())
    }

    #[test]
    fn matches_direct_loops() {
        let x = pseudo(&[2, 3, 7, 6], 0.3);
        let w = pseudo(&[4, 3, 3, 5], 1.1);
        let b = pseudo(&[4], 2.0);
        for opts in [
            Conv2dOpts::default(),
            Conv2dOpts::strided(2),
            Conv2dOpts::dilated(2),
            Conv2dOpts {
                padding: Padding::Replicate,
                ..Conv2dOpts::strided(2)
            },
        ] {
            let got = conv2d(&x, &w, Some(&b), opts).unwrap();
            let want = conv_direct(&x, &w, Some(&b), opts);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "{opts:?}");
        }
    }

    #[test]
    fn pointwise_identity() {
        let x = pseudo(&[1, 3, 4, 4], 0.0);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[3])), Conv2dOpts::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_even_kernels_and_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 3]), None, Conv2dOpts::default()).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, Conv2dOpts::default()).is_err());
    }

    #[test]
    fn stride_two_halves_dims() {
        let x = Tensor::zeros(&[1, 1, 48, 25]);
        let y = conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), None, Conv2dOpts::strided(2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 24, 13]);
    }
}
