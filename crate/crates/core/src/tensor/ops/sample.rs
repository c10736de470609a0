//! Bilinear sampling with coordinates clamped to the image rectangle.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Position of one fractional sample inside an `h × w` plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub ty: f64,
    pub tx: f64,
    /// Whether the coordinate lies inside the rectangle (clamping has zero slope outside).
    pub live_y: bool,
    pub live_x: bool,
}

#[inline]
fn locate(pos: f64, len: usize) -> (usize, usize, f64, bool) {
    let hi = (len - 1) as f64;
    let live = (0.0..=hi).contains(&pos);
    let p = pos.clamp(0.0, hi);
    let i0 = if len >= 2 {
        (p.floor() as usize).min(len - 2)
    } else {
        0
    };
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - i0 as f64, live)
}

impl Tap {
    #[inline]
    pub fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (y0, y1, ty, live_y) = locate(y, h);
        let (x0, x1, tx, live_x) = locate(x, w);
        Tap {
            y0,
            y1,
            x0,
            x1,
            ty,
            tx,
            live_y,
            live_x,
        }
    }

    #[inline]
    fn corners(&self, plane: &[f64], w: usize) -> [f64; 4] {
        [
            plane[self.y0 * w + self.x0],
            plane[self.y0 * w + self.x1],
            plane[self.y1 * w + self.x0],
            plane[self.y1 * w + self.x1],
        ]
    }

    #[inline]
    pub fn value(&self, plane: &[f64], w: usize) -> f64 {
        let [v00, v01, v10, v11] = self.corners(plane, w);
        (1.0 - self.ty) * ((1.0 - self.tx) * v00 + self.tx * v01)
            + self.ty * ((1.0 - self.tx) * v10 + self.tx * v11)
    }

    /// Partial derivatives of [`Tap::value`] with respect to `(y, x)`.
    #[inline]
    pub fn slope(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let [v00, v01, v10, v11] = self.corners(plane, w);
        let dy = if self.live_y {
            (1.0 - self.tx) * (v10 - v00) + self.tx * (v11 - v01)
        } else {
            0.0
        };
        let dx = if self.live_x {
            (1.0 - self.ty) * (v01 - v00) + self.ty * (v11 - v10)
        } else {
            0.0
        };
        (dy, dx)
    }

    /// Adds `g` times the interpolation weights into `plane`.
    #[inline]
    pub fn scatter(&self, plane: &mut [f64], w: usize, g: f64) {
        plane[self.y0 * w + self.x0] += g * (1.0 - self.ty) * (1.0 - self.tx);
        plane[self.y0 * w + self.x1] += g * (1.0 - self.ty) * self.tx;
        plane[self.y1 * w + self.x0] += g * self.ty * (1.0 - self.tx);
        plane[self.y1 * w + self.x1] += g * self.ty * self.tx;
    }
}

fn check(input: &Tensor, coords: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (cn, two, ho, wo) = coords.dims4()?;
    if cn != n || two != 2 {
        return Err(Error::shape(format!(
            "coords must be ({n}, 2, H, W), got {:?}",
            coords.shape()
        )));
    }
    if !coords.all_finite() {
        return Err(Error::NonFinite("bilinear_sample coordinates".into()));
    }
    Ok((n, c, h, w, ho, wo))
}

/// Samples `input (N,C,H,W)` at `coords (N,2,Ho,Wo)` (channel 0 = row, 1 = column).
pub fn bilinear_sample(input: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (n, c, h, w, ho, wo) = check(input, coords)?;
    let op = ho * wo;
    let mut out = vec![0.0; n * c * op];
    out.par_chunks_mut(c * op)
        .enumerate()
        .for_each(|(b, o)| {
            let cy = &coords.data()[(b * 2) * op..(b * 2 + 1) * op];
            let cx = &coords.data()[(b * 2 + 1) * op..(b * 2 + 2) * op];
            let taps: Vec<Tap> = (0..op).map(|p| Tap::new(cy[p], cx[p], h, w)).collect();
            for ch in 0..c {
                let plane = &input.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for (p, tap) in taps.iter().enumerate() {
                    o[ch * op + p] = tap.value(plane, w);
                }
            }
        });
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn bilinear_sample_backward(
    input: &Tensor,
    coords: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (_, c, h, w, ho, wo) = check(input, coords)?;
    let op = ho * wo;
    let mut din = Tensor::zeros(input.shape());
    let mut dco = Tensor::zeros(coords.shape());
    din.data_mut()
        .par_chunks_mut(c * h * w)
        .zip(dco.data_mut().par_chunks_mut(2 * op))
        .enumerate()
        .for_each(|(b, (di, dc))| {
            let cy = &coords.data()[(b * 2) * op..(b * 2 + 1) * op];
            let cx = &coords.data()[(b * 2 + 1) * op..(b * 2 + 2) * op];
            for p in 0..op {
                let tap = Tap::new(cy[p], cx[p], h, w);
                for ch in 0..c {
                    let g = grad_out.data()[(b * c + ch) * op + p];
                    let plane = &input.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let (sy, sx) = tap.slope(plane, w);
                    dc[p] += g * sy;
                    dc[op + p] += g * sx;
                    tap.scatter(&mut di[ch * h * w..(ch + 1) * h * w], w, g);
                }
            }
        });
    Ok((din, dco))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coords_are_exact_and_midpoints_average() {
        let x = Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 * 1.5 - 2.0);
        let coords = Tensor::new(&[1, 2, 1, 3], vec![1.0, 2.0, 0.0, 3.0, 0.5, 2.0]).unwrap();
        let y = bilinear_sample(&x, &coords).unwrap();
        let v = |r: usize, c: usize| x.data()[r * 4 + c];
        assert_eq!(y.data()[0], v(1, 3));
        assert!((y.data()[1] - 0.5 * (v(2, 0) + v(2, 1))).abs() < 1e-15);
        assert_eq!(y.data()[2], v(0, 2));
    }

    #[test]
    fn out_of_range_coords_clamp() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let coords = Tensor::new(&[1, 2, 1, 1], vec![-3.0, 7.5]).unwrap();
        let y = bilinear_sample(&x, &coords).unwrap();
        assert_eq!(y.data()[0], 1.0);
    }

    #[test]
    fn rejects_non_finite_coords() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let coords = Tensor::new(&[1, 2, 1, 1], vec![f64::NAN, 0.0]).unwrap();
        assert!(bilinear_sample(&x, &coords).is_err());
    }
}
