//! Geometric and scale augmentation of HR training images.

use rand::Rng;

use crate::degrade::bicubic_resize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Range of the random rescale factor.
pub const RESCALE_RANGE: (f64, f64) = (0.5, 1.25);

const MAX_REDRAWS: usize = 64;

/// Which augmentations are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flips: bool,
    pub rotations: bool,
    pub rescale: bool,
}

impl Augment {
    pub const ALL: Augment = Augment {
        flips: true,
        rotations: true,
        rescale: true,
    };
    pub const NONE: Augment = Augment {
        flips: false,
        rotations: false,
        rescale: false,
    };
}

impl Default for Augment {
    fn default() -> Self {
        Self::ALL
    }
}

fn remap(x: &Tensor, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let (si, sj) = src(i, j);
                out.push(plane[si * w + sj]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Mirrors left to right.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    remap(x, h, w, |i, j| (i, w - 1 - j))
}

/// Mirrors top to bottom.
pub fn flip_vertical(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    remap(x, h, w, |i, j| (h - 1 - i, j))
}

/// Rotates counter-clockwise by `quarter_turns · 90°`.
pub fn rot90(x: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    match quarter_turns % 4 {
        0 => Ok(x.clone()),
        1 => remap(x, w, h, |i, j| (j, w - 1 - i)),
        2 => remap(x, h, w, |i, j| (h - 1 - i, w - 1 - j)),
        _ => remap(x, w, h, |i, j| (h - 1 - j, i)),
    }
}

/// A rescale factor drawn uniformly from [`RESCALE_RANGE`].
pub fn draw_rescale_factor<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(RESCALE_RANGE.0..=RESCALE_RANGE.1)
}

/// Random flips, quarter turns and bicubic rescale of `x`. Rescale factors
/// that would leave a side shorter than `min_side` are redrawn.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, rng: &mut R, opts: Augment, min_side: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut out = x.clone();
    if opts.rescale {
        let largest = RESCALE_RANGE.1;
        if ((h.min(w) as f64) * largest).round() < min_side as f64 {
            return Err(Error::invalid(format!(
                "{h}x{w} image is too small for {min_side}-pixel patches at any rescale factor"
            )));
        }
        let mut dims = None;
        for _ in 0..MAX_REDRAWS {
            let f = draw_rescale_factor(rng);
            let (nh, nw) = ((h as f64 * f).round() as usize, (w as f64 * f).round() as usize);
            if nh.min(nw) >= min_side {
                dims = Some((nh, nw));
                break;
            }
        }
        let (nh, nw) = dims.unwrap_or(((h as f64 * largest).round() as usize, (w as f64 * largest).round() as usize));
        if (nh, nw) != (h, w) {
            out = bicubic_resize(&out, nh, nw)?.map(|v| v.clamp(0.0, 1.0));
        }
    } else if h.min(w) < min_side {
        return Err(Error::invalid(format!("{h}x{w} image is smaller than {min_side}-pixel patches")));
    }
    if opts.flips {
        if rng.random::<bool>() {
            out = flip_horizontal(&out)?;
        }
        if rng.random::<bool>() {
            out = flip_vertical(&out)?;
        }
    }
    if opts.rotations {
        out = rot90(&out, rng.random_range(0..4))?;
    }
    Ok(out)
}

/// The `side × side` window with top-left corner `(top, left)`.
pub fn crop(x: &Tensor, top: usize, left: usize, side: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if top + side > h || left + side > w {
        return Err(Error::invalid(format!(
            "{side}-pixel crop at ({top}, {left}) leaves the {h}x{w} image"
        )));
    }
    remap(x, side, side, |i, j| (top + i, left + j))
}

/// A uniformly placed `side × side` crop.
pub fn random_crop<R: Rng + ?Sized>(x: &Tensor, side: usize, rng: &mut R) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h < side || w < side {
        return Err(Error::invalid(format!("{h}x{w} image is smaller than {side}-pixel patches")));
    }
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    crop(x, top, left, side)
}

/// The centered `side × side` crop.
pub fn center_crop(x: &Tensor, side: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h < side || w < side {
        return Err(Error::invalid(format!("{h}x{w} image is smaller than {side}-pixel patches")));
    }
    crop(x, (h - side) / 2, (w - side) / 2, side)
}
