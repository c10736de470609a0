//! Small 2-D filters: generic kernels and normalized point-spread functions.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest side a blur kernel may have.
pub const MAX_KERNEL_SIDE: usize = 45;

/// Tolerance on the unit-sum invariant of [`BlurKernel`].
pub const SUM_TOLERANCE: f64 = 1e-8;

/// A row-major filter with odd side lengths and finite taps.
///
/// Tap `(i, j)` sits at offset `(i - h/2, j - w/2)` from the center. Taps may
/// be negative; see [`BlurKernel`] for the normalized PSF type.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    h: usize,
    w: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(h: usize, w: usize, taps: Vec<f64>) -> Result<Self> {
        if h % 2 == 0 || w % 2 == 0 {
            return Err(Error::invalid(format!("kernel sides must be odd, got {h}x{w}")));
        }
        if taps.len() != h * w {
            return Err(Error::shape(format!(
                "{h}x{w} kernel needs {} taps, got {}",
                h * w,
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("kernel taps".into()));
        }
        Ok(Kernel { h, w, taps })
    }

    /// Unit impulse of the given odd side.
    pub fn delta(side: usize) -> Self {
        assert!(side % 2 == 1, "delta side must be odd");
        let mut taps = vec![0.0; side * side];
        taps[side * side / 2] = 1.0;
        Kernel {
            h: side,
            w: side,
            taps,
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.taps[i * self.w + j]
    }

    pub fn center(&self) -> f64 {
        self.at(self.h / 2, self.w / 2)
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Same taps scaled to sum to one.
    pub fn normalized(&self) -> Result<Self> {
        let s = self.sum();
        if s.abs() < 1e-300 || !s.is_finite() {
            return Err(Error::invalid("cannot normalize a kernel with zero sum"));
        }
        Kernel::new(self.h, self.w, self.taps.iter().map(|t| t / s).collect())
    }

    /// Zero-pads (or crops) symmetrically to `h × w`, keeping the center fixed.
    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        if h % 2 == 0 || w % 2 == 0 {
            return Err(Error::invalid(format!("kernel sides must be odd, got {h}x{w}")));
        }
        let (cy, cx) = ((self.h / 2) as isize, (self.w / 2) as isize);
        let (ny, nx) = ((h / 2) as isize, (w / 2) as isize);
        let mut taps = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let si = i as isize - ny + cy;
                let sj = j as isize - nx + cx;
                if (0..self.h as isize).contains(&si) && (0..self.w as isize).contains(&sj) {
                    taps[i * w + j] = self.taps[si as usize * self.w + sj as usize];
                }
            }
        }
        Kernel::new(h, w, taps)
    }

    /// Removes symmetric pairs of all-zero border rows and columns.
    pub fn trimmed(&self) -> Self {
        let row_zero = |i: usize| (0..self.w).all(|j| self.at(i, j) == 0.0);
        let col_zero = |j: usize| (0..self.h).all(|i| self.at(i, j) == 0.0);
        let mut dy = 0;
        while 2 * (dy + 1) < self.h && row_zero(dy) && row_zero(self.h - 1 - dy) {
            dy += 1;
        }
        let mut dx = 0;
        while 2 * (dx + 1) < self.w && col_zero(dx) && col_zero(self.w - 1 - dx) {
            dx += 1;
        }
        self.resized(self.h - 2 * dy, self.w - 2 * dx)
            .expect("trimming keeps odd sides")
    }

    /// Side lengths of the bounding box of the non-zero taps.
    pub fn support(&self) -> (usize, usize) {
        let mut rows = (usize::MAX, 0);
        let mut cols = (usize::MAX, 0);
        for i in 0..self.h {
            for j in 0..self.w {
                if self.at(i, j) != 0.0 {
                    rows = (rows.0.min(i), rows.1.max(i));
                    cols = (cols.0.min(j), cols.1.max(j));
                }
            }
        }
        if rows.0 == usize::MAX {
            return (0, 0);
        }
        (rows.1 - rows.0 + 1, cols.1 - cols.0 + 1)
    }

    /// `(1, 1, h, w)` tensor view of the taps.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.h, self.w], self.taps.clone()).expect("consistent shape")
    }

    /// Full discrete convolution; the result has sides `h₁+h₂−1 × w₁+w₂−1`.
    pub fn convolve(&self, other: &Kernel) -> Kernel {
        let h = self.h + other.h - 1;
        let w = self.w + other.w - 1;
        let mut taps = vec![0.0; h * w];
        for i in 0..self.h {
            for j in 0..self.w {
                let a = self.at(i, j);
                if a == 0.0 {
                    continue;
                }
                for k in 0..other.h {
                    let row = &mut taps[(i + k) * w + j..(i + k) * w + j + other.w];
                    for (t, b) in row.iter_mut().zip(&other.taps[k * other.w..(k + 1) * other.w]) {
                        *t += a * b;
                    }
                }
            }
        }
        Kernel { h, w, taps }
    }
}

/// Normalized, non-negative point-spread function with odd sides ≤ 45.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel(Kernel);

impl BlurKernel {
    /// Validates an already normalized kernel.
    pub fn new(kernel: Kernel) -> Result<Self> {
        if kernel.h > MAX_KERNEL_SIDE || kernel.w > MAX_KERNEL_SIDE {
            return Err(Error::invalid(format!(
                "blur kernel {}x{} exceeds {MAX_KERNEL_SIDE}",
                kernel.h, kernel.w
            )));
        }
        if kernel.taps.iter().any(|&t| t < 0.0) {
            return Err(Error::invalid("blur kernel has negative taps"));
        }
        let s = kernel.sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("blur kernel sums to {s}, not 1")));
        }
        Ok(BlurKernel(kernel))
    }

    /// Clamps negative taps to zero and rescales to unit sum.
    pub fn from_weights(kernel: Kernel) -> Result<Self> {
        let clamped = Kernel::new(
            kernel.h,
            kernel.w,
            kernel.taps.iter().map(|t| t.max(0.0)).collect(),
        )?;
        BlurKernel::new(clamped.normalized()?)
    }

    pub fn delta() -> Self {
        BlurKernel(Kernel::delta(1))
    }

    pub fn kernel(&self) -> &Kernel {
        &self.0
    }

    pub fn into_kernel(self) -> Kernel {
        self.0
    }
}

impl Deref for BlurKernel {
    type Target = Kernel;

    fn deref(&self) -> &Kernel {
        &self.0
    }
}

/// Default Gaussian support: `2⌈3σ⌉ + 1`.
pub fn gaussian_side(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil() as usize + 1
}

/// Sampled isotropic Gaussian, truncated to `size × size` and renormalized.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<BlurKernel> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if size % 2 == 0 {
        return Err(Error::invalid(format!("gaussian size must be odd, got {size}")));
    }
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut taps = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            taps.push(a * b);
        }
    }
    BlurKernel::new(Kernel::new(size, size, taps)?.normalized()?)
}

/// Anti-aliased line segment of `length` pixels through the kernel center.
///
/// `angle` is in degrees, measured counter-clockwise from the positive
/// column axis (rows grow downwards).
pub fn linear_motion_kernel(angle: f64, length: f64) -> Result<BlurKernel> {
    if !(0.0..180.0).contains(&angle) {
        return Err(Error::invalid(format!("motion angle {angle} outside [0, 180)")));
    }
    if !(length >= 1.0 && length.is_finite()) {
        return Err(Error::invalid(format!("motion length must be >= 1, got {length}")));
    }
    let half = (length - 1.0) / 2.0;
    let radius = half.ceil() as usize;
    let side = 2 * radius + 1;
    let (sin, cos) = angle.to_radians().sin_cos();
    let mut taps = vec![0.0; side * side];
    let samples = (16.0 * length).ceil() as usize + 1;
    for k in 0..samples {
        let t = if samples == 1 {
            0.0
        } else {
            -half + 2.0 * half * k as f64 / (samples - 1) as f64
        };
        let y = radius as f64 - t * sin;
        let x = radius as f64 + t * cos;
        splat(&mut taps, side, side, y, x, 1.0);
    }
    BlurKernel::new(Kernel::new(side, side, taps)?.normalized()?)
}

/// Bilinear deposit of `mass` at fractional `(y, x)`, clamped to the grid.
pub(crate) fn splat(taps: &mut [f64], h: usize, w: usize, y: f64, x: f64, mass: f64) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let ty = y - y0 as f64;
    let tx = x - x0 as f64;
    let mut add = |i: usize, j: usize, v: f64| {
        if v != 0.0 {
            taps[i * w + j] += v;
        }
    };
    add(y0, x0, mass * (1.0 - ty) * (1.0 - tx));
    if tx > 0.0 {
        add(y0, x0 + 1, mass * (1.0 - ty) * tx);
    }
    if ty > 0.0 {
        add(y0 + 1, x0, mass * ty * (1.0 - tx));
        if tx > 0.0 {
            add(y0 + 1, x0 + 1, mass * ty * tx);
        }
    }
}

/// Full convolution of two PSFs, renormalized. Results wider than
/// [`MAX_KERNEL_SIDE`] are center-cropped before renormalizing.
pub fn compose_kernels(a: &BlurKernel, b: &BlurKernel) -> Result<BlurKernel> {
    let mut k = a.convolve(b).trimmed();
    if k.h > MAX_KERNEL_SIDE || k.w > MAX_KERNEL_SIDE {
        k = k.resized(k.h.min(MAX_KERNEL_SIDE), k.w.min(MAX_KERNEL_SIDE))?;
    }
    BlurKernel::from_weights(k)
}
