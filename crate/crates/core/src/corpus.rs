//! Procedural RGB test images.
//!
//! Scenes layer anti-aliased shapes (ellipses, rotated rectangles, strokes),
//! some filled with oriented stripe or checker textures, over a smooth color
//! field, then add low-amplitude fine grain. The result has the mix of flat
//! regions, sharp edges and periodic detail that makes blur and aliasing
//! visible, which is what the training and evaluation code needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Fill {
    Flat,
    Stripes { freq: f64, dir: (f64, f64), phase: f64 },
    Checker { period: f64, rot: f64 },
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, rot: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64, rot: f64 },
    Stroke { y0: f64, x0: f64, y1: f64, x1: f64, half: f64 },
}

impl Shape {
    /// Approximate signed distance in pixels (negative inside).
    fn distance(&self, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, rot } => {
                let (s, c) = rot.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
                (r - 1.0) * rx.min(ry)
            }
            Shape::Rect { cy, cx, hy, hx, rot } => {
                let (s, c) = rot.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = (c * dx + s * dy).abs() - hx;
                let v = (-s * dx + c * dy).abs() - hy;
                if u > 0.0 || v > 0.0 {
                    u.max(0.0).hypot(v.max(0.0))
                } else {
                    u.max(v)
                }
            }
            Shape::Stroke { y0, x0, y1, x1, half } => {
                let (vy, vx) = (y1 - y0, x1 - x0);
                let len2 = (vy * vy + vx * vx).max(1e-12);
                let t = (((y - y0) * vy + (x - x0) * vx) / len2).clamp(0.0, 1.0);
                (y - y0 - t * vy).hypot(x - x0 - t * vx) - half
            }
        }
    }
}

fn fill_factor(fill: Fill, y: f64, x: f64) -> f64 {
    match fill {
        Fill::Flat => 1.0,
        Fill::Stripes { freq, dir, phase } => {
            0.5 + 0.5 * (freq * (dir.0 * y + dir.1 * x) + phase).sin()
        }
        Fill::Checker { period, rot } => {
            let (s, c) = rot.sin_cos();
            let u = ((c * x + s * y) / period).floor() as i64;
            let v = ((-s * x + c * y) / period).floor() as i64;
            if (u + v).rem_euclid(2) == 0 {
                1.0
            } else {
                0.25
            }
        }
    }
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A random `(1, 3, h, w)` scene with values in `[0, 1]`.
pub fn procedural_image<R: Rng>(rng: &mut R, h: usize, w: usize) -> Result<Tensor> {
    if h < 4 || w < 4 {
        return Err(Error::invalid(format!("image {h}x{w} is too small")));
    }
    let (hf, wf) = (h as f64, w as f64);
    let size = hf.min(wf);
    let plane = h * w;
    let mut img = vec![0.0; 3 * plane];

    // smooth background: a few low-frequency waves per channel
    let mut waves = Vec::new();
    for _ in 0..3 {
        let base: f64 = rng.random_range(0.2..0.8);
        let terms: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let f = rng.random_range(0.5..2.5) * std::f64::consts::TAU / size;
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                (f * a.cos(), f * a.sin(), rng.random_range(0.0..6.3), rng.random_range(0.03..0.15))
            })
            .collect();
        waves.push((base, terms));
    }
    for (ch, (base, terms)) in waves.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64, j as f64);
                img[ch * plane + i * w + j] = base
                    + terms
                        .iter()
                        .map(|(fy, fx, p, a)| a * (fy * y + fx * x + p).sin())
                        .sum::<f64>();
            }
        }
    }

    let count = rng.random_range(8..20) + (h * w / 4096).min(40);
    for _ in 0..count {
        let shape = match rng.random_range(0..3) {
            0 => Shape::Ellipse {
                cy: rng.random_range(0.0..hf),
                cx: rng.random_range(0.0..wf),
                ry: rng.random_range(0.03..0.3) * size,
                rx: rng.random_range(0.03..0.3) * size,
                rot: rng.random_range(0.0..3.2),
            },
            1 => Shape::Rect {
                cy: rng.random_range(0.0..hf),
                cx: rng.random_range(0.0..wf),
                hy: rng.random_range(0.03..0.25) * size,
                hx: rng.random_range(0.03..0.25) * size,
                rot: rng.random_range(0.0..3.2),
            },
            _ => Shape::Stroke {
                y0: rng.random_range(0.0..hf),
                x0: rng.random_range(0.0..wf),
                y1: rng.random_range(0.0..hf),
                x1: rng.random_range(0.0..wf),
                half: rng.random_range(0.4..2.5),
            },
        };
        let fill = match rng.random_range(0..4) {
            0 => Fill::Stripes {
                freq: std::f64::consts::TAU / rng.random_range(2.5..10.0),
                dir: {
                    let a: f64 = rng.random_range(0.0..3.2);
                    (a.sin(), a.cos())
                },
                phase: rng.random_range(0.0..6.3),
            },
            1 => Fill::Checker {
                period: rng.random_range(2.0..8.0),
                rot: rng.random_range(0.0..1.6),
            },
            _ => Fill::Flat,
        };
        let col = color(rng);
        let edge = rng.random_range(0.5..1.2);
        let alpha = rng.random_range(0.6..1.0);
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                let d = shape.distance(y, x);
                if d > edge {
                    continue;
                }
                // linear coverage ramp across the edge
                let cover = ((edge - d) / (2.0 * edge)).clamp(0.0, 1.0) * alpha;
                let f = fill_factor(fill, y, x);
                for (ch, cv) in col.iter().enumerate() {
                    let p = &mut img[ch * plane + i * w + j];
                    *p += cover * (cv * f - *p);
                }
            }
        }
    }

    let grain = rng.random_range(0.0..0.02);
    for v in img.iter_mut() {
        *v = (*v + grain * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
    }
    Tensor::new(&[1, 3, h, w], img)
}

/// `count` images seeded from `seed`; image `i` uses its own rng stream.
pub fn procedural_corpus(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            procedural_image(&mut rng, h, w)
        })
        .collect()
}
