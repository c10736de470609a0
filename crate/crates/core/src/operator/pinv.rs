use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::DownsampleOperator;
use crate::corpus::procedural_corpus;
use crate::error::{Error, Result};
use crate::tensor::ops::{conv2d, leaky_relu, pixel_shuffle, LEAKY_SLOPE};
use crate::tensor::{Adam, AdamConfig, Conv2dOpts, Graph, LinearMap, Padding, Tensor, Var};

/// Largest high-resolution plane (in pixels) the dense pseudo-inverse accepts.
pub const MAX_EXACT_PIXELS: usize = 64 * 64;

/// Eigenvalues of `A Aᵀ` below this fraction of the largest are treated as zero.
pub const EXACT_CUTOFF: f64 = 1e-12;

/// Dense Moore–Penrose pseudo-inverse of the anchor operator for one fixed
/// image size, applied plane by plane.
#[derive(Clone, Debug)]
pub struct ExactPinv {
    scale: usize,
    h: usize,
    w: usize,
    /// Row-major `(h·w) × (h/s · w/s)`.
    matrix: Vec<f64>,
}

impl ExactPinv {
    /// `A⁺ = Aᵀ (A Aᵀ)⁺`, with the inner pseudo-inverse from a symmetric
    /// eigendecomposition and a relative cutoff.
    pub fn new(op: &DownsampleOperator, h: usize, w: usize) -> Result<Self> {
        if h * w > MAX_EXACT_PIXELS {
            return Err(Error::invalid(format!(
                "exact pseudo-inverse limited to {MAX_EXACT_PIXELS} pixels, got {h}x{w}"
            )));
        }
        let s = op.scale();
        let n = h * w;
        let m = (h / s) * (w / s);
        let a = DMatrix::from_row_slice(m, n, &op.dense_matrix(h, w)?);
        let gram = &a * a.transpose();
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        if top <= 0.0 {
            return Err(Error::invalid("operator is identically zero"));
        }
        let inv = DVector::from_iterator(
            m,
            eig.eigenvalues
                .iter()
                .map(|&l| if l > EXACT_CUTOFF * top { 1.0 / l } else { 0.0 }),
        );
        let q = &eig.eigenvectors;
        let gram_pinv = q * DMatrix::from_diagonal(&inv) * q.transpose();
        let p = a.transpose() * gram_pinv;
        let mut matrix = Vec::with_capacity(n * m);
        for r in 0..n {
            matrix.extend(p.row(r).iter());
        }
        Ok(ExactPinv { scale: s, h, w, matrix })
    }

    /// High-resolution plane size this inverse was built for.
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// Row-major `(h·w) × (h/s · w/s)` matrix acting on one plane.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    fn planes(&self, x: &Tensor, rows: usize, cols: usize, transpose: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (out_len, in_len) = if transpose { (cols, rows) } else { (rows, cols) };
        let (lh, lw) = (self.h / self.scale, self.w / self.scale);
        let (want, out_hw) = if transpose {
            ((self.h, self.w), (lh, lw))
        } else {
            ((lh, lw), (self.h, self.w))
        };
        if (h, w) != want {
            return Err(Error::shape(format!(
                "pseudo-inverse built for {want:?} inputs, got {h}x{w}"
            )));
        }
        let mut out = vec![0.0; n * c * out_len];
        out.par_chunks_mut(out_len)
            .zip(x.data().par_chunks(in_len))
            .for_each(|(dst, src)| {
                if transpose {
                    for (r, &v) in src.iter().enumerate() {
                        let row = &self.matrix[r * cols..(r + 1) * cols];
                        for (d, &p) in dst.iter_mut().zip(row) {
                            *d += p * v;
                        }
                    }
                } else {
                    for (r, d) in dst.iter_mut().enumerate() {
                        let row = &self.matrix[r * cols..(r + 1) * cols];
                        *d = row.iter().zip(src).map(|(a, b)| a * b).sum();
                    }
                }
            });
        Tensor::new(&[n, c, out_hw.0, out_hw.1], out)
    }
}

impl LinearMap for ExactPinv {
    fn apply(&self, y: &Tensor) -> Result<Tensor> {
        let rows = self.h * self.w;
        self.planes(y, rows, rows / (self.scale * self.scale), false)
    }

    fn adjoint(&self, x: &Tensor) -> Result<Tensor> {
        let rows = self.h * self.w;
        self.planes(x, rows, rows / (self.scale * self.scale), true)
    }
}

/// Hidden width of the learned pseudo-inverse.
pub const PINV_WIDTH: usize = 32;

/// Input offset kept in the hidden layers so that the fitted network stays in
/// the identity branch of its leaky units.
const LINEAR_BIAS: f64 = 2.0;

/// Offsets of the shifted copies in the first layer; with the final 3×3
/// layer they tile a 9×9 low-resolution footprint exactly once.
const TAP_OFFSETS: [isize; 3] = [-3, 0, 3];
const FOOTPRINT: usize = 9;

fn replicate() -> Conv2dOpts {
    Conv2dOpts {
        padding: Padding::Replicate,
        ..Default::default()
    }
}

/// Small convolutional network approximating `A⁺`:
/// conv 7×7 → leaky → conv 5×5 → leaky → conv 3×3 → pixel shuffle.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedPinv {
    scale: usize,
    /// `[w1, b1, w2, b2, w3, b3]`.
    params: Vec<Tensor>,
}

impl LearnedPinv {
    pub fn zeros(scale: usize) -> Self {
        let out = 3 * scale * scale;
        LearnedPinv {
            scale,
            params: vec![
                Tensor::zeros(&[PINV_WIDTH, 3, 7, 7]),
                Tensor::zeros(&[PINV_WIDTH]),
                Tensor::zeros(&[PINV_WIDTH, PINV_WIDTH, 5, 5]),
                Tensor::zeros(&[PINV_WIDTH]),
                Tensor::zeros(&[out, PINV_WIDTH, 3, 3]),
                Tensor::zeros(&[out]),
            ],
        }
    }

    pub fn from_params(scale: usize, params: Vec<Tensor>) -> Result<Self> {
        let want = Self::zeros(scale);
        if params.len() != want.params.len()
            || params.iter().zip(&want.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("learned pseudo-inverse parameter shapes"));
        }
        Ok(LearnedPinv { scale, params })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let h = leaky_relu(&conv2d(y, &p[0], Some(&p[1]), replicate())?, LEAKY_SLOPE);
        let h = leaky_relu(&conv2d(&h, &p[2], Some(&p[3]), replicate())?, LEAKY_SLOPE);
        pixel_shuffle(&conv2d(&h, &p[4], Some(&p[5]), replicate())?, self.scale)
    }

    /// Records the forward pass on `g` with the given parameter handles.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], y: Var) -> Result<Var> {
        let h = g.conv2d(y, params[0], Some(params[1]), replicate())?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = g.conv2d(h, params[2], Some(params[3]), replicate())?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = g.conv2d(h, params[4], Some(params[5]), replicate())?;
        g.pixel_shuffle(h, self.scale)
    }

    /// Network whose first two layers produce shifted copies of each color
    /// plane and whose last layer holds per-phase 9×9 filters fitted by least
    /// squares so that `A · net(y) ≈ y` on the given observations.
    pub fn least_squares_init(op: &DownsampleOperator, observations: &[Tensor]) -> Result<Self> {
        let s = op.scale();
        let phases = s * s;
        let mut net = Self::zeros(s);
        let taps = TAP_OFFSETS.len() * TAP_OFFSETS.len();
        for c in 0..3 {
            for (m, (oy, ox)) in offsets().enumerate() {
                let ch = c * taps + m;
                let w1 = net.params[0].data_mut();
                w1[((ch * 3 + c) * 7 + (3 + oy) as usize) * 7 + (3 + ox) as usize] = 1.0;
                net.params[1].data_mut()[ch] = LINEAR_BIAS;
                net.params[2].data_mut()[((ch * PINV_WIDTH + ch) * 5 + 2) * 5 + 2] = 1.0;
            }
        }

        let unknowns = phases * FOOTPRINT * FOOTPRINT;
        let mut gram = DMatrix::<f64>::zeros(unknowns, unknowns);
        let mut rhs = DVector::<f64>::zeros(unknowns);
        for y in observations {
            let (_, _, lh, lw) = y.dims4()?;
            for plane in y.data().chunks(lh * lw) {
                let design = plane_design(op, plane, lh, lw)?;
                let z = DMatrix::from_column_slice(lh * lw, unknowns, &design);
                gram += z.tr_mul(&z);
                rhs += z.tr_mul(&DVector::from_column_slice(plane));
            }
        }
        let ridge = 1e-10 * gram.trace() / unknowns as f64;
        for i in 0..unknowns {
            gram[(i, i)] += ridge;
        }
        let filters = gram
            .cholesky()
            .ok_or_else(|| Error::invalid("least-squares system is not positive definite"))?
            .solve(&rhs);

        let out = 3 * phases;
        for c in 0..3 {
            for k in 0..phases {
                let o = c * phases + k;
                let mut total = 0.0;
                for (m, (oy, ox)) in offsets().enumerate() {
                    for ty in -1..=1isize {
                        for tx in -1..=1isize {
                            let dy = (oy + ty + 4) as usize;
                            let dx = (ox + tx + 4) as usize;
                            let f = filters[k * FOOTPRINT * FOOTPRINT + dy * FOOTPRINT + dx];
                            let ch = c * taps + m;
                            let idx = ((o * PINV_WIDTH + ch) * 3 + (1 + ty) as usize) * 3 + (1 + tx) as usize;
                            net.params[4].data_mut()[idx] = f;
                            total += f;
                        }
                    }
                }
                net.params[5].data_mut()[o] = -LINEAR_BIAS * total;
            }
        }
        debug_assert_eq!(net.params[5].len(), out);
        Ok(net)
    }
}

fn offsets() -> impl Iterator<Item = (isize, isize)> {
    TAP_OFFSETS
        .iter()
        .flat_map(|&oy| TAP_OFFSETS.iter().map(move |&ox| (oy, ox)))
}

fn shift_replicate(p: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let si = (i as isize + dy).clamp(0, h as isize - 1) as usize;
        for j in 0..w {
            let sj = (j as isize + dx).clamp(0, w as isize - 1) as usize;
            out[i * w + j] = p[si * w + sj];
        }
    }
    out
}

/// Column-major design matrix: one column per (phase, footprint tap) holding
/// `A` applied to the high-resolution image that carries the network's
/// shifted copy of `plane` in that phase.
fn plane_design(op: &DownsampleOperator, plane: &[f64], lh: usize, lw: usize) -> Result<Vec<f64>> {
    let s = op.scale();
    let (h, w) = (lh * s, lw * s);
    let mut columns: Vec<(usize, usize, isize, isize)> = Vec::new();
    for k in 0..s * s {
        for dy in -4..=4isize {
            for dx in -4..=4isize {
                columns.push((k / s, k % s, dy, dx));
            }
        }
    }
    let cols: Vec<Vec<f64>> = columns
        .par_iter()
        .map(|&(pi, pj, dy, dx)| {
            // split the footprint offset the same way the network does
            let split = |d: isize| {
                let o = TAP_OFFSETS.iter().copied().min_by_key(|o| (d - o).abs()).unwrap();
                (o, d - o)
            };
            let (oy, ty) = split(dy);
            let (ox, tx) = split(dx);
            let first = shift_replicate(plane, lh, lw, oy, ox);
            let v = shift_replicate(&first, lh, lw, ty, tx);
            let mut hr = vec![0.0; h * w];
            for i in 0..lh {
                for j in 0..lw {
                    hr[(i * s + pi) * w + j * s + pj] = v[i * lw + j];
                }
            }
            op.apply(&Tensor::new(&[1, 1, h, w], hr)?).map(Tensor::into_data)
        })
        .collect::<Result<_>>()?;
    Ok(cols.concat())
}

#[derive(Clone, Debug)]
pub struct PinvFitConfig {
    /// Stop once the consistency loss drops below this value.
    pub target: f64,
    pub max_steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Number of procedural training images.
    pub images: usize,
    /// Low-resolution side of the training observations.
    pub lr_side: usize,
    pub seed: u64,
}

impl Default for PinvFitConfig {
    fn default() -> Self {
        PinvFitConfig {
            target: 1e-7,
            max_steps: 100,
            lr: 1e-6,
            batch: 8,
            images: 8,
            lr_side: 16,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PinvFit {
    pub pinv: LearnedPinv,
    /// Consistency loss on the full training set after fitting.
    pub loss: f64,
    pub steps: usize,
    pub converged: bool,
}

impl PinvFit {
    /// The fitted network, or [`Error::NotConverged`] carrying the residual.
    pub fn into_converged(self) -> Result<LearnedPinv> {
        if self.converged {
            Ok(self.pinv)
        } else {
            Err(Error::NotConverged {
                iterations: self.steps,
                residual: self.loss,
            })
        }
    }
}

/// Mean-reduced consistency loss
/// `mean((y − A A⁺ y)²) + mean((A⁺ y' − A⁺ A A⁺ y')²)`, recorded on `g`.
fn consistency_graph(
    g: &mut Graph,
    pinv: &LearnedPinv,
    params: &[Var],
    a: &Arc<DownsampleOperator>,
    y: &Tensor,
    y2: &Tensor,
) -> Result<Var> {
    let yv = g.input(y.clone());
    let x = pinv.forward_graph(g, params, yv)?;
    let ax = g.linear(x, a.clone())?;
    let d1 = g.sub(yv, ax)?;
    let sq1 = g.mul(d1, d1)?;
    let t1 = g.sum(sq1)?;
    let t1 = g.scale(t1, 1.0 / y.len() as f64)?;

    let yv2 = g.input(y2.clone());
    let q = pinv.forward_graph(g, params, yv2)?;
    let aq = g.linear(q, a.clone())?;
    let qq = pinv.forward_graph(g, params, aq)?;
    let d2 = g.sub(q, qq)?;
    let sq2 = g.mul(d2, d2)?;
    let t2 = g.sum(sq2)?;
    let n2 = g.value(q).len() as f64;
    let t2 = g.scale(t2, 1.0 / n2)?;
    g.add(t1, t2)
}

/// Consistency loss of `pinv` on observations `y` (both terms use `y`).
pub fn consistency_loss(op: &DownsampleOperator, pinv: &LearnedPinv, y: &Tensor) -> Result<f64> {
    let x = pinv.forward(y)?;
    let r = op.apply(&x)?;
    let t1 = r.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    let xx = pinv.forward(&r)?;
    let t2 = x.data().iter().zip(xx.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(t1 + t2)
}

/// Root-mean-square of `A A⁺ y − y`.
pub fn right_inverse_rms(op: &DownsampleOperator, pinv: &LearnedPinv, y: &Tensor) -> Result<f64> {
    let r = op.apply(&pinv.forward(y)?)?;
    Ok((r.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

/// Anchor observations of procedural images, stacked in one batch.
pub fn anchor_observations(op: &DownsampleOperator, seed: u64, count: usize, lr_side: usize) -> Result<Tensor> {
    let side = lr_side * op.scale();
    let images = procedural_corpus(seed, count, side, side)?;
    let ys: Vec<Tensor> = images.iter().map(|x| op.apply(x)).collect::<Result<_>>()?;
    Tensor::stack_batch(&ys)
}

/// Fits the learned pseudo-inverse: least-squares initialization followed by
/// Adam on the consistency loss until it drops below `cfg.target`.
pub fn fit_learned_pinv(op: &DownsampleOperator, cfg: &PinvFitConfig) -> Result<PinvFit> {
    let ys = anchor_observations(op, cfg.seed, cfg.images, cfg.lr_side)?;
    let mut pinv = LearnedPinv::least_squares_init(op, std::slice::from_ref(&ys))?;
    let mut loss = consistency_loss(op, &pinv, &ys)?;
    log::debug!("pseudo-inverse least-squares init: loss {loss:.3e}");
    let a = Arc::new(op.clone());
    let mut adam = Adam::new(AdamConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.images;
    let mut steps = 0;
    while loss >= cfg.target && steps < cfg.max_steps {
        let pick: Vec<usize> = (0..cfg.batch.min(n)).map(|_| rng.random_range(0..n)).collect();
        let other: Vec<usize> = (0..pick.len()).map(|_| rng.random_range(0..n)).collect();
        let gather = |ids: &[usize]| -> Result<Tensor> {
            let items: Vec<Tensor> = ids.iter().map(|&i| ys.batch_item(i)).collect::<Result<_>>()?;
            Tensor::stack_batch(&items)
        };
        let (y1, y2) = (gather(&pick)?, gather(&other)?);
        let mut g = Graph::new();
        let vars: Vec<Var> = pinv.params.iter().map(|p| g.param(p.clone())).collect();
        let l = consistency_graph(&mut g, &pinv, &vars, &a, &y1, &y2)?;
        g.backward(l)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.grad(v).cloned().ok_or_else(|| Error::Graph("missing gradient".into())))
            .collect::<Result<_>>()?;
        adam.step(&mut pinv.params, &grads, cfg.lr)?;
        steps += 1;
        if steps % 10 == 0 || steps == cfg.max_steps {
            loss = consistency_loss(op, &pinv, &ys)?;
            log::debug!("pseudo-inverse step {steps}: loss {loss:.3e}");
        }
    }
    if steps % 10 != 0 && steps != cfg.max_steps {
        loss = consistency_loss(op, &pinv, &ys)?;
    }
    Ok(PinvFit {
        pinv,
        loss,
        steps,
        converged: loss < cfg.target,
    })
}

/// Either realization of `A⁺`.
#[derive(Clone, Debug)]
pub enum PseudoInverse {
    Exact(Arc<ExactPinv>),
    Learned(Arc<LearnedPinv>),
}

impl PseudoInverse {
    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            PseudoInverse::Exact(p) => p.apply(y),
            PseudoInverse::Learned(p) => p.forward(y),
        }
    }

    /// Records `A⁺ y` on `g`; the learned network's weights enter as constants.
    pub fn apply_graph(&self, g: &mut Graph, y: Var) -> Result<Var> {
        match self {
            PseudoInverse::Exact(p) => g.linear(y, p.clone()),
            PseudoInverse::Learned(p) => {
                let vars: Vec<Var> = p.params.iter().map(|t| g.input(t.clone())).collect();
                p.forward_graph(g, &vars, y)
            }
        }
    }
}

/// Data-consistency projection `x + A⁺(y − A x)`.
pub fn project(op: &DownsampleOperator, pinv: &PseudoInverse, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut r = y.clone();
    let ax = op.apply(x)?;
    for (a, b) in r.data_mut().iter_mut().zip(ax.data()) {
        *a -= b;
    }
    let mut out = pinv.apply(&r)?;
    out.add_assign(x);
    Ok(out)
}
