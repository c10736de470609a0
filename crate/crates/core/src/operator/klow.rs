use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::procedural_corpus;
use crate::degrade::{bicubic_downsample, blur, BlurKernel, Boundary, Kernel};
use crate::error::{Error, Result};
use crate::tensor::ops::{leaky_relu, LEAKY_SLOPE};
use crate::tensor::{matmul, Adam, AdamConfig, Graph, Tensor, Var};

/// Tikhonov weight added to the normal equations, relative to their mean diagonal.
pub const KLOW_RIDGE: f64 = 1e-10;

/// Side of the fitted low-resolution kernel: `⌈side/s⌉` rounded up to odd, plus 2.
pub fn klow_side(kernel_side: usize, s: usize) -> usize {
    let l = kernel_side.div_ceil(s);
    (if l % 2 == 0 { l + 1 } else { l }) + 2
}

/// Low-resolution rows kept away from each border when fitting a kernel of side `l`.
fn margin(l: usize) -> usize {
    l / 2 + 2
}

/// Low-resolution side of the default fitting patches.
pub const PATCH_LR_SIDE: usize = 48;
pub const PATCH_COUNT: usize = 3;
const PATCH_SEED: u64 = 0x6b6c;

/// Normal equations of `min_f Σ (r − d ⊛ f)²` over the interior of a fixed
/// patch set, for one support side. Only the right-hand side depends on the
/// blur kernel, so the system is shared across kernels.
pub struct KlowSystem {
    side: usize,
    scale: usize,
    gram: DMatrix<f64>,
    cholesky: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    rows: usize,
}

/// Interior target values and normal-equation right-hand side for one kernel.
pub struct KlowTarget {
    pub rhs: DVector<f64>,
    /// `Σ r²` over the interior.
    pub energy: f64,
}

impl KlowSystem {
    fn new(patches: &[Tensor], scale: usize, side: usize) -> Result<Self> {
        let t = side * side;
        let m = margin(side);
        let mut gram = DMatrix::<f64>::zeros(t, t);
        let mut rows = 0;
        for x in patches {
            let d = bicubic_downsample(x, scale)?;
            let (_, _, lh, lw) = d.dims4()?;
            if lh <= 2 * m || lw <= 2 * m {
                return Err(Error::invalid(format!(
                    "fitting patches of {lh}x{lw} are too small for a {side}x{side} kernel"
                )));
            }
            for plane in d.data().chunks(lh * lw) {
                let z = design(plane, lh, lw, side, m);
                gram += z.tr_mul(&z);
                rows += z.nrows();
            }
        }
        let mut reg = gram.clone();
        let ridge = KLOW_RIDGE * gram.trace() / t as f64;
        for i in 0..t {
            reg[(i, i)] += ridge;
        }
        let cholesky = reg
            .cholesky()
            .ok_or_else(|| Error::invalid("k^L normal equations are not positive definite"))?;
        Ok(KlowSystem { side, scale, gram, cholesky, rows })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of residual terms (interior pixels over all planes).
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn target(&self, patches: &[Tensor], k: &Kernel) -> Result<KlowTarget> {
        let m = margin(self.side);
        let mut rhs = DVector::zeros(self.side * self.side);
        let mut energy = 0.0;
        for x in patches {
            let d = bicubic_downsample(x, self.scale)?;
            let r = bicubic_downsample(&blur(x, k, Boundary::Replicate)?, self.scale)?;
            let (_, _, lh, lw) = d.dims4()?;
            for (dp, rp) in d.data().chunks(lh * lw).zip(r.data().chunks(lh * lw)) {
                let z = design(dp, lh, lw, self.side, m);
                let rv = DVector::from_iterator(
                    z.nrows(),
                    (m..lh - m).flat_map(|i| (m..lw - m).map(move |j| rp[i * lw + j])),
                );
                rhs += z.tr_mul(&rv);
                energy += rv.norm_squared();
            }
        }
        Ok(KlowTarget { rhs, energy })
    }

    pub fn solve(&self, target: &KlowTarget) -> DVector<f64> {
        self.cholesky.solve(&target.rhs)
    }

    /// Mean squared residual of taps `f` (row-major, `side × side`).
    pub fn mean_squared_residual(&self, target: &KlowTarget, f: &DVector<f64>) -> f64 {
        let q = f.dot(&(&self.gram * f)) - 2.0 * f.dot(&target.rhs) + target.energy;
        q.max(0.0) / self.rows as f64
    }
}

/// Rows: interior pixels; columns: taps of a true-convolution kernel.
fn design(plane: &[f64], lh: usize, lw: usize, side: usize, m: usize) -> DMatrix<f64> {
    let c = (side / 2) as isize;
    let (ih, iw) = (lh - 2 * m, lw - 2 * m);
    DMatrix::from_fn(ih * iw, side * side, |row, col| {
        let (i, j) = ((row / iw + m) as isize, (row % iw + m) as isize);
        let (a, b) = ((col / side) as isize, (col % side) as isize);
        plane[((i - a + c) as usize) * lw + (j - b + c) as usize]
    })
}

/// Least-squares k^L fitting against a fixed set of procedural patches, with
/// the normal equations cached per support side.
pub struct KlowFitter {
    scale: usize,
    patches: Vec<Tensor>,
    systems: Mutex<HashMap<usize, Arc<KlowSystem>>>,
}

#[derive(Clone, Debug)]
pub struct KlowFit {
    pub kernel: Kernel,
    /// Per-pixel RMS of `[x ⊛ k]↓s − (x↓s) ⊛ k^L` over the fitting interior.
    pub rms: f64,
}

impl KlowFitter {
    pub fn new(scale: usize, patches: Vec<Tensor>) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::invalid("k^L fitting needs at least one patch"));
        }
        Ok(KlowFitter {
            scale,
            patches,
            systems: Mutex::new(HashMap::new()),
        })
    }

    /// Fitter over the standard procedural patch set.
    pub fn standard(scale: usize) -> Result<Self> {
        let side = PATCH_LR_SIDE * scale;
        Self::new(scale, procedural_corpus(PATCH_SEED, PATCH_COUNT, side, side)?)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn patches(&self) -> &[Tensor] {
        &self.patches
    }

    pub fn system(&self, side: usize) -> Result<Arc<KlowSystem>> {
        if let Some(sys) = self.systems.lock().expect("k^L cache poisoned").get(&side) {
            return Ok(sys.clone());
        }
        let sys = Arc::new(KlowSystem::new(&self.patches, self.scale, side)?);
        self.systems
            .lock()
            .expect("k^L cache poisoned")
            .insert(side, sys.clone());
        Ok(sys)
    }

    /// Fits with the standard support side for `k`.
    pub fn fit(&self, k: &BlurKernel) -> Result<KlowFit> {
        let side = klow_side(k.height().max(k.width()), self.scale);
        self.fit_with_side(k, side)
    }

    pub fn fit_with_side(&self, k: &Kernel, side: usize) -> Result<KlowFit> {
        let sys = self.system(side)?;
        let target = sys.target(&self.patches, k)?;
        let f = sys.solve(&target);
        let rms = sys.mean_squared_residual(&target, &f).sqrt();
        Ok(KlowFit {
            kernel: Kernel::new(side, side, f.iter().copied().collect())?,
            rms,
        })
    }

    /// RMS residual of arbitrary taps under the same objective.
    pub fn residual(&self, k: &Kernel, klow: &Kernel) -> Result<f64> {
        if klow.height() != klow.width() {
            return Err(Error::invalid("k^L must be square"));
        }
        let sys = self.system(klow.height())?;
        let target = sys.target(&self.patches, k)?;
        let f = DVector::from_column_slice(klow.taps());
        Ok(sys.mean_squared_residual(&target, &f).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct KlowMlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Eigenvalue floor of the output preconditioner, relative to the mean
    /// eigenvalue of the normalized patch Gram matrix.
    pub precondition_floor: f64,
    /// Eigenvalue floor of the input whitening, relative to the mean
    /// eigenvalue of the training-kernel covariance.
    pub whitening_floor: f64,
    pub seed: u64,
}

impl Default for KlowMlpConfig {
    fn default() -> Self {
        KlowMlpConfig {
            hidden: 2048,
            epochs: 60,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch: 8,
            precondition_floor: 1e-4,
            whitening_floor: 1e-6,
            seed: 0x6d6c70,
        }
    }
}

/// Factor applied to centered, whitened kernels before the first layer; small
/// inputs keep the hidden activations (and so Adam's readout jitter) small.
const INPUT_SCALE: f64 = 0.03;

/// One-hidden-layer perceptron mapping a (zero-padded) blur kernel to k^L.
///
/// Both ends carry fixed linear transforms derived at fit time. Inputs are
/// centered and whitened with the training-kernel covariance, and the network
/// emits coordinates `o` with taps `f = o·P`, `P = (G/n + μI)^{-1/2}` from the
/// fitting patches. Together they make the badly conditioned tap-space
/// objective close to isotropic.
#[derive(Clone, Debug, PartialEq)]
pub struct KlowMlp {
    input_side: usize,
    output_side: usize,
    input_scale: f64,
    /// Mean training input and symmetric whitening transform applied before the first layer.
    input_mean: Tensor,
    input_whitening: Tensor,
    /// `[w1 (in × hidden), b1, w2 (hidden × out), b2]`.
    params: Vec<Tensor>,
    /// Symmetric `out × out` output basis `P`.
    basis: Tensor,
}

impl KlowMlp {
    /// Fits a network on `kernels` (at least two) against the fitter's
    /// objective. The input covers the largest kernel; the output side
    /// follows the usual support rule. Returns the model and its final mean
    /// squared residual.
    pub fn fit(fitter: &KlowFitter, kernels: &[Kernel], cfg: &KlowMlpConfig) -> Result<(Self, f64)> {
        if kernels.len() < 2 {
            return Err(Error::invalid("k^L network fitting needs at least two kernels"));
        }
        let input_side = kernels.iter().map(|k| k.height().max(k.width())).max().unwrap_or(1);
        let output_side = klow_side(input_side, fitter.scale());
        let sys = fitter.system(output_side)?;
        let nout = output_side * output_side;
        let (nin, hidden) = (input_side * input_side, cfg.hidden);

        let gram = sys.gram() / sys.rows() as f64;
        let mu = cfg.precondition_floor * gram.trace() / nout as f64;
        let eig = SymmetricEigen::new(gram);
        let shaped = |f: &dyn Fn(f64) -> f64| {
            let d = DVector::from_iterator(nout, eig.eigenvalues.iter().map(|&l| f(l.max(0.0) + mu)));
            &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
        };
        let p = shaped(&|l| 1.0 / l.sqrt());
        let p_inv = shaped(&|l| l.sqrt());

        let targets: Vec<KlowTarget> = kernels
            .iter()
            .map(|k| sys.target(fitter.patches(), k))
            .collect::<Result<_>>()?;
        // output bias starts at the coordinates of the mean kernel's least-squares taps
        let mut mean = DVector::zeros(nout);
        for t in &targets {
            mean += &t.rhs;
        }
        mean /= targets.len() as f64;
        let f_mean = sys.solve(&KlowTarget { rhs: mean, energy: 0.0 });
        let o_mean = &p_inv * f_mean;

        let raw: Vec<Vec<f64>> = kernels
            .iter()
            .map(|k| Ok(k.resized(input_side, input_side)?.taps().to_vec()))
            .collect::<Result<_>>()?;
        let mut xm = DVector::zeros(nin);
        for r in &raw {
            xm += DVector::from_column_slice(r);
        }
        xm /= raw.len() as f64;
        let mut cov = DMatrix::zeros(nin, nin);
        for r in &raw {
            let d = DVector::from_column_slice(r) - &xm;
            cov += &d * d.transpose();
        }
        cov /= raw.len() as f64;
        let nu = cfg.whitening_floor * cov.trace() / nin as f64;
        let ceig = SymmetricEigen::new(cov);
        let wd = DVector::from_iterator(nin, ceig.eigenvalues.iter().map(|&l| 1.0 / (l.max(0.0) + nu).sqrt()));
        let whitening = &ceig.eigenvectors * DMatrix::from_diagonal(&wd) * ceig.eigenvectors.transpose();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal = |n: usize, std: f64| {
            Tensor::from_fn(&[n], |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        let w1 = normal(nin * hidden, (2.0 / nin as f64).sqrt()).reshape(&[nin, hidden])?;
        let w2 = Tensor::zeros(&[hidden, nout]);
        let mut net = KlowMlp {
            input_side,
            output_side,
            input_scale: INPUT_SCALE,
            params: vec![
                w1,
                Tensor::zeros(&[hidden]),
                w2,
                Tensor::new(&[nout], o_mean.as_slice().to_vec())?,
            ],
            basis: Tensor::new(&[nout, nout], p.as_slice().to_vec())?,
            input_mean: Tensor::new(&[nin], xm.as_slice().to_vec())?,
            input_whitening: Tensor::new(&[nin, nin], whitening.as_slice().to_vec())?,
        };
        let loss = net.train(&sys, &targets, kernels, cfg)?;
        Ok((net, loss))
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn output_side(&self) -> usize {
        self.output_side
    }

    fn inputs(&self, kernels: &[&Kernel]) -> Result<Tensor> {
        let nin = self.input_side * self.input_side;
        let mut data = Vec::with_capacity(kernels.len() * nin);
        for k in kernels {
            if k.height() > self.input_side || k.width() > self.input_side {
                return Err(Error::invalid(format!(
                    "{}x{} kernel exceeds the network input {}x{}",
                    k.height(),
                    k.width(),
                    self.input_side,
                    self.input_side
                )));
            }
            let padded = k.resized(self.input_side, self.input_side)?;
            data.extend(padded.taps().iter().zip(self.input_mean.data()).map(|(t, m)| (t - m) * self.input_scale));
        }
        matmul(&Tensor::new(&[kernels.len(), nin], data)?, &self.input_whitening, false, false)
    }

    fn forward_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, vars[0])?;
        let h = g.add_bias(h, vars[1])?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let o = g.matmul(h, vars[2])?;
        let o = g.add_bias(o, vars[3])?;
        let p = g.input(self.basis.clone());
        g.matmul(o, p)
    }

    pub fn predict(&self, k: &Kernel) -> Result<Kernel> {
        let x = self.inputs(&[k])?;
        let h = add_rows(matmul(&x, &self.params[0], false, false)?, &self.params[1]);
        let h = leaky_relu(&h, LEAKY_SLOPE);
        let o = add_rows(matmul(&h, &self.params[2], false, false)?, &self.params[3]);
        let f = matmul(&o, &self.basis, false, false)?;
        Kernel::new(self.output_side, self.output_side, f.into_data())
    }

    fn train(
        &mut self,
        sys: &KlowSystem,
        targets: &[KlowTarget],
        kernels: &[Kernel],
        cfg: &KlowMlpConfig,
    ) -> Result<f64> {
        let nout = self.output_side * self.output_side;
        let gram = Tensor::new(&[nout, nout], sys.gram().as_slice().to_vec())?;
        let mut adam = Adam::new(AdamConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151);
        let mut order: Vec<usize> = (0..kernels.len()).collect();
        let batch = cfg.batch.max(1);
        let batches = kernels.len().div_ceil(batch);
        let total_steps = (cfg.epochs * batches).max(1) as f64;
        let mut step = 0usize;
        let mut last = f64::NAN;
        for epoch in 0..cfg.epochs {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                let ks: Vec<&Kernel> = chunk.iter().map(|&i| &kernels[i]).collect();
                let x = self.inputs(&ks)?;
                let mut rhs = Vec::with_capacity(chunk.len() * nout);
                let mut energy = 0.0;
                for &i in chunk {
                    rhs.extend(targets[i].rhs.iter());
                    energy += targets[i].energy;
                }
                // summed over residual pixels (as in the objective), averaged over kernels
                let norm = 1.0 / chunk.len() as f64;
                let mut g = Graph::new();
                let vars: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
                let xv = g.input(x);
                let f = self.forward_graph(&mut g, &vars, xv)?;
                // Σ_b fᵀ G f − 2 bᵀ f + Σ r²
                let gv = g.input(gram.clone());
                let gf = g.matmul(f, gv)?;
                let quad = g.mul(f, gf)?;
                let quad = g.sum(quad)?;
                let bv = g.input(Tensor::new(&[chunk.len(), nout], rhs)?);
                let lin = g.mul(f, bv)?;
                let lin = g.sum(lin)?;
                let lin = g.scale(lin, -2.0)?;
                let loss = g.add(quad, lin)?;
                let loss = g.scale(loss, norm)?;
                g.backward(loss)?;
                let value = g.value(loss).item() + energy * norm;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("k^L network loss at epoch {epoch}")));
                }
                total += value;
                let grads: Vec<Tensor> = vars
                    .iter()
                    .map(|&v| g.grad(v).cloned().ok_or_else(|| Error::Graph("missing gradient".into())))
                    .collect::<Result<_>>()?;
                // cosine decay from the base rate to zero over the run
                let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
                adam.step(&mut self.params, &grads, lr)?;
                step += 1;
            }
            last = total / (batches as f64 * sys.rows() as f64);
            log::debug!("k^L network epoch {epoch}: loss {last:.3e}");
        }
        Ok(last)
    }
}

fn add_rows(mut x: Tensor, b: &Tensor) -> Tensor {
    let n = b.len();
    for row in x.data_mut().chunks_mut(n) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    x
}
