//! Two-phase training of the cascade.
//!
//! Each step synthesizes (or reuses) a batch, records the forward pass and the
//! weighted Charbonnier loss on a fresh graph, backpropagates and applies one
//! Adam update. Phases differ only in learning rate and loss weights; the
//! optimizer moments carry over.

pub mod augment;
pub mod sampler;

use std::fmt;
use std::sync::Arc;

pub use augment::{augment, center_crop, crop, draw_rescale_factor, flip_horizontal, flip_vertical, random_crop, rot90, Augment};
pub use sampler::{Batch, Sample, Sampler};

use crate::cascade::loss::record_loss;
use crate::cascade::{Cascade, LossTerms, LossWeights};
use crate::degrade::{bicubic_upsample, Family};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::operator::KlowFitter;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};

pub const PAPER_BATCH: usize = 64;
pub const PAPER_BATCHES_PER_EPOCH: usize = 3000;
/// HR patch side is this multiple of the scale.
pub const PAPER_PATCH_FACTOR: usize = 48;
pub const PAPER_LR: f64 = 1e-4;
pub const PAPER_LR_LATE: f64 = 1e-5;
pub const PAPER_PHASE_A_EPOCHS: usize = 20;
pub const PAPER_PHASE_B_EPOCHS: usize = 120;
/// Epoch of phase B after which the learning rate drops.
pub const PAPER_LR_DROP_EPOCH: usize = 90;
pub const PHASE_A_WEIGHTS: LossWeights = LossWeights { alpha: 0.6, beta: 0.3 };
pub const PHASE_B_WEIGHTS: LossWeights = LossWeights { alpha: 0.1, beta: 0.1 };
/// Desk-profile learning rate; 1e-3 diverges when phase B shifts weight to the refinement term.
pub const DESK_LR: f64 = 3e-4;
/// Images held out of the corpus for per-epoch validation.
pub const VALIDATION_IMAGES: usize = 4;

/// Stream offset separating validation degradations from training ones.
const VALIDATION_STREAM: u64 = 1 << 62;

/// A run of epochs at a fixed learning rate and loss weighting.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    /// Label written to the loss log.
    pub name: String,
    pub epochs: usize,
    pub lr: f64,
    pub weights: LossWeights,
}

impl Phase {
    pub fn new(name: &str, epochs: usize, lr: f64, weights: LossWeights) -> Self {
        Phase {
            name: name.to_string(),
            epochs,
            lr,
            weights,
        }
    }
}

/// The two-phase schedule in compact form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhasePlan {
    pub epochs_a: usize,
    pub epochs_b: usize,
    /// Epoch of phase B after which `lr_late` replaces `lr`.
    pub lr_drop: usize,
    pub lr: f64,
    pub lr_late: f64,
    pub weights_a: LossWeights,
    pub weights_b: LossWeights,
}

impl PhasePlan {
    pub fn paper() -> Self {
        PhasePlan {
            epochs_a: PAPER_PHASE_A_EPOCHS,
            epochs_b: PAPER_PHASE_B_EPOCHS,
            lr_drop: PAPER_LR_DROP_EPOCH,
            lr: PAPER_LR,
            lr_late: PAPER_LR_LATE,
            weights_a: PHASE_A_WEIGHTS,
            weights_b: PHASE_B_WEIGHTS,
        }
    }

    pub fn desk() -> Self {
        PhasePlan {
            epochs_a: 4,
            epochs_b: 16,
            lr_drop: 12,
            lr: DESK_LR,
            lr_late: DESK_LR / 10.0,
            ..Self::paper()
        }
    }

    /// Expanded phases; empty ones are left out.
    pub fn phases(&self) -> Vec<Phase> {
        let drop = self.lr_drop.min(self.epochs_b);
        [
            Phase::new("A", self.epochs_a, self.lr, self.weights_a),
            Phase::new("B", drop, self.lr, self.weights_b),
            Phase::new("B", self.epochs_b - drop, self.lr_late, self.weights_b),
        ]
        .into_iter()
        .filter(|p| p.epochs > 0)
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub family: Family,
    pub phases: Vec<Phase>,
    pub batch: usize,
    pub batches_per_epoch: usize,
    /// HR patch side.
    pub patch: usize,
    pub augment: Augment,
    pub seed: u64,
    /// When set, this many samples are synthesized once and cycled through;
    /// otherwise every batch is freshly drawn.
    pub pool: Option<usize>,
    /// Images held out of the corpus for validation (only when the corpus has more).
    pub validation: usize,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// The published schedule: 20 epochs emphasizing the early terms, then 120
    /// with the learning rate dropping after epoch 90.
    pub fn paper(scale: usize) -> Self {
        TrainConfig {
            family: Family::GaussianSM,
            phases: PhasePlan::paper().phases(),
            batch: PAPER_BATCH,
            batches_per_epoch: PAPER_BATCHES_PER_EPOCH,
            patch: PAPER_PATCH_FACTOR * scale,
            augment: Augment::ALL,
            seed: 0,
            pool: None,
            validation: VALIDATION_IMAGES,
            adam: AdamConfig::default(),
        }
    }

    /// 2000 steps over a fixed pool of 8 small patches, with the same
    /// two-phase shape compressed and a larger learning rate.
    pub fn desk(scale: usize) -> Self {
        TrainConfig {
            family: Family::GaussianSM,
            phases: PhasePlan::desk().phases(),
            batch: 4,
            batches_per_epoch: 100,
            patch: 16 * scale,
            augment: Augment::ALL,
            seed: 0,
            pool: Some(8),
            validation: VALIDATION_IMAGES,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self, scale: usize) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::invalid("training needs at least one phase"));
        }
        for p in &self.phases {
            p.weights.validate()?;
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(Error::invalid(format!("phase {} has learning rate {}", p.name, p.lr)));
            }
        }
        if self.batch == 0 || self.batches_per_epoch == 0 {
            return Err(Error::invalid("batch size and batches per epoch must be positive"));
        }
        if self.patch == 0 || self.patch % scale != 0 {
            return Err(Error::invalid(format!(
                "patch side {} is not a positive multiple of the scale {scale}",
                self.patch
            )));
        }
        if self.pool == Some(0) {
            return Err(Error::invalid("sample pool must not be empty"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs() * self.batches_per_epoch
    }
}

/// Human-readable schedule, one line per phase.
pub struct Schedule<'a>(pub &'a TrainConfig);

impl fmt::Display for Schedule<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cfg = self.0;
        writeln!(
            f,
            "{} epochs x {} batches of {} ({}-pixel HR patches)",
            cfg.total_epochs(),
            cfg.batches_per_epoch,
            cfg.batch,
            cfg.patch
        )?;
        let mut start = 0;
        for p in &cfg.phases {
            writeln!(
                f,
                "  phase {}: epochs {}-{}  lr {:e}  alpha {}  beta {}",
                p.name,
                start + 1,
                start + p.epochs,
                p.lr,
                p.weights.alpha,
                p.weights.beta
            )?;
            start += p.epochs;
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str = "step,phase,lr,L_D,L_U,L_F,total";

/// One optimizer step. Loss terms are per value (per LR or HR pixel and channel).
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub phase: String,
    pub lr: f64,
    pub loss: LossTerms,
    /// L2 norm of the full gradient before the update.
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.phase, self.lr, self.loss.deblur, self.loss.upsample, self.loss.refine, self.loss.total
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: String,
    /// Mean per-value total loss over the epoch.
    pub loss: f64,
    /// Mean PSNR of `x̂` on the validation samples.
    pub val_psnr: Option<f64>,
}

pub enum Event<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

/// Mean PSNR of the model output and of the bicubic upsampling of `y`.
pub fn mean_psnr(model: &Cascade, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let s = model.config().scale;
    let (mut ours, mut bicubic) = (0.0, 0.0);
    for sample in samples {
        let out = model.forward_with(&sample.pair.y, &sample.y_w)?;
        let x = &sample.pair.x;
        ours += psnr(&out.x_hat.map(|v| v.clamp(0.0, 1.0)), x, 1.0)?;
        bicubic += psnr(&bicubic_upsample(&sample.pair.y, s)?.map(|v| v.clamp(0.0, 1.0)), x, 1.0)?;
    }
    let n = samples.len() as f64;
    Ok((ours / n, bicubic / n))
}

pub struct Trainer {
    model: Cascade,
    cfg: TrainConfig,
    sampler: Sampler,
    pool: Option<Vec<Sample>>,
    validation: Vec<Sample>,
    adam: AdamState,
    step: u64,
}

impl Trainer {
    /// Splits off the validation images and prepares the sample pool.
    pub fn new(model: Cascade, corpus: Vec<Tensor>, cfg: TrainConfig) -> Result<Self> {
        let scale = model.config().scale;
        cfg.validate(scale)?;
        let fitter = Arc::new(KlowFitter::standard(scale)?);
        Self::with_fitter(model, corpus, cfg, fitter)
    }

    pub fn with_fitter(model: Cascade, mut corpus: Vec<Tensor>, cfg: TrainConfig, fitter: Arc<KlowFitter>) -> Result<Self> {
        let scale = model.config().scale;
        cfg.validate(scale)?;
        if corpus.is_empty() {
            return Err(Error::invalid("the training corpus is empty"));
        }
        let held_out = if corpus.len() > cfg.validation {
            corpus.split_off(corpus.len() - cfg.validation)
        } else {
            Vec::new()
        };
        let ablation = model.config().ablation;
        let sampler = Sampler::new(corpus, cfg.family, scale, cfg.patch, cfg.augment, cfg.seed, ablation, fitter.clone())?;
        let validation = if held_out.is_empty() {
            Vec::new()
        } else {
            let val = Sampler::new(held_out, cfg.family, scale, cfg.patch, Augment::NONE, cfg.seed, ablation, fitter)?;
            (0..val.images().len())
                .map(|i| val.fixed(i, VALIDATION_STREAM + i as u64))
                .collect::<Result<Vec<_>>>()?
        };
        let pool = cfg.pool.map(|n| sampler.samples(0, n)).transpose()?;
        Ok(Trainer {
            model,
            cfg,
            sampler,
            pool,
            validation,
            adam: AdamState::new(),
            step: 0,
        })
    }

    pub fn model(&self) -> &Cascade {
        &self.model
    }

    pub fn into_model(self) -> Cascade {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.adam
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn pool(&self) -> Option<&[Sample]> {
        self.pool.as_deref()
    }

    pub fn validation(&self) -> &[Sample] {
        &self.validation
    }

    /// Batch number `index`: cycled from the pool, or freshly synthesized.
    pub fn batch(&self, index: u64) -> Result<Batch> {
        match &self.pool {
            Some(pool) => {
                let b = self.cfg.batch as u64;
                let picks: Vec<&Sample> = (0..b)
                    .map(|i| &pool[((index * b + i) % pool.len() as u64) as usize])
                    .collect();
                Batch::stack(&picks)
            }
            None => self.sampler.batch(index, self.cfg.batch),
        }
    }

    /// One Adam update on `batch`.
    pub fn step(&mut self, batch: &Batch, phase: &Phase) -> Result<StepRecord> {
        let ablation = self.model.config().ablation;
        let mut g = Graph::new();
        let vars: Vec<Var> = self.model.params().tensors().iter().map(|t| g.param(t.clone())).collect();
        let y = g.input(batch.y.clone());
        let y_w = g.input(batch.y_w.clone());
        let target_d = g.input(batch.target_d.clone());
        let x = g.input(batch.x.clone());
        let out = self.model.record(&mut g, &vars, y, y_w)?;
        let loss = record_loss(&mut g, &out, target_d, x, phase.weights, &ablation)?;
        let terms = loss
            .values(&g)
            .per_value(batch.target_d.len(), batch.x.len());
        let step = self.step;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!("loss is {} at step {step} (phase {})", terms.total, phase.name)));
        }
        g.backward(loss.total)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(self.model.params().tensors())
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let grad_norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {grad_norm} at step {step} (phase {})", phase.name)));
        }
        adam_step(self.model.params_mut().tensors_mut(), &grads, &mut self.adam, phase.lr, &self.cfg.adam)?;
        self.step += 1;
        log::debug!("step {step}: loss {:e}, gradient norm {grad_norm:e}", terms.total);
        Ok(StepRecord {
            step,
            phase: phase.name.clone(),
            lr: phase.lr,
            loss: terms,
            grad_norm,
        })
    }

    /// Mean validation PSNR of `x̂`, if there is a validation split.
    pub fn validate(&self) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        Ok(Some(mean_psnr(&self.model, &self.validation)?.0))
    }

    /// Runs every phase, reporting each step and epoch to `observe`.
    pub fn run(&mut self, mut observe: impl FnMut(Event<'_>)) -> Result<()> {
        let phases = self.cfg.phases.clone();
        let mut epoch = 0;
        for phase in &phases {
            for _ in 0..phase.epochs {
                epoch += 1;
                let mut total = 0.0;
                for _ in 0..self.cfg.batches_per_epoch {
                    let batch = self.batch(self.step)?;
                    let rec = self.step(&batch, phase)?;
                    total += rec.loss.total;
                    observe(Event::Step(&rec));
                }
                let rec = EpochRecord {
                    epoch,
                    phase: phase.name.clone(),
                    loss: total / self.cfg.batches_per_epoch as f64,
                    val_psnr: self.validate()?,
                };
                log::info!("epoch {epoch} (phase {}): loss {:e}, validation PSNR {:?}", rec.phase, rec.loss, rec.val_psnr);
                observe(Event::Epoch(&rec));
            }
        }
        Ok(())
    }
}
