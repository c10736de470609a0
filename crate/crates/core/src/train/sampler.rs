//! Deterministic synthesis of training samples and batches.
//!
//! Sample `i` draws everything (image, augmentation, crop, degradation) from
//! its own rng stream keyed by `(seed, i)`, so batches do not depend on how
//! many threads synthesize them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{augment, center_crop, random_crop, Augment};
use crate::cascade::{wiener_inputs, Ablation};
use crate::degrade::{bicubic_downsample, sample_spec, synthesize, DegradationSpec, Family, SamplePair};
use crate::error::{Error, Result};
use crate::operator::KlowFitter;
use crate::tensor::Tensor;

/// A synthesized pair plus the cascade inputs and the deblurring target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub pair: SamplePair,
    /// Wiener deconvolution of `y` (or `y` itself when the Wiener input is ablated).
    pub y_w: Tensor,
    /// Target of the deblurring term: the anchor image, or the plain
    /// bicubic reduction of `x` without privileged information.
    pub target_d: Tensor,
}

/// Samples stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub y: Tensor,
    pub y_w: Tensor,
    pub x: Tensor,
    pub target_d: Tensor,
    pub specs: Vec<DegradationSpec>,
}

impl Batch {
    pub fn stack(samples: &[&Sample]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let cat = |f: &dyn Fn(&Sample) -> &Tensor| {
            Tensor::stack_batch(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
        };
        Ok(Batch {
            y: cat(&|s| &s.pair.y)?,
            y_w: cat(&|s| &s.y_w)?,
            x: cat(&|s| &s.pair.x)?,
            target_d: cat(&|s| &s.target_d)?,
            specs: samples.iter().map(|s| s.pair.spec).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Everything needed to turn a sample index into a [`Sample`].
#[derive(Clone)]
pub struct Sampler {
    images: Arc<Vec<Tensor>>,
    pub family: Family,
    pub scale: usize,
    /// HR patch side.
    pub patch: usize,
    pub augment: Augment,
    pub seed: u64,
    pub ablation: Ablation,
    fitter: Arc<KlowFitter>,
}

impl Sampler {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        images: Vec<Tensor>,
        family: Family,
        scale: usize,
        patch: usize,
        augment: Augment,
        seed: u64,
        ablation: Ablation,
        fitter: Arc<KlowFitter>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("the training corpus is empty"));
        }
        if patch == 0 || patch % scale != 0 {
            return Err(Error::invalid(format!("patch side {patch} is not a positive multiple of {scale}")));
        }
        if fitter.scale() != scale {
            return Err(Error::invalid("k^L fitter scale differs from the sampler scale"));
        }
        Ok(Sampler {
            images: Arc::new(images),
            family,
            scale,
            patch,
            augment,
            seed,
            ablation,
            fitter,
        })
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    fn finish(&self, patch: &Tensor, spec: &DegradationSpec) -> Result<Sample> {
        let pair = synthesize(patch, spec, |k, _| Ok(self.fitter.fit(k)?.kernel))?;
        let y_w = if self.ablation.use_wiener_input {
            wiener_inputs(&pair.y, std::slice::from_ref(&pair.klow))?
        } else {
            pair.y.clone()
        };
        let target_d = if self.ablation.use_pi_anchor {
            pair.anchor.clone()
        } else {
            bicubic_downsample(&pair.x, self.scale)?
        };
        Ok(Sample { pair, y_w, target_d })
    }

    /// Training sample `index`: random image, augmentation, crop and degradation.
    pub fn sample(&self, index: u64) -> Result<Sample> {
        let mut rng = self.rng(index);
        let image = &self.images[rng.random_range(0..self.images.len())];
        let augmented = augment(image, &mut rng, self.augment, self.patch)?;
        let patch = random_crop(&augmented, self.patch, &mut rng)?;
        let spec = sample_spec(&mut rng, self.family, self.scale)?;
        self.finish(&patch, &spec)
    }

    /// Un-augmented center crop of image `image` with a degradation drawn
    /// from stream `index`; used for fixed validation samples.
    pub fn fixed(&self, image: usize, index: u64) -> Result<Sample> {
        let img = self
            .images
            .get(image)
            .ok_or_else(|| Error::invalid(format!("no image {image} in the corpus")))?;
        let mut rng = self.rng(index);
        let patch = center_crop(img, self.patch)?;
        let spec = sample_spec(&mut rng, self.family, self.scale)?;
        self.finish(&patch, &spec)
    }

    /// Samples `first .. first + count`, synthesized in parallel.
    pub fn samples(&self, first: u64, count: usize) -> Result<Vec<Sample>> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| self.sample(first + i))
            .collect()
    }

    /// Batch number `index` of `size` consecutive samples.
    pub fn batch(&self, index: u64, size: usize) -> Result<Batch> {
        let samples = self.samples(index * size as u64, size)?;
        Batch::stack(&samples.iter().collect::<Vec<_>>())
    }
}
