use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{walk, Init, ParamDecl, PinvCost, ShapeBuilder};
use super::config::{CascadeConfig, FILTER_TAPS};
use crate::error::{Error, Result};
use crate::tensor::ops::LEAKY_SLOPE;
use crate::tensor::Tensor;

/// Every tensor the cascade declares for `cfg`, in a fixed order.
///
/// The layout does not depend on the spatial size or on whether the
/// deformable alignment is frozen.
pub fn layout(cfg: &CascadeConfig) -> Result<Vec<ParamDecl>> {
    cfg.validate()?;
    let live = CascadeConfig {
        freeze_alignment: false,
        ..*cfg
    };
    let mut b = ShapeBuilder::new(cfg.scale, 0, PinvCost::Dense);
    walk(&live, 4, 4, &mut b)?;
    Ok(b.decls)
}

/// Named parameter tensors of one cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl CascadeParams {
    /// Fresh parameters: fan-in uniform weights, zero biases, identity heads.
    pub fn init(cfg: &CascadeConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (6.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut named = Vec::new();
        for d in layout(cfg)? {
            let is_bias = d.shape.len() == 1;
            let t = match (d.init, is_bias) {
                (Init::FanIn(f), false) => {
                    let bound = f * gain / (d.fan_in as f64).sqrt();
                    Tensor::from_fn(&d.shape, |_| rng.random_range(-bound..=bound))
                }
                (Init::IdentityFilter(s), true) => {
                    let sub = s * s;
                    Tensor::from_fn(&d.shape, |ch| if ch / sub == FILTER_TAPS / 2 { 1.0 } else { 0.0 })
                }
                _ => Tensor::zeros(&d.shape),
            };
            named.push((d.name, t));
        }
        Self::from_named(named)
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(named.len());
        let (mut names, mut tensors) = (Vec::new(), Vec::new());
        for (i, (n, t)) in named.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {n}")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(CascadeParams { names, tensors, index })
    }

    /// Checks names and shapes against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &CascadeConfig) -> Result<()> {
        let decls = layout(cfg)?;
        if decls.len() != self.names.len() {
            return Err(Error::shape(format!(
                "configuration needs {} parameter tensors, found {}",
                decls.len(),
                self.names.len()
            )));
        }
        for d in decls {
            let t = self
                .get(&d.name)
                .ok_or_else(|| Error::shape(format!("missing parameter {}", d.name)))?;
            if t.shape() != d.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Number of scalars the layout of `cfg` holds.
pub fn parameter_count(cfg: &CascadeConfig) -> Result<usize> {
    Ok(layout(cfg)?
        .iter()
        .map(|d| d.shape.iter().product::<usize>())
        .sum())
}
