//! The deblur → upsample → refine cascade and its losses.
//!
//! Sub-modules:
//! * extractor — aligned multi-scale features of `y` and its Wiener deconvolution `y_w`;
//! * deblur — LR dynamic filtering of `y_w` into `y_D`;
//! * upsample — HR dynamic filtering of `y_D`, projected onto `A x = y_D`;
//! * refine — HR dynamic filtering of `x_U` into the final `x̂`.
//!
//! All trunk features live on the LR grid; only filter coefficients and
//! residuals cross to HR through pixel shuffles.

pub mod arch;
pub mod config;
pub mod loss;
pub mod params;

use std::collections::HashMap;
use std::sync::Arc;

pub use arch::{Builder, ConvSpec, Init, Outputs};
pub use config::{Ablation, CascadeConfig, CHANNELS, FILTER_RADIUS, FILTER_TAPS};
pub use loss::{caduf_loss, LossTerms, LossWeights};
pub use params::{layout, parameter_count, CascadeParams};

use crate::degrade::Kernel;
use crate::error::{Error, Result};
use crate::operator::{DownsampleOperator, PseudoInverse};
use crate::tensor::ops::LEAKY_SLOPE;
use crate::tensor::{Graph, Tensor, Var};
use crate::wiener::wiener_auto;

/// Builder recording the cascade on an autodiff [`Graph`].
pub struct GraphBuilder<'a> {
    pub g: &'a mut Graph,
    params: HashMap<&'a str, Var>,
    op: Arc<DownsampleOperator>,
    pinv: &'a PseudoInverse,
}

impl<'a> GraphBuilder<'a> {
    /// `vars[i]` must hold `params.tensors()[i]`.
    pub fn new(
        g: &'a mut Graph,
        params: &'a CascadeParams,
        vars: &[Var],
        op: Arc<DownsampleOperator>,
        pinv: &'a PseudoInverse,
    ) -> Self {
        let params = params.names().iter().map(String::as_str).zip(vars.iter().copied()).collect();
        GraphBuilder { g, params, op, pinv }
    }

    fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
    }
}

impl Builder for GraphBuilder<'_> {
    type T = Var;

    fn conv(&mut self, x: Var, spec: ConvSpec<'_>) -> Result<Var> {
        let w = self.param(&format!("{}.w", spec.name))?;
        let b = self.param(&format!("{}.b", spec.name))?;
        self.g.conv2d(x, w, Some(b), spec.opts)
    }

    fn deform(&mut self, x: Var, spec: ConvSpec<'_>, offsets: Var, modulation: Var) -> Result<Var> {
        let w = self.param(&format!("{}.w", spec.name))?;
        let b = self.param(&format!("{}.b", spec.name))?;
        self.g.deformable_conv2d(x, w, Some(b), offsets, modulation)
    }

    fn leaky(&mut self, x: Var) -> Result<Var> {
        self.g.leaky_relu(x, LEAKY_SLOPE)
    }

    fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.g.sigmoid(x)
    }

    fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.g.scale(x, factor)
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.g.add(a, b)
    }

    fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.g.sub(a, b)
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.g.concat_channels(parts)
    }

    fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.g.narrow_channels(x, start, len)
    }

    fn shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        self.g.pixel_shuffle(x, s)
    }

    fn unshuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        self.g.pixel_unshuffle(x, s)
    }

    fn dynfilter(&mut self, z: Var, c: Var, r: Var, scale: usize) -> Result<Var> {
        self.g.dynamic_local_filter(z, c, r, FILTER_RADIUS, scale)
    }

    fn constant(&mut self, like: Var, values: &[f64]) -> Result<Var> {
        let (n, _, h, w) = self.g.value(like).dims4()?;
        let plane = h * w;
        let per = values.len() * plane;
        let t = Tensor::from_fn(&[n, values.len(), h, w], |i| values[(i % per) / plane]);
        Ok(self.g.input(t))
    }

    fn degrade(&mut self, x: Var) -> Result<Var> {
        self.g.linear(x, self.op.clone())
    }

    fn pinv(&mut self, y: Var) -> Result<Var> {
        self.pinv.apply_graph(self.g, y)
    }
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct CascadeOutput {
    /// Deconvolved input the cascade started from.
    pub y_w: Tensor,
    pub h_e: Tensor,
    /// Absent when the deblurring sub-module is ablated.
    pub h_d: Option<Tensor>,
    pub h_u: Tensor,
    pub y_d: Tensor,
    pub x_u: Tensor,
    pub x_hat: Tensor,
}

/// Per-sample padded Wiener deconvolution with the noise-adaptive `ε`.
pub fn wiener_inputs(y: &Tensor, klow: &[Kernel]) -> Result<Tensor> {
    let (n, ..) = y.dims4()?;
    if klow.len() != n {
        return Err(Error::shape(format!("{} kernels for a batch of {n}", klow.len())));
    }
    let items = (0..n)
        .map(|i| wiener_auto(&y.batch_item(i)?, &klow[i]))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

/// A configured cascade with its parameters and the fixed operator pair `(A, A⁺)`.
#[derive(Clone, Debug)]
pub struct Cascade {
    config: CascadeConfig,
    params: CascadeParams,
    op: Arc<DownsampleOperator>,
    pinv: PseudoInverse,
}

impl Cascade {
    pub fn new(config: CascadeConfig, params: CascadeParams, pinv: PseudoInverse) -> Result<Self> {
        params.check_layout(&config)?;
        let op = Arc::new(DownsampleOperator::anchor(config.scale)?);
        Ok(Cascade {
            config,
            params,
            op,
            pinv,
        })
    }

    /// Freshly initialized cascade.
    pub fn init(config: CascadeConfig, seed: u64, pinv: PseudoInverse) -> Result<Self> {
        let params = CascadeParams::init(&config, seed)?;
        Self::new(config, params, pinv)
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    /// Changes switches that do not alter the parameter layout (e.g. frozen alignment).
    pub fn set_config(&mut self, config: CascadeConfig) -> Result<()> {
        self.params.check_layout(&config)?;
        self.config = config;
        Ok(())
    }

    pub fn params(&self) -> &CascadeParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut CascadeParams {
        &mut self.params
    }

    pub fn operator(&self) -> &Arc<DownsampleOperator> {
        &self.op
    }

    pub fn pinv(&self) -> &PseudoInverse {
        &self.pinv
    }

    fn check_inputs(&self, y: &Tensor, y_w: &Tensor) -> Result<()> {
        let (_, c, h, w) = y.dims4()?;
        y.expect_same_shape(y_w)?;
        if c != CHANNELS {
            return Err(Error::shape(format!("expected {CHANNELS} channels, got {c}")));
        }
        self.config.check_lr_dims(h, w)
    }

    /// Records the cascade on `g`. `vars` are the graph handles of
    /// [`Cascade::params`], in order.
    pub fn record(&self, g: &mut Graph, vars: &[Var], y: Var, y_w: Var) -> Result<Outputs<Var>> {
        self.check_inputs(g.value(y), g.value(y_w))?;
        if vars.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} parameter handles for {} tensors",
                vars.len(),
                self.params.len()
            )));
        }
        let mut b = GraphBuilder::new(g, &self.params, vars, self.op.clone(), &self.pinv);
        arch::cascade(&mut b, &self.config, y, y_w)
    }

    /// Forward pass from `y` and its precomputed deconvolution.
    pub fn forward_with(&self, y: &Tensor, y_w: &Tensor) -> Result<CascadeOutput> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.input(t.clone())).collect();
        let (yv, wv) = (g.input(y.clone()), g.input(y_w.clone()));
        let out = self.record(&mut g, &vars, yv, wv)?;
        let take = |v: Var| g.value(v).clone();
        Ok(CascadeOutput {
            y_w: y_w.clone(),
            h_e: take(out.h_e),
            h_d: out.h_d.map(take),
            h_u: take(out.h_u),
            y_d: take(out.y_d),
            x_u: take(out.x_u),
            x_hat: take(out.x_hat),
        })
    }

    /// Full forward pass: deconvolves `y` with the per-sample LR kernels, then runs the cascade.
    pub fn forward(&self, y: &Tensor, klow: &[Kernel]) -> Result<CascadeOutput> {
        let y_w = if self.config.ablation.use_wiener_input {
            wiener_inputs(y, klow)?
        } else {
            y.clone()
        };
        self.forward_with(y, &y_w)
    }
}
