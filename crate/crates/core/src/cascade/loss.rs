use super::arch::Outputs;
use super::config::Ablation;
use super::CascadeOutput;
use crate::error::{Error, Result};
use crate::tensor::ops::{charbonnier, CHARBONNIER_EPS};
use crate::tensor::{Graph, Tensor, Var};

/// `α` weighs the deblurring term, `β` the upsampling term, `1 − α − β` the refinement term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0 && self.beta > 0.0 && self.alpha + self.beta < 1.0;
        if !ok {
            return Err(Error::invalid(format!(
                "loss weights need alpha, beta > 0 and alpha + beta < 1, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn refine(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    /// Weights of the `(D, U, F)` terms. Terms of ablated sub-modules drop out
    /// and the rest are rescaled to sum to one.
    pub fn effective(&self, ablation: &Ablation) -> [f64; 3] {
        let d = if ablation.use_deblur { self.alpha } else { 0.0 };
        let f = if ablation.use_refine { self.refine() } else { 0.0 };
        if ablation.use_deblur && ablation.use_refine {
            return [d, self.beta, f];
        }
        let total = d + self.beta + f;
        [d / total, self.beta / total, f / total]
    }
}

/// Charbonnier sums of the three sub-module terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub deblur: f64,
    pub upsample: f64,
    pub refine: f64,
    pub total: f64,
}

impl LossTerms {
    /// Terms divided by the number of values they sum over (LR for the first, HR for the others).
    pub fn per_value(&self, lr_values: usize, hr_values: usize) -> LossTerms {
        let (lr, hr) = (lr_values as f64, hr_values as f64);
        LossTerms {
            deblur: self.deblur / lr,
            upsample: self.upsample / hr,
            refine: self.refine / hr,
            total: self.total / hr,
        }
    }
}

/// Weighted cascade loss on computed outputs.
pub fn caduf_loss(
    out: &CascadeOutput,
    y_d_target: &Tensor,
    x: &Tensor,
    weights: LossWeights,
    ablation: &Ablation,
) -> Result<LossTerms> {
    weights.validate()?;
    let [wd, wu, wf] = weights.effective(ablation);
    let deblur = charbonnier(&out.y_d, y_d_target, CHARBONNIER_EPS)?;
    let upsample = charbonnier(&out.x_u, x, CHARBONNIER_EPS)?;
    let refine = charbonnier(&out.x_hat, x, CHARBONNIER_EPS)?;
    Ok(LossTerms {
        deblur,
        upsample,
        refine,
        total: wd * deblur + wu * upsample + wf * refine,
    })
}

/// Graph handles of the three terms and the total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub deblur: Var,
    pub upsample: Var,
    pub refine: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        LossTerms {
            deblur: g.value(self.deblur).item(),
            upsample: g.value(self.upsample).item(),
            refine: g.value(self.refine).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Records the weighted cascade loss on `g`.
pub fn record_loss(
    g: &mut Graph,
    out: &Outputs<Var>,
    y_d_target: Var,
    x: Var,
    weights: LossWeights,
    ablation: &Ablation,
) -> Result<LossVars> {
    weights.validate()?;
    let [wd, wu, wf] = weights.effective(ablation);
    let deblur = g.charbonnier(out.y_d, y_d_target, CHARBONNIER_EPS)?;
    let upsample = g.charbonnier(out.x_u, x, CHARBONNIER_EPS)?;
    let refine = g.charbonnier(out.x_hat, x, CHARBONNIER_EPS)?;
    let mut total: Option<Var> = None;
    for (term, w) in [(deblur, wd), (upsample, wu), (refine, wf)] {
        if w > 0.0 {
            let t = g.scale(term, w)?;
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
    }
    let total = total.expect("the upsampling term always has positive weight");
    Ok(LossVars {
        deblur,
        upsample,
        refine,
        total,
    })
}
