//! `key=value` configuration files.
//!
//! One assignment per line; blank lines and `#` comments are ignored and
//! unknown keys are errors. Keys cover the architecture (`width`,
//! `blocks_deblur`, …, and the ablation switches `use_wiener_input`,
//! `use_blurred_input`, `use_E`, `use_D`, `use_PI_anchor`, `use_projection`,
//! `use_F`, `propagate_features`), data synthesis (`family`, `patch`,
//! `pool`, …) and the schedule (`epochs_a`, `epochs_b`, `lr_drop`, `lr`,
//! `lr_late`, `alpha_a`, `beta_a`, `alpha_b`, `beta_b`).

use caduf::cascade::CascadeConfig;
use caduf::error::{Error, Result};
use caduf::train::{PhasePlan, TrainConfig};

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "config file",
        detail: detail.into(),
    }
}

/// Everything a config file can change.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: CascadeConfig,
    pub train: TrainConfig,
    pub plan: PhasePlan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl Settings {
    pub fn profile(profile: Profile, scale: usize) -> Self {
        match profile {
            Profile::Paper => Settings {
                model: CascadeConfig::paper(scale),
                train: TrainConfig::paper(scale),
                plan: PhasePlan::paper(),
            },
            Profile::Desk => Settings {
                model: CascadeConfig::desk(scale),
                train: TrainConfig::desk(scale),
                plan: PhasePlan::desk(),
            },
        }
    }

    /// Applies every assignment in `text`, then rebuilds the phases from the plan.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| malformed(format!("line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| malformed(format!("line {}: {e}", n + 1)))?;
        }
        self.train.phases = self.plan.phases();
        self.model.validate()?;
        self.train.validate(self.model.scale)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        let p = &mut self.plan;
        match key {
            "width" => m.width = parse(key, value)?,
            "blocks_deblur" => m.blocks_deblur = parse(key, value)?,
            "blocks_upsample" => m.blocks_upsample = parse(key, value)?,
            "blocks_refine" => m.blocks_refine = parse(key, value)?,
            "dilation" => m.dilation = parse(key, value)?,
            "extractor_fine" => m.extractor_fine = parse(key, value)?,
            "extractor_coarse" => m.extractor_coarse = parse(key, value)?,
            "freeze_alignment" => m.freeze_alignment = parse(key, value)?,
            "family" => t.family = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "batches_per_epoch" => t.batches_per_epoch = parse(key, value)?,
            "patch" => t.patch = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "pool" => {
                let n: usize = parse(key, value)?;
                t.pool = (n > 0).then_some(n);
            }
            "validation" => t.validation = parse(key, value)?,
            "flips" => t.augment.flips = parse(key, value)?,
            "rotations" => t.augment.rotations = parse(key, value)?,
            "rescale" => t.augment.rescale = parse(key, value)?,
            "weight_decay" => t.adam.weight_decay = parse(key, value)?,
            "epochs_a" => p.epochs_a = parse(key, value)?,
            "epochs_b" => p.epochs_b = parse(key, value)?,
            "lr_drop" => p.lr_drop = parse(key, value)?,
            "lr" => p.lr = parse(key, value)?,
            "lr_late" => p.lr_late = parse(key, value)?,
            "alpha_a" => p.weights_a.alpha = parse(key, value)?,
            "beta_a" => p.weights_a.beta = parse(key, value)?,
            "alpha_b" => p.weights_b.alpha = parse(key, value)?,
            "beta_b" => p.weights_b.beta = parse(key, value)?,
            _ => {
                let on: bool = parse(key, value)?;
                if !m.ablation.set(key, on) {
                    return Err(format!("unknown key {key:?}"));
                }
            }
        }
        Ok(())
    }
}
