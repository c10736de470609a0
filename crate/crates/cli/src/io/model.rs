//! Cascade models stored in a [`Checkpoint`].
//!
//! Entries: `meta/config` (architecture numbers and ablation switches),
//! `cascade/<parameter>` for every cascade weight, and `pinv/<i>` for the
//! learned pseudo-inverse, which makes the model usable at any image size.

use std::sync::Arc;

use caduf::cascade::{Ablation, Cascade, CascadeConfig, CascadeParams};
use caduf::error::{Error, Result};
use caduf::operator::{LearnedPinv, PseudoInverse};
use caduf::tensor::Tensor;

use super::checkpoint::Checkpoint;

const CONFIG: &str = "meta/config";
const FORMAT_VERSION: f64 = 1.0;
const CASCADE_PREFIX: &str = "cascade/";
const PINV_PREFIX: &str = "pinv/";

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "model checkpoint",
        detail: detail.into(),
    }
}

fn encode_config(cfg: &CascadeConfig) -> Tensor {
    let mut v = vec![
        FORMAT_VERSION,
        cfg.scale as f64,
        cfg.width as f64,
        cfg.blocks_deblur as f64,
        cfg.blocks_upsample as f64,
        cfg.blocks_refine as f64,
        cfg.dilation as f64,
        cfg.extractor_fine as f64,
        cfg.extractor_coarse as f64,
        f64::from(u8::from(cfg.freeze_alignment)),
    ];
    v.extend(cfg.ablation.fields().iter().map(|&(_, on)| f64::from(u8::from(on))));
    let n = v.len();
    Tensor::new(&[n], v).expect("length matches")
}

fn decode_config(t: &Tensor) -> Result<CascadeConfig> {
    let v = t.data();
    if v.len() != 18 || v[0] != FORMAT_VERSION {
        return Err(malformed("unsupported configuration record"));
    }
    let int = |i: usize| -> Result<usize> {
        let x = v[i];
        if x >= 0.0 && x.fract() == 0.0 && x < 1e9 {
            Ok(x as usize)
        } else {
            Err(malformed(format!("configuration field {i} is {x}")))
        }
    };
    let flag = |i: usize| -> Result<bool> {
        match v[i] {
            0.0 => Ok(false),
            1.0 => Ok(true),
            x => Err(malformed(format!("configuration flag {i} is {x}"))),
        }
    };
    let mut ablation = Ablation::FULL;
    for (k, (name, _)) in Ablation::FULL.fields().iter().enumerate() {
        ablation.set(name, flag(10 + k)?);
    }
    let cfg = CascadeConfig {
        scale: int(1)?,
        width: int(2)?,
        blocks_deblur: int(3)?,
        blocks_upsample: int(4)?,
        blocks_refine: int(5)?,
        dilation: int(6)?,
        extractor_fine: int(7)?,
        extractor_coarse: int(8)?,
        freeze_alignment: flag(9)?,
        ablation,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Packs the model weights with a learned pseudo-inverse.
pub fn save_model(model: &Cascade, pinv: &LearnedPinv) -> Result<Checkpoint> {
    let cfg = model.config();
    if pinv.scale() != cfg.scale {
        return Err(Error::invalid("pseudo-inverse scale differs from the model scale"));
    }
    let mut ck = Checkpoint::new();
    ck.insert(CONFIG, encode_config(cfg))?;
    for (name, t) in model.params().iter() {
        ck.insert(format!("{CASCADE_PREFIX}{name}"), t.clone())?;
    }
    for (i, t) in pinv.params().iter().enumerate() {
        ck.insert(format!("{PINV_PREFIX}{i}"), t.clone())?;
    }
    Ok(ck)
}

/// Rebuilds the model; its projection uses the stored learned pseudo-inverse.
pub fn load_model(ck: &Checkpoint) -> Result<(Cascade, Arc<LearnedPinv>)> {
    let cfg = decode_config(ck.require(CONFIG)?)?;
    let mut named = Vec::new();
    let mut pinv = Vec::new();
    for (name, t) in ck.entries() {
        if let Some(p) = name.strip_prefix(CASCADE_PREFIX) {
            named.push((p.to_string(), t.clone()));
        } else if let Some(i) = name.strip_prefix(PINV_PREFIX) {
            if i != pinv.len().to_string() {
                return Err(malformed(format!("pseudo-inverse entry {name:?} out of order")));
            }
            pinv.push(t.clone());
        } else if name != CONFIG {
            return Err(malformed(format!("unknown entry {name:?}")));
        }
    }
    let pinv = Arc::new(LearnedPinv::from_params(cfg.scale, pinv)?);
    let params = CascadeParams::from_named(named)?;
    let model = Cascade::new(cfg, params, PseudoInverse::Learned(pinv.clone()))?;
    Ok((model, pinv))
}
