//! The cascade topology, written once against [`Builder`] so that the same
//! description drives parameter layout, graph construction and MAC counting.

use super::config::{CascadeConfig, CHANNELS, FILTER_TAPS, RESIDUAL_WIDTH};
use crate::error::Result;
use crate::tensor::{Conv2dOpts, Padding};

/// How a convolution's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Fan-in scaled uniform for leaky-ReLU networks, times the factor.
    FanIn(f64),
    /// All zeros.
    Zero,
    /// Zero weights; the bias selects the center tap of every 5×5 filter.
    /// The value is the pixel-shuffle factor of the filter channels.
    IdentityFilter(usize),
}

/// Scale applied to the second convolution of a residual block at init.
pub const RESIDUAL_INIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct ConvSpec<'a> {
    pub name: &'a str,
    pub cout: usize,
    pub k: usize,
    pub opts: Conv2dOpts,
    pub init: Init,
}

impl<'a> ConvSpec<'a> {
    pub fn new(name: &'a str, cout: usize, k: usize) -> Self {
        ConvSpec {
            name,
            cout,
            k,
            opts: Conv2dOpts::default(),
            init: Init::FanIn(1.0),
        }
    }

    pub fn opts(mut self, opts: Conv2dOpts) -> Self {
        self.opts = opts;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }
}

/// Primitive operations the topology is written in.
pub trait Builder {
    type T: Copy;

    /// Convolution with bias; weights `name.w`, bias `name.b`.
    fn conv(&mut self, x: Self::T, spec: ConvSpec<'_>) -> Result<Self::T>;
    /// Modulated deformable 3×3-style convolution with bias.
    fn deform(&mut self, x: Self::T, spec: ConvSpec<'_>, offsets: Self::T, modulation: Self::T) -> Result<Self::T>;
    fn leaky(&mut self, x: Self::T) -> Result<Self::T>;
    fn sigmoid(&mut self, x: Self::T) -> Result<Self::T>;
    fn scale(&mut self, x: Self::T, factor: f64) -> Result<Self::T>;
    fn add(&mut self, a: Self::T, b: Self::T) -> Result<Self::T>;
    fn sub(&mut self, a: Self::T, b: Self::T) -> Result<Self::T>;
    fn concat(&mut self, parts: &[Self::T]) -> Result<Self::T>;
    fn narrow(&mut self, x: Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn shuffle(&mut self, x: Self::T, s: usize) -> Result<Self::T>;
    fn unshuffle(&mut self, x: Self::T, s: usize) -> Result<Self::T>;
    fn dynfilter(&mut self, z: Self::T, c: Self::T, r: Self::T, scale: usize) -> Result<Self::T>;
    /// Constant tensor with the batch size and spatial dims of `like` and
    /// one fixed value per channel.
    fn constant(&mut self, like: Self::T, values: &[f64]) -> Result<Self::T>;
    /// The anchor degradation `A`.
    fn degrade(&mut self, x: Self::T) -> Result<Self::T>;
    /// The pseudo-inverse `A⁺`.
    fn pinv(&mut self, y: Self::T) -> Result<Self::T>;
    /// Marks the start of a sub-module; operations until the next mark belong to it.
    fn stage(&mut self, _name: &'static str) {}
}

/// Handles of everything the cascade produces.
#[derive(Clone, Copy, Debug)]
pub struct Outputs<T> {
    pub h_e: T,
    pub h_d: Option<T>,
    pub h_u: T,
    pub h_f: Option<T>,
    pub y_d: T,
    /// Upsampler output before the projection.
    pub p: T,
    pub x_u: T,
    pub x_hat: T,
}

fn leaky_conv<B: Builder>(b: &mut B, x: B::T, spec: ConvSpec<'_>) -> Result<B::T> {
    let h = b.conv(x, spec)?;
    b.leaky(h)
}

fn residual_blocks<B: Builder>(b: &mut B, cfg: &CascadeConfig, prefix: &str, count: usize, mut x: B::T) -> Result<B::T> {
    for i in 0..count {
        let (n1, n2) = (format!("{prefix}.block{i}.conv1"), format!("{prefix}.block{i}.conv2"));
        let t = leaky_conv(b, x, ConvSpec::new(&n1, cfg.width, 3).opts(Conv2dOpts::dilated(cfg.dilation)))?;
        let t = b.conv(t, ConvSpec::new(&n2, cfg.width, 3).init(Init::FanIn(RESIDUAL_INIT)))?;
        x = b.add(x, t)?;
    }
    Ok(x)
}

fn identity_filter() -> Vec<f64> {
    let mut v = vec![0.0; FILTER_TAPS];
    v[FILTER_TAPS / 2] = 1.0;
    v
}

/// Dynamic-filter head. Filters and residual are predicted on the LR grid
/// with `s²` sub-pixel channels each and shuffled up; `z` is then filtered
/// with `filter_scale` LR-to-output magnification.
fn head<B: Builder>(
    b: &mut B,
    cfg: &CascadeConfig,
    prefix: &str,
    h: B::T,
    z: B::T,
    s: usize,
    filter_scale: usize,
) -> Result<B::T> {
    let (n1, n2) = (format!("{prefix}.residual1"), format!("{prefix}.residual2"));
    let t = leaky_conv(b, h, ConvSpec::new(&n1, s * s * RESIDUAL_WIDTH, 3))?;
    let t = if s > 1 { b.shuffle(t, s)? } else { t };
    let r = b.conv(t, ConvSpec::new(&n2, CHANNELS, 3).init(Init::Zero))?;
    let c = if cfg.ablation.propagate_features {
        let name = format!("{prefix}.filter");
        let c = b.conv(h, ConvSpec::new(&name, s * s * FILTER_TAPS, 3).init(Init::IdentityFilter(s)))?;
        if s > 1 {
            b.shuffle(c, s)?
        } else {
            c
        }
    } else {
        b.constant(r, &identity_filter())?
    };
    b.dynfilter(z, c, r, filter_scale)
}

/// Shared-weight pyramid branch of the extractor.
fn extractor_branch<B: Builder>(b: &mut B, cfg: &CascadeConfig, x: B::T) -> Result<B::T> {
    let (fine, coarse) = (cfg.extractor_fine, cfg.extractor_coarse);
    let f1 = leaky_conv(b, x, ConvSpec::new("extract.in", fine, 5))?;
    let f2 = leaky_conv(b, f1, ConvSpec::new("extract.down2", coarse, 3).opts(Conv2dOpts::strided(2)))?;
    let f2 = leaky_conv(b, f2, ConvSpec::new("extract.mid2", coarse, 3))?;
    let f4 = leaky_conv(b, f2, ConvSpec::new("extract.down4", coarse, 3).opts(Conv2dOpts::strided(2)))?;
    let f4 = leaky_conv(b, f4, ConvSpec::new("extract.mid4", coarse, 3))?;
    let u = leaky_conv(b, f4, ConvSpec::new("extract.up4", 4 * coarse, 3))?;
    let u = b.shuffle(u, 2)?;
    let f2 = b.add(f2, u)?;
    let u = leaky_conv(b, f2, ConvSpec::new("extract.up2", 4 * fine, 3))?;
    let u = b.shuffle(u, 2)?;
    let f1 = b.add(f1, u)?;
    let f1 = leaky_conv(b, f1, ConvSpec::new("extract.fine1", fine, 3))?;
    leaky_conv(b, f1, ConvSpec::new("extract.fine2", fine, 3))
}

/// Motion-corrected features: both inputs go through the shared branch, the
/// `y` branch is aligned to the anchor branch by a deformable convolution
/// whose offsets see both, and a 1×1 convolution fuses the pair.
pub fn extractor<B: Builder>(b: &mut B, cfg: &CascadeConfig, y: B::T, anchor: B::T) -> Result<B::T> {
    let hy = extractor_branch(b, cfg, y)?;
    let ha = extractor_branch(b, cfg, anchor)?;
    let both = b.concat(&[hy, ha])?;
    let taps = 9;
    let (offsets, modulation) = if cfg.freeze_alignment {
        (b.constant(hy, &[0.0; 18])?, b.constant(hy, &[1.0; 9])?)
    } else {
        let o = b.conv(both, ConvSpec::new("extract.offset", 3 * taps, 3).init(Init::Zero))?;
        let off = b.narrow(o, 0, 2 * taps)?;
        let m = b.narrow(o, 2 * taps, taps)?;
        // 2·sigmoid: unit modulation at init, range (0, 2)
        let m = b.sigmoid(m)?;
        (off, b.scale(m, 2.0)?)
    };
    let aligned = b.deform(hy, ConvSpec::new("extract.align", cfg.extractor_fine, 3), offsets, modulation)?;
    let aligned = b.leaky(aligned)?;
    let fused = b.concat(&[aligned, ha])?;
    leaky_conv(b, fused, ConvSpec::new("extract.fuse", cfg.width, 1))
}

/// The whole cascade from the observation `y` and its deconvolution `y_w`.
pub fn cascade<B: Builder>(b: &mut B, cfg: &CascadeConfig, y: B::T, y_w: B::T) -> Result<Outputs<B::T>> {
    let ab = cfg.ablation;
    let s = cfg.scale;
    let anchor = if ab.use_wiener_input { y_w } else { y };

    b.stage("extractor");
    let h_e = if ab.use_extractor {
        extractor(b, cfg, y, anchor)?
    } else {
        let input = if ab.use_wiener_input && ab.use_blurred_input {
            b.concat(&[y, y_w])?
        } else {
            anchor
        };
        leaky_conv(b, input, ConvSpec::new("shallow", cfg.width, 3))?
    };

    let (h_d, y_d) = if ab.use_deblur {
        b.stage("deblur");
        let h = residual_blocks(b, cfg, "deblur", cfg.blocks_deblur, h_e)?;
        let y_d = head(b, cfg, "deblur", h, anchor, 1, 1)?;
        (Some(h), y_d)
    } else {
        (None, anchor)
    };

    b.stage("upsample");
    let u_in = if ab.propagate_features {
        let mut parts = vec![h_e];
        parts.extend(h_d);
        let cat = b.concat(&parts)?;
        b.conv(cat, ConvSpec::new("upsample.fuse", cfg.width, 1))?
    } else {
        leaky_conv(b, y_d, ConvSpec::new("upsample.shallow", cfg.width, 3))?
    };
    let h_u = residual_blocks(b, cfg, "upsample", cfg.blocks_upsample, u_in)?;
    let p = head(b, cfg, "upsample", h_u, y_d, s, s)?;
    let x_u = if ab.use_projection {
        b.stage("projection");
        let ap = b.degrade(p)?;
        let miss = b.sub(y_d, ap)?;
        let fix = b.pinv(miss)?;
        b.add(p, fix)?
    } else {
        p
    };

    let (h_f, x_hat) = if ab.use_refine {
        b.stage("refine");
        let f_in = if ab.propagate_features {
            let mut parts = vec![h_e];
            parts.extend(h_d);
            parts.push(h_u);
            let cat = b.concat(&parts)?;
            b.conv(cat, ConvSpec::new("refine.fuse", cfg.width, 1))?
        } else {
            let lr = b.unshuffle(x_u, s)?;
            leaky_conv(b, lr, ConvSpec::new("refine.shallow", cfg.width, 3))?
        };
        let h = residual_blocks(b, cfg, "refine", cfg.blocks_refine, f_in)?;
        let x_hat = head(b, cfg, "refine", h, x_u, s, 1)?;
        (Some(h), x_hat)
    } else {
        (None, x_u)
    };

    Ok(Outputs {
        h_e,
        h_d,
        h_u,
        h_f,
        y_d,
        p,
        x_u,
        x_hat,
    })
}

/// The replicate-padded convolution a frozen deformable layer reduces to.
pub fn replicate_opts() -> Conv2dOpts {
    Conv2dOpts {
        padding: Padding::Replicate,
        ..Default::default()
    }
}

/// `(name, shape, init)` of one declared tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Fan-in of the owning convolution.
    pub fan_in: usize,
}

/// How `A⁺` is costed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PinvCost {
    /// Fixed MACs per LR pixel (all channels together), as for a convolutional network.
    PerPixel(u128),
    /// A dense matrix per channel plane.
    Dense,
}

/// Shape-only builder: collects parameter declarations and counts
/// multiply-accumulates for a single sample.
#[derive(Debug)]
pub struct ShapeBuilder {
    pub decls: Vec<ParamDecl>,
    pub macs: u128,
    /// MACs per sub-module, in order of appearance.
    pub stages: Vec<(&'static str, u128)>,
    pinv: PinvCost,
    /// MACs of `A` per LR output value.
    degrade_macs: u128,
    scale: usize,
}

/// `(channels, height, width)`.
pub type Dims = (usize, usize, usize);

impl ShapeBuilder {
    pub fn new(scale: usize, degrade_macs: u128, pinv: PinvCost) -> Self {
        ShapeBuilder {
            decls: Vec::new(),
            macs: 0,
            stages: Vec::new(),
            pinv,
            degrade_macs,
            scale,
        }
    }

    fn declare(&mut self, spec: &ConvSpec<'_>, cin: usize) {
        let w = format!("{}.w", spec.name);
        if self.decls.iter().any(|d| d.name == w) {
            return;
        }
        let fan_in = cin * spec.k * spec.k;
        self.decls.push(ParamDecl {
            name: w,
            shape: vec![spec.cout, cin, spec.k, spec.k],
            init: spec.init,
            fan_in,
        });
        self.decls.push(ParamDecl {
            name: format!("{}.b", spec.name),
            shape: vec![spec.cout],
            init: spec.init,
            fan_in,
        });
    }
}

fn conv_out(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

impl ShapeBuilder {
    fn count(&mut self, macs: u128) {
        self.macs += macs;
        if let Some(last) = self.stages.last_mut() {
            last.1 += macs;
        }
    }
}

impl Builder for ShapeBuilder {
    type T = Dims;

    fn stage(&mut self, name: &'static str) {
        self.stages.push((name, 0));
    }

    fn conv(&mut self, (c, h, w): Dims, spec: ConvSpec<'_>) -> Result<Dims> {
        self.declare(&spec, c);
        let (ho, wo) = (conv_out(h, spec.opts.stride), conv_out(w, spec.opts.stride));
        self.count((spec.cout * ho * wo * c * spec.k * spec.k) as u128);
        Ok((spec.cout, ho, wo))
    }

    fn deform(&mut self, (c, h, w): Dims, spec: ConvSpec<'_>, _: Dims, _: Dims) -> Result<Dims> {
        self.declare(&spec, c);
        let taps = (spec.k * spec.k * c * h * w) as u128;
        self.count((spec.cout * h * w * c * spec.k * spec.k) as u128 + 4 * taps);
        Ok((spec.cout, h, w))
    }

    fn leaky(&mut self, x: Dims) -> Result<Dims> {
        Ok(x)
    }

    fn sigmoid(&mut self, x: Dims) -> Result<Dims> {
        Ok(x)
    }

    fn scale(&mut self, x: Dims, _: f64) -> Result<Dims> {
        Ok(x)
    }

    fn add(&mut self, a: Dims, _: Dims) -> Result<Dims> {
        Ok(a)
    }

    fn sub(&mut self, a: Dims, _: Dims) -> Result<Dims> {
        Ok(a)
    }

    fn concat(&mut self, parts: &[Dims]) -> Result<Dims> {
        let (_, h, w) = parts[0];
        Ok((parts.iter().map(|p| p.0).sum(), h, w))
    }

    fn narrow(&mut self, (_, h, w): Dims, _: usize, len: usize) -> Result<Dims> {
        Ok((len, h, w))
    }

    fn shuffle(&mut self, (c, h, w): Dims, s: usize) -> Result<Dims> {
        Ok((c / (s * s), h * s, w * s))
    }

    fn unshuffle(&mut self, (c, h, w): Dims, s: usize) -> Result<Dims> {
        Ok((c * s * s, h / s, w / s))
    }

    fn dynfilter(&mut self, (c, h, w): Dims, _: Dims, _: Dims, scale: usize) -> Result<Dims> {
        let out = (c * h * scale * w * scale) as u128;
        self.count(out * FILTER_TAPS as u128);
        Ok((c, h * scale, w * scale))
    }

    fn constant(&mut self, (_, h, w): Dims, values: &[f64]) -> Result<Dims> {
        Ok((values.len(), h, w))
    }

    fn degrade(&mut self, (c, h, w): Dims) -> Result<Dims> {
        let (ho, wo) = (h / self.scale, w / self.scale);
        self.count(self.degrade_macs * (c * ho * wo) as u128);
        Ok((c, ho, wo))
    }

    fn pinv(&mut self, (c, h, w): Dims) -> Result<Dims> {
        let lr = (h * w) as u128;
        let macs = match self.pinv {
            PinvCost::PerPixel(m) => m * lr,
            PinvCost::Dense => c as u128 * lr * lr * (self.scale * self.scale) as u128,
        };
        self.count(macs);
        Ok((c, h * self.scale, w * self.scale))
    }
}

/// Shape walk of the cascade for `(3, h, w)` LR inputs.
pub fn walk(cfg: &CascadeConfig, h: usize, w: usize, b: &mut ShapeBuilder) -> Result<Outputs<Dims>> {
    let y = (CHANNELS, h, w);
    cascade(b, cfg, y, y)
}
