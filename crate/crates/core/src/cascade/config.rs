use std::fmt;

use crate::error::{Error, Result};

/// Radius `p` of every dynamic-filter head (5×5 filters).
pub const FILTER_RADIUS: usize = 2;
/// Taps per dynamic filter.
pub const FILTER_TAPS: usize = (2 * FILTER_RADIUS + 1) * (2 * FILTER_RADIUS + 1);
/// Channels of the residual branch of a head before its final convolution.
pub const RESIDUAL_WIDTH: usize = 16;
/// Image channels.
pub const CHANNELS: usize = 3;

/// Switches selecting one member of the ablation family.
///
/// All switches on is the full model. Switching parts off reroutes the data
/// flow rather than zeroing weights, so every variant has its own parameter
/// layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// Feed the Wiener-deconvolved `y_w` (otherwise `y` stands in for it).
    pub use_wiener_input: bool,
    /// Without the extractor, also concatenate `y` to `y_w` for the shallow features.
    pub use_blurred_input: bool,
    /// Motion-corrected multi-scale extractor; otherwise one shallow convolution.
    pub use_extractor: bool,
    /// Deblurring sub-module in LR space.
    pub use_deblur: bool,
    /// Supervise the deblurring output with the anchor degradation
    /// (otherwise with the plain bicubic reduction of `x`).
    pub use_pi_anchor: bool,
    /// Affine projection onto `A x = y_D` after upsampling. Without it the
    /// upsampler is an unconstrained SR network.
    pub use_projection: bool,
    /// Final refinement sub-module.
    pub use_refine: bool,
    /// Pass features between sub-modules; otherwise only images travel and
    /// heads regress a residual on a fixed identity filter.
    pub propagate_features: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_wiener_input: true,
        use_blurred_input: true,
        use_extractor: true,
        use_deblur: true,
        use_pi_anchor: true,
        use_projection: true,
        use_refine: true,
        propagate_features: true,
    };

    /// The variants of the component study, in table order.
    pub fn family() -> Vec<(&'static str, Ablation)> {
        let p_y = Ablation {
            use_wiener_input: false,
            use_blurred_input: false,
            use_extractor: false,
            use_deblur: false,
            use_pi_anchor: false,
            use_projection: false,
            use_refine: false,
            propagate_features: true,
        };
        let p_yw = Ablation {
            use_wiener_input: true,
            ..p_y
        };
        let pd_no_pi = Ablation {
            use_deblur: true,
            ..p_yw
        };
        let pd = Ablation {
            use_pi_anchor: true,
            ..pd_no_pi
        };
        let fud = Ablation {
            use_projection: true,
            use_refine: true,
            ..pd
        };
        let fud_pair = Ablation {
            use_blurred_input: true,
            ..fud
        };
        let cascade = Ablation {
            propagate_features: false,
            ..fud
        };
        vec![
            ("P(y)", p_y),
            ("P(y_w)", p_yw),
            ("PD(y_w)-no-PI", pd_no_pi),
            ("PD(y_w)", pd),
            ("FUD(y_w)", fud),
            ("FUD(y,y_w)", fud_pair),
            ("CNN-Cascade", cascade),
            ("CADUF", Ablation::FULL),
        ]
    }

    /// Name of the matching family member, if any.
    pub fn variant_name(&self) -> Option<&'static str> {
        let canon = self.canonical();
        Self::family()
            .into_iter()
            .find(|(_, a)| a.canonical() == canon)
            .map(|(n, _)| n)
    }

    /// Clears switches that have no effect in this combination.
    fn canonical(&self) -> Ablation {
        let mut a = *self;
        if a.use_extractor {
            a.use_blurred_input = true;
        }
        if !a.use_wiener_input && !a.use_extractor {
            a.use_blurred_input = false;
        }
        if !a.use_deblur {
            a.use_pi_anchor = false;
        }
        a
    }

    /// `(name, value)` pairs in a fixed order, for config files.
    pub fn fields(&self) -> [(&'static str, bool); 8] {
        [
            ("use_wiener_input", self.use_wiener_input),
            ("use_blurred_input", self.use_blurred_input),
            ("use_E", self.use_extractor),
            ("use_D", self.use_deblur),
            ("use_PI_anchor", self.use_pi_anchor),
            ("use_projection", self.use_projection),
            ("use_F", self.use_refine),
            ("propagate_features", self.propagate_features),
        ]
    }

    /// Sets the switch called `name`; `false` if there is none.
    pub fn set(&mut self, name: &str, value: bool) -> bool {
        let slot = match name {
            "use_wiener_input" => &mut self.use_wiener_input,
            "use_blurred_input" => &mut self.use_blurred_input,
            "use_E" => &mut self.use_extractor,
            "use_D" => &mut self.use_deblur,
            "use_PI_anchor" => &mut self.use_pi_anchor,
            "use_projection" => &mut self.use_projection,
            "use_F" => &mut self.use_refine,
            "propagate_features" => &mut self.propagate_features,
            _ => return false,
        };
        *slot = value;
        true
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.variant_name().unwrap_or("custom"))
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeConfig {
    pub scale: usize,
    /// Trunk feature width.
    pub width: usize,
    pub blocks_deblur: usize,
    pub blocks_upsample: usize,
    pub blocks_refine: usize,
    /// Dilation of the first convolution of every residual block.
    pub dilation: usize,
    /// Extractor width at full LR resolution.
    pub extractor_fine: usize,
    /// Extractor width at 1/2 and 1/4 resolution.
    pub extractor_coarse: usize,
    /// Pins deformable offsets at 0 and modulation at 1.
    pub freeze_alignment: bool,
    pub ablation: Ablation,
}

impl CascadeConfig {
    /// Full-size configuration.
    pub fn paper(scale: usize) -> Self {
        CascadeConfig {
            scale,
            width: 64,
            blocks_deblur: 8,
            blocks_upsample: 16,
            blocks_refine: 4,
            dilation: 2,
            extractor_fine: 64,
            extractor_coarse: 32,
            freeze_alignment: false,
            ablation: Ablation::FULL,
        }
    }

    /// Small configuration for CPU training.
    pub fn desk(scale: usize) -> Self {
        CascadeConfig {
            width: 32,
            blocks_deblur: 4,
            blocks_upsample: 8,
            blocks_refine: 2,
            extractor_fine: 32,
            extractor_coarse: 16,
            ..Self::paper(scale)
        }
    }

    /// Configuration with the given width and block counts; extractor widths follow the width.
    pub fn sized(scale: usize, width: usize, blocks: [usize; 3]) -> Self {
        CascadeConfig {
            width,
            blocks_deblur: blocks[0],
            blocks_upsample: blocks[1],
            blocks_refine: blocks[2],
            extractor_fine: width,
            extractor_coarse: (width / 2).max(1),
            ..Self::paper(scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::invalid("scale must be positive"));
        }
        if self.width < 8 {
            return Err(Error::invalid(format!("trunk width {} is below 8", self.width)));
        }
        if self.blocks_deblur == 0 || self.blocks_upsample == 0 || self.blocks_refine == 0 {
            return Err(Error::invalid("every sub-module needs at least one residual block"));
        }
        if self.dilation == 0 || self.extractor_fine == 0 || self.extractor_coarse == 0 {
            return Err(Error::invalid("dilation and extractor widths must be positive"));
        }
        Ok(())
    }

    /// LR spatial sizes must survive two halvings of the extractor pyramid.
    pub fn check_lr_dims(&self, h: usize, w: usize) -> Result<()> {
        let q = if self.ablation.use_extractor { 4 } else { 1 };
        if h == 0 || w == 0 || h % q != 0 || w % q != 0 {
            return Err(Error::shape(format!("LR size {h}x{w} must be a positive multiple of {q}")));
        }
        Ok(())
    }
}
