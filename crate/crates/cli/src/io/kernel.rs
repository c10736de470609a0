//! Plain-text kernel files.
//!
//! ```text
//! KERNEL 1
//! H W
//! <H lines of W reals, 17 significant digits>
//! ```
//! The file ends with a newline.

use std::fs;
use std::path::Path;

use caduf::degrade::{BlurKernel, Kernel};
use caduf::error::{Error, Result};

const MAGIC: &str = "KERNEL 1";
/// Allowed deviation of a blur kernel's sum from one.
pub const SUM_TOLERANCE: f64 = 1e-6;

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "kernel file",
        detail: detail.into(),
    }
}

pub fn format_kernel(k: &Kernel) -> String {
    let mut out = format!("{MAGIC}\n{} {}\n", k.height(), k.width());
    for row in k.taps().chunks(k.width()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_kernel(text: &str) -> Result<Kernel> {
    if !text.ends_with('\n') {
        return Err(malformed("missing trailing newline"));
    }
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(MAGIC) {
        return Err(malformed(format!("first line must be {MAGIC:?}")));
    }
    let dims: Vec<usize> = lines
        .next()
        .ok_or_else(|| malformed("missing dimensions"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| malformed(format!("bad dimension {t:?}"))))
        .collect::<Result<_>>()?;
    let [h, w] = dims[..] else {
        return Err(malformed("dimension line needs exactly two integers"));
    };
    let mut taps = Vec::with_capacity(h * w);
    for i in 0..h {
        let line = lines.next().ok_or_else(|| malformed(format!("expected {h} rows, got {i}")))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| malformed(format!("bad value {t:?} in row {}", i + 1))))
            .collect::<Result<_>>()?;
        if row.len() != w {
            return Err(malformed(format!("row {} has {} values, expected {w}", i + 1, row.len())));
        }
        taps.extend(row);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(malformed("trailing content after the last row"));
    }
    Kernel::new(h, w, taps).map_err(|e| malformed(e.to_string()))
}

/// Parses a kernel that must also be a valid PSF (non-negative, unit sum
/// within [`SUM_TOLERANCE`]). Taps are kept as written unless the sum is off
/// by more than the library tolerance, in which case they are renormalized.
pub fn parse_blur_kernel(text: &str) -> Result<BlurKernel> {
    let k = parse_kernel(text)?;
    if k.taps().iter().any(|&t| t < 0.0) {
        return Err(malformed("negative taps"));
    }
    let off = (k.sum() - 1.0).abs();
    if off > SUM_TOLERANCE {
        return Err(malformed(format!("taps sum to {}, not 1", k.sum())));
    }
    let k = if off > caduf::degrade::kernel::SUM_TOLERANCE {
        BlurKernel::from_weights(k)
    } else {
        BlurKernel::new(k)
    };
    k.map_err(|e| malformed(e.to_string()))
}

pub fn read_kernel(path: &Path) -> Result<Kernel> {
    parse_kernel(&super::read_text(path)?)
}

pub fn read_blur_kernel(path: &Path) -> Result<BlurKernel> {
    parse_blur_kernel(&super::read_text(path)?)
}

pub fn write_kernel(path: &Path, k: &Kernel) -> Result<()> {
    fs::write(path, format_kernel(k)).map_err(|e| super::io_error(path, e))
}
