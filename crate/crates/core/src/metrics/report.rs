use serde_json::json;

/// Scores of one output image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    /// Which reconstruction was scored, e.g. `"model"` or `"bicubic"`.
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub macs: u64,
}

/// Arithmetic means over the rows of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub method: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub macs: f64,
}

/// Evaluation results, serialized as JSON lines: a header, one record per
/// scored image, then one summary per method.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    /// Name of the evaluated model variant.
    pub variant: String,
    pub rows: Vec<ImageScore>,
}

impl MetricsReport {
    pub fn new(variant: impl Into<String>) -> Self {
        MetricsReport {
            variant: variant.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: ImageScore) {
        self.rows.push(row);
    }

    /// Methods in order of first appearance.
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    pub fn summary(&self, method: &str) -> Option<Summary> {
        let rows: Vec<&ImageScore> = self.rows.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(Summary {
            method: method.to_string(),
            count: rows.len(),
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            macs: rows.iter().map(|r| r.macs as f64).sum::<f64>() / n,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        line(json!({"type": "header", "variant": self.variant}));
        for r in &self.rows {
            line(json!({
                "type": "image",
                "id": r.id,
                "method": r.method,
                "psnr": r.psnr,
                "ssim": r.ssim,
                "macs": r.macs,
            }));
        }
        for m in self.methods() {
            let s = self.summary(m).expect("method has rows");
            line(json!({
                "type": "summary",
                "method": s.method,
                "count": s.count,
                "psnr": s.psnr,
                "ssim": s.ssim,
                "macs": s.macs,
            }));
        }
        out
    }
}
