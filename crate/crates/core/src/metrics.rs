//! Image SSIM, FA error, FA-map SSIM and the evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tensorfit::FaMap;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Summed-area table with a zero first row and column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Self {
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y * w + x);
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w: w + 1, sums }
    }

    /// Sum over rows `y0..y1` and columns `x0..x1`.
    fn rect(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        self.sums[y1 * self.w + x1] - self.sums[y0 * self.w + x1] - self.sums[y1 * self.w + x0]
            + self.sums[y0 * self.w + x0]
    }
}

/// Mean SSIM with a 7×7 uniform window, `C1 = (0.01·range)²` and
/// `C2 = (0.03·range)²`.
///
/// Local statistics use population (co)variances. The SSIM map is evaluated
/// at every window centre that keeps the window inside the image and is
/// averaged over the centres where `mask` is set (all of them when `None`).
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, data_range: f64, mask: Option<&[bool]>) -> Result<f64> {
    if a.len() != height * width || b.len() != a.len() {
        return Err(Error::Shape(format!(
            "ssim inputs of {} and {} pixels for {height}x{width}",
            a.len(),
            b.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::Shape(format!("mask of {} pixels for {} pixel images", m.len(), a.len())));
        }
    }
    if !(data_range > 0.0) {
        return Err(Error::Validation(format!("data range {data_range} must be positive")));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Shape(format!("{height}x{width} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let ia = Integral::new(height, width, |i| a[i]);
    let ib = Integral::new(height, width, |i| b[i]);
    let iaa = Integral::new(height, width, |i| a[i] * a[i]);
    let ibb = Integral::new(height, width, |i| b[i] * b[i]);
    let iab = Integral::new(height, width, |i| a[i] * b[i]);
    let r = SSIM_WINDOW / 2;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for cy in r..height - r {
        for cx in r..width - r {
            if mask.is_some_and(|m| !m[cy * width + cx]) {
                continue;
            }
            let (y0, x0, y1, x1) = (cy - r, cx - r, cy + r + 1, cx + r + 1);
            let ma = ia.rect(y0, x0, y1, x1) / n;
            let mb = ib.rect(y0, x0, y1, x1) / n;
            let va = (iaa.rect(y0, x0, y1, x1) / n - ma * ma).max(0.0);
            let vb = (ibb.rect(y0, x0, y1, x1) / n - mb * mb).max(0.0);
            let cov = iab.rect(y0, x0, y1, x1) / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation("no SSIM window centre falls inside the mask".into()));
    }
    Ok(total / count as f64)
}

fn check_maps(pred: &FaMap, truth: &FaMap) -> Result<()> {
    if pred.shape != truth.shape {
        return Err(Error::Shape(format!("FA maps {:?} vs {:?}", pred.shape, truth.shape)));
    }
    Ok(())
}

/// Mean absolute FA difference over the voxels in both masks.
pub fn fa_error(pred: &FaMap, truth: &FaMap) -> Result<f64> {
    check_maps(pred, truth)?;
    let (sum, n) = (0..pred.values.len())
        .filter(|&i| pred.mask[i] && truth.mask[i])
        .fold((0.0, 0usize), |(s, n), i| (s + (pred.values[i] - truth.values[i]).abs(), n + 1));
    if n == 0 {
        return Err(Error::Validation("FA masks do not intersect".into()));
    }
    Ok(sum / n as f64)
}

/// SSIM of FA maps slice by slice (range 1, truth mask), averaged over the
/// axial slices that have any masked window centre.
pub fn fa_map_ssim(pred: &FaMap, truth: &FaMap) -> Result<f64> {
    check_maps(pred, truth)?;
    let [nx, ny, nz] = truth.shape;
    let mut per_slice = Vec::new();
    for z in 0..nz {
        match ssim(pred.slice(z), truth.slice(z), ny, nx, 1.0, Some(truth.slice_mask(z))) {
            Ok(v) => per_slice.push(v),
            Err(Error::Validation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if per_slice.is_empty() {
        return Err(Error::Validation("no FA slice has a masked window".into()));
    }
    Ok(MeanStd::of(&per_slice).mean)
}

/// Mean and sample standard deviation of a list of values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Scores for one method, one entry per slice or per subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub references: usize,
    /// How image SSIM is aggregated.
    pub ssim_granularity: String,
    pub ssim_per_slice: Vec<f64>,
    pub ssim: MeanStd,
    pub fa_error_per_subject: Vec<f64>,
    pub fa_error: MeanStd,
    pub fa_map_ssim_per_subject: Vec<f64>,
    pub fa_map_ssim: MeanStd,
    /// Reserved for a perceptual score computed by an external classifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
}

pub const SSIM_GRANULARITY: &str = "per_slice_then_averaged";

impl EvaluationReport {
    pub fn new(
        method: impl Into<String>,
        references: usize,
        ssim_per_slice: Vec<f64>,
        fa_error_per_subject: Vec<f64>,
        fa_map_ssim_per_subject: Vec<f64>,
    ) -> Self {
        Self {
            method: method.into(),
            references,
            ssim_granularity: SSIM_GRANULARITY.into(),
            ssim: MeanStd::of(&ssim_per_slice),
            ssim_per_slice,
            fa_error: MeanStd::of(&fa_error_per_subject),
            fa_error_per_subject,
            fa_map_ssim: MeanStd::of(&fa_map_ssim_per_subject),
            fa_map_ssim_per_subject,
            fid: None,
        }
    }

    pub fn table(reports: &[EvaluationReport]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>3}  {:<17}  {:<17}  {:<17}", "Method", "R", "Image SSIM", "FA Error", "FA Map SSIM");
        for r in reports {
            let _ = writeln!(
                out,
                "{:<12} {:>3}  {:<17}  {:<17}  {:<17}",
                r.method,
                r.references,
                r.ssim.to_string(),
                r.fa_error.to_string(),
                r.fa_map_ssim.to_string()
            );
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }
}
