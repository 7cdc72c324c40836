//! Scoring completed acquisitions against fully acquired ones.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::metrics::{fa_error, fa_map_ssim, EvaluationReport};
use crate::pipeline::train::slice_ssim;
use crate::pipeline::upsample::is_generated;
use crate::tensorfit::{colored_fa, fit_set};
use crate::volume::{DwiSet, DwiVolume};

/// Written next to generated volumes to record how they were made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationInfo {
    pub method: String,
    pub references: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub generated: usize,
    pub passed_through: usize,
}

pub const GENERATION_INFO: &str = "generation.json";

impl GenerationInfo {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(GENERATION_INFO);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(GENERATION_INFO);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(Some(serde_json::from_str(&text)?))
    }
}

/// Per-subject scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectScores {
    pub ssim_per_slice: Vec<f64>,
    pub fa_error: f64,
    pub fa_map_ssim: f64,
}

fn matching<'a>(truth: &'a DwiSet, v: &DwiVolume) -> Option<&'a DwiVolume> {
    truth.volumes.iter().find(|t| {
        (t.bvalue - v.bvalue).abs() <= 1e-6 * v.bvalue.max(1.0) && t.direction.iter().zip(&v.direction).all(|(a, b)| (a - b).abs() <= 1e-6)
    })
}

/// SSIM of every generated slice against the acquired slice of the same
/// direction, and FA error and FA-map SSIM from tensors fitted to both sets.
pub fn score_subject(pred: &DwiSet, truth: &DwiSet) -> Result<SubjectScores> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!("predicted dims {:?} vs true dims {:?}", pred.dims(), truth.dims())));
    }
    let mut ssim_per_slice = Vec::new();
    for v in pred.volumes.iter().filter(|v| is_generated(v)) {
        let t = matching(truth, v).ok_or_else(|| {
            Error::Validation(format!("no acquired volume matches generated direction {:?} (b={})", v.direction, v.bvalue))
        })?;
        for z in 0..v.num_slices() {
            let (p, q) = (v.slice(z), t.slice(z));
            if let Some(s) = slice_ssim(&p.pixels, &q.pixels, q.height, q.width)? {
                ssim_per_slice.push(s);
            }
        }
    }
    let pred_fa = colored_fa(&fit_set(pred)?);
    let truth_fa = colored_fa(&fit_set(truth)?);
    Ok(SubjectScores {
        ssim_per_slice,
        fa_error: fa_error(&pred_fa, &truth_fa)?,
        fa_map_ssim: fa_map_ssim(&pred_fa, &truth_fa)?,
    })
}

/// Aggregates subjects into one report.
pub fn evaluate_sets(pairs: &[(DwiSet, DwiSet)], method: &str, references: usize) -> Result<EvaluationReport> {
    let mut ssim = Vec::new();
    let mut fa_err = Vec::new();
    let mut fa_ssim = Vec::new();
    for (pred, truth) in pairs {
        let s = score_subject(pred, truth)?;
        ssim.extend(s.ssim_per_slice);
        fa_err.push(s.fa_error);
        fa_ssim.push(s.fa_map_ssim);
    }
    Ok(EvaluationReport::new(method, references, ssim, fa_err, fa_ssim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{simulate_dwi, synthetic_scheme, two_bar_phantom};
    use crate::pipeline::upsample::generated_source;

    #[test]
    fn identical_sets_score_perfectly() {
        let scheme = synthetic_scheme(12, 1, 1000.0).unwrap();
        let field = two_bar_phantom([12, 12, 2], 0).unwrap();
        let truth = DwiSet::new(simulate_dwi(&field, &scheme, Some(20.0), 1).unwrap()).unwrap();
        let mut pred = truth.clone();
        for v in pred.volumes.iter_mut().skip(5) {
            v.source = Some(generated_source("test"));
        }
        let r = evaluate_sets(&[(pred.clone(), truth.clone()), (pred, truth)], "test", 3).unwrap();
        assert!(r.ssim_per_slice.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert_eq!(r.ssim_per_slice.len(), 2 * 8 * 2);
        assert_eq!(r.fa_error_per_subject, vec![0.0, 0.0]);
        assert!((r.fa_map_ssim.mean - 1.0).abs() < 1e-12);
    }
}
