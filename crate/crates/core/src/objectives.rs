//! The minimized objective vector `(f1, f2, f3)` and candidate evaluation.
//!
//! * `f1`: mean over objects of the best same-class prediction's confidence.
//! * `f2`: mean over objects of that prediction's IoU.
//! * `f3`: fraction of pixels the patch actually changes, times the 95th
//!   percentile of the per-pixel shift divided by the maximum allowed shift.
//!
//! Unmatched objects contribute zero to `f1` and `f2`.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::detection::{apply_conf_floor, best_same_class_match, Annotation, DatasetItem, Detection};
use crate::detector::DetectorHandle;
use crate::error::{Error, Result};
use crate::perturbation::{apply_mask, gaussian_mask, MaskGrid, PerturbationGenome};

/// Minimum per-pixel shift that survives rounding to an 8-bit value.
pub const AFFECTED_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
}

impl ObjectiveVector {
    pub fn new(f1: f64, f2: f64, f3: f64) -> Self {
        ObjectiveVector { f1, f2, f3 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.f1, self.f2, self.f3]
    }

    /// Pareto dominance under minimization.
    pub fn dominates(&self, other: &ObjectiveVector) -> bool {
        let a = self.as_array();
        let b = other.as_array();
        a.iter().zip(&b).all(|(x, y)| x <= y) && a.iter().zip(&b).any(|(x, y)| x < y)
    }

    pub fn lex_cmp(&self, other: &ObjectiveVector) -> std::cmp::Ordering {
        self.f1
            .total_cmp(&other.f1)
            .then(self.f2.total_cmp(&other.f2))
            .then(self.f3.total_cmp(&other.f3))
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedCandidate {
    pub genome: PerturbationGenome,
    pub objectives: ObjectiveVector,
    /// Predictions on the perturbed image after the confidence floor.
    pub predictions: Vec<Detection>,
    pub evaluation_index: usize,
}

pub fn confidence_objective(gts: &[Annotation], preds: &[Detection]) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let sum: f64 = gts
        .iter()
        .map(|g| best_same_class_match(g, preds).map_or(0.0, |m| m.confidence))
        .sum();
    Ok(sum / gts.len() as f64)
}

pub fn localization_objective(gts: &[Annotation], preds: &[Detection]) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let sum: f64 = gts
        .iter()
        .map(|g| best_same_class_match(g, preds).map_or(0.0, |m| m.iou))
        .sum();
    Ok(sum / gts.len() as f64)
}

/// Linear interpolation between order statistics of a sorted sample.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Perturbation budget of a rendered mask. A pixel is affected when its
/// largest channel shift `weight * max|delta|` reaches half an intensity unit.
pub fn budget_objective(mask: &MaskGrid, epsilon: f64) -> f64 {
    let (w, h) = mask.image_size;
    let total = w as f64 * h as f64;
    let amp = mask.genome.max_abs_delta();
    if total == 0.0 || amp == 0.0 {
        return 0.0;
    }
    let mut mags: Vec<f64> = mask
        .nonzero()
        .map(|(_, _, weight)| weight * amp)
        .filter(|m| *m >= AFFECTED_THRESHOLD)
        .collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let area_frac = mags.len() as f64 / total;
    let mag95 = percentile_sorted(&mags, 0.95).unwrap_or(0.0);
    (area_frac * mag95 / epsilon).clamp(0.0, 1.0)
}

/// Objectives of predictions already produced on a perturbed image.
pub fn objectives_for(gts: &[Annotation], preds: &[Detection], mask: &MaskGrid, epsilon: f64) -> Result<ObjectiveVector> {
    Ok(ObjectiveVector {
        f1: confidence_objective(gts, preds)?,
        f2: localization_objective(gts, preds)?,
        f3: budget_objective(mask, epsilon),
    })
}

/// Renders the genome, queries the detector once and scores the result.
pub fn evaluate_candidate(
    item: &DatasetItem,
    genome: &PerturbationGenome,
    detector: &DetectorHandle,
    conf_floor: f64,
    epsilon: f64,
    evaluation_index: usize,
) -> Result<EvaluatedCandidate> {
    if item.annotations.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let mask = gaussian_mask(genome, item.image_size());
    let perturbed: RgbImage = apply_mask(&item.image, &mask);
    let predictions = apply_conf_floor(&detector.detect(&perturbed)?, conf_floor);
    let objectives = objectives_for(&item.annotations, &predictions, &mask, epsilon)?;
    Ok(EvaluatedCandidate {
        genome: *genome,
        objectives,
        predictions,
        evaluation_index,
    })
}
