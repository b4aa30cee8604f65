//! Overlap and lesion-wise detection scores, timepoint inversion, and
//! volume trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{LabelAvailability, SubjectRecord};
use crate::volume::{connected_components, filter_small_components, Connectivity, Mask};

/// `2|A ∩ G| / (|A| + |G|)`, and 1 when both masks are empty.
pub fn dice_score(a: &Mask, g: &Mask) -> Result<f64> {
    a.grid().ensure_compatible(g.grid(), "dice operands")?;
    let (na, ng) = (a.count(), g.count());
    if na + ng == 0 {
        return Ok(1.0);
    }
    let both = a.data().iter().zip(g.data()).filter(|(x, y)| **x != 0 && **y != 0).count();
    Ok(2.0 * both as f64 / (na + ng) as f64)
}

/// How a ground-truth lesion's overlap fraction decides detection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRule {
    /// `min_overlap <= fraction <= max_overlap`.
    Literal,
    /// `fraction >= min_overlap`.
    #[default]
    LowerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionParams {
    pub min_overlap: f64,
    pub max_overlap: f64,
    /// Components smaller than this are dropped from both masks first.
    pub min_volume_mm3: f64,
    pub connectivity: Connectivity,
    pub rule: OverlapRule,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            min_overlap: 0.10,
            max_overlap: 0.70,
            min_volume_mm3: 3.0,
            connectivity: Connectivity::TwentySix,
            rule: OverlapRule::LowerOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatch {
    pub gt_component: usize,
    pub overlap_fraction: f64,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Detected ground-truth lesions.
    pub tp: usize,
    /// Predicted components touching any ground-truth lesion.
    pub tp_pred: usize,
    pub n_gt_lesions: usize,
    pub n_pred_lesions: usize,
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
    pub per_lesion: Vec<LesionMatch>,
}

/// Lesion-wise sensitivity, precision and F1.
///
/// Both masks are first stripped of components below `min_volume_mm3`.
/// Sensitivity is the detected fraction of ground-truth components;
/// precision is the fraction of predicted components that intersect any
/// ground-truth component. Each ratio is 1 when its denominator is 0, and
/// F1 is 0 when both ratios are.
pub fn detection_f1(pred: &Mask, gt: &Mask, params: &DetectionParams) -> Result<DetectionReport> {
    pred.grid().ensure_compatible(gt.grid(), "detection operands")?;
    let pred = filter_small_components(pred, params.min_volume_mm3, params.connectivity)?;
    let gt = filter_small_components(gt, params.min_volume_mm3, params.connectivity)?;
    let gt_comps = connected_components(&gt, params.connectivity);
    let pred_comps = connected_components(&pred, params.connectivity);

    let per_lesion: Vec<LesionMatch> = gt_comps
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let n = c.len() as f64;
            let hit = c.voxels.iter().filter(|&&v| pred.contains(v)).count() as f64;
            let detected = match params.rule {
                OverlapRule::LowerOnly => hit >= params.min_overlap * n,
                OverlapRule::Literal => hit >= params.min_overlap * n && hit <= params.max_overlap * n,
            };
            LesionMatch {
                gt_component: i,
                overlap_fraction: hit / n,
                detected,
            }
        })
        .collect();
    let tp = per_lesion.iter().filter(|m| m.detected).count();
    let tp_pred = pred_comps
        .iter()
        .filter(|c| c.voxels.iter().any(|&v| gt.contains(v)))
        .count();
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let sensitivity = ratio(tp, gt_comps.len());
    let precision = ratio(tp_pred, pred_comps.len());
    let f1 = if sensitivity + precision == 0.0 {
        0.0
    } else {
        2.0 * sensitivity * precision / (sensitivity + precision)
    };
    Ok(DetectionReport {
        tp,
        tp_pred,
        n_gt_lesions: gt_comps.len(),
        n_pred_lesions: pred_comps.len(),
        sensitivity,
        precision,
        f1,
        per_lesion,
    })
}

/// Reverses the timepoint order of a longitudinal subject.
///
/// A lesion new at old timepoint `k` is absent at `k - 1`; after reversal it
/// disappears between those scans, so its map becomes the vanishing label
/// of old timepoint `k - 1`, and vice versa. Images, white matter and
/// all-lesion maps move with their scans. Availability flags are recomputed
/// from the labels present.
pub fn invert_timepoints(subject: &SubjectRecord) -> Result<SubjectRecord> {
    if !subject.is_longitudinal() {
        return Err(Error::Argument(format!(
            "subject {} is cross-sectional; only longitudinal subjects can be inverted",
            subject.id
        )));
    }
    let old = &subject.timepoints;
    let t = old.len();
    let mut tps: Vec<_> = old.iter().rev().cloned().collect();
    for tp in &mut tps {
        tp.new = None;
        tp.vanishing = None;
    }
    for k in 1..t {
        // pair (k-1, k) becomes (t-1-k, t-k)
        let target = &mut tps[t - k];
        target.vanishing = old[k].new.clone();
        target.new = old[k].vanishing.clone();
    }
    let later = || tps.iter().skip(1);
    let availability = LabelAvailability {
        all_t1: tps.first().is_some_and(|tp| tp.all.is_some()),
        all_t2: later().any(|tp| tp.all.is_some()),
        new_t2: later().any(|tp| tp.new.is_some()),
        vanishing_t2: later().any(|tp| tp.vanishing.is_some()),
    };
    Ok(SubjectRecord {
        timepoints: tps,
        availability,
        ..subject.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeTrajectory {
    pub subject: String,
    pub predicted_mm3: Vec<f64>,
    pub ground_truth_mm3: Vec<f64>,
}

impl VolumeTrajectory {
    pub fn correlation(&self) -> Result<f64> {
        pearson(&self.predicted_mm3, &self.ground_truth_mm3)
    }
}

/// Per-timepoint lesion volumes of predictions and ground truth.
pub fn volume_trajectory(subject: &str, preds: &[Mask], gts: &[Mask]) -> Result<VolumeTrajectory> {
    if preds.len() != gts.len() || preds.len() < 2 {
        return Err(Error::Argument(format!(
            "trajectory needs equal lengths of at least 2, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        p.grid().ensure_compatible(g.grid(), "trajectory timepoint")?;
    }
    Ok(VolumeTrajectory {
        subject: subject.to_string(),
        predicted_mm3: preds.iter().map(Mask::volume_mm3).collect(),
        ground_truth_mm3: gts.iter().map(Mask::volume_mm3).collect(),
    })
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument(format!(
            "pearson needs equal lengths of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests;
