//! Failure taxonomy for predictions on a perturbed image, plus the stability
//! deviations of non-failing perturbations.

use serde::{Deserialize, Serialize};

use crate::detection::{best_same_class_match, match_one_to_one, Annotation, Detection, MatchParams};
use crate::error::{Error, Result};
use crate::geometry::iou;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureThresholds {
    /// Minimum IoU for a prediction to count as touching an object at all.
    pub tau_detect: f64,
    /// Minimum IoU for acceptable localization.
    pub tau_loc: f64,
    /// IoU at which an extra prediction on an object makes it ambiguous.
    pub tau_dup: f64,
    pub conf_floor: f64,
}

impl Default for FailureThresholds {
    fn default() -> Self {
        FailureThresholds {
            tau_detect: 0.1,
            tau_loc: 0.5,
            tau_dup: 0.5,
            conf_floor: crate::detection::DEFAULT_CONF_FLOOR,
        }
    }
}

impl FailureThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.tau_detect
            && self.tau_detect < self.tau_loc
            && self.tau_loc <= 1.0
            && self.tau_dup > 0.0
            && self.tau_dup <= 1.0
            && (0.0..=1.0).contains(&self.conf_floor);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent failure thresholds {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureType {
    Missed,
    Mislocalized,
    Misclassified,
    Ambiguous,
}

impl FailureType {
    pub const ALL: [FailureType; 4] = [
        FailureType::Missed,
        FailureType::Mislocalized,
        FailureType::Misclassified,
        FailureType::Ambiguous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FailureType::Missed => "missed",
            FailureType::Mislocalized => "mislocalized",
            FailureType::Misclassified => "misclassified",
            FailureType::Ambiguous => "ambiguous",
        }
    }
}

/// Primary outcome for one ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectOutcome {
    Correct,
    Missed,
    Mislocalized,
    Misclassified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectFailure {
    pub outcome: ObjectOutcome,
    pub ambiguous: bool,
    /// Matched prediction index and its IoU with the object.
    pub matched: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub missed: usize,
    pub mislocalized: usize,
    pub misclassified: usize,
    pub ambiguous: usize,
}

impl FailureCounts {
    pub fn get(&self, t: FailureType) -> usize {
        match t {
            FailureType::Missed => self.missed,
            FailureType::Mislocalized => self.mislocalized,
            FailureType::Misclassified => self.misclassified,
            FailureType::Ambiguous => self.ambiguous,
        }
    }

    pub fn total(&self) -> usize {
        self.missed + self.mislocalized + self.misclassified + self.ambiguous
    }

    pub fn add(&mut self, other: &FailureCounts) {
        self.missed += other.missed;
        self.mislocalized += other.mislocalized;
        self.misclassified += other.misclassified;
        self.ambiguous += other.ambiguous;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub failed: bool,
    pub counts: FailureCounts,
    pub objects: Vec<ObjectFailure>,
    /// Predictions overlapping no object by at least `tau_detect`. Reported only.
    pub spurious: usize,
}

/// Classifies each ground-truth object against the predictions.
///
/// Objects and predictions are paired one-to-one over all classes, keeping
/// only pairs with IoU of at least `tau_detect`. A matched same-class
/// prediction below `tau_loc` is mislocalized; a matched wrong-class
/// prediction at or above `tau_loc` is misclassified and below it the object
/// counts as missed. Any unmatched prediction reaching `tau_dup` with an
/// object marks that object ambiguous, at most once per object.
pub fn classify_failures(gts: &[Annotation], preds: &[Detection], th: &FailureThresholds) -> Result<FailureRecord> {
    if gts.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let matching = match_one_to_one(
        gts,
        preds,
        MatchParams {
            same_class_only: false,
            min_iou: th.tau_detect,
        },
    );

    let mut counts = FailureCounts::default();
    let mut objects = Vec::with_capacity(gts.len());
    for (g, assigned) in gts.iter().zip(&matching.assigned) {
        let outcome = match *assigned {
            None => ObjectOutcome::Missed,
            Some((j, v)) if preds[j].class_id == g.class_id => {
                if v >= th.tau_loc {
                    ObjectOutcome::Correct
                } else {
                    ObjectOutcome::Mislocalized
                }
            }
            Some((_, v)) if v >= th.tau_loc => ObjectOutcome::Misclassified,
            Some(_) => ObjectOutcome::Missed,
        };
        match outcome {
            ObjectOutcome::Correct => {}
            ObjectOutcome::Missed => counts.missed += 1,
            ObjectOutcome::Mislocalized => counts.mislocalized += 1,
            ObjectOutcome::Misclassified => counts.misclassified += 1,
        }
        let ambiguous = preds
            .iter()
            .zip(&matching.used)
            .any(|(p, used)| !used && iou(&g.bbox, &p.bbox) >= th.tau_dup);
        if ambiguous {
            counts.ambiguous += 1;
        }
        objects.push(ObjectFailure {
            outcome,
            ambiguous,
            matched: *assigned,
        });
    }

    let spurious = preds
        .iter()
        .filter(|p| gts.iter().all(|g| iou(&g.bbox, &p.bbox) < th.tau_detect))
        .count();

    Ok(FailureRecord {
        failed: counts.total() > 0,
        counts,
        objects,
        spurious,
    })
}

pub fn failure_rate(records: &[FailureRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(records.iter().filter(|r| r.failed).count() as f64 / records.len() as f64)
}

pub fn failure_occurrences(records: &[FailureRecord], t: FailureType) -> usize {
    records.iter().map(|r| r.counts.get(t)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityDeviation {
    pub delta_conf: f64,
    pub delta_loc: f64,
}

/// Per-object absolute change of the best same-class confidence and IoU.
/// A missing match contributes 0 on that side.
pub fn stability_deviation(orig: &[Detection], pert: &[Detection], gts: &[Annotation]) -> Vec<StabilityDeviation> {
    gts.iter()
        .map(|g| {
            let a = best_same_class_match(g, orig);
            let b = best_same_class_match(g, pert);
            let conf = |m: Option<crate::detection::BestMatch>| m.map_or(0.0, |m| m.confidence);
            let loc = |m: Option<crate::detection::BestMatch>| m.map_or(0.0, |m| m.iou);
            StabilityDeviation {
                delta_conf: (conf(a) - conf(b)).abs(),
                delta_loc: (loc(a) - loc(b)).abs(),
            }
        })
        .collect()
}

/// Per-perturbation deviation: the componentwise maximum over objects.
pub fn perturbation_deviation(per_object: &[StabilityDeviation]) -> StabilityDeviation {
    per_object.iter().fold(
        StabilityDeviation {
            delta_conf: 0.0,
            delta_loc: 0.0,
        },
        |acc, d| StabilityDeviation {
            delta_conf: acc.delta_conf.max(d.delta_conf),
            delta_loc: acc.delta_loc.max(d.delta_loc),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityThresholds {
    pub minor_max: f64,
    pub small_max: f64,
    pub moderate_max: f64,
}

impl Default for StabilityThresholds {
    fn default() -> Self {
        StabilityThresholds {
            minor_max: 0.01,
            small_max: 0.05,
            moderate_max: 0.10,
        }
    }
}

impl StabilityThresholds {
    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.minor_max && self.minor_max < self.small_max && self.small_max < self.moderate_max {
            Ok(())
        } else {
            Err(Error::Config(format!("stability thresholds must increase strictly: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityCategory {
    Minor,
    Small,
    Moderate,
    Large,
}

impl StabilityCategory {
    pub const ALL: [StabilityCategory; 4] = [
        StabilityCategory::Minor,
        StabilityCategory::Small,
        StabilityCategory::Moderate,
        StabilityCategory::Large,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StabilityCategory::Minor => "minor",
            StabilityCategory::Small => "small",
            StabilityCategory::Moderate => "moderate",
            StabilityCategory::Large => "large",
        }
    }

    pub fn is_violation(self) -> bool {
        matches!(self, StabilityCategory::Moderate | StabilityCategory::Large)
    }
}

/// Upper edges are inclusive: `(0.01, 0.05]` is small.
pub fn categorize_stability(delta: f64, th: &StabilityThresholds) -> StabilityCategory {
    if delta <= th.minor_max {
        StabilityCategory::Minor
    } else if delta <= th.small_max {
        StabilityCategory::Small
    } else if delta <= th.moderate_max {
        StabilityCategory::Moderate
    } else {
        StabilityCategory::Large
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn gt(class_id: usize, b: BoundingBox) -> Annotation {
        Annotation {
            class_id,
            class_name: ["screw", "noscrew"][class_id].into(),
            bbox: b,
        }
    }

    fn det(class_id: usize, confidence: f64, b: BoundingBox) -> Detection {
        Detection {
            class_id,
            confidence,
            bbox: b,
        }
    }

    /// Box `[0, 0, 10, 10]` shifted right so that its IoU with the original is `v`.
    fn shifted_with_iou(v: f64) -> BoundingBox {
        // iou = 10 o / (200 - 10 o) for overlap width o
        let o = 20.0 * v / (1.0 + v);
        let dx = 10.0 - o;
        bb(dx, 0.0, 10.0 + dx, 10.0)
    }

    #[test]
    fn shifted_helper_hits_target() {
        for v in [0.05, 0.3, 0.8, 0.9] {
            assert!((iou(&bb(0.0, 0.0, 10.0, 10.0), &shifted_with_iou(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_predictions_do_not_fail() {
        let gts = [gt(0, bb(0.0, 0.0, 10.0, 10.0)), gt(1, bb(20.0, 20.0, 30.0, 30.0))];
        let preds: Vec<Detection> = gts.iter().map(|g| det(g.class_id, 0.9, g.bbox)).collect();
        let r = classify_failures(&gts, &preds, &FailureThresholds::default()).unwrap();
        assert!(!r.failed);
        assert_eq!(r.counts.total(), 0);
    }

    #[test]
    fn no_predictions_miss_everything() {
        let gts = [gt(0, bb(0.0, 0.0, 10.0, 10.0)), gt(1, bb(20.0, 20.0, 30.0, 30.0))];
        let r = classify_failures(&gts, &[], &FailureThresholds::default()).unwrap();
        assert!(r.failed);
        assert_eq!(r.counts.missed, 2);
        assert!(classify_failures(&[], &[], &FailureThresholds::default()).is_err());
    }

    #[test]
    fn wrong_class_is_misclassified_when_localized() {
        let gts = [gt(1, bb(0.0, 0.0, 10.0, 10.0))];
        let r = classify_failures(&gts, &[det(0, 0.9, shifted_with_iou(0.9))], &FailureThresholds::default()).unwrap();
        assert_eq!(r.objects[0].outcome, ObjectOutcome::Misclassified);
        assert_eq!(r.counts.misclassified, 1);

        let r = classify_failures(&gts, &[det(0, 0.9, shifted_with_iou(0.3))], &FailureThresholds::default()).unwrap();
        assert_eq!(r.objects[0].outcome, ObjectOutcome::Missed);
    }

    #[test]
    fn poor_overlap_is_mislocalized() {
        let gts = [gt(0, bb(0.0, 0.0, 10.0, 10.0))];
        let th = FailureThresholds::default();
        let r = classify_failures(&gts, &[det(0, 0.9, shifted_with_iou(0.3))], &th).unwrap();
        assert_eq!(r.objects[0].outcome, ObjectOutcome::Mislocalized);
        assert_eq!(r.counts.mislocalized, 1);

        let r = classify_failures(&gts, &[det(0, 0.9, shifted_with_iou(0.05))], &th).unwrap();
        assert_eq!(r.objects[0].outcome, ObjectOutcome::Missed);
        assert_eq!(r.spurious, 1);

        let r = classify_failures(&gts, &[det(0, 0.9, shifted_with_iou(0.5))], &th).unwrap();
        assert!(!r.failed);
    }

    #[test]
    fn duplicate_is_ambiguous() {
        let gts = [gt(0, bb(0.0, 0.0, 10.0, 10.0))];
        let b = shifted_with_iou(0.8);
        let r = classify_failures(&gts, &[det(0, 0.9, b), det(0, 0.8, b)], &FailureThresholds::default()).unwrap();
        assert_eq!(r.objects[0].outcome, ObjectOutcome::Correct);
        assert!(r.objects[0].ambiguous);
        assert_eq!(r.counts, FailureCounts { ambiguous: 1, ..Default::default() });
        assert!(r.failed);

        // three stacked duplicates still count once for the object
        let r = classify_failures(
            &gts,
            &[det(0, 0.9, b), det(0, 0.8, b), det(1, 0.7, b)],
            &FailureThresholds::default(),
        )
        .unwrap();
        assert_eq!(r.counts.ambiguous, 1);
    }

    #[test]
    fn spurious_predictions_do_not_fail() {
        let gts = [gt(0, bb(0.0, 0.0, 10.0, 10.0))];
        let preds = [det(0, 0.9, gts[0].bbox), det(1, 0.9, bb(50.0, 50.0, 60.0, 60.0))];
        let r = classify_failures(&gts, &preds, &FailureThresholds::default()).unwrap();
        assert!(!r.failed);
        assert_eq!(r.spurious, 1);
    }

    #[test]
    fn rate_and_occurrences() {
        let gts = [gt(0, bb(0.0, 0.0, 10.0, 10.0))];
        let th = FailureThresholds::default();
        let ok = classify_failures(&gts, &[det(0, 0.9, gts[0].bbox)], &th).unwrap();
        let bad = classify_failures(&gts, &[], &th).unwrap();
        assert!(failure_rate(&[]).is_err());
        assert_eq!(failure_rate(&[bad.clone(), bad.clone()]).unwrap(), 1.0);
        assert_eq!(failure_rate(&[ok.clone(), ok.clone()]).unwrap(), 0.0);
        let four = [bad.clone(), ok.clone(), ok.clone(), ok.clone()];
        assert_eq!(failure_rate(&four).unwrap(), 0.25);
        assert_eq!(failure_occurrences(&[], FailureType::Missed), 0);
        assert_eq!(failure_occurrences(&four, FailureType::Missed), 1);

        let mut three = ok.clone();
        three.counts.misclassified = 3;
        assert_eq!(failure_occurrences(&[three], FailureType::Misclassified), 3);
    }

    #[test]
    fn stability_fixtures() {
        let gts = [gt(0, bb(0.0, 0.0, 10.0, 10.0)), gt(0, bb(20.0, 0.0, 30.0, 10.0))];
        let orig = [det(0, 0.92, gts[0].bbox), det(0, 0.9, gts[1].bbox)];
        let same = stability_deviation(&orig, &orig, &gts);
        assert_eq!(perturbation_deviation(&same), StabilityDeviation { delta_conf: 0.0, delta_loc: 0.0 });

        let pert = [det(0, 0.78, gts[0].bbox), det(0, 0.9, gts[1].bbox)];
        let d = stability_deviation(&orig, &pert, &gts);
        assert!((d[0].delta_conf - 0.14).abs() < 1e-12);
        assert_eq!(d[1].delta_conf, 0.0);
        assert!((perturbation_deviation(&d).delta_conf - 0.14).abs() < 1e-12);

        let moved = [det(0, 0.92, gts[0].bbox), det(0, 0.9, shifted_with_iou(0.8).translate(20.0))];
        let d = perturbation_deviation(&stability_deviation(&orig, &moved, &gts));
        assert!((d.delta_loc - 0.2).abs() < 1e-12);
        assert_eq!(d.delta_conf, 0.0);

        let gone = stability_deviation(&orig, &[], &gts);
        assert!((gone[0].delta_conf - 0.92).abs() < 1e-12);
        assert_eq!(gone[0].delta_loc, 1.0);
    }

    trait Translate {
        fn translate(self, dx: f64) -> Self;
    }

    impl Translate for BoundingBox {
        fn translate(self, dx: f64) -> Self {
            bb(self.x_min + dx, self.y_min, self.x_max + dx, self.y_max)
        }
    }

    #[test]
    fn category_boundaries() {
        let th = StabilityThresholds::default();
        let cases = [
            (0.0, StabilityCategory::Minor),
            (0.005, StabilityCategory::Minor),
            (0.01, StabilityCategory::Minor),
            (0.0100001, StabilityCategory::Small),
            (0.05, StabilityCategory::Small),
            (0.07, StabilityCategory::Moderate),
            (0.10, StabilityCategory::Moderate),
            (0.1000001, StabilityCategory::Large),
            (0.20, StabilityCategory::Large),
        ];
        for (d, want) in cases {
            assert_eq!(categorize_stability(d, &th), want, "{d}");
        }
        assert!(!StabilityCategory::Small.is_violation());
        assert!(StabilityCategory::Moderate.is_violation());
        assert!(StabilityCategory::Large.is_violation());
        assert!(StabilityThresholds { minor_max: 0.05, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn category_is_monotone(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let th = StabilityThresholds::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(categorize_stability(lo, &th) <= categorize_stability(hi, &th));
        }

        #[test]
        fn failed_iff_counts_positive(
            boxes in proptest::collection::vec((0.0..40.0f64, 0.0..40.0f64, 2.0..20.0f64, 2.0..20.0f64, 0usize..2), 1..7),
            n_gt in 1usize..4,
        ) {
            let n_gt = n_gt.min(boxes.len());
            let mk = |&(x, y, w, h, _): &(f64, f64, f64, f64, usize)| bb(x, y, x + w, y + h);
            let gts: Vec<Annotation> = boxes[..n_gt].iter().map(|b| gt(b.4, mk(b))).collect();
            let preds: Vec<Detection> = boxes[n_gt..].iter().map(|b| det(b.4, 0.5, mk(b))).collect();
            let r = classify_failures(&gts, &preds, &FailureThresholds::default()).unwrap();
            prop_assert_eq!(r.failed, r.counts.total() > 0);
            prop_assert!(r.counts.missed + r.counts.mislocalized + r.counts.misclassified <= gts.len());
            prop_assert!(r.counts.ambiguous <= gts.len());
        }
    }
}
