//! Frames, single-class dataset construction, and pseudo-label merging.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, Box7, ClassId, ClassSet, DetBox, Point3};
use crate::losses::ProbField;
use crate::rangeimage::SegTarget;
use crate::rng::keyed_rng;

const SPLIT_STREAM: u64 = 0x5b1d;

/// One LiDAR scene with the boxes of the classes that were actually labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub points: Vec<Point3>,
    pub gt_boxes: Vec<Box7>,
    pub labeled_classes: ClassSet,
}

impl Frame {
    /// Classes of `1..=num_classes` without labels in this frame.
    pub fn unlabeled_classes(&self, num_classes: usize) -> ClassSet {
        self.labeled_classes.complement(num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled_classes.is_empty() {
            return Err(Error::Format(format!("frame {} labels no class", self.id)));
        }
        for b in &self.gt_boxes {
            if !self.labeled_classes.contains(b.class_id) {
                return Err(Error::Format(format!(
                    "frame {} has a box of unlabeled class {}",
                    self.id, b.class_id.0
                )));
            }
            if !(b.length > 0.0 && b.width > 0.0 && b.height > 0.0) {
                return Err(Error::Format(format!("frame {} has a degenerate box", self.id)));
            }
            let vals = [b.cx, b.cy, b.cz, b.length, b.width, b.height, b.heading];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("frame {} has a non-finite box", self.id)));
            }
        }
        if self
            .points
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()))
        {
            return Err(Error::Format(format!("frame {} has a non-finite point", self.id)));
        }
        Ok(())
    }
}

/// Keeps only class `c`'s boxes and marks `c` as the sole labeled class.
pub fn mask_to_single_class(f: &Frame, c: ClassId) -> Frame {
    Frame {
        id: f.id,
        points: f.points.clone(),
        gt_boxes: f.gt_boxes.iter().filter(|b| b.class_id == c).copied().collect(),
        labeled_classes: ClassSet::single(c),
    }
}

/// Shuffles by `seed`, masks the first `⌊x·M⌋` frames to vehicles and the rest to pedestrians.
pub fn split_dataset(frames: &[Frame], vehicle_fraction: f64, seed: u64) -> Result<(Vec<Frame>, Vec<Frame>)> {
    if !(vehicle_fraction > 0.0 && vehicle_fraction < 1.0) {
        return Err(Error::Config(format!("vehicle fraction must be in (0, 1), got {vehicle_fraction}")));
    }
    let m = frames.len();
    let n_vehicle = (vehicle_fraction * m as f64 + 1e-9).floor() as usize;
    if n_vehicle == 0 || n_vehicle == m {
        return Err(Error::Config(format!(
            "split {vehicle_fraction} of {m} frames leaves a subset empty"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut keyed_rng(seed, &[SPLIT_STREAM]));
    let vehicle = order[..n_vehicle].iter().map(|&i| mask_to_single_class(&frames[i], ClassId::VEHICLE)).collect();
    let pedestrian =
        order[n_vehicle..].iter().map(|&i| mask_to_single_class(&frames[i], ClassId::PEDESTRIAN)).collect();
    Ok((vehicle, pedestrian))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoBox {
    pub bbox: Box7,
    pub score: f64,
    pub provenance: Provenance,
}

/// Trusted boxes per class: ground truth for labeled classes, thresholded detections otherwise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabels {
    /// Indexed by `class_id - 1`.
    pub per_class: Vec<Vec<PseudoBox>>,
}

impl PseudoLabels {
    pub fn boxes(&self, k: ClassId) -> impl Iterator<Item = &Box7> {
        self.per_class
            .get(k.index().wrapping_sub(1))
            .into_iter()
            .flatten()
            .map(|p| &p.bbox)
    }

    pub fn all_boxes(&self) -> impl Iterator<Item = &Box7> {
        self.per_class.iter().flatten().map(|p| &p.bbox)
    }

    pub fn class_boxes(&self, k: ClassId) -> Vec<Box7> {
        self.boxes(k).copied().collect()
    }

    /// Ground truth only; unlabeled classes carry no boxes.
    pub fn ground_truth(f: &Frame, num_classes: usize) -> Self {
        merge_box_pseudo(f, &[], f64::INFINITY, num_classes)
    }
}

/// Fills missing pixels with the labeler's most likely class among background and the
/// unlabeled classes, and flags the ones whose restricted confidence is below `tau_pixel`.
///
/// Untrusted pixels keep class 0. Pixels outside the missing set are left untouched.
pub fn merge_pixel_pseudo(
    t: &SegTarget,
    labeler: &ProbField,
    labeled: ClassSet,
    tau_pixel: f64,
) -> Result<SegTarget> {
    if labeler.pixels() != t.len() {
        return Err(Error::Shape(format!(
            "labeler covers {} pixels, target has {}",
            labeler.pixels(),
            t.len()
        )));
    }
    let num_classes = labeler.classes - 1;
    let unlabeled = labeled.complement(num_classes);
    let mut out = t.clone();
    for pixel in 0..t.len() {
        if !t.valid[pixel] {
            continue;
        }
        labeler.check_normalized(pixel)?;
        if !t.missing[pixel] {
            continue;
        }
        let p = labeler.row(pixel);
        let (mut best_class, mut best_p) = (0u8, p[0]);
        for c in unlabeled.iter() {
            if p[c.index()] > best_p {
                best_class = c.0;
                best_p = p[c.index()];
            }
        }
        if best_p < tau_pixel {
            out.class[pixel] = 0;
            out.untrusted[pixel] = true;
        } else {
            out.class[pixel] = best_class;
            out.untrusted[pixel] = false;
        }
    }
    Ok(out)
}

/// Ground truth for labeled classes; detections with `score ≥ tau_bbox` for the rest.
pub fn merge_box_pseudo(f: &Frame, dets: &[DetBox], tau_bbox: f64, num_classes: usize) -> PseudoLabels {
    let mut per_class = vec![Vec::new(); num_classes];
    for k in 1..=num_classes {
        let class = ClassId(k as u8);
        per_class[k - 1] = if f.labeled_classes.contains(class) {
            f.gt_boxes
                .iter()
                .filter(|b| b.class_id == class)
                .map(|b| PseudoBox { bbox: *b, score: 1.0, provenance: Provenance::GroundTruth })
                .collect()
        } else {
            dets.iter()
                .filter(|d| d.bbox.class_id == class && d.score >= tau_bbox)
                .map(|d| PseudoBox { bbox: d.bbox, score: d.score, provenance: Provenance::Pseudo })
                .collect()
        };
    }
    PseudoLabels { per_class }
}

/// Equal-weight average of two per-pixel distributions.
pub fn ensemble_pixel(a: &ProbField, b: &ProbField) -> Result<ProbField> {
    if a.classes != b.classes || a.data.len() != b.data.len() {
        return Err(Error::Shape("ensembled probability fields differ in shape".into()));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok(ProbField { classes: a.classes, data })
}

/// Pools both detection sets and suppresses overlaps.
pub fn ensemble_boxes(a: &[DetBox], b: &[DetBox], iou_thresh: f64) -> Vec<DetBox> {
    let pooled: Vec<DetBox> = a.iter().chain(b).copied().collect();
    nms(&pooled, iou_thresh)
}
