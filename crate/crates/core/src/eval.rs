//! Detection AP and per-class segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, Box7, ClassId, DetBox};
use crate::labels::Frame;
use crate::rangeimage::build_seg_target;
use crate::train::Detector;

/// TP/FP flag per detection, aligned with the input order. Detections are matched in
/// descending score order (stable on ties), each to the highest-IoU unmatched
/// ground-truth box of its class with IoU ≥ `iou_thresh`.
pub fn match_detections(dets: &[DetBox], gts: &[Box7], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != d.bbox.class_id {
                continue;
            }
            let iou = bev_iou(&d.bbox, g);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    /// (recall, precision) after each detection in descending score order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// All-point interpolated AP: area under the running-max-from-the-right precision envelope.
pub fn average_precision(flags: &[bool], scores: &[f64], gt_count: usize) -> Result<PRCurve> {
    if flags.len() != scores.len() {
        return Err(Error::Shape(format!("{} flags for {} scores", flags.len(), scores.len())));
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    if gt_count == 0 {
        return Ok(PRCurve { points: Vec::new(), ap: 0.0 });
    }
    let mut points = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (n, &i) in order.iter().enumerate() {
        if flags[i] {
            tp += 1;
        }
        points.push((tp as f64 / gt_count as f64, tp as f64 / (n + 1) as f64));
    }
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, (r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = *r;
    }
    Ok(PRCurve { points, ap: ap.clamp(0.0, 1.0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSegMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    /// Valid pixels whose true class is this one.
    pub support: usize,
}

/// Confusion-matrix metrics over valid pixels. Ratios with an empty denominator are 0.
pub fn seg_metrics(pred: &[u8], truth: &[u8], valid: &[bool], num_classes: usize) -> Result<Vec<ClassSegMetrics>> {
    if pred.len() != truth.len() || pred.len() != valid.len() {
        return Err(Error::Shape("segmentation arrays differ in length".into()));
    }
    let k1 = num_classes + 1;
    let mut confusion = vec![0usize; k1 * k1];
    for i in 0..pred.len() {
        if valid[i] {
            let (t, p) = (truth[i] as usize, pred[i] as usize);
            if t >= k1 || p >= k1 {
                return Err(Error::Shape(format!("class id out of range at pixel {i}")));
            }
            confusion[t * k1 + p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((0..k1)
        .map(|c| {
            let tp = confusion[c * k1 + c];
            let support: usize = (0..k1).map(|p| confusion[c * k1 + p]).sum();
            let predicted: usize = (0..k1).map(|t| confusion[t * k1 + c]).sum();
            ClassSegMetrics {
                precision: ratio(tp, predicted),
                recall: ratio(tp, support),
                iou: ratio(tp, support + predicted - tp),
                support,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub vehicle_iou: f64,
    pub pedestrian_iou: f64,
    pub score_floor: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { vehicle_iou: 0.7, pedestrian_iou: 0.5, score_floor: 0.05, nms_iou: 0.1 }
    }
}

impl EvalConfig {
    pub fn iou_for(&self, c: ClassId) -> f64 {
        if c == ClassId::PEDESTRIAN {
            self.pedestrian_iou
        } else {
            self.vehicle_iou
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if unit(self.vehicle_iou) && unit(self.pedestrian_iou) && unit(self.score_floor) && unit(self.nms_iou) {
            Ok(())
        } else {
            Err(Error::Config("evaluation thresholds must lie in [0, 1]".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: ClassId,
    pub name: String,
    pub ap: f64,
    pub gt_count: usize,
    pub det_count: usize,
    pub seg: ClassSegMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub classes: Vec<ClassReport>,
    pub background: ClassSegMetrics,
    pub mean_ap: f64,
}

impl EvalReport {
    pub fn class(&self, c: ClassId) -> Option<&ClassReport> {
        self.classes.iter().find(|r| r.class_id == c)
    }
}

/// AP per class and segmentation metrics of `d` on fully labeled frames.
pub fn evaluate(d: &Detector, frames: &[Frame], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptySubset("evaluation"));
    }
    let k = d.num_classes;
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); k];
    let mut gt_counts = vec![0usize; k];
    let (mut pred_all, mut true_all, mut valid_all) = (Vec::new(), Vec::new(), Vec::new());
    for f in frames {
        let inf = d.infer(f, cfg.score_floor, cfg.nms_iou);
        for c in 1..=k {
            let class = ClassId(c as u8);
            let dets: Vec<DetBox> = inf.detections.iter().filter(|x| x.bbox.class_id == class).copied().collect();
            let gts: Vec<Box7> = f.gt_boxes.iter().filter(|b| b.class_id == class).copied().collect();
            gt_counts[c - 1] += gts.len();
            let flags = match_detections(&dets, &gts, cfg.iou_for(class));
            scored[c - 1].extend(dets.iter().zip(flags).map(|(x, fl)| (x.score, fl)));
        }
        let truth = build_seg_target(&inf.ri, f)?;
        for pixel in 0..inf.ri.len() {
            let out = inf.probs.argmax(pixel);
            // model output index back to class id
            let class = if out == 0 { 0 } else { d.classes[out - 1].0 };
            pred_all.push(class);
        }
        true_all.extend(truth.class);
        valid_all.extend(truth.valid);
    }
    let seg = seg_metrics(&pred_all, &true_all, &valid_all, k)?;
    let mut classes = Vec::with_capacity(k);
    for c in 1..=k {
        let class = ClassId(c as u8);
        let (scores, flags): (Vec<f64>, Vec<bool>) = scored[c - 1].iter().copied().unzip();
        let pr = average_precision(&flags, &scores, gt_counts[c - 1])?;
        classes.push(ClassReport {
            class_id: class,
            name: class.name().to_string(),
            ap: pr.ap,
            gt_count: gt_counts[c - 1],
            det_count: scores.len(),
            seg: seg[c],
        });
    }
    let mean_ap = classes.iter().map(|c| c.ap).sum::<f64>() / k as f64;
    Ok(EvalReport { frames: frames.len(), classes, background: seg[0], mean_ap })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn veh(cx: f64, cy: f64) -> Box7 {
        Box7::new(cx, cy, -1.0, 4.0, 2.0, 1.5, 0.0, ClassId::VEHICLE)
    }

    #[test]
    fn exact_detections_are_all_tp() {
        let gts = vec![veh(0.0, 0.0), veh(10.0, 0.0)];
        let dets: Vec<DetBox> = gts.iter().map(|b| DetBox { bbox: *b, score: 1.0 }).collect();
        assert_eq!(match_detections(&dets, &gts, 0.7), vec![true, true]);
        let pr = average_precision(&[true, true], &[1.0, 1.0], 2).unwrap();
        assert_eq!(pr.ap, 1.0);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let gts = vec![veh(0.0, 0.0)];
        let dets = vec![DetBox { bbox: veh(0.1, 0.0), score: 0.4 }, DetBox { bbox: veh(0.05, 0.0), score: 0.9 }];
        assert_eq!(match_detections(&dets, &gts, 0.5), vec![false, true]);
    }

    #[test]
    fn wrong_class_never_matches() {
        let gts = vec![veh(0.0, 0.0)];
        let mut b = veh(0.0, 0.0);
        b.class_id = ClassId::PEDESTRIAN;
        assert_eq!(match_detections(&[DetBox { bbox: b, score: 1.0 }], &gts, 0.5), vec![false]);
    }

    #[test]
    fn hand_computed_curve() {
        let pr = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2).unwrap();
        assert!((pr.ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(pr.points, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
    }

    #[test]
    fn degenerate_counts() {
        assert_eq!(average_precision(&[], &[], 3).unwrap().ap, 0.0);
        assert_eq!(average_precision(&[false, false], &[0.3, 0.2], 0).unwrap().ap, 0.0);
        assert!(average_precision(&[true], &[], 1).is_err());
    }

    #[test]
    fn seg_metric_cases() {
        let truth = [0u8, 1, 1, 2, 0];
        let valid = [true; 5];
        let m = seg_metrics(&truth, &truth, &valid, 2).unwrap();
        assert!(m.iter().all(|c| c.iou == 1.0));
        let m = seg_metrics(&[0; 5], &truth, &valid, 2).unwrap();
        assert_eq!(m[1].recall, 0.0);
        assert_eq!(m[2].recall, 0.0);
        assert_eq!(m[0].recall, 1.0);
        assert!((m[0].precision - 0.4).abs() < 1e-15);
    }
}
