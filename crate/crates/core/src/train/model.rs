//! The desk-scale two-stage detector: a linear softmax pixel classifier followed by
//! one linear voxel head per class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, Box7, ClassId, DetBox, Point3};
use crate::labels::Frame;
use crate::losses::{HeadOutputs, ProbField, REGRESSION_OUTPUTS};
use crate::rangeimage::{pixel_features, project, PixelFeatures, ProjectionConfig, RangeImage, PIXEL_FEATURES};
use crate::voxel::{bin_to_heading, voxel_features, voxelize, VoxelConfig, VoxelGrid, VOXEL_FEATURES};

/// Linear scores over `PIXEL_FEATURES` inputs for `outputs` classes (background first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Model {
    pub outputs: usize,
    /// Row-major `PIXEL_FEATURES x outputs`.
    pub weights: Vec<f64>,
}

impl Stage1Model {
    pub fn zeros(outputs: usize) -> Self {
        Stage1Model { outputs, weights: vec![0.0; PIXEL_FEATURES * outputs] }
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of linear scores at every pixel.
pub fn forward_stage1(m: &Stage1Model, feats: &PixelFeatures) -> ProbField {
    let k = m.outputs;
    let mut data = vec![0.0; feats.pixels * k];
    // empty pixels carry only the bias input, so they all share one distribution
    let mut bias_only = m.weights[(PIXEL_FEATURES - 1) * k..].to_vec();
    softmax_in_place(&mut bias_only);
    for pixel in 0..feats.pixels {
        let x = feats.row(pixel);
        let z = &mut data[pixel * k..(pixel + 1) * k];
        if x[PIXEL_FEATURES - 1] == 1.0 && x[..PIXEL_FEATURES - 1].iter().all(|v| *v == 0.0) {
            z.copy_from_slice(&bias_only);
            continue;
        }
        for (f, xf) in x.iter().enumerate() {
            if *xf == 0.0 {
                continue;
            }
            let w = &m.weights[f * k..(f + 1) * k];
            for j in 0..k {
                z[j] += xf * w[j];
            }
        }
        softmax_in_place(z);
    }
    ProbField { classes: k, data }
}

/// One class's second stage: heatmap logit, heading-bin scores and regression outputs,
/// all linear in the voxel features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Head {
    pub class_id: ClassId,
    pub bins: usize,
    pub voxel: VoxelConfig,
    /// `VOXEL_FEATURES`
    pub heat: Vec<f64>,
    /// `VOXEL_FEATURES x bins`
    pub bin_weights: Vec<f64>,
    /// `VOXEL_FEATURES x REGRESSION_OUTPUTS`
    pub regression: Vec<f64>,
}

impl Stage2Head {
    pub fn zeros(class_id: ClassId, bins: usize, voxel: VoxelConfig) -> Self {
        Stage2Head {
            class_id,
            bins,
            voxel,
            heat: vec![0.0; VOXEL_FEATURES],
            bin_weights: vec![0.0; VOXEL_FEATURES * bins],
            regression: vec![0.0; VOXEL_FEATURES * REGRESSION_OUTPUTS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Model {
    pub heads: Vec<Stage2Head>,
}

impl Stage2Model {
    pub fn head(&self, k: ClassId) -> Option<&Stage2Head> {
        self.heads.iter().find(|h| h.class_id == k)
    }
}

/// Outputs of one head plus the features they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    pub features: Vec<f64>,
    pub outputs: HeadOutputs,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn forward_head(head: &Stage2Head, grid: &VoxelGrid) -> Stage2Output {
    let n = grid.len();
    let b = head.bins;
    let features = voxel_features(grid, b);
    let mut out = HeadOutputs {
        heat: vec![0.0; n],
        bins: vec![0.0; n * b],
        regression: vec![0.0; n * REGRESSION_OUTPUTS],
    };
    for v in 0..n {
        let x = &features[v * VOXEL_FEATURES..(v + 1) * VOXEL_FEATURES];
        let logit: f64 = x.iter().zip(&head.heat).map(|(a, w)| a * w).sum();
        // keep ĥ strictly inside (0, 1) in floating point
        out.heat[v] = sigmoid(logit.clamp(-30.0, 30.0));
        let scores = &mut out.bins[v * b..(v + 1) * b];
        let reg = &mut out.regression[v * REGRESSION_OUTPUTS..(v + 1) * REGRESSION_OUTPUTS];
        for (f, xf) in x.iter().enumerate() {
            for j in 0..b {
                scores[j] += xf * head.bin_weights[f * b + j];
            }
            for j in 0..REGRESSION_OUTPUTS {
                reg[j] += xf * head.regression[f * REGRESSION_OUTPUTS + j];
            }
        }
        softmax_in_place(scores);
    }
    Stage2Output { features, outputs: out }
}

/// Runs class `k`'s head on `grid`.
pub fn forward_stage2(m: &Stage2Model, grid: &VoxelGrid, k: ClassId) -> Result<Stage2Output> {
    if grid.class_id != k {
        return Err(Error::Shape(format!("grid built for class {} fed to head {}", grid.class_id.0, k.0)));
    }
    let head = m.head(k).ok_or_else(|| Error::Shape(format!("no head for class {}", k.0)))?;
    Ok(forward_head(head, grid))
}

/// Source point indices per model class (output `i + 1` ↔ `classes[i]`).
/// Pixels whose argmax is background are dropped.
pub fn foreground_select(probs: &ProbField, ri: &RangeImage, classes: usize) -> Vec<Vec<u32>> {
    let mut sets = vec![Vec::new(); classes];
    for pixel in 0..ri.len() {
        if !ri.valid[pixel] {
            continue;
        }
        let Some(src) = ri.source[pixel] else { continue };
        let c = probs.argmax(pixel);
        if c > 0 && c <= classes {
            sets[c - 1].push(src);
        }
    }
    sets
}

/// Decodes one box from voxel `v`'s outputs.
pub fn decode_voxel(out: &HeadOutputs, grid: &VoxelGrid, v: usize, bins: usize) -> Box7 {
    let scores = &out.bins[v * bins..(v + 1) * bins];
    let mut bin = 0;
    for (j, s) in scores.iter().enumerate() {
        if *s > scores[bin] {
            bin = j;
        }
    }
    let reg = &out.regression[v * REGRESSION_OUTPUTS..(v + 1) * REGRESSION_OUTPUTS];
    let (x, y) = grid.center(v);
    Box7::new(
        x + reg[1],
        y + reg[2],
        grid.reference_z(v) + reg[3],
        reg[4].clamp(-5.0, 5.0).exp(),
        reg[5].clamp(-5.0, 5.0).exp(),
        reg[6].clamp(-5.0, 5.0).exp(),
        bin_to_heading(bin, reg[0], bins),
        grid.class_id,
    )
}

/// Local heatmap maxima above `score_floor` become boxes, followed by NMS.
pub fn decode_detections(out: &HeadOutputs, grid: &VoxelGrid, bins: usize, score_floor: f64, nms_iou: f64) -> Vec<DetBox> {
    let mut dets = Vec::new();
    for v in 0..grid.len() {
        let h = out.heat[v];
        if h < score_floor {
            continue;
        }
        let vx = &grid.voxels[v];
        let mut peak = true;
        'nbr: for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (jx, jy) = (vx.ix as i64 + dx, vx.iy as i64 + dy);
                if jx < 0 || jy < 0 {
                    continue;
                }
                if let Some(u) = grid.find(jx as u32, jy as u32) {
                    let hu = out.heat[u];
                    if hu > h || (hu == h && u < v) {
                        peak = false;
                        break 'nbr;
                    }
                }
            }
        }
        if peak {
            dets.push(DetBox { bbox: decode_voxel(out, grid, v, bins), score: h });
        }
    }
    nms(&dets, nms_iou)
}

/// Model plus the geometry it was trained with. `classes[i]` is stage-1 output `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub num_classes: usize,
    pub classes: Vec<ClassId>,
    pub projection: ProjectionConfig,
    pub stage1: Stage1Model,
    pub stage2: Stage2Model,
}

impl Detector {
    pub fn new(num_classes: usize, classes: Vec<ClassId>, projection: ProjectionConfig, bins: usize) -> Self {
        let heads = classes.iter().map(|c| Stage2Head::zeros(*c, bins, VoxelConfig::for_class(*c))).collect();
        Detector {
            num_classes,
            stage1: Stage1Model::zeros(classes.len() + 1),
            classes,
            projection,
            stage2: Stage2Model { heads },
        }
    }

    /// Stage-1 output index of class `c`, or 0 when the model does not predict it.
    pub fn output_of(&self, c: ClassId) -> usize {
        self.classes.iter().position(|k| *k == c).map_or(0, |i| i + 1)
    }

    pub fn is_finite(&self) -> bool {
        self.stage1.weights.iter().all(|w| w.is_finite())
            && self.stage2.heads.iter().all(|h| {
                h.heat.iter().chain(&h.bin_weights).chain(&h.regression).all(|w| w.is_finite())
            })
    }

    /// Full inference on one frame.
    pub fn infer(&self, frame: &Frame, score_floor: f64, nms_iou: f64) -> Inference {
        let ri = project(&frame.points, &self.projection);
        let probs = forward_stage1(&self.stage1, &pixel_features(&ri));
        let selected = foreground_select(&probs, &ri, self.classes.len());
        let mut detections = Vec::new();
        for (i, head) in self.stage2.heads.iter().enumerate() {
            let pts: Vec<Point3> = selected[i].iter().map(|&s| frame.points[s as usize]).collect();
            let grid = voxelize(&pts, head.class_id, &head.voxel);
            let out = forward_head(head, &grid);
            detections.extend(decode_detections(&out.outputs, &grid, head.bins, score_floor, nms_iou));
        }
        Inference { ri, probs, detections }
    }

    /// Stage-1 distribution over all `num_classes + 1` classes; classes the model does
    /// not predict get zero mass.
    pub fn full_distribution(&self, probs: &ProbField) -> ProbField {
        let k1 = self.num_classes + 1;
        let mut out = ProbField { classes: k1, data: vec![0.0; probs.pixels() * k1] };
        for pixel in 0..probs.pixels() {
            let src = probs.row(pixel);
            let dst = out.row_mut(pixel);
            dst[0] = src[0];
            for (i, c) in self.classes.iter().enumerate() {
                dst[c.index()] = src[i + 1];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub ri: RangeImage,
    pub probs: ProbField,
    pub detections: Vec<DetBox>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::encode_box;

    #[test]
    fn zero_stage1_is_uniform() {
        let m = Stage1Model::zeros(3);
        let feats = PixelFeatures { data: vec![0.3; 5 * PIXEL_FEATURES], pixels: 5 };
        let p = forward_stage1(&m, &feats);
        assert!(p.data.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn large_class_weight_dominates() {
        let mut m = Stage1Model::zeros(3);
        // bias feature is last
        m.weights[(PIXEL_FEATURES - 1) * 3 + 2] = 1e3;
        let mut data = vec![0.0; PIXEL_FEATURES];
        data[PIXEL_FEATURES - 1] = 1.0;
        let p = forward_stage1(&m, &PixelFeatures { data, pixels: 1 });
        assert!(p.data[2] > 1.0 - 1e-12);
    }

    fn grid_with(points: &[Point3]) -> VoxelGrid {
        voxelize(points, ClassId::VEHICLE, &VoxelConfig::vehicle())
    }

    #[test]
    fn zero_head_gives_half() {
        let grid = grid_with(&[Point3::new(5.0, 5.0, -1.0, 0.5), Point3::new(6.0, 5.0, -1.0, 0.5)]);
        let m = Stage2Model { heads: vec![Stage2Head::zeros(ClassId::VEHICLE, 12, VoxelConfig::vehicle())] };
        let out = forward_stage2(&m, &grid, ClassId::VEHICLE).unwrap();
        assert!(out.outputs.heat.iter().all(|h| *h == 0.5));
        for v in 0..grid.len() {
            let s: f64 = out.outputs.bins[v * 12..(v + 1) * 12].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(out, forward_stage2(&m, &grid, ClassId::VEHICLE).unwrap());
        assert!(forward_stage2(&m, &grid, ClassId::PEDESTRIAN).is_err());
    }

    #[test]
    fn all_below_floor_decodes_nothing() {
        let grid = grid_with(&[Point3::new(5.0, 5.0, -1.0, 0.5)]);
        let out = HeadOutputs { heat: vec![0.01], bins: vec![1.0 / 12.0; 12], regression: vec![0.0; 7] };
        assert!(decode_detections(&out, &grid, 12, 0.1, 0.1).is_empty());
    }

    #[test]
    fn isolated_peak_round_trips() {
        let b = Box7::new(5.13, -2.71, -0.9, 4.2, 1.8, 1.5, 0.77, ClassId::VEHICLE);
        let pts: Vec<Point3> = (0..9)
            .map(|i| Point3::new(b.cx + 0.4 * (i % 3) as f64 - 0.4, b.cy + 0.4 * (i / 3) as f64 - 0.4, -1.0, 0.5))
            .collect();
        let grid = grid_with(&pts);
        let (ix, iy) = grid.cell_of(b.cx, b.cy).unwrap();
        let v = grid.find(ix, iy).unwrap();
        let e = encode_box(&grid, v, &b, 12);
        let n = grid.len();
        let mut out = HeadOutputs { heat: vec![0.2; n], bins: vec![0.0; n * 12], regression: vec![0.0; n * 7] };
        for u in 0..n {
            out.bins[u * 12] = 1.0;
        }
        out.heat[v] = 0.9;
        out.bins[v * 12] = 0.0;
        out.bins[v * 12 + e.bin] = 1.0;
        out.regression[v * 7..(v + 1) * 7].copy_from_slice(&[e.residual, e.dx, e.dy, e.dz, e.log_l, e.log_w, e.log_h]);
        let dets = decode_detections(&out, &grid, 12, 0.5, 0.1);
        assert_eq!(dets.len(), 1);
        let d = dets[0].bbox;
        for (a, c) in [(d.cx, b.cx), (d.cy, b.cy), (d.cz, b.cz), (d.length, b.length), (d.width, b.width), (d.height, b.height), (d.heading, b.heading)] {
            assert!((a - c).abs() < 1e-9, "{a} vs {c}");
        }
        assert_eq!(dets[0].score, 0.9);
    }
}
