//! Resampled mini-batch training of the two-stage detector under supervised, self,
//! teacher and integrated labeling.

pub mod model;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_box, transform_frame, ClassId, ClassSet, DetBox, Point3};
use crate::labels::{ensemble_boxes, ensemble_pixel, merge_box_pseudo, merge_pixel_pseudo, Frame, PseudoLabels};
use crate::losses::{
    total_loss, FrameOutputs, FrameTargets, HeadOutputs, HeadTargets, LossConfig, LossWeights, ProbField, Scheme,
    REGRESSION_OUTPUTS,
};
use crate::rangeimage::{build_seg_target, pixel_features, project, ProjectionConfig, RangeImage};
use crate::rng::keyed_rng;
use crate::voxel::{build_heatmap_target, build_shape_target, heatmap_mask, voxelize, HeatmapTarget, ShapeTarget, VOXEL_FEATURES};

pub use model::{
    decode_detections, foreground_select, forward_stage1, forward_stage2, Detector, Inference, Stage1Model,
    Stage2Head, Stage2Model, Stage2Output,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Supervised,
    #[serde(rename = "self")]
    SelfLabel,
    Teacher,
    Integrated,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Supervised, Strategy::SelfLabel, Strategy::Teacher, Strategy::Integrated];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Supervised => "supervised",
            Strategy::SelfLabel => "self",
            Strategy::Teacher => "teacher",
            Strategy::Integrated => "integrated",
        }
    }

    pub fn needs_teachers(self) -> bool {
        matches!(self, Strategy::Teacher | Strategy::Integrated)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub p_vehicle: f64,
    pub strategy: Strategy,
    pub seed: u64,
    /// Fraction of iterations during which stage 2 sees labeled foreground instead of
    /// stage-1 selections.
    pub teacher_forcing: f64,
    /// Random yaw rotation and mirror flip of each training sample.
    pub augment: bool,
    pub score_floor: f64,
    pub nms_iou: f64,
    pub num_classes: usize,
    pub projection: ProjectionConfig,
    pub loss: LossConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            warmup: 100,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            p_vehicle: 0.5,
            strategy: Strategy::Supervised,
            seed: 0,
            teacher_forcing: 0.25,
            augment: true,
            score_floor: 0.05,
            nms_iou: 0.1,
            num_classes: 2,
            projection: ProjectionConfig::default(),
            loss: LossConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.p_vehicle) {
            return bad("p_vehicle must lie in [0, 1]");
        }
        if self.iterations <= self.warmup {
            return bad("iterations must exceed warmup");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) || !(0.0..=1.0).contains(&self.score_floor) {
            return bad("teacher_forcing and score_floor must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou must lie in [0, 1]");
        }
        if self.num_classes == 0 || self.num_classes > 31 {
            return bad("num_classes must lie in 1..=31");
        }
        self.projection.validate()?;
        self.loss.validate()?;
        let w = self.weights;
        if [w.seg, w.heatmap, w.bin, w.shape].iter().any(|x| !(*x >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<ClassId> {
        (1..=self.num_classes).map(|k| ClassId(k as u8)).collect()
    }
}

/// The two single-class subsets of an SCS dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub vehicle: Vec<Frame>,
    pub pedestrian: Vec<Frame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Vehicle,
    Pedestrian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub subset: Subset,
    pub index: usize,
}

impl TrainData {
    pub fn frame(&self, s: Slot) -> &Frame {
        match s.subset {
            Subset::Vehicle => &self.vehicle[s.index],
            Subset::Pedestrian => &self.pedestrian[s.index],
        }
    }
}

/// Each slot comes from the vehicle subset with probability `p_vehicle`, else from the
/// pedestrian subset, uniformly within the subset.
pub fn sample_batch(
    vehicle_len: usize,
    pedestrian_len: usize,
    p_vehicle: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Slot>> {
    (0..batch_size)
        .map(|_| {
            let (subset, len, name) = if rng.gen::<f64>() < p_vehicle {
                (Subset::Vehicle, vehicle_len, "vehicle")
            } else {
                (Subset::Pedestrian, pedestrian_len, "pedestrian")
            };
            if len == 0 {
                return Err(Error::EmptySubset(name));
            }
            Ok(Slot { subset, index: rng.gen_range(0..len) })
        })
        .collect()
}

pub fn learning_rate(cfg: &TrainConfig, t: usize) -> f64 {
    if t < cfg.warmup {
        cfg.lr * t as f64 / cfg.warmup as f64
    } else {
        cfg.lr
    }
}

/// Per-point class distributions (over all `K + 1` classes) read off a range image of
/// the unaugmented frame, so they can be carried into any augmented view.
#[derive(Debug, Clone, PartialEq)]
pub struct PointProbs {
    pub classes: usize,
    pub data: Vec<f64>,
    pub seen: Vec<bool>,
}

impl PointProbs {
    pub fn from_image(ri: &RangeImage, field: &ProbField, points: usize) -> Self {
        let k1 = field.classes;
        let mut out = PointProbs { classes: k1, data: vec![0.0; points * k1], seen: vec![false; points] };
        for pixel in 0..ri.len() {
            if let (true, Some(src)) = (ri.valid[pixel], ri.source[pixel]) {
                let s = src as usize;
                out.data[s * k1..(s + 1) * k1].copy_from_slice(field.row(pixel));
                out.seen[s] = true;
            }
        }
        out
    }

    /// Pixel field for an image of the same points; points not seen by the labeler get
    /// the uniform distribution, which never clears a confidence threshold above 1/(K+1).
    pub fn to_field(&self, ri: &RangeImage) -> ProbField {
        let k1 = self.classes;
        let mut field = ProbField::uniform(ri.len(), k1);
        for pixel in 0..ri.len() {
            if let (true, Some(src)) = (ri.valid[pixel], ri.source[pixel]) {
                let s = src as usize;
                if self.seen[s] {
                    field.row_mut(pixel).copy_from_slice(&self.data[s * k1..(s + 1) * k1]);
                }
            }
        }
        field
    }
}

/// A labeler's view of one unaugmented frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelerOutput {
    pub points: PointProbs,
    pub detections: Vec<DetBox>,
}

/// Single-class teachers, one per class, in class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teachers {
    pub models: Vec<Detector>,
}

impl Teachers {
    pub fn for_class(&self, k: ClassId) -> Option<&Detector> {
        self.models.iter().find(|m| m.classes == [k])
    }

    /// Combined labeler output for the classes in `unlabeled`: each class's foreground
    /// probability comes from its teacher, background mass is the product of the
    /// teachers' background probabilities, renormalized.
    pub fn label(&self, f: &Frame, unlabeled: ClassSet, num_classes: usize, score_floor: f64, nms_iou: f64) -> Result<LabelerOutput> {
        let k1 = num_classes + 1;
        let n = f.points.len();
        let mut data = vec![0.0; n * k1];
        for s in 0..n {
            data[s * k1] = 1.0;
        }
        let mut seen = vec![true; n];
        let mut detections = Vec::new();
        for k in unlabeled.iter() {
            let teacher = self.for_class(k).ok_or_else(|| Error::Config(format!("no teacher for class {}", k.0)))?;
            let inf = teacher.infer(f, score_floor, nms_iou);
            let pp = PointProbs::from_image(&inf.ri, &inf.probs, n);
            for s in 0..n {
                if !pp.seen[s] {
                    seen[s] = false;
                    continue;
                }
                data[s * k1] *= pp.data[s * 2];
                data[s * k1 + k.index()] = pp.data[s * 2 + 1];
            }
            detections.extend(inf.detections);
        }
        for s in 0..n {
            let row = &mut data[s * k1..(s + 1) * k1];
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(LabelerOutput { points: PointProbs { classes: k1, data, seen }, detections })
    }
}

/// Counters recorded while training, for auditing the labeling path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Instrumentation {
    pub labeling_calls: usize,
    /// Labeler invocations whose input was not the stored unaugmented frame.
    pub augmented_labeling_inputs: usize,
    pub teacher_forced_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub detector: Detector,
    /// (iteration, batch-mean loss)
    pub trace: Vec<(usize, f64)>,
    pub instrumentation: Instrumentation,
}

enum Labeler {
    None,
    SelfLabel,
    /// Cached teacher outputs per vehicle-subset and pedestrian-subset frame.
    Teacher(Vec<Option<LabelerOutput>>, Vec<Option<LabelerOutput>>),
    Integrated(Vec<Option<LabelerOutput>>, Vec<Option<LabelerOutput>>),
}

#[derive(Default)]
struct Gradients {
    stage1: Vec<f64>,
    heat: Vec<Vec<f64>>,
    bins: Vec<Vec<f64>>,
    regression: Vec<Vec<f64>>,
    heat_active: Vec<bool>,
    regression_active: Vec<bool>,
}

impl Gradients {
    fn zeros(d: &Detector) -> Self {
        Gradients {
            stage1: vec![0.0; d.stage1.weights.len()],
            heat: d.stage2.heads.iter().map(|h| vec![0.0; h.heat.len()]).collect(),
            bins: d.stage2.heads.iter().map(|h| vec![0.0; h.bin_weights.len()]).collect(),
            regression: d.stage2.heads.iter().map(|h| vec![0.0; h.regression.len()]).collect(),
            heat_active: vec![false; d.stage2.heads.len()],
            regression_active: vec![false; d.stage2.heads.len()],
        }
    }
}

fn empty_head_targets(class_id: ClassId, bins: usize) -> HeadTargets {
    HeadTargets {
        heatmap: HeatmapTarget { class_id, values: Vec::new(), positive: Vec::new(), supervised: Vec::new() },
        shape: ShapeTarget { bins, entries: Vec::new() },
        active: false,
        heatmap_norm: 1.0,
        norm: 1.0,
    }
}

/// Per-frame state needed for the backward pass.
struct FrameWork {
    feats: crate::rangeimage::PixelFeatures,
    head_features: Vec<Vec<f64>>,
    outputs: FrameOutputs,
    targets: FrameTargets,
}

/// Pseudo-label inputs for one training sample, already moved into the augmented view.
struct PseudoInputs {
    field: ProbField,
    detections: Vec<DetBox>,
}

fn labeler_from_detector(d: &Detector, f: &Frame, cfg: &TrainConfig) -> LabelerOutput {
    let inf = d.infer(f, cfg.score_floor, cfg.nms_iou);
    let full = d.full_distribution(&inf.probs);
    LabelerOutput { points: PointProbs::from_image(&inf.ri, &full, f.points.len()), detections: inf.detections }
}

/// Builds targets and runs the forward pass for one augmented sample.
#[allow(clippy::too_many_arguments)]
fn prepare_frame(
    d: &Detector,
    f: &Frame,
    rot: f64,
    flip: bool,
    pseudo_in: Option<PseudoInputs>,
    teacher_forced: bool,
    cfg: &TrainConfig,
) -> Result<FrameWork> {
    let k = cfg.num_classes;
    let fa = transform_frame(f, rot, flip);
    let ri = project(&fa.points, &d.projection);
    let feats = pixel_features(&ri);
    let mut seg = build_seg_target(&ri, &fa)?;
    let model_unlabeled: ClassSet = d.classes.iter().copied().filter(|c| !f.labeled_classes.contains(*c)).collect();

    let pseudo = match pseudo_in {
        Some(p) => {
            seg = merge_pixel_pseudo(&seg, &p.field, f.labeled_classes, cfg.loss.tau_pixel)?;
            merge_box_pseudo(&fa, &p.detections, cfg.loss.tau_bbox, k)
        }
        None => PseudoLabels::ground_truth(&fa, k),
    };

    // move targets into the model's output space
    for c in seg.class.iter_mut() {
        *c = d.output_of(ClassId(*c)) as u8;
    }
    let unlabeled: ClassSet = model_unlabeled.iter().map(|c| ClassId(d.output_of(c) as u8)).collect();

    let probs = forward_stage1(&d.stage1, &feats);
    let selected: Vec<Vec<u32>> = if teacher_forced {
        let mut sets = vec![Vec::new(); d.classes.len()];
        for pixel in 0..ri.len() {
            if !seg.valid[pixel] || seg.untrusted[pixel] || seg.class[pixel] == 0 {
                continue;
            }
            if let Some(src) = ri.source[pixel] {
                sets[seg.class[pixel] as usize - 1].push(src);
            }
        }
        sets
    } else {
        foreground_select(&probs, &ri, d.classes.len())
    };

    let supervised = cfg.strategy == Strategy::Supervised;
    let mut heads_out = Vec::with_capacity(d.stage2.heads.len());
    let mut heads_t = Vec::with_capacity(d.stage2.heads.len());
    let mut head_features = Vec::with_capacity(d.stage2.heads.len());
    for (i, head) in d.stage2.heads.iter().enumerate() {
        let class = head.class_id;
        let active = f.labeled_classes.contains(class) || !supervised;
        if !active {
            heads_out.push(HeadOutputs::default());
            heads_t.push(empty_head_targets(class, head.bins));
            head_features.push(Vec::new());
            continue;
        }
        let pts: Vec<Point3> = selected[i].iter().map(|&s| fa.points[s as usize]).collect();
        let grid = voxelize(&pts, class, &head.voxel);
        let boxes = pseudo.class_boxes(class);
        let mask = heatmap_mask(&grid, &pseudo, f.labeled_classes, cfg.loss.heatmap_scheme);
        let heatmap = build_heatmap_target(&grid, &boxes, cfg.loss.eps).with_mask(mask);
        let shape = build_shape_target(&grid, &boxes, cfg.loss.eps, head.bins)?;
        let out = model::forward_head(head, &grid);
        heads_out.push(out.outputs);
        head_features.push(out.features);
        let heatmap_norm = heatmap.supervised.iter().filter(|s| **s).count().max(1) as f64;
        heads_t.push(HeadTargets { heatmap, shape, active: true, heatmap_norm, norm: boxes.len().max(1) as f64 });
    }

    let seg_norm = seg.valid.iter().filter(|v| **v).count().max(1) as f64;
    Ok(FrameWork {
        feats,
        head_features,
        outputs: FrameOutputs { seg: probs, heads: heads_out },
        targets: FrameTargets { seg, unlabeled, seg_norm, heads: heads_t },
    })
}

/// Chains the loss gradient through the softmax / sigmoid / linear layers.
fn backward(d: &Detector, w: &FrameWork, loss: &crate::losses::TotalLoss, g: &mut Gradients) {
    let k1 = d.stage1.outputs;
    let probs = &w.outputs.seg;
    for pixel in 0..probs.pixels() {
        let gp = &loss.seg_gradient[pixel * k1..(pixel + 1) * k1];
        if gp.iter().all(|x| *x == 0.0) {
            continue;
        }
        let p = probs.row(pixel);
        let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
        let x = w.feats.row(pixel);
        for j in 0..k1 {
            let dz = p[j] * (gp[j] - dot);
            if dz == 0.0 {
                continue;
            }
            for (f, xf) in x.iter().enumerate() {
                g.stage1[f * k1 + j] += xf * dz;
            }
        }
    }

    for (h, head) in d.stage2.heads.iter().enumerate() {
        let t = &w.targets.heads[h];
        if !t.active {
            continue;
        }
        let out = &w.outputs.heads[h];
        let gh = &loss.head_gradients[h];
        let feats = &w.head_features[h];
        if loss.heatmap_active[h] {
            g.heat_active[h] = true;
            for v in 0..out.heat.len() {
                let dl = gh.heat[v] * out.heat[v] * (1.0 - out.heat[v]);
                if dl == 0.0 {
                    continue;
                }
                let x = &feats[v * VOXEL_FEATURES..(v + 1) * VOXEL_FEATURES];
                for f in 0..VOXEL_FEATURES {
                    g.heat[h][f] += x[f] * dl;
                }
            }
        }
        if loss.regression_active[h] {
            g.regression_active[h] = true;
            let b = head.bins;
            for e in &t.shape.entries {
                let v = e.voxel;
                let x = &feats[v * VOXEL_FEATURES..(v + 1) * VOXEL_FEATURES];
                let p = &out.bins[v * b..(v + 1) * b];
                let gb = &gh.bins[v * b..(v + 1) * b];
                let dot: f64 = p.iter().zip(gb).map(|(a, c)| a * c).sum();
                for j in 0..b {
                    let dz = p[j] * (gb[j] - dot);
                    for f in 0..VOXEL_FEATURES {
                        g.bins[h][f * b + j] += x[f] * dz;
                    }
                }
                let gr = &gh.regression[v * REGRESSION_OUTPUTS..(v + 1) * REGRESSION_OUTPUTS];
                for j in 0..REGRESSION_OUTPUTS {
                    for f in 0..VOXEL_FEATURES {
                        g.regression[h][f * REGRESSION_OUTPUTS + j] += x[f] * gr[j];
                    }
                }
            }
        }
    }
}

fn momentum_step(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64, scale: f64) {
    for i in 0..w.len() {
        v[i] = mu * v[i] + g[i] * scale;
        w[i] -= lr * v[i];
    }
}

/// Loss and gradients of one frame under the detector's current parameters, without
/// augmentation or pseudo-labeling. Exposed for step-wise checks.
pub fn frame_loss(d: &Detector, f: &Frame, cfg: &TrainConfig, teacher_forced: bool) -> Result<f64> {
    let w = prepare_frame(d, f, 0.0, false, None, teacher_forced, cfg)?;
    Ok(total_loss(&w.outputs, &w.targets, &cfg.loss, &cfg.weights)?.value)
}

/// One plain gradient step (no momentum) on a single frame. Returns the stepped detector.
pub fn sgd_step(d: &Detector, f: &Frame, cfg: &TrainConfig, lr: f64, teacher_forced: bool) -> Result<Detector> {
    let w = prepare_frame(d, f, 0.0, false, None, teacher_forced, cfg)?;
    let loss = total_loss(&w.outputs, &w.targets, &cfg.loss, &cfg.weights)?;
    let mut g = Gradients::zeros(d);
    backward(d, &w, &loss, &mut g);
    let mut out = d.clone();
    for (wi, gi) in out.stage1.weights.iter_mut().zip(&g.stage1) {
        *wi -= lr * gi;
    }
    for (h, head) in out.stage2.heads.iter_mut().enumerate() {
        for (wi, gi) in head.heat.iter_mut().zip(&g.heat[h]) {
            *wi -= lr * gi;
        }
        for (wi, gi) in head.bin_weights.iter_mut().zip(&g.bins[h]) {
            *wi -= lr * gi;
        }
        for (wi, gi) in head.regression.iter_mut().zip(&g.regression[h]) {
            *wi -= lr * gi;
        }
    }
    Ok(out)
}

const TRAIN_STREAM: u64 = 0x7a41;

fn run(
    mut d: Detector,
    data: &TrainData,
    cfg: &TrainConfig,
    labeler: &Labeler,
    stream: u64,
) -> Result<TrainOutput> {
    let mut rng = keyed_rng(cfg.seed, &[TRAIN_STREAM, stream]);
    let mut vel = Gradients::zeros(&d);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut inst = Instrumentation::default();
    let forced_until = (cfg.teacher_forcing * cfg.iterations as f64).round() as usize;
    let k = cfg.num_classes;

    for t in 0..cfg.iterations {
        let slots = sample_batch(data.vehicle.len(), data.pedestrian.len(), cfg.p_vehicle, cfg.batch_size, &mut rng)?;
        let forced = t < forced_until;
        if forced {
            inst.teacher_forced_iterations += 1;
        }
        let mut g = Gradients::zeros(&d);
        let mut batch_loss = 0.0;
        for slot in slots {
            let f = data.frame(slot);
            let (rot, flip) = if cfg.augment {
                (rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI), rng.gen_bool(0.5))
            } else {
                (0.0, false)
            };
            let unlabeled = f.unlabeled_classes(k);
            let needs_labels = !unlabeled.is_empty() && !matches!(labeler, Labeler::None);
            let pseudo_in = if needs_labels {
                let cached = |v: &Vec<Option<LabelerOutput>>, p: &Vec<Option<LabelerOutput>>| -> Result<LabelerOutput> {
                    let c = match slot.subset {
                        Subset::Vehicle => &v[slot.index],
                        Subset::Pedestrian => &p[slot.index],
                    };
                    c.clone().ok_or_else(|| Error::Shape("teacher labels missing for a partially labeled frame".into()))
                };
                let mut fresh = |src: &Frame| {
                    inst.labeling_calls += 1;
                    if !std::ptr::eq(src, f) || src.points.as_ptr() != f.points.as_ptr() {
                        inst.augmented_labeling_inputs += 1;
                    }
                    labeler_from_detector(&d, src, cfg)
                };
                let out = match labeler {
                    Labeler::None => unreachable!(),
                    Labeler::SelfLabel => fresh(f),
                    Labeler::Teacher(v, p) => cached(v, p)?,
                    Labeler::Integrated(v, p) => {
                        let teacher = cached(v, p)?;
                        let own = fresh(f);
                        ensemble_labeler(&teacher, &own, cfg.nms_iou)?
                    }
                };
                let ri = project(&transform_frame(f, rot, flip).points, &d.projection);
                Some(PseudoInputs {
                    field: out.points.to_field(&ri),
                    detections: out.detections.iter().map(|b| DetBox { bbox: transform_box(&b.bbox, rot, flip), score: b.score }).collect(),
                })
            } else {
                None
            };
            let w = prepare_frame(&d, f, rot, flip, pseudo_in, forced, cfg)?;
            let loss = total_loss(&w.outputs, &w.targets, &cfg.loss, &cfg.weights)?;
            batch_loss += loss.value;
            backward(&d, &w, &loss, &mut g);
        }
        let mean = batch_loss / cfg.batch_size as f64;
        trace.push((t, mean));
        if !mean.is_finite() {
            return Err(Error::Diverged { iteration: t, loss: mean, trace });
        }

        let lr = learning_rate(cfg, t);
        let scale = 1.0 / cfg.batch_size as f64;
        let mu = cfg.momentum;
        momentum_step(&mut d.stage1.weights, &mut vel.stage1, &g.stage1, lr, mu, scale);
        for (h, head) in d.stage2.heads.iter_mut().enumerate() {
            if g.heat_active[h] {
                momentum_step(&mut head.heat, &mut vel.heat[h], &g.heat[h], lr, mu, scale);
            }
            if g.regression_active[h] {
                momentum_step(&mut head.bin_weights, &mut vel.bins[h], &g.bins[h], lr, mu, scale);
                momentum_step(&mut head.regression, &mut vel.regression[h], &g.regression[h], lr, mu, scale);
            }
        }
        if !d.is_finite() {
            return Err(Error::Diverged { iteration: t, loss: f64::NAN, trace });
        }
    }
    Ok(TrainOutput { detector: d, trace, instrumentation: inst })
}

fn ensemble_labeler(a: &LabelerOutput, b: &LabelerOutput, nms_iou: f64) -> Result<LabelerOutput> {
    let k1 = a.points.classes;
    let n = a.points.seen.len();
    let mut data = vec![0.0; n * k1];
    let mut seen = vec![false; n];
    for s in 0..n {
        let row = &mut data[s * k1..(s + 1) * k1];
        let ra = &a.points.data[s * k1..(s + 1) * k1];
        let rb = &b.points.data[s * k1..(s + 1) * k1];
        match (a.points.seen[s], b.points.seen[s]) {
            (true, true) => {
                let fa = ProbField { classes: k1, data: ra.to_vec() };
                let fb = ProbField { classes: k1, data: rb.to_vec() };
                row.copy_from_slice(&ensemble_pixel(&fa, &fb)?.data);
                seen[s] = true;
            }
            (true, false) => {
                row.copy_from_slice(ra);
                seen[s] = true;
            }
            (false, true) => {
                row.copy_from_slice(rb);
                seen[s] = true;
            }
            (false, false) => {}
        }
    }
    Ok(LabelerOutput {
        points: PointProbs { classes: k1, data, seen },
        detections: ensemble_boxes(&a.detections, &b.detections, nms_iou),
    })
}

fn teacher_cache(teachers: &Teachers, frames: &[Frame], cfg: &TrainConfig) -> Result<Vec<Option<LabelerOutput>>> {
    frames
        .iter()
        .map(|f| {
            let u = f.unlabeled_classes(cfg.num_classes);
            if u.is_empty() {
                Ok(None)
            } else {
                teachers.label(f, u, cfg.num_classes, cfg.score_floor, cfg.nms_iou).map(Some)
            }
        })
        .collect()
}

/// Trains the multi-class detector. Teacher and integrated strategies need `teachers`.
pub fn train(data: &TrainData, cfg: &TrainConfig, teachers: Option<&Teachers>) -> Result<TrainOutput> {
    cfg.validate()?;
    let d = Detector::new(cfg.num_classes, cfg.classes(), cfg.projection, cfg.loss.bins);
    let labeler = match (cfg.strategy, teachers) {
        (Strategy::Supervised, _) => Labeler::None,
        (Strategy::SelfLabel, _) => Labeler::SelfLabel,
        (s, None) => return Err(Error::Config(format!("strategy `{}` requires teacher models", s.name()))),
        (Strategy::Teacher, Some(t)) => {
            Labeler::Teacher(teacher_cache(t, &data.vehicle, cfg)?, teacher_cache(t, &data.pedestrian, cfg)?)
        }
        (_, Some(t)) => Labeler::Integrated(
            teacher_cache(t, &data.vehicle, cfg)?,
            teacher_cache(t, &data.pedestrian, cfg)?,
        ),
    };
    run(d, data, cfg, &labeler, 0)
}

/// Trains one single-class detector per class on the subset that labels it.
pub fn train_teachers(data: &TrainData, cfg: &TrainConfig) -> Result<Teachers> {
    cfg.validate()?;
    if cfg.num_classes != 2 {
        return Err(Error::Config("teachers are defined for the vehicle/pedestrian pair".into()));
    }
    let mut tcfg = *cfg;
    tcfg.strategy = Strategy::Supervised;
    tcfg.loss.seg_scheme = Scheme::Informed;
    tcfg.loss.heatmap_scheme = Scheme::Informed;
    let mut models = Vec::new();
    for (class, p) in [(ClassId::VEHICLE, 1.0), (ClassId::PEDESTRIAN, 0.0)] {
        let subset = TrainData {
            vehicle: if p == 1.0 { data.vehicle.clone() } else { Vec::new() },
            pedestrian: if p == 0.0 { data.pedestrian.clone() } else { Vec::new() },
        };
        tcfg.p_vehicle = p;
        let d = Detector::new(cfg.num_classes, vec![class], cfg.projection, cfg.loss.bins);
        models.push(run(d, &subset, &tcfg, &Labeler::None, class.0 as u64)?.detector);
    }
    Ok(Teachers { models })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{mask_to_single_class, split_dataset};
    use crate::synth::{generate_dataset, SceneConfig};

    fn small_cfg() -> TrainConfig {
        TrainConfig { iterations: 6, warmup: 2, batch_size: 2, ..TrainConfig::default() }
    }

    fn small_data() -> TrainData {
        let frames = generate_dataset(&SceneConfig::default(), 6).unwrap();
        let (v, p) = split_dataset(&frames, 0.5, 1).unwrap();
        TrainData { vehicle: v, pedestrian: p }
    }

    #[test]
    fn resampling_extremes() {
        let mut rng = keyed_rng(3, &[]);
        assert!(sample_batch(5, 0, 1.0, 64, &mut rng).unwrap().iter().all(|s| s.subset == Subset::Vehicle));
        assert!(sample_batch(0, 5, 0.0, 64, &mut rng).unwrap().iter().all(|s| s.subset == Subset::Pedestrian));
        assert!(matches!(sample_batch(0, 5, 1.0, 1, &mut rng), Err(Error::EmptySubset("vehicle"))));
    }

    #[test]
    fn resampling_fraction_within_binomial_bound() {
        let mut rng = keyed_rng(9, &[]);
        let slots = sample_batch(7, 3, 0.5, 10_000, &mut rng).unwrap();
        let frac = slots.iter().filter(|s| s.subset == Subset::Vehicle).count() as f64 / 1e4;
        // 4 sigma of Binomial(1e4, 0.5) is 0.02
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = TrainConfig { lr: 0.08, warmup: 10, ..TrainConfig::default() };
        for t in 0..10 {
            assert_eq!(learning_rate(&cfg, t), 0.08 * t as f64 / 10.0);
        }
        assert_eq!(learning_rate(&cfg, 10), 0.08);
        assert_eq!(learning_rate(&cfg, 500), 0.08);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainConfig { p_vehicle: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { iterations: 10, warmup: 10, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data();
        let cfg = small_cfg();
        let a = train(&data, &cfg, None).unwrap();
        let b = train(&data, &cfg, None).unwrap();
        assert_eq!(a.detector, b.detector);
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn teacher_strategy_needs_teachers() {
        let cfg = TrainConfig { strategy: Strategy::Teacher, ..small_cfg() };
        assert!(matches!(train(&small_data(), &cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn self_labeling_reads_unaugmented_frames() {
        let cfg = TrainConfig { strategy: Strategy::SelfLabel, ..small_cfg() };
        let out = train(&small_data(), &cfg, None).unwrap();
        assert!(out.instrumentation.labeling_calls > 0);
        assert_eq!(out.instrumentation.augmented_labeling_inputs, 0);
    }

    #[test]
    fn teachers_are_single_class() {
        let data = small_data();
        let t = train_teachers(&data, &small_cfg()).unwrap();
        assert_eq!(t.models.len(), 2);
        assert_eq!(t.models[0].classes, vec![ClassId::VEHICLE]);
        assert_eq!(t.models[1].classes, vec![ClassId::PEDESTRIAN]);
        assert_eq!(t.models[0].stage1.outputs, 2);
        let again = train_teachers(&data, &small_cfg()).unwrap();
        assert_eq!(t, again);
        let cfg = TrainConfig { strategy: Strategy::Integrated, ..small_cfg() };
        let out = train(&data, &cfg, Some(&t)).unwrap();
        assert_eq!(out.instrumentation.augmented_labeling_inputs, 0);
    }

    #[test]
    fn scheme_collapse_on_full_labels() {
        let frames = generate_dataset(&SceneConfig::default(), 4).unwrap();
        let data = TrainData { vehicle: frames.clone(), pedestrian: frames };
        let mut a = small_cfg();
        a.loss.seg_scheme = Scheme::Aggressive;
        a.loss.heatmap_scheme = Scheme::Aggressive;
        let mut i = small_cfg();
        i.loss.seg_scheme = Scheme::Informed;
        i.loss.heatmap_scheme = Scheme::Informed;
        let ra = train(&data, &a, None).unwrap();
        let ri = train(&data, &i, None).unwrap();
        assert_eq!(ra.trace, ri.trace);
        assert_eq!(ra.detector, ri.detector);
    }

    #[test]
    fn unlabeled_heads_frozen_under_supervision() {
        let frames = generate_dataset(&SceneConfig::default(), 4).unwrap();
        let v: Vec<Frame> = frames.iter().map(|f| mask_to_single_class(f, ClassId::VEHICLE)).collect();
        let data = TrainData { vehicle: v, pedestrian: Vec::new() };
        let cfg = TrainConfig { p_vehicle: 1.0, ..small_cfg() };
        let out = train(&data, &cfg, None).unwrap();
        let ped = out.detector.stage2.head(ClassId::PEDESTRIAN).unwrap();
        assert!(ped.heat.iter().chain(&ped.bin_weights).chain(&ped.regression).all(|w| *w == 0.0));
        let veh = out.detector.stage2.head(ClassId::VEHICLE).unwrap();
        assert!(veh.heat.iter().any(|w| *w != 0.0));
    }
}
