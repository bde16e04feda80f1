//! Training objectives with analytic gradients.
//!
//! Every loss is returned as a non-negative value to be minimized, i.e. the negated
//! sum of the log-likelihood style terms. Probabilities are clamped to
//! `[PROB_FLOOR, 1 - PROB_FLOOR]` before any logarithm; a clamped entry has zero gradient.
//!
//! The three missing-label schemes differ only at pixels (or voxels) whose label is
//! untrusted:
//!
//! * `Aggressive` treats them as background.
//! * `Conservative` drops them from the loss.
//! * `Informed` merges background with every unlabeled class into one meta-class and
//!   supervises that meta-class. For heatmaps it supervises voxels inside any trusted box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ClassSet;
use crate::rangeimage::SegTarget;
use crate::voxel::{HeatmapTarget, ShapeTarget};

pub const PROB_FLOOR: f64 = 1e-7;
const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Aggressive,
    Conservative,
    Informed,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Aggressive, Scheme::Conservative, Scheme::Informed];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Aggressive => "aggressive",
            Scheme::Conservative => "conservative",
            Scheme::Informed => "informed",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggressive" => Ok(Scheme::Aggressive),
            "conservative" => Ok(Scheme::Conservative),
            "informed" => Ok(Scheme::Informed),
            _ => Err(Error::Config(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focusing exponent of the segmentation focal loss.
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Heatmap values above `1 - eps` are positives.
    pub eps: f64,
    pub tau_pixel: f64,
    pub tau_bbox: f64,
    pub seg_scheme: Scheme,
    pub heatmap_scheme: Scheme,
    pub bins: usize,
    /// Transition point between the quadratic and linear branches of smooth-L1.
    pub smooth_l1: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            alpha: 2.0,
            beta: 4.0,
            eps: 1e-3,
            tau_pixel: 0.9,
            tau_bbox: 0.7,
            seg_scheme: Scheme::Informed,
            heatmap_scheme: Scheme::Informed,
            bins: 12,
            smooth_l1: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma >= 0.0
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.eps > 0.0
            && self.eps < 1.0
            && (0.0..=1.0).contains(&self.tau_pixel)
            && (0.0..=1.0).contains(&self.tau_bbox)
            && self.bins >= 2
            && self.smooth_l1 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("loss hyperparameters out of range".into()))
        }
    }
}

/// Per-pixel categorical distributions, row-major `pixels x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbField {
    pub fn uniform(pixels: usize, classes: usize) -> Self {
        ProbField { classes, data: vec![1.0 / classes as f64; pixels * classes] }
    }

    pub fn pixels(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn row(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.classes..(pixel + 1) * self.classes]
    }

    pub fn row_mut(&mut self, pixel: usize) -> &mut [f64] {
        &mut self.data[pixel * self.classes..(pixel + 1) * self.classes]
    }

    pub fn check_normalized(&self, pixel: usize) -> Result<()> {
        let sum: f64 = self.row(pixel).iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || !sum.is_finite() {
            return Err(Error::NotNormalized { pixel, sum });
        }
        Ok(())
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self, pixel: usize) -> usize {
        let row = self.row(pixel);
        let mut best = 0;
        for (i, p) in row.iter().enumerate() {
            if *p > row[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl LossResult {
    fn zeros(n: usize) -> Self {
        LossResult { value: 0.0, gradient: vec![0.0; n] }
    }
}

/// `-(1-p)^γ ln p` and its derivative in `p`.
fn focal(p: f64, gamma: f64) -> (f64, f64) {
    if p < PROB_FLOOR || p > 1.0 - PROB_FLOOR {
        let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        return (-(1.0 - pc).powf(gamma) * pc.ln(), 0.0);
    }
    let q = 1.0 - p;
    let qg = q.powf(gamma);
    let value = -qg * p.ln();
    let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
    (value, dq * p.ln() - qg / p)
}

/// Focal segmentation loss under `cfg.seg_scheme`.
///
/// `unlabeled` is the frame's set of unlabeled classes. The untrusted mask of `t` is
/// the set the scheme acts on; before pseudo-labeling it equals the missing-label mask.
pub fn seg_loss(probs: &ProbField, t: &SegTarget, unlabeled: ClassSet, cfg: &LossConfig) -> Result<LossResult> {
    for pixel in (0..t.len()).filter(|p| t.valid[*p]) {
        probs.check_normalized(pixel)?;
    }
    seg_loss_unvalidated(probs, t, unlabeled, cfg)
}

/// `seg_loss` without the normalization check, for perturbation studies.
pub fn seg_loss_unvalidated(
    probs: &ProbField,
    t: &SegTarget,
    unlabeled: ClassSet,
    cfg: &LossConfig,
) -> Result<LossResult> {
    if probs.pixels() != t.len() {
        return Err(Error::Shape(format!("{} probability rows for {} pixels", probs.pixels(), t.len())));
    }
    let k1 = probs.classes;
    let merged: Vec<usize> =
        std::iter::once(0).chain(unlabeled.iter().map(|c| c.index()).filter(|c| *c < k1)).collect();
    let mut out = LossResult::zeros(probs.data.len());
    for pixel in 0..t.len() {
        if !t.valid[pixel] {
            continue;
        }
        let row = probs.row(pixel);
        let grad = &mut out.gradient[pixel * k1..(pixel + 1) * k1];
        match (cfg.seg_scheme, t.untrusted[pixel]) {
            (Scheme::Conservative, true) => {}
            (Scheme::Informed, true) => {
                let p: f64 = merged.iter().map(|c| row[*c]).sum();
                let (v, d) = focal(p, cfg.gamma);
                out.value += v;
                for c in &merged {
                    grad[*c] = d;
                }
            }
            _ => {
                let c = t.class[pixel] as usize;
                let (v, d) = focal(row[c], cfg.gamma);
                out.value += v;
                grad[c] = d;
            }
        }
    }
    Ok(out)
}

/// Penalty-reduced focal heatmap loss over the target's supervised voxels.
pub fn heatmap_loss(preds: &[f64], t: &HeatmapTarget, cfg: &LossConfig) -> Result<LossResult> {
    if preds.len() != t.values.len() {
        return Err(Error::Shape(format!("{} heatmap predictions for {} voxels", preds.len(), t.values.len())));
    }
    let mut out = LossResult::zeros(preds.len());
    for (v, &h) in preds.iter().enumerate() {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::PredictionOutOfRange { voxel: v, value: h });
        }
        if !t.supervised[v] {
            continue;
        }
        let clamped = !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&h);
        let hc = h.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let (a, b) = (cfg.alpha, cfg.beta);
        if t.positive[v] {
            let (value, d) = {
                let q = 1.0 - hc;
                let qa = q.powf(a);
                let dqa = if a == 0.0 { 0.0 } else { a * q.powf(a - 1.0) };
                (-qa * hc.ln(), dqa * hc.ln() - qa / hc)
            };
            out.value += value;
            out.gradient[v] = if clamped { 0.0 } else { d };
        } else {
            let w = (1.0 - t.values[v]).powf(b);
            let ha = hc.powf(a);
            let dha = if a == 0.0 { 0.0 } else { a * hc.powf(a - 1.0) };
            let l1h = (1.0 - hc).ln();
            out.value += -w * ha * l1h;
            out.gradient[v] = if clamped { 0.0 } else { -w * (dha * l1h - ha / (1.0 - hc)) };
        }
    }
    Ok(out)
}

/// Smooth-L1 with transition `delta`, and its derivative.
pub fn smooth_l1(x: f64, delta: f64) -> (f64, f64) {
    if x.abs() < delta {
        (0.5 * x * x / delta, x / delta)
    } else {
        (x.abs() - 0.5 * delta, x.signum())
    }
}

/// Heading bin loss: cross-entropy over the bins plus smooth-L1 on the residual.
///
/// `pred` holds, for each entry of `t` in order, `bins` probabilities followed by one
/// residual. The gradient has the same layout.
pub fn heading_bin_loss(pred: &[f64], t: &ShapeTarget, cfg: &LossConfig) -> Result<LossResult> {
    let stride = t.bins + 1;
    if pred.len() != t.len() * stride {
        return Err(Error::Shape(format!("heading predictions {} != {} x {stride}", pred.len(), t.len())));
    }
    let mut out = LossResult::zeros(pred.len());
    for (i, e) in t.entries.iter().enumerate() {
        let row = &pred[i * stride..(i + 1) * stride];
        let p = row[e.bin];
        let pc = p.clamp(PROB_FLOOR, 1.0);
        out.value += -pc.ln();
        if p >= PROB_FLOOR {
            out.gradient[i * stride + e.bin] = -1.0 / p;
        }
        let (v, d) = smooth_l1(row[t.bins] - e.residual, cfg.smooth_l1);
        out.value += v;
        out.gradient[i * stride + t.bins] = d;
    }
    Ok(out)
}

/// Number of regressed shape values per positive voxel: dx, dy, dz, ln l, ln w, ln h.
pub const SHAPE_PARAMS: usize = 6;

/// Elementwise smooth-L1 over offsets and log-sizes at positive voxels.
pub fn shape_l1_loss(pred: &[f64], t: &ShapeTarget, cfg: &LossConfig) -> Result<LossResult> {
    if pred.len() != t.len() * SHAPE_PARAMS {
        return Err(Error::Shape(format!("shape predictions {} != {} x {SHAPE_PARAMS}", pred.len(), t.len())));
    }
    let mut out = LossResult::zeros(pred.len());
    for (i, e) in t.entries.iter().enumerate() {
        for (j, target) in e.offsets_and_sizes().iter().enumerate() {
            let (v, d) = smooth_l1(pred[i * SHAPE_PARAMS + j] - target, cfg.smooth_l1);
            out.value += v;
            out.gradient[i * SHAPE_PARAMS + j] = d;
        }
    }
    Ok(out)
}

/// Number of regression outputs per voxel: heading residual then the shape parameters.
pub const REGRESSION_OUTPUTS: usize = 1 + SHAPE_PARAMS;

/// Dense per-voxel outputs of one second-stage head.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadOutputs {
    pub heat: Vec<f64>,
    /// `voxels x bins` probabilities.
    pub bins: Vec<f64>,
    /// `voxels x REGRESSION_OUTPUTS`.
    pub regression: Vec<f64>,
}

impl HeadOutputs {
    pub fn zeros_like(other: &HeadOutputs) -> Self {
        HeadOutputs {
            heat: vec![0.0; other.heat.len()],
            bins: vec![0.0; other.bins.len()],
            regression: vec![0.0; other.regression.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTargets {
    pub heatmap: HeatmapTarget,
    pub shape: ShapeTarget,
    /// Inactive heads contribute nothing (class unlabeled under plain supervision).
    pub active: bool,
    /// The heatmap term is divided by this.
    pub heatmap_norm: f64,
    /// The heading-bin and shape terms are divided by this.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutputs {
    pub seg: ProbField,
    pub heads: Vec<HeadOutputs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub seg: SegTarget,
    pub unlabeled: ClassSet,
    /// The segmentation term is divided by this.
    pub seg_norm: f64,
    pub heads: Vec<HeadTargets>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: f64,
    pub heatmap: f64,
    pub bin: f64,
    pub shape: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg: 1.0, heatmap: 1.0, bin: 0.5, shape: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    /// Weighted (seg, heatmap, bin, shape) contributions.
    pub components: [f64; 4],
    pub seg_gradient: Vec<f64>,
    pub head_gradients: Vec<HeadOutputs>,
    /// Whether each head received any regression gradient.
    pub regression_active: Vec<bool>,
    /// Whether each head received any heatmap gradient.
    pub heatmap_active: Vec<bool>,
}

/// Weighted sum of the four losses with gradients scattered back onto the dense outputs.
pub fn total_loss(
    out: &FrameOutputs,
    t: &FrameTargets,
    cfg: &LossConfig,
    w: &LossWeights,
) -> Result<TotalLoss> {
    if w.seg < 0.0 || w.heatmap < 0.0 || w.bin < 0.0 || w.shape < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    if out.heads.len() != t.heads.len() {
        return Err(Error::Shape("head count mismatch".into()));
    }
    let seg = seg_loss(&out.seg, &t.seg, t.unlabeled, cfg)?;
    let seg_scale = w.seg / t.seg_norm;
    let mut total = TotalLoss {
        value: 0.0,
        components: [seg.value * seg_scale, 0.0, 0.0, 0.0],
        seg_gradient: seg.gradient.into_iter().map(|g| g * seg_scale).collect(),
        head_gradients: out.heads.iter().map(HeadOutputs::zeros_like).collect(),
        regression_active: vec![false; t.heads.len()],
        heatmap_active: vec![false; t.heads.len()],
    };
    let bins = cfg.bins;
    for (h, (o, ht)) in out.heads.iter().zip(&t.heads).enumerate() {
        if !ht.active {
            continue;
        }
        let g = &mut total.head_gradients[h];
        let hm = heatmap_loss(&o.heat, &ht.heatmap, cfg)?;
        let hm_scale = w.heatmap / ht.heatmap_norm;
        total.components[1] += hm.value * hm_scale;
        for (dst, src) in g.heat.iter_mut().zip(&hm.gradient) {
            *dst = src * hm_scale;
        }
        total.heatmap_active[h] = ht.heatmap.supervised.iter().any(|s| *s);

        if ht.shape.is_empty() {
            continue;
        }
        total.regression_active[h] = true;
        let mut heading_pred = Vec::with_capacity(ht.shape.len() * (bins + 1));
        let mut shape_pred = Vec::with_capacity(ht.shape.len() * SHAPE_PARAMS);
        for e in &ht.shape.entries {
            heading_pred.extend_from_slice(&o.bins[e.voxel * bins..(e.voxel + 1) * bins]);
            let reg = &o.regression[e.voxel * REGRESSION_OUTPUTS..(e.voxel + 1) * REGRESSION_OUTPUTS];
            heading_pred.push(reg[0]);
            shape_pred.extend_from_slice(&reg[1..]);
        }
        let hb = heading_bin_loss(&heading_pred, &ht.shape, cfg)?;
        let sh = shape_l1_loss(&shape_pred, &ht.shape, cfg)?;
        let (bin_scale, shape_scale) = (w.bin / ht.norm, w.shape / ht.norm);
        total.components[2] += hb.value * bin_scale;
        total.components[3] += sh.value * shape_scale;
        for (i, e) in ht.shape.entries.iter().enumerate() {
            let hg = &hb.gradient[i * (bins + 1)..(i + 1) * (bins + 1)];
            for b in 0..bins {
                g.bins[e.voxel * bins + b] += hg[b] * bin_scale;
            }
            let reg = &mut g.regression[e.voxel * REGRESSION_OUTPUTS..(e.voxel + 1) * REGRESSION_OUTPUTS];
            reg[0] += hg[bins] * bin_scale;
            for j in 0..SHAPE_PARAMS {
                reg[1 + j] += sh.gradient[i * SHAPE_PARAMS + j] * shape_scale;
            }
        }
    }
    total.value = total.components.iter().sum();
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ClassId;
    use crate::voxel::ShapeEntry;

    fn target(class: u8, untrusted: bool) -> SegTarget {
        SegTarget { class: vec![class], missing: vec![untrusted], untrusted: vec![untrusted], valid: vec![true] }
    }

    fn probs(p: &[f64]) -> ProbField {
        ProbField { classes: p.len(), data: p.to_vec() }
    }

    fn cfg(scheme: Scheme) -> LossConfig {
        LossConfig { seg_scheme: scheme, heatmap_scheme: scheme, ..LossConfig::default() }
    }

    #[test]
    fn labeled_pixel_focal_value() {
        let r = seg_loss(&probs(&[0.1, 0.7, 0.2]), &target(1, false), ClassSet::empty(), &cfg(Scheme::Aggressive))
            .unwrap();
        let expected = -(0.3f64).powi(2) * 0.7f64.ln();
        assert!((r.value - expected).abs() < 1e-15);
        assert!((r.value - 0.0321).abs() < 1e-4);
        assert_eq!(r.gradient[0], 0.0);
        assert_eq!(r.gradient[2], 0.0);
    }

    #[test]
    fn informed_merges_unlabeled_with_background() {
        let unl = ClassSet::single(ClassId::PEDESTRIAN);
        let r = seg_loss(&probs(&[0.5, 0.2, 0.3]), &target(0, true), unl, &cfg(Scheme::Informed)).unwrap();
        let expected = -(0.2f64).powi(2) * 0.8f64.ln();
        assert!((r.value - expected).abs() < 1e-15);
        assert!((r.value - 0.0089).abs() < 1e-4);
        assert_eq!(r.gradient[0], r.gradient[2]);
        assert_eq!(r.gradient[1], 0.0);
    }

    #[test]
    fn conservative_masked_pixel_is_silent() {
        let unl = ClassSet::single(ClassId::PEDESTRIAN);
        let r = seg_loss(&probs(&[0.5, 0.2, 0.3]), &target(0, true), unl, &cfg(Scheme::Conservative)).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.gradient.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn unnormalized_probs_rejected() {
        let r = seg_loss(&probs(&[0.5, 0.2, 0.2]), &target(0, false), ClassSet::empty(), &cfg(Scheme::Aggressive));
        assert!(matches!(r, Err(Error::NotNormalized { .. })));
    }

    fn heat_target(values: &[f64], supervised: &[bool]) -> HeatmapTarget {
        HeatmapTarget {
            class_id: ClassId::VEHICLE,
            values: values.to_vec(),
            positive: values.iter().map(|y| *y > 1.0 - 1e-3).collect(),
            supervised: supervised.to_vec(),
        }
    }

    #[test]
    fn heatmap_reference_values() {
        let c = LossConfig::default();
        let pos = heatmap_loss(&[0.6], &heat_target(&[1.0], &[true]), &c).unwrap();
        assert!((pos.value - 0.16 * -(0.6f64.ln())).abs() < 1e-15);
        assert!((pos.value - 0.0817).abs() < 1e-4);
        let neg = heatmap_loss(&[0.3], &heat_target(&[0.0], &[true]), &c).unwrap();
        assert!((neg.value - 0.09 * -(0.7f64.ln())).abs() < 1e-15);
        assert!((neg.value - 0.0321).abs() < 1e-4);
        let off = heatmap_loss(&[0.3], &heat_target(&[0.0], &[false]), &c).unwrap();
        assert_eq!(off.value, 0.0);
        assert_eq!(off.gradient, vec![0.0]);
        assert!(heatmap_loss(&[1.0], &heat_target(&[0.0], &[true]), &c).is_err());
        assert!(heatmap_loss(&[0.0], &heat_target(&[0.0], &[false]), &c).is_err());
    }

    fn shape_target(bin: usize, residual: f64, sizes: [f64; 6]) -> ShapeTarget {
        ShapeTarget {
            bins: 12,
            entries: vec![ShapeEntry {
                voxel: 0,
                dx: sizes[0],
                dy: sizes[1],
                dz: sizes[2],
                log_l: sizes[3],
                log_w: sizes[4],
                log_h: sizes[5],
                bin,
                residual,
            }],
        }
    }

    #[test]
    fn heading_bin_reference_values() {
        let c = LossConfig::default();
        let t = shape_target(3, 0.1, [0.0; 6]);
        let mut perfect = vec![0.0; 13];
        perfect[3] = 1.0;
        perfect[12] = 0.1;
        assert_eq!(heading_bin_loss(&perfect, &t, &c).unwrap().value, 0.0);

        let mut uniform = vec![1.0 / 12.0; 13];
        uniform[12] = 0.1;
        let v = heading_bin_loss(&uniform, &t, &c).unwrap().value;
        assert!((v - 12f64.ln()).abs() < 1e-12);

        perfect[12] = 0.6;
        let v = heading_bin_loss(&perfect, &t, &c).unwrap().value;
        assert!((v - 0.125).abs() < 1e-12);
    }

    #[test]
    fn shape_l1_reference_values() {
        let c = LossConfig::default();
        let sizes = [0.1, -0.2, 0.3, 1.5, 0.6, 0.5];
        let t = shape_target(0, 0.0, sizes);
        assert_eq!(shape_l1_loss(&sizes, &t, &c).unwrap().value, 0.0);
        let mut off = sizes;
        off[4] += 2.0;
        let r = shape_l1_loss(&off, &t, &c).unwrap();
        assert!((r.value - 1.5).abs() < 1e-12);
        assert_eq!(r.gradient[4], 1.0);
        let empty = ShapeTarget { bins: 12, entries: vec![] };
        let r = shape_l1_loss(&[], &empty, &c).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.gradient.is_empty());
    }

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy() {
        let (v, d) = focal(0.25, 0.0);
        assert!((v + 0.25f64.ln()).abs() < 1e-15);
        assert!((d + 4.0).abs() < 1e-12);
    }
}
