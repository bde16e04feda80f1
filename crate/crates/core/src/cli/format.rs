//! On-disk records: line-delimited frames, the dataset manifest, model files and
//! metrics records. Every parser here rejects malformed input with `Error::Format`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{ClassSegMetrics, EvalReport};
use crate::geometry::{Box7, ClassId, ClassSet, Point3};
use crate::labels::Frame;
use crate::train::Detector;

pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of `value` (fields in declaration order).
pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("config serializes").as_bytes())
}

/// One frame per line: points as a flat `[x, y, z, intensity, ...]` array and boxes as
/// `[cx, cy, cz, length, width, height, heading, class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub id: u64,
    pub points: Vec<f64>,
    pub boxes: Vec<[f64; 8]>,
    pub labeled_classes: Vec<u8>,
}

impl FrameRecord {
    pub fn from_frame(f: &Frame) -> Self {
        FrameRecord {
            id: f.id,
            points: f.points.iter().flat_map(|p| [p.x, p.y, p.z, p.intensity]).collect(),
            boxes: f
                .gt_boxes
                .iter()
                .map(|b| [b.cx, b.cy, b.cz, b.length, b.width, b.height, b.heading, b.class_id.0 as f64])
                .collect(),
            labeled_classes: f.labeled_classes.into(),
        }
    }

    pub fn into_frame(self, num_classes: usize) -> Result<Frame> {
        let bad = |m: String| Error::Format(format!("frame {}: {m}", self.id));
        if self.points.len() % 4 != 0 {
            return Err(bad(format!("{} point values is not a multiple of 4", self.points.len())));
        }
        if self.points.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite point coordinate".into()));
        }
        let points = self.points.chunks_exact(4).map(|c| Point3::new(c[0], c[1], c[2], c[3])).collect();
        let mut gt_boxes = Vec::with_capacity(self.boxes.len());
        for b in &self.boxes {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite box field".into()));
            }
            let class = b[7];
            if class.fract() != 0.0 || class < 1.0 || class > num_classes as f64 {
                return Err(bad(format!("box class {class} out of range")));
            }
            if b[3] <= 0.0 || b[4] <= 0.0 || b[5] <= 0.0 {
                return Err(bad("box dimensions must be positive".into()));
            }
            gt_boxes.push(Box7 {
                cx: b[0],
                cy: b[1],
                cz: b[2],
                length: b[3],
                width: b[4],
                height: b[5],
                heading: b[6],
                class_id: ClassId(class as u8),
            });
        }
        let labeled_classes = ClassSet::try_from(self.labeled_classes.clone()).map_err(|e| bad(e.to_string()))?;
        if labeled_classes.iter().any(|c| c.0 == 0 || c.index() > num_classes) {
            return Err(bad("labeled class out of range".into()));
        }
        let f = Frame { id: self.id, points, gt_boxes, labeled_classes };
        f.validate().map_err(|e| bad(e.to_string()))?;
        Ok(f)
    }
}

pub fn parse_frame_record(line: &str, num_classes: usize) -> Result<Frame> {
    let rec: FrameRecord = serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
    rec.into_frame(num_classes)
}

pub fn frame_line(f: &Frame) -> String {
    serde_json::to_string(&FrameRecord::from_frame(f)).expect("frame serializes")
}

/// All frames of a line-delimited dataset file. Blank lines are not allowed.
pub fn parse_frames(text: &str, num_classes: usize) -> Result<Vec<Frame>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| parse_frame_record(line, num_classes).map_err(|e| Error::Format(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn frames_text(frames: &[Frame]) -> String {
    let mut s = String::new();
    for f in frames {
        s.push_str(&frame_line(f));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Hash of the generation settings (scene configuration and frame counts).
    pub config_hash: String,
    pub seed: u64,
    pub train_frames: usize,
    pub test_frames: usize,
    pub train_file: String,
    pub test_file: String,
    /// sha256 over the train file bytes followed by the test file bytes.
    pub dataset_hash: String,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Mismatch(format!("manifest format version {} (expected {FORMAT_VERSION})", m.format_version)));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub run: super::RunSpec,
    pub detector: Detector,
}

pub fn parse_model(text: &str) -> Result<ModelFile> {
    let m: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("model: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Mismatch(format!("model format version {} (expected {FORMAT_VERSION})", m.format_version)));
    }
    if config_hash(&m.run) != m.config_hash {
        return Err(Error::Mismatch("model config hash does not match its recorded run settings".into()));
    }
    let d = &m.detector;
    let heads_ok = d.stage2.heads.len() == d.classes.len()
        && d.stage2.heads.iter().zip(&d.classes).all(|(h, c)| {
            h.class_id == *c
                && h.bins >= 2
                && h.heat.len() == crate::voxel::VOXEL_FEATURES
                && h.bin_weights.len() == crate::voxel::VOXEL_FEATURES * h.bins
                && h.regression.len() == crate::voxel::VOXEL_FEATURES * crate::losses::REGRESSION_OUTPUTS
                && h.voxel.validate().is_ok()
        });
    let classes_ok = !d.classes.is_empty()
        && d.classes.iter().all(|c| c.0 >= 1 && c.index() <= d.num_classes)
        && d.stage1.outputs == d.classes.len() + 1
        && d.stage1.weights.len() == crate::rangeimage::PIXEL_FEATURES * d.stage1.outputs;
    if !heads_ok || !classes_ok || d.projection.validate().is_err() || !d.is_finite() {
        return Err(Error::Format("model parameters are inconsistent with the detector layout".into()));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub name: String,
    pub ap: f64,
    pub gt_count: usize,
    pub det_count: usize,
    pub seg_precision: f64,
    pub seg_recall: f64,
    pub seg_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundMetrics {
    pub seg_precision: f64,
    pub seg_recall: f64,
    pub seg_iou: f64,
}

impl From<ClassSegMetrics> for BackgroundMetrics {
    fn from(m: ClassSegMetrics) -> Self {
        BackgroundMetrics { seg_precision: m.precision, seg_recall: m.recall, seg_iou: m.iou }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub format_version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub strategy: String,
    pub seg_scheme: String,
    pub heatmap_scheme: String,
    pub split: String,
    pub p_vehicle: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Batch-mean loss of the last iteration; null for evaluation-only records.
    pub final_loss: Option<f64>,
    pub eval_frames: usize,
    pub mean_ap: f64,
    pub classes: Vec<ClassMetrics>,
    pub background: BackgroundMetrics,
}

impl MetricsRecord {
    pub fn new(model: &ModelFile, report: &EvalReport, final_loss: Option<f64>) -> Self {
        let t = &model.run.train;
        MetricsRecord {
            format_version: FORMAT_VERSION,
            config_hash: model.config_hash.clone(),
            dataset_hash: model.dataset_hash.clone(),
            strategy: t.strategy.name().into(),
            seg_scheme: t.loss.seg_scheme.name().into(),
            heatmap_scheme: t.loss.heatmap_scheme.name().into(),
            split: model.run.split.to_string(),
            p_vehicle: t.p_vehicle,
            seed: t.seed,
            iterations: t.iterations,
            final_loss,
            eval_frames: report.frames,
            mean_ap: report.mean_ap,
            classes: report
                .classes
                .iter()
                .map(|c| ClassMetrics {
                    class_id: c.class_id.0,
                    name: c.name.clone(),
                    ap: c.ap,
                    gt_count: c.gt_count,
                    det_count: c.det_count,
                    seg_precision: c.seg.precision,
                    seg_recall: c.seg.recall,
                    seg_iou: c.seg.iou,
                })
                .collect(),
            background: report.background.into(),
        }
    }

    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.name == name)
    }
}

pub fn parse_metrics(text: &str) -> Result<MetricsRecord> {
    let m: MetricsRecord = serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Mismatch(format!("metrics format version {} (expected {FORMAT_VERSION})", m.format_version)));
    }
    Ok(m)
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    /// Hash of the run's effective settings; matches its model and metrics files.
    pub config_hash: String,
    pub class: String,
    pub ap: Option<f64>,
    pub seg_iou: Option<f64>,
    /// `ok`, or the error that stopped the run.
    pub status: String,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("sweep csv: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SceneConfig};

    #[test]
    fn frames_round_trip_exactly() {
        let frames = generate_dataset(&SceneConfig::default(), 3).unwrap();
        let text = frames_text(&frames);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_frames(&text, 2).unwrap(), frames);
    }

    #[test]
    fn malformed_frames_rejected() {
        for line in [
            r#"{"id":1,"points":[1,2,3],"boxes":[],"labeled_classes":[1]}"#,
            r#"{"id":1,"points":[],"boxes":[[0,0,0,1,1,1,0,3]],"labeled_classes":[1]}"#,
            r#"{"id":1,"points":[],"boxes":[[0,0,0,-1,1,1,0,1]],"labeled_classes":[1]}"#,
            r#"{"id":1,"points":[],"boxes":[],"labeled_classes":[0]}"#,
            r#"{"id":1,"points":[],"boxes":[],"labeled_classes":[1],"extra":2}"#,
            "not json",
        ] {
            assert!(matches!(parse_frame_record(line, 2), Err(Error::Format(_))), "{line}");
        }
    }

    #[test]
    fn sweep_rows_round_trip() {
        let rows = vec![
            SweepRow { axis: "resample_p".into(), value: "0.5".into(), seed: 1, config_hash: "ab12".into(), class: "pedestrian".into(), ap: Some(0.25), seg_iou: Some(0.125), status: "ok".into() },
            SweepRow { axis: "resample_p".into(), value: "0.9".into(), seed: 2, config_hash: "ab12".into(), class: "vehicle".into(), ap: None, seg_iou: None, status: "diverged".into() },
        ];
        assert_eq!(parse_sweep_csv(&sweep_csv(&rows).unwrap()).unwrap(), rows);
    }
}
