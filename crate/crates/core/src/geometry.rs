//! Boxes, containment, rotated bird's-eye-view IoU, NMS and frame augmentation.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::labels::Frame;

/// Object class. `0` is reserved for background and never names a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u8);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    pub const VEHICLE: ClassId = ClassId(1);
    pub const PEDESTRIAN: ClassId = ClassId(2);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "background",
            1 => "vehicle",
            2 => "pedestrian",
            _ => "other",
        }
    }
}

/// A set of foreground classes, stored as a bitmask over ids `1..=31`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "Vec<u8>", try_from = "Vec<u8>")]
pub struct ClassSet(u32);

impl ClassSet {
    pub fn empty() -> Self {
        ClassSet(0)
    }

    /// All classes `1..=num_classes`.
    pub fn all(num_classes: usize) -> Self {
        (1..=num_classes).map(|c| ClassId(c as u8)).collect()
    }

    pub fn single(c: ClassId) -> Self {
        let mut s = ClassSet::empty();
        s.insert(c);
        s
    }

    pub fn insert(&mut self, c: ClassId) {
        assert!(c.0 >= 1 && c.0 < 32, "class id {} out of range", c.0);
        self.0 |= 1 << c.0;
    }

    pub fn contains(&self, c: ClassId) -> bool {
        c.0 < 32 && self.0 & (1 << c.0) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = ClassId> + '_ {
        (1..32u8).map(ClassId).filter(move |c| self.contains(*c))
    }

    /// Classes in `1..=num_classes` that are not in `self`.
    pub fn complement(&self, num_classes: usize) -> ClassSet {
        ClassSet(ClassSet::all(num_classes).0 & !self.0)
    }
}

impl FromIterator<ClassId> for ClassSet {
    fn from_iter<I: IntoIterator<Item = ClassId>>(iter: I) -> Self {
        let mut s = ClassSet::empty();
        for c in iter {
            s.insert(c);
        }
        s
    }
}

impl From<ClassSet> for Vec<u8> {
    fn from(s: ClassSet) -> Self {
        s.iter().map(|c| c.0).collect()
    }
}

impl TryFrom<Vec<u8>> for ClassSet {
    type Error = String;

    fn try_from(v: Vec<u8>) -> Result<Self, Self::Error> {
        let mut s = ClassSet::empty();
        for c in v {
            if c == 0 || c >= 32 {
                return Err(format!("class id {c} out of range 1..=31"));
            }
            s.insert(ClassId(c));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point3 { x, y, z, intensity }
    }

    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Seven-degree-of-freedom box: center, extents, heading about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub heading: f64,
    pub class_id: ClassId,
}

impl Box7 {
    /// Builds a box, wrapping `heading` into `[-π, π)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cx: f64,
        cy: f64,
        cz: f64,
        length: f64,
        width: f64,
        height: f64,
        heading: f64,
        class_id: ClassId,
    ) -> Self {
        Box7 { cx, cy, cz, length, width, height, heading: wrap_angle(heading), class_id }
    }

    pub fn bev_area(&self) -> f64 {
        self.length * self.width
    }

    /// Ground-plane corners, counter-clockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.heading.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        local.map(|(lx, ly)| (self.cx + lx * c - ly * s, self.cy + lx * s + ly * c))
    }

    /// Ground-plane containment of `(x, y)`, boundary inclusive.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local(x, y);
        lx.abs() <= 0.5 * self.length && ly.abs() <= 0.5 * self.width
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        (dx * c + dy * s, -dx * s + dy * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub bbox: Box7,
    pub score: f64,
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut r = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        r -= 2.0 * PI;
    }
    if r < -PI {
        r = -PI;
    }
    r
}

/// True iff `p` lies inside `b` in the box's heading-aligned frame, faces included.
pub fn point_in_box(p: &Point3, b: &Box7) -> bool {
    b.contains_bev(p.x, p.y) && (p.z - b.cz).abs() <= 0.5 * b.height
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice.abs()
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise polygon `clip`.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Intersection-over-union of the two boxes' ground-plane rectangles.
pub fn bev_iou(a: &Box7, b: &Box7) -> f64 {
    // Quick reject on circumscribed circles.
    let ra = 0.5 * a.length.hypot(a.width);
    let rb = 0.5 * b.length.hypot(b.width);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()));
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression. Output is sorted by descending score, ties in input order.
pub fn nms(dets: &[DetBox], iou_thresh: f64) -> Vec<DetBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<DetBox> = Vec::new();
    for i in order {
        let cand = &dets[i];
        if kept.iter().all(|k| bev_iou(&k.bbox, &cand.bbox) < iou_thresh) {
            kept.push(*cand);
        }
    }
    kept
}

/// Rigid augmentation of a single box: rotate about z by `rot`, then optionally mirror y.
pub fn transform_box(b: &Box7, rot: f64, flip_y: bool) -> Box7 {
    let (s, c) = rot.sin_cos();
    let mut out = *b;
    out.cx = b.cx * c - b.cy * s;
    out.cy = b.cx * s + b.cy * c;
    out.heading = wrap_angle(b.heading + rot);
    if flip_y {
        out.cy = -out.cy;
        out.heading = wrap_angle(-out.heading);
    }
    out
}

pub fn transform_point(p: &Point3, rot: f64, flip_y: bool) -> Point3 {
    let (s, c) = rot.sin_cos();
    let mut out = *p;
    out.x = p.x * c - p.y * s;
    out.y = p.x * s + p.y * c;
    if flip_y {
        out.y = -out.y;
    }
    out
}

/// Rotates every point and box about the z axis by `rot`, then mirrors y when `flip_y`.
pub fn transform_frame(f: &Frame, rot: f64, flip_y: bool) -> Frame {
    if rot == 0.0 && !flip_y {
        return f.clone();
    }
    Frame {
        id: f.id,
        points: f.points.iter().map(|p| transform_point(p, rot, flip_y)).collect(),
        gt_boxes: f.gt_boxes.iter().map(|b| transform_box(b, rot, flip_y)).collect(),
        labeled_classes: f.labeled_classes,
    }
}
