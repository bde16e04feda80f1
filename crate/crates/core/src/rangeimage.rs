//! Spherical projection of point clouds, segmentation targets with missing-label
//! bookkeeping, and per-pixel features for the first stage.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_in_box, ClassId, Point3};
use crate::labels::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    pub inclination_min: f64,
    pub inclination_max: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            height: 32,
            width: 256,
            azimuth_min: -PI,
            azimuth_max: PI,
            inclination_min: -0.3,
            inclination_max: 0.1,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("range image must be at least 1x1".into()));
        }
        let az = self.azimuth_max - self.azimuth_min;
        let inc = self.inclination_max - self.inclination_min;
        if !(az > 0.0 && az <= 2.0 * PI + 1e-12) || !(inc > 0.0) {
            return Err(Error::Config("projection spans must be positive".into()));
        }
        Ok(())
    }

    fn full_circle(&self) -> bool {
        self.azimuth_max - self.azimuth_min >= 2.0 * PI - 1e-12
    }

    /// Pixel `(row, col)` for a direction, or `None` when out of span.
    pub fn pixel_of(&self, p: &Point3) -> Option<(usize, usize)> {
        let rxy = p.x.hypot(p.y);
        let az = p.y.atan2(p.x);
        let inc = p.z.atan2(rxy);
        let az_span = self.azimuth_max - self.azimuth_min;
        let inc_span = self.inclination_max - self.inclination_min;
        let col_f = ((az - self.azimuth_min) / az_span * self.width as f64).floor();
        let col = if self.full_circle() {
            (col_f as i64).rem_euclid(self.width as i64) as usize
        } else if col_f >= 0.0 && col_f < self.width as f64 {
            col_f as usize
        } else {
            return None;
        };
        let row_f = ((self.inclination_max - inc) / inc_span * self.height as f64).floor();
        if !(row_f >= 0.0 && row_f < self.height as f64) {
            return None;
        }
        Some((row_f as usize, col))
    }
}

/// Range image with channels (range, z, intensity) and back-references into the source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub range: Vec<f64>,
    pub z: Vec<f64>,
    pub intensity: Vec<f64>,
    pub valid: Vec<bool>,
    pub source: Vec<Option<u32>>,
}

impl RangeImage {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

/// Projects points into a range image. Collisions keep the nearer point (lower index on ties).
pub fn project(points: &[Point3], cfg: &ProjectionConfig) -> RangeImage {
    let n = cfg.height * cfg.width;
    let mut ri = RangeImage {
        height: cfg.height,
        width: cfg.width,
        range: vec![0.0; n],
        z: vec![0.0; n],
        intensity: vec![0.0; n],
        valid: vec![false; n],
        source: vec![None; n],
    };
    for (i, p) in points.iter().enumerate() {
        let r = p.range();
        if !(r > 0.0) || !r.is_finite() {
            continue;
        }
        let Some((row, col)) = cfg.pixel_of(p) else { continue };
        let idx = row * cfg.width + col;
        if ri.valid[idx] && ri.range[idx] <= r {
            continue;
        }
        ri.valid[idx] = true;
        ri.range[idx] = r;
        ri.z[idx] = p.z;
        ri.intensity[idx] = p.intensity;
        ri.source[idx] = Some(i as u32);
    }
    ri
}

/// Per-pixel segmentation target: class index, missing-label mask and untrusted mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTarget {
    pub class: Vec<u8>,
    /// Pixels whose true class is unknown (no labeled box covers them).
    pub missing: Vec<bool>,
    /// Subset of `missing` still untrusted after pseudo-labeling.
    pub untrusted: Vec<bool>,
    pub valid: Vec<bool>,
}

impl SegTarget {
    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }
}

/// Builds the per-pixel target from the frame's labeled boxes.
pub fn build_seg_target(ri: &RangeImage, f: &Frame) -> Result<SegTarget> {
    let n = ri.len();
    let mut t = SegTarget {
        class: vec![0; n],
        missing: vec![false; n],
        untrusted: vec![false; n],
        valid: ri.valid.clone(),
    };
    for pixel in 0..n {
        if !ri.valid[pixel] {
            continue;
        }
        let src = ri.source[pixel]
            .ok_or(Error::BrokenBackReference { pixel, reason: "has no source point" })?
            as usize;
        let p = f
            .points
            .get(src)
            .ok_or(Error::BrokenBackReference { pixel, reason: "points past the frame's cloud" })?;
        let mut best: Option<(f64, ClassId)> = None;
        for b in f.gt_boxes.iter().filter(|b| f.labeled_classes.contains(b.class_id)) {
            if point_in_box(p, b) {
                let d2 = (p.x - b.cx).powi(2) + (p.y - b.cy).powi(2) + (p.z - b.cz).powi(2);
                if best.map_or(true, |(bd, _)| d2 < bd) {
                    best = Some((d2, b.class_id));
                }
            }
        }
        match best {
            Some((_, c)) => t.class[pixel] = c.0,
            None => {
                t.missing[pixel] = true;
                t.untrusted[pixel] = true;
            }
        }
    }
    Ok(t)
}

/// Number of entries in each pixel's feature vector.
pub const PIXEL_FEATURES: usize = 12;

/// Row-major `H*W x PIXEL_FEATURES` feature matrix.
///
/// Layout: range/20, z, z², intensity, ln(1 + 3x3 range variance), validity,
/// same-surface support / 10 and its square, same-surface mean intensity and its
/// square, same-surface height span, bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    pub data: Vec<f64>,
    pub pixels: usize,
}

impl PixelFeatures {
    pub const ARITY: usize = PIXEL_FEATURES;

    pub fn row(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * Self::ARITY..(pixel + 1) * Self::ARITY]
    }
}

/// Population variance of the valid ranges in each valid pixel's 3x3 neighborhood.
/// Invalid pixels get 0.
pub fn local_range_variance(ri: &RangeImage) -> Vec<f64> {
    let (h, w) = (ri.height as isize, ri.width as isize);
    let mut out = vec![0.0; ri.len()];
    for row in 0..h {
        for col in 0..w {
            let idx = (row * w + col) as usize;
            if !ri.valid[idx] {
                continue;
            }
            let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (r, c) = (row + dr, col + dc);
                    if r < 0 || r >= h || c < 0 || c >= w {
                        continue;
                    }
                    let j = (r * w + c) as usize;
                    if !ri.valid[j] {
                        continue;
                    }
                    // Welford update
                    n += 1.0;
                    let x = ri.range[j];
                    let d = x - mean;
                    mean += d / n;
                    m2 += d * (x - mean);
                }
            }
            out[idx] = (m2 / n).max(0.0);
        }
    }
    out
}

/// Half-extent in columns and rows of the window scanned by `similar_range_support`.
const SUPPORT_COLS: isize = 6;
const SUPPORT_ROWS: isize = 1;
/// Range difference in meters under which a neighbor counts as the same surface.
const SUPPORT_TOLERANCE: f64 = 1.0;

/// Statistics of the pixels in a wide horizontal window that lie within
/// `SUPPORT_TOLERANCE` of a pixel's range, i.e. roughly the same surface.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurfaceStats {
    /// Same-surface neighbors, excluding the pixel itself.
    pub support: f64,
    /// Mean intensity over the pixel and its same-surface neighbors.
    pub mean_intensity: f64,
    /// Height span (max z - min z) over the same set.
    pub z_span: f64,
}

/// Per-pixel `SurfaceStats`; invalid pixels get zeros. No wrap-around.
pub fn surface_stats(ri: &RangeImage) -> Vec<SurfaceStats> {
    let (h, w) = (ri.height as isize, ri.width as isize);
    let mut out = vec![SurfaceStats::default(); ri.len()];
    for row in 0..h {
        for col in 0..w {
            let idx = (row * w + col) as usize;
            if !ri.valid[idx] {
                continue;
            }
            let (mut n, mut si) = (0usize, 0.0);
            let (mut zmin, mut zmax) = (ri.z[idx], ri.z[idx]);
            for r in (row - SUPPORT_ROWS).max(0)..=(row + SUPPORT_ROWS).min(h - 1) {
                for c in (col - SUPPORT_COLS).max(0)..=(col + SUPPORT_COLS).min(w - 1) {
                    let j = (r * w + c) as usize;
                    if ri.valid[j] && (ri.range[j] - ri.range[idx]).abs() < SUPPORT_TOLERANCE {
                        n += 1;
                        si += ri.intensity[j];
                        zmin = zmin.min(ri.z[j]);
                        zmax = zmax.max(ri.z[j]);
                    }
                }
            }
            out[idx] = SurfaceStats { support: (n - 1) as f64, mean_intensity: si / n as f64, z_span: zmax - zmin };
        }
    }
    out
}

pub fn pixel_features(ri: &RangeImage) -> PixelFeatures {
    let var = local_range_variance(ri);
    let surface = surface_stats(ri);
    let n = ri.len();
    let mut data = vec![0.0; n * PIXEL_FEATURES];
    for i in 0..n {
        let row = &mut data[i * PIXEL_FEATURES..(i + 1) * PIXEL_FEATURES];
        row[PIXEL_FEATURES - 1] = 1.0;
        if !ri.valid[i] {
            continue;
        }
        row[0] = ri.range[i] / 20.0;
        row[1] = ri.z[i];
        row[2] = ri.z[i] * ri.z[i];
        row[3] = ri.intensity[i];
        row[4] = var[i].ln_1p();
        row[5] = 1.0;
        let st = surface[i];
        let s = st.support / 10.0;
        row[6] = s;
        row[7] = s * s;
        row[8] = st.mean_intensity;
        row[9] = st.mean_intensity * st.mean_intensity;
        row[10] = st.z_span;
    }
    PixelFeatures { data, pixels: n }
}
