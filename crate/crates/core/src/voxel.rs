//! Bird's-eye-view voxel grids per class, heatmap and shape targets, and the
//! supervised-voxel masks used under each missing-label scheme.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box7, ClassId, ClassSet, Point3};
use crate::labels::PseudoLabels;
use crate::losses::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelConfig {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    /// Half-size in meters of the square neighborhood aggregated into voxel features.
    pub window: f64,
}

impl VoxelConfig {
    fn square(cell: f64, half_extent: f64, window: f64) -> Self {
        let n = (2.0 * half_extent / cell).round() as usize;
        VoxelConfig { origin_x: -half_extent, origin_y: -half_extent, cell, nx: n, ny: n, window }
    }

    pub fn vehicle() -> Self {
        VoxelConfig::square(0.4, 32.0, 2.4)
    }

    pub fn pedestrian() -> Self {
        VoxelConfig::square(0.2, 32.0, 0.6)
    }

    /// Default grid for a class id; unknown classes get the vehicle geometry.
    pub fn for_class(c: ClassId) -> Self {
        if c == ClassId::PEDESTRIAN {
            VoxelConfig::pedestrian()
        } else {
            VoxelConfig::vehicle()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) || self.nx == 0 || self.ny == 0 || !(self.window >= 0.0) {
            return Err(Error::Config("voxel grid needs cell > 0, non-empty dims, window ≥ 0".into()));
        }
        Ok(())
    }
}

/// Accumulated statistics of the points that fell into one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Voxel {
    pub ix: u32,
    pub iy: u32,
    pub count: u32,
    pub sum_x: f64,
    pub sum_y: f64,
    pub sum_z: f64,
    pub sum_xx: f64,
    pub sum_yy: f64,
    pub sum_xy: f64,
    pub sum_zz: f64,
    pub sum_range: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Voxel {
    pub fn mean_z(&self) -> f64 {
        if self.count == 0 { 0.0 } else { self.sum_z / self.count as f64 }
    }

    pub fn var_z(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let n = self.count as f64;
        (self.sum_zz / n - (self.sum_z / n).powi(2)).max(0.0)
    }

    pub fn mean_range(&self) -> f64 {
        if self.count == 0 { 0.0 } else { self.sum_range / self.count as f64 }
    }
}

/// Sparse BEV grid: only occupied voxels are stored, sorted by `(ix, iy)`.
/// Unoccupied voxels have all-zero statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub class_id: ClassId,
    pub cfg: VoxelConfig,
    pub voxels: Vec<Voxel>,
    // dense `ix * ny + iy` table of voxel indices, `u32::MAX` when empty
    lookup: Vec<u32>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(u32, u32)> {
        let fx = ((x - self.cfg.origin_x) / self.cfg.cell).floor();
        let fy = ((y - self.cfg.origin_y) / self.cfg.cell).floor();
        if fx >= 0.0 && fy >= 0.0 && fx < self.cfg.nx as f64 && fy < self.cfg.ny as f64 {
            Some((fx as u32, fy as u32))
        } else {
            None
        }
    }

    pub fn find(&self, ix: u32, iy: u32) -> Option<usize> {
        if ix as usize >= self.cfg.nx || iy as usize >= self.cfg.ny {
            return None;
        }
        match self.lookup[ix as usize * self.cfg.ny + iy as usize] {
            u32::MAX => None,
            i => Some(i as usize),
        }
    }

    /// Statistics at `(ix, iy)`, zero when the voxel is empty.
    pub fn stats(&self, ix: u32, iy: u32) -> Voxel {
        self.find(ix, iy)
            .map(|i| self.voxels[i])
            .unwrap_or(Voxel { ix, iy, ..Voxel::default() })
    }

    pub fn center(&self, v: usize) -> (f64, f64) {
        let vx = &self.voxels[v];
        (
            self.cfg.origin_x + (vx.ix as f64 + 0.5) * self.cfg.cell,
            self.cfg.origin_y + (vx.iy as f64 + 0.5) * self.cfg.cell,
        )
    }

    /// Reference height used for vertical offsets: the voxel's mean point height.
    pub fn reference_z(&self, v: usize) -> f64 {
        self.voxels[v].mean_z()
    }
}

/// Bins points by `floor((p - origin) / cell)`; points outside the grid are dropped.
pub fn voxelize(points: &[Point3], class_id: ClassId, cfg: &VoxelConfig) -> VoxelGrid {
    let mut grid = VoxelGrid { class_id, cfg: *cfg, voxels: Vec::new(), lookup: vec![u32::MAX; cfg.nx * cfg.ny] };
    let mut voxels: Vec<Voxel> = Vec::new();
    for p in points {
        let Some((ix, iy)) = grid.cell_of(p.x, p.y) else { continue };
        let slot = &mut grid.lookup[ix as usize * cfg.ny + iy as usize];
        if *slot == u32::MAX {
            *slot = voxels.len() as u32;
            voxels.push(Voxel { ix, iy, z_min: f64::INFINITY, z_max: f64::NEG_INFINITY, ..Voxel::default() });
        }
        let v = &mut voxels[*slot as usize];
        v.count += 1;
        v.sum_x += p.x;
        v.sum_y += p.y;
        v.sum_z += p.z;
        v.sum_xx += p.x * p.x;
        v.sum_yy += p.y * p.y;
        v.sum_xy += p.x * p.y;
        v.sum_zz += p.z * p.z;
        v.sum_range += p.range();
        v.z_min = v.z_min.min(p.z);
        v.z_max = v.z_max.max(p.z);
    }
    voxels.sort_by_key(|v| (v.ix, v.iy));
    for (i, v) in voxels.iter().enumerate() {
        grid.lookup[v.ix as usize * cfg.ny + v.iy as usize] = i as u32;
    }
    grid.voxels = voxels;
    grid
}

/// Number of entries in each voxel's feature vector.
pub const VOXEL_FEATURES: usize = 14;

/// Decomposes a heading into a bin index and a residual in `[-π/B, π/B)`.
/// Bin `b` is centered at `-π + b·2π/B`.
pub fn heading_to_bin(heading: f64, bins: usize) -> (usize, f64) {
    let width = 2.0 * PI / bins as f64;
    let t = (wrap_angle(heading) + PI) / width;
    let mut b = t.round();
    let mut r = (t - b) * width;
    if r >= 0.5 * width {
        b += 1.0;
        r -= width;
    }
    if r < -0.5 * width {
        b -= 1.0;
        r += width;
    }
    ((b as i64).rem_euclid(bins as i64) as usize, r)
}

pub fn bin_to_heading(bin: usize, residual: f64, bins: usize) -> f64 {
    wrap_angle(bin as f64 * 2.0 * PI / bins as f64 - PI + residual)
}

/// Hand-built context features for each occupied voxel, row-major `len x VOXEL_FEATURES`.
///
/// Each row aggregates the voxel itself and its square neighborhood of half-size
/// `cfg.window`: counts, heights, the neighborhood centroid offset, principal extents
/// and orientation. `bins` sets the angular bin layout used for the orientation residual.
pub fn voxel_features(grid: &VoxelGrid, bins: usize) -> Vec<f64> {
    let cell = grid.cfg.cell;
    let reach = (grid.cfg.window / cell).round() as i64;
    let radius = (reach as f64 + 0.5) * cell;
    let mut out = vec![0.0; grid.len() * VOXEL_FEATURES];
    for (i, v) in grid.voxels.iter().enumerate() {
        let (cx, cy) = grid.center(i);
        let (mut n, mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0, 0.0);
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                let (jx, jy) = (v.ix as i64 + dx, v.iy as i64 + dy);
                if jx < 0 || jy < 0 {
                    continue;
                }
                let Some(j) = grid.find(jx as u32, jy as u32) else { continue };
                let u = &grid.voxels[j];
                n += u.count as f64;
                // moments relative to the voxel center keep the sums well conditioned
                let (ux, uy) = (u.sum_x - cx * u.count as f64, u.sum_y - cy * u.count as f64);
                sx += ux;
                sy += uy;
                sz += u.sum_z;
                sxx += u.sum_xx - 2.0 * cx * u.sum_x + cx * cx * u.count as f64;
                syy += u.sum_yy - 2.0 * cy * u.sum_y + cy * cy * u.count as f64;
                sxy += u.sum_xy - cx * u.sum_y - cy * u.sum_x + cx * cy * u.count as f64;
                zmin = zmin.min(u.z_min);
                zmax = zmax.max(u.z_max);
            }
        }
        let (mx, my) = (sx / n, sy / n);
        let cxx = (sxx / n - mx * mx).max(0.0);
        let cyy = (syy / n - my * my).max(0.0);
        let cxy = sxy / n - mx * my;
        let half_tr = 0.5 * (cxx + cyy);
        let disc = (0.25 * (cxx - cyy).powi(2) + cxy * cxy).sqrt();
        let l1 = half_tr + disc;
        let l2 = (half_tr - disc).max(0.0);
        let phi = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
        let aniso = (l1 - l2) / (l1 + l2 + 1e-9);
        let (_, phi_residual) = heading_to_bin(phi, bins);
        let (ox, oy) = (mx / radius, my / radius);

        let row = &mut out[i * VOXEL_FEATURES..(i + 1) * VOXEL_FEATURES];
        row[0] = 1.0;
        row[1] = (v.count as f64).ln_1p();
        row[2] = v.mean_z();
        row[3] = n.ln_1p();
        row[4] = ox;
        row[5] = oy;
        // peaks at the voxel nearest the neighborhood centroid
        row[6] = (-0.5 * (mx * mx + my * my) / (cell * cell)).exp();
        row[7] = (l1.sqrt() + 0.02).ln();
        row[8] = (l2.sqrt() + 0.02).ln();
        row[9] = aniso * (2.0 * phi).cos();
        row[10] = aniso * (2.0 * phi).sin();
        row[11] = phi_residual;
        row[12] = sz / n;
        row[13] = (zmax - zmin + 0.05).ln();
    }
    out
}

/// Per-voxel heatmap target for one class over the grid's occupied voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTarget {
    pub class_id: ClassId,
    pub values: Vec<f64>,
    pub positive: Vec<bool>,
    pub supervised: Vec<bool>,
}

impl HeatmapTarget {
    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.values.len());
        self.supervised = mask;
        self
    }

    pub fn positive_count(&self) -> usize {
        self.positive.iter().filter(|p| **p).count()
    }
}

fn kernel(b: &Box7, x: f64, y: f64) -> f64 {
    let sigma = 0.25 * b.length.min(b.width);
    let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Index of the box that owns voxel `v`, with its heatmap value.
fn owner(grid: &VoxelGrid, v: usize, boxes: &[Box7]) -> Option<(usize, f64)> {
    let vx = &grid.voxels[v];
    let (x, y) = grid.center(v);
    let mut best: Option<(usize, f64, f64)> = None;
    for (bi, b) in boxes.iter().enumerate() {
        let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
        let value = if grid.cell_of(b.cx, b.cy) == Some((vx.ix, vx.iy)) {
            1.0
        } else if b.contains_bev(x, y) {
            kernel(b, x, y)
        } else {
            continue;
        };
        let better = match best {
            None => true,
            Some((_, bv, bd)) => value > bv || (value == bv && d2 < bd),
        };
        if better {
            best = Some((bi, value, d2));
        }
    }
    best.map(|(bi, value, _)| (bi, value))
}

/// Gaussian-of-BEV-distance heatmap, clamped to 0 outside every box and forced to 1
/// at the voxel containing a box center. All voxels start out supervised.
pub fn build_heatmap_target(grid: &VoxelGrid, boxes: &[Box7], eps: f64) -> HeatmapTarget {
    let values: Vec<f64> =
        (0..grid.len()).map(|v| owner(grid, v, boxes).map_or(0.0, |(_, y)| y)).collect();
    let positive = values.iter().map(|y| *y > 1.0 - eps).collect();
    HeatmapTarget {
        class_id: grid.class_id,
        supervised: vec![true; values.len()],
        values,
        positive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeEntry {
    /// Index into the grid's occupied voxels.
    pub voxel: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub log_l: f64,
    pub log_w: f64,
    pub log_h: f64,
    pub bin: usize,
    pub residual: f64,
}

impl ShapeEntry {
    pub fn offsets_and_sizes(&self) -> [f64; 6] {
        [self.dx, self.dy, self.dz, self.log_l, self.log_w, self.log_h]
    }
}

/// Regression targets at positive voxels, in voxel order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShapeTarget {
    pub bins: usize,
    pub entries: Vec<ShapeEntry>,
}

impl ShapeTarget {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn encode_box(grid: &VoxelGrid, v: usize, b: &Box7, bins: usize) -> ShapeEntry {
    let (x, y) = grid.center(v);
    let (bin, residual) = heading_to_bin(b.heading, bins);
    ShapeEntry {
        voxel: v,
        dx: b.cx - x,
        dy: b.cy - y,
        dz: b.cz - grid.reference_z(v),
        log_l: b.length.ln(),
        log_w: b.width.ln(),
        log_h: b.height.ln(),
        bin,
        residual,
    }
}

pub fn build_shape_target(grid: &VoxelGrid, boxes: &[Box7], eps: f64, bins: usize) -> Result<ShapeTarget> {
    if bins < 2 {
        return Err(Error::Config(format!("heading bin count must be ≥ 2, got {bins}")));
    }
    let heat = build_heatmap_target(grid, boxes, eps);
    let mut entries = Vec::new();
    for v in (0..grid.len()).filter(|v| heat.positive[*v]) {
        let (bi, _) = owner(grid, v, boxes).ok_or(Error::OrphanPositive { voxel: v })?;
        entries.push(encode_box(grid, v, &boxes[bi], bins));
    }
    Ok(ShapeTarget { bins, entries })
}

/// Voxels of `grid`'s class whose heatmap loss is supervised under `scheme`.
///
/// Labeled classes are fully supervised. For an unlabeled class the aggressive scheme
/// still supervises everything, the conservative scheme only voxels inside a trusted box
/// of that class, and the informed scheme voxels inside a trusted box of any class.
pub fn heatmap_mask(grid: &VoxelGrid, pseudo: &PseudoLabels, labeled: ClassSet, scheme: Scheme) -> Vec<bool> {
    let k = grid.class_id;
    if labeled.contains(k) || scheme == Scheme::Aggressive {
        return vec![true; grid.len()];
    }
    let boxes: Vec<&Box7> = match scheme {
        Scheme::Conservative => pseudo.boxes(k).collect(),
        _ => pseudo.all_boxes().collect(),
    };
    (0..grid.len())
        .map(|v| {
            let (x, y) = grid.center(v);
            boxes.iter().any(|b| b.contains_bev(x, y))
        })
        .collect()
}

/// `heatmap_mask` for each grid in turn.
pub fn heatmap_masks(grids: &[VoxelGrid], pseudo: &PseudoLabels, labeled: ClassSet, scheme: Scheme) -> Vec<Vec<bool>> {
    grids.iter().map(|g| heatmap_mask(g, pseudo, labeled, scheme)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{Provenance, PseudoBox};

    fn pt(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z, 0.5)
    }

    fn ped_box(cx: f64, cy: f64) -> Box7 {
        Box7::new(cx, cy, -1.0, 0.8, 0.8, 1.7, 0.0, ClassId::PEDESTRIAN)
    }

    #[test]
    fn single_point_single_voxel() {
        let g = voxelize(&[pt(1.23, -4.5, 0.3)], ClassId::VEHICLE, &VoxelConfig::vehicle());
        assert_eq!(g.len(), 1);
        assert_eq!(g.voxels[0].count, 1);
        assert_eq!(g.voxels[0].mean_z(), 0.3);
        assert_eq!(g.voxels[0].var_z(), 0.0);
        let (ix, iy) = g.cell_of(1.23, -4.5).unwrap();
        assert_eq!(g.stats(ix + 1, iy).count, 0);
    }

    #[test]
    fn pedestrian_grid_is_finer() {
        assert!(VoxelConfig::pedestrian().cell < VoxelConfig::vehicle().cell);
    }

    #[test]
    fn points_outside_grid_dropped() {
        let g = voxelize(&[pt(100.0, 0.0, 0.0)], ClassId::VEHICLE, &VoxelConfig::vehicle());
        assert!(g.is_empty());
    }

    #[test]
    fn heatmap_center_far_and_sigma() {
        let cfg = VoxelConfig::pedestrian();
        // Box center sits at a voxel center: origin -32, cell 0.2 → 10.1 is a center.
        let b = Box7::new(10.1, 0.1, -1.0, 1.6, 1.6, 1.7, 0.0, ClassId::PEDESTRIAN);
        let sigma = 0.25 * 1.6;
        let pts = [pt(10.1, 0.1, -1.0), pt(10.1 + sigma, 0.1, -1.0), pt(-20.0, 5.0, -1.0)];
        let g = voxelize(&pts, ClassId::PEDESTRIAN, &cfg);
        let t = build_heatmap_target(&g, &[b], 1e-3);
        let at = |x: f64, y: f64| {
            let (ix, iy) = g.cell_of(x, y).unwrap();
            t.values[g.find(ix, iy).unwrap()]
        };
        assert_eq!(at(10.1, 0.1), 1.0);
        assert_eq!(at(-20.0, 5.0), 0.0);
        assert!((at(10.1 + sigma, 0.1) - (-0.5f64).exp()).abs() < 1e-9);
        assert_eq!(t.positive_count(), 1);
    }

    #[test]
    fn shape_target_at_voxel_center_has_zero_offsets() {
        let cfg = VoxelConfig::pedestrian();
        let b = Box7::new(10.1, 0.1, -1.0, 0.8, 0.6, 1.7, 0.0, ClassId::PEDESTRIAN);
        let g = voxelize(&[pt(10.1, 0.1, -1.2)], ClassId::PEDESTRIAN, &cfg);
        let s = build_shape_target(&g, &[b], 1e-3, 12).unwrap();
        assert_eq!(s.len(), 1);
        let e = s.entries[0];
        assert!(e.dx.abs() < 1e-12 && e.dy.abs() < 1e-12);
        assert!((e.dz - 0.2).abs() < 1e-12);
        assert_eq!(e.bin, 6);
        assert_eq!(e.residual, 0.0);
        assert!(build_shape_target(&g, &[b], 1e-3, 1).is_err());
    }

    #[test]
    fn bin_centers_have_zero_residual() {
        for b in 0..12 {
            let heading = -PI + b as f64 * 2.0 * PI / 12.0;
            let (bin, r) = heading_to_bin(heading, 12);
            assert_eq!(bin, b);
            assert!(r.abs() < 1e-12);
        }
    }

    fn pseudo_with(vehicles: Vec<Box7>, peds: Vec<Box7>) -> PseudoLabels {
        let wrap = |bs: Vec<Box7>| {
            bs.into_iter()
                .map(|bbox| PseudoBox { bbox, score: 0.9, provenance: Provenance::Pseudo })
                .collect()
        };
        PseudoLabels { per_class: vec![wrap(vehicles), wrap(peds)] }
    }

    #[test]
    fn labeled_class_mask_is_full() {
        let g = voxelize(&[pt(3.0, 3.0, -1.0), pt(9.0, 9.0, -1.0)], ClassId::PEDESTRIAN, &VoxelConfig::pedestrian());
        let pseudo = pseudo_with(vec![], vec![]);
        for scheme in [Scheme::Aggressive, Scheme::Conservative, Scheme::Informed] {
            let m = heatmap_mask(&g, &pseudo, ClassSet::single(ClassId::PEDESTRIAN), scheme);
            assert!(m.iter().all(|x| *x));
        }
    }

    #[test]
    fn unlabeled_class_without_pseudo_boxes() {
        let g = voxelize(&[pt(3.0, 3.0, -1.0), pt(9.0, 9.0, -1.0)], ClassId::PEDESTRIAN, &VoxelConfig::pedestrian());
        let pseudo = pseudo_with(vec![], vec![]);
        let labeled = ClassSet::single(ClassId::VEHICLE);
        assert!(heatmap_mask(&g, &pseudo, labeled, Scheme::Aggressive).iter().all(|x| *x));
        assert!(heatmap_mask(&g, &pseudo, labeled, Scheme::Conservative).iter().all(|x| !*x));
        assert!(heatmap_mask(&g, &pseudo, labeled, Scheme::Informed).iter().all(|x| !*x));
    }

    #[test]
    fn informed_uses_other_class_boxes() {
        let g = voxelize(&[pt(3.0, 3.0, -1.0), pt(9.0, 9.0, -1.0)], ClassId::PEDESTRIAN, &VoxelConfig::pedestrian());
        let veh = Box7::new(9.0, 9.0, -1.0, 4.0, 2.0, 1.5, 0.3, ClassId::VEHICLE);
        let pseudo = pseudo_with(vec![veh], vec![ped_box(3.0, 3.0)]);
        let labeled = ClassSet::single(ClassId::VEHICLE);
        let cons = heatmap_mask(&g, &pseudo, labeled, Scheme::Conservative);
        let inf = heatmap_mask(&g, &pseudo, labeled, Scheme::Informed);
        let i3 = g.find(g.cell_of(3.0, 3.0).unwrap().0, g.cell_of(3.0, 3.0).unwrap().1).unwrap();
        let i9 = 1 - i3;
        assert!(cons[i3] && !cons[i9]);
        assert!(inf[i3] && inf[i9]);
    }
}
