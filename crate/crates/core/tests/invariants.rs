//! Property tests and brute-force oracles for the geometric and bookkeeping layers.

use std::f64::consts::PI;

use proptest::prelude::*;

use scs_lab::eval::seg_metrics;
use scs_lab::geometry::{bev_iou, nms, point_in_box, transform_frame, wrap_angle, Box7, ClassId, ClassSet, DetBox, Point3};
use scs_lab::labels::{ensemble_pixel, Frame};
use scs_lab::losses::ProbField;
use scs_lab::rangeimage::{local_range_variance, project, ProjectionConfig};
use scs_lab::synth::{generate_scene, SceneConfig};
use scs_lab::voxel::{bin_to_heading, heading_to_bin, voxelize, VoxelConfig};

fn arb_box() -> impl Strategy<Value = Box7> {
    (-8.0..8.0f64, -8.0..8.0f64, -2.0..1.0f64, 0.2..6.0f64, 0.2..3.0f64, 0.3..2.5f64, -7.0..7.0f64)
        .prop_map(|(x, y, z, l, w, h, t)| Box7::new(x, y, z, l, w, h, t, ClassId::VEHICLE))
}

fn arb_points(n: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(
        (-30.0..30.0f64, -30.0..30.0f64, -2.0..1.5f64, 0.0..1.0f64).prop_map(|(x, y, z, i)| Point3::new(x, y, z, i)),
        1..n,
    )
}

proptest! {
    #[test]
    fn wrapped_angles_stay_in_range_and_keep_direction(t in -100.0..100.0f64) {
        let w = wrap_angle(t);
        prop_assert!((-PI..PI).contains(&w));
        prop_assert!((w.sin() - t.sin()).abs() < 1e-9 && (w.cos() - t.cos()).abs() < 1e-9);
    }

    #[test]
    fn heading_bins_round_trip(t in -PI..PI, bins in 2usize..40) {
        let (b, r) = heading_to_bin(t, bins);
        prop_assert!(b < bins);
        prop_assert!(r.abs() <= PI / bins as f64 + 1e-12);
        let back = bin_to_heading(b, r, bins);
        prop_assert!((wrap_angle(back - t)).abs() < 1e-9);
    }

    #[test]
    fn iou_symmetric_bounded_and_reflexive(a in arb_box(), b in arb_box()) {
        let ab = bev_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - bev_iou(&b, &a)).abs() < 1e-12);
        prop_assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_invariant_under_rigid_motion(a in arb_box(), b in arb_box(), rot in -PI..PI, flip in any::<bool>()) {
        let f = Frame { id: 0, points: vec![], gt_boxes: vec![a, b], labeled_classes: ClassSet::all(2) };
        let g = transform_frame(&f, rot, flip);
        prop_assert!((bev_iou(&a, &b) - bev_iou(&g.gt_boxes[0], &g.gt_boxes[1])).abs() < 1e-9);
    }

    #[test]
    fn nms_keeps_a_separated_subset(boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..12), thr in 0.05..0.9f64) {
        let dets: Vec<DetBox> = boxes.into_iter().map(|(bbox, score)| DetBox { bbox, score }).collect();
        let kept = nms(&dets, thr);
        for (i, k) in kept.iter().enumerate() {
            prop_assert!(dets.contains(k));
            for other in &kept[i + 1..] {
                prop_assert!(bev_iou(&k.bbox, &other.bbox) < thr);
                prop_assert!(k.score >= other.score);
            }
        }
        // the top-scoring detection always survives
        if let Some(best) = dets.iter().map(|d| d.score).reduce(f64::max) {
            prop_assert_eq!(kept[0].score, best);
        }
    }

    #[test]
    fn containment_survives_augmentation(b in arb_box(), u in -0.6..0.6f64, v in -0.6..0.6f64, w in -0.6..0.6f64, rot in -PI..PI, flip in any::<bool>()) {
        let (s, c) = b.heading.sin_cos();
        let (lx, ly) = (u * b.length, v * b.width);
        let p = Point3::new(b.cx + lx * c - ly * s, b.cy + lx * s + ly * c, b.cz + w * b.height, 0.3);
        let f = Frame { id: 0, points: vec![p], gt_boxes: vec![b], labeled_classes: ClassSet::all(2) };
        let g = transform_frame(&f, rot, flip);
        let inside = u.abs() < 0.5 && v.abs() < 0.5 && w.abs() < 0.5;
        let margin = [u, v, w].iter().map(|x| (x.abs() - 0.5).abs()).fold(f64::MAX, f64::min);
        prop_assume!(margin > 1e-6);
        prop_assert_eq!(point_in_box(&p, &b), inside);
        prop_assert_eq!(point_in_box(&g.points[0], &g.gt_boxes[0]), inside);
    }

    #[test]
    fn voxel_statistics_match_brute_force(points in arb_points(300)) {
        let cfg = VoxelConfig::vehicle();
        let grid = voxelize(&points, ClassId::VEHICLE, &cfg);
        let mut total = 0;
        for (i, v) in grid.voxels.iter().enumerate() {
            let members: Vec<&Point3> = points
                .iter()
                .filter(|p| grid.cell_of(p.x, p.y) == Some((v.ix, v.iy)))
                .collect();
            prop_assert_eq!(members.len(), v.count as usize);
            prop_assert_eq!(grid.find(v.ix, v.iy), Some(i));
            total += members.len();
            let n = members.len() as f64;
            let mean = members.iter().map(|p| p.z).sum::<f64>() / n;
            // two-pass variance as the reference
            let var = members.iter().map(|p| (p.z - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((v.mean_z() - mean).abs() < 1e-9);
            prop_assert!((v.var_z() - var).abs() < 1e-9);
            let zmax = members.iter().map(|p| p.z).fold(f64::MIN, f64::max);
            prop_assert_eq!(v.z_max, zmax);
        }
        let inside = points.iter().filter(|p| grid.cell_of(p.x, p.y).is_some()).count();
        prop_assert_eq!(total, inside);
        prop_assert!(grid.voxels.windows(2).all(|w| (w[0].ix, w[0].iy) < (w[1].ix, w[1].iy)));
    }

    #[test]
    fn projection_keeps_the_nearest_point_per_pixel(points in arb_points(400)) {
        let cfg = ProjectionConfig { height: 8, width: 32, ..ProjectionConfig::default() };
        let ri = project(&points, &cfg);
        for (i, p) in points.iter().enumerate() {
            if let Some((row, col)) = cfg.pixel_of(p) {
                let pixel = ri.index(row, col);
                prop_assert!(ri.valid[pixel]);
                prop_assert!(ri.range[pixel] <= p.range());
                let src = ri.source[pixel].unwrap() as usize;
                prop_assert_eq!(cfg.pixel_of(&points[src]), Some((row, col)));
                if src == i {
                    prop_assert_eq!(ri.range[pixel], p.range());
                }
            }
        }
        let var = local_range_variance(&ri);
        prop_assert!(var.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn segmentation_metrics_match_a_recount(pairs in prop::collection::vec((0u8..3, 0u8..3, any::<bool>()), 1..200)) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let valid: Vec<bool> = pairs.iter().map(|p| p.2).collect();
        let m = seg_metrics(&pred, &truth, &valid, 2).unwrap();
        for c in 0..3u8 {
            let count = |f: &dyn Fn(&(u8, u8, bool)) -> bool| pairs.iter().filter(|p| p.2 && f(p)).count();
            let tp = count(&|p| p.0 == c && p.1 == c);
            let fp = count(&|p| p.0 == c && p.1 != c);
            let fnn = count(&|p| p.0 != c && p.1 == c);
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            let mc = m[c as usize];
            prop_assert_eq!(mc.support, tp + fnn);
            prop_assert_eq!(mc.precision, ratio(tp, tp + fp));
            prop_assert_eq!(mc.recall, ratio(tp, tp + fnn));
            prop_assert_eq!(mc.iou, ratio(tp, tp + fp + fnn));
        }
    }

    #[test]
    fn ensembled_rows_stay_normalized(raw in prop::collection::vec(0.01..1.0f64, 6 * 3)) {
        let field = |offset: usize| {
            let mut data = Vec::new();
            for px in 0..3 {
                let row = &raw[px * 3 + offset * 9..px * 3 + offset * 9 + 3];
                let s: f64 = row.iter().sum();
                data.extend(row.iter().map(|x| x / s));
            }
            ProbField { classes: 3, data }
        };
        let e = ensemble_pixel(&field(0), &field(1)).unwrap();
        for px in 0..3 {
            prop_assert!(e.check_normalized(px).is_ok());
        }
    }
}

#[test]
fn object_points_land_inside_their_boxes() {
    for index in 0..20 {
        let f = generate_scene(&SceneConfig::default(), index).unwrap();
        let ri = project(&f.points, &ProjectionConfig::default());
        assert!(ri.valid_count() > 0);
        let object_points = f.points.iter().filter(|p| f.gt_boxes.iter().any(|b| point_in_box(p, b))).count();
        let ground = f.points.len() - object_points;
        assert!(ground > 0 && object_points > 0, "frame {index}");
    }
}

/// Nearest-centroid classifier on (mean z, footprint extent) separates the two classes.
#[test]
fn generated_classes_are_separable() {
    let mut feats: Vec<(f64, f64, ClassId)> = Vec::new();
    for index in 0..60 {
        let f = generate_scene(&SceneConfig::default(), index).unwrap();
        for b in &f.gt_boxes {
            let inside: Vec<&Point3> = f.points.iter().filter(|p| point_in_box(p, b)).collect();
            let mean_z = inside.iter().map(|p| p.z).sum::<f64>() / inside.len() as f64;
            feats.push((mean_z, b.length.max(b.width), b.class_id));
        }
    }
    let centroid = |c: ClassId| {
        let sel: Vec<_> = feats.iter().filter(|f| f.2 == c).collect();
        let n = sel.len() as f64;
        (sel.iter().map(|f| f.0).sum::<f64>() / n, sel.iter().map(|f| f.1).sum::<f64>() / n)
    };
    let (cv, cp) = (centroid(ClassId::VEHICLE), centroid(ClassId::PEDESTRIAN));
    let d = |f: &(f64, f64, ClassId), c: (f64, f64)| (f.0 - c.0).powi(2) + (f.1 - c.1).powi(2);
    let correct = feats
        .iter()
        .filter(|f| (d(f, cv) < d(f, cp)) == (f.2 == ClassId::VEHICLE))
        .count();
    assert!(correct as f64 >= 0.95 * feats.len() as f64, "{correct} of {}", feats.len());
}
