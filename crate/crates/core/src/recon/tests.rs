use proptest::prelude::*;
use std::f64::consts::PI;

use super::*;
use crate::geom::{quat_from_wxyz, RigidTransform};
use crate::scene::Primitive;

fn sphere_sdf(c: Vec3, r: f64) -> impl Fn(&Vec3) -> f64 + Sync {
    move |p: &Vec3| (p - c).norm() - r
}

fn grid64(f: impl Fn(&Vec3) -> f64 + Sync) -> ScalarGrid {
    ScalarGrid::from_fn([64; 3], Vec3::zeros(), 0.3 / 63.0, f)
}

#[test]
fn field_below_isolevel_gives_empty_mesh() {
    let g = ScalarGrid::from_fn([5, 6, 7], Vec3::zeros(), 0.1, |_| -1.0);
    assert!(marching_cubes(&g, 0.0).unwrap().is_empty());
    let g = ScalarGrid::from_fn([5, 6, 7], Vec3::zeros(), 0.1, |_| 2.0);
    assert!(marching_cubes(&g, 0.0).unwrap().is_empty());
    let bad = ScalarGrid { dims: [1, 4, 4], origin: Vec3::zeros(), spacing: 0.1, values: vec![0.0; 16] };
    assert!(marching_cubes(&bad, 0.0).is_err());
}

#[test]
fn sphere_mesh_is_watertight_with_accurate_volume() {
    let (c, r) = (Vec3::new(0.15, 0.14, 0.16), 0.1);
    let g = grid64(sphere_sdf(c, r));
    let mesh = marching_cubes(&g, 0.0).unwrap();
    assert!(mesh.is_watertight());
    let exact = 4.0 / 3.0 * PI * r.powi(3);
    let v = mesh.volume();
    assert!(((v - exact) / exact).abs() < 0.02, "volume {v} vs {exact}");
    for t in &mesh.triangles {
        let [a, b, cc] = t.map(|i| mesh.vertices[i as usize]);
        let centroid = (a + b + cc) / 3.0;
        assert!(mesh.face_normal(t).dot(&(centroid - c)) > 0.0);
        assert!(mesh.face_normal(t).norm() > 2e-12);
    }
}

#[test]
fn box_mesh_bounds_match_the_box() {
    let prim = Primitive::Box { half_extents: [0.05, 0.08, 0.03] };
    let c = Vec3::new(0.12, 0.15, 0.1);
    let g = grid64(|p| prim.sdf_local(&(p - c)));
    let mesh = marching_cubes(&g, 0.0).unwrap();
    let (lo, hi) = mesh.bounds().unwrap();
    let h = Vec3::new(0.05, 0.08, 0.03);
    for k in 0..3 {
        assert!((lo[k] - (c[k] - h[k])).abs() <= g.spacing);
        assert!((hi[k] - (c[k] + h[k])).abs() <= g.spacing);
    }
    assert!(mesh.is_watertight());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn vertices_lie_near_the_true_surface(kind in 0usize..3, a in 0.03f64..0.08, b in 0.03f64..0.08, angle in 0.0f64..3.0) {
        let prim = match kind {
            0 => Primitive::Sphere { radius: a },
            1 => Primitive::Box { half_extents: [a, b, 0.5 * (a + b)] },
            _ => Primitive::Cylinder { radius: a, half_height: b },
        };
        let rot = quat_from_wxyz([(angle / 2.0).cos(), 0.0, (angle / 2.0).sin(), 0.0]);
        let pose = RigidTransform::new(rot, Vec3::new(0.15, 0.15, 0.15));
        let sdf = move |p: &Vec3| prim.sdf_local(&pose.apply_inverse(p));
        let spacing = 0.3 / 39.0;
        let g = ScalarGrid::from_fn([40; 3], Vec3::zeros(), spacing, sdf);
        let mesh = marching_cubes(&g, 0.0).unwrap();
        prop_assert!(!mesh.is_empty());
        let diag = spacing * 3f64.sqrt();
        for v in &mesh.vertices {
            prop_assert!(sdf(v).abs() <= diag);
        }
    }
}

#[test]
fn ply_export_lists_every_element() {
    let g = ScalarGrid::from_fn([10; 3], Vec3::zeros(), 0.03, sphere_sdf(Vec3::repeat(0.135), 0.08));
    let mesh = marching_cubes(&g, 0.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ply");
    mesh.write_ply(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("ply\nformat ascii 1.0\n"));
    assert!(text.contains(&format!("element vertex {}\n", mesh.vertices.len())));
    assert!(text.contains(&format!("element face {}\n", mesh.triangles.len())));
    let body = text.split("end_header\n").nth(1).unwrap();
    assert_eq!(body.lines().count(), mesh.vertices.len() + mesh.triangles.len());
}

fn sphere_scene(c: Vec3, r: f64) -> Scene {
    let mut s = Scene::new(0.3);
    s.push(Primitive::Sphere { radius: r }, RigidTransform::from_translation(c));
    s
}

fn truth(scene: &Scene) -> impl Fn(&[Vec3]) -> Result<Vec<f64>> + Sync + '_ {
    move |pts: &[Vec3]| Ok(pts.iter().map(|p| if scene.occupancy(p) { 1.0 } else { 0.0 }).collect())
}

#[test]
fn iou_trivial_cases() {
    let s = sphere_scene(Vec3::repeat(0.15), 0.05);
    let est = volumetric_iou(&truth(&s), &s, 20_000, 1).unwrap();
    assert_eq!(est.iou, 1.0);
    assert!(est.union > 0);
    let zero = |pts: &[Vec3]| Ok(vec![0.0; pts.len()]);
    assert_eq!(volumetric_iou(&zero, &s, 20_000, 1).unwrap().iou, 0.0);
    assert!(volumetric_iou(&zero, &s, 0, 1).is_err());
}

#[test]
fn overlapping_spheres_match_closed_form() {
    let (r1, r2, d) = (0.06, 0.05, 0.04);
    let c = Vec3::new(0.13, 0.15, 0.15);
    let s = sphere_scene(c, r1);
    let other = c + Vec3::new(d, 0.0, 0.0);
    let pred = |pts: &[Vec3]| Ok(pts.iter().map(|p| if (p - other).norm() <= r2 { 1.0 } else { 0.0 }).collect());
    let lens = PI * (r1 + r2 - d).powi(2) * (d * d + 2.0 * d * (r1 + r2) - 3.0 * (r1 - r2).powi(2)) / (12.0 * d);
    let v1 = 4.0 / 3.0 * PI * r1.powi(3);
    let v2 = 4.0 / 3.0 * PI * r2.powi(3);
    let exact = lens / (v1 + v2 - lens);
    let est = volumetric_iou(&pred, &s, 200_000, 2).unwrap();
    assert!((est.iou - exact).abs() < 3.0 * est.std_error(), "{} vs {exact}", est.iou);
}

#[test]
fn doubling_samples_is_consistent() {
    let s = sphere_scene(Vec3::repeat(0.15), 0.06);
    let pred = |pts: &[Vec3]| Ok(pts.iter().map(|p| if (p - Vec3::new(0.17, 0.15, 0.15)).norm() < 0.06 { 0.9 } else { 0.1 }).collect());
    let a = volumetric_iou(&pred, &s, 50_000, 3).unwrap();
    let b = volumetric_iou(&pred, &s, 100_000, 3).unwrap();
    let bound = 3.0 * (a.std_error().powi(2) + b.std_error().powi(2)).sqrt();
    assert!((a.iou - b.iou).abs() < bound);
    assert!((0.0..=1.0).contains(&a.iou));
}

fn box_scene() -> (Scene, Vec3) {
    let mut s = Scene::new(0.3);
    let c = Vec3::new(0.15, 0.15, 0.05);
    s.push(Primitive::Box { half_extents: [0.02, 0.05, 0.05] }, RigidTransform::from_translation(c));
    (s, c)
}

#[test]
fn iou_grasp_cases() {
    let (s, c) = box_scene();
    let gripper = GripperModel::default();
    let g = Grasp::from_axes(c + Vec3::new(0.0, 0.0, 0.02), &Vec3::x(), &-Vec3::z(), 0.08);
    let est = iou_grasp(&truth(&s), &s, &[g], &gripper, 20_000, 4).unwrap();
    assert_eq!(est.iou, 1.0);

    // half of the object inside the region predicted
    let half = |pts: &[Vec3]| Ok(pts.iter().map(|p| if s.occupancy(p) && p.x < c.x { 1.0 } else { 0.0 }).collect());
    let est = iou_grasp(&half, &s, &[g], &gripper, 40_000, 5).unwrap();
    assert!((est.iou - 0.5).abs() < 3.0 * est.std_error(), "{}", est.iou);

    // region in free space, nothing predicted: empty union
    let away = Grasp::from_axes(Vec3::new(0.05, 0.05, 0.2), &Vec3::x(), &-Vec3::z(), 0.08);
    let zero = |pts: &[Vec3]| Ok(vec![0.0; pts.len()]);
    assert_eq!(iou_grasp(&zero, &s, &[away], &gripper, 5_000, 6).unwrap().iou, 1.0);
    assert!(iou_grasp(&zero, &s, &[], &gripper, 5_000, 6).is_err());
}

#[test]
fn grasp_region_samples_are_uniform_over_the_union() {
    let gripper = GripperModel::default();
    let rot = quat_from_wxyz([1.0, 0.0, 0.0, 0.0]);
    let a = Grasp::new(Vec3::new(0.1, 0.1, 0.1), rot, 0.08);
    // second box overlaps the first on half its closing extent
    let b = Grasp::new(Vec3::new(0.14, 0.1, 0.1), rot, 0.08);
    let pts = sample_grasp_regions(&[a, b], &gripper, 60_000, 7);
    // union spans x in [0.06, 0.18]; uniform => one third per 4 cm slab
    let mid = pts.iter().filter(|p| p.x >= 0.10 && p.x < 0.14).count() as f64 / pts.len() as f64;
    assert!((mid - 1.0 / 3.0).abs() < 0.01, "{mid}");
}
