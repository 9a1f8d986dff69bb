use proptest::prelude::*;
use rand::Rng as _;

use super::dataset::canonical_approaches;
use super::*;
use crate::geom::{RigidTransform, Vec3};
use crate::scene::{gen_pile_scene, Primitive, Scenario, Scene};

fn floating_sphere(r: f64) -> Scene {
    let mut s = Scene::new(0.3);
    s.push(Primitive::Sphere { radius: r }, RigidTransform::from_translation(Vec3::repeat(0.15)));
    s
}

fn random_unit(rng: &mut crate::rng::Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() < 1.0 {
            return v.normalize();
        }
    }
}

#[test]
fn centered_sphere_grasp_succeeds_in_any_direction() {
    let s = floating_sphere(0.03);
    let gripper = GripperModel::default();
    let mut rng = crate::rng::from_seed(1);
    for _ in 0..50 {
        let x = random_unit(&mut rng);
        let z = random_unit(&mut rng);
        let g = Grasp::from_axes(Vec3::repeat(0.15), &x, &z, 0.08);
        assert!(evaluate_grasp(&s, &gripper, &g, 0.5));
    }
}

#[test]
fn fingers_inside_sphere_collide() {
    let s = floating_sphere(0.03);
    let g = Grasp::from_axes(Vec3::repeat(0.15), &Vec3::x(), &-Vec3::z(), 0.05);
    let eval = GraspEvaluator::new(GripperModel::default(), 0.5);
    assert_eq!(eval.evaluate(&s, &g).failure, Some(Failure::Collision));
}

fn tilted_slab(angle_deg: f64) -> Scene {
    let mut s = Scene::new(0.3);
    let rot = crate::geom::Quat::from_axis_angle(&Vec3::z_axis(), angle_deg.to_radians());
    s.push(
        Primitive::Box { half_extents: [0.02, 0.05, 0.015] },
        RigidTransform::new(rot, Vec3::repeat(0.15)),
    );
    s
}

#[test]
fn friction_cone_boundary_on_tilted_faces() {
    // cone half-angle atan(0.5) is about 26.6 degrees
    let gripper = GripperModel::default();
    let g = Grasp::from_axes(Vec3::repeat(0.15), &Vec3::x(), &-Vec3::z(), 0.08);
    assert!(evaluate_grasp(&tilted_slab(10.0), &gripper, &g, 0.5));
    let eval = GraspEvaluator::new(gripper, 0.5);
    assert_eq!(eval.evaluate(&tilted_slab(40.0), &g).failure, Some(Failure::Slip));
    // just inside and just outside the cone
    assert!(evaluate_grasp(&tilted_slab(26.0), &gripper, &g, 0.5));
    assert!(!evaluate_grasp(&tilted_slab(27.0), &gripper, &g, 0.5));
}

#[test]
fn blocker_in_finger_path_fails() {
    let mut s = floating_sphere(0.015);
    // thin wall between the +x finger and the sphere
    s.push(
        Primitive::Box { half_extents: [0.002, 0.02, 0.02] },
        RigidTransform::from_translation(Vec3::new(0.15 + 0.028, 0.15, 0.15)),
    );
    let g = Grasp::from_axes(Vec3::repeat(0.15), &Vec3::x(), &-Vec3::z(), 0.08);
    let eval = GraspEvaluator::new(GripperModel::default(), 0.5);
    assert!(dense_sweep_penetrates(&s, &eval, &g, 0.064));
    assert_eq!(eval.evaluate(&s, &g).failure, Some(Failure::DifferentObjects));
}

#[test]
fn table_blocks_grasps_from_below() {
    let mut s = Scene::new(0.3);
    s.push(Primitive::Sphere { radius: 0.03 }, RigidTransform::from_translation(Vec3::new(0.15, 0.15, 0.03)));
    let c = Vec3::new(0.15, 0.15, 0.03);
    let up = Grasp::from_axes(c, &Vec3::x(), &Vec3::z(), 0.08);
    let down = Grasp::from_axes(c, &Vec3::x(), &-Vec3::z(), 0.08);
    let eval = GraspEvaluator::new(GripperModel::default(), 0.5);
    assert_eq!(eval.evaluate(&s, &up).failure, Some(Failure::Collision));
    assert!(eval.evaluate(&s, &down).success());
}

#[test]
fn empty_region_has_no_contact() {
    let s = floating_sphere(0.02);
    let g = Grasp::from_axes(Vec3::new(0.05, 0.05, 0.2), &Vec3::x(), &-Vec3::z(), 0.08);
    let eval = GraspEvaluator::new(GripperModel::default(), 0.5);
    assert_eq!(eval.evaluate(&s, &g).failure, Some(Failure::NoContact));
}

/// Dense 1 mm check: does any finger, swept from open by `travel` along
/// its closing direction, or the palm, reach more than 1 mm into an object?
fn dense_sweep_penetrates(scene: &Scene, eval: &GraspEvaluator, g: &Grasp, travel: f64) -> bool {
    dense_sweep_depth(scene, eval, g, [travel, travel]) < -1e-3
}

fn dense_sweep_depth(scene: &Scene, eval: &GraspEvaluator, g: &Grasp, travel: [f64; 2]) -> f64 {
    const PITCH: f64 = 1e-3;
    let grid = |c: Vec3, h: Vec3| -> Vec<Vec3> {
        let n: Vec<usize> = (0..3).map(|a| ((2.0 * h[a]) / PITCH).ceil() as usize).collect();
        let mut pts = Vec::new();
        for i in 0..=n[0] {
            for j in 0..=n[1] {
                for k in 0..=n[2] {
                    let f = |m: usize, t: usize, a: usize| -h[a] + 2.0 * h[a] * m as f64 / t.max(1) as f64;
                    pts.push(c + Vec3::new(f(i, n[0], 0), f(j, n[1], 1), f(k, n[2], 2)));
                }
            }
        }
        pts
    };
    let mut worst = f64::INFINITY;
    let (pc, ph) = eval.gripper.palm_box();
    let mut boxes = vec![(pc, ph)];
    for (k, side) in [1.0f64, -1.0].into_iter().enumerate() {
        let (c, h) = eval.gripper.finger_box(side, g.width);
        // swept box: from the open position inward by `travel`
        let reach = travel[k];
        let sc = c - Vec3::new(side * reach / 2.0, 0.0, 0.0);
        let sh = Vec3::new(h.x + reach / 2.0, h.y, h.z);
        boxes.push((sc, sh));
    }
    for (c, h) in boxes {
        for p in grid(c, h) {
            worst = worst.min(scene.sdf(&g.to_world(&p)));
        }
    }
    worst
}

#[test]
fn successful_grasps_never_sweep_through_objects() {
    let eval = GraspEvaluator::new(GripperModel::default(), 0.5);
    let mut checked = 0;
    for seed in 0..6 {
        let scene = gen_pile_scene(seed, 5).scene;
        let grasps = sample_grasp_candidates(&scene, &eval.gripper, 40, seed).unwrap();
        for g in grasps {
            let e = eval.evaluate(&scene, &g);
            if let (true, Some([a, b])) = (e.success(), e.contacts) {
                checked += 1;
                let depth = dense_sweep_depth(&scene, &eval, &g, [a.travel, b.travel]);
                assert!(depth > -1e-3, "successful grasp penetrates by {depth}");
            }
        }
    }
    assert!(checked > 10, "only {checked} successes to check");
}

#[test]
fn labels_invariant_under_rotation_about_z() {
    let eval = GraspEvaluator::new(GripperModel::default(), 0.5);
    let mut rng = crate::rng::from_seed(77);
    let pivot = Vec3::new(0.15, 0.15, 0.0);
    let (mut same, mut total) = (0, 0);
    for seed in 0..5 {
        let scene = gen_pile_scene(100 + seed, 5).scene;
        let grasps = sample_grasp_candidates(&scene, &eval.gripper, 40, seed).unwrap();
        for g in grasps {
            let rot = crate::geom::Quat::from_axis_angle(&Vec3::z_axis(), rng.random_range(0.0..std::f64::consts::TAU));
            let moved = Scene {
                workspace_size: scene.workspace_size,
                objects: scene
                    .objects
                    .iter()
                    .map(|o| crate::scene::SceneObject {
                        pose: RigidTransform::new(rot * o.pose.rotation, pivot + rot * (o.pose.translation - pivot)),
                        ..o.clone()
                    })
                    .collect(),
            };
            let g2 = Grasp::new(pivot + rot * (g.center - pivot), rot * g.rotation, g.width);
            total += 1;
            if eval.evaluate(&scene, &g).success() == eval.evaluate(&moved, &g2).success() {
                same += 1;
            }
        }
    }
    assert!(same as f64 >= 0.99 * total as f64, "{same}/{total}");
}

#[test]
fn candidates_are_near_surfaces_and_deterministic() {
    let scene = gen_pile_scene(3, 5).scene;
    let gripper = GripperModel::default();
    let a = sample_grasp_candidates(&scene, &gripper, 64, 9).unwrap();
    let b = sample_grasp_candidates(&scene, &gripper, 64, 9).unwrap();
    assert_eq!(a, b);
    for g in &a {
        assert!(scene.sdf(&g.center).abs() <= 0.02);
        assert!(gripper.width_sweep().contains(&g.width));
        assert!((g.rotation.norm() - 1.0).abs() < 1e-12);
    }
    assert!(sample_grasp_candidates(&Scene::new(0.3), &gripper, 4, 1).is_err());
}

#[test]
fn lone_sphere_candidate_success_rate() {
    let scene = floating_sphere(0.02);
    let gripper = GripperModel::default();
    let grasps = sample_grasp_candidates(&scene, &gripper, 400, 5).unwrap();
    let hits = grasps.iter().filter(|g| evaluate_grasp(&scene, &gripper, g, 0.5)).count();
    let rate = hits as f64 / grasps.len() as f64;
    assert!(rate > 0.30, "success rate {rate}");
}

#[test]
fn canonical_approaches_start_downward_and_are_orthogonal() {
    let x = Vec3::new(1.0, 0.2, 0.3).normalize();
    let a = canonical_approaches(&x, 8);
    assert_eq!(a.len(), 8);
    for z in &a {
        assert!(z.dot(&x).abs() < 1e-12);
        assert!(z.z >= a[0].z - 1e-12);
    }
    // vertical closing axis has no preferred approach but still works
    assert_eq!(canonical_approaches(&Vec3::z(), 4).len(), 4);
}

fn fake_labels(pos: usize, neg: usize) -> Vec<GraspLabel> {
    let g = Grasp::from_axes(Vec3::zeros(), &Vec3::x(), &Vec3::z(), 0.04);
    (0..pos + neg)
        .map(|i| GraspLabel {
            grasp: Grasp { width: i as f64 * 1e-3, ..g },
            success: i % (pos + neg).max(1) < pos,
        })
        .collect()
}

#[test]
fn balance_examples() {
    let out = balance_dataset(&fake_labels(10, 50), 3);
    assert_eq!(out.iter().filter(|l| l.success).count(), 10);
    assert_eq!(out.iter().filter(|l| !l.success).count(), 10);
    assert_eq!(balance_dataset(&fake_labels(10, 5), 3), fake_labels(10, 5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn balanced_negatives_are_a_subset(pos in 0usize..30, neg in 0usize..80, seed in 0u64..1000) {
        let labels = fake_labels(pos, neg);
        let out = balance_dataset(&labels, seed);
        let kept_neg: Vec<_> = out.iter().filter(|l| !l.success).collect();
        prop_assert_eq!(kept_neg.len(), neg.min(pos));
        prop_assert_eq!(out.iter().filter(|l| l.success).count(), pos);
        for l in kept_neg {
            prop_assert!(labels.contains(l));
        }
        let widths: Vec<f64> = out.iter().map(|l| l.grasp.width).collect();
        prop_assert!(widths.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn occupancy_points_examples() {
    assert!(sample_occupancy_points(&Scene::new(0.3), 500, 1).iter().all(|s| !s.occupied));
    let mut half = Scene::new(0.3);
    half.push(
        Primitive::Box { half_extents: [0.15, 0.15, 0.075] },
        RigidTransform::from_translation(Vec3::new(0.15, 0.15, 0.075)),
    );
    let n = 10_000;
    let pts = sample_occupancy_points(&half, n, 2);
    let frac = pts.iter().filter(|s| s.occupied).count() as f64 / n as f64;
    let sigma = (0.25 / n as f64).sqrt();
    assert!((frac - 0.5).abs() < 3.0 * sigma, "{frac}");
    assert_eq!(pts, sample_occupancy_points(&half, n, 2));
}

fn small_config(scenario: Scenario, scenes: usize, seed: u64) -> DatasetConfig {
    DatasetConfig {
        locations_per_scene: 24,
        occupancy_points: 2048,
        ..DatasetConfig::new(scenario, scenes, seed)
    }
}

#[test]
fn single_scene_record() {
    let recs = build_dataset(&small_config(Scenario::Pile, 1, 4), None).unwrap();
    assert_eq!(recs.len(), 1);
    assert!(!recs[0].labels.is_empty());
    assert_eq!(recs[0].occupancy.len(), 2048);
}

fn read_tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_config(Scenario::Packed, 2, 11);
    build_dataset(&cfg, Some(a.path())).unwrap();
    crate::par::sequential(|| build_dataset(&cfg, Some(b.path()))).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert!(ta.len() >= 2 * 7);
    assert_eq!(ta, tb);

    let (manifest, recs) = read_dataset(a.path()).unwrap();
    assert_eq!(manifest.config, cfg);
    let fresh = build_dataset(&cfg, None).unwrap();
    for (r, f) in recs.iter().zip(&fresh) {
        assert_eq!(r.scene, f.scene);
        assert_eq!(r.labels.len(), f.labels.len());
        for (x, y) in r.labels.iter().zip(&f.labels) {
            assert_eq!(x.success, y.success);
            assert!((x.grasp.center - y.grasp.center).norm() < 1e-15);
            assert_eq!(x.grasp.width, y.grasp.width);
        }
        assert_eq!(r.occupancy.len(), f.occupancy.len());
    }
}

#[test]
fn pile_run_is_balanced() {
    let recs = build_dataset(&small_config(Scenario::Pile, 50, 21), None).unwrap();
    let mut balanced = 0;
    for r in &recs {
        // either negatives were abundant and got trimmed to #pos, or untouched
        assert!(2 * r.positives() >= r.labels.len());
        if 2 * r.positives() == r.labels.len() {
            balanced += 1;
        }
    }
    let pos: usize = recs.iter().map(|r| r.positives()).sum();
    assert!(pos > 0);
    assert!(balanced * 5 >= recs.len() * 4, "{balanced}/{}", recs.len());
}
