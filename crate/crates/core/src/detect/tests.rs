use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::geom::{quat_from_wxyz, RigidTransform};
use crate::net::tests::tiny_config;
use crate::rng;
use crate::scene::{Primitive, Scene};
use crate::tsdf::observe_scene;

fn scene() -> Scene {
    let mut s = Scene::new(0.3);
    s.push(Primitive::Sphere { radius: 0.04 }, RigidTransform::from_translation(Vec3::new(0.15, 0.15, 0.04)));
    s.push(
        Primitive::Box { half_extents: [0.02, 0.03, 0.05] },
        RigidTransform::from_translation(Vec3::new(0.08, 0.2, 0.05)),
    );
    s
}

fn cand(c: Vec3, q: f64) -> Candidate {
    Candidate { grasp: Grasp::new(c, quat_from_wxyz([1.0, 0.0, 0.0, 0.0]), 0.05), quality: q }
}

fn random_cands(n: usize, seed: u64, spread: f64) -> Vec<Candidate> {
    let mut rng = rng::from_seed(seed);
    (0..n)
        .map(|_| {
            let c = Vec3::new(rng.random_range(0.0..spread), rng.random_range(0.0..spread), rng.random_range(0.0..spread));
            // coarse qualities so ties occur
            cand(c, (rng.random_range(0..50) as f64) / 50.0)
        })
        .collect()
}

/// Textbook O(n^2) greedy suppression.
fn nms_reference(cands: &[Candidate], radius: f64) -> Vec<Candidate> {
    let mut alive: Vec<Candidate> = cands.to_vec();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for (i, c) in alive.iter().enumerate() {
            let b = &alive[best];
            let (pc, pb) = (c.grasp.center, b.grasp.center);
            let better = c.quality > b.quality
                || (c.quality == b.quality && (pc.x, pc.y, pc.z).partial_cmp(&(pb.x, pb.y, pb.z)) == Some(Ordering::Less));
            if better {
                best = i;
            }
        }
        let keep = alive[best];
        out.push(keep);
        alive.retain(|c| (c.grasp.center - keep.grasp.center).norm() > radius);
    }
    out
}

#[test]
fn dense_query_counts_and_transparency() {
    let net = GigaNet::new(tiny_config(), 1).unwrap();
    let tsdf = observe_scene(&scene(), 8, None, 0).unwrap();
    assert_eq!(dense_query(&net, &tsdf, 40).unwrap().len(), 64000);
    let hr = dense_query(&net, &tsdf, 60).unwrap();
    assert_eq!(hr.len(), 216000);
    let planes = net.encode_planes(&tsdf).unwrap();
    for i in [0, 1234, 99_999, 215_999] {
        let c = &hr[i];
        let single = net.predict_grasps(&planes, &[c.grasp.center]).unwrap()[0];
        assert!((single.quality - c.quality).abs() < 1e-12);
        assert!((single.width - c.grasp.width).abs() < 1e-12);
    }
    for c in &hr {
        assert!((0.0..=1.0).contains(&c.quality));
        assert!(c.grasp.width >= 0.0 && c.grasp.width <= 0.08);
        let q = c.grasp.quat_wxyz();
        assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn mask_examples_and_predicate_oracle() {
    let s = scene();
    let tsdf = observe_scene(&s, 40, None, 0).unwrap();
    let cfg = DetectionConfig::default();
    let mask = Mask::new(&tsdf, &cfg);
    assert!(!mask.keeps(&Vec3::new(0.003, 0.003, 0.003)));
    assert!(!mask.keeps(&Vec3::new(0.296, 0.296, 0.2)));
    assert!(mask.keeps(&Vec3::new(0.15, 0.15, 0.08)));

    let cands: Vec<Candidate> = grid_centers(0.3, 20).into_iter().map(|c| cand(c, 0.5)).collect();
    let kept = mask_impractical(&cands, &cfg, &tsdf);
    let n = tsdf.resolution;
    let reach = 2.0 * cfg.nms_radius;
    let oracle: Vec<Candidate> = cands
        .iter()
        .filter(|c| {
            let p = c.grasp.center;
            let m = cfg.boundary_margin;
            if p.x < m || p.x > 0.3 - m || p.y < m || p.y > 0.3 - m || p.z < cfg.min_height {
                return false;
            }
            let (i, j, k) = tsdf.voxel_of(&p).unwrap();
            let free = tsdf.weight(i, j, k) > 0.0 && tsdf.value(i, j, k) == 1.0;
            if !free {
                return true;
            }
            let centre = tsdf.voxel_center(i, j, k);
            let mut near_surface = false;
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        if tsdf.weight(x, y, z) > 0.0
                            && tsdf.value(x, y, z) <= 0.0
                            && (tsdf.voxel_center(x, y, z) - centre).norm() <= reach + 1e-12
                        {
                            near_surface = true;
                        }
                    }
                }
            }
            near_surface
        })
        .copied()
        .collect();
    assert_eq!(kept, oracle);
    assert!(!kept.is_empty() && kept.len() < cands.len());
}

#[test]
fn nms_examples() {
    let a = cand(Vec3::new(0.1, 0.1, 0.1), 0.7);
    assert_eq!(nms(&[a], 0.03), vec![a]);
    let b = cand(Vec3::new(0.11, 0.1, 0.1), 0.9);
    assert_eq!(nms(&[a, b], 0.03), vec![b]);
    let far = cand(Vec3::new(0.2, 0.1, 0.1), 0.1);
    assert_eq!(nms(&[a, far, b], 0.03), vec![b, far]);
}

#[test]
fn nms_matches_reference_on_500_candidates() {
    for seed in 0..5 {
        let cands = random_cands(500, seed, 0.3);
        let got = nms(&cands, 0.03);
        assert_eq!(got, nms_reference(&cands, 0.03));
        for (i, a) in got.iter().enumerate() {
            for b in &got[i + 1..] {
                assert!((a.grasp.center - b.grasp.center).norm() > 0.03);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn nms_agrees_with_reference(seed in 0u64..100_000, n in 1usize..200, radius in 0.005f64..0.1) {
        let cands = random_cands(n, seed, 0.2);
        prop_assert_eq!(nms(&cands, radius), nms_reference(&cands, radius));
    }
}

#[test]
fn selection_threshold_and_ties() {
    let low: Vec<Candidate> = random_cands(50, 1, 0.3).into_iter().map(|c| Candidate { quality: c.quality * 0.49, ..c }).collect();
    assert!(select_grasp(&low, 0.5).is_none());
    let mut with_max = low.clone();
    with_max[17].quality = 0.9;
    assert_eq!(select_grasp(&with_max, 0.5), Some(with_max[17]));
    let tie = [cand(Vec3::new(0.2, 0.0, 0.0), 0.8), cand(Vec3::new(0.1, 0.3, 0.0), 0.8)];
    assert_eq!(select_grasp(&tie, 0.5), Some(tie[1]));
    let at = [cand(Vec3::repeat(0.1), 0.5)];
    assert!(select_grasp(&at, 0.5).is_some());
    assert!(select_grasp(&[], 0.5).is_none());
}

proptest! {
    #[test]
    fn selection_is_invariant_to_monotone_maps(seed in 0u64..10_000) {
        let cands = random_cands(40, seed, 0.3);
        let mapped: Vec<Candidate> = cands.iter().map(|c| Candidate { quality: c.quality.powi(3), ..*c }).collect();
        let a = select_grasp(&cands, 1e-9).map(|c| c.grasp.center);
        let b = select_grasp(&mapped, 1e-12).map(|c| c.grasp.center);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn pipeline_matches_staged_calls() {
    let net = GigaNet::new(tiny_config(), 2).unwrap();
    let tsdf = observe_scene(&scene(), 8, None, 0).unwrap();
    let cfg = DetectionConfig { threshold: 0.01, resolution: 24, ..DetectionConfig::default() };
    let det = detect(&net, &tsdf, &cfg).unwrap();
    let dense = dense_query(&net, &tsdf, 24).unwrap();
    let masked = mask_impractical(&dense, &cfg, &tsdf);
    let survivors = nms(&masked, cfg.nms_radius);
    assert_eq!(det.queried, dense.len());
    assert_eq!(det.masked, masked.len());
    assert_eq!(det.survivors.len(), survivors.len());
    for (a, b) in det.survivors.iter().zip(&survivors) {
        assert_eq!(a.grasp.center, b.grasp.center);
        assert!((a.quality - b.quality).abs() < 1e-12);
    }
    let sel = select_grasp(&survivors, cfg.threshold).unwrap();
    assert_eq!(det.selected.unwrap().grasp.center, sel.grasp.center);
    assert!(survivors.len() <= masked.len() && masked.len() <= dense.len());
}

#[test]
fn co_grid_selection_dominates_base_grid() {
    let net = GigaNet::new(tiny_config(), 4).unwrap();
    let tsdf = observe_scene(&scene(), 8, None, 0).unwrap();
    let base = DetectionConfig { threshold: 0.01, ..DetectionConfig::default() };
    let hr = DetectionConfig { threshold: 0.01, ..DetectionConfig::high_resolution() };
    let a = detect(&net, &tsdf, &base).unwrap().selected.unwrap();
    let b = detect(&net, &tsdf, &hr).unwrap();
    assert_eq!(b.queried, 216_000 + 64_000);
    assert!(b.selected.unwrap().quality >= a.quality - 1e-6);
}

#[test]
fn landscape_slices_agree_with_dense_grid() {
    let net = GigaNet::new(tiny_config(), 3).unwrap();
    let tsdf = observe_scene(&scene(), 8, None, 0).unwrap();
    let res = 10;
    let dense = dense_query(&net, &tsdf, res).unwrap();
    let at = |i: usize, j: usize, k: usize| dense[i + res * (j + res * k)].quality;
    let mut slice_max = f64::MIN;
    for axis in [Axis::X, Axis::Y, Axis::Z] {
        for index in 0..res {
            let l = affordance_landscape(&net, &tsdf, res, axis, index).unwrap();
            assert_eq!(l.values.len(), res * res);
            for row in 0..res {
                for col in 0..res {
                    let [i, j, k] = slice_cell(axis, index, row, col);
                    assert!((l.values[row * res + col] - at(i, j, k)).abs() < 1e-12);
                }
            }
            slice_max = l.values.iter().copied().fold(slice_max, f64::max);
        }
    }
    let dense_max = dense.iter().map(|c| c.quality).fold(f64::MIN, f64::max);
    assert!((slice_max - dense_max).abs() < 1e-12);
    assert!(affordance_landscape(&net, &tsdf, res, Axis::Z, res).is_err());

    let l = affordance_landscape(&net, &tsdf, res, Axis::Z, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    l.write_csv(&dir.path().join("s.csv")).unwrap();
    l.write_png(&dir.path().join("s.png")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), res);
    let img = image::open(dir.path().join("s.png")).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (res as u32, res as u32));
}
