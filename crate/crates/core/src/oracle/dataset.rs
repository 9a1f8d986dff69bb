//! Self-supervised dataset: scenes, fused observations, labeled grasps and
//! occupancy points, written one directory per scene.

use std::f64::consts::PI;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Grasp, GraspEvaluator, GraspLabel, GripperModel, DEFAULT_FRICTION};
use crate::error::{Error, Result};
use crate::geom::{orthogonal, Vec3};
use crate::par;
use crate::rng::{self, Rng};
use crate::scene::{OccupancySample, Scenario, Scene, DEFAULT_WORKSPACE};
use crate::sensor::NoiseParams;
use crate::tsdf::{observe_scene, TsdfGrid, DEFAULT_RESOLUTION};

/// Maximum angle between the sampled closing axis and the surface normal.
const CLOSING_CONE_DEG: f64 = 30.0;
/// Center offset range along the inward normal.
const OFFSET_RANGE: (f64, f64) = (-0.005, 0.015);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scenario: Scenario,
    pub num_scenes: usize,
    pub seed: u64,
    pub objects_per_scene: usize,
    /// Candidate grasp locations sampled per scene before balancing.
    pub locations_per_scene: usize,
    /// Approach directions tried around each closing axis.
    pub rolls: usize,
    pub occupancy_points: usize,
    pub resolution: usize,
    pub workspace: f64,
    pub friction: f64,
    pub gripper: GripperModel,
    /// `None` fuses clean depth.
    pub noise: Option<NoiseParams>,
}

impl DatasetConfig {
    pub fn new(scenario: Scenario, num_scenes: usize, seed: u64) -> Self {
        Self {
            scenario,
            num_scenes,
            seed,
            objects_per_scene: 5,
            locations_per_scene: 96,
            rolls: 8,
            occupancy_points: 2048,
            resolution: DEFAULT_RESOLUTION,
            workspace: DEFAULT_WORKSPACE,
            friction: DEFAULT_FRICTION,
            gripper: GripperModel::default(),
            noise: Some(NoiseParams::default()),
        }
    }
}

/// Everything recorded for one training scene.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub scene: Scene,
    pub tsdf: TsdfGrid,
    pub labels: Vec<GraspLabel>,
    pub occupancy: Vec<OccupancySample>,
}

impl SceneRecord {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| l.success).count()
    }
}

/// Run-level manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub scenes: Vec<String>,
    pub skipped: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SceneManifest {
    index: usize,
    seed: u64,
    scenario: Scenario,
    objects: usize,
    positives: usize,
    negatives: usize,
    occupancy_points: usize,
}

#[derive(Serialize, Deserialize)]
struct GraspLine {
    t: [f64; 3],
    quat: [f64; 4],
    w: f64,
    q: u8,
}

/// Uniform direction within `max_angle` of `axis`.
fn sample_cone(rng: &mut Rng, axis: &Vec3, max_angle: f64) -> Vec3 {
    let cos_t = rng.random_range(max_angle.cos()..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let u = orthogonal(axis);
    let v = axis.cross(&u);
    (axis * cos_t + (u * phi.cos() + v * phi.sin()) * sin_t).normalize()
}

/// Grasp centers and closing axes near the surface.
fn sample_locations(scene: &Scene, n: usize, seed: u64) -> Result<Vec<(Vec3, Vec3)>> {
    let surface = scene.sample_surface(n, rng::derive(seed, "grasp-surface", 0))?;
    let mut rng = rng::stream(seed, "grasp-pose", 0);
    let l = scene.workspace_size;
    Ok(surface
        .into_iter()
        .map(|(p, nrm)| {
            let depth = rng.random_range(OFFSET_RANGE.0..OFFSET_RANGE.1);
            let closing = sample_cone(&mut rng, &nrm, CLOSING_CONE_DEG.to_radians());
            // offsets below contact faces can leave the workspace
            ((p - nrm * depth).map(|v| v.clamp(0.0, l)), closing)
        })
        .collect())
}

/// Random grasps near the surface: closing axis within 30 degrees of the
/// normal, uniform roll, width from the opening sweep (`w_max` if none fits).
pub fn sample_grasp_candidates(
    scene: &Scene,
    gripper: &GripperModel,
    n: usize,
    seed: u64,
) -> Result<Vec<Grasp>> {
    let eval = GraspEvaluator::new(*gripper, DEFAULT_FRICTION);
    let locations = sample_locations(scene, n, seed)?;
    let mut rng = rng::stream(seed, "grasp-roll", 0);
    Ok(locations
        .into_iter()
        .map(|(t, x)| {
            let roll = rng.random_range(0.0..2.0 * PI);
            let u = orthogonal(&x);
            let approach = u * roll.cos() + x.cross(&u) * roll.sin();
            let g = Grasp::from_axes(t, &x, &approach, gripper.max_width);
            let w = eval.choose_width(scene, t, g.rotation).unwrap_or(gripper.max_width);
            Grasp { width: w, ..g }
        })
        .collect())
}

/// Approach directions around `closing`, starting from the most downward one
/// and alternating outward in equal angular steps.
pub(crate) fn canonical_approaches(closing: &Vec3, rolls: usize) -> Vec<Vec3> {
    let down = Vec3::new(0.0, 0.0, -1.0);
    let proj = down - closing * down.dot(closing);
    let z0 = if proj.norm() > 1e-6 { proj.normalize() } else { orthogonal(closing) };
    let z1 = closing.cross(&z0);
    let step = 2.0 * PI / rolls.max(1) as f64;
    (0..rolls.max(1))
        .map(|k| {
            let m = k.div_ceil(2) as f64;
            let angle = if k % 2 == 1 { m * step } else { -m * step };
            z0 * angle.cos() + z1 * angle.sin()
        })
        .collect()
}

/// Label one location with the first successful approach (in canonical
/// order) and its width; negative when no approach succeeds.
pub fn label_location(
    scene: &Scene,
    eval: &GraspEvaluator,
    center: Vec3,
    closing: &Vec3,
    rolls: usize,
) -> GraspLabel {
    let approaches = canonical_approaches(closing, rolls);
    for approach in &approaches {
        let g = Grasp::from_axes(center, closing, approach, eval.gripper.max_width);
        let Some(w) = eval.choose_width(scene, center, g.rotation) else { continue };
        let g = Grasp { width: w, ..g };
        if eval.evaluate(scene, &g).success() {
            return GraspLabel { grasp: g, success: true };
        }
    }
    let g = Grasp::from_axes(center, closing, &approaches[0], eval.gripper.max_width);
    let w = eval.choose_width(scene, center, g.rotation).unwrap_or(eval.gripper.max_width);
    GraspLabel {
        grasp: Grasp { width: w, ..g },
        success: false,
    }
}

/// Keep every positive and a seeded uniform subset of negatives of the same
/// size. Relative order is preserved.
pub fn balance_dataset(labels: &[GraspLabel], seed: u64) -> Vec<GraspLabel> {
    let pos = labels.iter().filter(|l| l.success).count();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].success).collect();
    if neg.len() <= pos {
        return labels.to_vec();
    }
    let mut rng = rng::stream(seed, "balance", 0);
    let mut keep = vec![false; labels.len()];
    for k in index::sample(&mut rng, neg.len(), pos) {
        keep[neg[k]] = true;
    }
    labels
        .iter()
        .enumerate()
        .filter(|(i, l)| l.success || keep[*i])
        .map(|(_, l)| *l)
        .collect()
}

pub fn sample_occupancy_points(scene: &Scene, n: usize, seed: u64) -> Vec<OccupancySample> {
    scene.sample_occupancy(n, seed)
}

/// Generate, observe and label scene `index` of a run.
pub fn build_scene_record(config: &DatasetConfig, index: usize) -> Result<SceneRecord> {
    let seed = rng::derive(config.seed, "scene", index as u64);
    let generated = config
        .scenario
        .generate(rng::derive(seed, "objects", 0), config.objects_per_scene);
    let scene = Scene { workspace_size: config.workspace, ..generated.scene };
    let tsdf = observe_scene(&scene, config.resolution, config.noise.as_ref(), rng::derive(seed, "noise", 0))?;
    let eval = GraspEvaluator::new(config.gripper, config.friction);
    let locations = sample_locations(&scene, config.locations_per_scene, seed)?;
    let labels: Vec<GraspLabel> = locations
        .iter()
        .map(|(t, x)| label_location(&scene, &eval, *t, x, config.rolls))
        .collect();
    let labels = balance_dataset(&labels, seed);
    let occupancy = sample_occupancy_points(&scene, config.occupancy_points, rng::derive(seed, "occupancy", 0));
    Ok(SceneRecord { index, seed, scene, tsdf, labels, occupancy })
}

fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Build a run, writing it under `out` when given. Scenes that fail to
/// sample are skipped and logged; output order is by scene index.
pub fn build_dataset(config: &DatasetConfig, out: Option<&Path>) -> Result<Vec<SceneRecord>> {
    if config.num_scenes == 0 {
        return Err(Error::ContractViolation("num_scenes must be at least 1".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let results = par::map_range(config.num_scenes, |i| -> Result<Option<SceneRecord>> {
        match build_scene_record(config, i) {
            Ok(rec) => {
                if let Some(dir) = out {
                    write_scene_record(&dir.join(scene_dir_name(i)), &rec, config.scenario)?;
                }
                Ok(Some(rec))
            }
            Err(Error::SamplingExhausted { wanted, found, attempts }) => {
                log::warn!("scene {i}: sampling exhausted ({found}/{wanted} after {attempts} attempts), skipped");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some(rec) => records.push(rec),
            None => skipped.push(i),
        }
    }
    if let Some(dir) = out {
        let manifest = DatasetManifest {
            config: config.clone(),
            scenes: records.iter().map(|r| scene_dir_name(r.index)).collect(),
            skipped,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(records)
}

pub fn write_scene_record(dir: &Path, rec: &SceneRecord, scenario: Scenario) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    rec.tsdf.write(&dir.join("tsdf"))?;
    std::fs::write(dir.join("scene.json"), rec.scene.to_json()?)?;

    let mut grasps = std::io::BufWriter::new(std::fs::File::create(dir.join("grasps.jsonl"))?);
    for l in &rec.labels {
        let g = &l.grasp;
        let line = GraspLine {
            t: [g.center.x, g.center.y, g.center.z],
            quat: g.quat_wxyz(),
            w: g.width,
            q: l.success as u8,
        };
        writeln!(grasps, "{}", serde_json::to_string(&line)?)?;
    }
    grasps.flush()?;

    let occ: Vec<u8> = rec
        .occupancy
        .iter()
        .flat_map(|s| {
            let p = s.point;
            [p.x as f32, p.y as f32, p.z as f32, s.occupied as u8 as f32]
        })
        .flat_map(f32::to_le_bytes)
        .collect();
    std::fs::write(dir.join("occupancy.bin"), occ)?;

    let manifest = SceneManifest {
        index: rec.index,
        seed: rec.seed,
        scenario,
        objects: rec.scene.len(),
        positives: rec.positives(),
        negatives: rec.labels.len() - rec.positives(),
        occupancy_points: rec.occupancy.len(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_grasps(path: &Path) -> Result<Vec<GraspLabel>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GraspLine = serde_json::from_str(&line)?;
        out.push(GraspLabel {
            grasp: Grasp::from_wxyz(Vec3::from(g.t), g.quat, g.w),
            success: g.q == 1,
        });
    }
    Ok(out)
}

pub fn read_occupancy(path: &Path) -> Result<Vec<OccupancySample>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!("occupancy file has {} bytes", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]) as f64;
            OccupancySample {
                point: Vec3::new(f(0), f(1), f(2)),
                occupied: f(3) > 0.5,
            }
        })
        .collect())
}

impl SceneRecord {
    pub fn read(dir: &Path) -> Result<SceneRecord> {
        let manifest: SceneManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        Ok(SceneRecord {
            index: manifest.index,
            seed: manifest.seed,
            scene: Scene::from_json(&std::fs::read_to_string(dir.join("scene.json"))?)?,
            tsdf: TsdfGrid::read(&dir.join("tsdf"))?,
            labels: read_grasps(&dir.join("grasps.jsonl"))?,
            occupancy: read_occupancy(&dir.join("occupancy.bin"))?,
        })
    }
}

/// Load every scene listed in a run manifest.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SceneRecord>)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let records = manifest
        .scenes
        .iter()
        .map(|name| SceneRecord::read(&PathBuf::from(dir).join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}
