//! Clutter-removal benchmark: observe, detect, execute with the oracle,
//! remove the grasped object, repeat.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::{detect, DetectionConfig, GraspJson};
use crate::error::{Error, Result};
use crate::net::GigaNet;
use crate::geom::Vec3;
use crate::oracle::{sample_grasp_candidates, SceneRecord, Failure, Grasp, GraspEvaluator, GripperModel, DEFAULT_FRICTION};
use crate::recon::{iou_grasp, marching_cubes, volumetric_iou, IouEstimate, ScalarGrid, TriangleMesh};
use crate::rng;
use crate::scene::{Scenario, Scene};
use crate::sensor::NoiseParams;
use crate::tsdf::{observe_scene, TsdfGrid, DEFAULT_RESOLUTION};

/// What a policy sees on each attempt. `scene` is the ground truth; only
/// baselines and test doubles look at it.
pub struct Observation<'a> {
    pub tsdf: &'a TsdfGrid,
    pub scene: &'a Scene,
    /// Seed for policies that sample.
    pub seed: u64,
}

/// A grasp choice with the score it was chosen by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Choice {
    pub grasp: Grasp,
    pub quality: f64,
}

pub trait GraspPolicy: Sync {
    /// `None` means no grasp is worth trying.
    fn choose(&self, obs: &Observation) -> Result<Option<Choice>>;
}

/// The learned detector.
pub struct NetPolicy<'a> {
    pub net: &'a GigaNet,
    pub config: DetectionConfig,
}

impl GraspPolicy for NetPolicy<'_> {
    fn choose(&self, obs: &Observation) -> Result<Option<Choice>> {
        let d = detect(self.net, obs.tsdf, &self.config)?;
        Ok(d.selected.map(|c| Choice { grasp: c.grasp, quality: c.quality }))
    }
}

/// Baseline: one random grasp near the true object surface.
pub struct RandomSurfacePolicy {
    pub gripper: GripperModel,
}

impl GraspPolicy for RandomSurfacePolicy {
    fn choose(&self, obs: &Observation) -> Result<Option<Choice>> {
        if obs.scene.is_empty() {
            return Ok(None);
        }
        let g = sample_grasp_candidates(obs.scene, &self.gripper, 1, obs.seed)?;
        Ok(g.first().map(|g| Choice { grasp: *g, quality: 1.0 }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub objects: usize,
    pub resolution: usize,
    pub workspace: f64,
    pub noise: Option<NoiseParams>,
    pub gripper: GripperModel,
    pub friction: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            objects: 5,
            resolution: DEFAULT_RESOLUTION,
            workspace: 0.30,
            noise: Some(NoiseParams::default()),
            gripper: GripperModel::default(),
            friction: DEFAULT_FRICTION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Cleared,
    TwoFailures,
    NoGrasp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub grasp: GraspJson,
    pub success: bool,
    pub failure: Option<Failure>,
    /// Object removed on success.
    pub removed: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario: Scenario,
    pub seed: u64,
    pub initial_objects: usize,
    pub attempts: Vec<Attempt>,
    pub termination: Termination,
}

impl EpisodeResult {
    pub fn successes(&self) -> usize {
        self.attempts.iter().filter(|a| a.success).count()
    }

    pub fn declutter_rate(&self) -> f64 {
        if self.initial_objects == 0 {
            return 1.0;
        }
        self.successes() as f64 / self.initial_objects as f64
    }
}

/// Run one episode. The scene is rendered and fused again only after an
/// object has been removed.
pub fn run_episode(
    policy: &dyn GraspPolicy,
    scenario: Scenario,
    seed: u64,
    config: &EpisodeConfig,
) -> Result<EpisodeResult> {
    let generated = scenario.generate(rng::derive(seed, "objects", 0), config.objects);
    let mut scene = Scene { workspace_size: config.workspace, ..generated.scene };
    let initial_objects = scene.len();
    let evaluator = GraspEvaluator::new(config.gripper, config.friction);
    let mut attempts = Vec::new();
    let mut failures = 0;
    let mut tsdf: Option<TsdfGrid> = None;
    let mut views = 0u64;
    let termination = loop {
        if scene.is_empty() {
            break Termination::Cleared;
        }
        if tsdf.is_none() {
            let noise_seed = rng::derive(seed, "noise", views);
            tsdf = Some(observe_scene(&scene, config.resolution, config.noise.as_ref(), noise_seed)?);
            views += 1;
        }
        let obs = Observation {
            tsdf: tsdf.as_ref().expect("observed above"),
            scene: &scene,
            seed: rng::derive(seed, "policy", attempts.len() as u64),
        };
        let Some(choice) = policy.choose(&obs)? else {
            break Termination::NoGrasp;
        };
        let eval = evaluator.evaluate(&scene, &choice.grasp);
        let removed = eval.contacts.filter(|_| eval.success()).map(|c| c[0].object);
        let t = choice.grasp.center;
        attempts.push(Attempt {
            grasp: GraspJson { t: [t.x, t.y, t.z], quat: choice.grasp.quat_wxyz(), w: choice.grasp.width, q: choice.quality },
            success: eval.success(),
            failure: eval.failure,
            removed,
        });
        match removed {
            Some(id) => {
                scene = scene.remove_object(id)?;
                tsdf = None;
                failures = 0;
            }
            None => {
                failures += 1;
                if failures == 2 {
                    break Termination::TwoFailures;
                }
            }
        }
    };
    Ok(EpisodeResult { scenario, seed, initial_objects, attempts, termination })
}

/// Aggregate metrics of one benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Successful attempts over all attempts, percent (0 when nothing was tried).
    pub gsr: f64,
    /// Mean per-episode fraction of objects removed, percent.
    pub dr: f64,
    pub episodes: usize,
}

pub fn run_metrics(results: &[EpisodeResult]) -> RunMetrics {
    let attempts: usize = results.iter().map(|r| r.attempts.len()).sum();
    let successes: usize = results.iter().map(EpisodeResult::successes).sum();
    let gsr = if attempts == 0 { 0.0 } else { 100.0 * successes as f64 / attempts as f64 };
    let dr = if results.is_empty() {
        0.0
    } else {
        100.0 * results.iter().map(EpisodeResult::declutter_rate).sum::<f64>() / results.len() as f64
    };
    RunMetrics { gsr, dr, episodes: results.len() }
}

/// Mean and spread over independent repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub gsr_mean: f64,
    pub gsr_std: f64,
    pub dr_mean: f64,
    pub dr_std: f64,
    pub episodes: usize,
    pub runs: Vec<RunMetrics>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Metrics {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Self {
        let (gsr_mean, gsr_std) = mean_std(&runs.iter().map(|r| r.gsr).collect::<Vec<_>>());
        let (dr_mean, dr_std) = mean_std(&runs.iter().map(|r| r.dr).collect::<Vec<_>>());
        let episodes = runs.iter().map(|r| r.episodes).sum();
        Self { gsr_mean, gsr_std, dr_mean, dr_std, episodes, runs }
    }
}

pub const METRICS_HEADER: &str = "scenario,mode,episodes,GSR_mean,GSR_std,DR_mean,DR_std";

impl Metrics {
    pub fn csv_row(&self, scenario: Scenario, mode: &str) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            scenario.name(),
            mode,
            self.episodes,
            self.gsr_mean,
            self.gsr_std,
            self.dr_mean,
            self.dr_std
        )
    }
}

/// Per-episode seed of a benchmark.
pub fn episode_seed(seed: u64, repeat: usize, episode: usize) -> u64 {
    rng::derive(rng::derive(seed, "repeat", repeat as u64), "episode", episode as u64)
}

/// `repeats` independent runs of `episodes` episodes each. Episodes run in
/// parallel; results are kept in (repeat, episode) order.
pub fn run_benchmark(
    policy: &dyn GraspPolicy,
    scenario: Scenario,
    episodes: usize,
    repeats: usize,
    seed: u64,
    config: &EpisodeConfig,
) -> Result<(Metrics, Vec<EpisodeResult>)> {
    if episodes == 0 || repeats == 0 {
        return Err(Error::ContractViolation("benchmark needs at least one episode and one repeat".into()));
    }
    let all = crate::par::map_range(episodes * repeats, |i| {
        run_episode(policy, scenario, episode_seed(seed, i / episodes, i % episodes), config)
    });
    let all: Vec<EpisodeResult> = all.into_iter().collect::<Result<_>>()?;
    let runs = all.chunks(episodes).map(run_metrics).collect();
    Ok((Metrics::from_runs(runs), all))
}

pub fn write_episode_log(path: &Path, results: &[EpisodeResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_episode_log(path: &Path) -> Result<Vec<EpisodeResult>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Area under the ROC curve (Mann-Whitney U, ties count one half). `None`
/// unless both classes are present.
pub fn auc(scores: &[(f64, bool)]) -> Option<f64> {
    let npos = scores.iter().filter(|s| s.1).count();
    let nneg = scores.len() - npos;
    if npos == 0 || nneg == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (npos * (npos + 1)) as f64 / 2.0;
    Some(u / (npos * nneg) as f64)
}

/// Held-out quality AUC of a network against the oracle labels of `records`.
pub fn quality_auc(net: &GigaNet, records: &[SceneRecord]) -> Result<Option<f64>> {
    let per_scene = crate::par::map_slice(records, |r| -> Result<Vec<(f64, bool)>> {
        let planes = net.encode_planes(&r.tsdf)?;
        let centers: Vec<Vec3> = r.labels.iter().map(|l| l.grasp.center).collect();
        let q = net.predict_quality(&planes, &centers)?;
        Ok(q.into_iter().zip(&r.labels).map(|(q, l)| (q, l.success)).collect())
    });
    let mut scores = Vec::new();
    for s in per_scene {
        scores.extend(s?);
    }
    Ok(auc(&scores))
}

/// Predicted occupancy on a `resolution`³ lattice spanning the workspace.
pub fn occupancy_field(net: &GigaNet, tsdf: &TsdfGrid, resolution: usize) -> Result<ScalarGrid> {
    if resolution < 2 {
        return Err(Error::ContractViolation("reconstruction needs at least 2 samples per axis".into()));
    }
    let planes = net.encode_planes(tsdf)?;
    let mut grid = ScalarGrid::from_fn(
        [resolution; 3],
        Vec3::zeros(),
        tsdf.size() / (resolution - 1) as f64,
        |_| 0.0,
    );
    grid.values = net.predict_occupancy(&planes, &grid.points())?;
    Ok(grid)
}

/// Marching-cubes mesh of the predicted occupancy at the 0.5 level.
pub fn reconstruct_mesh(net: &GigaNet, tsdf: &TsdfGrid, resolution: usize) -> Result<TriangleMesh> {
    marching_cubes(&occupancy_field(net, tsdf, resolution)?, 0.5)
}

/// Volumetric IoU and IoU-Grasp of the network's occupancy for one labeled
/// scene. IoU-Grasp uses the successful oracle grasps of the record and is
/// `None` when there are none.
pub fn reconstruction_metrics(
    net: &GigaNet,
    record: &SceneRecord,
    gripper: &GripperModel,
    samples: usize,
    seed: u64,
) -> Result<(IouEstimate, Option<IouEstimate>)> {
    let planes = net.encode_planes(&record.tsdf)?;
    let predict = |p: &[Vec3]| net.predict_occupancy(&planes, p);
    let iou = volumetric_iou(&predict, &record.scene, samples, seed)?;
    let good: Vec<Grasp> = record.labels.iter().filter(|l| l.success).map(|l| l.grasp).collect();
    let grasp = if good.is_empty() {
        None
    } else {
        Some(iou_grasp(&predict, &record.scene, &good, gripper, samples, seed)?)
    };
    Ok((iou, grasp))
}
