//! Losses and the training loop.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_term, quat_mirror_z, Adam, AdamConfig, Grads, ParamId, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::net::{GigaNet, GraspPrediction, Head, NetworkConfig};
use crate::oracle::{GraspLabel, SceneRecord};
use crate::rng;

/// Which loss terms drive which parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Joint,
    #[serde(rename = "aff")]
    Affordance,
    #[serde(rename = "geo")]
    Geometry,
    #[serde(rename = "detach")]
    Detached,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [Self::Joint, Self::Affordance, Self::Geometry, Self::Detached];

    pub fn name(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::Affordance => "aff",
            Self::Geometry => "geo",
            Self::Detached => "detach",
        }
    }

    fn uses_affordance(self) -> bool {
        self != Self::Geometry
    }

    fn uses_geometry(self) -> bool {
        self != Self::Affordance
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "aff" | "affordance" => Ok(Self::Affordance),
            "geo" | "geometry" => Ok(Self::Geometry),
            "detach" | "detached" => Ok(Self::Detached),
            _ => Err(Error::ContractViolation(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Grasp labels drawn from each scene per step.
    pub grasps_per_scene: usize,
    /// Occupancy samples drawn from each scene per step.
    pub occupancy_points: usize,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            mode: TrainMode::Joint,
            grasps_per_scene: 1,
            occupancy_points: 64,
            network: NetworkConfig::toy(),
        }
    }
}

impl TrainConfig {
    /// Settings for ~200-scene CPU runs. The default batch of 32 gives a
    /// handful of steps per epoch at that size; smaller batches at a higher
    /// rate, with several labels per scene sharing one encoder pass, reach
    /// the same loss in a few minutes.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2,
            epochs: 30,
            grasps_per_scene: 16,
            occupancy_points: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::ContractViolation(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 || self.grasps_per_scene == 0 || self.occupancy_points == 0 {
            return Err(Error::ContractViolation(
                "batch size, grasps per scene and occupancy points must be at least 1".into(),
            ));
        }
        self.network.validate()
    }
}

fn unit4(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        log::warn!("non-unit quaternion {q:?} normalized");
    }
    q.map(|v| v / n)
}

/// `min(1 - |r̂·r|, 1 - |r̂·r_π|)` where `r_π` is `r` turned half way about
/// its approach axis.
pub fn rotation_loss(pred: [f64; 4], target: [f64; 4]) -> f64 {
    let (p, t) = (unit4(pred), unit4(target));
    let dot = |a: &[f64; 4], b: &[f64; 4]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs();
    (1.0 - dot(&p, &t)).min(1.0 - dot(&p, &quat_mirror_z(t)))
}

/// Widths enter `L_w` in voxels of the default 40-voxel, 30 cm grid.
/// In meters the width term is ~1e-4 and the width head never moves.
pub const WIDTH_UNIT: f64 = 0.3 / 40.0;

/// Per-label affordance loss `L_q + q (L_r + L_w)`.
pub fn affordance_loss(pred: &GraspPrediction, label: &GraspLabel) -> f64 {
    let q = if label.success { 1.0 } else { 0.0 };
    let lq = bce_term(pred.quality, q);
    if !label.success {
        return lq;
    }
    lq + rotation_loss(pred.rotation, label.grasp.quat_wxyz()) + ((pred.width - label.grasp.width) / WIDTH_UNIT).powi(2)
}

/// Mean binary cross-entropy over occupancy samples.
pub fn geometry_loss(pred: &[f64], occupied: &[bool]) -> f64 {
    assert_eq!(pred.len(), occupied.len());
    let s: f64 = pred
        .iter()
        .zip(occupied)
        .map(|(p, o)| bce_term(*p, if *o { 1.0 } else { 0.0 }))
        .sum();
    s / pred.len() as f64
}

/// Scalar parts of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub affordance: f64,
    pub quality: f64,
    pub rotation: f64,
    pub width: f64,
    pub geometry: f64,
    pub total: f64,
}

impl LossTerms {
    fn accumulate(&mut self, o: &LossTerms, s: f64) {
        self.affordance += s * o.affordance;
        self.quality += s * o.quality;
        self.rotation += s * o.rotation;
        self.width += s * o.width;
        self.geometry += s * o.geometry;
        self.total += s * o.total;
    }
}

/// Supervision for one scene in one step.
#[derive(Debug, Clone)]
pub struct SceneBatch<'a> {
    pub input: &'a Tensor,
    pub grasps: Vec<GraspLabel>,
    pub points: Vec<Vec3>,
    pub occupied: Vec<bool>,
}

/// Build the loss graph for one scene. Returns the scalar node and its parts.
pub fn scene_loss(net: &GigaNet, tape: &mut Tape, batch: &SceneBatch, mode: TrainMode) -> Result<(Var, LossTerms)> {
    let planes = net.encode(tape, batch.input)?;
    let mut terms = LossTerms::default();
    let mut parts = Vec::new();
    if mode.uses_affordance() {
        if batch.grasps.is_empty() {
            return Err(Error::ContractViolation("affordance loss needs at least one grasp label".into()));
        }
        let centers: Vec<Vec3> = batch.grasps.iter().map(|g| g.grasp.center).collect();
        let feat = net.query(tape, planes, &centers)?;
        let a = net.decode_affordance(tape, feat)?;
        let m = batch.grasps.len() as f64;
        let q: Vec<f64> = batch.grasps.iter().map(|g| if g.success { 1.0 } else { 0.0 }).collect();
        let rot: Vec<[f64; 4]> = batch.grasps.iter().map(|g| g.grasp.quat_wxyz()).collect();
        let w: Vec<f64> = batch.grasps.iter().map(|g| g.grasp.width / WIDTH_UNIT).collect();
        let lq = tape.bce(a.quality, &q)?;
        let lr = tape.quat_loss(a.rotation, &rot, &q, m)?;
        let width = tape.scale(a.width, 1.0 / WIDTH_UNIT);
        let lw = tape.sq_err(width, &w, &q, m)?;
        let la = tape.add(lq, lr)?;
        let la = tape.add(la, lw)?;
        terms.quality = tape.value(lq).item();
        terms.rotation = tape.value(lr).item();
        terms.width = tape.value(lw).item();
        terms.affordance = tape.value(la).item();
        parts.push(la);
    }
    if mode.uses_geometry() {
        if batch.points.is_empty() || batch.points.len() != batch.occupied.len() {
            return Err(Error::ContractViolation("geometry loss needs matching points and labels".into()));
        }
        let planes = if mode == TrainMode::Detached { planes.map(|p| tape.detach(p)) } else { planes };
        let feat = net.query(tape, planes, &batch.points)?;
        let o = net.decode_occupancy(tape, feat)?;
        let labels: Vec<f64> = batch.occupied.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        let lg = tape.bce(o, &labels)?;
        terms.geometry = tape.value(lg).item();
        parts.push(lg);
    }
    let total = match parts[..] {
        [a] => a,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!("at least one loss term per mode"),
    };
    terms.total = tape.value(total).item();
    Ok((total, terms))
}

/// Training inputs prepared from dataset records.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Tensor,
    pub grasps: Vec<GraspLabel>,
    pub occupancy: Vec<(Vec3, bool)>,
}

/// Check records against the network and convert them. Fails before any
/// optimization if the data cannot be used.
pub fn prepare_samples(net: &GigaNet, records: &[SceneRecord], mode: TrainMode) -> Result<Vec<TrainSample>> {
    if records.is_empty() {
        return Err(Error::ContractViolation("training set is empty".into()));
    }
    let l = net.config.workspace;
    let inside = |p: &Vec3| [p.x, p.y, p.z].iter().all(|v| (0.0..=l).contains(v));
    records
        .iter()
        .map(|r| {
            if (r.scene.workspace_size - l).abs() > 1e-12 {
                return Err(Error::ConfigMismatch(format!(
                    "scene {} has workspace {} but the network uses {l}",
                    r.index, r.scene.workspace_size
                )));
            }
            if mode.uses_affordance() && r.labels.is_empty() {
                return Err(Error::ContractViolation(format!("scene {} has no grasp labels", r.index)));
            }
            if mode.uses_geometry() && r.occupancy.is_empty() {
                return Err(Error::ContractViolation(format!("scene {} has no occupancy samples", r.index)));
            }
            if let Some(g) = r.labels.iter().find(|g| !inside(&g.grasp.center)) {
                return Err(Error::ContractViolation(format!(
                    "scene {} grasp center {:?} outside the workspace",
                    r.index, g.grasp.center
                )));
            }
            Ok(TrainSample {
                input: net.input_tensor(&r.tsdf)?,
                grasps: r.labels.clone(),
                occupancy: r.occupancy.iter().map(|o| (o.point, o.occupied)).collect(),
            })
        })
        .collect()
}

fn draw_batch<'a>(s: &'a TrainSample, cfg: &TrainConfig, rng: &mut rng::Rng) -> SceneBatch<'a> {
    let grasps = if s.grasps.is_empty() {
        Vec::new()
    } else {
        (0..cfg.grasps_per_scene).map(|_| s.grasps[rng.random_range(0..s.grasps.len())]).collect()
    };
    let (mut points, mut occupied) = (Vec::new(), Vec::new());
    if !s.occupancy.is_empty() {
        for _ in 0..cfg.occupancy_points {
            let (p, o) = s.occupancy[rng.random_range(0..s.occupancy.len())];
            points.push(p);
            occupied.push(o);
        }
    }
    SceneBatch { input: &s.input, grasps, points, occupied }
}

/// Mean loss over `samples` with the draw stream of `seed`, no update.
pub fn evaluate_loss(net: &GigaNet, samples: &[TrainSample], cfg: &TrainConfig, mode: TrainMode) -> Result<LossTerms> {
    let mut draw = rng::stream(cfg.seed, "eval-draw", 0);
    let batches: Vec<SceneBatch> = samples.iter().map(|s| draw_batch(s, cfg, &mut draw)).collect();
    let results = crate::par::map_slice(&batches, |b| -> Result<LossTerms> {
        let mut tape = Tape::new(&net.params);
        Ok(scene_loss(net, &mut tape, b, mode)?.1)
    });
    let mut sum = LossTerms::default();
    for r in results {
        sum.accumulate(&r?, 1.0 / samples.len() as f64);
    }
    Ok(sum)
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossTerms,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,L_A,L_q,L_r,L_w,L_G,wall_seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, l.affordance, l.quality, l.rotation, l.width, l.geometry, self.seconds
        )
    }
}

struct Run<'a> {
    net: GigaNet,
    cfg: &'a TrainConfig,
    frozen: Vec<ParamId>,
    out: Option<&'a Path>,
    metrics: Vec<EpochMetrics>,
    started: Instant,
}

impl Run<'_> {
    /// Run `epochs` epochs of `mode` over `samples`.
    fn epochs(&mut self, samples: &[TrainSample], mode: TrainMode, epochs: usize, phase: &str) -> Result<()> {
        let mut adam = Adam::new(&self.net.params, AdamConfig { lr: self.cfg.lr, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for e in 0..epochs {
            let epoch = self.metrics.len();
            let mut shuffle = rng::stream(self.cfg.seed, &format!("{phase}-shuffle"), e as u64);
            order.shuffle(&mut shuffle);
            let mut sum = LossTerms::default();
            for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
                let mut draw = rng::stream(self.cfg.seed, &format!("{phase}-draw"), (e * 1_000_003 + b) as u64);
                let batches: Vec<SceneBatch> = idx.iter().map(|i| draw_batch(&samples[*i], self.cfg, &mut draw)).collect();
                let net = &self.net;
                let frozen = &self.frozen;
                let results = crate::par::map_slice(&batches, |batch| -> Result<(Grads, LossTerms)> {
                    let mut tape = Tape::new(&net.params);
                    tape.freeze(frozen);
                    let (loss, terms) = scene_loss(net, &mut tape, batch, mode)?;
                    Ok((tape.backward(loss)?, terms))
                });
                let mut grads = Grads::zeros(&self.net.params);
                let k = 1.0 / idx.len() as f64;
                for r in results {
                    let (g, t) = r?;
                    grads.add_assign(&g);
                    sum.accumulate(&t, 1.0 / samples.len() as f64);
                }
                grads.scale(k);
                adam.update(&mut self.net.params, &grads)?;
            }
            let m = EpochMetrics { epoch, loss: sum, seconds: self.started.elapsed().as_secs_f64() };
            log::info!(
                "{phase} epoch {epoch}: total {:.5} (L_A {:.5}, L_G {:.5})",
                sum.total,
                sum.affordance,
                sum.geometry
            );
            self.metrics.push(m);
            if !sum.total.is_finite() {
                return Err(Error::ContractViolation(format!("loss diverged at epoch {epoch}")));
            }
            self.checkpoint()?;
        }
        Ok(())
    }

    fn checkpoint(&self) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        self.net.save(&dir.join("model.ckpt"))?;
        let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
        writeln!(f, "{METRICS_HEADER}")?;
        for m in &self.metrics {
            writeln!(f, "{}", m.csv_row())?;
        }
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: GigaNet,
    pub metrics: Vec<EpochMetrics>,
}

/// Train from scratch. With `out`, the checkpoint `model.ckpt` and
/// `metrics.csv` are rewritten after every epoch.
///
/// Detached mode runs the affordance-only schedule, then freezes everything
/// except a freshly initialized occupancy decoder and trains it on the
/// geometry loss for the same number of epochs.
pub fn train(records: &[SceneRecord], cfg: &TrainConfig, out: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    let net = GigaNet::new(cfg.network, rng::derive(cfg.seed, "init", 0))?;
    let samples = prepare_samples(&net, records, cfg.mode)?;
    let mut run = Run { net, cfg, frozen: Vec::new(), out, metrics: Vec::new(), started: Instant::now() };
    match cfg.mode {
        TrainMode::Detached => {
            run.epochs(&samples, TrainMode::Affordance, cfg.epochs, "train")?;
            detach_phase(&mut run, &samples)?;
        }
        mode => run.epochs(&samples, mode, cfg.epochs, "train")?,
    }
    Ok(Trained { net: run.net, metrics: run.metrics })
}

/// Second stage of detached training on an affordance-trained network.
pub fn train_detached_head(
    net: GigaNet,
    records: &[SceneRecord],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Trained> {
    cfg.validate()?;
    let samples = prepare_samples(&net, records, TrainMode::Geometry)?;
    let mut run = Run { net, cfg, frozen: Vec::new(), out, metrics: Vec::new(), started: Instant::now() };
    detach_phase(&mut run, &samples)?;
    Ok(Trained { net: run.net, metrics: run.metrics })
}

fn detach_phase(run: &mut Run, samples: &[TrainSample]) -> Result<()> {
    run.net.reset_head(Head::Occupancy, rng::derive(run.cfg.seed, "detach-head", 0))?;
    let keep = run.net.head_params(Head::Occupancy);
    run.frozen = run.net.params.ids().filter(|id| !keep.contains(id)).collect();
    run.epochs(samples, TrainMode::Geometry, run.cfg.epochs, "detach")
}
