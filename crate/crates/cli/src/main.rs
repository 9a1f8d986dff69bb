//! `giga`: dataset generation, training, clutter-removal evaluation,
//! reconstruction and affordance landscapes.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use giga::bench::{self, EpisodeConfig, GraspPolicy, NetPolicy, RandomSurfacePolicy};
use giga::detect::{affordance_landscape, Axis, DetectionConfig};
use giga::net::GigaNet;
use giga::oracle::{build_dataset, build_scene_record, read_dataset, DatasetConfig, GripperModel};
use giga::scene::Scenario;
use giga::train::{train, TrainConfig, TrainMode};

#[derive(Parser)]
#[command(name = "giga", version, about = "Grasp affordance and geometry from single-view TSDFs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled scenes into a dataset directory.
    Datagen(DatagenArgs),
    /// Train a network on a dataset; writes model.ckpt and metrics.csv.
    Train(TrainArgs),
    /// Run the clutter-removal benchmark; appends to metrics.csv and writes episodes.jsonl.
    Eval(EvalArgs),
    /// Mesh the predicted occupancy of fresh scenes; writes PLY files and recon.csv.
    Reconstruct(ReconstructArgs),
    /// Slice the predicted grasp quality; writes landscape.png and landscape.csv.
    Landscape(LandscapeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Packed,
    Pile,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Packed => Scenario::Packed,
            ScenarioArg::Pile => Scenario::Pile,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    /// Small batches for ~200-scene CPU runs.
    Desk,
    /// Settings sized for large datasets.
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    Aff,
    Geo,
    Detach,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Joint => TrainMode::Joint,
            ModeArg::Aff => TrainMode::Affordance,
            ModeArg::Geo => TrainMode::Geometry,
            ModeArg::Detach => TrainMode::Detached,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    X,
    Y,
    Z,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, value_enum, default_value = "packed")]
    scenario: ScenarioArg,
    /// Number of scenes.
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TSDF resolution per axis.
    #[arg(long, default_value_t = 40)]
    resolution: usize,
    /// Objects per scene.
    #[arg(long, default_value_t = 5)]
    objects: usize,
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `datagen`.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "joint")]
    mode: ModeArg,
    /// Base settings; the flags below override single fields.
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Passes over the dataset [desk: 30].
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adam learning rate [desk: 1e-3, full: 2e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Scenes per step [desk: 2, full: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Grasp labels per scene in each step [desk: 16, full: 1].
    #[arg(long)]
    grasps_per_scene: Option<usize>,
    /// Occupancy points per scene in each step [desk: 256, full: 64].
    #[arg(long)]
    occupancy_points: Option<usize>,
    /// Output directory for model.ckpt and metrics.csv.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint. Required unless `--policy random`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "net")]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value = "packed")]
    scenario: ScenarioArg,
    /// Episodes per repeat.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Independent repeats for mean and std.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Query resolution per axis (60 uses the high-resolution co-grid).
    #[arg(long, default_value_t = 40)]
    resolution: usize,
    /// Label written to the mode column.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Net,
    Random,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "packed")]
    scenario: ScenarioArg,
    /// Number of fresh scenes.
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mesh lattice resolution per axis.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Monte-Carlo samples per IoU estimate.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Label written to the mode column.
    #[arg(long, default_value = "joint")]
    mode: String,
    #[arg(long, default_value = "recon")]
    out: PathBuf,
}

#[derive(Args)]
struct LandscapeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "packed")]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Query resolution per axis.
    #[arg(long, default_value_t = 40)]
    resolution: usize,
    #[arg(long, value_enum, default_value = "z")]
    axis: AxisArg,
    /// Slice index along the axis (default: middle).
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, default_value = "landscape")]
    out: PathBuf,
}

fn load_net(path: &Path) -> anyhow::Result<GigaNet> {
    if !path.is_file() {
        bail!("checkpoint {} not found", path.display());
    }
    GigaNet::load(path).with_context(|| format!("loading {}", path.display()))
}

/// One fresh labeled scene observed at the network's input resolution.
fn fresh_record(net: &GigaNet, scenario: Scenario, seed: u64, index: usize) -> anyhow::Result<giga::oracle::SceneRecord> {
    let mut cfg = DatasetConfig::new(scenario, index + 1, seed);
    cfg.resolution = net.config.grid;
    cfg.workspace = net.config.workspace;
    Ok(build_scene_record(&cfg, index)?)
}

fn datagen(a: DatagenArgs) -> anyhow::Result<()> {
    let mut cfg = DatasetConfig::new(a.scenario.into(), a.scenes, a.seed);
    cfg.resolution = a.resolution;
    cfg.objects_per_scene = a.objects;
    let records = build_dataset(&cfg, Some(&a.out))?;
    let positives: usize = records.iter().map(|r| r.positives()).sum();
    let labels: usize = records.iter().map(|r| r.labels.len()).sum();
    println!("{} scenes, {labels} grasp labels ({positives} positive) in {}", records.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let (_, records) = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    if records.is_empty() {
        bail!("dataset {} has no scenes", a.data.display());
    }
    let base = match a.preset {
        PresetArg::Desk => TrainConfig::desk(),
        PresetArg::Full => TrainConfig::default(),
    };
    let cfg = TrainConfig {
        lr: a.lr.unwrap_or(base.lr),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        epochs: a.epochs.unwrap_or(base.epochs),
        seed: a.seed,
        mode: a.mode.into(),
        grasps_per_scene: a.grasps_per_scene.unwrap_or(base.grasps_per_scene),
        occupancy_points: a.occupancy_points.unwrap_or(base.occupancy_points),
        ..base
    };
    let trained = train(&records, &cfg, Some(&a.out))?;
    if let Some(m) = trained.metrics.last() {
        println!("{}", giga::train::METRICS_HEADER);
        println!("{}", m.csv_row());
    }
    Ok(())
}

fn append_csv(path: &Path, header: &str, row: &str) -> anyhow::Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let scenario: Scenario = a.scenario.into();
    let detection = if a.resolution == 60 {
        DetectionConfig::high_resolution()
    } else {
        DetectionConfig { resolution: a.resolution, ..DetectionConfig::default() }
    };
    let mut config = EpisodeConfig::default();
    let net;
    let policy: Box<dyn GraspPolicy + '_> = match a.policy {
        PolicyArg::Net => {
            let path = a.checkpoint.as_deref().context("eval needs --checkpoint")?;
            net = load_net(path)?;
            config.resolution = net.config.grid;
            config.workspace = net.config.workspace;
            detection.validate()?;
            Box::new(NetPolicy { net: &net, config: detection })
        }
        PolicyArg::Random => Box::new(RandomSurfacePolicy { gripper: GripperModel::default() }),
    };
    let (metrics, episodes) = bench::run_benchmark(policy.as_ref(), scenario, a.episodes, a.repeats, a.seed, &config)?;
    std::fs::create_dir_all(&a.out)?;
    let mode = a.mode.unwrap_or_else(|| match a.policy {
        PolicyArg::Net => "joint".into(),
        PolicyArg::Random => "random".into(),
    });
    let row = metrics.csv_row(scenario, &mode);
    append_csv(&a.out.join("metrics.csv"), bench::METRICS_HEADER, &row)?;
    bench::write_episode_log(&a.out.join("episodes.jsonl"), &episodes)?;
    println!("{}\n{row}", bench::METRICS_HEADER);
    Ok(())
}

const RECON_HEADER: &str = "scenario,mode,scene,seed,iou,iou_se,iou_grasp,iou_grasp_se";

fn reconstruct(a: ReconstructArgs) -> anyhow::Result<()> {
    let net = load_net(&a.checkpoint)?;
    let scenario: Scenario = a.scenario.into();
    std::fs::create_dir_all(&a.out)?;
    let gripper = GripperModel::default();
    for i in 0..a.scenes {
        let rec = fresh_record(&net, scenario, a.seed, i)?;
        let mesh = bench::reconstruct_mesh(&net, &rec.tsdf, a.resolution)?;
        let ply = a.out.join(format!("scene_{i:05}.ply"));
        mesh.write_ply(&ply)?;
        let (iou, grasp) = bench::reconstruction_metrics(&net, &rec, &gripper, a.samples, rec.seed)?;
        let (g, gse) = grasp.map_or((String::new(), String::new()), |g| {
            (format!("{:.4}", g.iou), format!("{:.4}", g.std_error()))
        });
        let row = format!(
            "{},{},{i},{},{:.4},{:.4},{g},{gse}",
            scenario.name(),
            a.mode,
            rec.seed,
            iou.iou,
            iou.std_error()
        );
        append_csv(&a.out.join("recon.csv"), RECON_HEADER, &row)?;
        println!("{row}");
    }
    Ok(())
}

fn landscape(a: LandscapeArgs) -> anyhow::Result<()> {
    let net = load_net(&a.checkpoint)?;
    let rec = fresh_record(&net, a.scenario.into(), a.seed, 0)?;
    let index = a.index.unwrap_or(a.resolution / 2);
    let l = affordance_landscape(&net, &rec.tsdf, a.resolution, a.axis.into(), index)?;
    std::fs::create_dir_all(&a.out)?;
    l.write_png(&a.out.join("landscape.png"))?;
    l.write_csv(&a.out.join("landscape.csv"))?;
    println!("slice {index} written to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let parsed = Cli::try_parse().and_then(|c| match &c.command {
        // clap's required_if_eq ignores defaulted values
        Command::Eval(a) if matches!(a.policy, PolicyArg::Net) && a.checkpoint.is_none() => Err(Cli::command().error(
            ErrorKind::MissingRequiredArgument,
            "eval --policy net needs --checkpoint <CHECKPOINT>",
        )),
        _ => Ok(c),
    });
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Landscape(a) => landscape(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
