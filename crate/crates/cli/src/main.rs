mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lidarfield::config::RunConfig;
use lidarfield::dataset_io::{assemble_scene, pose_from_row_major, pose_to_row_major, synth_scene, write_dataset, Pose, Scene};
use lidarfield::model_io::{load_checkpoint, save_checkpoint};
use lidarfield::neural_field::LidarField;
use lidarfield::training::{aggregate, evaluate_frame, fit_with, ground_truth_frame, write_loss_csv, FrameEval};
use lidarfield::Error;
use lidarfield_autodiff::AutodiffError;
use rayon::prelude::*;

const CHECKPOINT_FILE: &str = "checkpoint.lfc";

#[derive(Parser)]
#[command(name = "lidarfield", version, about = "Train, render and evaluate semantic neural LiDAR fields")]
struct Cli {
    /// Worker threads for per-frame work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory, overriding `data.dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory. Train writes here instead of `output.dir`; render
    /// and eval instead of `<output.dir>/render` and `<output.dir>/eval`;
    /// synth instead of `data.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene in the dataset layout.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Replace the scan files of a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Fit a model to the training frames.
    Train {
        #[command(flatten)]
        common: Common,
        /// Iterations to run, overriding `train.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a range image, semantic map and point cloud at a pose and time.
    Render {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint (default: `<output.dir>/checkpoint.lfc`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the pose and time of this dataset frame.
        #[arg(long, conflicts_with = "pose")]
        frame: Option<usize>,
        /// Sensor-to-world pose as 12 row-major numbers (3x4).
        #[arg(long, num_args = 12, value_delimiter = ' ', allow_negative_numbers = true)]
        pose: Option<Vec<f64>>,
        /// Time in seconds; required with --pose.
        #[arg(long, allow_negative_numbers = true)]
        time: Option<f64>,
        /// Keep pixels the model predicts as dropped.
        #[arg(long)]
        no_raydrop_mask: bool,
    },
    /// Score held-out frames and write a metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint (default: `<output.dir>/checkpoint.lfc`).
        #[arg(long, conflicts_with = "ground_truth")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long)]
        no_raydrop_mask: bool,
    },
    /// Print the reference configuration with every default.
    ConfigReference,
}

/// Failure classes that map to exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => 2,
                Failure::Data(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidIntrinsics(_) | Error::DegenerateBounds { .. } | Error::BadBounds { .. } => 2,
                Error::NonFiniteLoss { .. } => 4,
                Error::Autodiff(AutodiffError::Io(_) | AutodiffError::Format(_)) => 3,
                Error::Autodiff(_) => 1,
                _ => 3,
            };
        }
        if cause.downcast_ref::<AutodiffError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

/// The error chain joined by `: `, skipping causes whose text the previous
/// message already includes.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Synth { common, force } => synth(&common, force),
        Command::Train {
            common,
            iterations,
            checkpoint,
        } => train(&common, iterations, checkpoint.as_deref()),
        Command::Render {
            common,
            checkpoint,
            frame,
            pose,
            time,
            no_raydrop_mask,
        } => render(&common, checkpoint, frame, pose, time, !no_raydrop_mask),
        Command::Eval {
            common,
            checkpoint,
            ground_truth,
            no_raydrop_mask,
        } => eval(&common, checkpoint, ground_truth, !no_raydrop_mask),
        Command::ConfigReference => {
            print!("{}", RunConfig::reference_toml());
            Ok(())
        }
    }
}

/// Loads the config, applies flag overrides and validates the result.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Config(format!("cannot read config: {e}")),
            other => Failure::Config(format!("{}: {other}", p.display())),
        })?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data.dir = d.clone();
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn load_scene(cfg: &RunConfig) -> Result<Scene> {
    let opts = cfg.scene_options()?;
    assemble_scene(&cfg.data.dir, cfg.data.start, cfg.data.count, &opts)
        .with_context(|| format!("loading dataset from {}", cfg.data.dir.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(common: &Common, force: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = common.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let non_empty = std::fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            bail!(Failure::Config(format!("{} is not empty; pass --force to replace its scans", dir.display())));
        }
        for sub in ["velodyne", "labels"] {
            let p = dir.join(sub);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
        for f in ["poses.txt", "times.txt", "calib.txt"] {
            let p = dir.join(f);
            if p.is_file() {
                std::fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let lm = cfg.learning_map()?;
    let scans = synth_scene(&cfg.synth, &lm).map_err(|e| Failure::Config(e.to_string()))?;
    create_dir(&dir)?;
    write_dataset(&dir, &scans)?;
    let points: usize = scans.iter().map(|s| s.points.len()).sum();
    let mut classes: Vec<u32> = scans.iter().flat_map(|s| s.labels.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let names: Vec<&str> = classes.iter().map(|&c| lm.names[c as usize].as_str()).collect();
    println!("wrote {} frames ({points} points, classes {names:?}) to {}", scans.len(), dir.display());
    Ok(())
}

fn train(common: &Common, iterations: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    let scene = load_scene(&cfg)?;
    let (model, mut store, start) = match resume {
        Some(p) => {
            let (model, store, meta) = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            if meta.intrinsics != scene.intrinsics {
                bail!(Failure::Data(format!("{} was trained with different sensor intrinsics", p.display())));
            }
            if meta.model != cfg.model {
                eprintln!("warning: model settings come from the checkpoint; the config's [model] section is ignored");
            }
            (model, store, meta.iterations_done)
        }
        None => {
            let (m, s) = LidarField::new(&cfg.model, scene.intrinsics, scene.bounds).map_err(|e| Failure::Config(e.to_string()))?;
            (m, s, 0)
        }
    };
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    create_dir(&out)?;
    let total = cfg.train.iterations;
    let every = (total / 20).max(1);
    let clock = Instant::now();
    eprintln!(
        "training {:?} model ({} parameters) on {} frames, iterations {}..{}",
        model.config().variant,
        store.num_elements(),
        scene.train.len(),
        start,
        start + total
    );
    let outcome = fit_with(&scene, &model, &mut store, &cfg.train, start, |r| {
        let done = r.iteration + 1 - start;
        if done % every == 0 || done == total {
            let c = r.components;
            eprintln!(
                "it {:>6}  loss {:.5}  depth {:.4}  sem {:.4}  int {:.5}  drop {:.5}  {:.0}s",
                r.iteration + 1,
                r.total,
                c.depth,
                c.semantic,
                c.intensity,
                c.raydrop,
                clock.elapsed().as_secs_f64()
            );
        }
    })?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &model, &store, start + total)?;
    write_loss_csv(&out.join("loss.csv"), &outcome.trace)?;
    let resolved = out.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml_string()?).with_context(|| format!("writing {}", resolved.display()))?;
    println!("wrote {} after {} iterations", ckpt.display(), start + total);
    Ok(())
}

/// `--out` when given, else `<output.dir>/<name>`.
fn command_dir(common: &Common, cfg: &RunConfig, name: &str) -> PathBuf {
    match &common.out {
        Some(o) => o.clone(),
        None => cfg.output.dir.join(name),
    }
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT_FILE))
}

fn render(common: &Common, checkpoint: Option<PathBuf>, frame: Option<usize>, pose: Option<Vec<f64>>, time: Option<f64>, mask: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let ckpt = checkpoint_path(&cfg, checkpoint);
    let (model, store, _) = load_checkpoint(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let needs_scene = frame.is_some() || model.encoder().is_some();
    let scene = match load_scene(&cfg) {
        Ok(s) => Some(s),
        Err(e) if needs_scene => return Err(e),
        Err(e) => {
            eprintln!("warning: {e:#}; in-distribution check skipped");
            None
        }
    };
    let (pose, t): (Pose, f64) = match (frame, pose) {
        (Some(i), _) => {
            let s = scene.as_ref().expect("scene loaded for --frame");
            let f = s
                .frames
                .get(i)
                .ok_or_else(|| Failure::Config(format!("--frame {i}: the dataset window has {} frames", s.frames.len())))?;
            (f.scan.pose, time.unwrap_or(f.scan.timestamp))
        }
        (None, Some(v)) => {
            let t = time.ok_or_else(|| Failure::Config("--pose needs --time".into()))?;
            (pose_from_row_major(&v).map_err(|e| Failure::Config(format!("--pose: {e}")))?, t)
        }
        (None, None) => bail!(Failure::Config("give --frame or --pose with --time".into())),
    };
    let bounds = *model.bounds();
    let extrapolated = t < bounds.t_min || t > bounds.t_max;
    if extrapolated {
        eprintln!(
            "warning: time {t} lies outside the trained range [{}, {}]; the fields are extrapolated",
            bounds.t_min, bounds.t_max
        );
    }
    let mut local_frame = None;
    let local = match (&scene, model.encoder()) {
        (Some(s), Some(_)) => {
            let src = s.nearest_train_frame(t).ok_or_else(|| Failure::Data("the dataset has no training frames".into()))?;
            local_frame = Some(src);
            model.dense_local_map(&store, &s.frames[src].image)?
        }
        _ => None,
    };
    let in_distribution = scene.as_ref().map(|s| {
        s.train
            .iter()
            .any(|&i| (s.frames[i].scan.timestamp - t).abs() < 1e-9 && pose_distance(&s.frames[i].scan.pose, &pose) < 1e-6)
    });
    let rendered = model.render_image(&store, &pose, t, local.as_ref(), mask)?;
    let dir = command_dir(common, &cfg, "render");
    create_dir(&dir)?;
    let lm = cfg.learning_map()?;
    let files = output::write_render(&dir, &rendered.image, model.intrinsics(), &lm, model.config().render.far, &pose, t)?;
    let meta = serde_json::json!({
        "pose": pose_to_row_major(&pose),
        "time": t,
        "time_range": [bounds.t_min, bounds.t_max],
        "extrapolated_time": extrapolated,
        "in_distribution": in_distribution,
        "local_features_frame": local_frame,
        "local_features_time": local_frame.and_then(|i| scene.as_ref().map(|s| s.frames[i].scan.timestamp)),
        "raydrop_mask": mask,
        "returns": rendered.image.returns(),
        "pixels": rendered.image.len(),
        "files": files,
    });
    let meta_path = dir.join("metadata.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").with_context(|| format!("writing {}", meta_path.display()))?;
    println!("rendered {} of {} pixels to {}", rendered.image.returns(), rendered.image.len(), dir.display());
    Ok(())
}

fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn eval(common: &Common, checkpoint: Option<PathBuf>, ground_truth: bool, mask: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let scene = load_scene(&cfg)?;
    if scene.test.is_empty() {
        bail!(Failure::Data("the dataset window has no held-out frames".into()));
    }
    let frames: Vec<FrameEval> = if ground_truth {
        let thr = cfg.model.render.raydrop_threshold;
        scene.test.par_iter().map(|&f| ground_truth_frame(&scene, f, thr)).collect::<lidarfield::Result<_>>()?
    } else {
        let ckpt = checkpoint_path(&cfg, checkpoint);
        let (model, store, meta) = load_checkpoint(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        if meta.intrinsics != scene.intrinsics {
            bail!(Failure::Data(format!("{} was trained with different sensor intrinsics", ckpt.display())));
        }
        scene
            .test
            .par_iter()
            .map(|&f| evaluate_frame(&scene, &model, &store, f, mask))
            .collect::<lidarfield::Result<_>>()?
    };
    let ev = aggregate(frames);
    let dir = command_dir(common, &cfg, "eval");
    create_dir(&dir)?;
    ev.aggregate.write_files(&dir.join("metrics.txt"), &dir.join("metrics.json"))?;
    let per_frame: serde_json::Map<String, serde_json::Value> =
        ev.frames.iter().map(|f| (format!("{:06}", cfg.data.start + f.frame), f.report.to_json())).collect();
    let pf = dir.join("metrics_frames.json");
    std::fs::write(&pf, serde_json::to_string_pretty(&per_frame)? + "\n").with_context(|| format!("writing {}", pf.display()))?;
    print!("{}", ev.aggregate.to_text());
    Ok(())
}
