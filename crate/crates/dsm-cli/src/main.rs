//! `dsm`: surface modeling from sparse point cloud frames.
//!
//! Subcommands: `gen` (synthetic benchmark data), `train` (alternating
//! registration/sampling training), `register`, `sample`, `model` (the
//! cyclic pipeline), `eval`, and `init-config`. Exit codes: 0 success,
//! 1 usage error, 2 input/parse error, 3 runtime failure.

use clap::{Parser, Subcommand, ValueEnum};
use dsm::eval::{evaluate_modeling, evaluate_registration, MetricsJson};
use dsm::geometry::PointCloud;
use dsm::io::{
    pose_line, read_ply, read_sequence, load_train_dataset, save_rg_pair, save_sequence,
    save_sp_stack, write_ply, write_poses, RunManifest,
};
use dsm::nn::ParameterStore;
use dsm::pipeline::{Pipeline, PipelineConfig};
use dsm::synth::{
    make_rg_pair, make_sequence, make_sp_stack, standard_suite_shapes, suite_instance_seed,
    GenParams, ShapeSpec, SUITE_SEEDS, SUITE_SEQUENCE_FRAMES, SUITE_STACK_FRAMES,
};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dsm", version, about = "Surface modeling from sparse point cloud frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GenKind {
    /// Registration pairs (src, tgt, ground-truth transform).
    Rg,
    /// Stacked sampling inputs with a clean ground-truth cloud.
    Sp,
    /// Frame sequences with exact poses and a ground-truth model.
    Seq,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic benchmark data into a directory.
    Gen {
        #[arg(long, value_enum)]
        kind: GenKind,
        /// Shape specification JSON; omit together with --suite to use the
        /// standard suite.
        #[arg(long, conflicts_with = "suite")]
        spec: Option<PathBuf>,
        /// Generate the full standard suite (8 shapes x 4 seeds).
        #[arg(long)]
        suite: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances to generate from --spec (seeds seed..seed+count).
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Frames per stack/sequence (defaults: 4 for sp, 6 for seq).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for batch generation (outputs are identical
        /// regardless).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Train the registration and sampling paths alternately.
    Train {
        /// Dataset directory holding pair_*/ and stack_*/ entries.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path (a loss-curve CSV lands next to it).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Register a source cloud onto a target cloud.
    Register {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Pose output (12-number line); a metrics sidecar lands at
        /// <out>.metrics.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Sample a cloud down to a fraction of its points.
    Sample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Run the cyclic modeling pipeline over a frame sequence.
    Model {
        /// Run manifest (see `dsm init-config`).
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare a predicted model cloud against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// metrics.json output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run manifest (all hyperparameters explicit).
    InitConfig,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_usage = e.use_stderr();
            let _ = e.print();
            return if is_usage { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            classify(&e)
        }
    }
}

enum CliError {
    Usage(String),
    Lib(dsm::Error),
}

impl From<dsm::Error> for CliError {
    fn from(e: dsm::Error) -> Self {
        CliError::Lib(e)
    }
}

/// Input problems are exit 2, runtime failures exit 3.
fn classify(e: &dsm::Error) -> i32 {
    use dsm::Error::*;
    match e {
        Io(_) | Parse { .. } | Json(_) | ManifestEntry { .. } | NonFinite { .. } | EmptyCloud
        | InvalidRotation { .. } | InvalidArgument(_) => 2,
        RegistrationFailed { .. } | TooManyFailures { .. } | NonFiniteLoss { .. }
        | DegenerateGeometry { .. } | ShapeMismatch { .. } => 3,
    }
}

fn load_pipeline(cfg: PipelineConfig, ckpt: &Option<PathBuf>) -> Result<Pipeline, CliError> {
    match ckpt {
        Some(path) => {
            let store = ParameterStore::load(path)?;
            Ok(Pipeline::with_store(cfg, store))
        }
        None => Ok(Pipeline::new(cfg)),
    }
}

fn read_cloud(path: &Path) -> Result<PointCloud, CliError> {
    Ok(read_ply(path)?)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            kind,
            spec,
            suite,
            seed,
            count,
            frames,
            out,
            threads,
        } => gen(kind, spec, suite, seed, count, frames, &out, threads),
        Command::Train {
            data,
            out,
            steps,
            seed,
            ckpt,
        } => train(&data, &out, steps, seed, &ckpt),
        Command::Register {
            src,
            tgt,
            out,
            seed,
            ckpt,
        } => register(&src, &tgt, &out, seed, &ckpt),
        Command::Sample {
            input,
            out,
            ratio,
            seed,
            ckpt,
        } => sample(&input, &out, ratio, seed, &ckpt),
        Command::Model {
            seq,
            out,
            ckpt,
            cycles,
            budget,
            seed,
        } => model(&seq, &out, &ckpt, cycles, budget, seed),
        Command::Eval { pred, gt, out } => eval_cmd(&pred, &gt, &out),
        Command::InitConfig => {
            let manifest = RunManifest::default();
            let text = serde_json::to_string_pretty(&manifest).map_err(dsm::Error::from)?;
            println!("{text}");
            Ok(())
        }
    }
}

/// One generation work unit: (shape, instance seed, output subdirectory).
struct GenUnit {
    spec: ShapeSpec,
    seed: u64,
    dir: PathBuf,
}

#[allow(clippy::too_many_arguments)]
fn gen(
    kind: GenKind,
    spec: Option<PathBuf>,
    suite: bool,
    seed: u64,
    count: usize,
    frames: Option<usize>,
    out: &Path,
    threads: usize,
) -> Result<(), CliError> {
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".to_string()));
    }
    let frames = frames.unwrap_or(match kind {
        GenKind::Sp => SUITE_STACK_FRAMES,
        GenKind::Seq => SUITE_SEQUENCE_FRAMES,
        GenKind::Rg => 0,
    });
    let prefix = match kind {
        GenKind::Rg => "pair",
        GenKind::Sp => "stack",
        GenKind::Seq => "seq",
    };

    let mut units = Vec::new();
    if suite {
        let shapes = standard_suite_shapes();
        let mut idx = 0usize;
        for (si, shape) in shapes.iter().enumerate() {
            for &s in &SUITE_SEEDS {
                units.push(GenUnit {
                    spec: shape.clone(),
                    seed: suite_instance_seed(si, s),
                    dir: out.join(format!("{prefix}_{idx:04}")),
                });
                idx += 1;
            }
        }
    } else {
        let spec_path = spec.ok_or_else(|| {
            CliError::Usage("provide --spec <file> or --suite".to_string())
        })?;
        let text = std::fs::read_to_string(&spec_path).map_err(|e| {
            CliError::Lib(dsm::Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", spec_path.display()),
            )))
        })?;
        let shape: ShapeSpec = serde_json::from_str(&text).map_err(dsm::Error::from)?;
        shape.validate()?;
        for i in 0..count.max(1) {
            units.push(GenUnit {
                spec: shape.clone(),
                seed: seed.wrapping_add(i as u64),
                dir: out.join(format!("{prefix}_{i:04}")),
            });
        }
    }

    std::fs::create_dir_all(out).map_err(dsm::Error::from)?;
    let params = GenParams::default();
    let work = |unit: &GenUnit| -> dsm::Result<()> {
        match kind {
            GenKind::Rg => {
                let pair = make_rg_pair(&unit.spec, &params, unit.seed)?;
                save_rg_pair(&unit.dir, &pair)
            }
            GenKind::Sp => {
                let stack = make_sp_stack(&unit.spec, frames, &params, unit.seed)?;
                save_sp_stack(&unit.dir, &stack)
            }
            GenKind::Seq => {
                let mut cfg = PipelineConfig::default();
                cfg.seed = unit.seed;
                let seq = make_sequence(&unit.spec, frames, &params, unit.seed)?;
                save_sequence(&unit.dir, &seq, &cfg)
            }
        }
    };

    if threads <= 1 {
        for unit in &units {
            work(unit)?;
        }
    } else {
        // Units are independent and write disjoint directories, so the
        // outputs do not depend on the thread count.
        let failures = std::sync::Mutex::new(Vec::new());
        let failures_ref = &failures;
        let work_ref = &work;
        std::thread::scope(|scope| {
            for chunk in units.chunks(units.len().div_ceil(threads)) {
                scope.spawn(move || {
                    for unit in chunk {
                        if let Err(e) = work_ref(unit) {
                            failures_ref.lock().unwrap().push(e);
                        }
                    }
                });
            }
        });
        if let Some(e) = failures.into_inner().unwrap().into_iter().next() {
            return Err(CliError::Lib(e));
        }
    }
    eprintln!("generated {} {prefix} entries under {}", units.len(), out.display());
    Ok(())
}

fn train(
    data: &Path,
    out: &Path,
    steps: usize,
    seed: u64,
    ckpt: &Option<PathBuf>,
) -> Result<(), CliError> {
    let dataset = load_train_dataset(data)?;
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let mut pipeline = load_pipeline(cfg, ckpt)?;
    let (lr0, ls0) = pipeline.mean_losses(&dataset)?;
    let log = pipeline.train(&dataset, steps)?;
    let (lr1, ls1) = pipeline.mean_losses(&dataset)?;
    pipeline.store.save(out)?;
    let csv = out.with_extension("loss.csv");
    log.to_csv(&csv)?;
    eprintln!(
        "trained {steps} steps: registration loss {lr0:.6} -> {lr1:.6}, sampling loss {ls0:.6} -> {ls1:.6}"
    );
    eprintln!("checkpoint: {}, losses: {}", out.display(), csv.display());
    Ok(())
}

fn register(
    src: &Path,
    tgt: &Path,
    out: &Path,
    seed: u64,
    ckpt: &Option<PathBuf>,
) -> Result<(), CliError> {
    let src_cloud = read_cloud(src)?;
    let tgt_cloud = read_cloud(tgt)?;
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let pipeline = load_pipeline(cfg, ckpt)?;
    let result = pipeline.register_pair(&src_cloud, &tgt_cloud, seed)?;

    let mut file = std::fs::File::create(out).map_err(dsm::Error::from)?;
    writeln!(file, "{}", pose_line(&result.transform)).map_err(dsm::Error::from)?;

    let inlier_fraction = result.inlier_flags.iter().filter(|&&f| f).count() as f64
        / result.inlier_flags.len() as f64;
    let r = &result.significance;
    let r_mean = r.iter().sum::<f64>() / r.len() as f64;
    let r_min = r.iter().copied().fold(f64::INFINITY, f64::min);
    let r_max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sidecar = serde_json::json!({
        "residual": result.residual,
        "inlier_fraction": inlier_fraction,
        "r_map": { "mean": r_mean, "min": r_min, "max": r_max },
    });
    let sidecar_path = out.with_extension("metrics.json");
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).map_err(dsm::Error::from)? + "\n",
    )
    .map_err(dsm::Error::from)?;
    eprintln!(
        "registered: residual {:.6}, inliers {:.1}%",
        result.residual,
        100.0 * inlier_fraction
    );
    Ok(())
}

fn sample(
    input: &Path,
    out: &Path,
    ratio: f64,
    seed: u64,
    ckpt: &Option<PathBuf>,
) -> Result<(), CliError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CliError::Usage(format!(
            "--ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let cloud = read_cloud(input)?;
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let pipeline = load_pipeline(cfg, ckpt)?;
    let result = pipeline.sample(&cloud, ratio)?;
    write_ply(&result.sampled, out)?;
    eprintln!(
        "sampled {} -> {} points (resolutions {:?})",
        cloud.len(),
        result.sampled.len(),
        result.resolutions
    );
    Ok(())
}

fn model(
    seq_path: &Path,
    out: &Path,
    ckpt: &Option<PathBuf>,
    cycles: Option<usize>,
    budget: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let (sequence, manifest) = read_sequence(seq_path)?;
    let mut cfg = manifest.pipeline.clone();
    if let Some(c) = cycles {
        cfg.cycles = c;
    }
    if let Some(b) = budget {
        cfg.budget = b;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let base = seq_path.parent().unwrap_or_else(|| Path::new("."));
    let gt_model = match &manifest.gt_model {
        Some(name) => {
            let p = if Path::new(name).is_absolute() {
                PathBuf::from(name)
            } else {
                base.join(name)
            };
            Some(read_ply(&p)?)
        }
        None => None,
    };

    let pipeline = load_pipeline(cfg, ckpt)?;
    let state = pipeline.run_modeling(&sequence, gt_model.as_ref())?;

    std::fs::create_dir_all(out).map_err(dsm::Error::from)?;
    write_ply(&state.world_cloud, &out.join("model.ply"))?;
    write_poses(&state.frame_poses, &out.join("poses.txt"))?;

    let mut metrics = MetricsJson {
        per_cycle: state.metrics.clone(),
        ..MetricsJson::default()
    };
    let m = sequence.frames.len();
    let failed = state.failure_flags.iter().filter(|&&f| f).count();
    metrics.failure_rate = Some(failed as f64 / m as f64);
    if let Some(gt) = &gt_model {
        let report = evaluate_modeling(&state.world_cloud, gt);
        metrics.chamfer = Some(report.chamfer);
        metrics.fscore_1pct = Some(report.fscore_1pct);
        metrics.bbox_error = Some(report.bbox_error);
    }
    if let (Some(gts), true) = (&sequence.poses_gt, failed < m) {
        // Poses are anchored to frame 0: compare relative poses.
        let preds: Vec<Option<dsm::geometry::RigidTransform>> = (0..m)
            .map(|k| {
                if state.failure_flags[k] {
                    None
                } else {
                    Some(state.frame_poses[0].invert().compose(&state.frame_poses[k]))
                }
            })
            .collect();
        let rel_gts: Vec<dsm::geometry::RigidTransform> =
            (0..m).map(|k| gts[0].invert().compose(&gts[k])).collect();
        if let Ok(report) = evaluate_registration(&preds, &rel_gts) {
            metrics.mean_er_deg = Some(report.mean_er_deg);
            metrics.mean_et = Some(report.mean_et);
        }
    }
    metrics.save(&out.join("metrics.json"))?;
    eprintln!(
        "modeled {} frames -> {} points ({} failed); outputs under {}",
        m,
        state.world_cloud.len(),
        failed,
        out.display()
    );
    Ok(())
}

fn eval_cmd(pred: &Path, gt: &Path, out: &Path) -> Result<(), CliError> {
    let pred_cloud = read_cloud(pred)?;
    let gt_cloud = read_cloud(gt)?;
    let report = evaluate_modeling(&pred_cloud, &gt_cloud);
    let metrics = MetricsJson::from_modeling(&report);
    metrics.save(out)?;
    eprintln!(
        "chamfer {:.6e}, f-score@1% {:.4}",
        report.chamfer, report.fscore_1pct
    );
    Ok(())
}
