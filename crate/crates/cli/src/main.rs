//! Command-line pipeline: generate a synthetic scene, train a radiance
//! field on it, evaluate held-out views and lidar, and extract depth maps,
//! point clouds, or meshes.
//!
//! Exit codes: 0 success, 2 input error, 3 config error, 4 numeric failure.

mod config;

use std::io::Write as IoWrite;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;
use radfield::eval::{
    camera_rays, evaluate, extract_mesh, extract_pointcloud, render_depthmap, MetricReport,
};
use radfield::field::{read_checkpoint, write_checkpoint, CheckpointMeta, ExposureMode};
use radfield::io::{write_depth_pgm, write_mesh_ply, write_points_ply};
use radfield::synth::{
    default_scene, generate, one_box_scene, read_bundle, split_scene, write_bundle, SceneBuild,
    SceneSpec, SplitScene,
};
use radfield::train::{train_with, AdamState, TrainConfig};
use radfield::{Error, Real, Result};

#[derive(Parser)]
#[command(name = "radfield", version, about = "Lidar- and image-supervised radiance fields")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle (images, sky masks, lidar sweep).
    GenScene(GenSceneArgs),
    /// Train a field on a scene per an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Extract depth maps, a point cloud, or a colored mesh.
    Extract(ExtractArgs),
    /// Train and evaluate the full loss-component ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Scene spec JSON; mutually exclusive with --preset.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in scene family.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    cameras: usize,
    #[arg(long, default_value_t = 64)]
    resolution: u32,
    #[arg(long, default_value_t = 220)]
    lidar_azimuths: usize,
    /// Output directory for the bundle.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    OneBox,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override total epochs (warmup is kept, main stage shrinks/grows).
    #[arg(long)]
    epochs: Option<usize>,
    /// Drop the lidar losses and lidar rays (image-only training).
    #[arg(long)]
    no_lidar: bool,
    /// Drop the sky segmentation loss.
    #[arg(long)]
    no_sky: bool,
    /// Override the exposure handling mode.
    #[arg(long, value_enum)]
    exposure: Option<ExposureArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExposureArg {
    Affine,
    Direct,
    Off,
}

impl From<ExposureArg> for ExposureMode {
    fn from(e: ExposureArg) -> Self {
        match e {
            ExposureArg::Affine => ExposureMode::Affine,
            ExposureArg::Direct => ExposureMode::Direct,
            ExposureArg::Off => ExposureMode::Off,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to evaluate (default: <output_dir>/final.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report path (default: <output_dir>/metrics.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    what: Artifact,
    /// Output directory (default: <output_dir>/extract).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mesh grid resolution per side.
    #[arg(long, default_value_t = 96)]
    resolution: usize,
    /// Iso-density level for meshing, 1/meter.
    #[arg(long, default_value_t = 5.0)]
    iso: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Artifact {
    Depthmaps,
    Pointcloud,
    Mesh,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override total epochs for every grid row.
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        // build the global pool once; gradient reduction order is fixed, so
        // the thread count never changes results
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = match cli.command {
        Command::GenScene(args) => cmd_gen_scene(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Input(_) | Error::Io(_) | Error::Parse(_) => 2,
        Error::Config(_) | Error::State(_) => 3,
        Error::Numeric(_) | Error::Diverged { .. } => 4,
    }
}

fn cmd_gen_scene(args: GenSceneArgs) -> Result<()> {
    let spec: SceneSpec = if let Some(path) = &args.spec {
        serde_json::from_str(&std::fs::read_to_string(path)?)?
    } else {
        let build = SceneBuild {
            seed: args.seed,
            camera_count: args.cameras,
            resolution: args.resolution,
            lidar_azimuths: args.lidar_azimuths,
        };
        match args.preset.unwrap_or(Preset::Default) {
            Preset::Default => default_scene(&build),
            Preset::OneBox => one_box_scene(&build),
        }
    };
    spec.validate()?;
    let bundle = generate(spec)?;
    write_bundle(&args.out, &bundle)?;
    println!(
        "wrote scene: {} cameras at {}x{}, {} lidar samples -> {}",
        bundle.spec.cameras.len(),
        bundle.images[0].width,
        bundle.images[0].height,
        bundle.lidar.len(),
        args.out.display()
    );
    Ok(())
}

fn apply_train_overrides(cfg: &mut ExperimentConfig, args: &TrainArgs) {
    if let Some(total) = args.epochs {
        let warmup = cfg.train.warmup_epochs.min(total);
        cfg.train.warmup_epochs = warmup;
        cfg.train.main_epochs = total - warmup;
    }
    if args.no_lidar {
        cfg.train.loss_weights = cfg.train.loss_weights.without_lidar();
        cfg.train.lidar_fraction = 0.0;
    }
    if args.no_sky {
        cfg.train.loss_weights.seg = 0.0;
    }
    if let Some(mode) = args.exposure {
        cfg.train.exposure_mode = mode.into();
        cfg.train.field.exposure_mode = mode.into();
    }
}

fn load_split(cfg: &ExperimentConfig) -> Result<SplitScene> {
    let bundle = read_bundle(&cfg.scene_path)?;
    let (split, _) = split_scene(&bundle, cfg.split, cfg.seed)?;
    Ok(split)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    apply_train_overrides(&mut cfg, &args);
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.save(&cfg.output_dir.join("resolved_config.json"))?;

    let bundle = read_bundle(&cfg.scene_path)?;
    let (split, split_record) = split_scene(&bundle, cfg.split, cfg.seed)?;
    std::fs::write(
        cfg.output_dir.join("split.json"),
        serde_json::to_string_pretty(&split_record)? + "\n",
    )?;

    let resume = match &args.resume {
        Some(path) => {
            let (params, extras, meta) = read_checkpoint(path)?;
            let epoch = meta
                .epoch
                .ok_or_else(|| Error::input("checkpoint has no epoch; cannot resume"))?;
            let adam = AdamState::from_extras(&params, &extras, meta.adam_step.unwrap_or(0))?;
            Some((params, adam, epoch))
        }
        None => None,
    };

    let log_path = cfg.output_dir.join("train_log.ndjson");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let ckpt_every = cfg.train.checkpoint_every;
    let out_dir = cfg.output_dir.clone();
    let train_cfg = cfg.train.clone();
    let total = train_cfg.total_epochs();

    let out = train_with(&split.train, &train_cfg, resume, &mut |done, params, adam, record| {
        writeln!(log_file, "{}", serde_json::to_string(record)?)?;
        if ckpt_every > 0 && done % ckpt_every == 0 && done < total {
            let mut meta = CheckpointMeta::new(params);
            meta.epoch = Some(done);
            meta.adam_step = Some(adam.step);
            write_checkpoint(
                &out_dir.join(format!("epoch_{done:05}.ckpt")),
                params,
                &adam.to_extras(),
                &meta,
            )?;
        }
        Ok(())
    })?;

    let mut meta = CheckpointMeta::new(&out.params);
    meta.epoch = Some(total);
    meta.adam_step = Some(out.adam.step);
    let final_path = cfg.output_dir.join("final.ckpt");
    write_checkpoint(&final_path, &out.params, &out.adam.to_extras(), &meta)?;
    if let Some(last) = out.log.last() {
        println!(
            "trained {} epochs (loss {:.6}) -> {}",
            total,
            last.total,
            final_path.display()
        );
    } else {
        println!("trained 0 epochs -> {}", final_path.display());
    }
    Ok(())
}

fn checkpoint_path(cfg: &ExperimentConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.output_dir.join("final.ckpt"))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let split = load_split(&cfg)?;
    let (params, _, _) = read_checkpoint(&checkpoint_path(&cfg, &args.checkpoint))?;
    let bounds = (split.train.t_near, split.train.t_far);
    let (report, _) = evaluate(&params, &split.test, bounds, &cfg.metrics)?;
    let out_path = args.out.unwrap_or_else(|| cfg.output_dir.join("metrics.json"));
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&out_path, serde_json::to_string_pretty(&report)? + "\n")?;
    print_report(&report);
    println!("report -> {}", out_path.display());
    Ok(())
}

fn print_report(report: &MetricReport) {
    let fmt = |v: Option<Real>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "psnr {} | ssim {} | depth err {} | acc@0.1 {} | chamfer {} | f-score {}",
        fmt(report.psnr),
        fmt(report.ssim),
        fmt(report.depth_avg_error),
        fmt(report.acc_at_0_1),
        fmt(report.chamfer),
        fmt(report.f_score),
    );
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let split = load_split(&cfg)?;
    let (params, _, _) = read_checkpoint(&checkpoint_path(&cfg, &args.checkpoint))?;
    let out_dir = args.out.unwrap_or_else(|| cfg.output_dir.join("extract"));
    std::fs::create_dir_all(&out_dir)?;
    let bounds = (split.train.t_near, split.train.t_far);
    match args.what {
        Artifact::Depthmaps => {
            for cam in &split.train.cameras {
                let depth = render_depthmap(&params, cam, bounds, &cfg.metrics)?;
                let path = out_dir.join(format!("depth_{:03}.pgm", cam.image_id));
                write_depth_pgm(&path, cam.width, cam.height, &depth)?;
            }
            println!("wrote {} depth maps -> {}", split.train.cameras.len(), out_dir.display());
        }
        Artifact::Pointcloud => {
            let mut rays = Vec::new();
            for cam in &split.train.cameras {
                rays.extend(camera_rays(cam, bounds)?);
            }
            let cloud = extract_pointcloud(&params, &rays, &cfg.metrics);
            let path = out_dir.join("pointcloud.ply");
            write_points_ply(&path, &cloud)?;
            println!("wrote {} points -> {}", cloud.len(), path.display());
        }
        Artifact::Mesh => {
            let bundle = read_bundle(&cfg.scene_path)?;
            let mesh = extract_mesh(
                &params,
                (bundle.spec.bounds_min, bundle.spec.bounds_max),
                args.resolution,
                args.iso as Real,
            )?;
            let path = out_dir.join("mesh.ply");
            write_mesh_ply(&path, &mesh)?;
            println!(
                "wrote mesh with {} vertices / {} faces -> {}",
                mesh.vertices.len(),
                mesh.triangles.len(),
                path.display()
            );
        }
    }
    Ok(())
}

/// One row of the component ablation grid.
struct AblationRow {
    name: &'static str,
    exposure: bool,
    seg: bool,
    depth: bool,
    empty: bool,
    near: bool,
}

const ABLATION_GRID: [AblationRow; 7] = [
    AblationRow { name: "baseline", exposure: false, seg: false, depth: false, empty: false, near: false },
    AblationRow { name: "exposure", exposure: true, seg: false, depth: false, empty: false, near: false },
    AblationRow { name: "exposure+seg", exposure: true, seg: true, depth: false, empty: false, near: false },
    AblationRow { name: "exposure+seg+depth", exposure: true, seg: true, depth: true, empty: false, near: false },
    AblationRow { name: "exposure+seg+depth+empty", exposure: true, seg: true, depth: true, empty: true, near: false },
    AblationRow { name: "exposure+seg+empty+near", exposure: true, seg: true, depth: false, empty: true, near: true },
    AblationRow { name: "full", exposure: true, seg: true, depth: true, empty: true, near: true },
];

fn ablation_config(base: &TrainConfig, row: &AblationRow) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.exposure_mode = if row.exposure { ExposureMode::Affine } else { ExposureMode::Off };
    cfg.field.exposure_mode = cfg.exposure_mode;
    if !row.seg {
        cfg.loss_weights.seg = 0.0;
    }
    if !row.depth {
        cfg.loss_weights.depth = 0.0;
    }
    if !row.empty {
        cfg.loss_weights.empty = 0.0;
    }
    if !row.near {
        cfg.loss_weights.near = 0.0;
    }
    if !(row.depth || row.empty || row.near) {
        cfg.lidar_fraction = 0.0;
    }
    cfg
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(total) = args.epochs {
        let warmup = cfg.train.warmup_epochs.min(total);
        cfg.train.warmup_epochs = warmup;
        cfg.train.main_epochs = total - warmup;
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let bundle = read_bundle(&cfg.scene_path)?;
    let (split, _) = split_scene(&bundle, cfg.split, cfg.seed)?;
    let bounds = (split.train.t_near, split.train.t_far);

    let mut rows = Vec::new();
    for row in &ABLATION_GRID {
        let row_cfg = ablation_config(&cfg.train, row);
        let row_dir = cfg.output_dir.join(format!("ablate_{}", row.name.replace('+', "_")));
        std::fs::create_dir_all(&row_dir)?;
        let mut resolved = cfg.clone();
        resolved.train = row_cfg.clone();
        resolved.output_dir = row_dir.clone();
        resolved.save(&row_dir.join("resolved_config.json"))?;

        println!("[{}] training...", row.name);
        let out = train_with(&split.train, &row_cfg, None, &mut |_, _, _, _| Ok(()))?;
        let mut meta = CheckpointMeta::new(&out.params);
        meta.epoch = Some(row_cfg.total_epochs());
        meta.adam_step = Some(out.adam.step);
        write_checkpoint(&row_dir.join("final.ckpt"), &out.params, &[], &meta)?;
        let (report, _) = evaluate(&out.params, &split.test, bounds, &cfg.metrics)?;
        print_report(&report);
        std::fs::write(
            row_dir.join("metrics.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        rows.push(serde_json::json!({ "row": row.name, "metrics": report }));
    }
    std::fs::write(
        cfg.output_dir.join("ablation.json"),
        serde_json::to_string_pretty(&serde_json::Value::Array(rows))? + "\n",
    )?;
    println!("ablation grid -> {}", cfg.output_dir.join("ablation.json").display());
    Ok(())
}
