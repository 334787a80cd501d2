//! Command-line entry point: simulate datasets, train models, render and
//! evaluate checkpoints, and inspect event slicing.

use clap::{Args, Parser, Subcommand};
use e4dgs::events::adaptive_slice;
use e4dgs::gaussians::read_checkpoint;
use e4dgs::image::write_pnm;
use e4dgs::sim::{orbiting_disc_scene, read_dataset, simulate_dataset, write_dataset, BlurSeverity, SimConfig};
use e4dgs::train::{evaluate, train, InitMode, SlicingMode, TrainConfig, TrainMode, TrainState};
use e4dgs::E4dgsError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "e4dgs", about = "Event-based dynamic Gaussian splatting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view event dataset of the orbiting-disc scene.
    Simulate(SimulateArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Render held-out views from a checkpoint.
    Render(CheckpointArgs),
    /// Evaluate a checkpoint on held-out views and write metrics.csv.
    Eval(CheckpointArgs),
    /// Print event-window statistics for a dataset.
    SliceInspect(SliceArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Optional TOML config file ([sim] section).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Motion blur severity for the stored frames.
    #[arg(long)]
    blur: Option<String>,
    /// Frame resolution as WxH.
    #[arg(long)]
    resolution: Option<String>,
    /// Number of cameras on the rig.
    #[arg(long)]
    cameras: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (loss log, checkpoints).
    #[arg(long)]
    out: PathBuf,
    /// Optional TOML config file ([train] section).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Training mode: event, fusion, or rgb.
    #[arg(long)]
    mode: Option<String>,
    /// Minimum events per window.
    #[arg(long)]
    nmin: Option<usize>,
    /// Maximum events per window.
    #[arg(long)]
    nmax: Option<usize>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file produced by training.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct SliceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nmin: Option<usize>,
    #[arg(long)]
    nmax: Option<usize>,
}

// --- TOML config --------------------------------------------------------------

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    train: TrainToml,
    #[serde(default)]
    sim: SimToml,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainToml {
    iterations: Option<usize>,
    mode: Option<String>,
    seed: Option<u64>,
    lr_position: Option<f64>,
    lr_position_final: Option<f64>,
    lr_rotation: Option<f64>,
    lr_log_scale: Option<f64>,
    lr_opacity: Option<f64>,
    lr_color: Option<f64>,
    lr_deform: Option<f64>,
    lr_theta_c: Option<f64>,
    densify_interval: Option<usize>,
    densify_start: Option<usize>,
    densify_stop: Option<usize>,
    densify_grad_threshold: Option<f64>,
    densify_split_scale: Option<f64>,
    max_primitives: Option<usize>,
    prune_enabled: Option<bool>,
    prune_interval: Option<usize>,
    prune_w_min: Option<f64>,
    prune_timestamps: Option<usize>,
    slicing: Option<String>,
    n_min: Option<usize>,
    n_max: Option<usize>,
    sigma_noise: Option<f64>,
    lambda_tv: Option<f64>,
    lambda_rgb: Option<f64>,
    threshold_init: Option<f64>,
    deform_warmup: Option<usize>,
    deform_depth: Option<usize>,
    deform_width: Option<usize>,
    l_pos: Option<usize>,
    l_time: Option<usize>,
    init_primitives: Option<usize>,
    init_half_extent: Option<f64>,
    background: Option<f64>,
    llffhold: Option<usize>,
    checkpoint_interval: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SimToml {
    width: Option<u32>,
    height: Option<u32>,
    cameras: Option<usize>,
    frame_rate: Option<f64>,
    n_frames: Option<usize>,
    c_pos: Option<f64>,
    c_neg: Option<f64>,
    blur: Option<String>,
    rig_radius: Option<f64>,
    rig_elevation: Option<f64>,
    focal: Option<f64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, E4dgsError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| E4dgsError::io(p, e))?;
            toml::from_str(&text).map_err(|e| E4dgsError::parse(p, e.to_string()))
        }
    }
}

fn apply_train_toml(config: &mut TrainConfig, t: &TrainToml) -> Result<(), E4dgsError> {
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = t.$field {
                config.$field = v;
            }
        };
    }
    set!(iterations);
    set!(seed);
    set!(lr_position);
    set!(lr_position_final);
    set!(lr_rotation);
    set!(lr_log_scale);
    set!(lr_opacity);
    set!(lr_color);
    set!(lr_deform);
    set!(lr_theta_c);
    set!(densify_interval);
    set!(densify_start);
    set!(densify_stop);
    set!(densify_grad_threshold);
    set!(densify_split_scale);
    set!(max_primitives);
    set!(prune_enabled);
    set!(prune_interval);
    set!(prune_w_min);
    set!(prune_timestamps);
    set!(n_min);
    set!(n_max);
    set!(sigma_noise);
    set!(threshold_init);
    set!(deform_warmup);
    set!(deform_depth);
    set!(deform_width);
    set!(l_pos);
    set!(l_time);
    set!(background);
    set!(llffhold);
    set!(checkpoint_interval);
    if let Some(v) = t.lambda_tv {
        config.weights.lambda_tv = v;
    }
    if let Some(v) = t.lambda_rgb {
        config.weights.lambda_rgb = v;
    }
    if let Some(mode) = &t.mode {
        config.mode = TrainMode::parse(mode)?;
    }
    if let Some(slicing) = &t.slicing {
        config.slicing = match slicing.as_str() {
            "adaptive" => SlicingMode::Adaptive,
            "fixed" => SlicingMode::Fixed,
            other => {
                return Err(E4dgsError::InvalidArgument(format!(
                    "unknown slicing mode '{other}' (expected adaptive|fixed)"
                )))
            }
        };
    }
    let (mut n, mut half) = match config.init {
        InitMode::Cube { n, half_extent } => (n, half_extent),
        InitMode::Sphere { n, radius } => (n, radius),
    };
    if let Some(v) = t.init_primitives {
        n = v;
    }
    if let Some(v) = t.init_half_extent {
        half = v;
    }
    config.init = InitMode::Cube { n, half_extent: half };
    Ok(())
}

fn apply_sim_toml(config: &mut SimConfig, t: &SimToml) -> Result<(), E4dgsError> {
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = t.$field {
                config.$field = v;
            }
        };
    }
    set!(width);
    set!(height);
    set!(cameras);
    set!(frame_rate);
    set!(n_frames);
    set!(c_pos);
    set!(c_neg);
    set!(rig_radius);
    set!(rig_elevation);
    set!(focal);
    if let Some(blur) = &t.blur {
        config.blur = BlurSeverity::parse(blur)?;
    }
    Ok(())
}

fn parse_resolution(s: &str) -> Result<(u32, u32), E4dgsError> {
    let bad = || E4dgsError::InvalidArgument(format!("bad resolution '{s}' (expected WxH)"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

// --- Subcommands ----------------------------------------------------------------

fn cmd_simulate(args: &SimulateArgs) -> Result<(), E4dgsError> {
    let file = load_file_config(args.config.as_deref())?;
    let mut config = SimConfig::default();
    apply_sim_toml(&mut config, &file.sim)?;
    if let Some(blur) = &args.blur {
        config.blur = BlurSeverity::parse(blur)?;
    }
    if let Some(res) = &args.resolution {
        let (w, h) = parse_resolution(res)?;
        config.width = w;
        config.height = h;
    }
    if let Some(cams) = args.cameras {
        config.cameras = cams;
    }
    let scene = orbiting_disc_scene();
    let dataset = simulate_dataset(&scene, &config)?;
    write_dataset(&args.out, &dataset)?;
    let total_events: usize = dataset.cameras.iter().map(|c| c.stream.len()).sum();
    println!(
        "wrote dataset to {}: {} cameras, {} frames each, {} events total",
        args.out.display(),
        dataset.cameras.len(),
        dataset.cameras.first().map_or(0, |c| c.frames.frames.len()),
        total_events
    );
    Ok(())
}

fn build_train_config(config_path: Option<&Path>, args: &TrainArgs) -> Result<TrainConfig, E4dgsError> {
    let file = load_file_config(config_path)?;
    let mut config = TrainConfig::default();
    apply_train_toml(&mut config, &file.train)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(iters) = args.iters {
        config.iterations = iters;
    }
    if let Some(mode) = &args.mode {
        config.mode = TrainMode::parse(mode)?;
    }
    if let Some(n) = args.nmin {
        config.n_min = n;
    }
    if let Some(n) = args.nmax {
        config.n_max = n;
    }
    Ok(config)
}

fn cmd_train(args: &TrainArgs) -> Result<(), E4dgsError> {
    let config = build_train_config(args.config.as_deref(), args)?;
    let dataset = read_dataset(&args.data)?;
    let state = train(&dataset, config, Some(&args.out))?;
    let report = evaluate(&state, &dataset)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &report)?;
    println!(
        "trained {} iterations: {} primitives, C_hat {:.4}, held-out PSNR {:.2} dB, SSIM {:.4}",
        state.iteration, report.num_primitives, report.c_hat, report.mean_psnr, report.mean_ssim
    );
    Ok(())
}

fn load_state(args: &CheckpointArgs) -> Result<(TrainState, e4dgs::sim::Dataset), E4dgsError> {
    let file = load_file_config(args.config.as_deref())?;
    let mut config = TrainConfig::default();
    apply_train_toml(&mut config, &file.train)?;
    if let Some(mode) = &args.mode {
        config.mode = TrainMode::parse(mode)?;
    }
    let dataset = read_dataset(&args.data)?;
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let state = TrainState::from_checkpoint(&dataset, config, ckpt)?;
    Ok((state, dataset))
}

fn cmd_render(args: &CheckpointArgs) -> Result<(), E4dgsError> {
    let (state, dataset) = load_state(args)?;
    let renders_dir = args.out.join("renders");
    std::fs::create_dir_all(&renders_dir).map_err(|e| E4dgsError::io(&renders_dir, e))?;
    let grayscale = state.config.mode == TrainMode::Event;
    let mut written = 0;
    for (ci, cam) in dataset.cameras.iter().enumerate() {
        let n_frames = cam.frames.frames.len();
        for fi in 0..n_frames {
            if (ci * n_frames + fi) % state.config.llffhold != 0 {
                continue;
            }
            let t = cam.frames.timestamps[fi];
            let img = state.render_view(&dataset, ci, t, grayscale)?;
            let ext = if grayscale { "pgm" } else { "ppm" };
            write_pnm(
                &renders_dir.join(format!("cam_{ci:02}_frame_{fi:04}.{ext}")),
                &img,
                16,
            )?;
            written += 1;
        }
    }
    println!("wrote {written} held-out renders to {}", renders_dir.display());
    Ok(())
}

fn write_metrics_csv(path: &Path, report: &e4dgs::train::MetricsReport) -> Result<(), E4dgsError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| E4dgsError::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| E4dgsError::io(path, e))?;
    let io_err = |e| E4dgsError::io(path, e);
    writeln!(f, "camera,frame,psnr,ssim").map_err(io_err)?;
    for v in &report.views {
        writeln!(f, "{},{},{:.6},{:.6}", v.camera, v.frame, v.psnr, v.ssim).map_err(io_err)?;
    }
    writeln!(
        f,
        "# mean_psnr={:.6} mean_ssim={:.6} c_hat={:.6} primitives={} iteration={}",
        report.mean_psnr, report.mean_ssim, report.c_hat, report.num_primitives, report.iteration
    )
    .map_err(io_err)?;
    Ok(())
}

fn cmd_eval(args: &CheckpointArgs) -> Result<(), E4dgsError> {
    let (state, dataset) = load_state(args)?;
    let report = evaluate(&state, &dataset)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &report)?;
    println!(
        "{} held-out views: PSNR {:.2} dB, SSIM {:.4}, C_hat {:.4}, {} primitives",
        report.views.len(),
        report.mean_psnr,
        report.mean_ssim,
        report.c_hat,
        report.num_primitives
    );
    Ok(())
}

fn cmd_slice_inspect(args: &SliceArgs) -> Result<(), E4dgsError> {
    let dataset = read_dataset(&args.data)?;
    let n_min = args.nmin.unwrap_or(5_000);
    let n_max = args.nmax.unwrap_or(10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(0));
    for (ci, cam) in dataset.cameras.iter().enumerate() {
        let windows = adaptive_slice(&cam.stream, n_min, n_max, &mut rng)?;
        let counts: Vec<usize> = windows.iter().map(|w| w.count()).collect();
        let (min, max) = (
            counts.iter().min().copied().unwrap_or(0),
            counts.iter().max().copied().unwrap_or(0),
        );
        let mean = if counts.is_empty() {
            0.0
        } else {
            counts.iter().sum::<usize>() as f64 / counts.len() as f64
        };
        println!(
            "cam_{ci:02}: {} events -> {} windows (count min {min}, mean {mean:.1}, max {max})",
            cam.stream.len(),
            windows.len()
        );
    }
    Ok(())
}

fn run() -> Result<(), E4dgsError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SliceInspect(args) => cmd_slice_inspect(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
