//! densedesc: dense descriptor learning and matching on synthetic data.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use densedesc_core::backbone::receptive_field;
use densedesc_core::checkpoint::{inspect_checkpoint, load_checkpoint};
use densedesc_core::config::FileConfig;
use densedesc_core::error::Error as CoreError;
use densedesc_core::eval::{
    evaluate, write_report, EvalSettings, KeypointSource, DEFAULT_CYCLE_THRESHOLD_PX,
    DEFAULT_INLIER_THRESHOLD_PX,
};
use densedesc_core::image_io::read_ppm;
use densedesc_core::loss::LossKind;
use densedesc_core::matching::{
    dense_match, display_normalize, poi_conv, sample_descriptor, write_heatmap_pgm,
    write_match_file, PixelLoc,
};
use densedesc_core::synth::{build_dataset, GenMode, HomographyBounds, Split, SynthConfig};
use densedesc_core::train::train;

#[derive(Parser)]
#[command(name = "densedesc", version, about = "dense descriptor training, matching, and evaluation")]
struct Cli {
    /// Random seed override (applies to gen-data, train, gradcheck).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count (1 guarantees bitwise reproducibility).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Config file (TOML sections: backbone, loss, train).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory or file, subcommand dependent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact groundtruth.
    GenData(GenDataArgs),
    /// Train a descriptor network on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Match keypoints between two images with a trained network.
    Match(MatchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Print checkpoint metadata.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// homography | projective
    #[arg(long, default_value = "homography")]
    mode: String,
    #[arg(long, default_value_t = 200)]
    train_pairs: usize,
    #[arg(long, default_value_t = 40)]
    val_pairs: usize,
    #[arg(long, default_value_t = 40)]
    test_pairs: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 80)]
    width: usize,
    /// Spacing of the stored groundtruth grid, pixels.
    #[arg(long, default_value_t = 8)]
    grid_step: usize,
    #[arg(long, default_value_t = 5)]
    octaves: usize,
    #[arg(long, default_value_t = 12.0)]
    max_rotation_deg: f64,
    #[arg(long, default_value_t = 0.08)]
    max_translation_frac: f64,
    #[arg(long, default_value_t = 4.0e-4)]
    max_perspective: f64,
    #[arg(long, default_value_t = 0.08)]
    max_scale_jitter: f64,
    /// Brightness/contrast jitter on target images (off by default).
    #[arg(long, default_value_t = false)]
    jitter: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (overrides the config file).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Loss kind (overrides the config file):
    /// rr | softargmax | softargmax_bce_combo | softmax_bce | rr_softargmax
    #[arg(long)]
    loss: Option<String>,
    /// Step count override.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Query source: "grid:<step>" (groundtruth from the stored generator)
    /// or "stored" (the stored correspondence files).
    #[arg(long, default_value = "grid:8")]
    keypoints: String,
    /// PCK thresholds in pixels, comma separated.
    #[arg(long, default_value = "5,10,20")]
    thresholds: String,
    #[arg(long, default_value_t = DEFAULT_CYCLE_THRESHOLD_PX)]
    cycle_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_INLIER_THRESHOLD_PX)]
    inlier_threshold: f64,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source image (PPM).
    #[arg(long)]
    source: PathBuf,
    /// Target image (PPM).
    #[arg(long)]
    target: PathBuf,
    /// Keypoint file: one "row col" pair per line, # comments allowed.
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CYCLE_THRESHOLD_PX)]
    cycle_threshold: f64,
    /// Directory for per-keypoint heatmap exports (PGM), display
    /// normalized with this sigma.
    #[arg(long)]
    export_heatmaps: Option<PathBuf>,
    #[arg(long, default_value_t = 20.0)]
    heatmap_sigma: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::InvalidArgument(_) | CoreError::InvalidConfig(_) => 1,
        CoreError::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success
            if e.use_stderr() {
                eprintln!("{}", e);
                return ExitCode::from(1);
            }
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
    };

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: failed to size thread pool: {}", e);
            return ExitCode::from(1);
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            match err.downcast_ref::<CoreError>() {
                Some(core) => ExitCode::from(exit_code_for(core)),
                None => ExitCode::from(1),
            }
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(args) => {
            let config = SynthConfig {
                mode: GenMode::parse(&args.mode)?,
                height: args.height,
                width: args.width,
                train_pairs: args.train_pairs,
                val_pairs: args.val_pairs,
                test_pairs: args.test_pairs,
                grid_step: args.grid_step,
                octaves: args.octaves,
                bounds: HomographyBounds {
                    max_rotation_deg: args.max_rotation_deg,
                    max_translation_frac: args.max_translation_frac,
                    max_perspective: args.max_perspective,
                    max_scale_jitter: args.max_scale_jitter,
                },
                photometric_jitter: args.jitter,
                seed: cli.seed.unwrap_or(7),
            };
            let out = out_dir(&cli.out);
            build_dataset(&config, &out)?;
            println!(
                "wrote {} pairs ({} train / {} val / {} test) to {}",
                config.train_pairs + config.val_pairs + config.test_pairs,
                config.train_pairs,
                config.val_pairs,
                config.test_pairs,
                out.display()
            );
            Ok(())
        }

        Command::Train(args) => {
            let file = match &cli.config {
                Some(path) => FileConfig::load(path)?,
                None => FileConfig::default(),
            };
            let mut config = {
                let mut f = file;
                if let Some(dataset) = &args.dataset {
                    f.train.dataset = dataset.display().to_string();
                }
                if let Some(loss) = &args.loss {
                    LossKind::parse(loss)?;
                    f.train.loss = loss.clone();
                }
                if let Some(max_steps) = args.max_steps {
                    f.train.max_steps = max_steps;
                }
                f.to_train_config()?
            };
            if let Some(seed) = cli.seed {
                config.seed = seed;
                config.backbone.seed = seed;
            }
            if config.dataset.as_os_str().is_empty() {
                return Err(CoreError::InvalidConfig(
                    "no dataset given (use --dataset or the config file)".into(),
                )
                .into());
            }
            let out = out_dir(&cli.out);
            let outcome = train(&config, &out)?;
            println!(
                "trained {} steps; best checkpoint {}; log {}",
                outcome.steps_completed,
                outcome.best_checkpoint.display(),
                outcome.log_path.display()
            );
            if let (Some(initial), Some(best)) = (outcome.initial_val_pck5, outcome.best_val_pck5) {
                println!("val pck@5: {} (initial) -> {} (best)", initial, best);
            }
            Ok(())
        }

        Command::Evaluate(args) => {
            let keypoints = parse_keypoint_source(&args.keypoints)?;
            let thresholds = parse_thresholds(&args.thresholds)?;
            let settings = EvalSettings {
                keypoints,
                thresholds,
                cycle_threshold_px: args.cycle_threshold,
                inlier_threshold_px: args.inlier_threshold,
            };
            let split = Split::parse(&args.split)?;
            let report = evaluate(&args.checkpoint, &args.dataset, split, &settings)?;
            let out = out_dir(&cli.out);
            std::fs::create_dir_all(&out).map_err(|e| CoreError::io(&out, e))?;
            let report_path = out.join("report.txt");
            write_report(&report_path, &report)?;
            print!("{}", densedesc_core::eval::format_report(&report));
            println!("# wall_time_s {:.3}", report.wall_time_s);
            println!("# report written to {}", report_path.display());
            Ok(())
        }

        Command::Match(args) => {
            let net = load_checkpoint(&args.checkpoint)?;
            let source_img = read_ppm(&args.source)?;
            let target_img = read_ppm(&args.target)?;
            let keypoints = read_keypoints(&args.keypoints)?;
            let source_map = net.forward(&densedesc_core::eval::adapt_image(&net, &source_img)?)?;
            let target_map = net.forward(&densedesc_core::eval::adapt_image(&net, &target_img)?)?;
            let records = dense_match(&source_map, &target_map, &keypoints, args.cycle_threshold)?;

            let out = out_dir(&cli.out);
            std::fs::create_dir_all(&out).map_err(|e| CoreError::io(&out, e))?;
            let match_path = out.join("matches.txt");
            write_match_file(
                &match_path,
                &args.source.display().to_string(),
                &args.target.display().to_string(),
                args.cycle_threshold,
                &records,
            )?;
            let accepted = records.iter().filter(|r| r.accepted).count();
            println!(
                "{} queries, {} accepted by cycle consistency; matches written to {}",
                records.len(),
                accepted,
                match_path.display()
            );

            if let Some(dir) = &args.export_heatmaps {
                std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
                for (i, kp) in keypoints.iter().enumerate() {
                    let descriptor = sample_descriptor(&source_map, *kp)?;
                    let heatmap = poi_conv(&descriptor, &target_map)?;
                    let display = display_normalize(&heatmap, args.heatmap_sigma)?;
                    let path = dir.join(format!("heatmap_{:04}_r{}_c{}.pgm", i, kp.row, kp.col));
                    write_heatmap_pgm(&path, &display)?;
                }
                println!("wrote {} heatmaps to {}", keypoints.len(), dir.display());
            }
            Ok(())
        }

        Command::Gradcheck => {
            let results = densedesc_core::gradcheck::run_all(cli.seed.unwrap_or(2024))?;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{}: {} (max rel err {:.3e}, {} elements)",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.checked_elements
                );
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(CoreError::Numerical(format!(
                    "{} of {} gradient checks failed",
                    failed,
                    results.len()
                ))
                .into());
            }
            println!("all {} gradient checks passed", results.len());
            Ok(())
        }

        Command::InspectCheckpoint(args) => {
            let info = inspect_checkpoint(&args.checkpoint)?;
            println!("file {}", args.checkpoint.display());
            println!("format_version {}", info.version);
            println!("file_bytes {}", info.file_bytes);
            println!("input_channels {}", info.config.input_channels);
            println!("descriptor_length {}", info.config.descriptor_length);
            println!(
                "layers_per_block {}",
                info.config
                    .layers_per_block
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            );
            println!("growth_rate {}", info.config.growth_rate);
            println!("downsample_levels {}", info.config.downsample_levels);
            println!("activation_slope {}", info.config.activation_slope);
            println!("init_seed {}", info.config.seed);
            println!("receptive_field_px {}", receptive_field(&info.config));
            println!("parameter_count {}", info.parameter_count);
            for (name, shape) in &info.parameters {
                println!(
                    "parameter {} {}",
                    name,
                    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
                );
            }
            Ok(())
        }
    }
}

fn parse_keypoint_source(s: &str) -> Result<KeypointSource, CoreError> {
    if s == "stored" {
        return Ok(KeypointSource::Stored);
    }
    if let Some(step) = s.strip_prefix("grid:") {
        let step: usize = step.parse().map_err(|_| {
            CoreError::InvalidArgument(format!("bad grid step in keypoint source {:?}", s))
        })?;
        if step == 0 {
            return Err(CoreError::InvalidArgument("grid step must be >= 1".into()));
        }
        return Ok(KeypointSource::Grid { step });
    }
    Err(CoreError::InvalidArgument(format!(
        "keypoint source {:?} not understood (grid:<step> | stored)",
        s
    )))
}

fn parse_thresholds(s: &str) -> Result<Vec<f64>, CoreError> {
    let out: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CoreError::InvalidArgument(format!("bad threshold list {:?}", s)))?;
    if out.is_empty() || out.iter().any(|v| *v < 0.0) {
        return Err(CoreError::InvalidArgument("thresholds must be nonnegative".into()));
    }
    Ok(out)
}

fn read_keypoints(path: &PathBuf) -> Result<Vec<PixelLoc>, CoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CoreError::data(path, format!("bad keypoint line: {}", line)))?;
        if fields.len() != 2 {
            return Err(CoreError::data(path, format!("bad keypoint line: {}", line)));
        }
        out.push(PixelLoc::new(fields[0], fields[1]));
    }
    if out.is_empty() {
        return Err(CoreError::data(path, "no keypoints in file"));
    }
    Ok(out)
}
