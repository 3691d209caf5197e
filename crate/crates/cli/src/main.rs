//! `fgaa`: verification and demo workflows.
//!
//! Exit codes: 0 success, 1 assertion failed or runtime failure, 2 usage,
//! configuration or parse error. Every error goes to stderr as a single
//! line prefixed `error[<kind>]:`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fgaa_core::data::{
    parse_detections, parse_dota, MetricsWriter, RunConfig, DOTA_V1_0, DOTA_V1_5,
};
use fgaa_core::eval::{evaluate, ApMode, GroundTruth};
use fgaa_core::gradcheck::{run_suite, TOLERANCE};
use fgaa_core::model::Detector;
use fgaa_core::params::{count_parameters, reference_scale_report};
use fgaa_core::train::{evaluate_toy, train_toy, window_mean};
use fgaa_core::CoreError;
use fgaa_geometry::{quad_to_obb, rasterize_obbs, rotated_iou, GridSpec, OrientedBox};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile { path: PathBuf, source: CoreError },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Assertion(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Assertion(_) => "assertion",
            CliError::InFile { source, .. } | CliError::Core(source) => match source {
                CoreError::Config(_) | CoreError::Json(_) => "config",
                CoreError::Parse { .. } => "parse",
                CoreError::Io(_) => "io",
                CoreError::Geometry(_) => "geometry",
                _ => "runtime",
            },
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            "assertion" | "runtime" => 1,
            _ => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "fgaa",
    version,
    about = "Foreground-guided, angle-aware pyramid neck: checks, toy training and tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks over every operation and module.
    Gradcheck {
        /// Seed for inputs, weights and sampled coordinates.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train backbone, neck and toy head on seeded synthetic scenes.
    TrainToy(TrainArgs),
    /// Evaluate oriented detections against DOTA annotations.
    Eval(EvalArgs),
    /// Rotated IoU of two boxes given as "cx,cy,w,h,theta" (radians).
    Iou {
        #[arg(long, allow_hyphen_values = true, value_parser = parse_box)]
        a: OrientedBox,
        #[arg(long, allow_hyphen_values = true, value_parser = parse_box)]
        b: OrientedBox,
    },
    /// Rasterize an annotation file onto a feature grid as a PGM mask.
    Rasterize(RasterArgs),
    /// Validate a DOTA annotation file.
    ParseDota {
        /// Annotation file.
        file: PathBuf,
    },
    /// Parameter and multiply-accumulate table for a neck configuration.
    Params {
        /// Run configuration (JSON). Without it the reference-scale preset is
        /// used: C = 256 on 512/1024/2048-wide features, 1024×1024 image.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print only the machine-readable record.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON); missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for config.json, metrics.jsonl and checkpoint.fgaa.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured number of steps (default from config: 300).
    #[arg(long)]
    steps: Option<usize>,
    /// Override the configured seed (default from config: 7).
    #[arg(long)]
    seed: Option<u64>,
    /// Disable FGFM and AAMHA (plain FPN neck).
    #[arg(long)]
    baseline: bool,
    /// Progress line to stderr every N steps; 0 disables.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of DOTA annotation files; the file stem is the image id.
    #[arg(long)]
    annotations: PathBuf,
    /// Detections, one per line: image_id category score x1 y1 ... x4 y4.
    #[arg(long)]
    detections: PathBuf,
    /// AP definition: voc07 (11-point) or all_points.
    #[arg(long, default_value = "voc07")]
    mode: ApMode,
    /// Category vocabulary: v1.0 (15 classes) or v1.5 (16 classes).
    #[arg(long, default_value = "v1.0")]
    vocab: String,
    /// Comma-separated IoU thresholds.
    #[arg(long, default_value = "0.5,0.75", value_delimiter = ',')]
    iou: Vec<f64>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RasterArgs {
    /// DOTA annotation file.
    #[arg(long)]
    annotation: PathBuf,
    /// Feature stride in pixels.
    #[arg(long, default_value_t = 8)]
    stride: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 1024)]
    height: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 1024)]
    width: usize,
    /// Output directory; the mask is written as <stem>_s<stride>.pgm.
    #[arg(long)]
    out: PathBuf,
}

fn parse_box(s: &str) -> std::result::Result<OrientedBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{t}` is not a number"))
        })
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != 5 {
        return Err(format!(
            "expected 5 comma-separated values cx,cy,w,h,theta, got {}",
            v.len()
        ));
    }
    OrientedBox::new(v[0], v[1], v[2], v[3], v[4]).map_err(|e| e.to_string())
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn in_file(path: &Path) -> impl Fn(CoreError) -> CliError + '_ {
    move |source| CliError::InFile {
        path: path.to_path_buf(),
        source,
    }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::from_json(&read(p)?).map_err(in_file(p)),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_gradcheck(seed: u64) -> CliResult<()> {
    let entries = run_suite(seed)?;
    let mut failed = Vec::new();
    for e in &entries {
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<20} max_rel_err={:.3e} {verdict}", e.name, e.max_rel_err);
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks below {TOLERANCE:e}", entries.len());
        Ok(())
    } else {
        Err(CliError::Assertion(format!(
            "gradient check above {TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.baseline {
        cfg = cfg.baseline();
    }
    cfg.validate()?;
    fs::create_dir_all(&args.out).map_err(io_at(&args.out))?;
    let cfg_path = args.out.join("config.json");
    fs::write(&cfg_path, cfg.to_json_pretty() + "\n").map_err(io_at(&cfg_path))?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics = MetricsWriter::new(create(&metrics_path)?, &cfg);
    metrics.write_config(&cfg)?;

    let (model, history) = if cfg.steps == 0 {
        (Detector::from_config(&cfg)?, Vec::new())
    } else {
        let log_every = args.log_every;
        train_toy(&cfg, |r| {
            if log_every > 0 && r.step % log_every == 0 {
                eprintln!(
                    "step {:>5}  l_total {:.4}  l_det {:.4}  l_fg {:.4}  lr {:.2e}",
                    r.step, r.l_total, r.l_det, r.l_fg, r.lr
                );
            }
            metrics.write("step", serde_json::to_value(r).expect("record serializes"))
        })?
    };
    let ckpt_path = args.out.join("checkpoint.fgaa");
    let mut ckpt = create(&ckpt_path)?;
    fgaa_tensor::checkpoint::save_module(&model, &mut ckpt).map_err(CoreError::from)?;
    ckpt.flush().map_err(io_at(&ckpt_path))?;
    if cfg.steps == 0 {
        println!("steps=0: wrote config echo to {}", metrics_path.display());
        return Ok(());
    }

    let eval = evaluate_toy(&model, &cfg)?;
    let totals: Vec<f64> = history.iter().map(|r| r.l_total).collect();
    let first = window_mean(&totals, 0, 10);
    let last = window_mean(&totals, totals.len().saturating_sub(10), 10);
    metrics.write(
        "eval",
        json!({
            "step": cfg.steps,
            "ap50": eval.ap50,
            "dice_p3": eval.dice_p3,
            "num_detections": eval.num_detections,
            "loss_ma_first10": first,
            "loss_ma_last10": last,
            "eval_scenes": cfg.eval_scenes,
        }),
    )?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "toy AP50 {}  P3 dice {}  loss {first:.4} -> {last:.4}  ({} held-out scenes)",
        fmt(eval.ap50),
        fmt(eval.dice_p3),
        cfg.eval_scenes
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let vocab: &[&str] = match args.vocab.as_str() {
        "v1.0" => &DOTA_V1_0,
        "v1.5" => &DOTA_V1_5,
        other => {
            return Err(CliError::Usage(format!(
                "unknown vocabulary `{other}` (expected v1.0 or v1.5)"
            )))
        }
    };
    if args.iou.is_empty() || args.iou.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError::Usage("IoU thresholds must lie in [0, 1]".into()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&args.annotations)
        .map_err(io_at(&args.annotations))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut gts: Vec<GroundTruth> = Vec::new();
    for f in &files {
        let mut ann = parse_dota(&read(f)?).map_err(in_file(f))?;
        ann.image_id = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        gts.extend(ann.ground_truths(vocab).map_err(in_file(f))?);
    }
    let dets =
        parse_detections(&read(&args.detections)?, vocab).map_err(in_file(&args.detections))?;
    let names: Vec<String> = vocab.iter().map(|s| s.to_string()).collect();
    let report = evaluate(&dets, &gts, &names, &args.iou, args.mode);
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(CoreError::from)?
        );
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_rasterize(args: &RasterArgs) -> CliResult<()> {
    let ann = parse_dota(&read(&args.annotation)?).map_err(in_file(&args.annotation))?;
    let boxes: Vec<OrientedBox> = ann
        .objects
        .iter()
        .map(|o| quad_to_obb(&o.points()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| in_file(&args.annotation)(e.into()))?;
    let grid = GridSpec::for_image(args.height, args.width, args.stride)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mask = rasterize_obbs(&boxes, &grid);
    fs::create_dir_all(&args.out).map_err(io_at(&args.out))?;
    let stem = args
        .annotation
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mask".into());
    let path = args.out.join(format!("{stem}_s{}.pgm", args.stride));
    fs::write(&path, mask.to_pgm()).map_err(io_at(&path))?;
    println!(
        "{} ({}x{}, {} foreground cells)",
        path.display(),
        grid.height,
        grid.width,
        mask.count_ones()
    );
    Ok(())
}

fn cmd_parse_dota(file: &Path) -> CliResult<()> {
    let ann = parse_dota(&read(file)?).map_err(in_file(file))?;
    println!("{} objects", ann.objects.len());
    Ok(())
}

fn cmd_params(config: Option<&Path>, json_only: bool) -> CliResult<()> {
    let report = match config {
        None => reference_scale_report()?,
        Some(p) => {
            let cfg = load_config(Some(p))?;
            let c = cfg.channels;
            count_parameters(&cfg.neck(), [2 * c, 4 * c, 8 * c], cfg.image_size)?
        }
    };
    let record = serde_json::to_string(&report).map_err(CoreError::from)?;
    if !json_only {
        print!("{}", report.to_table());
    }
    println!("{record}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::TrainToy(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Iou { a, b } => {
            println!("{:.9}", rotated_iou(&a, &b));
            Ok(())
        }
        Command::Rasterize(a) => cmd_rasterize(&a),
        Command::ParseDota { file } => cmd_parse_dota(&file),
        Command::Params { config, json } => cmd_params(config.as_deref(), json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
