//! `odverify`: dataset generation, detector training, and robustness
//! verification from the command line.
//!
//! Exit codes follow the verdict: 0 verified, 1 falsified, 2 unknown or
//! attack without a witness, 64 usage errors, 70 runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use odverify_core::bounds::ibp_box;
use odverify_core::encoder::{encode_query, AttackKind, EncodeOptions, VerificationQuery};
use odverify_core::falsifier::{pgd_search, PgdConfig};
use odverify_core::harness::dataset::{gen_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, ShapeClass};
use odverify_core::harness::report::{emit_report, ReportContext};
use odverify_core::harness::sweep::{epsilon_sweep, SweepMode, SweepRequest, SweepResult};
use odverify_core::harness::trainer::{load_meta, save_detector, train, DetectorConfig, DetectorMeta};
use odverify_core::model_io::load_model;
use odverify_core::verifier::{outcome_json, verify, Verdict, VerifierConfig};
use odverify_core::{ComputeGraph, Tensor};

const EXIT_USAGE: u8 = 64;
const EXIT_RUNTIME: u8 = 70;

fn parse_tau(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("tau {v} must lie strictly between 0 and 1"))
    }
}

fn parse_epsilon(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("epsilon {v} must be finite and non-negative"))
    }
}

fn parse_slope(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("slope {v} must be finite and positive"))
    }
}

fn parse_timeout(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("timeout {v} must be finite and positive"))
    }
}

#[derive(Parser)]
#[command(name = "odverify", version, about = "Robustness verification for small object detectors")]
struct Cli {
    /// Seed for dataset generation, training, and attack restarts.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Per-query time budget in seconds.
    #[arg(long, global = true, default_value_t = 60.0, value_parser = parse_timeout)]
    timeout: f64,
    /// IoU threshold for a correct localization.
    #[arg(long, global = true, default_value_t = 0.5, value_parser = parse_tau)]
    tau: f64,
    /// L-infinity perturbation radius.
    #[arg(long, global = true, default_value_t = 1e-3, value_parser = parse_epsilon)]
    epsilon: f64,
    /// Sigmoid steepness used by the matching and count heads.
    #[arg(long, global = true, default_value_t = 1000.0, value_parser = parse_slope)]
    slope: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic detection dataset.
    GenData(GenDataArgs),
    /// Train a small detector on a generated dataset.
    Train(TrainArgs),
    /// Decide a robustness query: attack, bound, then branch and bound.
    Verify(VerifyArgs),
    /// Run only the gradient attack and report the best point found.
    Attack(AttackArgs),
    /// Verify across a range of epsilons and bracket the transition.
    Sweep(SweepArgs),
    /// Write the query in VNN-LIB text form.
    ExportVnnlib(ExportArgs),
    /// Verify and emit the JSON report plus overlay images.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images.bin and annotations.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Objects per image.
    #[arg(long, default_value_t = 1)]
    objects: usize,
    /// Background noise amplitude.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 5)]
    side_min: usize,
    #[arg(long, default_value_t = 8)]
    side_max: usize,
    /// Shape classes to draw, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [ShapeClass::Square, ShapeClass::Cross, ShapeClass::Diagonal])]
    shapes: Vec<ShapeClass>,
    /// Let object boxes overlap.
    #[arg(long)]
    allow_overlap: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Model stem; writes STEM.json, STEM.bin, and STEM.meta.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1500)]
    epochs: usize,
    /// Gradient step size.
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Conv channels per layer, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [4usize])]
    conv: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 2)]
    stride: usize,
    /// Predicted box slots.
    #[arg(long, default_value_t = 1)]
    boxes: usize,
}

/// Flags shared by every query-shaped subcommand.
#[derive(Args)]
struct QueryArgs {
    /// Model stem from train.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Sample index inside the dataset.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// mislocalization, misclassification, or misdetection.
    #[arg(long)]
    kind: AttackKind,
    /// Restrict the perturbation to these flat pixel indices.
    #[arg(long, value_delimiter = ',')]
    pixels: Option<Vec<usize>>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Branch-and-bound worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Attack restarts before bounding.
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Attack steps per restart.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Write the outcome document to this JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print interval bounds of every margin at the root region.
    #[arg(long)]
    dump_bounds: bool,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Override the step size (defaults to epsilon / 10).
    #[arg(long)]
    step_size: Option<f64>,
    /// Soft-min temperature for blending margins; 0 follows the worst one.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Explicit epsilon values; bisection runs when absent.
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write the sweep result to this JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Directory receiving the report JSON and overlays.
    #[arg(long)]
    out_dir: PathBuf,
    /// File-name stem of the emitted artifacts.
    #[arg(long, default_value = "query")]
    label: String,
    /// Attach a bisection sweep to the report.
    #[arg(long)]
    with_sweep: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn run(cli: Cli) -> Result<u8, AnyError> {
    match &cli.command {
        Command::GenData(args) => gen_data(&cli, args),
        Command::Train(args) => train_cmd(&cli, args),
        Command::Verify(args) => verify_cmd(&cli, args),
        Command::Attack(args) => attack_cmd(&cli, args),
        Command::Sweep(args) => sweep_cmd(&cli, args),
        Command::ExportVnnlib(args) => export_cmd(&cli, args),
        Command::Report(args) => report_cmd(&cli, args),
    }
}

fn gen_data(cli: &Cli, args: &GenDataArgs) -> Result<u8, AnyError> {
    let config = DatasetConfig {
        height: args.height,
        width: args.width,
        shapes: args.shapes.clone(),
        objects_per_image: args.objects,
        noise_amplitude: args.noise,
        samples: args.samples,
        side_min: args.side_min,
        side_max: args.side_max,
        non_overlap: !args.allow_overlap,
        seed: cli.seed,
    };
    let dataset = gen_dataset(&config)?;
    save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} samples of {}x{} to {}",
        config.samples,
        config.height,
        config.width,
        args.out.display()
    );
    Ok(0)
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> Result<u8, AnyError> {
    let dataset = load_dataset(&args.data)?;
    let config = DetectorConfig {
        conv_channels: args.conv.clone(),
        kernel_size: args.kernel,
        stride: args.stride,
        boxes: args.boxes,
        learning_rate: args.lr,
        epochs: args.epochs,
        seed: cli.seed,
    };
    let (detector, report) = train(&config, &dataset)?;
    save_detector(&detector, &config, &report, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("model written to {}", args.out.display());
    Ok(0)
}

/// A loaded model + dataset sample, ready to encode.
struct LoadedQuery {
    graph: ComputeGraph,
    meta: DetectorMeta,
    image: Tensor,
    gts: odverify_core::GroundTruthSet,
}

fn load_query_inputs(args: &QueryArgs) -> Result<LoadedQuery, AnyError> {
    let graph = load_model(&args.model.with_extension("json"))?;
    let meta = load_meta(&args.model)?;
    let dataset: Dataset = load_dataset(&args.data)?;
    if args.sample >= dataset.images.len() {
        return Err(format!(
            "sample {} out of range; dataset has {} samples",
            args.sample,
            dataset.images.len()
        )
        .into());
    }
    Ok(LoadedQuery {
        graph,
        meta,
        image: dataset.images[args.sample].clone(),
        gts: dataset.annotations[args.sample].clone(),
    })
}

fn encode(cli: &Cli, args: &QueryArgs, loaded: &LoadedQuery) -> Result<VerificationQuery, AnyError> {
    let options = EncodeOptions {
        pixels: args.pixels.clone(),
        clip01: true,
    };
    Ok(encode_query(
        args.kind,
        &loaded.graph,
        &loaded.meta.head,
        &loaded.image,
        &loaded.gts,
        cli.epsilon,
        cli.tau,
        cli.slope,
        Duration::from_secs_f64(cli.timeout),
        &options,
    )?)
}

fn verifier_config(cli: &Cli, workers: usize, restarts: usize, steps: usize) -> VerifierConfig {
    VerifierConfig {
        workers,
        pgd: PgdConfig {
            steps,
            restarts,
            seed: cli.seed,
            ..PgdConfig::default()
        },
        ..VerifierConfig::default()
    }
}

fn print_outcome(verdict: &Verdict) {
    println!("verdict: {}", verdict.category());
    match verdict {
        Verdict::Falsified { margins, .. } => {
            for (name, value) in margins {
                println!("margin {name}: {value:.6e}");
            }
        }
        Verdict::Unknown { reason } => {
            println!("reason: {}", serde_json::to_value(reason).unwrap().as_str().unwrap());
        }
        Verdict::Verified => {}
    }
}

fn verify_cmd(cli: &Cli, args: &VerifyArgs) -> Result<u8, AnyError> {
    let loaded = load_query_inputs(&args.query)?;
    let query = encode(cli, &args.query, &loaded)?;
    if args.dump_bounds {
        let bounds = ibp_box(&query.graph, &query.region.bounds())?;
        for c in &query.constraints {
            let (lo, hi) = bounds.scalar(c.node);
            println!("bounds {}: [{lo:.6e}, {hi:.6e}]", c.name);
        }
    }
    let config = verifier_config(cli, args.workers, args.restarts, args.steps);
    let outcome = verify(&query, &config)?;
    print_outcome(&outcome.verdict);
    println!(
        "subproblems: {}  wall time: {} ms",
        outcome.stats.subproblems, outcome.stats.wall_time_ms
    );
    if let Some(path) = &args.out {
        let doc = outcome_json(&query, &outcome, &config);
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        std::fs::write(path, text)?;
        println!("outcome written to {}", path.display());
    }
    Ok(outcome.verdict.exit_code() as u8)
}

fn attack_cmd(cli: &Cli, args: &AttackArgs) -> Result<u8, AnyError> {
    let loaded = load_query_inputs(&args.query)?;
    let query = encode(cli, &args.query, &loaded)?;
    let config = PgdConfig {
        steps: args.steps,
        restarts: args.restarts,
        step_size: args.step_size,
        temperature: args.temperature,
        seed: cli.seed,
    };
    let deadline = Instant::now() + Duration::from_secs_f64(cli.timeout);
    let report = pgd_search(&query, &config, Some(deadline))?;
    println!("evaluations: {}", report.evaluations);
    match &report.witness {
        Some(witness) => {
            println!("violation found at restart {} step {}", witness.restart, witness.step);
            for (name, value) in &witness.margins {
                println!("margin {name}: {value:.6e}");
            }
            Ok(1)
        }
        None => {
            println!("no violation; best margin {:.6e}", report.best_margin);
            Ok(2)
        }
    }
}

fn sweep_cmd(cli: &Cli, args: &SweepArgs) -> Result<u8, AnyError> {
    let loaded = load_query_inputs(&args.query)?;
    let request = SweepRequest {
        kind: args.query.kind,
        model: &loaded.graph,
        head: &loaded.meta.head,
        image: &loaded.image,
        gts: &loaded.gts,
        tau: cli.tau,
        slope: cli.slope,
        timeout_per_query: Duration::from_secs_f64(cli.timeout),
        encode: EncodeOptions {
            pixels: args.query.pixels.clone(),
            clip01: true,
        },
        verifier: verifier_config(cli, args.workers, 10, 200),
    };
    let mode = match &args.eps {
        Some(values) => SweepMode::List(values.clone()),
        None => SweepMode::Bisect,
    };
    let result = epsilon_sweep(&request, mode)?;
    print_sweep(&result);
    if let Some(path) = &args.out {
        let mut text = serde_json::to_string_pretty(&result)?;
        text.push('\n');
        std::fs::write(path, text)?;
        println!("sweep written to {}", path.display());
    }
    Ok(0)
}

fn print_sweep(result: &SweepResult) {
    for point in &result.points {
        let category = serde_json::to_value(point.category).unwrap();
        println!("epsilon {:>12.6e}  {}", point.epsilon, category.as_str().unwrap());
    }
    match result.transition() {
        Some((lo, hi)) => println!("transition: verified at {lo:.6e}, falsified at {hi:.6e}"),
        None => println!("transition: not bracketed"),
    }
}

fn export_cmd(cli: &Cli, args: &ExportArgs) -> Result<u8, AnyError> {
    let loaded = load_query_inputs(&args.query)?;
    let query = encode(cli, &args.query, &loaded)?;
    let text = odverify_core::vnnlib::export_vnnlib(&query);
    match &args.out {
        Some(path) => {
            std::fs::write(path, text)?;
            println!("query written to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(0)
}

fn report_cmd(cli: &Cli, args: &ReportArgs) -> Result<u8, AnyError> {
    let loaded = load_query_inputs(&args.query)?;
    let query = encode(cli, &args.query, &loaded)?;
    let config = verifier_config(cli, args.workers, 10, 200);
    let outcome = verify(&query, &config)?;
    print_outcome(&outcome.verdict);

    let sweep = if args.with_sweep {
        let request = SweepRequest {
            kind: args.query.kind,
            model: &loaded.graph,
            head: &loaded.meta.head,
            image: &loaded.image,
            gts: &loaded.gts,
            tau: cli.tau,
            slope: cli.slope,
            timeout_per_query: Duration::from_secs_f64(cli.timeout),
            encode: EncodeOptions {
                pixels: args.query.pixels.clone(),
                clip01: true,
            },
            verifier: config.clone(),
        };
        Some(epsilon_sweep(&request, SweepMode::Bisect)?)
    } else {
        None
    };

    let ctx = ReportContext {
        label: &args.label,
        image: &loaded.image,
        gts: &loaded.gts,
        query_doc: outcome_json(&query, &outcome, &config),
        outcome: &outcome,
        sweep: sweep.as_ref(),
    };
    let paths = emit_report(&args.out_dir, &ctx)?;
    println!("report: {}", paths.json.display());
    println!("clean overlay: {}", paths.clean_image.display());
    if let Some(witness) = &paths.witness_image {
        println!("witness overlay: {}", witness.display());
    }
    println!("canonical sha256: {}", paths.canonical_sha256);
    Ok(outcome.verdict.exit_code() as u8)
}
