use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use selfseg::metrics::{dice, emit_report, ReportFormat};
use selfseg::phantom::{generate_all, GenConfig};
use selfseg::pipeline::{run_pipeline, PipelineConfig, RUN_REPORT_FILE};
use selfseg::volume::rvol;
use selfseg::Error;

/// Dual-teacher self-training on synthetic multi-phase phantoms.
#[derive(Parser)]
#[command(name = "selfseg", version)]
struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true, env = "SELFSEG_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four role datasets from a phantom config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Run the full pipeline and print the ablation table.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class Dice between two label volumes.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long = "class")]
        class_id: Option<u8>,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

const EXIT_STAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_COLLISION: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Config(_) | Error::Json { .. } => EXIT_CONFIG,
            Error::Collision(_) => EXIT_COLLISION,
            _ => EXIT_STAGE,
        };
        Failure::new(code, e.to_string())
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| {
        Failure::new(
            EXIT_CONFIG,
            format!("cannot read `{}`: {e}", path.display()),
        )
    })
}

fn gen(config: &Path, out: &Path, overwrite: bool) -> Result<(), Failure> {
    let text = read_config(config)?;
    let cfg: GenConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", config.display())))?;
    cfg.validate()
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", config.display())))?;
    let manifests = generate_all(&cfg, out, overwrite)?;
    for path in manifests.values() {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(config: &Path, out: &Path) -> Result<(), Failure> {
    let text = read_config(config)?;
    let cfg = PipelineConfig::from_json(&text)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", config.display())))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let outcome = run_pipeline(&cfg, base, out)?;
    let table = emit_report(&outcome.report.table, ReportFormat::Markdown)?;
    print!("{table}");
    eprintln!(
        "report: {}",
        outcome.run_dir.join(RUN_REPORT_FILE).display()
    );
    Ok(())
}

fn eval(pred: &Path, truth: &Path, class_id: Option<u8>) -> Result<(), Failure> {
    let read =
        |p: &Path| rvol::read_labels(p).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()));
    let pred = read(pred)?;
    let truth = read(truth)?;
    if pred.dims() != truth.dims() || pred.spacing() != truth.spacing() {
        return Err(Failure::new(
            EXIT_MISMATCH,
            format!("dims {:?} vs {:?}", pred.dims(), truth.dims()),
        ));
    }
    if pred.classes() != truth.classes() {
        return Err(Failure::new(EXIT_MISMATCH, "class tables differ"));
    }
    let ids: Vec<u8> = match class_id {
        Some(c) if pred.classes().contains(c) => vec![c],
        Some(c) => return Err(Failure::new(EXIT_CONFIG, format!("unknown class id {c}"))),
        None => pred.classes().ids().collect(),
    };
    let mut scores = BTreeMap::new();
    for c in ids {
        let name = pred.classes().name(c).unwrap_or_default().to_string();
        scores.insert(name, dice(&pred, &truth, c)?);
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&scores).expect("scores serialize")
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match &cli.command {
        Command::Gen {
            config,
            out,
            overwrite,
        } => gen(config, out, *overwrite),
        Command::Run { config, out } => run(config, out),
        Command::Eval {
            pred,
            truth,
            class_id,
        } => eval(pred, truth, *class_id),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
