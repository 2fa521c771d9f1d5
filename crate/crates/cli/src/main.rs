//! `featalign`: drives the distillation experiments from one JSON config.
//!
//! Exit codes: 0 success, 1 runtime failure (or a failed gradient check),
//! 2 invalid config or usage, 3 missing input artifact. Errors go to stderr
//! as a single `error kind=... path=... msg=...` line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use featalign::config::RunConfig;
use featalign::metrics::MetricsReport;
use featalign::pipeline;
use featalign::Error;

#[derive(Parser)]
#[command(name = "featalign", version, about = "Feature-alignment distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON). Omitted sections and fields take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides `output.run_dir`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the synthetic corpus into <run_dir>/data.
    GenData(Common),
    /// Train the teacher on the corpus.
    TrainTeacher(Common),
    /// Distill a student from the trained teacher.
    Distill(Common),
    /// Evaluate a checkpoint (default: the run's student).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of the configured objective on tiny models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Run the three-arm ablation over `ablation.n_seeds` seeds.
    Ablate(Common),
}

fn load_config(common: &Common) -> featalign::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_json("{}")?,
    };
    if let Some(dir) = &common.run_dir {
        cfg.output.run_dir = dir.clone();
    }
    Ok(cfg)
}

fn print_metrics(label: &str, m: &MetricsReport) {
    println!(
        "{label}: perplexity={:.4} bleu={:.4} rouge_l_f1={:.4} cer={:.4}",
        m.perplexity, m.bleu, m.rouge_l_f1, m.cer
    );
}

fn run(command: Command) -> featalign::Result<ExitCode> {
    match command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let m = pipeline::gen_data(&cfg)?;
            println!(
                "wrote {} train / {} eval sequences to {} (perplexity floor {:.4})",
                m.n_train,
                m.n_eval,
                pipeline::RunDir::new(&cfg.output.run_dir).data().display(),
                m.perplexity_floor
            );
        }
        Command::TrainTeacher(common) => {
            let cfg = load_config(&common)?;
            print_metrics("teacher", &pipeline::run_train_teacher(&cfg)?);
        }
        Command::Distill(common) => {
            let cfg = load_config(&common)?;
            print_metrics("student", &pipeline::run_distill(&cfg)?);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (path, m) = pipeline::run_eval(&cfg, checkpoint.as_deref())?;
            print_metrics("eval", &m);
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { common, seeds } => {
            let cfg = load_config(&common)?;
            if seeds == 0 {
                return Err(featalign::Error::Input("--seeds must be positive".into()));
            }
            let s = pipeline::run_gradcheck(&cfg, seeds)?;
            println!(
                "gradcheck: seeds={seeds} max_rel_error={:.3e} tolerance={:.0e} {}",
                s.max_rel_error,
                s.tolerance,
                if s.passed { "PASS" } else { "FAIL" }
            );
            if !s.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let report = pipeline::run_ablate(&cfg, |arm, r| {
                eprintln!("  {arm} seed {}: perplexity={:.4}", r.seed_index, r.metrics.perplexity);
            })?;
            for arm in &report.arms {
                println!("{}: median perplexity={:.4}", arm.name, arm.median_perplexity);
            }
            println!("joint_beats_both={}", report.joint_beats_both);
            println!(
                "wrote {}",
                Path::new(&cfg.output.run_dir).join("ablation").join(pipeline::ABLATION_FILE).display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

/// One line, `key=value` pairs; `msg` is a quoted, escaped string.
fn error_line(e: &Error) -> String {
    match e {
        Error::Config { path, msg } => format!("error kind=config path={path} msg={msg:?}"),
        Error::MissingArtifact(p) => format!("error kind=missing_artifact path={} msg={:?}", p.display(), e.to_string()),
        Error::Io { path, .. } => format!("error kind=io path={} msg={:?}", path.display(), e.to_string()),
        _ => format!("error kind={} msg={:?}", e.kind(), e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; usage errors exit 2.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
