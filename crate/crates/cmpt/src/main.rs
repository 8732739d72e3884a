//! `cmpt` command-line entry point.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmpt::config::RunConfig;
use cmpt::error::{CliError, CliResult};
use cmpt::pipeline::{self, RunPaths};
use cmpt::report::{self, Format, Report};
use cmpt_core::data::MissingProtocol;

#[derive(Parser)]
#[command(name = "cmpt", version, about = "Cross-modal proxy token training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets a config leaf, e.g. `--set train.lambda=0.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(&self.config, &self.sets, self.seed, self.out.clone())
    }
}

#[derive(Args)]
struct ReportOut {
    /// csv, json or plotdata.
    #[arg(long, default_value = "json")]
    format: String,
    /// Report path; defaults to a file under `<out>/reports/`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Pretrain and freeze one encoder per modality.
    Pretrain(Common),
    /// Train the fused model on the frozen encoders.
    Train(Common),
    /// Evaluate the trained model under missing-modality protocols.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Protocol such as `inference_only:m2`; repeatable. Defaults to the config list.
        #[arg(long = "protocol")]
        protocols: Vec<String>,
        /// Second model checkpoint for per-class F1 deltas.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Sweep the availability of one modality at test time.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Train and evaluate one model per value of the ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        out: ReportOut,
    },
    /// Finite-difference gradient check of a 2-sample model.
    Gradcheck(Common),
    /// Re-render an existing JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: ReportOut,
    },
}

const GRADCHECK_TOL: f64 = 1e-4;

fn init_logging() {
    let level = match std::env::var("CMPT_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") => log::LevelFilter::Info,
        _ => log::LevelFilter::Warn,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .init();
}

fn emit(r: &Report, out: &ReportOut, default: PathBuf) -> CliResult<()> {
    let format: Format = out.format.parse()?;
    let path = out
        .output
        .clone()
        .unwrap_or_else(|| default.with_extension(format.extension()));
    report::write_report(r, format, &path)?;
    log::info!("wrote {}", path.display());
    print_stdout(&report::render(r, format))
}

fn print_stdout(text: &str) -> CliResult<()> {
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(text.as_bytes())
        .and_then(|_| stdout.flush())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(c) => {
            pipeline::gen_data(&c.load()?)?;
        }
        Command::Pretrain(c) => {
            pipeline::pretrain(&c.load()?)?;
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let mut stdout = std::io::stdout().lock();
            pipeline::train(&cfg, &mut stdout)?;
        }
        Command::Eval {
            common,
            protocols,
            compare,
            out,
        } => {
            let cfg = common.load()?;
            let protocols = if protocols.is_empty() {
                cfg.protocols.eval.clone()
            } else {
                protocols
                    .iter()
                    .map(|p| p.parse::<MissingProtocol>().map_err(CliError::from))
                    .collect::<CliResult<Vec<_>>>()?
            };
            let data = pipeline::load_data(&cfg)?;
            let model = pipeline::load_trained(&cfg)?;
            let other = match &compare {
                Some(path) => Some(cmpt::checkpoint::load_model(path)?.0),
                None => None,
            };
            let r = pipeline::eval_report(&cfg, &model, &data.test, &protocols, other.as_ref())?;
            emit(&r, &out, RunPaths::new(&cfg.out_dir).reports().join("eval"))?;
        }
        Command::Sweep { common, jobs, out } => {
            let cfg = common.load()?;
            let data = pipeline::load_data(&cfg)?;
            let model = pipeline::load_trained(&cfg)?;
            let r = pipeline::sweep_report(&cfg, &model, &data.test, jobs)?;
            emit(&r, &out, RunPaths::new(&cfg.out_dir).reports().join("sweep"))?;
        }
        Command::Ablate { common, jobs, out } => {
            let cfg = common.load()?;
            let data = pipeline::load_data(&cfg)?;
            let bases = pipeline::load_bases(&cfg)?;
            let r = pipeline::ablation_report(&cfg, &data, [&bases[0], &bases[1]], jobs)?;
            emit(&r, &out, RunPaths::new(&cfg.out_dir).reports().join("ablation"))?;
        }
        Command::Gradcheck(c) => {
            let err = pipeline::gradcheck(&c.load()?)?;
            print_stdout(&format!("max_rel_error {err:e}\n"))?;
            if !(err < GRADCHECK_TOL) {
                return Err(CliError::GradCheck(err));
            }
        }
        Command::Report { input, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| CliError::io(&input, e))?;
            let r = Report::from_json(&text)?;
            let format: Format = out.format.parse()?;
            match &out.output {
                Some(path) => report::write_report(&r, format, path)?,
                None => print_stdout(&report::render(&r, format))?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERR {}: {e}", e.exit_code());
            ExitCode::from(e.exit_code())
        }
    }
}
