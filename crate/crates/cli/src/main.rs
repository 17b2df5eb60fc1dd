//! `spectfield` command-line driver. Every stage reads and writes under
//! `--out`, so stages can be run one at a time or all at once with
//! `pipeline`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spectfield::interp::Regime;
use spectfield::pipeline::{layout, run_pipeline_with, ExperimentConfig, Run};
use spectfield::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_NUMERIC: u8 = 5;
const EXIT_IO: u8 = 6;

#[derive(Parser)]
#[command(name = "spectfield", version, about = "Sparse-view SPECT with per-scan coordinate networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); built-in desk defaults if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Down-sampling factors, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    df: Option<Vec<usize>>,
    /// Output directory; every artifact path is relative to it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict `recon` to one regime: full, partial, linint, nerf (alias field).
    #[arg(long, global = true)]
    regime: Option<Regime>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Start from the full-size preset instead of the desk defaults.
    #[arg(long, global = true)]
    full_size: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq)]
enum Command {
    /// Build the phantom volumes and masks.
    Phantom,
    /// Simulate the multi-window scan from the phantom.
    Simulate,
    /// Fit one field model per DF to the measured views.
    Train,
    /// Evaluate trained models at the skipped views.
    Synthesize,
    /// Linearly interpolate the skipped views.
    Interp,
    /// OSEM reconstructions for every regime and DF.
    Recon,
    /// Metrics table, profiles and summary.
    Evaluate,
    /// All of the above in order.
    Pipeline,
    /// Print the effective configuration as JSON.
    Config,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None if c.full_size => ExperimentConfig::full_size(),
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.df {
        cfg.dfs = d.clone();
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => EXIT_FORMAT,
        Error::NumericFailure(_) => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_IO,
        Error::Stage { .. } => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.common)?;
    if cli.command == Command::Config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    if cli.command == Command::Pipeline {
        let manifest = run_pipeline_with(&cfg, |stage| eprintln!("[{stage}]"))?;
        println!("{} artifacts, manifest at {}", manifest.artifacts.len(), cfg.out_dir.join(layout::MANIFEST).display());
        return summarize(&cfg);
    }

    let mut run = Run::open(&cfg)?;
    match cli.command {
        Command::Phantom => {
            let ph = run.phantom().map_err(|e| e.in_stage("phantom"))?;
            println!("phantom: {} VOIs, total activity {:.4}", ph.masks.len(), ph.activity.sum());
        }
        Command::Simulate => {
            let ph = run.load_phantom().map_err(|e| e.in_stage("simulate"))?;
            let sim = run.simulate(&ph).map_err(|e| e.in_stage("simulate"))?;
            println!("simulate: {:.0} photopeak counts", sim.full_scan.window_sum(0));
        }
        Command::Train => {
            let sim = run.load_simulation().map_err(|e| e.in_stage("train"))?;
            for &df in &cfg.dfs {
                if df == 1 {
                    continue;
                }
                let measured = run.measured(&sim, df).map_err(|e| e.in_stage("train"))?;
                eprintln!("[train df{df}]");
                let (_, report) = run.train(&measured, df).map_err(|e| e.in_stage("train"))?;
                println!(
                    "train df{df}: best epoch {} val loss {:.6e} ({:.1} s)",
                    report.best_epoch,
                    report.best_val_loss(),
                    report.wall_time_s
                );
            }
        }
        Command::Synthesize => {
            for &df in cfg.dfs.iter().filter(|&&d| d > 1) {
                let (model, upsample) = run.load_model(df).map_err(|e| e.in_stage("synthesize"))?;
                let s = run.synthesize(&model, upsample, df).map_err(|e| e.in_stage("synthesize"))?;
                println!("synthesize df{df}: {} views", s.n_stack_views());
            }
        }
        Command::Interp => {
            for &df in cfg.dfs.iter().filter(|&&d| d > 1) {
                let measured = run.load_stack(&layout::measured(df)).map_err(|e| e.in_stage("interp"))?;
                let s = run.interpolate(&measured, df).map_err(|e| e.in_stage("interp"))?;
                println!("interp df{df}: {} views", s.n_stack_views());
            }
        }
        Command::Recon => recon(&mut run, cli.common.regime).map_err(|e| e.in_stage("recon"))?,
        Command::Evaluate => {
            let ph = run.load_phantom().map_err(|e| e.in_stage("evaluate"))?;
            let sim = run.load_simulation().map_err(|e| e.in_stage("evaluate"))?;
            run.evaluate(&ph, &sim).map_err(|e| e.in_stage("evaluate"))?;
            run.save_manifest()?;
            return summarize(&cfg);
        }
        Command::Pipeline | Command::Config => unreachable!(),
    }
    run.save_manifest()
}

fn recon(run: &mut Run<'_>, only: Option<Regime>) -> Result<(), Error> {
    let ph = run.load_phantom()?;
    let sim = run.load_simulation()?;
    let wanted = |r: Regime| only.is_none_or(|o| o == r);
    if wanted(Regime::Full) {
        eprintln!("[recon full]");
        run.reconstruct(&ph, &sim, Regime::Full, 1, None)?;
    }
    for df in run.config.dfs.clone() {
        for regime in Regime::SPARSE.into_iter().filter(|&r| wanted(r)) {
            if df == 1 && regime != Regime::Partial {
                continue;
            }
            let synth = match regime {
                Regime::Linint | Regime::Nerf => Some(run.load_stack(&layout::synthesized(df, regime))?),
                _ => None,
            };
            eprintln!("[recon df{df} {regime}]");
            run.reconstruct(&ph, &sim, regime, df, synth.as_ref())?;
        }
    }
    Ok(())
}

/// Sphere RCNR and synthesized-view NRMSD per DF, read back from the table.
fn summarize(cfg: &ExperimentConfig) -> Result<(), Error> {
    let path = cfg.out_dir.join(layout::METRICS_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let report: spectfield::metrics::MetricsReport = serde_json::from_str(&text)?;
    for r in &report.rows {
        match (r.voi.as_str(), r.rcnr, r.nrmsd) {
            ("projections", _, Some(n)) => println!("df{} {:<8} projections nrmsd {:.4}", r.df, r.regime.name(), n),
            (voi, Some(rcnr), _) if r.regime != Regime::Full => {
                println!("df{} {:<8} {:<14} ar {:.3} rcnr {:.1}%", r.df, r.regime.name(), voi, r.ar.unwrap_or(f64::NAN), rcnr)
            }
            _ => {}
        }
    }
    Ok(())
}
