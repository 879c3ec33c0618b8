use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bbalpha::optim::AlphaSetting;
use bbalpha_cli::commands::{
    cmd_analytic, cmd_bias, cmd_divergence, cmd_gen_toy, cmd_toy_predictive, cmd_train, default_analytic_grid,
    write_dataset_csv, write_rows, write_train_artifacts, ToyConfig,
};
use bbalpha_cli::{CliError, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bbalpha", version, about = "Black-box alpha-divergence minimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on repeated random splits; writes report.json, metrics.csv and posteriors.
    Train {
        config: PathBuf,
        /// Output directory (default: `output_dir` from the config, else `./<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain, then measure gradient bias and variance against K.
    Bias {
        config: PathBuf,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form tied-site solutions of the two-point examples.
    Analytic {
        #[arg(long, default_value_t = 1)]
        example: u8,
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        /// Comma-separated α grid in (0, 2).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predictive mean and spread on the cubic toy problem for several α.
    ToyPredictive {
        /// Comma-separated α values (numbers or `vb`).
        #[arg(long, value_delimiter = ',', value_parser = parse_alpha)]
        alphas: Option<Vec<AlphaSetting>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// TOML file with any `ToyConfig` fields; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the cubic toy data set as `x,y`.
    GenToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate D_α[p‖q] between two diagonal Gaussians.
    Divergence {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        p_mean: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        p_var: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        q_mean: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        q_var: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_alpha(s: &str) -> Result<AlphaSetting, String> {
    if s.eq_ignore_ascii_case("vb") {
        return Ok(AlphaSetting::VB);
    }
    s.parse::<f64>().map(AlphaSetting::Value).map_err(|_| format!("{s:?} is neither a number nor \"vb\""))
}

/// Buffer the whole output, then write it to `out` or stdout.
fn emit(out: Option<&Path>, f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    f(&mut buf)
        .map_err(|e| CliError::Format { path: out.map_or("<stdout>".into(), Into::into), message: e.to_string() })?;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            std::fs::write(p, &buf).map_err(|e| CliError::io(p, e))
        }
        None => std::io::stdout().write_all(&buf).map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(&cfg.name));
            let run = cmd_train(&cfg)?;
            write_train_artifacts(&run, &dir, cfg.protocol.save_posteriors)?;
            for a in &run.report.aggregates {
                eprintln!(
                    "{:>8}  test LL {:.4} ± {:.4}  test error {:.4} ± {:.4}  rank {:.2}/{:.2}",
                    a.method,
                    a.test_ll_mean,
                    a.test_ll_se,
                    a.test_error_mean,
                    a.test_error_se,
                    a.rank_ll_mean,
                    a.rank_error_mean
                );
            }
            eprintln!("wrote {}", dir.display());
        }
        Command::Bias { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let run = cmd_bias(&cfg)?;
            let mut buf = Vec::new();
            run.report.write_csv(&mut buf)?;
            match &out {
                Some(p) => std::fs::write(p, &buf).map_err(|e| CliError::io(p, e))?,
                None => std::io::stdout().write_all(&buf).map_err(|e| CliError::io("<stdout>", e))?,
            }
            eprintln!("{}", run.summary_line());
        }
        Command::Analytic { example, sigma2, alphas, out } => {
            let rows = cmd_analytic(&alphas.unwrap_or_else(default_analytic_grid), example, sigma2)?;
            emit(out.as_deref(), |w| write_rows(w, &rows))?;
        }
        Command::ToyPredictive { alphas, seed, epochs, config, out } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                    toml::from_str(&text).map_err(|e| CliError::Config { path: p.clone(), message: e.to_string() })?
                }
                None => ToyConfig::default(),
            };
            cfg.alphas = alphas.unwrap_or(cfg.alphas);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            let run = cmd_toy_predictive(&cfg)?;
            emit(out.as_deref(), |w| write_rows(w, &run.rows))?;
            for s in &run.summaries {
                eprintln!(
                    "alpha {:<8} mean predictive std {:.4}  train RMSE vs x^3 {:.3}",
                    s.alpha, s.mean_std, s.train_rmse_vs_cubic
                );
            }
        }
        Command::GenToy { seed, n, out } => {
            if n == 0 {
                return Err(CliError::Usage("n must be positive".into()));
            }
            let data = cmd_gen_toy(seed, n);
            emit(out.as_deref(), |w| write_dataset_csv(w, &data))?;
        }
        Command::Divergence { p_mean, p_var, q_mean, q_var, alphas, out } => {
            let rows = cmd_divergence(&p_mean, &p_var, &q_mean, &q_var, &alphas)?;
            emit(out.as_deref(), |w| write_rows(w, &rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { bbalpha_cli::error::EXIT_CONFIG } else { bbalpha_cli::error::EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
