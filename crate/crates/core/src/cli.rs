//! Command-line front end. Exit codes: 0 success, 1 failed check or runtime
//! error, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, Mechanism};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{read_params, Model};
use crate::train::{self, CONFIG_FILE};
use crate::verify::{self, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "couplformer", version, about = "Coupled (Kronecker-factored) attention: checks, cost sweeps, training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run seeded property suites and report the worst error of each
    Verify(VerifyArgs),
    /// Write analytic attention costs over a grid of image sizes as CSV
    Bench(BenchArgs),
    /// Train a classifier; writes config.txt, metrics.csv and checkpoint/
    Train(TrainArgs),
    /// Report a checkpoint's accuracy on a dataset split
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Key-value config file (`key = value` lines, `#` comments)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Random seed (overrides the `seed` key)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: runs/<unix-seconds>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Lemma1,
    Eq6,
    Kron,
    Stochastic,
    Grad,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Suite {
        match s {
            SuiteArg::Lemma1 => Suite::Lemma1,
            SuiteArg::Eq6 => Suite::Eq6,
            SuiteArg::Kron => Suite::Kron,
            SuiteArg::Stochastic => Suite::Stochastic,
            SuiteArg::Grad => Suite::Grad,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Which suite to run
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
    /// Seed for the random cases
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MechanismArg {
    Both,
    Standard,
    Coupled,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated image sizes: `N` for N×N or `HxW`
    #[arg(long, default_value = "32,64,128,256")]
    pub grid: String,
    /// Mechanisms to report
    #[arg(long, value_enum, default_value = "both")]
    pub mechanism: MechanismArg,
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Dataset split to evaluate
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    /// Override one key of the checkpoint's config (e.g. data_dir); repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Verify(a) => run_verify(&a),
        Command::Bench(a) => run_bench(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn resolve_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for pair in &a.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn output_dir(a: &ConfigArgs) -> PathBuf {
    a.out.clone().unwrap_or_else(|| {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Path::new("runs").join(secs.to_string())
    })
}

fn run_verify(a: &VerifyArgs) -> Result<i32> {
    let checks = verify::run(a.suite.into(), a.seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

/// `32,64x48` → `[(32, 32), (64, 48)]`.
pub fn parse_grid(grid: &str) -> Result<Vec<(usize, usize)>> {
    let bad = |s: &str| Error::Config(format!("bad grid entry `{s}`, expected N or HxW"));
    grid.split(',')
        .map(str::trim)
        .map(|s| {
            let (h, w) = s.split_once('x').unwrap_or((s, s));
            match (h.parse(), w.parse()) {
                (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok((h, w)),
                _ => Err(bad(s)),
            }
        })
        .collect()
}

fn run_bench(a: &BenchArgs) -> Result<i32> {
    let cfg = resolve_config(&a.common)?;
    let sizes = parse_grid(&a.grid)?;
    let mechanisms: &[Mechanism] = match a.mechanism {
        MechanismArg::Both => &Mechanism::ALL,
        MechanismArg::Standard => &[Mechanism::Standard],
        MechanismArg::Coupled => &[Mechanism::Coupled],
    };
    let rows = bench::sweep(&sizes, mechanisms, &cfg.model)?;
    let out = output_dir(&a.common);
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let path = out.join("bench.csv");
    let mut file = fs::File::create(&path)?;
    bench::write_csv(&mut file, &rows)?;
    file.flush()?;

    let mut stdout = std::io::stdout().lock();
    bench::write_csv(&mut stdout, &rows)?;
    for r in rows.iter().filter(|r| r.cost.mechanism == Mechanism::Coupled) {
        let g = r.cost.geometry;
        writeln!(
            stdout,
            "# {}x{}: counted FLOPs saving {} vs quoted formula {:.0} (not asserted)",
            g.h,
            g.w,
            bench::counted_flops_saving(g),
            bench::quoted_flops_saving(g.h, g.w, g.d)
        )?;
    }
    writeln!(stdout, "wrote {}", path.display())?;
    Ok(EXIT_OK)
}

fn run_train(a: &TrainArgs) -> Result<i32> {
    let cfg = resolve_config(&a.common)?;
    cfg.validate()?;
    let out = output_dir(&a.common);
    println!("{}", train::METRICS_HEADER);
    let report = train::train_loop(&cfg, &out, |m| println!("{}", m.csv_row()))?;
    println!("initial_loss={:?}", report.initial_loss);
    println!("metrics: {}", report.metrics_path.display());
    println!("checkpoint: {}", report.checkpoint_path.display());
    Ok(EXIT_OK)
}

fn run_eval(a: &EvalArgs) -> Result<i32> {
    let config_path = a.checkpoint.join(crate::model::CHECKPOINT_CONFIG);
    if !config_path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no checkpoint config at {}", config_path.display()),
        )));
    }
    let mut cfg = ExperimentConfig::load(&config_path)?;
    for pair in &a.overrides {
        cfg.set_pair(pair)?;
    }
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    model.load_params(read_params(&a.checkpoint)?)?;
    let (train_set, val_set) = train::load_datasets(&cfg)?;
    let data = match a.split {
        Split::Train => &train_set,
        Split::Val => &val_set,
    };
    let r = train::evaluate(&model, data)?;
    println!("samples={} accuracy={:?} loss={:?}", r.samples, r.accuracy, r.loss);
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("32,64").unwrap(), vec![(32, 32), (64, 64)]);
        assert_eq!(parse_grid("28x14").unwrap(), vec![(28, 14)]);
        assert!(parse_grid("0").is_err());
        assert!(parse_grid("a,b").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["couplformer", "verify", "--suite", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["couplformer", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["couplformer", "train", "--set", "nope=1"]), EXIT_USAGE);
        assert_eq!(run(["couplformer", "--help"]), EXIT_OK);
    }
}
