mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bsem_core::diagnostics::{ess, render_summary, SummaryOptions};
use bsem_core::expansion::Parameterization;
use bsem_core::fit::LaplaceMeasure;
use bsem_core::model::GroupEqual;
use bsem_core::run::{fit, write_run, FitConfig, ModelSource, StoredRun};
use bsem_core::sampler::{Convergence, Inits};
use bsem_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

const RUN_DIR_ENV: &str = "BSEM_RUN_DIR";
const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "bsem", version, about = "Bayesian structural equation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a run directory.
    Fit(FitArgs),
    /// Print the posterior summary of a run.
    Summary {
        #[arg(env = RUN_DIR_ENV)]
        run: PathBuf,
        /// Add median, mode and effective sample size columns.
        #[arg(long)]
        extra: bool,
    },
    /// Print fit measures of a run.
    Fitmeasures {
        #[arg(env = RUN_DIR_ENV)]
        run: PathBuf,
        /// Recompute from the stored draws instead of reading the stored values.
        #[arg(long)]
        recompute: bool,
    },
    /// Print convergence details of a run: `inspect [RUN] psrf|neff|inits`.
    Inspect {
        /// Run directory (optional when set in the environment) and the item.
        #[arg(num_args = 1..=2, required = true)]
        args: Vec<String>,
    },
    /// Write SVG trace or autocorrelation plots.
    Plot {
        #[arg(env = RUN_DIR_ENV)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "trace")]
        what: PlotWhat,
        /// 1-based free-parameter range such as `1:4`, or a single index.
        #[arg(long, default_value = "1:4")]
        params: String,
        /// Output directory; defaults to `<run>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InspectWhat {
    Psrf,
    Neff,
    Inits,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PlotWhat {
    Trace,
    Autocorr,
}

#[derive(clap::Args)]
struct FitArgs {
    /// Model file: lavaan-style syntax, or a parameter-table CSV when the
    /// name ends in `.csv`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Column holding group labels.
    #[arg(long)]
    group: Option<String>,
    /// Parameter classes held equal across groups.
    #[arg(long, value_delimiter = ',')]
    group_equal: Vec<String>,
    /// Default-prior override, e.g. `--dp nu="dnorm(5,1e-2)"`.
    #[arg(long = "dp", value_parser = parse_key_val)]
    dp: Vec<(String, String)>,
    #[arg(long, default_value_t = 3)]
    chains: usize,
    #[arg(long, default_value_t = 1000)]
    adapt: usize,
    #[arg(long, default_value_t = 4000)]
    burnin: usize,
    #[arg(long, default_value_t = 10000)]
    sample: usize,
    #[arg(long, default_value = "manual")]
    convergence: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `prior`, `simple`, or a JSON file with one vector per chain.
    #[arg(long, default_value = "prior")]
    inits: String,
    /// Covariance parameterization: `srs` or `fa`.
    #[arg(long, default_value = "srs")]
    cp: String,
    #[arg(long, default_value_t = 1000)]
    ppp_replicates: usize,
    /// `reported` or `sampled`.
    #[arg(long, default_value = "reported")]
    laplace: String,
    /// Run chains one after another on the calling thread.
    #[arg(long)]
    serial: bool,
    /// Run directory to write.
    #[arg(long, env = RUN_DIR_ENV, default_value = "bsem-run")]
    out: PathBuf,
}

fn parse_key_val(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let v = v.trim().trim_matches('"');
    Ok((k.trim().to_string(), v.to_string()))
}

fn parse_inits(s: &str) -> Result<Inits> {
    match s {
        "prior" | "simple" => s.parse(),
        path => {
            let text = std::fs::read_to_string(path)?;
            Ok(Inits::User(serde_json::from_str::<Vec<Vec<f64>>>(&text)?))
        }
    }
}

fn config_from(args: &FitArgs) -> Result<FitConfig> {
    let text = std::fs::read_to_string(&args.model)?;
    let model = if args.model.extension().is_some_and(|e| e == "csv") {
        ModelSource::Table(text)
    } else {
        ModelSource::Syntax(text)
    };
    let mut cfg = FitConfig::new(model);
    cfg.group = args.group.clone();
    cfg.group_equal = args
        .group_equal
        .iter()
        .map(|s| s.parse::<GroupEqual>())
        .collect::<Result<_>>()?;
    cfg.dp = args.dp.clone();
    cfg.cp = args.cp.parse::<Parameterization>()?;
    cfg.sampler.n_chains = args.chains;
    cfg.sampler.adapt = args.adapt;
    cfg.sampler.burnin = args.burnin;
    cfg.sampler.sample = args.sample;
    cfg.sampler.convergence = args.convergence.parse::<Convergence>()?;
    cfg.sampler.seed = args.seed;
    cfg.sampler.inits = parse_inits(&args.inits)?;
    cfg.sampler.threads = !args.serial;
    cfg.fit.seed = args.seed;
    cfg.fit.threads = !args.serial;
    cfg.fit.ppp_replicates = args.ppp_replicates;
    cfg.fit.laplace = args.laplace.parse::<LaplaceMeasure>()?;
    Ok(cfg)
}

fn cmd_fit(args: &FitArgs) -> Result<bool> {
    let cfg = config_from(args)?;
    let r = fit(&cfg, &args.data)?;
    write_run(&args.out, &r)?;
    if r.data.dropped > 0 {
        eprintln!(
            "warning: dropped {} rows with missing values",
            r.data.dropped
        );
    }
    print!("{}", r.summary_text());
    println!();
    print!("{}", r.measures.to_text());
    for w in r.report.warnings.iter().chain(&r.measures.warnings) {
        eprintln!("warning: {w}");
    }
    eprintln!("run written to {}", args.out.display());
    Ok(r.report.converged)
}

fn parse_range(s: &str, k: usize) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad parameter range `{s}`"));
    let (a, b) = match s.split_once(':') {
        Some((a, b)) => (
            a.trim().parse::<usize>().map_err(|_| bad())?,
            b.trim().parse::<usize>().map_err(|_| bad())?,
        ),
        None => {
            let a = s.trim().parse::<usize>().map_err(|_| bad())?;
            (a, a)
        }
    };
    if a == 0 || a > b || b > k {
        return Err(Error::Config(format!(
            "parameter range `{s}` outside 1..={k}"
        )));
    }
    Ok((a - 1..b).collect())
}

fn inspect_target(args: &[String]) -> Result<(PathBuf, InspectWhat)> {
    let (run, what) = match args {
        [run, what] => (PathBuf::from(run), what),
        [what] => {
            let run = std::env::var_os(RUN_DIR_ENV).ok_or_else(|| {
                Error::Config(format!("no run directory given and {RUN_DIR_ENV} is unset"))
            })?;
            (PathBuf::from(run), what)
        }
        _ => {
            return Err(Error::Config(
                "inspect takes a run directory and an item".into(),
            ))
        }
    };
    let what =
        InspectWhat::from_str(what, true).map_err(|e| Error::Config(format!("inspect: {e}")))?;
    Ok((run, what))
}

fn cmd_inspect(run: &Path, what: InspectWhat) -> Result<()> {
    let r = StoredRun::open(run)?;
    let names = &r.draws.names;
    match what {
        InspectWhat::Psrf => {
            for (n, v) in names.iter().zip(&r.report.psrf) {
                let s = v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "NA".into());
                println!("{n:24} {s:>8}");
            }
        }
        InspectWhat::Neff => {
            for (k, n) in names.iter().enumerate() {
                let per: Vec<Vec<f64>> = (0..r.draws.n_chains())
                    .map(|c| r.draws.param(c, k))
                    .collect();
                let refs: Vec<&[f64]> = per.iter().map(Vec::as_slice).collect();
                println!("{n:24} {:>8.0}", ess(&refs).ess);
            }
        }
        InspectWhat::Inits => {
            for (c, v) in r.inits.iter().enumerate() {
                println!("chain {}", c + 1);
                for (n, x) in names.iter().zip(v) {
                    println!("  {n:22} {x:>10.4}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(args) => cmd_fit(args).map(|converged| {
            if converged {
                ExitCode::SUCCESS
            } else {
                eprintln!("warning: chains did not converge");
                ExitCode::from(EXIT_NOT_CONVERGED)
            }
        }),
        Command::Summary { run, extra } => StoredRun::open(run).and_then(|r| {
            let opts = SummaryOptions {
                extra: *extra,
                ..Default::default()
            };
            print!("{}", render_summary(&r.summary(&opts)?, &r.table, *extra));
            Ok(ExitCode::SUCCESS)
        }),
        Command::Fitmeasures { run, recompute } => StoredRun::open(run).and_then(|r| {
            let fm = if *recompute {
                r.fit_measures()?
            } else {
                r.stored_fit_measures()?
            };
            print!("{}", fm.to_text());
            Ok(ExitCode::SUCCESS)
        }),
        Command::Inspect { args } => inspect_target(args)
            .and_then(|(run, what)| cmd_inspect(&run, what))
            .map(|_| ExitCode::SUCCESS),
        Command::Plot {
            run,
            what,
            params,
            out,
        } => StoredRun::open(run).and_then(|r| {
            let idx = parse_range(params, r.draws.n_params())?;
            let dir = out.clone().unwrap_or_else(|| run.join("plots"));
            for path in plot::write_plots(&r.draws, &idx, *what, &dir)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("1:4", 10).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_range("3", 10).unwrap(), vec![2]);
        assert!(parse_range("0:2", 10).is_err());
        assert!(parse_range("2:11", 10).is_err());
        assert!(parse_range("x", 10).is_err());
    }

    #[test]
    fn key_values() {
        assert_eq!(
            parse_key_val("nu=\"dnorm(5,1e-2)\"").unwrap(),
            ("nu".into(), "dnorm(5,1e-2)".into())
        );
        assert!(parse_key_val("nu").is_err());
    }
}
