use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use aelab::amp::{vamp_se_run, VampConfig};
use aelab::diagnostics::StructureReport;
use aelab::experiments::{default_out_dir, describe_registry, find_experiment, parse_config, run_experiment, Params};
use aelab::linalg::format_real;
use aelab::models::load_checkpoint;
use aelab::theory::{
    denoised_envelope_mse, gaussian_mse, identity_mse, linear_envelope_mse, optimal_denoised_mse,
    state_evolution_params, MseCurve,
};
use aelab::{Error, Prior, Result, SeedSpec};

#[derive(Parser)]
#[command(name = "aelab", version, about = "Sign-activation autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a registered experiment.
    Run {
        experiment: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List experiments and their configuration keys.
    List,
    /// Print a closed-form MSE curve as CSV.
    Theory {
        curve: Curve,
        #[arg(long)]
        prior: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Whether the grid runs over r (prior fixed) or p (r fixed).
        #[arg(long, value_enum, default_value = "r")]
        over: Axis,
        #[arg(long, default_value_t = 1.0)]
        r: f64,
    },
    /// Iterate the VAMP state evolution and print its trace.
    VampSe {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 15)]
        k: usize,
        #[arg(long, default_value_t = 1_000_000)]
        mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Structure report of a saved model.
    Diagnose { checkpoint: PathBuf },
    /// Tabulate the Bayes denoiser on a grid of inputs.
    DenoiserTable {
        #[arg(long)]
        prior: String,
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 5.0)]
        lim: f64,
        #[arg(long, default_value_t = 101)]
        points: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Curve {
    Gaussian,
    Identity,
    LinearEnvelope,
    OptimalDenoised,
    DenoisedEnvelope,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    R,
    P,
}

fn curve_value(c: Curve, prior: &Prior, r: f64) -> Result<f64> {
    match c {
        Curve::Gaussian => gaussian_mse(r),
        Curve::Identity => identity_mse(prior, r),
        Curve::LinearEnvelope => linear_envelope_mse(prior, r),
        Curve::OptimalDenoised => optimal_denoised_mse(prior, r),
        Curve::DenoisedEnvelope => denoised_envelope_mse(prior, r),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("AELAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Usage(format!("AELAB_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run {
            experiment,
            config,
            out,
            seed,
        } => {
            let spec = find_experiment(&experiment)?;
            let mut kv = match config {
                Some(path) => parse_config(&std::fs::read_to_string(&path)?)?,
                None => BTreeMap::new(),
            };
            if let Some(s) = seed {
                kv.insert("seed".into(), s.to_string());
            }
            let params = Params::resolve(spec, &kv)?;
            let seed_val: u64 = params.values()["seed"].parse().unwrap_or(0);
            let out = out.unwrap_or_else(|| default_out_dir(spec.name, seed_val));
            let outcome = run_experiment(&params, &out)?;
            println!("wrote {}", outcome.out_dir.display());
            for a in &outcome.artifacts {
                println!("  {a}");
            }
        }
        Cmd::List => print!("{}", describe_registry()),
        Cmd::Theory {
            curve,
            prior,
            grid,
            over,
            r,
        } => {
            let base = Prior::parse(&prior)?;
            let label = curve.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
            let c = match over {
                Axis::R => MseCurve::from_fn(&label, &grid, |rr| curve_value(curve, &base, rr))?,
                Axis::P => {
                    let fam = base
                        .family()
                        .ok_or_else(|| Error::Usage("--over p needs an analytic prior family".into()))?;
                    MseCurve::from_fn(&label, &grid, |p| curve_value(curve, &fam.at(p)?, r))?
                }
            };
            print!("{}", c.to_csv());
        }
        Cmd::VampSe { p, r, k, mc, seed } => {
            let cfg = VampConfig {
                k_max: k,
                n_mc: mc,
                seed: SeedSpec::from_seed(seed),
                ..VampConfig::default()
            };
            let run = vamp_se_run(p, r, &cfg)?;
            print!("{}", run.trace_csv());
            eprintln!(
                "mse={} last_delta={} converged={}",
                format_real(run.mse),
                format_real(run.last_delta),
                run.converged
            );
        }
        Cmd::Diagnose { checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            print!("{}", StructureReport::new(model.encoder()).to_csv());
        }
        Cmd::DenoiserTable { prior, r, lim, points } => {
            if points < 2 || !(lim > 0.0) {
                return Err(Error::Usage("need points >= 2 and lim > 0".into()));
            }
            let f = aelab::denoisers::Denoiser::new(Prior::parse(&prior)?, state_evolution_params(r)?);
            println!("y,f");
            for i in 0..points {
                let y = -lim + 2.0 * lim * i as f64 / (points - 1) as f64;
                println!("{},{}", format_real(y), format_real(f.eval(y)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = configure_threads().and_then(|_| run(cli));
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aelab: {e}");
            match e {
                Error::Usage(_) | Error::Parse(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
