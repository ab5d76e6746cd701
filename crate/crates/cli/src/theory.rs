use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;
use taml::theorylab::{
    gamma_sweep, regularizer_trace, residual_scaling, softplus_inverse, total_variance_check, variance_suite,
    TotalVarConfig, MIN_SAMPLES,
};
use taml::worldgen::{make_benchmark, BenchmarkSpec};
use taml::ENGINE_VERSION;

use crate::{input_err, write_file, CliResult, Failure};

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Variances,
    Sweep,
    Totalvar,
    Regtrace,
}

#[derive(Args)]
pub struct TheoryArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// Monte-Carlo draws per estimate.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mixed tasks for the sweep.
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

const SWEEP_GRID: [f64; 6] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

#[derive(Serialize)]
struct Report {
    engine: String,
    suite: Suite,
    samples: usize,
    seed: u64,
    pass: bool,
    failures: Vec<String>,
    result: serde_json::Value,
}

fn default_samples(suite: Suite) -> usize {
    match suite {
        Suite::Variances | Suite::Regtrace => 1_000_000,
        Suite::Sweep | Suite::Totalvar => 100_000,
    }
}

fn to_value<T: Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| input_err("report", e))
}

pub fn run(args: &TheoryArgs) -> CliResult<()> {
    let n = args.samples.unwrap_or_else(|| default_samples(args.suite));
    if n < MIN_SAMPLES {
        return Err(Failure::Input(format!("--samples {n} is below the minimum of {MIN_SAMPLES}")));
    }
    let (failures, result) = match args.suite {
        Suite::Variances => {
            let r = variance_suite(n, args.seed)?;
            (r.failures(), to_value(&r)?)
        }
        Suite::Sweep => {
            let r = gamma_sweep(&SWEEP_GRID, args.m, n, args.seed)?;
            let mut f = r.monotonicity_violations(2.0);
            f.extend(r.closed_form_misses(3.0));
            (f, to_value(&r)?)
        }
        Suite::Totalvar => {
            let bench = make_benchmark(&BenchmarkSpec::default())?;
            let base = TotalVarConfig::full(n, args.seed)?;
            let check = total_variance_check(&bench, &base)?;
            let mut f = check.failures();
            let small = TotalVarConfig {
                n_mc: (n / 16).max(1000),
                ..base
            };
            let scaling = residual_scaling(&bench, &small, 6)?;
            if !(1.5..=2.7).contains(&scaling.ratio) {
                f.push(format!("residual ratio {:.3} at 4x draws is outside [1.5, 2.7]", scaling.ratio));
            }
            (f, serde_json::json!({ "check": to_value(&check)?, "scaling": to_value(&scaling)? }))
        }
        Suite::Regtrace => {
            let unit = softplus_inverse(1.0)?;
            let cases = [(1.0, 1.0, unit), (0.5, 2.0, 0.3), (-1.5, 0.25, -1.0), (1.0, 1.0, -40.0)];
            let mut reports = Vec::new();
            let mut f = Vec::new();
            for (k, (mu, s2, w)) in cases.into_iter().enumerate() {
                let r = regularizer_trace(mu, s2, w, n, args.seed.wrapping_add(k as u64))?;
                if !r.pass {
                    f.push(format!("regtrace mu={mu} sigma2={s2} w_alpha={w}: z = {:.2}", r.z));
                }
                reports.push(r);
            }
            (f, to_value(&reports)?)
        }
    };
    let report = Report {
        engine: ENGINE_VERSION.to_string(),
        suite: args.suite,
        samples: n,
        seed: args.seed,
        pass: failures.is_empty(),
        failures: failures.clone(),
        result,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| input_err("report", e))?;
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }
    println!("{json}");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Theory(failures.join("; ")))
    }
}
