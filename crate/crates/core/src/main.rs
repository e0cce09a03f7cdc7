use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtscluster::data::MissingPolicy;
use mtscluster::harness::{self, Method, RunConfig};
use mtscluster::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "mtscluster", version, about = "Cluster multivariate EMA time series with DTW and GAK")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or reuse) the DTW and GAK matrices and write them as CSV.
    Distances(Overrides),
    /// Cluster once at a fixed k, keeping the best of the configured restarts.
    Cluster {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        k: usize,
    },
    /// Run every method over the k range and pick k by silhouette.
    Sweep(Overrides),
    /// Repeat each seed-sensitive method with fresh seeds and measure label instability.
    Stability(Overrides),
}

/// Every flag overrides the matching key of the config file.
#[derive(Args)]
struct Overrides {
    /// JSON config whose keys are the RunConfig field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Long-format CSV: id, timestamp, then one column per variable.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// linear_interpolate or drop_row [default: linear_interpolate]
    #[arg(long, value_parser = parse_missing_policy)]
    missing_policy: Option<MissingPolicy>,
    /// Per-individual, per-variable z-normalization [default: true]
    #[arg(long)]
    normalize: Option<bool>,
    /// Comma-separated subset of km_dtw, km_gak, hc_dtw, hc_gak, fcm_dtw, fkm_dtw, fkm_gak [default: all]
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Smallest k of the sweep [default: 2]
    #[arg(long)]
    k_min: Option<usize>,
    /// Largest k of the sweep [default: 6]
    #[arg(long)]
    k_max: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    n_stability_runs: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    master_seed: Option<u64>,
    /// Factor applied to the estimated GAK bandwidth [default: 1]
    #[arg(long)]
    sigma_multiplier: Option<f64>,
    /// Sakoe-Chiba radius for DTW and GAK [default: unconstrained]
    #[arg(long)]
    dtw_band: Option<usize>,
    /// Restarts per sweep cell and per cluster run [default: 10]
    #[arg(long)]
    restarts: Option<usize>,
    /// k for the stability command [default: each method's chosen k]
    #[arg(long)]
    stability_k: Option<usize>,
}

fn parse_missing_policy(s: &str) -> Result<MissingPolicy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown missing policy `{s}`"))
}

impl Overrides {
    fn resolve(self) -> mtscluster::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => {
                let (Some(input), Some(out)) = (&self.input, &self.output_dir) else {
                    return Err(Error::Config("without --config both --input and --output-dir are required".into()));
                };
                RunConfig::new(input, out)
            }
        };
        if let Some(v) = self.input {
            cfg.input = v;
        }
        if let Some(v) = self.output_dir {
            cfg.output_dir = v;
        }
        if let Some(v) = self.missing_policy {
            cfg.missing_policy = v;
        }
        if let Some(v) = self.normalize {
            cfg.normalize = v;
        }
        if let Some(v) = self.methods {
            cfg.methods = v;
        }
        if let Some(v) = self.k_min {
            cfg.k_range[0] = v;
        }
        if let Some(v) = self.k_max {
            cfg.k_range[1] = v;
        }
        if let Some(v) = self.n_stability_runs {
            cfg.n_stability_runs = v;
        }
        if let Some(v) = self.master_seed {
            cfg.master_seed = v;
        }
        if let Some(v) = self.sigma_multiplier {
            cfg.sigma_multiplier = v;
        }
        if self.dtw_band.is_some() {
            cfg.dtw_band = self.dtw_band;
        }
        if let Some(v) = self.restarts {
            cfg.restarts = v;
        }
        if self.stability_k.is_some() {
            cfg.stability_k = self.stability_k;
        }
        Ok(cfg)
    }
}

fn log_sigma(sigma: Option<f64>) {
    if let Some(s) = sigma {
        eprintln!("sigma_used = {s}");
    }
}

fn run(cli: Cli) -> mtscluster::Result<()> {
    match cli.command {
        Command::Distances(o) => {
            let (prep, report) = harness::cmd_distances(&o.resolve()?)?;
            log_sigma(report.meta.sigma_used);
            for hit in &prep.cache_hits {
                eprintln!("cache hit: {hit}");
            }
            if let Some(min) = report.min_eigenvalue {
                eprintln!("kernel min eigenvalue = {min}");
            }
        }
        Command::Cluster { overrides, method, k } => {
            let out = harness::cmd_cluster(&overrides.resolve()?, method, k)?;
            log_sigma(out.meta.sigma_used);
            println!("{method} k={k} silhouette={:.4} k_effective={}", out.quality.silhouette_mean, out.quality.k_effective);
        }
        Command::Sweep(o) => {
            let report = harness::cmd_sweep(&o.resolve()?)?;
            log_sigma(report.meta.sigma_used);
            for c in &report.chosen {
                let k = c.k.map_or("-".to_string(), |k| k.to_string());
                println!("{} chosen_k={k} [{}]", c.method, c.rationale.join(","));
            }
        }
        Command::Stability(o) => {
            let out = harness::cmd_stability(&o.resolve()?)?;
            log_sigma(out.meta.sigma_used);
            for ms in &out.methods {
                println!("{} k={} instability={:.4}", ms.method, ms.k, ms.report.instability);
            }
            for m in &out.skipped {
                println!("{m} skipped (deterministic)");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Degenerate => 4,
            })
        }
    }
}
