use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use privsynth::domain::{self, Schema};
use privsynth::harness::{self, Algorithm, ExperimentConfig, HarnessError, RunReport};
use privsynth::oracle::{self, OracleProblem};
use privsynth::privacy;
use privsynth::seeds;
use privsynth::workload::{self, Workload};

#[derive(Parser)]
#[command(name = "privsynth", version, about = "Differentially private synthetic data for marginal workloads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a CSV against a schema and print per-attribute counts.
    Encode {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Write one bit string per record here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a seeded synthetic CSV for a schema.
    GenData {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a k-way marginal workload closed under negation.
    Workload {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        marginals: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        algorithm: Option<String>,
        /// One value, or a comma-separated list to sweep.
        #[arg(long, value_delimiter = ',')]
        epsilon: Vec<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        marginals: Option<usize>,
        #[arg(long)]
        oracle: Option<String>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Include wall-clock times in reports and traces.
        #[arg(long)]
        timings: bool,
    },
    /// Write an oracle problem over a workload as an LP-format integer program.
    ExportMip {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        workload: PathBuf,
        /// Scale of the exponential perturbation; 0 disables it.
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate median errors from several run reports.
    Compare {
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Component(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Component(e.to_string())
        }
    }
}

fn component<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Component(e.to_string())
}

fn read_schema(path: &Path) -> Result<Schema, Failure> {
    Schema::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| component(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Encode { schema, csv, out } => {
            let schema = read_schema(&schema)?;
            let ds = domain::load_csv(&csv, &schema).map_err(component)?;
            if let Some(out) = out {
                let mut text = String::from("record\n");
                for r in ds.records() {
                    text.push_str(&r.to_bitstring());
                    text.push('\n');
                }
                emit(Some(&out), &text)?;
            }
            let stats = domain::record_stats(&ds);
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
        }
        Command::GenData { schema, n, seed, out } => {
            let schema = read_schema(&schema)?;
            domain::generate_synthetic_csv(&schema, n, seed, &out).map_err(|e| match e {
                domain::DataError::EmptyRequest => Failure::Config(e.to_string()),
                other => component(other),
            })?;
        }
        Command::Workload { schema, k, marginals, seed, out } => {
            let schema = read_schema(&schema)?;
            let w = workload::enumerate_marginals(&schema, k, marginals, seed).map_err(|e| Failure::Config(e.to_string()))?;
            emit(out.as_deref(), &(w.to_json() + "\n"))?;
        }
        Command::Run { config, seed, out, algorithm, epsilon, delta, rho, k, marginals, oracle, repetitions, timings } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = Some(o);
            }
            if let Some(a) = algorithm {
                cfg.algorithm = Algorithm::parse(&a).ok_or_else(|| Failure::Config(format!("unknown algorithm {a:?}")))?;
            }
            if let Some(d) = delta {
                cfg.delta = Some(d);
            }
            if let Some(r) = rho {
                cfg.rho = Some(r);
                cfg.epsilon = None;
            }
            if let Some(k) = k {
                cfg.workload.k = k;
            }
            if let Some(m) = marginals {
                cfg.workload.marginals = m;
            }
            if let Some(o) = oracle {
                cfg.oracle.backend = o;
            }
            if let Some(r) = repetitions {
                cfg.repetitions = r;
            }
            cfg.timings |= timings;
            if cfg.preset.is_some() {
                let grid = harness::run_grid(&cfg)?;
                println!("{}", serde_json::to_string_pretty(&grid).expect("grid serializes"));
                return Ok(());
            }
            match epsilon.as_slice() {
                [] => print_summary(&harness::run_experiment(&cfg)?),
                [e] => {
                    cfg.epsilon = Some(*e);
                    cfg.rho = None;
                    print_summary(&harness::run_experiment(&cfg)?);
                }
                many => {
                    for r in harness::run_epsilon_sweep(&cfg, many)? {
                        print_summary(&r);
                    }
                }
            }
        }
        Command::ExportMip { schema, workload, eta, seed, out } => {
            let schema = read_schema(&schema)?;
            let layout = schema.layout();
            let text = fs::read_to_string(&workload).map_err(|e| Failure::Config(format!("{}: {e}", workload.display())))?;
            let w = Workload::from_json(&text, &layout).map_err(|e| Failure::Config(e.to_string()))?;
            let sigma = if eta > 0.0 {
                privacy::sample_exponential_vector(eta, layout.dimension(), &mut seeds::sub_rng(seed, "sigma", 0))
                    .map_err(component)?
            } else {
                vec![0.0; layout.dimension()]
            };
            let weighted = w.queries().iter().cloned().map(|q| (q, 1.0)).collect();
            let problem = OracleProblem::new(layout, weighted, sigma).map_err(component)?;
            oracle::export_mip(&problem, &out).map_err(component)?;
        }
        Command::Compare { reports, out } => {
            let loaded = reports.iter().map(|p| RunReport::load(p)).collect::<Result<Vec<_>, _>>()?;
            let table = harness::compare_reports(&loaded)?;
            emit(out.as_deref(), &table)?;
        }
    }
    Ok(())
}

fn print_summary(r: &RunReport) {
    println!(
        "{} eps={:.4} rho={:.6} |Q|={} median_error={:.4} (min {:.4}, max {:.4})",
        r.algorithm.name(),
        r.privacy.epsilon,
        r.privacy.rho,
        r.num_queries,
        r.median_error,
        r.min_error,
        r.max_error
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Component(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
