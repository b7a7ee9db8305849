//! Experiment configuration, orchestration and reporting.
//!
//! A run loads or generates a dataset, builds a marginal workload, executes
//! an engine for several repetitions and writes a JSON report together with
//! per-round traces, ledgers and the released records. Every random choice
//! derives from the master seed, so identical configurations reproduce
//! byte-identical outputs (wall-clock timings are opt-in for that reason).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{self, DataError, EncodedDataset, Schema};
use crate::dual::{self, DqrsParams, DualError};
use crate::oracle::{OracleBackend, DEFAULT_EXACT_CAP};
use crate::primal::{self, PrimalConfig, PrimalError, RoundTrace, Variant};
use crate::privacy::{self, PrivacyError, PrivacyLedger};
use crate::seeds;
use crate::workload::{self, SyntheticDataset, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
    #[error("primal engine: {0}")]
    Primal(#[from] PrimalError),
    #[error("dual engine: {0}")]
    Dual(#[from] DualError),
    #[error("privacy: {0}")]
    Privacy(#[from] PrivacyError),
    #[error("reports cover different workloads: {0}")]
    MismatchedWorkloads(String),
    #[error("nothing to compare")]
    NoReports,
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("malformed JSON in {context}: {source}")]
    Json { context: String, source: serde_json::Error },
}

impl HarnessError {
    /// True for problems with the user's configuration rather than a component failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Json { .. }
                | HarnessError::Workload(WorkloadError::ArityTooLarge { .. } | WorkloadError::TooManyMarginals { .. })
        )
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let context = context.into();
    move |source| HarnessError::Io { context, source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent.display().to_string()))?;
    }
    fs::write(path, contents).map_err(io_err(path.display().to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fem,
    SepFem,
    DualQuery,
    Dqrs,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fem => "fem",
            Algorithm::SepFem => "sepfem",
            Algorithm::DualQuery => "dualquery",
            Algorithm::Dqrs => "dqrs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fem" => Some(Algorithm::Fem),
            "sepfem" => Some(Algorithm::SepFem),
            "dualquery" => Some(Algorithm::DualQuery),
            "dqrs" => Some(Algorithm::Dqrs),
            _ => None,
        }
    }

    fn is_primal(self) -> bool {
        matches!(self, Algorithm::Fem | Algorithm::SepFem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub schema: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub k: usize,
    pub marginals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    /// Directory for exported programs; defaults to `<out>/lp`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

fn default_backend() -> String {
    "exact".into()
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec { backend: default_backend(), cap: None, restarts: None, dir: None }
    }
}

fn default_repetitions() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub workload: WorkloadSpec,
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Defaults to `1/n²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    /// Per-round budget in ε units; sets `T = ⌊ρ / (ε0²/2)⌋`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Record wall-clock times in reports and traces.
    #[serde(default)]
    pub timings: bool,
    /// Named hyperparameter grid, run as non-private tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
}

impl ExperimentConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|source| HarnessError::Json { context: path.display().to_string(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.schema);
        if let Some(csv) = cfg.data.csv.as_mut() {
            resolve(csv);
        }
        if let Some(out) = cfg.out.as_mut() {
            resolve(out);
        }
        if let Some(dir) = cfg.oracle.dir.as_mut() {
            resolve(dir);
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.repetitions == 0 {
            return Err(HarnessError::Config("repetitions must be at least 1".into()));
        }
        if self.epsilon.is_some() && self.rho.is_some() {
            return Err(HarnessError::Config("give either epsilon or rho, not both".into()));
        }
        match (&self.data.csv, &self.data.generate) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(HarnessError::Config("data needs exactly one of `csv` or `generate`".into()))
            }
            (Some(csv), None) if !csv.exists() => {
                return Err(HarnessError::Config(format!("data file {} does not exist", csv.display())))
            }
            _ => {}
        }
        if !self.data.schema.exists() {
            return Err(HarnessError::Config(format!("schema {} does not exist", self.data.schema.display())));
        }
        Ok(())
    }

    fn oracle_backend(&self, out: &Path) -> Result<OracleBackend, HarnessError> {
        let restarts = self.oracle.restarts.unwrap_or(8);
        match self.oracle.backend.as_str() {
            "exact" => Ok(OracleBackend::Exact { cap: self.oracle.cap.map_or(DEFAULT_EXACT_CAP, u128::from) }),
            "local" => Ok(OracleBackend::Local { restarts }),
            "export" => {
                let dir = self.oracle.dir.clone().unwrap_or_else(|| out.join("lp"));
                fs::create_dir_all(&dir).map_err(io_err(dir.display().to_string()))?;
                Ok(OracleBackend::Export { dir, restarts })
            }
            other => Err(HarnessError::Config(format!("unknown oracle backend {other:?}"))),
        }
    }
}

/// The data and workload an experiment runs on.
#[derive(Debug, Clone)]
pub struct Instance {
    pub dataset: EncodedDataset,
    pub workload: Workload,
    pub workload_seed: u64,
}

pub fn load_instance(cfg: &ExperimentConfig) -> Result<Instance, HarnessError> {
    let schema = Schema::load(&cfg.data.schema)?;
    let dataset = match (&cfg.data.csv, &cfg.data.generate) {
        (Some(csv), _) => domain::load_csv(csv, &schema)?,
        (None, Some(g)) => {
            let seed = g.seed.unwrap_or_else(|| seeds::substream(cfg.seed, "data", 0));
            let mut buf = Vec::new();
            domain::write_synthetic_csv(&mut buf, &schema, g.n, seed)?;
            domain::encode_csv(buf.as_slice(), &schema)?
        }
        (None, None) => return Err(HarnessError::Config("no data source".into())),
    };
    let workload_seed = cfg.workload.seed.unwrap_or_else(|| seeds::substream(cfg.seed, "workload", 0));
    let workload = workload::enumerate_marginals(&schema, cfg.workload.k, cfg.workload.marginals, workload_seed)?;
    Ok(Instance { dataset, workload, workload_seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub index: usize,
    pub seed: u64,
    pub max_error: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub charges: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParameters {
    pub rounds: usize,
    pub eta: f64,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyTotals {
    /// Largest ledger total over repetitions; each repetition is one release.
    pub rho: f64,
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub algorithm: Algorithm,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub num_queries: usize,
    pub workload_seed: u64,
    pub parameters: ResolvedParameters,
    pub repetitions: Vec<RepetitionResult>,
    pub median_error: f64,
    pub min_error: f64,
    pub max_error: f64,
    pub privacy: PrivacyTotals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path.display().to_string()))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json { context: path.display().to_string(), source })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn resolve_parameters(cfg: &ExperimentConfig, inst: &Instance, delta: f64) -> Result<ResolvedParameters, HarnessError> {
    let n = inst.dataset.n();
    let d = inst.dataset.d();
    let q = inst.workload.len();
    let budget_rho = match (cfg.epsilon, cfg.rho) {
        (Some(eps), None) => Some(privacy::invert_budget(eps, delta)?),
        (None, Some(rho)) => Some(rho),
        _ => None,
    };
    if cfg.algorithm.is_primal() {
        let rho = budget_rho.ok_or_else(|| HarnessError::Config("FEM/sepFEM need epsilon or rho".into()))?;
        let variant = if cfg.algorithm == Algorithm::Fem { Variant::Fem } else { Variant::SepFem };
        let alpha = cfg.alpha.unwrap_or(0.25);
        let beta = cfg.beta.unwrap_or(0.1);
        let rounds = match (cfg.rounds, cfg.epsilon0) {
            (Some(t), _) => t,
            (None, Some(e0)) => {
                let rho0 = privacy::dp_to_zcdp(e0);
                if !(rho0 > 0.0) {
                    return Err(HarnessError::Config("epsilon0 must be positive".into()));
                }
                ((rho / rho0 * (1.0 + 1e-9)).floor() as usize).max(1)
            }
            (None, None) => primal::default_hyperparameters(variant, d, n, q, rho, alpha, beta)?.rounds,
        };
        let eta = cfg.eta.unwrap_or_else(|| match variant {
            Variant::Fem => primal::fem_eta(rounds, d),
            Variant::SepFem => primal::sepfem_eta(rounds, d, d),
        });
        let samples = cfg.samples.unwrap_or_else(|| primal::samples_for(alpha, beta, rounds, q));
        Ok(ResolvedParameters { rounds, eta, samples, budget_rho: Some(rho) })
    } else {
        let alpha = cfg.alpha.unwrap_or(0.5);
        let beta = cfg.beta.unwrap_or(0.1);
        let domain_size = inst.dataset.layout().domain_size() as f64;
        let p = dual::dqrs_params(alpha, beta, q, domain_size)?;
        Ok(ResolvedParameters {
            rounds: cfg.rounds.unwrap_or(p.rounds),
            eta: cfg.eta.unwrap_or(p.eta),
            samples: cfg.samples.unwrap_or(p.samples),
            budget_rho,
        })
    }
}

struct RepetitionOutput {
    synthetic: SyntheticDataset,
    traces: Vec<RoundTrace>,
    ledger: PrivacyLedger,
    wall_ms: f64,
}

fn run_once(
    cfg: &ExperimentConfig,
    inst: &Instance,
    params: &ResolvedParameters,
    oracle: &OracleBackend,
    seed: u64,
) -> Result<RepetitionOutput, HarnessError> {
    let start = Instant::now();
    let (synthetic, traces, ledger) = match cfg.algorithm {
        Algorithm::Fem | Algorithm::SepFem => {
            let pc = PrimalConfig {
                rounds: params.rounds,
                rho: params.budget_rho.expect("primal budget resolved"),
                eta: params.eta,
                samples: params.samples,
                variant: if cfg.algorithm == Algorithm::Fem { Variant::Fem } else { Variant::SepFem },
                oracle: oracle.clone(),
                seed,
            };
            let out = primal::run_primal(&inst.dataset, &inst.workload, &pc)?;
            (out.synthetic, out.traces, out.ledger)
        }
        Algorithm::DualQuery | Algorithm::Dqrs => {
            let p = DqrsParams::custom(
                cfg.alpha.unwrap_or(0.5),
                cfg.beta.unwrap_or(0.1),
                params.rounds,
                params.eta,
                params.samples,
            )?;
            let run = if cfg.algorithm == Algorithm::Dqrs { dual::run_dqrs } else { dual::run_dualquery };
            let out = run(&inst.dataset, &inst.workload, &p, oracle, seed, params.budget_rho)?;
            (out.synthetic, out.traces, out.ledger)
        }
    };
    Ok(RepetitionOutput { synthetic, traces, ledger, wall_ms: start.elapsed().as_secs_f64() * 1e3 })
}

/// Renders round traces as CSV. Pool columns appear for the dual engines and
/// `oracle_ms` only when timings are requested.
pub fn traces_csv(traces: &[RoundTrace], timings: bool) -> String {
    let pool = traces.iter().any(|t| t.pool.is_some());
    let mut out = String::from("t,query_id,score,distinct_records");
    if pool {
        out.push_str(",kept,fresh,rejected,refilled");
    }
    if timings {
        out.push_str(",oracle_ms");
    }
    out.push('\n');
    for t in traces {
        let _ = write!(out, "{},{},{},{}", t.t, t.query_id, t.score, t.distinct_records);
        if pool {
            let p = t.pool.unwrap_or_default();
            let _ = write!(out, ",{},{},{},{}", p.kept, p.fresh, p.rejected, p.refilled);
        }
        if timings {
            let _ = write!(out, ",{:.3}", t.oracle_ms);
        }
        out.push('\n');
    }
    out
}

fn synthetic_csv(schema: &Schema, data: &SyntheticDataset) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| HarnessError::Io { context: "synthetic csv".into(), source: std::io::Error::other(e) };
    let mut header: Vec<String> = schema.attributes().iter().map(|a| a.name.clone()).collect();
    header.push("weight".into());
    w.write_record(&header).map_err(csv_err)?;
    for (record, weight) in data.weighted_records() {
        let mut row = schema.decode(record).expect("released records are one-hot");
        row.push(weight.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io { context: "synthetic csv".into(), source: e.into_error() })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Runs every repetition and writes `report.json`, `traces/`, `ledgers/` and
/// `synthetic/` under the configured output directory (if any).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let inst = load_instance(cfg)?;
    let n = inst.dataset.n();
    let delta = cfg.delta.unwrap_or(1.0 / (n as f64 * n as f64));
    if !(delta > 0.0 && delta < 1.0) {
        return Err(HarnessError::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    let params = resolve_parameters(cfg, &inst, delta)?;
    let out_dir = cfg.out.clone();
    let oracle = cfg.oracle_backend(out_dir.as_deref().unwrap_or(Path::new(".")))?;

    let outputs: Vec<(u64, RepetitionOutput)> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|i| {
            let seed = seeds::substream(cfg.seed, "repetition", i as u64);
            run_once(cfg, &inst, &params, &oracle, seed).map(|o| (seed, o))
        })
        .collect::<Result<_, _>>()?;

    let truth = inst.workload.answers(&inst.dataset)?;
    let mut repetitions = Vec::with_capacity(outputs.len());
    for (i, (seed, o)) in outputs.iter().enumerate() {
        let rho = o.ledger.total();
        repetitions.push(RepetitionResult {
            index: i,
            seed: *seed,
            max_error: workload::max_error_against(&inst.workload, &truth, &o.synthetic)?,
            rho,
            epsilon: privacy::zcdp_to_dp(rho, delta)?,
            charges: o.ledger.spends().len(),
            wall_ms: cfg.timings.then_some(o.wall_ms),
        });
    }
    let errors: Vec<f64> = repetitions.iter().map(|r| r.max_error).collect();
    let rho = repetitions.iter().map(|r| r.rho).fold(0.0, f64::max);
    // Output locations are left out so reruns into other directories compare equal.
    let mut echoed = cfg.clone();
    echoed.out = None;
    echoed.oracle.dir = None;
    let report = RunReport {
        config: echoed,
        algorithm: cfg.algorithm,
        n,
        d: inst.dataset.d(),
        k: cfg.workload.k,
        num_queries: inst.workload.len(),
        workload_seed: inst.workload_seed,
        parameters: params,
        median_error: median(&errors),
        min_error: errors.iter().copied().fold(f64::INFINITY, f64::min),
        max_error: errors.iter().copied().fold(0.0, f64::max),
        privacy: PrivacyTotals { rho, epsilon: privacy::zcdp_to_dp(rho, delta)?, delta },
        repetitions,
        wall_ms: cfg.timings.then(|| start.elapsed().as_secs_f64() * 1e3),
    };

    if let Some(dir) = out_dir {
        write_file(&dir.join("report.json"), report.to_json() + "\n")?;
        for (i, (_, o)) in outputs.iter().enumerate() {
            write_file(&dir.join("traces").join(format!("rep{i}.csv")), traces_csv(&o.traces, cfg.timings))?;
            write_file(&dir.join("ledgers").join(format!("rep{i}.json")), o.ledger.to_json() + "\n")?;
            write_file(
                &dir.join("synthetic").join(format!("rep{i}.csv")),
                synthetic_csv(inst.dataset.schema(), &o.synthetic)?,
            )?;
        }
    }
    Ok(report)
}

/// Runs the configuration once per ε, each under `<out>/eps_<ε>`.
pub fn run_epsilon_sweep(cfg: &ExperimentConfig, epsilons: &[f64]) -> Result<Vec<RunReport>, HarnessError> {
    epsilons
        .iter()
        .map(|&eps| {
            let mut c = cfg.clone();
            c.epsilon = Some(eps);
            c.rho = None;
            c.out = cfg.out.as_ref().map(|o| o.join(format!("eps_{eps}")));
            run_experiment(&c)
        })
        .collect()
}

/// One row per `(ε, |Q|)` with the median error of each report's algorithm,
/// followed by each column's difference from the first algorithm column.
pub fn compare_reports(reports: &[RunReport]) -> Result<String, HarnessError> {
    let first = reports.first().ok_or(HarnessError::NoReports)?;
    for r in reports {
        if (r.n, r.d, r.k) != (first.n, first.d, first.k) {
            return Err(HarnessError::MismatchedWorkloads(format!(
                "(n={}, d={}, k={}) vs (n={}, d={}, k={})",
                r.n, r.d, r.k, first.n, first.d, first.k
            )));
        }
    }
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<(String, usize)> = Vec::new();
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for r in reports {
        let eps = match r.config.epsilon {
            Some(e) => e.to_string(),
            None => format!("{:.6}", r.privacy.epsilon),
        };
        let key = (eps, r.num_queries);
        let row = match rows.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                rows.push(key);
                rows.len() - 1
            }
        };
        // a repeated algorithm within a row gets its own suffixed column
        let base = r.algorithm.name();
        let mut copy = 1;
        let col = loop {
            let name = if copy == 1 { base.to_string() } else { format!("{base}#{copy}") };
            let idx = columns.iter().position(|c| *c == name);
            match idx {
                Some(i) if cells.iter().any(|c| c.0 == row && c.1 == i) => copy += 1,
                Some(i) => break i,
                None => {
                    columns.push(name);
                    break columns.len() - 1;
                }
            }
        };
        cells.push((row, col, r.median_error));
    }
    let mut out = String::from("epsilon,num_queries");
    for c in &columns {
        let _ = write!(out, ",{c}");
    }
    for c in columns.iter().skip(1) {
        let _ = write!(out, ",{c}-{}", columns[0]);
    }
    out.push('\n');
    for (i, (eps, q)) in rows.iter().enumerate() {
        let value = |col: usize| cells.iter().find(|c| c.0 == i && c.1 == col).map(|c| c.2);
        let _ = write!(out, "{eps},{q}");
        for col in 0..columns.len() {
            let _ = write!(out, ",{}", value(col).map(|v| v.to_string()).unwrap_or_default());
        }
        for col in 1..columns.len() {
            let diff = value(col).zip(value(0)).map(|(a, b)| (a - b).to_string());
            let _ = write!(out, ",{}", diff.unwrap_or_default());
        }
        out.push('\n');
    }
    Ok(out)
}

/// A hyperparameter grid. Selecting the best point by looking at the private
/// data's error is not itself private; grids are for benchmarking only.
#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    /// Grid over per-round budget `ε0` and perturbation scale `η`.
    Fem { epsilon0: Vec<f64>, eta: Vec<f64> },
    /// Grid over `η` and pool size `s`.
    Dual { eta: Vec<f64>, samples: Vec<usize> },
}

pub fn preset(name: &str) -> Option<Preset> {
    match name {
        "fem-sweep-1" => Some(Preset::Fem {
            epsilon0: vec![0.003, 0.005, 0.007, 0.009, 0.011, 0.015, 0.017, 0.019],
            eta: vec![1.0, 2.0, 3.0, 4.0],
        }),
        "fem-sweep-2" => Some(Preset::Fem { epsilon0: vec![0.0025, 0.003, 0.0035], eta: vec![0.75, 1.0, 1.25] }),
        "dq-sweep" => Some(Preset::Dual {
            eta: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            samples: vec![10, 20, 30, 40, 50, 100],
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon0: Option<f64>,
    pub eta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    pub median_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub mode: &'static str,
    pub preset: String,
    pub points: Vec<GridPoint>,
    pub best: GridPoint,
}

/// Runs every point of the configured preset and reports the best one.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridReport, HarnessError> {
    let name = cfg.preset.clone().ok_or_else(|| HarnessError::Config("no preset given".into()))?;
    let grid = preset(&name).ok_or_else(|| HarnessError::Config(format!("unknown preset {name:?}")))?;
    let mut configs = Vec::new();
    match &grid {
        Preset::Fem { epsilon0, eta } => {
            if !cfg.algorithm.is_primal() {
                return Err(HarnessError::Config(format!("{name} applies to fem/sepfem")));
            }
            for &e0 in epsilon0 {
                for &h in eta {
                    let mut c = cfg.clone();
                    (c.epsilon0, c.eta, c.rounds) = (Some(e0), Some(h), None);
                    configs.push((GridPoint { epsilon0: Some(e0), eta: h, samples: None, median_error: 0.0 }, c));
                }
            }
        }
        Preset::Dual { eta, samples } => {
            if cfg.algorithm.is_primal() {
                return Err(HarnessError::Config(format!("{name} applies to dualquery/dqrs")));
            }
            for &h in eta {
                for &s in samples {
                    let mut c = cfg.clone();
                    (c.eta, c.samples) = (Some(h), Some(s));
                    configs.push((GridPoint { epsilon0: None, eta: h, samples: Some(s), median_error: 0.0 }, c));
                }
            }
        }
    }
    let mut points = Vec::with_capacity(configs.len());
    for (i, (mut point, mut c)) in configs.into_iter().enumerate() {
        c.preset = None;
        c.out = cfg.out.as_ref().map(|o| o.join(format!("grid_{i}")));
        point.median_error = run_experiment(&c)?.median_error;
        points.push(point);
    }
    let best = points
        .iter()
        .min_by(|a, b| a.median_error.total_cmp(&b.median_error))
        .cloned()
        .expect("presets are non-empty");
    let report = GridReport { mode: "non-private tuning", preset: name, points, best };
    if let Some(dir) = &cfg.out {
        write_file(&dir.join("grid.json"), serde_json::to_string_pretty(&report).expect("grid serializes") + "\n")?;
    }
    Ok(report)
}
