//! No-regret dynamics with an exponential-mechanism query player and a
//! follow-the-perturbed-leader data player.
//!
//! Each round the data player best-responds to the history of selected
//! queries under random perturbations (FEM: linear `Exp(η)` noise; sepFEM:
//! `Lap(η)` weights on separator queries), producing `s` records. The query
//! player then selects the query with the largest signed error under the
//! exponential mechanism. The release is the uniform mixture of all rounds.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::PrivateData;
use crate::domain::{GroupLayout, RecordBits};
use crate::oracle::{OracleBackend, OracleError, OracleProblem};
use crate::privacy::{self, FilterState, PrivacyError, PrivacyLedger, ScoredCandidates};
use crate::seeds;
use crate::workload::{MarginalQuery, SyntheticDataset, WeightedRecords, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum PrimalError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("workload must be closed under negation")]
    NotClosed,
    #[error("separator set is empty")]
    EmptySeparator,
    #[error("privacy ledger halted at round {round}")]
    LedgerHalted { round: usize },
    #[error("data regret needs an exact oracle")]
    RequiresExactOracle,
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fem,
    SepFem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalConfig {
    pub rounds: usize,
    /// Total zCDP budget; each round spends `rho / rounds`.
    pub rho: f64,
    /// Perturbation scale.
    pub eta: f64,
    /// Oracle samples per round.
    pub samples: usize,
    pub variant: Variant,
    pub oracle: OracleBackend,
    pub seed: u64,
}

impl PrimalConfig {
    fn validate(&self) -> Result<(), PrimalError> {
        if self.rounds == 0 {
            return Err(PrimalError::InvalidConfig("rounds must be at least 1".into()));
        }
        if self.samples == 0 {
            return Err(PrimalError::InvalidConfig("samples must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(PrimalError::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(PrimalError::InvalidConfig(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Per-round diagnostics shared by all engines.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub t: usize,
    pub query_id: usize,
    pub score: f64,
    /// Distinct records in this round's data.
    pub distinct_records: usize,
    /// Private-record reads observed during the data-player update, when
    /// the dataset is instrumented.
    pub data_reads: Option<u64>,
    pub oracle_ms: f64,
    pub pool: Option<PoolStats>,
}

/// Sample-pool bookkeeping for the dual engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoolStats {
    pub kept: usize,
    pub fresh: usize,
    pub rejected: usize,
    pub refilled: usize,
}

#[derive(Debug, Clone)]
pub struct PrimalOutcome {
    pub synthetic: SyntheticDataset,
    pub traces: Vec<RoundTrace>,
    pub ledger: PrivacyLedger,
    /// Selected query ids `q_0, q_1, …, q_T`; `q_0` is the uniform initial draw.
    pub history: Vec<usize>,
    /// The data player's `D̂^t` for `t = 1..=T`.
    pub rounds: Vec<SyntheticDataset>,
}

/// Sums duplicate queries into weights.
fn aggregate(history: &[&MarginalQuery]) -> Vec<(MarginalQuery, f64)> {
    let mut index: HashMap<&MarginalQuery, usize> = HashMap::new();
    let mut out: Vec<(MarginalQuery, f64)> = Vec::new();
    for q in history {
        match index.get(q) {
            Some(&i) => out[i].1 += 1.0,
            None => {
                index.insert(q, out.len());
                out.push(((*q).clone(), 1.0));
            }
        }
    }
    out
}

fn timed_solve(oracle: &OracleBackend, p: &OracleProblem, seed: u64) -> Result<(RecordBits, f64), OracleError> {
    let start = Instant::now();
    let solution = oracle.solve(p, seed)?;
    Ok((solution.record, start.elapsed().as_secs_f64() * 1e3))
}

/// FEM data update: `s` oracle calls, each maximizing the history count minus
/// an independent `Exp(η)` linear perturbation. `D̂^t` is uniform over the
/// returned records. Also returns total oracle time in milliseconds.
pub fn fem_data_update(
    layout: &GroupLayout,
    history: &[&MarginalQuery],
    eta: f64,
    samples: usize,
    oracle: &OracleBackend,
    seed: u64,
) -> Result<(Vec<RecordBits>, f64), PrimalError> {
    if samples == 0 {
        return Err(PrimalError::InvalidConfig("samples must be at least 1".into()));
    }
    let base = aggregate(history);
    let d = layout.dimension();
    let results: Vec<(RecordBits, f64)> = (0..samples)
        .into_par_iter()
        .map(|j| {
            let sample_seed = seeds::substream(seed, "sample", j as u64);
            let sigma = privacy::sample_exponential_vector(eta, d, &mut seeds::sub_rng(sample_seed, "sigma", 0))?;
            let p = OracleProblem::new(layout.clone(), base.clone(), sigma)?;
            Ok(timed_solve(oracle, &p, sample_seed)?)
        })
        .collect::<Result<_, PrimalError>>()?;
    let ms = results.iter().map(|r| r.1).sum();
    Ok((results.into_iter().map(|r| r.0).collect(), ms))
}

/// sepFEM data update: the perturbation enters as `Lap(η)` weights on the
/// separator queries rather than as a linear term.
pub fn sepfem_data_update(
    layout: &GroupLayout,
    history: &[&MarginalQuery],
    separator: &[MarginalQuery],
    eta: f64,
    samples: usize,
    oracle: &OracleBackend,
    seed: u64,
) -> Result<(Vec<RecordBits>, f64), PrimalError> {
    if separator.is_empty() {
        return Err(PrimalError::EmptySeparator);
    }
    if samples == 0 {
        return Err(PrimalError::InvalidConfig("samples must be at least 1".into()));
    }
    let base = aggregate(history);
    let results: Vec<(RecordBits, f64)> = (0..samples)
        .into_par_iter()
        .map(|j| {
            let sample_seed = seeds::substream(seed, "sample", j as u64);
            let sigma =
                privacy::sample_laplace_vector(eta, separator.len(), &mut seeds::sub_rng(sample_seed, "sigma", 0))?;
            let mut weighted = base.clone();
            weighted.extend(separator.iter().cloned().zip(sigma));
            let p = OracleProblem::unperturbed(layout.clone(), weighted)?;
            Ok(timed_solve(oracle, &p, sample_seed)?)
        })
        .collect::<Result<_, PrimalError>>()?;
    let ms = results.iter().map(|r| r.1).sum();
    Ok((results.into_iter().map(|r| r.0).collect(), ms))
}

/// The `d` single-bit queries. Any two distinct records differ on some bit,
/// so this set separates the domain.
pub fn build_separator(layout: &GroupLayout) -> Vec<MarginalQuery> {
    (0..layout.dimension()).map(|b| MarginalQuery::single_bit(layout, b)).collect()
}

/// Runs `T` rounds and releases the uniform mixture of every round's data.
pub fn run_primal<D: PrivateData + ?Sized>(
    data: &D,
    workload: &Workload,
    cfg: &PrimalConfig,
) -> Result<PrimalOutcome, PrimalError> {
    cfg.validate()?;
    if !workload.is_closed() {
        return Err(PrimalError::NotClosed);
    }
    let layout = data.layout().clone();
    let n = data.n();
    if n == 0 {
        return Err(PrimalError::Workload(WorkloadError::EmptyDataset));
    }
    let truth = workload.answers(data.records())?;
    let mut ledger = PrivacyLedger::new(cfg.rho)?;
    let rho0 = cfg.rho / cfg.rounds as f64;
    let param = (2.0 * rho0).sqrt();
    let sensitivity = 1.0 / n as f64;
    let separator = match cfg.variant {
        Variant::SepFem => build_separator(&layout),
        Variant::Fem => Vec::new(),
    };

    let q0 = {
        use rand::Rng as _;
        seeds::sub_rng(cfg.seed, "initial-query", 0).random_range(0..workload.len())
    };
    let mut history = vec![q0];
    let mut traces = Vec::with_capacity(cfg.rounds);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut samples_per_round = Vec::with_capacity(cfg.rounds);

    for t in 1..=cfg.rounds {
        let round_seed = seeds::substream(cfg.seed, "round", t as u64);
        let past: Vec<&MarginalQuery> = history.iter().map(|&i| workload.get(i)).collect();
        let reads_before = data.reads();
        let (samples, oracle_ms) = match cfg.variant {
            Variant::Fem => fem_data_update(&layout, &past, cfg.eta, cfg.samples, &cfg.oracle, round_seed)?,
            Variant::SepFem => {
                sepfem_data_update(&layout, &past, &separator, cfg.eta, cfg.samples, &cfg.oracle, round_seed)?
            }
        };
        let data_reads = reads_before.zip(data.reads()).map(|(a, b)| b - a);

        let dhat = SyntheticDataset::uniform(samples.clone());
        let est = workload.answers(&dhat)?;
        let scores: Vec<f64> = truth.answers.iter().zip(&est.answers).map(|(a, b)| a - b).collect();
        let candidates = ScoredCandidates::new(scores, sensitivity)?;
        let qt = privacy::exponential_mechanism(&candidates, param, &mut seeds::sub_rng(round_seed, "em", 0))?;
        if ledger.charge(rho0)? == FilterState::Halt {
            return Err(PrimalError::LedgerHalted { round: t });
        }
        traces.push(RoundTrace {
            t,
            query_id: qt,
            score: candidates.scores()[qt],
            distinct_records: dhat.distinct(),
            data_reads,
            oracle_ms,
            pool: None,
        });
        history.push(qt);
        rounds.push(dhat);
        samples_per_round.push(samples);
    }
    Ok(PrimalOutcome {
        synthetic: SyntheticDataset::from_rounds(samples_per_round),
        traces,
        ledger,
        history,
        rounds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyperparameters {
    pub rounds: usize,
    pub eta: f64,
    pub samples: usize,
}

/// `s = ⌈8 ln(4T|Q|/β) / α²⌉` samples per round.
pub fn samples_for(alpha: f64, beta: f64, rounds: usize, num_queries: usize) -> usize {
    let s = 8.0 * (4.0 * rounds as f64 * num_queries as f64 / beta).ln() / (alpha * alpha);
    (s.ceil() as usize).max(1)
}

/// FEM perturbation scale `√(1/(2500 T d))`.
pub fn fem_eta(rounds: usize, d: usize) -> f64 {
    (1.0 / (2500.0 * rounds as f64 * d as f64)).sqrt()
}

/// sepFEM perturbation scale `√(5d/(2 √M T))` for a separator of size `M`.
pub fn sepfem_eta(rounds: usize, d: usize, m: usize) -> f64 {
    (5.0 * d as f64 / (2.0 * (m as f64).sqrt() * rounds as f64)).sqrt()
}

/// Theory-driven `(T, η, s)` for a budget `ρ`, with the separator taken as
/// the `d` single-bit queries for sepFEM.
pub fn default_hyperparameters(
    variant: Variant,
    d: usize,
    n: usize,
    num_queries: usize,
    rho: f64,
    alpha: f64,
    beta: f64,
) -> Result<Hyperparameters, PrimalError> {
    if d == 0 || n == 0 || num_queries < 2 || !(rho > 0.0) {
        return Err(PrimalError::InvalidConfig("d, n, ρ must be positive and |Q| ≥ 2".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(PrimalError::InvalidConfig("α and β must lie in (0, 1)".into()));
    }
    let (d_f, n_f) = (d as f64, n as f64);
    let query_scale = (2.0 / (rho * n_f * n_f)).sqrt() * (num_queries as f64).ln();
    let rounds = match variant {
        Variant::Fem => 2.5 * d_f.powf(1.5) / query_scale,
        Variant::SepFem => d_f.powf(0.75) * d_f.sqrt() * 40f64.sqrt() / query_scale,
    };
    let rounds = (rounds.ceil() as usize).max(1);
    let eta = match variant {
        Variant::Fem => fem_eta(rounds, d),
        Variant::SepFem => sepfem_eta(rounds, d, d),
    };
    Ok(Hyperparameters { rounds, eta, samples: samples_for(alpha, beta, rounds, num_queries) })
}

/// Realized regrets of the two players, averaged over rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regret {
    pub data: f64,
    pub query: f64,
}

/// Data regret `(1/T)[max_x Σ q_t(x) − Σ q_t(D̂^t)]` and query regret
/// `(1/T)[max_q Σ (q(D) − q(D̂^t)) − Σ (q_t(D) − q_t(D̂^t))]`.
pub fn empirical_regret<W: WeightedRecords + ?Sized>(
    outcome: &PrimalOutcome,
    data: &W,
    workload: &Workload,
    layout: &GroupLayout,
    oracle: &OracleBackend,
) -> Result<Regret, PrimalError> {
    if !oracle.is_exact() {
        return Err(PrimalError::RequiresExactOracle);
    }
    let played = &outcome.history[1..];
    let t = played.len() as f64;
    let truth = workload.answers(data)?;
    let per_round: Vec<Vec<f64>> = outcome
        .rounds
        .iter()
        .map(|r| workload.answers(r).map(|a| a.answers))
        .collect::<Result<_, _>>()?;

    let selected: Vec<&MarginalQuery> = played.iter().map(|&i| workload.get(i)).collect();
    let best = oracle.solve(&OracleProblem::unperturbed(layout.clone(), aggregate(&selected))?, 0)?;
    let realized_data: f64 = played.iter().zip(&per_round).map(|(&q, ans)| ans[q]).sum();

    let cumulative = |q: usize| per_round.iter().map(|ans| truth.answers[q] - ans[q]).sum::<f64>();
    let best_query = (0..workload.len()).map(cumulative).fold(f64::NEG_INFINITY, f64::max);
    let realized_query: f64 = played.iter().zip(&per_round).map(|(&q, ans)| truth.answers[q] - ans[q]).sum();

    Ok(Regret { data: (best.objective - realized_data) / t, query: (best_query - realized_query) / t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Attribute, EncodedDataset, Schema};
    use crate::oracle::DEFAULT_EXACT_CAP;
    use crate::workload::enumerate_marginals;

    fn small() -> (EncodedDataset, Workload) {
        let schema = Schema::new(vec![
            Attribute::categorical("a", &["0", "1", "2"]),
            Attribute::categorical("b", &["0", "1"]),
            Attribute::categorical("c", &["0", "1", "2"]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        crate::domain::write_synthetic_csv(&mut buf, &schema, 300, 11).unwrap();
        let ds = crate::domain::encode_csv(buf.as_slice(), &schema).unwrap();
        let w = enumerate_marginals(&schema, 2, 3, 4).unwrap();
        (ds, w)
    }

    fn cfg(rounds: usize, variant: Variant) -> PrimalConfig {
        PrimalConfig {
            rounds,
            rho: 0.5,
            eta: 1.0,
            samples: 8,
            variant,
            oracle: OracleBackend::Exact { cap: DEFAULT_EXACT_CAP },
            seed: 17,
        }
    }

    #[test]
    fn sample_count_formula() {
        assert_eq!(samples_for(0.25, 0.1, 50, 1000), 1858);
        assert!((fem_eta(100, 100) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn single_round_accounting() {
        let (ds, w) = small();
        let out = run_primal(&ds, &w, &cfg(1, Variant::Fem)).unwrap();
        assert_eq!(out.ledger.spends(), &[0.5]);
        assert_eq!(out.synthetic, out.rounds[0]);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn rounds_contribute_equal_weight() {
        let (ds, w) = small();
        let out = run_primal(&ds, &w, &cfg(5, Variant::SepFem)).unwrap();
        assert_eq!(out.synthetic.provenance(), &[8; 5]);
        let total: f64 = out.synthetic.weighted_records().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(out.ledger.spends().len(), 5);
    }

    #[test]
    fn rejects_open_workload() {
        let (ds, w) = small();
        let open = Workload::new(w.queries().to_vec());
        assert!(matches!(run_primal(&ds, &open, &cfg(2, Variant::Fem)), Err(PrimalError::NotClosed)));
    }

    #[test]
    fn large_noise_picks_smallest_perturbation() {
        let layout = GroupLayout::from_sizes(&[3, 4, 2]);
        let q = MarginalQuery::single_bit(&layout, 0);
        let oracle = OracleBackend::default();
        for seed in 0..20 {
            let eta = 1e6;
            let (records, _) = fem_data_update(&layout, &[&q], eta, 1, &oracle, seed).unwrap();
            let sample_seed = seeds::substream(seed, "sample", 0);
            let sigma =
                privacy::sample_exponential_vector(eta, layout.dimension(), &mut seeds::sub_rng(sample_seed, "sigma", 0))
                    .unwrap();
            let values: Vec<usize> = (0..layout.num_groups())
                .map(|g| {
                    let r = layout.group_range(g);
                    (0..r.len()).min_by(|&a, &b| sigma[r.start + a].total_cmp(&sigma[r.start + b])).unwrap()
                })
                .collect();
            assert_eq!(records[0], layout.record_from_values(&values));
        }
    }

    #[test]
    fn separator_separates() {
        let layout = GroupLayout::from_sizes(&[3, 2, 4]);
        let sep = build_separator(&layout);
        assert_eq!(sep.len(), 9);
        let mut all = Vec::new();
        for a in 0..3 {
            for b in 0..2 {
                for c in 0..4 {
                    all.push(layout.record_from_values(&[a, b, c]));
                }
            }
        }
        for (i, x) in all.iter().enumerate() {
            for y in &all[i + 1..] {
                assert!(sep.iter().any(|q| q.eval_unchecked(x) != q.eval_unchecked(y)));
            }
            for (bit, q) in sep.iter().enumerate() {
                assert_eq!(q.eval_unchecked(x), x.get(bit));
            }
        }
    }

    #[test]
    fn empty_separator_is_rejected() {
        let layout = GroupLayout::from_sizes(&[2]);
        let err = sepfem_data_update(&layout, &[], &[], 1.0, 1, &OracleBackend::default(), 0).unwrap_err();
        assert!(matches!(err, PrimalError::EmptySeparator));
    }

    #[test]
    fn regret_needs_exact_oracle() {
        let (ds, w) = small();
        let out = run_primal(&ds, &w, &cfg(2, Variant::Fem)).unwrap();
        let local = OracleBackend::Local { restarts: 2 };
        assert!(matches!(
            empirical_regret(&out, &ds, &w, ds.layout(), &local),
            Err(PrimalError::RequiresExactOracle)
        ));
        // with a single round the realized query is one of the candidates of the max
        let one = run_primal(&ds, &w, &cfg(1, Variant::Fem)).unwrap();
        let r = empirical_regret(&one, &ds, &w, ds.layout(), &OracleBackend::default()).unwrap();
        assert!(r.query >= 0.0);
    }

    #[test]
    fn error_bounded_by_regrets() {
        let (ds, w) = small();
        for seed in 0..4 {
            let mut c = cfg(6, Variant::Fem);
            c.seed = seed;
            let out = run_primal(&ds, &w, &c).unwrap();
            let r = empirical_regret(&out, &ds, &w, ds.layout(), &OracleBackend::default()).unwrap();
            let err = crate::workload::max_error(&w, &ds, &out.synthetic).unwrap();
            assert!(err <= r.data + r.query + 1e-9, "{err} > {r:?}");
        }
    }
}
