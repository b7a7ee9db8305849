//! Dual dynamics: multiplicative weights over queries against a
//! best-responding data player.
//!
//! DualQuery draws a fresh pool of `s` queries from the current distribution
//! every round. DQRS recycles the previous pool by rejection sampling, which
//! keeps each element with probability `Q̂^{t+1}_q / Q^t_q` and tops the pool
//! up with `s̃_t` fresh draws, so most samples never pay the fresh-draw cost.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

use crate::access::PrivateData;
use crate::domain::RecordBits;
use crate::oracle::{OracleBackend, OracleError, OracleProblem};
use crate::primal::{PoolStats, RoundTrace};
use crate::privacy::{FilterState, PrivacyError, PrivacyLedger};
use crate::seeds::{self, Rng};
use crate::workload::{AnswerVector, SyntheticDataset, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum DualError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("workload needs at least two queries")]
    DegenerateWorkload,
    #[error("workload must be closed under negation")]
    NotClosed,
    #[error("privacy budget exceeded at round {round}")]
    BudgetExceeded { round: usize },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DqrsParams {
    pub alpha: f64,
    pub beta: f64,
    pub rounds: usize,
    pub eta: f64,
    pub samples: usize,
}

impl DqrsParams {
    /// Explicit parameters, bypassing the accuracy-driven formulas.
    pub fn custom(alpha: f64, beta: f64, rounds: usize, eta: f64, samples: usize) -> Result<Self, DualError> {
        if rounds == 0 || samples == 0 {
            return Err(DualError::InvalidParams("rounds and samples must be at least 1".into()));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(DualError::InvalidParams(format!("eta must be positive, got {eta}")));
        }
        Ok(DqrsParams { alpha, beta, rounds, eta, samples })
    }

    /// `γ_t = 1 / (2 t^{2/3})`.
    pub fn gamma(&self, t: usize) -> f64 {
        1.0 / (2.0 * (t as f64).powf(2.0 / 3.0))
    }

    /// Fresh draws per round, `s̃_t = ⌈(2γ_t + 4η) s⌉`.
    pub fn s_tilde(&self, t: usize) -> usize {
        ((2.0 * self.gamma(t) + 4.0 * self.eta) * self.samples as f64).ceil() as usize
    }
}

/// `T = ⌈16 ln|Q| / α²⌉`, `η = α/4`, `s = ⌈48 ln(3|X|T/β) / α²⌉`.
pub fn dqrs_params(alpha: f64, beta: f64, num_queries: usize, domain_size: f64) -> Result<DqrsParams, DualError> {
    if num_queries < 2 {
        return Err(DualError::DegenerateWorkload);
    }
    if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(DualError::InvalidParams("α and β must lie in (0, 1)".into()));
    }
    if !(domain_size >= 1.0) {
        return Err(DualError::InvalidParams("domain must be non-empty".into()));
    }
    let a2 = alpha * alpha;
    let rounds = (16.0 * (num_queries as f64).ln() / a2).ceil() as usize;
    let samples = (48.0 * (3.0 * domain_size * rounds as f64 / beta).ln() / a2).ceil() as usize;
    DqrsParams::custom(alpha, beta, rounds.max(1), alpha / 4.0, samples.max(1))
}

/// Multiplicative-weights state over the workload, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct MwState {
    log_weights: Vec<f64>,
    round: usize,
}

impl MwState {
    pub fn uniform(num_queries: usize) -> Self {
        MwState { log_weights: vec![0.0; num_queries], round: 1 }
    }

    pub fn from_log_weights(log_weights: Vec<f64>) -> Self {
        MwState { log_weights, round: 1 }
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// The normalized distribution.
    pub fn probabilities(&self) -> Vec<f64> {
        let top = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    pub fn sampler(&self) -> CategoricalSampler {
        CategoricalSampler::new(&self.probabilities())
    }
}

/// Inverse-CDF sampling from a fixed categorical distribution.
#[derive(Debug, Clone)]
pub struct CategoricalSampler {
    cdf: Vec<f64>,
}

impl CategoricalSampler {
    pub fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        CategoricalSampler { cdf }
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let total = *self.cdf.last().expect("non-empty distribution");
        let u = rng.random::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// One MW step against the data player's record `x`.
///
/// Returns the acceptance ratios `p_q = e^{−η−γ} e^{−η A(x,q)}` with
/// `A(x,q) = q(D) − q(x)`, and the next (normalized) state.
pub fn mw_update(
    state: &MwState,
    x: &RecordBits,
    true_answers: &AnswerVector,
    workload: &Workload,
    eta: f64,
    gamma: f64,
) -> (Vec<f64>, MwState) {
    let log_ratios: Vec<f64> = workload
        .queries()
        .iter()
        .zip(&true_answers.answers)
        .map(|(q, truth)| {
            let on_x = if q.eval_unchecked(x) { 1.0 } else { 0.0 };
            -eta - gamma - eta * (truth - on_x)
        })
        .collect();
    let unnormalized: Vec<f64> = state.log_weights.iter().zip(&log_ratios).map(|(l, r)| l + r).collect();
    let top = unnormalized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = unnormalized.iter().map(|l| (l - top).exp()).sum::<f64>().ln() + top;
    let next = MwState {
        log_weights: unnormalized.iter().map(|l| l - log_total).collect(),
        round: state.round + 1,
    };
    (log_ratios.into_iter().map(f64::exp).collect(), next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Recycled,
    Fresh,
}

/// The multiset `S_t` of query ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool {
    ids: Vec<usize>,
    provenance: Vec<Provenance>,
}

impl SamplePool {
    pub fn fresh(ids: Vec<usize>) -> Self {
        let provenance = vec![Provenance::Fresh; ids.len()];
        SamplePool { ids, provenance }
    }

    pub fn draw(sampler: &CategoricalSampler, s: usize, rng: &mut Rng) -> Self {
        SamplePool::fresh((0..s).map(|_| sampler.sample(rng)).collect())
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Multiplicity of every distinct id, ordered by id.
    pub fn counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for &id in &self.ids {
            *out.entry(id).or_insert(0) += 1;
        }
        out
    }
}

/// Keeps each pool element with its ratio, appends `fresh` draws from the next
/// distribution and resizes to exactly `s`: uniform discards when over,
/// further fresh draws (`refilled`) when under.
pub fn rejection_resample(
    pool: &SamplePool,
    ratios: &[f64],
    next: &CategoricalSampler,
    fresh: usize,
    s: usize,
    rng: &mut Rng,
) -> Result<(SamplePool, PoolStats), DualError> {
    if let Some(bad) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(DualError::InvalidParams(format!("acceptance ratio {bad} outside (0, 1]")));
    }
    let mut ids = Vec::with_capacity(pool.len() + fresh);
    let mut provenance = Vec::with_capacity(pool.len() + fresh);
    for &id in &pool.ids {
        if rng.random::<f64>() < ratios[id] {
            ids.push(id);
            provenance.push(Provenance::Recycled);
        }
    }
    let kept = ids.len();
    let mut stats = PoolStats { kept, fresh, rejected: pool.len() - kept, refilled: 0 };
    for _ in 0..fresh {
        ids.push(next.sample(rng));
        provenance.push(Provenance::Fresh);
    }
    if ids.len() < s {
        stats.refilled = s - ids.len();
        for _ in 0..stats.refilled {
            ids.push(next.sample(rng));
            provenance.push(Provenance::Fresh);
        }
    }
    if ids.len() > s {
        let mut chosen = rand::seq::index::sample(rng, ids.len(), s).into_vec();
        chosen.sort_unstable();
        ids = chosen.iter().map(|&i| ids[i]).collect();
        provenance = chosen.iter().map(|&i| provenance[i]).collect();
    }
    Ok((SamplePool { ids, provenance }, stats))
}

#[derive(Debug, Clone)]
pub struct DualOutcome {
    /// Uniform over the best responses `x^1..x^T`.
    pub synthetic: SyntheticDataset,
    pub ledger: PrivacyLedger,
    pub traces: Vec<RoundTrace>,
    pub responses: Vec<RecordBits>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrivacyCost {
    /// Sum of the exact per-round costs.
    pub exact: f64,
    /// Sum of the per-round bound `(η²s/n²)(4t^{4/3} + 8ηt²)`.
    pub bound: f64,
}

/// zCDP cost of one fresh draw at round `t`: the draw is `2η(t−1)/n`-DP.
fn fresh_draw_cost(eta: f64, t: usize, n: f64) -> f64 {
    let eps = 2.0 * eta * (t as f64 - 1.0) / n;
    0.5 * eps * eps
}

/// zCDP cost of the `s` acceptance decisions at round `t`, each `η/(γ_t n)`-DP.
fn acceptance_cost(p: &DqrsParams, t: usize, n: f64) -> f64 {
    let eps = p.eta / (p.gamma(t) * n);
    0.5 * eps * eps * p.samples as f64
}

pub fn dqrs_round_cost(p: &DqrsParams, t: usize, n: usize) -> f64 {
    let n = n as f64;
    acceptance_cost(p, t, n) + fresh_draw_cost(p.eta, t, n) * p.s_tilde(t) as f64
}

pub fn dqrs_privacy_cost(p: &DqrsParams, n: usize) -> PrivacyCost {
    let nf = n as f64;
    let exact = (1..=p.rounds).map(|t| dqrs_round_cost(p, t, n)).sum();
    let bound = (1..=p.rounds)
        .map(|t| {
            let t = t as f64;
            p.eta * p.eta * p.samples as f64 / (nf * nf) * (4.0 * t.powf(4.0 / 3.0) + 8.0 * p.eta * t * t)
        })
        .sum();
    PrivacyCost { exact, bound }
}

/// DualQuery's total cost: `s` fresh draws every round.
pub fn dualquery_privacy_cost(p: &DqrsParams, n: usize) -> f64 {
    (1..=p.rounds).map(|t| fresh_draw_cost(p.eta, t, n as f64) * p.samples as f64).sum()
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Fresh,
    Rejection,
}

/// Runs DQRS. `budget` optionally caps the ledger; exceeding it is an error.
pub fn run_dqrs<D: PrivateData + ?Sized>(
    data: &D,
    workload: &Workload,
    params: &DqrsParams,
    oracle: &OracleBackend,
    seed: u64,
    budget: Option<f64>,
) -> Result<DualOutcome, DualError> {
    run_dual(data, workload, params, oracle, seed, budget, Mode::Rejection)
}

/// Runs the DualQuery baseline with a fresh pool every round.
pub fn run_dualquery<D: PrivateData + ?Sized>(
    data: &D,
    workload: &Workload,
    params: &DqrsParams,
    oracle: &OracleBackend,
    seed: u64,
    budget: Option<f64>,
) -> Result<DualOutcome, DualError> {
    run_dual(data, workload, params, oracle, seed, budget, Mode::Fresh)
}

fn run_dual<D: PrivateData + ?Sized>(
    data: &D,
    workload: &Workload,
    params: &DqrsParams,
    oracle: &OracleBackend,
    seed: u64,
    budget: Option<f64>,
    mode: Mode,
) -> Result<DualOutcome, DualError> {
    if workload.len() < 2 {
        return Err(DualError::DegenerateWorkload);
    }
    if !workload.is_closed() {
        return Err(DualError::NotClosed);
    }
    let n = data.n();
    if n == 0 {
        return Err(DualError::Workload(WorkloadError::EmptyDataset));
    }
    let layout = data.layout().clone();
    let truth = workload.answers(data.records())?;
    let mut ledger = match budget {
        Some(b) => PrivacyLedger::new(b)?,
        None => PrivacyLedger::unlimited(),
    };
    let s = params.samples;
    let mut state = MwState::uniform(workload.len());
    let mut pool = SamplePool::draw(&state.sampler(), s, &mut seeds::sub_rng(seed, "initial-pool", 0));
    let mut traces = Vec::with_capacity(params.rounds);
    let mut responses = Vec::with_capacity(params.rounds);

    for t in 1..=params.rounds {
        let round_seed = seeds::substream(seed, "round", t as u64);
        let mut rng = seeds::sub_rng(round_seed, "pool", 0);
        let mut stats = PoolStats::default();
        let mut rho_t = 0.0;
        if mode == Mode::Fresh {
            pool = SamplePool::draw(&state.sampler(), s, &mut rng);
            stats.fresh = s;
            rho_t += fresh_draw_cost(params.eta, t, n as f64) * s as f64;
        }

        // maximizing A(x, q̃) = q̃(D) − q̃(x) means minimizing q̃(x)
        let counts = pool.counts();
        let bundle: Vec<_> = counts
            .iter()
            .map(|(&id, &c)| (workload.get(id).clone(), -(c as f64) / s as f64))
            .collect();
        let problem = OracleProblem::unperturbed(layout.clone(), bundle)?;
        let start = Instant::now();
        let solution = oracle.solve(&problem, seeds::substream(round_seed, "oracle", 0))?;
        let oracle_ms = start.elapsed().as_secs_f64() * 1e3;
        let x = solution.record;
        let payoff: f64 = counts
            .iter()
            .map(|(&id, &c)| {
                let on_x = if workload.get(id).eval_unchecked(&x) { 1.0 } else { 0.0 };
                c as f64 * (truth.answers[id] - on_x)
            })
            .sum::<f64>()
            / s as f64;

        let gamma = params.gamma(t);
        let (ratios, next) = mw_update(&state, &x, &truth, workload, params.eta, gamma);
        if mode == Mode::Rejection {
            let fresh = params.s_tilde(t);
            let (resampled, st) = rejection_resample(&pool, &ratios, &next.sampler(), fresh, s, &mut rng)?;
            stats = st;
            rho_t += acceptance_cost(params, t, n as f64)
                + fresh_draw_cost(params.eta, t, n as f64) * (fresh + st.refilled) as f64;
            pool = resampled;
        }
        state = next;

        if ledger.charge(rho_t)? == FilterState::Halt {
            return Err(DualError::BudgetExceeded { round: t });
        }
        let mode_id = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&id, _)| id);
        traces.push(RoundTrace {
            t,
            query_id: mode_id.unwrap_or(0),
            score: payoff,
            distinct_records: 1,
            data_reads: None,
            oracle_ms,
            pool: Some(stats),
        });
        responses.push(x);
    }
    let synthetic = SyntheticDataset::from_rounds(responses.iter().map(|x| vec![x.clone()]).collect());
    Ok(DualOutcome { synthetic, ledger, traces, responses })
}
