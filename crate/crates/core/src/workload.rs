//! k-way marginal queries, workloads closed under negation, and weighted
//! record collections they are evaluated on.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GroupLayout, RecordBits, Schema};
use crate::seeds;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("arity {k} exceeds the {attributes} available attributes")]
    ArityTooLarge { k: usize, attributes: usize },
    #[error("requested {requested} marginals but only {available} attribute tuples exist")]
    TooManyMarginals { requested: usize, available: u128 },
    #[error("record has {found} bits, query expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("workload and datasets disagree: {0}")]
    Mismatch(String),
    #[error("malformed workload document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A conjunction fixing `features[i]` to value `targets[i]`, optionally negated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MarginalQuery {
    features: Vec<usize>,
    targets: Vec<usize>,
    negated: bool,
    bits: RecordBits,
}

impl MarginalQuery {
    /// `features` must be distinct attribute indices; they are stored sorted.
    pub fn new(
        layout: &GroupLayout,
        features: &[usize],
        targets: &[usize],
        negated: bool,
    ) -> Result<Self, WorkloadError> {
        if features.is_empty() || features.len() != targets.len() {
            return Err(WorkloadError::InvalidQuery(
                "features and targets must be non-empty and of equal length".into(),
            ));
        }
        let mut pairs: Vec<(usize, usize)> = features.iter().copied().zip(targets.iter().copied()).collect();
        pairs.sort_unstable();
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(WorkloadError::InvalidQuery("repeated feature".into()));
        }
        let mut bits = RecordBits::zeros(layout.dimension());
        for &(g, v) in &pairs {
            if g >= layout.num_groups() || v >= layout.group_size(g) {
                return Err(WorkloadError::InvalidQuery(format!(
                    "feature {g} value {v} outside the domain"
                )));
            }
            bits.set(layout.bit(g, v), true);
        }
        Ok(MarginalQuery {
            features: pairs.iter().map(|p| p.0).collect(),
            targets: pairs.iter().map(|p| p.1).collect(),
            negated,
            bits,
        })
    }

    /// The arity-1 query that reads bit `bit` directly.
    pub fn single_bit(layout: &GroupLayout, bit: usize) -> Self {
        let (g, v) = layout.locate(bit);
        MarginalQuery::new(layout, &[g], &[v], false).expect("bit inside layout")
    }

    pub fn features(&self) -> &[usize] {
        &self.features
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn arity(&self) -> usize {
        self.features.len()
    }

    pub fn is_negated(&self) -> bool {
        self.negated
    }

    /// The k-hot mask `q⃗`.
    pub fn bits(&self) -> &RecordBits {
        &self.bits
    }

    pub fn negate(&self) -> Self {
        MarginalQuery { negated: !self.negated, ..self.clone() }
    }

    /// `[⟨x, q⃗⟩ = k] XOR negated`.
    pub fn eval(&self, x: &RecordBits) -> Result<bool, WorkloadError> {
        if x.len() != self.bits.len() {
            return Err(WorkloadError::DimensionMismatch { expected: self.bits.len(), found: x.len() });
        }
        Ok(self.eval_unchecked(x))
    }

    #[inline]
    pub fn eval_unchecked(&self, x: &RecordBits) -> bool {
        (x.inner(&self.bits) as usize == self.features.len()) != self.negated
    }

    /// Exact fraction of weight in `data` satisfying the query.
    pub fn answer<W: WeightedRecords + ?Sized>(&self, data: &W) -> Result<f64, WorkloadError> {
        let total = data.total_weight();
        if total == 0 {
            return Err(WorkloadError::EmptyDataset);
        }
        if let Some(x) = data.iter_weighted().next() {
            if x.0.len() != self.bits.len() {
                return Err(WorkloadError::DimensionMismatch { expected: self.bits.len(), found: x.0.len() });
            }
        }
        Ok(self.hits(data) as f64 / total as f64)
    }

    /// Total weight of records satisfying the query.
    pub fn hits<W: WeightedRecords + ?Sized>(&self, data: &W) -> u64 {
        data.iter_weighted()
            .filter(|(x, _)| self.eval_unchecked(x))
            .map(|(_, w)| w)
            .sum()
    }
}

/// Records carrying positive integer multiplicities, so that query answers
/// are exact rationals `hits / total`.
pub trait WeightedRecords: Sync {
    fn iter_weighted(&self) -> Box<dyn Iterator<Item = (&RecordBits, u64)> + '_>;
    fn total_weight(&self) -> u64;
}

impl WeightedRecords for [RecordBits] {
    fn iter_weighted(&self) -> Box<dyn Iterator<Item = (&RecordBits, u64)> + '_> {
        Box::new(self.iter().map(|r| (r, 1)))
    }

    fn total_weight(&self) -> u64 {
        self.len() as u64
    }
}

impl WeightedRecords for Vec<RecordBits> {
    fn iter_weighted(&self) -> Box<dyn Iterator<Item = (&RecordBits, u64)> + '_> {
        self.as_slice().iter_weighted()
    }

    fn total_weight(&self) -> u64 {
        self.len() as u64
    }
}

impl WeightedRecords for crate::domain::EncodedDataset {
    fn iter_weighted(&self) -> Box<dyn Iterator<Item = (&RecordBits, u64)> + '_> {
        self.records().iter_weighted()
    }

    fn total_weight(&self) -> u64 {
        self.n() as u64
    }
}

/// A released collection of records with rational weights `count / total`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    entries: Vec<(RecordBits, u64)>,
    total: u64,
    provenance: Vec<usize>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl SyntheticDataset {
    /// The uniform distribution over `records` (duplicates accumulate weight).
    pub fn uniform(records: Vec<RecordBits>) -> Self {
        let n = records.len();
        SyntheticDataset::from_rounds(vec![records]).with_provenance(vec![n])
    }

    /// Gives each non-empty round total weight `1/rounds`, split uniformly
    /// among that round's records.
    pub fn from_rounds(rounds: Vec<Vec<RecordBits>>) -> Self {
        let provenance: Vec<usize> = rounds.iter().map(Vec::len).collect();
        let lcm = rounds
            .iter()
            .filter(|r| !r.is_empty())
            .fold(1u64, |acc, r| acc / gcd(acc, r.len() as u64) * r.len() as u64);
        let mut merged: BTreeMap<RecordBits, u64> = BTreeMap::new();
        let mut total = 0;
        for round in rounds.into_iter().filter(|r| !r.is_empty()) {
            let each = lcm / round.len() as u64;
            for r in round {
                *merged.entry(r).or_insert(0) += each;
                total += each;
            }
        }
        SyntheticDataset { entries: merged.into_iter().collect(), total, provenance }
    }

    fn with_provenance(mut self, provenance: Vec<usize>) -> Self {
        self.provenance = provenance;
        self
    }

    /// Distinct records with their normalized weights, in lexicographic order.
    pub fn weighted_records(&self) -> impl Iterator<Item = (&RecordBits, f64)> + '_ {
        self.entries.iter().map(move |(r, c)| (r, *c as f64 / self.total as f64))
    }

    pub fn distinct(&self) -> usize {
        self.entries.len()
    }

    /// Number of records each contributing round produced.
    pub fn provenance(&self) -> &[usize] {
        &self.provenance
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

impl WeightedRecords for SyntheticDataset {
    fn iter_weighted(&self) -> Box<dyn Iterator<Item = (&RecordBits, u64)> + '_> {
        Box::new(self.entries.iter().map(|(r, c)| (r, *c)))
    }

    fn total_weight(&self) -> u64 {
        self.total
    }
}

/// An ordered list of queries; when `closed`, query `2i+1` negates query `2i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    queries: Vec<MarginalQuery>,
    closed: bool,
}

#[derive(Serialize, Deserialize)]
struct QueryDoc {
    features: Vec<usize>,
    targets: Vec<usize>,
    negated: bool,
}

#[derive(Serialize, Deserialize)]
struct WorkloadDoc {
    closed: bool,
    queries: Vec<QueryDoc>,
}

impl Workload {
    pub fn new(queries: Vec<MarginalQuery>) -> Self {
        Workload { queries, closed: false }
    }

    /// Interleaves every query with its negation.
    pub fn closed_under_negation(base: Vec<MarginalQuery>) -> Self {
        let queries = base
            .into_iter()
            .flat_map(|q| {
                let n = q.negate();
                [q, n]
            })
            .collect();
        Workload { queries, closed: true }
    }

    pub fn queries(&self) -> &[MarginalQuery] {
        &self.queries
    }

    pub fn get(&self, id: usize) -> &MarginalQuery {
        &self.queries[id]
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Answers of every query on `data`, computed in parallel.
    pub fn answers<W: WeightedRecords + ?Sized>(&self, data: &W) -> Result<AnswerVector, WorkloadError> {
        let total = data.total_weight();
        if total == 0 {
            return Err(WorkloadError::EmptyDataset);
        }
        if let (Some(q), Some((x, _))) = (self.queries.first(), data.iter_weighted().next()) {
            if q.bits().len() != x.len() {
                return Err(WorkloadError::DimensionMismatch { expected: q.bits().len(), found: x.len() });
            }
        }
        let answers = self
            .queries
            .par_iter()
            .map(|q| q.hits(data) as f64 / total as f64)
            .collect();
        Ok(AnswerVector { answers })
    }

    pub fn to_json(&self) -> String {
        let doc = WorkloadDoc {
            closed: self.closed,
            queries: self
                .queries
                .iter()
                .map(|q| QueryDoc {
                    features: q.features.clone(),
                    targets: q.targets.clone(),
                    negated: q.negated,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("workload serializes")
    }

    pub fn from_json(text: &str, layout: &GroupLayout) -> Result<Self, WorkloadError> {
        let doc: WorkloadDoc = serde_json::from_str(text)?;
        let queries = doc
            .queries
            .iter()
            .map(|q| MarginalQuery::new(layout, &q.features, &q.targets, q.negated))
            .collect::<Result<Vec<_>, _>>()?;
        if doc.closed {
            let ok = queries.len() % 2 == 0
                && queries.chunks(2).all(|p| p[1] == p[0].negate());
            if !ok {
                return Err(WorkloadError::InvalidQuery(
                    "closed workload must alternate queries and their negations".into(),
                ));
            }
        }
        Ok(Workload { queries, closed: doc.closed })
    }
}

/// Per-query answers in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVector {
    pub answers: Vec<f64>,
}

impl AnswerVector {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), WorkloadError> {
        let mut out = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| WorkloadError::Io(std::io::Error::other(e));
        out.write_record(["query_id", "answer"]).map_err(io)?;
        for (i, a) in self.answers.iter().enumerate() {
            out.write_record([i.to_string(), a.to_string()]).map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

/// Samples `num_marginals` distinct attribute tuples of size `k`, emits every
/// target combination for each and closes the result under negation.
pub fn enumerate_marginals(
    schema: &Schema,
    k: usize,
    num_marginals: usize,
    seed: u64,
) -> Result<Workload, WorkloadError> {
    let m = schema.attributes().len();
    if k == 0 || k > m {
        return Err(WorkloadError::ArityTooLarge { k, attributes: m });
    }
    let available = binomial(m, k);
    if num_marginals as u128 > available {
        return Err(WorkloadError::TooManyMarginals { requested: num_marginals, available });
    }
    let mut tuples = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        tuples.push(current.clone());
        // advance to the next combination in lexicographic order
        let Some(i) = (0..k).rev().find(|&i| current[i] < m - k + i) else { break };
        current[i] += 1;
        for j in i + 1..k {
            current[j] = current[j - 1] + 1;
        }
    }
    let mut rng = seeds::sub_rng(seed, "workload", 0);
    let mut picked = rand::seq::index::sample(&mut rng, tuples.len(), num_marginals).into_vec();
    picked.sort_unstable();

    let layout = schema.layout();
    let mut base = Vec::new();
    for t in picked {
        let features = &tuples[t];
        let mut targets = vec![0usize; k];
        loop {
            base.push(MarginalQuery::new(&layout, features, &targets, false)?);
            let Some(i) = (0..k).rev().find(|&i| targets[i] + 1 < layout.group_size(features[i])) else {
                break;
            };
            targets[i] += 1;
            for slot in targets.iter_mut().skip(i + 1) {
                *slot = 0;
            }
        }
    }
    Ok(Workload::closed_under_negation(base))
}

/// `q(data)` for a single query.
pub fn eval_on_dataset<W: WeightedRecords + ?Sized>(q: &MarginalQuery, data: &W) -> Result<f64, WorkloadError> {
    q.answer(data)
}

/// `max_q |q(D) − q(D̂)|` over the workload.
pub fn max_error<A, B>(w: &Workload, d: &A, synthetic: &B) -> Result<f64, WorkloadError>
where
    A: WeightedRecords + ?Sized,
    B: WeightedRecords + ?Sized,
{
    let truth = w.answers(d)?;
    max_error_against(w, &truth, synthetic)
}

/// Same as [`max_error`] with the true answers already computed.
pub fn max_error_against<B: WeightedRecords + ?Sized>(
    w: &Workload,
    truth: &AnswerVector,
    synthetic: &B,
) -> Result<f64, WorkloadError> {
    if truth.answers.len() != w.len() {
        return Err(WorkloadError::Mismatch("answer vector length differs from workload".into()));
    }
    let est = w.answers(synthetic)?;
    Ok(truth
        .answers
        .iter()
        .zip(&est.answers)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
