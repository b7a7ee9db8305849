//! Linear optimization over one-hot records.
//!
//! A problem asks for a record `x` maximizing `Σ wᵢ qᵢ(x) − ⟨x, σ⟩` where each
//! `qᵢ` is a marginal query. The oracle only ever sees queries, weights and
//! noise; it never touches private data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::{GroupLayout, RecordBits};
use crate::seeds;
use crate::workload::{MarginalQuery, WeightedRecords, WorkloadError};

/// Default bound on `Π |group|` for exhaustive search.
pub const DEFAULT_EXACT_CAP: u128 = 1 << 24;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("search space of {size} assignments exceeds the cap of {cap}")]
    SearchSpaceTooLarge { size: u128, cap: u128 },
    #[error("invalid oracle problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleProblem {
    layout: GroupLayout,
    weighted_queries: Vec<(MarginalQuery, f64)>,
    perturbation: Vec<f64>,
}

impl OracleProblem {
    pub fn new(
        layout: GroupLayout,
        weighted_queries: Vec<(MarginalQuery, f64)>,
        perturbation: Vec<f64>,
    ) -> Result<Self, OracleError> {
        let d = layout.dimension();
        if perturbation.len() != d {
            return Err(OracleError::InvalidProblem(format!(
                "perturbation has length {}, expected {d}",
                perturbation.len()
            )));
        }
        if perturbation.iter().any(|s| !s.is_finite()) {
            return Err(OracleError::InvalidProblem("non-finite perturbation".into()));
        }
        for (q, w) in &weighted_queries {
            if !w.is_finite() {
                return Err(OracleError::InvalidProblem("non-finite weight".into()));
            }
            if q.bits().len() != d {
                return Err(OracleError::InvalidProblem(
                    WorkloadError::DimensionMismatch { expected: d, found: q.bits().len() }.to_string(),
                ));
            }
        }
        Ok(OracleProblem { layout, weighted_queries, perturbation })
    }

    /// A problem with no linear term.
    pub fn unperturbed(layout: GroupLayout, weighted_queries: Vec<(MarginalQuery, f64)>) -> Result<Self, OracleError> {
        let d = layout.dimension();
        OracleProblem::new(layout, weighted_queries, vec![0.0; d])
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn weighted_queries(&self) -> &[(MarginalQuery, f64)] {
        &self.weighted_queries
    }

    pub fn perturbation(&self) -> &[f64] {
        &self.perturbation
    }

    /// `Σ wᵢ qᵢ(x) − ⟨x, σ⟩`.
    pub fn objective(&self, x: &RecordBits) -> f64 {
        let queries: f64 = self
            .weighted_queries
            .iter()
            .filter(|(q, _)| q.eval_unchecked(x))
            .map(|(_, w)| w)
            .sum();
        let linear: f64 = x.ones().map(|b| self.perturbation[b]).sum();
        queries - linear
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub record: RecordBits,
    pub objective: f64,
    /// True when the backend guarantees global optimality.
    pub exact: bool,
}

/// The objective rewritten over per-group value choices: a constant, a
/// per-(group, value) linear table and conjunction terms of arity ≥ 2.
#[derive(Debug)]
struct Compiled {
    sizes: Vec<usize>,
    constant: f64,
    linear: Vec<Vec<f64>>,
    conj: Vec<(Vec<(usize, usize)>, f64)>,
    /// For each group, `(term, required value, position of group in term)`.
    by_group: Vec<Vec<(usize, usize, usize)>>,
}

impl Compiled {
    fn new(p: &OracleProblem) -> Self {
        let layout = &p.layout;
        let sizes = layout.sizes();
        let mut linear: Vec<Vec<f64>> = (0..sizes.len())
            .map(|g| layout.group_range(g).map(|b| -p.perturbation[b]).collect())
            .collect();
        let mut constant = 0.0;
        let mut terms: BTreeMap<Vec<(usize, usize)>, f64> = BTreeMap::new();
        for (q, w) in &p.weighted_queries {
            if *w == 0.0 {
                continue;
            }
            let signed = if q.is_negated() {
                // w·(1 − conj)
                constant += w;
                -w
            } else {
                *w
            };
            if q.arity() == 1 {
                linear[q.features()[0]][q.targets()[0]] += signed;
            } else {
                let key: Vec<(usize, usize)> = q.features().iter().copied().zip(q.targets().iter().copied()).collect();
                *terms.entry(key).or_insert(0.0) += signed;
            }
        }
        let conj: Vec<_> = terms.into_iter().filter(|(_, w)| *w != 0.0).collect();
        let mut by_group = vec![Vec::new(); sizes.len()];
        for (c, (pairs, _)) in conj.iter().enumerate() {
            for (pos, &(g, v)) in pairs.iter().enumerate() {
                by_group[g].push((c, v, pos));
            }
        }
        Compiled { sizes, constant, linear, conj, by_group }
    }

    fn evaluate(&self, values: &[usize]) -> f64 {
        let lin: f64 = values.iter().enumerate().map(|(g, &v)| self.linear[g][v]).sum();
        let conj: f64 = self
            .conj
            .iter()
            .filter(|(pairs, _)| pairs.iter().all(|&(g, v)| values[g] == v))
            .map(|(_, w)| w)
            .sum();
        self.constant + lin + conj
    }

    /// Objective change from moving group `g` to value `v`.
    fn move_delta(&self, values: &[usize], g: usize, v: usize) -> f64 {
        let cur = values[g];
        let mut delta = self.linear[g][v] - self.linear[g][cur];
        for &(c, req, _) in &self.by_group[g] {
            if req != v && req != cur {
                continue;
            }
            let (pairs, w) = &self.conj[c];
            if pairs.iter().all(|&(h, r)| h == g || values[h] == r) {
                delta += if req == v { *w } else { -*w };
            }
        }
        delta
    }
}

/// True when `a` is the lexicographically smaller record. A larger value index
/// in the first differing group puts the set bit later, hence smaller.
fn lex_smaller(a: &[usize], b: &[usize]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return x > y;
        }
    }
    false
}

struct Search<'a> {
    c: &'a Compiled,
    matched: Vec<usize>,
    /// Optimistic positive mass of live terms, keyed by their next group and value.
    pending: Vec<Vec<f64>>,
    values: Vec<usize>,
    best: f64,
    best_values: Option<Vec<usize>>,
}

impl Search<'_> {
    fn bound_from(&self, g: usize) -> f64 {
        (g..self.c.sizes.len())
            .map(|h| {
                self.c.linear[h]
                    .iter()
                    .zip(&self.pending[h])
                    .map(|(l, p)| l + p)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum()
    }

    fn dfs(&mut self, g: usize, value: f64) {
        let groups = self.c.sizes.len();
        if g == groups {
            let better = value > self.best
                || (value == self.best
                    && self.best_values.as_ref().is_some_and(|b| lex_smaller(&self.values, b)));
            if better || self.best_values.is_none() {
                self.best = value;
                self.best_values = Some(self.values.clone());
            }
            return;
        }
        // most promising values first; larger index first among equals
        let mut order: Vec<usize> = (0..self.c.sizes[g]).collect();
        let score = |v: usize| self.c.linear[g][v] + self.pending[g][v];
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(b.cmp(&a)));

        for v in order {
            let mut gained = self.c.linear[g][v];
            let mut moved = Vec::new();
            for &(c, req, pos) in &self.c.by_group[g] {
                if self.matched[c] != pos || req != v {
                    continue;
                }
                self.matched[c] += 1;
                let (pairs, w) = &self.c.conj[c];
                if self.matched[c] == pairs.len() {
                    gained += w;
                } else if *w > 0.0 {
                    let (h, r) = pairs[pos + 1];
                    self.pending[h][r] += w;
                    moved.push((h, r, *w));
                }
            }
            let next = value + gained;
            let bound = next + self.bound_from(g + 1);
            let slack = 1e-9 * (1.0 + bound.abs());
            if self.best_values.is_none() || bound + slack >= self.best {
                self.values[g] = v;
                self.dfs(g + 1, next);
            }
            for (h, r, w) in moved {
                self.pending[h][r] -= w;
            }
            for &(c, req, pos) in &self.c.by_group[g] {
                if req == v && self.matched[c] == pos + 1 {
                    self.matched[c] -= 1;
                }
            }
        }
    }
}

fn solution(p: &OracleProblem, values: &[usize], exact: bool) -> OracleSolution {
    let record = p.layout.record_from_values(values);
    OracleSolution { objective: p.objective(&record), record, exact }
}

/// Globally optimal record by branch and bound over one-hot assignments.
/// Ties go to the lexicographically smallest record.
pub fn solve_exact(p: &OracleProblem, cap: u128) -> Result<OracleSolution, OracleError> {
    let size = p.layout.domain_size();
    if size > cap {
        return Err(OracleError::SearchSpaceTooLarge { size, cap });
    }
    let c = Compiled::new(p);
    let mut pending: Vec<Vec<f64>> = c.sizes.iter().map(|&s| vec![0.0; s]).collect();
    for (pairs, w) in &c.conj {
        if *w > 0.0 {
            pending[pairs[0].0][pairs[0].1] += w;
        }
    }
    let mut search = Search {
        c: &c,
        matched: vec![0; c.conj.len()],
        pending,
        values: vec![0; c.sizes.len()],
        best: f64::NEG_INFINITY,
        best_values: None,
    };
    search.dfs(0, c.constant);
    let values = search.best_values.expect("at least one assignment exists");
    Ok(solution(p, &values, true))
}

/// Multi-restart best-improvement search over single-group moves.
pub fn solve_local_search<R: rand::Rng + ?Sized>(p: &OracleProblem, restarts: usize, rng: &mut R) -> OracleSolution {
    let c = Compiled::new(p);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 0..restarts.max(1) {
        let mut values: Vec<usize> = if r == 0 {
            c.linear
                .iter()
                .map(|row| {
                    (0..row.len()).rev().max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap()
                })
                .collect()
        } else {
            c.sizes.iter().map(|&s| rng.random_range(0..s)).collect()
        };
        loop {
            let mut step: Option<(f64, usize, usize)> = None;
            for g in 0..c.sizes.len() {
                for v in 0..c.sizes[g] {
                    if v == values[g] {
                        continue;
                    }
                    let delta = c.move_delta(&values, g, v);
                    if delta > 1e-12 && step.is_none_or(|(d, _, _)| delta > d) {
                        step = Some((delta, g, v));
                    }
                }
            }
            match step {
                Some((_, g, v)) => values[g] = v,
                None => break,
            }
        }
        let value = c.evaluate(&values);
        let improves = match &best {
            None => true,
            Some((b, bv)) => value > *b || (value == *b && lex_smaller(&values, bv)),
        };
        if improves {
            best = Some((value, values));
        }
    }
    let (_, values) = best.expect("at least one restart");
    solution(p, &values, false)
}

fn term(coef: f64, var: &str) -> String {
    if coef < 0.0 {
        format!(" - {} {var}", -coef)
    } else {
        format!(" + {coef} {var}")
    }
}

/// Renders the problem as an LP-format integer program with indicator
/// variables `c0..c{t-1}` for the queries and `x0..x{d-1}` for the bits.
pub fn mip_text(p: &OracleProblem) -> String {
    let d = p.layout.dimension();
    let mut out = String::new();
    out.push_str("\\ oracle problem: maximize weighted query indicators minus a linear perturbation\n");
    out.push_str("Maximize\n obj:");
    let mut any = false;
    for (i, (_, w)) in p.weighted_queries.iter().enumerate() {
        out.push_str(&term(*w, &format!("c{i}")));
        any = true;
    }
    for (j, s) in p.perturbation.iter().enumerate() {
        if *s != 0.0 {
            out.push_str(&term(-s, &format!("x{j}")));
            any = true;
        }
    }
    if !any {
        out.push_str(" + 0 x0");
    }
    out.push_str("\nSubject To\n");
    for (i, (q, w)) in p.weighted_queries.iter().enumerate() {
        let k = q.arity();
        let xs: Vec<String> = q.bits().ones().map(|b| format!("x{b}")).collect();
        let sum = xs.join(" + ");
        let neg_sum: String = xs.iter().map(|x| format!(" - {x}")).collect();
        // c may only be 1 when the query holds (positive weight), or must be 1
        // when it holds (negative weight)
        let line = match (q.is_negated(), *w >= 0.0) {
            (false, true) => format!(" q{i}: {sum} - {k} c{i} >= 0"),
            (false, false) => format!(" q{i}: {sum} - 1 c{i} <= {}", k - 1),
            (true, true) => format!(" q{i}:{neg_sum} - 1 c{i} >= -{k}"),
            (true, false) => format!(" q{i}: {sum} + {k} c{i} >= {k}"),
        };
        let _ = writeln!(out, "{line}");
    }
    for g in 0..p.layout.num_groups() {
        let vars: Vec<String> = p.layout.group_range(g).map(|b| format!("x{b}")).collect();
        let _ = writeln!(out, " g{g}: {} = 1", vars.join(" + "));
    }
    out.push_str("Binary\n");
    let xs: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let _ = writeln!(out, " {}", xs.join(" "));
    if !p.weighted_queries.is_empty() {
        let cs: Vec<String> = (0..p.weighted_queries.len()).map(|i| format!("c{i}")).collect();
        let _ = writeln!(out, " {}", cs.join(" "));
    }
    out.push_str("End\n");
    out
}

pub fn export_mip(p: &OracleProblem, path: &Path) -> Result<(), OracleError> {
    std::fs::write(path, mip_text(p))?;
    Ok(())
}

/// Which solver answers oracle calls.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleBackend {
    Exact { cap: u128 },
    Local { restarts: usize },
    /// Writes every problem to `dir` as an LP file, then solves it by local search.
    Export { dir: PathBuf, restarts: usize },
}

impl Default for OracleBackend {
    fn default() -> Self {
        OracleBackend::Exact { cap: DEFAULT_EXACT_CAP }
    }
}

impl OracleBackend {
    pub fn is_exact(&self) -> bool {
        matches!(self, OracleBackend::Exact { .. })
    }

    /// Solves `p`; `seed` drives any randomness and names exported files.
    pub fn solve(&self, p: &OracleProblem, seed: u64) -> Result<OracleSolution, OracleError> {
        match self {
            OracleBackend::Exact { cap } => solve_exact(p, *cap),
            OracleBackend::Local { restarts } => {
                Ok(solve_local_search(p, *restarts, &mut seeds::sub_rng(seed, "local-search", 0)))
            }
            OracleBackend::Export { dir, restarts } => {
                export_mip(p, &dir.join(format!("oracle-{seed:016x}.lp")))?;
                Ok(solve_local_search(p, *restarts, &mut seeds::sub_rng(seed, "local-search", 0)))
            }
        }
    }
}

/// `Σⱼ wⱼ (qⱼ(D) − qⱼ(x))` for a weighted query bundle.
pub fn best_response_payoff<D: WeightedRecords + ?Sized>(
    data: &D,
    bundle: &[(MarginalQuery, f64)],
    x: &RecordBits,
) -> Result<f64, WorkloadError> {
    bundle.iter().try_fold(0.0, |acc, (q, w)| {
        let on_x = if q.eval(x)? { 1.0 } else { 0.0 };
        Ok(acc + w * (q.answer(data)? - on_x))
    })
}
