//! zCDP accounting and the private primitives used by the engines.
//!
//! All logarithms are natural. `Exp(η)` and `Lap(η)` are parameterized by
//! their scale `η`.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("delta must lie in (0, 1), got {0}")]
    DeltaOutOfRange(f64),
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("privacy parameter must be nonnegative and finite, got {0}")]
    InvalidCharge(f64),
    #[error("ledger already halted")]
    ChargeAfterHalt,
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("candidate set is invalid: {0}")]
    InvalidCandidates(String),
}

pub fn zcdp_compose(rho1: f64, rho2: f64) -> f64 {
    rho1 + rho2
}

/// An ε-DP mechanism is `ε²/2`-zCDP.
pub fn dp_to_zcdp(epsilon: f64) -> f64 {
    0.5 * epsilon * epsilon
}

fn check_delta(delta: f64) -> Result<f64, PrivacyError> {
    if delta > 0.0 && delta < 1.0 {
        Ok((1.0 / delta).ln())
    } else {
        Err(PrivacyError::DeltaOutOfRange(delta))
    }
}

/// `ε = ρ + 2√(ρ ln(1/δ))`.
pub fn zcdp_to_dp(rho: f64, delta: f64) -> Result<f64, PrivacyError> {
    let l = check_delta(delta)?;
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(PrivacyError::InvalidCharge(rho));
    }
    Ok(rho + 2.0 * (rho * l).sqrt())
}

/// The `ρ` whose conversion at `δ` equals `ε`.
///
/// With `u = √ρ` the conversion is `u² + 2√L u − ε = 0`; the positive root is
/// rewritten as `ε / (√L + √(L + ε))` to avoid cancellation.
pub fn invert_budget(epsilon: f64, delta: f64) -> Result<f64, PrivacyError> {
    let l = check_delta(delta)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(PrivacyError::InvalidEpsilon(epsilon));
    }
    let u = epsilon / (l.sqrt() + (l + epsilon).sqrt());
    Ok(u * u)
}

/// `ε′ = Σ εᵢ(e^{εᵢ} − 1) + √(Σ εᵢ² · ln(1/δ) / 2)`.
pub fn advanced_composition(epsilons: &[f64], delta: f64) -> Result<f64, PrivacyError> {
    let l = check_delta(delta)?;
    if let Some(&bad) = epsilons.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(PrivacyError::InvalidCharge(bad));
    }
    let linear: f64 = epsilons.iter().map(|e| e * e.exp_m1()).sum();
    let squares: f64 = epsilons.iter().map(|e| e * e).sum();
    Ok(linear + (squares * l / 2.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta: f64,
}

impl DpParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, PrivacyError> {
        check_delta(delta)?;
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(PrivacyError::InvalidEpsilon(epsilon));
        }
        Ok(DpParams { epsilon, delta })
    }

    pub fn from_zcdp(rho: f64, delta: f64) -> Result<Self, PrivacyError> {
        Ok(DpParams { epsilon: zcdp_to_dp(rho, delta)?, delta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FilterState {
    Cont,
    Halt,
}

/// Relative slack on the budget comparison so that `T` charges of `ρ/T`
/// do not halt on rounding alone.
const BUDGET_SLACK: f64 = 1e-12;

/// A zCDP privacy filter: halts once the cumulative spend exceeds the budget.
#[derive(Debug, Clone, Serialize)]
pub struct PrivacyLedger {
    budget: Option<f64>,
    spends: Vec<f64>,
    state: FilterState,
    #[serde(skip)]
    sum: f64,
    #[serde(skip)]
    compensation: f64,
}

impl PrivacyLedger {
    pub fn new(budget: f64) -> Result<Self, PrivacyError> {
        if !(budget >= 0.0 && budget.is_finite()) {
            return Err(PrivacyError::InvalidCharge(budget));
        }
        Ok(PrivacyLedger { budget: Some(budget), ..PrivacyLedger::unlimited() })
    }

    /// A ledger that records spends without ever halting.
    pub fn unlimited() -> Self {
        PrivacyLedger { budget: None, spends: Vec::new(), state: FilterState::Cont, sum: 0.0, compensation: 0.0 }
    }

    pub fn charge(&mut self, rho: f64) -> Result<FilterState, PrivacyError> {
        if self.state == FilterState::Halt {
            return Err(PrivacyError::ChargeAfterHalt);
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(PrivacyError::InvalidCharge(rho));
        }
        self.spends.push(rho);
        // Neumaier summation
        let t = self.sum + rho;
        if self.sum.abs() >= rho {
            self.compensation += (self.sum - t) + rho;
        } else {
            self.compensation += (rho - t) + self.sum;
        }
        self.sum = t;
        if let Some(b) = self.budget {
            if self.total() > b * (1.0 + BUDGET_SLACK) {
                self.state = FilterState::Halt;
            }
        }
        Ok(self.state)
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }

    pub fn spends(&self) -> &[f64] {
        &self.spends
    }

    pub fn state(&self) -> FilterState {
        self.state
    }

    pub fn budget(&self) -> Option<f64> {
        self.budget
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }
}

/// Scores for the exponential mechanism with sensitivity `Δ_S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidates {
    scores: Vec<f64>,
    sensitivity: f64,
}

impl ScoredCandidates {
    pub fn new(scores: Vec<f64>, sensitivity: f64) -> Result<Self, PrivacyError> {
        if scores.is_empty() {
            return Err(PrivacyError::InvalidCandidates("no candidates".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(PrivacyError::InvalidCandidates("non-finite score".into()));
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(PrivacyError::InvalidCandidates(format!("sensitivity {sensitivity}")));
        }
        Ok(ScoredCandidates { scores, sensitivity })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn shifted_weights(&self, param: f64) -> Vec<f64> {
        let logits: Vec<f64> = self.scores.iter().map(|s| param * s / (2.0 * self.sensitivity)).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logits.iter().map(|l| (l - top).exp()).collect()
    }
}

/// Selection law of the exponential mechanism, `∝ exp(param·S/(2Δ_S))`.
pub fn selection_probabilities(c: &ScoredCandidates, param: f64) -> Result<Vec<f64>, PrivacyError> {
    if !(param >= 0.0 && param.is_finite()) {
        return Err(PrivacyError::InvalidScale(param));
    }
    let w = c.shifted_weights(param);
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Draws an index with probability `∝ exp(param·S/(2Δ_S))`; one call is
/// `param²/2`-zCDP. Computed in log space by inverse CDF.
pub fn exponential_mechanism<R: Rng + ?Sized>(
    c: &ScoredCandidates,
    param: f64,
    rng: &mut R,
) -> Result<usize, PrivacyError> {
    if !(param >= 0.0 && param.is_finite()) {
        return Err(PrivacyError::InvalidScale(param));
    }
    let w = c.shifted_weights(param);
    let total: f64 = w.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (i, x) in w.iter().enumerate() {
        if target < *x {
            return Ok(i);
        }
        target -= x;
    }
    // rounding left a sliver past the last positive weight
    Ok(w.iter().rposition(|x| *x > 0.0).unwrap_or(w.len() - 1))
}

fn check_scale(eta: f64) -> Result<(), PrivacyError> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(PrivacyError::InvalidScale(eta))
    }
}

/// `d` independent draws from the exponential distribution with mean `η`.
pub fn sample_exponential_vector<R: Rng + ?Sized>(eta: f64, d: usize, rng: &mut R) -> Result<Vec<f64>, PrivacyError> {
    check_scale(eta)?;
    let dist = Exp::new(1.0 / eta).map_err(|_| PrivacyError::InvalidScale(eta))?;
    Ok((0..d).map(|_| dist.sample(rng)).collect())
}

/// `m` independent draws from the Laplace distribution with scale `η`.
pub fn sample_laplace_vector<R: Rng + ?Sized>(eta: f64, m: usize, rng: &mut R) -> Result<Vec<f64>, PrivacyError> {
    check_scale(eta)?;
    Ok((0..m)
        .map(|_| {
            let u: f64 = rng.random::<f64>() - 0.5;
            -eta * u.signum() * (-2.0 * u.abs()).ln_1p()
        })
        .collect())
}
