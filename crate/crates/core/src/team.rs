//! Bayes risk of a team under an L-out-of-N vote count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{check_probability, ErrorPair, LikelihoodModel};

/// A complete Bayes-risk instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeamProblem {
    /// Prior probability of H0.
    pub p0: f64,
    /// Cost of a false alarm.
    pub c10: f64,
    /// Cost of a missed detection.
    pub c01: f64,
    pub model: LikelihoodModel,
    /// Team size.
    pub n: usize,
    /// Minimum number of 1 votes for a global decision of 1.
    pub l: usize,
}

impl TeamProblem {
    pub fn new(p0: f64, c10: f64, c01: f64, model: LikelihoodModel, n: usize, l: usize) -> Result<Self> {
        let problem = TeamProblem { p0, c10, c01, model, n, l };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(Error::validation("p0", format!("{} must lie strictly between 0 and 1", self.p0)));
        }
        if !(self.c10.is_finite() && self.c10 > 0.0) {
            return Err(Error::validation("c10", format!("{} must be positive", self.c10)));
        }
        if !(self.c01.is_finite() && self.c01 > 0.0) {
            return Err(Error::validation("c01", format!("{} must be positive", self.c01)));
        }
        if self.n == 0 {
            return Err(Error::validation("n", "team needs at least one agent"));
        }
        if self.l == 0 || self.l > self.n {
            return Err(Error::validation("l", format!("{} is outside [1, {}]", self.l, self.n)));
        }
        self.model.validate()
    }

    pub fn p1(&self) -> f64 {
        1.0 - self.p0
    }

    /// Same problem with a different prior on H0; used for the subproblems
    /// that follow an announced vote.
    pub fn with_prior(&self, p0: f64) -> Self {
        TeamProblem { p0, ..*self }
    }

    pub fn with_rule(&self, n: usize, l: usize) -> Self {
        TeamProblem { n, l, ..*self }
    }

    /// `c10 p0 PE_I + c01 p1 PE_II`.
    pub fn risk_of(&self, rates: GlobalErrorRates) -> f64 {
        self.c10 * self.p0 * rates.false_alarm + self.c01 * self.p1() * rates.miss
    }
}

/// Conditional error probabilities of the fused team decision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalErrorRates {
    /// P{team decides 1 | H0}.
    pub false_alarm: f64,
    /// P{team decides 0 | H1}.
    pub miss: f64,
}

/// Distribution of the number of successes among independent Bernoulli trials.
///
/// `dist[k] = P{exactly k successes}`; built by one convolution per trial.
pub(crate) fn count_distribution(probs: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut dist = vec![1.0];
    for p in probs {
        dist.push(0.0);
        for k in (1..dist.len()).rev() {
            dist[k] = dist[k] * (1.0 - p) + dist[k - 1] * p;
        }
        dist[0] *= 1.0 - p;
    }
    dist
}

fn upper_tail(dist: &[f64], k: usize) -> f64 {
    if k >= dist.len() {
        return 0.0;
    }
    if k == 0 {
        return 1.0;
    }
    dist[k..].iter().rev().sum()
}

/// P{sum of independent Bernoulli(`probs[i]`) >= `k`}.
pub fn poisson_binomial_tail(probs: &[f64], k: usize) -> Result<f64> {
    for (i, &p) in probs.iter().enumerate() {
        check_probability(&format!("probs[{i}]"), p)?;
    }
    if k > probs.len() + 1 {
        return Err(Error::validation("k", format!("{k} exceeds {} + 1", probs.len())));
    }
    Ok(upper_tail(&count_distribution(probs.iter().copied()), k))
}

pub(crate) fn global_error_rates_unchecked(pairs: &[ErrorPair], l: usize) -> GlobalErrorRates {
    let n = pairs.len();
    let ones_h0 = count_distribution(pairs.iter().map(|p| p.false_alarm));
    // team misses iff at least n - l + 1 agents vote 0 under H1
    let zeros_h1 = count_distribution(pairs.iter().map(|p| p.miss));
    GlobalErrorRates {
        false_alarm: upper_tail(&ones_h0, l),
        miss: upper_tail(&zeros_h1, n + 1 - l),
    }
}

/// Team error rates when agent `i` has error pair `pairs[i]` and the team
/// decides 1 iff at least `l` agents vote 1.
pub fn global_error_rates(pairs: &[ErrorPair], l: usize) -> Result<GlobalErrorRates> {
    if pairs.is_empty() {
        return Err(Error::validation("pairs", "at least one agent is required"));
    }
    if l == 0 || l > pairs.len() {
        return Err(Error::validation("l", format!("{l} is outside [1, {}]", pairs.len())));
    }
    for (i, p) in pairs.iter().enumerate() {
        check_probability(&format!("pairs[{i}].false_alarm"), p.false_alarm)?;
        check_probability(&format!("pairs[{i}].miss"), p.miss)?;
    }
    Ok(global_error_rates_unchecked(pairs, l))
}

/// Bayes risk of the parallel team with per-agent `thresholds`.
pub fn bayes_risk(problem: &TeamProblem, thresholds: &[f64]) -> Result<f64> {
    if thresholds.len() != problem.n {
        return Err(Error::validation(
            "thresholds",
            format!("expected {} thresholds, got {}", problem.n, thresholds.len()),
        ));
    }
    if let Some(t) = thresholds.iter().find(|t| t.is_nan()) {
        return Err(Error::validation("thresholds", format!("{t} is not a threshold")));
    }
    let pairs: Vec<ErrorPair> = thresholds.iter().map(|&t| problem.model.error_probs(t)).collect();
    Ok(problem.risk_of(global_error_rates_unchecked(&pairs, problem.l)))
}

/// Bayes risk when every agent uses the same threshold.
pub fn identical_risk(problem: &TeamProblem, threshold: f64) -> f64 {
    let pair = problem.model.error_probs(threshold);
    problem.risk_of(global_error_rates_unchecked(&vec![pair; problem.n], problem.l))
}

/// Closed-form risk of two agents under the OR rule:
/// `c10 p0 (a1 + a2 - a1 a2) + c01 p1 b1 b2`.
pub fn two_agent_or_risk(problem: &TeamProblem, t1: f64, t2: f64) -> Result<f64> {
    if problem.n != 2 || problem.l != 1 {
        return Err(Error::validation(
            "n/l",
            format!("closed form needs a 1-out-of-2 rule, got {}-out-of-{}", problem.l, problem.n),
        ));
    }
    let first = problem.model.error_probs(t1);
    let second = problem.model.error_probs(t2);
    let (a1, b1) = (first.false_alarm, first.miss);
    let (a2, b2) = (second.false_alarm, second.miss);
    Ok(problem.c10 * problem.p0 * (a1 + a2 - a1 * a2) + problem.c01 * problem.p1() * b1 * b2)
}
