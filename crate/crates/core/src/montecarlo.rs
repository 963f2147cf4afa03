//! Monte Carlo simulation of both voting scenarios.
//!
//! Every trial owns a ChaCha8 stream keyed by the seed and selected by the
//! trial index. Its first word decides the hypothesis and word `i` drives
//! agent `i`, in both scenarios, so a sequential run with a
//! history-independent policy reproduces a parallel run vote for vote. Trials
//! are sharded across the rayon pool and merged as integer counts, which
//! makes the report independent of the number of workers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Hypothesis;
use crate::sequential::{History, NodeThreshold, PolicyTree};
use crate::team::TeamProblem;

const CHUNK: u64 = 1 << 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub trials: u64,
    pub seed: u64,
    pub h0_trials: u64,
    pub false_alarms: u64,
    pub missed_detections: u64,
    pub empirical_risk: f64,
    pub empirical_pei: f64,
    pub empirical_peii: f64,
    pub ci95_halfwidth: f64,
}

#[derive(Clone, Copy, Default)]
struct Counts {
    h0: u64,
    fa: u64,
    miss: u64,
}

impl Counts {
    fn merge(self, other: Counts) -> Counts {
        Counts {
            h0: self.h0 + other.h0,
            fa: self.fa + other.fa,
            miss: self.miss + other.miss,
        }
    }
}

/// Uniform on the open unit interval from the top 52 bits.
fn uniform(word: u64) -> f64 {
    ((word >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

struct TrialDraws {
    rng: ChaCha8Rng,
}

impl TrialDraws {
    fn new(base: &ChaCha8Rng, trial: u64) -> Self {
        let mut rng = base.clone();
        rng.set_stream(trial);
        rng.set_word_pos(0);
        TrialDraws { rng }
    }

    fn next(&mut self) -> f64 {
        uniform(self.rng.next_u64())
    }
}

fn hypothesis(problem: &TeamProblem, u: f64) -> Hypothesis {
    if u < problem.p0 {
        Hypothesis::H0
    } else {
        Hypothesis::H1
    }
}

fn run<F>(problem: &TeamProblem, trials: u64, seed: u64, trial: F) -> Result<SimReport>
where
    F: Fn(&mut TrialDraws, Hypothesis) -> bool + Sync,
{
    problem.validate()?;
    if trials == 0 {
        return Err(Error::validation("trials", "must be at least 1"));
    }
    let base = ChaCha8Rng::seed_from_u64(seed);
    let chunks = trials.div_ceil(CHUNK);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut counts = Counts::default();
            for t in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let mut draws = TrialDraws::new(&base, t);
                let h = hypothesis(problem, draws.next());
                let one = trial(&mut draws, h);
                match h {
                    Hypothesis::H0 => {
                        counts.h0 += 1;
                        counts.fa += one as u64;
                    }
                    Hypothesis::H1 => counts.miss += !one as u64,
                }
            }
            counts
        })
        .reduce(Counts::default, Counts::merge);
    Ok(report(problem, trials, seed, counts))
}

fn report(problem: &TeamProblem, trials: u64, seed: u64, c: Counts) -> SimReport {
    let t = trials as f64;
    let (fa, miss) = (c.fa as f64, c.miss as f64);
    let h1 = trials - c.h0;
    let mean = (problem.c10 * fa + problem.c01 * miss) / t;
    let second = (problem.c10 * problem.c10 * fa + problem.c01 * problem.c01 * miss) / t;
    let var = (second - mean * mean).max(0.0);
    SimReport {
        trials,
        seed,
        h0_trials: c.h0,
        false_alarms: c.fa,
        missed_detections: c.miss,
        empirical_risk: mean,
        empirical_pei: if c.h0 > 0 { fa / c.h0 as f64 } else { 0.0 },
        empirical_peii: if h1 > 0 { miss / h1 as f64 } else { 0.0 },
        ci95_halfwidth: 1.96 * (var / t).sqrt(),
    }
}

/// Secret-ballot voting: agent `i` votes 1 iff its signal is at least `thresholds[i]`.
pub fn simulate_parallel(problem: &TeamProblem, thresholds: &[f64], trials: u64, seed: u64) -> Result<SimReport> {
    if thresholds.len() != problem.n {
        return Err(Error::validation(
            "thresholds",
            format!("expected {} thresholds, got {}", problem.n, thresholds.len()),
        ));
    }
    if thresholds.iter().any(|t| t.is_nan()) {
        return Err(Error::validation("thresholds", "NaN threshold"));
    }
    let model = problem.model;
    run(problem, trials, seed, |draws, h| {
        let ones = thresholds
            .iter()
            .filter(|&&t| model.quantile(h, draws.next()) >= t)
            .count();
        ones >= problem.l
    })
}

/// Public voting: each agent applies the policy threshold for the votes cast before it.
pub fn simulate_sequential(problem: &TeamProblem, policy: &PolicyTree, trials: u64, seed: u64) -> Result<SimReport> {
    if policy.n() != problem.n || policy.l() != problem.l {
        return Err(Error::validation(
            "policy",
            format!("policy is for {}-out-of-{}", policy.l(), policy.n()),
        ));
    }
    policy.check_coverage()?;
    let thresholds: Vec<f64> = (0..(1usize << problem.n) - 1)
        .map(|k| match policy.threshold_at(&History::from_index(k)) {
            Ok(NodeThreshold::Active(t)) => t,
            // decided histories: the vote is cast but cannot change the outcome
            _ => f64::INFINITY,
        })
        .collect();
    let model = problem.model;
    run(problem, trials, seed, |draws, h| {
        let (mut node, mut ones) = (0usize, 0usize);
        for _ in 0..problem.n {
            let vote = model.quantile(h, draws.next()) >= thresholds[node];
            ones += vote as usize;
            node = 2 * node + 1 + vote as usize;
        }
        ones >= problem.l
    })
}
