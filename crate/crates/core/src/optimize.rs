//! Threshold optimization in the parallel scenario.
//!
//! `optimize_identical_threshold` searches the common threshold that all agents
//! share; `pbpo_optimize` runs person-by-person (cyclic coordinate) descent over
//! heterogeneous thresholds, which is how identical thresholds are checked to be
//! optimal rather than assumed.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{Hypothesis, LikelihoodModel};
use crate::scalar::{minimize, SearchSpec};
use crate::team::{count_distribution, identical_risk, TeamProblem};

/// Probes used to bracket the common-threshold minimum.
pub const IDENTICAL_PROBES: usize = 512;
/// Threshold tolerance of the golden-section refinement.
pub const THRESHOLD_TOL: f64 = 1e-10;
/// Residual tolerance below which a stationary point is certified.
pub const RESIDUAL_TOL: f64 = 1e-8;
pub const PBPO_MAX_SWEEPS: usize = 200;
pub const PBPO_STEP_TOL: f64 = 1e-9;
const PBPO_PROBES: usize = 64;
/// Longest pattern move, in multiples of the last sweep's displacement.
const PATTERN_REACH: f64 = 1e4;
/// Central mass of the prior mixture covered by the probe grid.
const PROBE_MASS: f64 = 0.9999;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizationResult {
    pub thresholds: Vec<f64>,
    pub risk: f64,
    /// Common-threshold residual at the mean of `thresholds`.
    pub stationarity_residual: f64,
    pub residual_degenerate: bool,
    pub iterations: usize,
    pub converged: bool,
    /// Several separated local minima were seen while bracketing.
    pub multimodal: bool,
    /// The optimum sits on the lower edge of the signal support, where the
    /// stationarity equation is replaced by a one-sided condition.
    pub on_boundary: bool,
    /// Risk after every PBPO sweep; empty for the identical-threshold search.
    pub trajectory: Vec<f64>,
}

/// Signed residual of the critical-vote condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Residual {
    pub value: f64,
    /// A ratio term vanished; `value` is then infinite or NaN.
    pub degenerate: bool,
}

/// `LR(t) - c10 q a^(L-1) (1-a)^(M-L) / (c01 (1-q) b^(M-L) (1-b)^(L-1))` with
/// `(a, b) = error_probs(t)`, for `M` agents, rule `L`, and belief `q` on H0.
pub(crate) fn critical_vote_residual(
    model: &LikelihoodModel,
    q: f64,
    c10: f64,
    c01: f64,
    m: usize,
    l: usize,
    t: f64,
) -> Residual {
    let pair = model.error_probs(t);
    let (a, b) = (pair.false_alarm, pair.miss);
    let ones = (l - 1) as i32;
    let zeros = (m - l) as i32;
    let num = c10 * q * a.powi(ones) * (1.0 - a).powi(zeros);
    let den = c01 * (1.0 - q) * b.powi(zeros) * (1.0 - b).powi(ones);
    let lr = model.likelihood_ratio_unchecked(t);
    let degenerate = den == 0.0 || num == 0.0 || !lr.is_finite();
    Residual {
        value: lr - num / den,
        degenerate,
    }
}

/// Residual of the stationarity equation of the common-threshold risk for the
/// problem's own `n` and `l`.
pub fn stationarity_residual(problem: &TeamProblem, threshold: f64) -> Residual {
    critical_vote_residual(
        &problem.model,
        problem.p0,
        problem.c10,
        problem.c01,
        problem.n,
        problem.l,
        threshold,
    )
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |c, j| c * (n - j) as f64 / (j + 1) as f64)
}

/// Exact derivative of the common-threshold risk.
pub fn identical_risk_derivative(problem: &TeamProblem, t: f64) -> f64 {
    let model = &problem.model;
    let (lo, _) = model.support();
    if !t.is_finite() || t < lo {
        return 0.0;
    }
    let pair = model.error_probs(t);
    let (a, b) = (pair.false_alarm, pair.miss);
    let (n, l) = (problem.n, problem.l);
    let weight = n as f64 * binomial(n - 1, l - 1);
    let crit0 = a.powi(l as i32 - 1) * (1.0 - a).powi((n - l) as i32);
    let crit1 = (1.0 - b).powi(l as i32 - 1) * b.powi((n - l) as i32);
    let f0 = model.density_unchecked(Hypothesis::H0, t);
    let f1 = model.density_unchecked(Hypothesis::H1, t);
    weight * (problem.c01 * problem.p1() * f1 * crit1 - problem.c10 * problem.p0 * f0 * crit0)
}

/// Probe range: the central 99.99% of the prior mixture, extended to the
/// lower support edge when the support is bounded below.
pub(crate) fn probe_range(model: &LikelihoodModel, p0: f64) -> (f64, f64) {
    let tail = 0.5 * (1.0 - PROBE_MASS);
    let (slo, _) = model.support();
    let lo = if slo.is_finite() {
        slo
    } else {
        model.mixture_quantile(p0, tail)
    };
    (lo, model.mixture_quantile(p0, 1.0 - tail))
}

pub(crate) fn search_spec(model: &LikelihoodModel, p0: f64, probes: usize) -> SearchSpec {
    let p0 = p0.clamp(1e-12, 1.0 - 1e-12);
    let (lo, hi) = probe_range(model, p0);
    SearchSpec {
        lo,
        hi,
        support: model.support(),
        probes,
        tol: THRESHOLD_TOL,
    }
}

/// Optimal common threshold `lambda*` of the parallel team.
pub fn optimize_identical_threshold(problem: &TeamProblem) -> Result<OptimizationResult> {
    problem.validate()?;
    let slope = |t: f64| identical_risk_derivative(problem, t);
    let found = minimize(
        |t| identical_risk(problem, t),
        Some(&slope),
        search_spec(&problem.model, problem.p0, IDENTICAL_PROBES),
    );
    if found.multimodal {
        log::warn!("common-threshold risk has several local minima; keeping the global grid winner");
    }
    let lambda = found.x;
    let residual = stationarity_residual(problem, lambda);
    let on_boundary = lambda == problem.model.support().0;
    let converged = if on_boundary {
        identical_risk_derivative(problem, lambda) >= 0.0
    } else {
        !residual.degenerate && residual.value.abs() <= RESIDUAL_TOL
    };
    Ok(OptimizationResult {
        thresholds: vec![lambda; problem.n],
        risk: identical_risk(problem, lambda),
        stationarity_residual: residual.value,
        residual_degenerate: residual.degenerate,
        iterations: found.evaluations,
        converged,
        multimodal: found.multimodal,
        on_boundary,
        trajectory: Vec::new(),
    })
}

/// Probabilities the other agents put on the critical count and beyond.
struct LeaveOneOut {
    /// P{others' ones >= l | H0}
    fa_base: f64,
    /// P{others' ones == l-1 | H0}
    fa_pivot: f64,
    /// P{others' ones <= l-2 | H1}
    miss_base: f64,
    /// P{others' ones == l-1 | H1}
    miss_pivot: f64,
}

fn leave_one_out(problem: &TeamProblem, thresholds: &[f64], agent: usize) -> LeaveOneOut {
    let pairs: Vec<_> = thresholds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != agent)
        .map(|(_, &t)| problem.model.error_probs(t))
        .collect();
    let ones_h0 = count_distribution(pairs.iter().map(|p| p.false_alarm));
    let ones_h1 = count_distribution(pairs.iter().map(|p| 1.0 - p.miss));
    let l = problem.l;
    LeaveOneOut {
        fa_base: ones_h0[l..].iter().sum(),
        fa_pivot: ones_h0[l - 1],
        miss_base: ones_h1[..l - 1].iter().sum(),
        miss_pivot: ones_h1[l - 1],
    }
}

fn threshold_change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

/// Line search along the last sweep's displacement; coordinate sweeps crawl
/// along narrow valleys of the risk surface. Kept only if the risk drops.
fn pattern_move(problem: &TeamProblem, thresholds: &mut [f64], before: &[f64]) {
    let step: Vec<f64> = thresholds
        .iter()
        .zip(before)
        .map(|(&t, &b)| if t.is_finite() && b.is_finite() { t - b } else { 0.0 })
        .collect();
    if step.iter().all(|&d| d == 0.0) {
        return;
    }
    let (lo, hi) = problem.model.support();
    let base = thresholds.to_vec();
    let moved = |alpha: f64| -> Vec<f64> {
        base.iter()
            .zip(&step)
            .map(|(&t, &d)| (t + alpha * d).clamp(lo, hi))
            .collect()
    };
    let risk = |alpha: f64| crate::team::bayes_risk(problem, &moved(alpha)).unwrap_or(f64::INFINITY);
    let spec = SearchSpec {
        lo: 0.0,
        hi: PATTERN_REACH,
        support: (0.0, PATTERN_REACH),
        probes: 17,
        tol: 1e-6,
    };
    let found = minimize(risk, None, spec);
    if found.x > 0.0 && found.fx < risk(0.0) {
        thresholds.copy_from_slice(&moved(found.x));
    }
}

/// Person-by-person optimization from `init`, sweeping agents `0..n` cyclically.
pub fn pbpo_optimize(problem: &TeamProblem, init: &[f64]) -> Result<OptimizationResult> {
    problem.validate()?;
    if init.len() != problem.n {
        return Err(Error::validation(
            "init",
            format!("expected {} thresholds, got {}", problem.n, init.len()),
        ));
    }
    let mut thresholds = init.to_vec();
    let initial_risk = crate::team::bayes_risk(problem, &thresholds)?;
    let model = problem.model;
    let (w0, w1) = (problem.c10 * problem.p0, problem.c01 * problem.p1());
    let spec = search_spec(&model, problem.p0, PBPO_PROBES);
    let mut trajectory = vec![initial_risk];
    let mut sweeps = 0;
    let mut converged = false;
    let mut multimodal = false;

    while sweeps < PBPO_MAX_SWEEPS {
        sweeps += 1;
        let mut max_step: f64 = 0.0;
        let before = thresholds.clone();
        for agent in 0..problem.n {
            let loo = leave_one_out(problem, &thresholds, agent);
            if loo.fa_pivot == 0.0 && loo.miss_pivot == 0.0 {
                // this agent's vote never changes the outcome
                continue;
            }
            let risk = |t: f64| {
                let pair = model.error_probs(t);
                w0 * (loo.fa_base + loo.fa_pivot * pair.false_alarm)
                    + w1 * (loo.miss_base + loo.miss_pivot * pair.miss)
            };
            let slope = |t: f64| {
                w1 * loo.miss_pivot * model.density_unchecked(Hypothesis::H1, t)
                    - w0 * loo.fa_pivot * model.density_unchecked(Hypothesis::H0, t)
            };
            let found = minimize(risk, Some(&slope), spec);
            multimodal |= found.multimodal;
            if found.fx <= risk(thresholds[agent]) {
                max_step = max_step.max(threshold_change(found.x, thresholds[agent]));
                thresholds[agent] = found.x;
            }
        }
        if max_step >= PBPO_STEP_TOL {
            pattern_move(problem, &mut thresholds, &before);
        }
        trajectory.push(crate::team::bayes_risk(problem, &thresholds)?);
        if max_step < PBPO_STEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("PBPO did not settle within {PBPO_MAX_SWEEPS} sweeps");
    }

    let finite: Vec<f64> = thresholds.iter().copied().filter(|t| t.is_finite()).collect();
    let mean = if finite.is_empty() {
        thresholds[0]
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let residual = stationarity_residual(problem, mean);
    let on_boundary = thresholds.iter().all(|&t| t == model.support().0);
    Ok(OptimizationResult {
        risk: crate::team::bayes_risk(problem, &thresholds)?,
        thresholds,
        stationarity_residual: residual.value,
        residual_degenerate: residual.degenerate,
        iterations: sweeps,
        converged,
        multimodal,
        on_boundary,
        trajectory,
    })
}

/// Outcome of PBPO from several random starting points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PbpoMultistart {
    pub lambda_star: f64,
    pub identical_risk: f64,
    pub runs: Vec<OptimizationResult>,
    /// Largest within-run spread `max_i t_i - min_i t_i`.
    pub spread: f64,
    /// Largest `R(lambda*) - R(pbpo)`; positive would mean PBPO beat identical thresholds.
    pub identical_gap: f64,
    /// Largest `|R(pbpo) - R(lambda*)|`.
    pub risk_gap: f64,
}

impl PbpoMultistart {
    pub fn best(&self) -> &OptimizationResult {
        self.runs
            .iter()
            .min_by(|a, b| a.risk.total_cmp(&b.risk))
            .expect("at least one run")
    }
}

/// Half-width of the window around `lambda*` that PBPO starts are drawn from.
pub const PBPO_INIT_RADIUS: f64 = 0.5;

/// PBPO from `starts` initial vectors drawn uniformly from `lambda* ± 0.5`
/// intersected with the support, on ChaCha8 stream `stream` of `seed`.
pub fn pbpo_multistart(problem: &TeamProblem, starts: usize, seed: u64, stream: u64) -> Result<PbpoMultistart> {
    use rand::{Rng, SeedableRng};
    if starts == 0 {
        return Err(Error::validation("pbpo_inits", "must be at least 1"));
    }
    let identical = optimize_identical_threshold(problem)?;
    let lambda = identical.thresholds[0];
    let (slo, shi) = problem.model.support();
    let (lo, hi) = ((lambda - PBPO_INIT_RADIUS).max(slo), (lambda + PBPO_INIT_RADIUS).min(shi));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut runs = Vec::with_capacity(starts);
    for _ in 0..starts {
        let init: Vec<f64> = (0..problem.n).map(|_| rng.random_range(lo..hi)).collect();
        runs.push(pbpo_optimize(problem, &init)?);
    }
    let mut out = PbpoMultistart {
        lambda_star: lambda,
        identical_risk: identical.risk,
        runs,
        spread: 0.0,
        identical_gap: f64::NEG_INFINITY,
        risk_gap: 0.0,
    };
    for run in &out.runs {
        let (mn, mx) = run
            .thresholds
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
        out.spread = out.spread.max(if mn == mx { 0.0 } else { mx - mn });
        out.identical_gap = out.identical_gap.max(identical.risk - run.risk);
        out.risk_gap = out.risk_gap.max((run.risk - identical.risk).abs());
    }
    Ok(out)
}
