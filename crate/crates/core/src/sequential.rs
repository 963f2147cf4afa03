//! The sequential (public-vote) scenario.
//!
//! Agents vote in a fixed order and each sees every earlier vote. A policy
//! assigns a threshold to every vote history. After a vote the remaining
//! agents face the same kind of problem with a revised belief on H0 and a
//! shrunken fusion rule: a 0 vote keeps `L` and drops one agent, a 1 vote
//! drops one agent and one required vote.
//!
//! Histories are stored in heap order: the root (empty history) is node 0 and
//! the children of node `k` are `2k + 1` (vote 0) and `2k + 2` (vote 1), so a
//! team of `N` agents has `2^N - 1` decision nodes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::models::{check_probability, ErrorPair, Hypothesis};
use crate::optimize::{critical_vote_residual, optimize_identical_threshold, search_spec, Residual};
use crate::scalar::{minimize, SearchSpec};
use crate::team::{identical_risk, GlobalErrorRates, TeamProblem};

/// Largest team for which a full policy tree is built.
pub const MAX_TREE_AGENTS: usize = 14;
/// Largest subproblem the exact nested [`value`] recursion accepts.
pub const MAX_VALUE_AGENTS: usize = 5;
const NODE_PROBES: usize = 64;
const MAX_POLICY_SWEEPS: usize = 500;
const POLICY_STEP_TOL: f64 = 1e-13;
const RISK_TIE_ULPS: f64 = 64.0;
const VALUE_PROBES: usize = 16;
const VALUE_TOL: f64 = 1e-8;

/// The votes cast so far, earliest first; `true` is a vote for 1.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct History(Vec<bool>);

impl History {
    pub fn root() -> Self {
        History(Vec::new())
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        History(bits.to_vec())
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn child(&self, vote: bool) -> Self {
        let mut bits = self.0.clone();
        bits.push(vote);
        History(bits)
    }

    /// Heap index of this history.
    pub fn index(&self) -> usize {
        self.0.iter().fold(0, |k, &b| 2 * k + 1 + b as usize)
    }

    pub fn from_index(mut k: usize) -> Self {
        let mut bits = Vec::new();
        while k > 0 {
            let vote = k.is_multiple_of(2);
            bits.push(vote);
            k = (k - 1) / 2;
        }
        bits.reverse();
        History(bits)
    }
}

impl fmt::Display for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for History {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::validation("history", format!("unexpected character {other:?} in {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(History)
    }
}

/// Belief on H0 together with the fusion rule still in force.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeliefState {
    pub q: f64,
    pub n_remaining: usize,
    /// 1 votes still needed for a global 1; `<= 0` or `> n_remaining` means decided.
    pub l_remaining: i64,
}

impl BeliefState {
    pub fn root(problem: &TeamProblem) -> Self {
        BeliefState {
            q: problem.p0,
            n_remaining: problem.n,
            l_remaining: problem.l as i64,
        }
    }

    /// The global decision if it no longer depends on the remaining votes.
    pub fn decided(&self) -> Option<bool> {
        if self.l_remaining <= 0 {
            Some(true)
        } else if self.l_remaining > self.n_remaining as i64 {
            Some(false)
        } else {
            None
        }
    }
}

/// Posterior on H0 after observing `vote` from an agent with error pair `pair`.
pub fn belief_update(q: f64, pair: ErrorPair, vote: bool) -> Result<f64> {
    check_probability("q", q)?;
    let (a, b) = (pair.false_alarm, pair.miss);
    let (h0, h1) = if vote { (q * a, (1.0 - q) * (1.0 - b)) } else { (q * (1.0 - a), (1.0 - q) * b) };
    let total = h0 + h1;
    if total <= 0.0 {
        return Err(Error::ImpossibleObservation { decision: vote as u8 });
    }
    Ok(h0 / total)
}

/// The fusion rule faced by the next agent; the belief is carried unchanged.
pub fn fusion_rule_update(state: BeliefState, vote: bool) -> Result<BeliefState> {
    if state.n_remaining == 0 {
        return Err(Error::NoAgentsRemaining);
    }
    Ok(BeliefState {
        q: state.q,
        n_remaining: state.n_remaining - 1,
        l_remaining: state.l_remaining - vote as i64,
    })
}

/// Threshold stored at one history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeThreshold {
    Active(f64),
    /// The global decision is already fixed at this history.
    DontCare,
}

impl NodeThreshold {
    pub fn active(self) -> Option<f64> {
        match self {
            NodeThreshold::Active(t) => Some(t),
            NodeThreshold::DontCare => None,
        }
    }
}

/// A threshold for every history of length `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTree {
    n: usize,
    l: usize,
    nodes: Vec<Option<NodeThreshold>>,
}

fn node_count(n: usize) -> usize {
    (1usize << n) - 1
}

impl PolicyTree {
    fn empty(n: usize, l: usize) -> Result<Self> {
        if n == 0 || n > MAX_TREE_AGENTS {
            return Err(Error::TooLarge { n, max: MAX_TREE_AGENTS });
        }
        if l == 0 || l > n {
            return Err(Error::validation("l", format!("{l} is outside [1, {n}]")));
        }
        Ok(PolicyTree {
            n,
            l,
            nodes: vec![None; node_count(n)],
        })
    }

    /// History-independent policy: `threshold` everywhere the outcome is still open.
    pub fn uniform(n: usize, l: usize, threshold: f64) -> Result<Self> {
        let mut tree = Self::empty(n, l)?;
        for k in 0..tree.nodes.len() {
            tree.nodes[k] = Some(if tree.is_decided_index(k) {
                NodeThreshold::DontCare
            } else {
                NodeThreshold::Active(threshold)
            });
        }
        Ok(tree)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    fn state_at_index(&self, k: usize) -> (usize, i64) {
        let h = History::from_index(k);
        (self.n - h.len(), self.l as i64 - h.ones() as i64)
    }

    fn is_decided_index(&self, k: usize) -> bool {
        let (n_rem, l_rem) = self.state_at_index(k);
        l_rem <= 0 || l_rem > n_rem as i64
    }

    pub fn is_decided(&self, history: &History) -> bool {
        history.len() < self.n && self.is_decided_index(history.index())
    }

    pub fn threshold_at(&self, history: &History) -> Result<NodeThreshold> {
        if history.len() >= self.n {
            return Err(Error::validation(
                "history",
                format!("`{history}` is not shorter than the team size {}", self.n),
            ));
        }
        self.nodes[history.index()].ok_or_else(|| Error::MissingHistory(history.to_string()))
    }

    pub fn set(&mut self, history: &History, threshold: NodeThreshold) -> Result<()> {
        if history.len() >= self.n {
            return Err(Error::validation("history", format!("`{history}` is too long")));
        }
        self.nodes[history.index()] = Some(threshold);
        Ok(())
    }

    /// Every stored entry in heap order.
    pub fn entries(&self) -> impl Iterator<Item = (History, NodeThreshold, bool)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(move |(k, t)| t.map(|t| (History::from_index(k), t, self.is_decided_index(k))))
    }

    /// Error unless every undecided history carries an active threshold.
    pub fn check_coverage(&self) -> Result<()> {
        for (k, node) in self.nodes.iter().enumerate() {
            if self.is_decided_index(k) {
                continue;
            }
            match node {
                Some(NodeThreshold::Active(t)) if !t.is_nan() => {}
                _ => return Err(Error::MissingHistory(History::from_index(k).to_string())),
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThresholdRepr {
    Number(f64),
    Word(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyEntry {
    history: String,
    threshold: ThresholdRepr,
    decided: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    n: usize,
    l: usize,
    entries: Vec<PolicyEntry>,
}

impl Serialize for PolicyTree {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let entries = self
            .entries()
            .map(|(h, t, decided)| PolicyEntry {
                history: h.to_string(),
                threshold: match t {
                    NodeThreshold::DontCare => ThresholdRepr::Word("dont-care".into()),
                    NodeThreshold::Active(x) if x == f64::INFINITY => ThresholdRepr::Word("+inf".into()),
                    NodeThreshold::Active(x) if x == f64::NEG_INFINITY => ThresholdRepr::Word("-inf".into()),
                    NodeThreshold::Active(x) => ThresholdRepr::Number(x),
                },
                decided,
            })
            .collect();
        PolicyFile {
            n: self.n,
            l: self.l,
            entries,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PolicyTree {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = PolicyFile::deserialize(deserializer)?;
        let mut tree = PolicyTree::empty(file.n, file.l).map_err(D::Error::custom)?;
        for entry in file.entries {
            let history: History = entry.history.parse().map_err(D::Error::custom)?;
            let threshold = match entry.threshold {
                ThresholdRepr::Number(x) => NodeThreshold::Active(x),
                ThresholdRepr::Word(w) => match w.as_str() {
                    "+inf" => NodeThreshold::Active(f64::INFINITY),
                    "-inf" => NodeThreshold::Active(f64::NEG_INFINITY),
                    "dont-care" => NodeThreshold::DontCare,
                    other => return Err(D::Error::custom(format!("unknown threshold {other:?}"))),
                },
            };
            tree.set(&history, threshold).map_err(D::Error::custom)?;
        }
        Ok(tree)
    }
}

/// Per-node quantities of a policy evaluated on a problem.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStats {
    pub history: History,
    /// `p0 P{history | H0}`.
    pub mass0: f64,
    /// `p1 P{history | H1}`.
    pub mass1: f64,
    pub decided: bool,
}

impl NodeStats {
    pub fn reachable(&self) -> bool {
        self.mass0 + self.mass1 > 0.0
    }

    /// Belief on H0 at this history; `None` when unreachable.
    pub fn belief(&self) -> Option<f64> {
        self.reachable().then(|| self.mass0 / (self.mass0 + self.mass1))
    }
}

/// Exact risk and error rates of a policy tree.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEvaluation {
    pub risk: f64,
    pub rates: GlobalErrorRates,
    pub nodes: Vec<NodeStats>,
}

/// P{global 1 | H0} and P{global 0 | H1} from one history onward.
#[derive(Clone, Copy, Debug)]
struct Outcome {
    fa: f64,
    miss: f64,
}

impl Outcome {
    fn decided(one: bool) -> Self {
        if one {
            Outcome { fa: 1.0, miss: 0.0 }
        } else {
            Outcome { fa: 0.0, miss: 1.0 }
        }
    }

    fn through(pair: ErrorPair, zero: Outcome, one: Outcome) -> Self {
        Outcome {
            fa: (1.0 - pair.false_alarm) * zero.fa + pair.false_alarm * one.fa,
            miss: pair.miss * zero.miss + (1.0 - pair.miss) * one.miss,
        }
    }
}

/// Working state for exact evaluation and the policy sweeps.
struct Tree<'a> {
    problem: &'a TeamProblem,
    decided: Vec<Option<bool>>,
    thresholds: Vec<f64>,
    mass0: Vec<f64>,
    mass1: Vec<f64>,
    /// Belief on H0; at zero-mass histories, the limit of Bayes' rule as the
    /// vote's probability vanishes.
    belief: Vec<f64>,
    outcome: Vec<Outcome>,
}

impl<'a> Tree<'a> {
    fn new(problem: &'a TeamProblem) -> Result<Self> {
        problem.validate()?;
        if problem.n > MAX_TREE_AGENTS {
            return Err(Error::TooLarge {
                n: problem.n,
                max: MAX_TREE_AGENTS,
            });
        }
        let count = node_count(problem.n);
        let decided = (0..count)
            .map(|k| {
                let h = History::from_index(k);
                BeliefState {
                    q: problem.p0,
                    n_remaining: problem.n - h.len(),
                    l_remaining: problem.l as i64 - h.ones() as i64,
                }
                .decided()
            })
            .collect();
        Ok(Tree {
            problem,
            decided,
            thresholds: vec![f64::NAN; count],
            mass0: vec![0.0; count],
            mass1: vec![0.0; count],
            belief: vec![problem.p0; count],
            outcome: vec![Outcome { fa: 0.0, miss: 0.0 }; count],
        })
    }

    fn len(&self) -> usize {
        self.decided.len()
    }

    fn depth_range(d: usize) -> std::ops::Range<usize> {
        ((1 << d) - 1)..((1 << (d + 1)) - 1)
    }

    fn child_outcome(&self, k: usize, vote: bool) -> Outcome {
        let c = 2 * k + 1 + vote as usize;
        if c < self.len() {
            self.outcome[c]
        } else {
            // leaf: all n votes are in
            let h = History::from_index(k).child(vote);
            Outcome::decided(h.ones() >= self.problem.l)
        }
    }

    fn push_masses(&mut self, k: usize) {
        let (a, b) = (self.mass0[k], self.mass1[k]);
        let pair = match self.decided[k] {
            // votes after the outcome is fixed still happen; their split does not matter
            Some(_) => ErrorPair {
                false_alarm: 0.0,
                miss: 1.0,
            },
            None => self.problem.model.error_probs(self.thresholds[k]),
        };
        for (vote, (ca, cb)) in [
            (false, (a * (1.0 - pair.false_alarm), b * pair.miss)),
            (true, (a * pair.false_alarm, b * (1.0 - pair.miss))),
        ] {
            let c = 2 * k + 1 + vote as usize;
            if c < self.len() {
                self.mass0[c] = ca;
                self.mass1[c] = cb;
                self.belief[c] = if ca + cb > 0.0 { ca / (ca + cb) } else { self.limit_belief(k) };
            }
        }
    }

    fn limit_belief(&self, k: usize) -> f64 {
        let q = self.belief[k];
        if self.decided[k].is_some() {
            return q;
        }
        let t = self.thresholds[k];
        let model = &self.problem.model;
        let h0 = q * model.density_unchecked(Hypothesis::H0, t);
        let h1 = (1.0 - q) * model.density_unchecked(Hypothesis::H1, t);
        if h0 + h1 > 0.0 {
            h0 / (h0 + h1)
        } else {
            q
        }
    }

    fn propagate_masses(&mut self) {
        self.mass0[0] = self.problem.p0;
        self.mass1[0] = self.problem.p1();
        for k in 0..self.len() {
            self.push_masses(k);
        }
    }

    fn node_outcome(&self, k: usize) -> Outcome {
        match self.decided[k] {
            Some(one) => Outcome::decided(one),
            None => Outcome::through(
                self.problem.model.error_probs(self.thresholds[k]),
                self.child_outcome(k, false),
                self.child_outcome(k, true),
            ),
        }
    }

    fn propagate_outcomes(&mut self) {
        for k in (0..self.len()).rev() {
            self.outcome[k] = self.node_outcome(k);
        }
    }

    fn to_policy(&self) -> Result<PolicyTree> {
        let mut policy = PolicyTree::empty(self.problem.n, self.problem.l)?;
        for k in 0..self.len() {
            policy.nodes[k] = Some(match self.decided[k] {
                Some(_) => NodeThreshold::DontCare,
                None => NodeThreshold::Active(self.thresholds[k]),
            });
        }
        Ok(policy)
    }

    fn root_rates(&self) -> GlobalErrorRates {
        GlobalErrorRates {
            false_alarm: self.outcome[0].fa,
            miss: self.outcome[0].miss,
        }
    }

    /// Best response at node `k` given its masses and its children's outcomes.
    fn best_response(&self, k: usize) -> Option<f64> {
        let (qa, qb) = (self.belief[k], 1.0 - self.belief[k]);
        let zero = self.child_outcome(k, false);
        let one = self.child_outcome(k, true);
        let gain_fa = one.fa - zero.fa;
        let gain_miss = zero.miss - one.miss;
        if gain_fa == 0.0 && gain_miss == 0.0 {
            return None;
        }
        let p = self.problem;
        let model = p.model;
        let risk = |t: f64| {
            let o = Outcome::through(model.error_probs(t), zero, one);
            p.c10 * qa * o.fa + p.c01 * qb * o.miss
        };
        let slope = |t: f64| {
            p.c01 * qb * model.density_unchecked(Hypothesis::H1, t) * gain_miss
                - p.c10 * qa * model.density_unchecked(Hypothesis::H0, t) * gain_fa
        };
        let found = minimize(risk, Some(&slope), search_spec(&model, qa, NODE_PROBES));
        let current = self.thresholds[k];
        if current.is_nan() || found.fx <= risk(current) {
            Some(found.x)
        } else {
            Some(current)
        }
    }
}

/// Exact risk of `policy` on `problem`.
pub fn evaluate_policy(problem: &TeamProblem, policy: &PolicyTree) -> Result<PolicyEvaluation> {
    if policy.n != problem.n || policy.l != problem.l {
        return Err(Error::validation(
            "policy",
            format!(
                "policy is for {}-out-of-{}, problem is {}-out-of-{}",
                policy.l, policy.n, problem.l, problem.n
            ),
        ));
    }
    policy.check_coverage()?;
    let mut tree = Tree::new(problem)?;
    for k in 0..tree.len() {
        if tree.decided[k].is_none() {
            tree.thresholds[k] = policy.nodes[k].and_then(NodeThreshold::active).unwrap_or(f64::NAN);
        }
    }
    tree.propagate_masses();
    tree.propagate_outcomes();
    let rates = tree.root_rates();
    let nodes = (0..tree.len())
        .map(|k| NodeStats {
            history: History::from_index(k),
            mass0: tree.mass0[k],
            mass1: tree.mass1[k],
            decided: tree.decided[k].is_some(),
        })
        .collect();
    Ok(PolicyEvaluation {
        risk: problem.risk_of(rates),
        rates,
        nodes,
    })
}

pub fn tree_risk(problem: &TeamProblem, policy: &PolicyTree) -> Result<f64> {
    evaluate_policy(problem, policy).map(|e| e.risk)
}

/// A policy reached by best-response sweeps.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub policy: PolicyTree,
    pub risk: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Largest minus smallest threshold over reachable undecided histories.
    pub spread: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyStart {
    /// Single-agent Bayes rule at each history's belief.
    Myopic,
    /// The optimal common threshold at every history.
    Uniform,
}

/// Best policy found over all starting points.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySolution {
    pub policy: PolicyTree,
    pub risk: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub start: PolicyStart,
    pub alternatives: Vec<(PolicyStart, SweepResult)>,
}

/// The myopic policy: every agent applies the single-agent Bayes rule to its
/// current belief, as if its vote were final.
pub fn myopic_policy(problem: &TeamProblem) -> Result<PolicyTree> {
    let mut tree = Tree::new(problem)?;
    let p = problem;
    tree.mass0[0] = p.p0;
    tree.mass1[0] = p.p1();
    for k in 0..tree.len() {
        if tree.decided[k].is_none() {
            let q = tree.belief[k];
            let ratio = if q < 1.0 { p.c10 * q / (p.c01 * (1.0 - q)) } else { f64::INFINITY };
            tree.thresholds[k] = p.model.threshold_for_ratio(ratio);
        }
        tree.push_masses(k);
    }
    tree.to_policy()
}

/// Best-response sweeps from `init` until no threshold moves.
///
/// Each pass walks the tree from the deepest decision nodes to the root and
/// replaces every threshold by its exact best response, given the belief
/// produced by the current ancestors and the outcome probabilities of the
/// already updated descendants. Histories the policy cannot reach still get
/// a best response, at the belief Bayes' rule gives in the limit. Moves that
/// would raise a node's conditional risk are rejected, so the team risk never
/// increases from one pass to the next.
pub fn refine_policy(problem: &TeamProblem, init: &PolicyTree) -> Result<SweepResult> {
    evaluate_policy(problem, init)?;
    let mut tree = Tree::new(problem)?;
    for k in 0..tree.len() {
        if tree.decided[k].is_none() {
            tree.thresholds[k] = init.nodes[k].and_then(NodeThreshold::active).unwrap_or(f64::NAN);
        }
    }

    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < MAX_POLICY_SWEEPS {
        sweeps += 1;
        tree.propagate_masses();
        let mut max_step: f64 = 0.0;
        for d in (0..problem.n).rev() {
            for k in Tree::depth_range(d) {
                if tree.decided[k].is_none() {
                    if let Some(t) = tree.best_response(k) {
                        let old = tree.thresholds[k];
                        if t != old {
                            max_step = max_step.max((t - old).abs());
                        }
                        tree.thresholds[k] = t;
                    }
                }
                tree.outcome[k] = tree.node_outcome(k);
            }
        }
        if max_step <= POLICY_STEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("policy sweeps did not settle after {MAX_POLICY_SWEEPS} passes");
    }
    tree.propagate_masses();
    tree.propagate_outcomes();

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..tree.len() {
        if tree.decided[k].is_none() && tree.mass0[k] + tree.mass1[k] > 0.0 {
            lo = lo.min(tree.thresholds[k]);
            hi = hi.max(tree.thresholds[k]);
        }
    }
    let spread = if hi > lo { hi - lo } else { 0.0 };
    Ok(SweepResult {
        risk: problem.risk_of(tree.root_rates()),
        policy: tree.to_policy()?,
        sweeps,
        converged,
        spread,
    })
}

/// Optimal thresholds at every history.
///
/// Sweeps run from the myopic policy and from the optimal history-independent
/// policy, and the lower risk wins. Candidates whose risks agree to rounding
/// are ranked by spread, so the simplest optimal policy is reported and the
/// others are kept in `alternatives`.
pub fn optimize_policy(problem: &TeamProblem) -> Result<PolicySolution> {
    problem.validate()?;
    if problem.n > MAX_TREE_AGENTS {
        return Err(Error::TooLarge {
            n: problem.n,
            max: MAX_TREE_AGENTS,
        });
    }
    let lambda = optimize_identical_threshold(problem)?.thresholds[0];
    let mut candidates = vec![
        (PolicyStart::Myopic, refine_policy(problem, &myopic_policy(problem)?)?),
        (
            PolicyStart::Uniform,
            refine_policy(problem, &PolicyTree::uniform(problem.n, problem.l, lambda)?)?,
        ),
    ];
    let tie = |a: f64, b: f64| (a - b).abs() <= RISK_TIE_ULPS * f64::EPSILON * a.abs().max(b.abs());
    let mut best = 0;
    for (i, (_, c)) in candidates.iter().enumerate().skip(1) {
        let incumbent = &candidates[best].1;
        let better = if tie(c.risk, incumbent.risk) {
            c.spread < incumbent.spread
        } else {
            c.risk < incumbent.risk
        };
        if better {
            best = i;
        }
    }
    let (start, chosen) = candidates.swap_remove(best);
    Ok(PolicySolution {
        policy: chosen.policy,
        risk: chosen.risk,
        sweeps: chosen.sweeps,
        converged: chosen.converged,
        start,
        alternatives: candidates,
    })
}

/// Optimal risk from `state` (normalized to unit mass) and the minimizing
/// threshold of its first agent, by direct nested minimization.
///
/// Every candidate threshold re-solves both child subproblems at their
/// updated beliefs. The cost grows like `(2k)^n` for `k` evaluations per
/// search, so this is an independent oracle for small teams rather than a
/// solver.
pub fn value(problem: &TeamProblem, state: BeliefState) -> Result<(f64, Option<f64>)> {
    problem.validate()?;
    check_probability("q", state.q)?;
    if state.n_remaining > problem.n {
        return Err(Error::Internal(format!(
            "{} agents remain in a team of {}",
            state.n_remaining, problem.n
        )));
    }
    if state.decided().is_none() && state.n_remaining > MAX_VALUE_AGENTS {
        return Err(Error::TooLarge {
            n: state.n_remaining,
            max: MAX_VALUE_AGENTS,
        });
    }
    Ok(value_rec(problem, state))
}

fn value_rec(problem: &TeamProblem, state: BeliefState) -> (f64, Option<f64>) {
    let q = state.q;
    match state.decided() {
        Some(true) => return (problem.c10 * q, None),
        Some(false) => return (problem.c01 * (1.0 - q), None),
        None => {}
    }
    let model = problem.model;
    let branch = |t: f64| -> f64 {
        let pair = model.error_probs(t);
        let mut total = 0.0;
        for vote in [false, true] {
            let (h0, h1) = if vote {
                (q * pair.false_alarm, (1.0 - q) * (1.0 - pair.miss))
            } else {
                (q * (1.0 - pair.false_alarm), (1.0 - q) * pair.miss)
            };
            let w = h0 + h1;
            if w > 0.0 {
                let next = BeliefState {
                    q: h0 / w,
                    n_remaining: state.n_remaining - 1,
                    l_remaining: state.l_remaining - vote as i64,
                };
                total += w * value_rec(problem, next).0;
            }
        }
        total
    };
    let spec = SearchSpec {
        tol: VALUE_TOL,
        ..search_spec(&model, q, VALUE_PROBES)
    };
    let found = minimize(branch, None, spec);
    (found.fx, Some(found.x))
}

/// Residual of the critical-vote condition for the agents after the first,
/// once the first vote `first_vote` is public and the first agent used `root_threshold`.
pub fn conditioned_residual_at(
    problem: &TeamProblem,
    root_threshold: f64,
    first_vote: bool,
    threshold: f64,
) -> Result<Residual> {
    problem.validate()?;
    if problem.n < 2 {
        return Err(Error::validation("n", "a conditioned residual needs at least two agents"));
    }
    let q = belief_update(problem.p0, problem.model.error_probs(root_threshold), first_vote)?;
    let m = problem.n - 1;
    let l = problem.l as i64 - first_vote as i64;
    if l <= 0 || l > m as i64 {
        return Err(Error::BranchDecided(first_vote as u8));
    }
    Ok(critical_vote_residual(
        &problem.model,
        q,
        problem.c10,
        problem.c01,
        m,
        l as usize,
        threshold,
    ))
}

/// Same as [`conditioned_residual_at`] with the first agent at the parallel optimum.
pub fn conditioned_stationarity_residual(problem: &TeamProblem, first_vote: bool, threshold: f64) -> Result<Residual> {
    let lambda = optimize_identical_threshold(problem)?.thresholds[0];
    conditioned_residual_at(problem, lambda, first_vote, threshold)
}

/// Common-threshold risk of the subproblem that follows the first vote.
pub fn branch_risk(problem: &TeamProblem, root_threshold: f64, first_vote: bool, threshold: f64) -> Result<f64> {
    let q = belief_update(problem.p0, problem.model.error_probs(root_threshold), first_vote)?;
    let l = problem.l as i64 - first_vote as i64;
    let m = problem.n - 1;
    if m == 0 || l <= 0 || l > m as i64 {
        return Err(Error::BranchDecided(first_vote as u8));
    }
    Ok(identical_risk(&problem.with_prior(q).with_rule(m, l as usize), threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryDeviation {
    pub history: String,
    pub rho_star: f64,
    pub lambda_star: f64,
    pub deviation: f64,
}

/// Outcome of comparing the optimal sequential policy with the parallel optimum.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SecretBallotReport {
    pub lambda_star: f64,
    pub risk_seq: f64,
    pub risk_par: f64,
    /// Maximum |rho_h - lambda*| over reachable undecided histories.
    pub max_deviation: f64,
    pub root_deviation: f64,
    pub tol: f64,
    pub root_within_tol: bool,
    pub pass: bool,
    pub sweeps: usize,
    pub policy_start: PolicyStart,
    pub rows: Vec<HistoryDeviation>,
    #[serde(skip)]
    pub policy: PolicyTree,
}

/// Solve both scenarios and measure how far the sequential thresholds move.
pub fn verify_secret_ballot(problem: &TeamProblem, tol: f64) -> Result<SecretBallotReport> {
    if problem.n > MAX_TREE_AGENTS {
        return Err(Error::TooLarge {
            n: problem.n,
            max: MAX_TREE_AGENTS,
        });
    }
    let parallel = optimize_identical_threshold(problem)?;
    let lambda = parallel.thresholds[0];
    let solution = optimize_policy(problem)?;
    let evaluation = evaluate_policy(problem, &solution.policy)?;
    let mut rows = Vec::new();
    for stats in &evaluation.nodes {
        if stats.decided || !stats.reachable() {
            continue;
        }
        let rho = solution
            .policy
            .threshold_at(&stats.history)?
            .active()
            .ok_or_else(|| Error::Internal(format!("undecided history `{}` has no threshold", stats.history)))?;
        let deviation = if rho == lambda { 0.0 } else { (rho - lambda).abs() };
        rows.push(HistoryDeviation {
            history: stats.history.to_string(),
            rho_star: rho,
            lambda_star: lambda,
            deviation,
        });
    }
    let max_deviation = rows.iter().map(|r| r.deviation).fold(0.0, f64::max);
    let root_deviation = rows.first().map(|r| r.deviation).unwrap_or(0.0);
    let risk_seq = evaluation.risk;
    let risk_par = parallel.risk;
    Ok(SecretBallotReport {
        lambda_star: lambda,
        risk_seq,
        risk_par,
        max_deviation,
        root_deviation,
        tol,
        root_within_tol: root_deviation <= tol,
        pass: max_deviation <= tol && (risk_seq - risk_par).abs() <= tol,
        sweeps: solution.sweeps,
        policy_start: solution.start,
        rows,
        policy: solution.policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LikelihoodModel;
    use crate::team::{bayes_risk, two_agent_or_risk};

    fn gauss(p0: f64, c10: f64, c01: f64, n: usize, l: usize) -> TeamProblem {
        TeamProblem::new(p0, c10, c01, LikelihoodModel::standard_gaussian(), n, l).unwrap()
    }

    #[test]
    fn history_indexing_round_trips() {
        for k in 0..127 {
            let h = History::from_index(k);
            assert_eq!(h.index(), k);
            assert_eq!((usize::BITS - 1 - (k + 1).leading_zeros()) as usize, h.len());
            assert_eq!(h.to_string().parse::<History>().unwrap(), h);
        }
        assert_eq!("01".parse::<History>().unwrap().index(), 4);
        assert!("0a".parse::<History>().is_err());
    }

    #[test]
    fn belief_update_examples() {
        let pair = ErrorPair::new(0.2, 0.2).unwrap();
        assert!((belief_update(0.5, pair, false).unwrap() - 0.8).abs() < 1e-15);
        let uninformative = ErrorPair::new(0.35, 0.65).unwrap();
        for q in [0.1, 0.5, 0.93] {
            for vote in [false, true] {
                assert!((belief_update(q, uninformative, vote).unwrap() - q).abs() < 1e-15);
            }
        }
        let pair = ErrorPair::new(0.30854, 0.30854).unwrap();
        assert!((belief_update(0.5, pair, true).unwrap() - 0.30854).abs() < 1e-15);
    }

    #[test]
    fn belief_update_rejects_impossible_vote() {
        let pair = ErrorPair::new(0.0, 1.0).unwrap();
        assert_eq!(
            belief_update(0.4, pair, true).unwrap_err(),
            Error::ImpossibleObservation { decision: 1 }
        );
    }

    #[test]
    fn fusion_rule_examples() {
        let s = BeliefState {
            q: 0.5,
            n_remaining: 5,
            l_remaining: 3,
        };
        let one = fusion_rule_update(s, true).unwrap();
        assert_eq!((one.n_remaining, one.l_remaining), (4, 2));
        let zero = fusion_rule_update(s, false).unwrap();
        assert_eq!((zero.n_remaining, zero.l_remaining), (4, 3));
        let last = BeliefState {
            q: 0.5,
            n_remaining: 1,
            l_remaining: 1,
        };
        let end = fusion_rule_update(last, false).unwrap();
        assert_eq!((end.n_remaining, end.l_remaining), (0, 1));
        assert_eq!(end.decided(), Some(false));
        assert_eq!(fusion_rule_update(end, true).unwrap_err(), Error::NoAgentsRemaining);
    }

    #[test]
    fn value_terminal_states() {
        let p = gauss(0.5, 2.0, 3.0, 3, 2);
        let (r, t) = value(&p, BeliefState { q: 0.3, n_remaining: 0, l_remaining: 1 }).unwrap();
        assert!((r - 3.0 * 0.7).abs() < 1e-15);
        assert!(t.is_none());
        let (r, _) = value(&p, BeliefState { q: 0.3, n_remaining: 0, l_remaining: 0 }).unwrap();
        assert!((r - 2.0 * 0.3).abs() < 1e-15);
        // absorbed regardless of how many agents remain
        let (r, _) = value(&p, BeliefState { q: 0.3, n_remaining: 3, l_remaining: -1 }).unwrap();
        assert!((r - 2.0 * 0.3).abs() < 1e-15);
        let (r, _) = value(&p, BeliefState { q: 0.3, n_remaining: 2, l_remaining: 3 }).unwrap();
        assert!((r - 3.0 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn value_guards() {
        let p = gauss(0.5, 1.0, 1.0, 3, 2);
        let too_deep = BeliefState { q: 0.5, n_remaining: 4, l_remaining: 2 };
        assert!(matches!(value(&p, too_deep), Err(Error::Internal(_))));
        let big = gauss(0.5, 1.0, 1.0, 8, 4);
        assert!(matches!(value(&big, BeliefState::root(&big)), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn two_agent_value_equals_parallel_minimum() {
        for l in [1, 2] {
            let p = gauss(0.5, 1.0, 1.0, 2, l);
            let (seq, root) = value(&p, BeliefState::root(&p)).unwrap();
            let par = optimize_identical_threshold(&p).unwrap();
            assert!((seq - par.risk).abs() < 1e-12, "l={l}: {seq} vs {}", par.risk);
            assert!((root.unwrap() - par.thresholds[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn or_rule_sequential_formula_matches_parallel_formula() {
        // R_s with rho_1 and rho_2^0 equals R_p with lambda_1, lambda_2
        let p = gauss(0.3, 1.0, 2.0, 2, 1);
        for (t1, t2) in [(0.1, 0.9), (-0.5, 1.3), (0.8, 0.8)] {
            let mut policy = PolicyTree::uniform(2, 1, t1).unwrap();
            policy.set(&History::root(), NodeThreshold::Active(t1)).unwrap();
            policy.set(&"0".parse().unwrap(), NodeThreshold::Active(t2)).unwrap();
            let seq = tree_risk(&p, &policy).unwrap();
            let a1 = p.model.error_probs(t1);
            let a2 = p.model.error_probs(t2);
            let direct = p.c10 * p.p0 * (a1.false_alarm + (1.0 - a1.false_alarm) * a2.false_alarm)
                + p.c01 * p.p1() * a1.miss * a2.miss;
            assert!((seq - direct).abs() < 1e-15);
            assert!((seq - two_agent_or_risk(&p, t1, t2).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn and_rule_policy_matches_theorem() {
        let p = gauss(0.5, 1.0, 1.0, 2, 2);
        let lambda = optimize_identical_threshold(&p).unwrap().thresholds[0];
        assert!(lambda < 0.5);
        let sol = optimize_policy(&p).unwrap();
        let root = sol.policy.threshold_at(&History::root()).unwrap().active().unwrap();
        let after_one = sol.policy.threshold_at(&"1".parse().unwrap()).unwrap().active().unwrap();
        assert!((root - lambda).abs() < 1e-6, "{root}");
        assert!((after_one - lambda).abs() < 1e-6, "{after_one}");
        assert_eq!(sol.policy.threshold_at(&"0".parse().unwrap()).unwrap(), NodeThreshold::DontCare);
    }

    #[test]
    fn asymmetric_majority_policy_is_history_independent() {
        let p = gauss(0.7, 1.0, 2.0, 3, 2);
        let lambda = optimize_identical_threshold(&p).unwrap().thresholds[0];
        let sol = optimize_policy(&p).unwrap();
        assert!(sol.converged);
        for (h, t, decided) in sol.policy.entries() {
            if !decided {
                assert!((t.active().unwrap() - lambda).abs() < 1e-6, "{h}: {t:?} vs {lambda}");
            }
        }
    }

    #[test]
    fn myopic_sweeps_find_lambda_star_unaided() {
        let p = gauss(0.2, 1.0, 5.0, 4, 2);
        let lambda = optimize_identical_threshold(&p).unwrap().thresholds[0];
        let myopic = myopic_policy(&p).unwrap();
        let root = myopic.threshold_at(&History::root()).unwrap().active().unwrap();
        assert!((root - lambda).abs() > 0.1);
        let refined = refine_policy(&p, &myopic).unwrap();
        assert!(refined.converged);
        assert!(refined.spread < 1e-6, "{}", refined.spread);
        let rho = refined.policy.threshold_at(&History::root()).unwrap().active().unwrap();
        assert!((rho - lambda).abs() < 1e-6);
    }

    #[test]
    fn exponential_unanimity_has_tied_non_uniform_optimum() {
        // y_1 >= N t alone has the same error rates as min(y) >= t
        let model = LikelihoodModel::exponential_scale(1.0, 2.0).unwrap();
        let p = TeamProblem::new(0.8, 1.0, 1.0, model, 3, 3).unwrap();
        let sol = optimize_policy(&p).unwrap();
        assert_eq!(sol.start, PolicyStart::Uniform);
        let (_, alt) = &sol.alternatives[0];
        assert!((alt.risk - sol.risk).abs() < 1e-15);
        assert!(alt.spread > 1.0);
        let lambda = optimize_identical_threshold(&p).unwrap().thresholds[0];
        let mut single = PolicyTree::uniform(3, 3, 0.0).unwrap();
        single.set(&History::root(), NodeThreshold::Active(3.0 * lambda)).unwrap();
        assert!((tree_risk(&p, &single).unwrap() - sol.risk).abs() < 1e-15);
    }

    #[test]
    fn refinement_never_increases_risk() {
        let model = LikelihoodModel::exponential_scale(1.0, 2.0).unwrap();
        let p = TeamProblem::new(0.5, 1.0, 2.0, model, 5, 3).unwrap();
        let init = myopic_policy(&p).unwrap();
        let refined = refine_policy(&p, &init).unwrap();
        assert!(refined.risk <= tree_risk(&p, &init).unwrap() + 1e-15);
    }

    #[test]
    fn symmetric_tree_risk_equals_parallel_risk() {
        let p = gauss(0.5, 1.0, 1.0, 3, 2);
        let sol = optimize_policy(&p).unwrap();
        let par = optimize_identical_threshold(&p).unwrap();
        assert!((sol.risk - par.risk).abs() < 1e-12);
    }

    #[test]
    fn uniform_policy_risk_equals_parallel_risk() {
        for (n, l) in [(1, 1), (3, 1), (4, 2), (5, 5)] {
            let p = gauss(0.35, 1.0, 2.0, n, l);
            for t in [-0.4, 0.3, 1.1] {
                let policy = PolicyTree::uniform(n, l, t).unwrap();
                let seq = tree_risk(&p, &policy).unwrap();
                let par = bayes_risk(&p, &vec![t; n]).unwrap();
                assert!((seq - par).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn optimize_policy_matches_nested_value() {
        for (p0, c01, n, l) in [(0.3, 2.0, 3, 2), (0.6, 1.0, 3, 1), (0.45, 5.0, 3, 3)] {
            let p = gauss(p0, 1.0, c01, n, l);
            let sol = optimize_policy(&p).unwrap();
            let (v, root) = value(&p, BeliefState::root(&p)).unwrap();
            assert!((sol.risk - v).abs() < 1e-12, "{} vs {v}", sol.risk);
            let rho = sol.policy.threshold_at(&History::root()).unwrap().active().unwrap();
            assert!((rho - root.unwrap()).abs() < 1e-5);
        }
    }

    #[test]
    fn node_probability_flow_is_conserved() {
        let p = gauss(0.4, 1.0, 2.0, 4, 2);
        let sol = optimize_policy(&p).unwrap();
        let eval = evaluate_policy(&p, &sol.policy).unwrap();
        for (k, node) in eval.nodes.iter().enumerate() {
            let (c0, c1) = (2 * k + 1, 2 * k + 2);
            if c1 >= eval.nodes.len() || !node.reachable() {
                continue;
            }
            let total = node.mass0 + node.mass1;
            let w0 = (eval.nodes[c0].mass0 + eval.nodes[c0].mass1) / total;
            let w1 = (eval.nodes[c1].mass0 + eval.nodes[c1].mass1) / total;
            assert!((w0 + w1 - 1.0).abs() < 1e-12);
            if node.decided {
                continue;
            }
            // martingale: expected next belief equals the current one
            let q = node.belief().unwrap();
            let next = w0 * eval.nodes[c0].belief().unwrap_or(0.0) + w1 * eval.nodes[c1].belief().unwrap_or(0.0);
            assert!((next - q).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_policies_never_beat_the_optimum() {
        use rand::{Rng, SeedableRng};
        let p = gauss(0.65, 1.0, 2.0, 4, 3);
        let sol = optimize_policy(&p).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut policy = sol.policy.clone();
            for (h, t, decided) in sol.policy.entries().collect::<Vec<_>>() {
                if !decided {
                    let jitter: f64 = rng.random_range(-0.5..0.5);
                    policy.set(&h, NodeThreshold::Active(t.active().unwrap() + jitter)).unwrap();
                }
            }
            assert!(tree_risk(&p, &policy).unwrap() >= sol.risk - 1e-15);
        }
        let lambda = optimize_identical_threshold(&p).unwrap().thresholds[0];
        assert!(sol.risk <= bayes_risk(&p, &[lambda; 4]).unwrap() + 1e-12);
    }

    #[test]
    fn conditioned_residual_symmetric_problem() {
        let p = gauss(0.5, 1.0, 1.0, 3, 2);
        for vote in [false, true] {
            let r = conditioned_residual_at(&p, 0.5, vote, 0.5).unwrap();
            assert!(r.value.abs() < 1e-14);
        }
    }

    #[test]
    fn conditioned_residual_vanishes_at_lambda_star() {
        let p = gauss(0.7, 1.0, 2.0, 4, 2);
        let lambda = optimize_identical_threshold(&p).unwrap().thresholds[0];
        for vote in [false, true] {
            let r = conditioned_stationarity_residual(&p, vote, lambda).unwrap();
            assert!(r.value.abs() < 1e-8, "{vote}: {}", r.value);
        }
    }

    #[test]
    fn conditioned_residual_sign_follows_branch_slope() {
        let p = gauss(0.7, 1.0, 2.0, 4, 2);
        let lambda = optimize_identical_threshold(&p).unwrap().thresholds[0];
        for vote in [false, true] {
            let t = lambda + 0.1;
            let r = conditioned_residual_at(&p, lambda, vote, t).unwrap().value;
            let h = 1e-6;
            let slope = (branch_risk(&p, lambda, vote, t + h).unwrap() - branch_risk(&p, lambda, vote, t - h).unwrap()) / (2.0 * h);
            assert!(r.abs() > 1e-3);
            assert_eq!(r > 0.0, slope > 0.0);
        }
    }

    #[test]
    fn conditioned_residual_on_decided_branch() {
        let p = gauss(0.5, 1.0, 1.0, 3, 1);
        assert_eq!(
            conditioned_residual_at(&p, 0.5, true, 0.5).unwrap_err(),
            Error::BranchDecided(1)
        );
        let p = gauss(0.5, 1.0, 1.0, 3, 3);
        assert_eq!(
            conditioned_residual_at(&p, 0.5, false, 0.5).unwrap_err(),
            Error::BranchDecided(0)
        );
    }

    #[test]
    fn verify_report_and_zero_tolerance() {
        let p = gauss(0.7, 1.0, 2.0, 4, 2);
        let report = verify_secret_ballot(&p, 1e-6).unwrap();
        assert!(report.pass);
        assert!(report.root_within_tol);
        assert!((report.risk_seq - report.risk_par).abs() < 1e-12);
        let strict = verify_secret_ballot(&p, 0.0).unwrap();
        assert!(!strict.pass);
        assert!(strict.max_deviation > 0.0);
    }

    #[test]
    fn policy_json_round_trip() {
        let p = gauss(0.5, 1.0, 1.0, 3, 2);
        let mut policy = optimize_policy(&p).unwrap().policy;
        policy.set(&"00".parse().unwrap(), NodeThreshold::DontCare).unwrap();
        policy.set(&History::root(), NodeThreshold::Active(f64::NEG_INFINITY)).unwrap();
        let json = serde_json::to_string(&policy).unwrap();
        assert!(json.contains(r#""history":"","threshold":"-inf","decided":false"#));
        assert!(json.contains(r#""threshold":"dont-care""#));
        let back: PolicyTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, policy);
    }

    #[test]
    fn coverage_error_names_missing_history() {
        let json = r#"{"n": 2, "l": 1, "entries": [{"history": "", "threshold": 0.5, "decided": false}]}"#;
        let policy: PolicyTree = serde_json::from_str(json).unwrap();
        assert_eq!(policy.check_coverage().unwrap_err(), Error::MissingHistory("0".into()));
    }

    #[test]
    fn tree_size_guard() {
        let p = gauss(0.5, 1.0, 1.0, 15, 8);
        assert!(matches!(optimize_policy(&p), Err(Error::TooLarge { .. })));
        assert!(matches!(verify_secret_ballot(&p, 1e-6), Err(Error::TooLarge { .. })));
    }
}
