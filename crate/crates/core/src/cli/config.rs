//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;
use crate::models::LikelihoodModel;
use crate::team::TeamProblem;

use super::CliError;

fn default_tol() -> f64 {
    1e-6
}

fn default_trials() -> u64 {
    1_000_000
}

fn default_seed() -> u64 {
    42
}

fn default_inits() -> usize {
    20
}

fn default_true() -> bool {
    true
}

fn default_c10() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    All,
    Majority,
}

/// Fusion rules swept for each team size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RuleSpec {
    Named(RuleName),
    /// Explicit `L` values; those above a team size are skipped for it.
    List(Vec<usize>),
}

impl Default for RuleSpec {
    fn default() -> Self {
        RuleSpec::Named(RuleName::All)
    }
}

impl RuleSpec {
    fn rules(&self, n: usize) -> Vec<usize> {
        match self {
            RuleSpec::Named(RuleName::All) => (1..=n).collect(),
            RuleSpec::Named(RuleName::Majority) => vec![n.div_ceil(2)],
            RuleSpec::List(ls) => ls.iter().copied().filter(|&l| l >= 1 && l <= n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub models: Vec<LikelihoodModel>,
    pub n: Vec<usize>,
    #[serde(default)]
    pub l: RuleSpec,
    pub p0: Vec<f64>,
    #[serde(default = "default_c10")]
    pub c10: f64,
    /// Values of `c01 / c10`.
    pub cost_ratio: Vec<f64>,
}

impl GridSpec {
    /// The secret-ballot verification grid: N in 2..=6, every rule, three
    /// priors, three cost ratios, one Gaussian and one exponential model.
    pub fn default_theorem_grid() -> Self {
        GridSpec {
            models: vec![
                LikelihoodModel::standard_gaussian(),
                LikelihoodModel::ExponentialScale {
                    scale0: 1.0,
                    scale1: 2.0,
                },
            ],
            n: (2..=6).collect(),
            l: RuleSpec::Named(RuleName::All),
            p0: vec![0.2, 0.5, 0.8],
            c10: 1.0,
            cost_ratio: vec![1.0, 2.0, 5.0],
        }
    }

    /// Cells in grid order: model, then N, L, prior, cost ratio.
    pub fn cells(&self) -> Result<Vec<TeamProblem>, Error> {
        let mut cells = Vec::new();
        for model in &self.models {
            for &n in &self.n {
                for l in self.l.rules(n) {
                    for &p0 in &self.p0 {
                        for &ratio in &self.cost_ratio {
                            cells.push(TeamProblem::new(p0, self.c10, self.c10 * ratio, *model, n, l)?);
                        }
                    }
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::validation("grid", "selects no cells"));
        }
        Ok(cells)
    }
}

/// A threshold that may be infinite; JSON spells those `"+inf"` and `"-inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtendedReal(pub f64);

impl Serialize for ExtendedReal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            x if x == f64::INFINITY => s.serialize_str("+inf"),
            x if x == f64::NEG_INFINITY => s.serialize_str("-inf"),
            x => s.serialize_f64(x),
        }
    }
}

impl<'de> Deserialize<'de> for ExtendedReal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(ExtendedReal(x)),
            Repr::Word(w) => match w.as_str() {
                "+inf" | "inf" => Ok(ExtendedReal(f64::INFINITY)),
                "-inf" => Ok(ExtendedReal(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("expected a number, \"+inf\" or \"-inf\", got {other:?}"))),
            },
        }
    }
}

/// Everything a command needs; output files embed the resolved form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<TeamProblem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub mode: SimMode,
    /// Policy file for sequential simulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    /// Agent thresholds for parallel simulation; defaults to the common optimum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<ExtendedReal>>,
    #[serde(default = "default_inits")]
    pub pbpo_inits: usize,
    #[serde(default = "default_true")]
    pub risk_curve: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    /// Check every field that does not depend on the command.
    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(p) = &self.problem {
            p.validate().map_err(|e| CliError::config(format!("problem: {e}")))?;
        }
        if let Some(g) = &self.grid {
            g.cells().map_err(|e| CliError::config(format!("grid: {e}")))?;
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(CliError::config(format!("invalid tol: {} must be nonnegative", self.tol)));
        }
        if self.trials == 0 {
            return Err(CliError::config("invalid trials: must be at least 1"));
        }
        if self.pbpo_inits == 0 {
            return Err(CliError::config("invalid pbpo_inits: must be at least 1"));
        }
        Ok(())
    }

    pub fn require_problem(&self) -> Result<&TeamProblem, CliError> {
        self.problem
            .as_ref()
            .ok_or_else(|| CliError::config("this command needs a `problem` section"))
    }

    /// Cells to run: the single problem, else the grid, else the theorem grid.
    pub fn cells(&self) -> Result<Vec<TeamProblem>, CliError> {
        match (&self.problem, &self.grid) {
            (Some(_), Some(_)) => Err(CliError::config("give either `problem` or `grid`, not both")),
            (Some(p), None) => Ok(vec![*p]),
            (None, Some(g)) => g.cells().map_err(|e| CliError::config(format!("grid: {e}"))),
            (None, None) => Ok(GridSpec::default_theorem_grid().cells().expect("default grid is valid")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::default();
        assert_eq!(c.tol, 1e-6);
        assert_eq!(c.seed, 42);
        assert_eq!(c.mode, SimMode::Parallel);
        assert_eq!(c.cells().unwrap().len(), 360);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"tolerance": 1e-3}"#).unwrap_err();
        assert!(err.to_string().contains("tolerance"));
    }

    #[test]
    fn problem_section_parses() {
        let text = r#"{"problem": {"p0": 0.5, "c10": 1, "c01": 1, "n": 3, "l": 2,
            "model": {"family": "gaussian-shift", "mean0": 0, "mean1": 1, "stddev": 1}}}"#;
        let c: ExperimentConfig = serde_json::from_str(text).unwrap();
        c.validate().unwrap();
        assert_eq!(c.cells().unwrap().len(), 1);
    }

    #[test]
    fn rule_too_large_names_the_field() {
        let text = r#"{"problem": {"p0": 0.5, "c10": 1, "c01": 1, "n": 3, "l": 4,
            "model": {"family": "gaussian-shift", "mean0": 0, "mean1": 1, "stddev": 1}}}"#;
        let c: ExperimentConfig = serde_json::from_str(text).unwrap();
        let err = c.validate().unwrap_err();
        assert_eq!(err.code, super::super::EXIT_CONFIG);
        assert!(err.message.contains('l'), "{}", err.message);
    }

    #[test]
    fn majority_grid() {
        let text = r#"{"grid": {"models": [{"family": "gaussian-shift", "mean0": 0, "mean1": 1, "stddev": 1}],
            "n": [2, 3, 4, 5], "l": "majority", "p0": [0.5], "cost_ratio": [1]}}"#;
        let c: ExperimentConfig = serde_json::from_str(text).unwrap();
        let ls: Vec<usize> = c.cells().unwrap().iter().map(|p| p.l).collect();
        assert_eq!(ls, vec![1, 2, 2, 3]);
    }

    #[test]
    fn extended_thresholds_round_trip() {
        let ts = vec![ExtendedReal(f64::INFINITY), ExtendedReal(0.25), ExtendedReal(f64::NEG_INFINITY)];
        let json = serde_json::to_string(&ts).unwrap();
        assert_eq!(json, r#"["+inf",0.25,"-inf"]"#);
        let back: Vec<ExtendedReal> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ts);
    }
}
