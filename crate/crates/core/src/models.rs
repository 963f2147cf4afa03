//! Private-signal models.
//!
//! Each agent observes a real-valued signal `Y` whose density depends on the
//! hidden hypothesis. Both families here have a likelihood ratio that is
//! strictly increasing in `y`, so every likelihood ratio test reduces to
//! comparing the signal with a threshold:
//!
//! * vote 1 when `y >= threshold`,
//! * vote 0 when `y < threshold`.
//!
//! Thresholds are extended reals. `f64::NEG_INFINITY` is the "always vote 1"
//! rule and `f64::INFINITY` the "always vote 0" rule.

use serde::{Deserialize, Serialize};
use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// The hidden state of the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Hypothesis {
    H0,
    H1,
}

/// Per-agent error probabilities for one threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    /// P{vote 1 | H0}.
    pub false_alarm: f64,
    /// P{vote 0 | H1}.
    pub miss: f64,
}

impl ErrorPair {
    pub fn new(false_alarm: f64, miss: f64) -> Result<Self> {
        check_probability("false_alarm", false_alarm)?;
        check_probability("miss", miss)?;
        Ok(Self { false_alarm, miss })
    }

    /// P{vote 1 | h}.
    pub fn vote_one_prob(&self, h: Hypothesis) -> f64 {
        match h {
            Hypothesis::H0 => self.false_alarm,
            Hypothesis::H1 => 1.0 - self.miss,
        }
    }
}

pub(crate) fn check_probability(field: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::validation(field, format!("{p} is not a probability")))
    }
}

/// A pair of conditional signal densities with monotone likelihood ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LikelihoodModel {
    /// `Y | H=h ~ Normal(mean_h, stddev^2)` with `mean1 > mean0`.
    GaussianShift { mean0: f64, mean1: f64, stddev: f64 },
    /// `Y | H=h ~ Exponential` with mean `scale_h` and `scale1 > scale0 > 0`.
    ExponentialScale { scale0: f64, scale1: f64 },
}

impl LikelihoodModel {
    pub fn gaussian_shift(mean0: f64, mean1: f64, stddev: f64) -> Result<Self> {
        let model = LikelihoodModel::GaussianShift {
            mean0,
            mean1,
            stddev,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn exponential_scale(scale0: f64, scale1: f64) -> Result<Self> {
        let model = LikelihoodModel::ExponentialScale { scale0, scale1 };
        model.validate()?;
        Ok(model)
    }

    /// `gaussian-shift(0, 1, 1)`.
    pub fn standard_gaussian() -> Self {
        LikelihoodModel::GaussianShift {
            mean0: 0.0,
            mean1: 1.0,
            stddev: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LikelihoodModel::GaussianShift {
                mean0,
                mean1,
                stddev,
            } => {
                if !(mean0.is_finite() && mean1.is_finite()) {
                    return Err(Error::validation("mean0/mean1", "means must be finite"));
                }
                if mean1 <= mean0 {
                    return Err(Error::validation(
                        "mean1",
                        format!("mean1 ({mean1}) must exceed mean0 ({mean0})"),
                    ));
                }
                if !(stddev.is_finite() && stddev > 0.0) {
                    return Err(Error::validation("stddev", format!("{stddev} must be positive")));
                }
            }
            LikelihoodModel::ExponentialScale { scale0, scale1 } => {
                if !(scale0.is_finite() && scale0 > 0.0) {
                    return Err(Error::validation("scale0", format!("{scale0} must be positive")));
                }
                if !(scale1.is_finite() && scale1 > scale0) {
                    return Err(Error::validation(
                        "scale1",
                        format!("scale1 ({scale1}) must exceed scale0 ({scale0})"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            LikelihoodModel::GaussianShift { .. } => "gaussian-shift",
            LikelihoodModel::ExponentialScale { .. } => "exponential-scale",
        }
    }

    /// Closed support `[lo, hi]` of both densities.
    pub fn support(&self) -> (f64, f64) {
        match self {
            LikelihoodModel::GaussianShift { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            LikelihoodModel::ExponentialScale { .. } => (0.0, f64::INFINITY),
        }
    }

    fn check_support(&self, y: f64) -> Result<()> {
        let (lo, _) = self.support();
        if y.is_nan() || y < lo {
            Err(Error::Domain {
                family: self.family_name(),
                y,
            })
        } else {
            Ok(())
        }
    }

    /// Density `f(y | h)`.
    pub fn density(&self, h: Hypothesis, y: f64) -> Result<f64> {
        self.check_support(y)?;
        Ok(self.density_unchecked(h, y))
    }

    pub(crate) fn density_unchecked(&self, h: Hypothesis, y: f64) -> f64 {
        match *self {
            LikelihoodModel::GaussianShift {
                mean0,
                mean1,
                stddev,
            } => {
                let mean = if h == Hypothesis::H0 { mean0 } else { mean1 };
                let z = (y - mean) / stddev;
                INV_SQRT_2PI / stddev * (-0.5 * z * z).exp()
            }
            LikelihoodModel::ExponentialScale { scale0, scale1 } => {
                if y < 0.0 {
                    return 0.0;
                }
                let scale = if h == Hypothesis::H0 { scale0 } else { scale1 };
                (-y / scale).exp() / scale
            }
        }
    }

    /// `f(y|1) / f(y|0)`, evaluated in closed form so it stays finite far in the tails.
    pub fn likelihood_ratio(&self, y: f64) -> Result<f64> {
        self.check_support(y)?;
        Ok(self.likelihood_ratio_unchecked(y))
    }

    pub(crate) fn likelihood_ratio_unchecked(&self, y: f64) -> f64 {
        match *self {
            LikelihoodModel::GaussianShift {
                mean0,
                mean1,
                stddev,
            } => {
                let mid = 0.5 * (mean0 + mean1);
                ((mean1 - mean0) * (y - mid) / (stddev * stddev)).exp()
            }
            LikelihoodModel::ExponentialScale { scale0, scale1 } => {
                scale0 / scale1 * (y * (1.0 / scale0 - 1.0 / scale1)).exp()
            }
        }
    }

    /// `P{Y < y | h}` for any extended real `y`.
    pub fn cdf(&self, h: Hypothesis, y: f64) -> f64 {
        if y == f64::NEG_INFINITY {
            return 0.0;
        }
        if y == f64::INFINITY {
            return 1.0;
        }
        match *self {
            LikelihoodModel::GaussianShift {
                mean0,
                mean1,
                stddev,
            } => {
                let mean = if h == Hypothesis::H0 { mean0 } else { mean1 };
                0.5 * erfc(-(y - mean) / stddev * FRAC_1_SQRT_2)
            }
            LikelihoodModel::ExponentialScale { scale0, scale1 } => {
                if y <= 0.0 {
                    return 0.0;
                }
                let scale = if h == Hypothesis::H0 { scale0 } else { scale1 };
                -(-y / scale).exp_m1()
            }
        }
    }

    /// `P{Y >= y | h}`, computed directly rather than as `1 - cdf` to keep tail accuracy.
    pub fn sf(&self, h: Hypothesis, y: f64) -> f64 {
        if y == f64::NEG_INFINITY {
            return 1.0;
        }
        if y == f64::INFINITY {
            return 0.0;
        }
        match *self {
            LikelihoodModel::GaussianShift {
                mean0,
                mean1,
                stddev,
            } => {
                let mean = if h == Hypothesis::H0 { mean0 } else { mean1 };
                0.5 * erfc((y - mean) / stddev * FRAC_1_SQRT_2)
            }
            LikelihoodModel::ExponentialScale { scale0, scale1 } => {
                if y <= 0.0 {
                    return 1.0;
                }
                let scale = if h == Hypothesis::H0 { scale0 } else { scale1 };
                (-y / scale).exp()
            }
        }
    }

    /// Error pair of the rule "vote 1 iff `y >= threshold`".
    pub fn error_probs(&self, threshold: f64) -> ErrorPair {
        ErrorPair {
            false_alarm: self.sf(Hypothesis::H0, threshold),
            miss: self.cdf(Hypothesis::H1, threshold),
        }
    }

    /// Inverse CDF; maps `u` in `(0, 1)` to a signal draw.
    pub fn quantile(&self, h: Hypothesis, u: f64) -> f64 {
        match *self {
            LikelihoodModel::GaussianShift {
                mean0,
                mean1,
                stddev,
            } => {
                let mean = if h == Hypothesis::H0 { mean0 } else { mean1 };
                // erfc_inv is good to ~1e-11; one Newton step on the exact CDF cleans it up
                let mut z = -SQRT_2 * erfc_inv(2.0 * u);
                let density = INV_SQRT_2PI * (-0.5 * z * z).exp();
                if density > 0.0 {
                    z -= (0.5 * erfc(-z * FRAC_1_SQRT_2) - u) / density;
                }
                mean + stddev * z
            }
            LikelihoodModel::ExponentialScale { scale0, scale1 } => {
                let scale = if h == Hypothesis::H0 { scale0 } else { scale1 };
                -scale * (-u).ln_1p()
            }
        }
    }

    /// Threshold at which the likelihood ratio equals `ratio`, clipped to the support.
    ///
    /// This is the single-agent Bayes rule for a prior-cost ratio `ratio`.
    pub fn threshold_for_ratio(&self, ratio: f64) -> f64 {
        let (lo, _) = self.support();
        if ratio <= 0.0 {
            return lo;
        }
        if ratio == f64::INFINITY {
            return f64::INFINITY;
        }
        let t = match *self {
            LikelihoodModel::GaussianShift {
                mean0,
                mean1,
                stddev,
            } => 0.5 * (mean0 + mean1) + stddev * stddev * ratio.ln() / (mean1 - mean0),
            LikelihoodModel::ExponentialScale { scale0, scale1 } => {
                (ratio * scale1 / scale0).ln() / (1.0 / scale0 - 1.0 / scale1)
            }
        };
        t.max(lo)
    }

    /// Quantile of the prior mixture `p0 f(.|0) + (1-p0) f(.|1)`.
    pub fn mixture_quantile(&self, p0: f64, prob: f64) -> f64 {
        let mixture_cdf = |y: f64| p0 * self.cdf(Hypothesis::H0, y) + (1.0 - p0) * self.cdf(Hypothesis::H1, y);
        let mut lo = self
            .quantile(Hypothesis::H0, prob)
            .min(self.quantile(Hypothesis::H1, prob));
        let mut hi = self
            .quantile(Hypothesis::H0, prob)
            .max(self.quantile(Hypothesis::H1, prob));
        if hi - lo <= 0.0 {
            return lo;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if mixture_cdf(mid) < prob {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Extension point for signal families beyond the two built-in ones.
///
/// The optimizers in this crate work on [`LikelihoodModel`]; the trait fixes the
/// surface a user model has to provide to be slotted in later.
pub trait SignalModel {
    fn support(&self) -> (f64, f64);
    fn density(&self, h: Hypothesis, y: f64) -> Result<f64>;
    fn cdf(&self, h: Hypothesis, y: f64) -> f64;
    fn sf(&self, h: Hypothesis, y: f64) -> f64 {
        1.0 - self.cdf(h, y)
    }
    fn likelihood_ratio(&self, y: f64) -> Result<f64> {
        Ok(self.density(Hypothesis::H1, y)? / self.density(Hypothesis::H0, y)?)
    }
    fn error_probs(&self, threshold: f64) -> ErrorPair {
        ErrorPair {
            false_alarm: self.sf(Hypothesis::H0, threshold),
            miss: self.cdf(Hypothesis::H1, threshold),
        }
    }
}

impl SignalModel for LikelihoodModel {
    fn support(&self) -> (f64, f64) {
        LikelihoodModel::support(self)
    }
    fn density(&self, h: Hypothesis, y: f64) -> Result<f64> {
        LikelihoodModel::density(self, h, y)
    }
    fn cdf(&self, h: Hypothesis, y: f64) -> f64 {
        LikelihoodModel::cdf(self, h, y)
    }
    fn sf(&self, h: Hypothesis, y: f64) -> f64 {
        LikelihoodModel::sf(self, h, y)
    }
    fn likelihood_ratio(&self, y: f64) -> Result<f64> {
        LikelihoodModel::likelihood_ratio(self, y)
    }
    fn error_probs(&self, threshold: f64) -> ErrorPair {
        LikelihoodModel::error_probs(self, threshold)
    }
}
