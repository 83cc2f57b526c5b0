//! Two-person prisoner's dilemma primitives and the other-regarding utility.
//!
//! An agent's own round payoff is the sum of its pairwise games against every
//! occupied Moore neighbor. Its utility blends that payoff with the mean round
//! payoff of its neighbors, weighted by its friendliness.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four prisoner's dilemma payoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffMatrix {
    /// Defector exploiting a cooperator.
    pub temptation: f64,
    /// Mutual cooperation.
    pub reward: f64,
    /// Mutual defection.
    pub punishment: f64,
    /// Cooperator exploited by a defector.
    pub sucker: f64,
}

impl Default for PayoffMatrix {
    fn default() -> Self {
        PayoffMatrix {
            temptation: 1.1,
            reward: 1.0,
            punishment: 0.0,
            sucker: -1.0,
        }
    }
}

impl PayoffMatrix {
    pub fn new(temptation: f64, reward: f64, punishment: f64, sucker: f64) -> Result<Self> {
        let m = PayoffMatrix {
            temptation,
            reward,
            punishment,
            sucker,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks `T > R > P > S` and `2R > T + S`.
    pub fn validate(&self) -> Result<()> {
        let PayoffMatrix {
            temptation: t,
            reward: r,
            punishment: p,
            sucker: s,
        } = *self;
        if ![t, r, p, s].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("payoffs must be finite".into()));
        }
        if !(t > r && r > p && p > s) {
            return Err(Error::Config(format!(
                "payoffs must satisfy T > R > P > S, got T={t} R={r} P={p} S={s}"
            )));
        }
        if 2.0 * r <= t + s {
            return Err(Error::Config(format!(
                "payoffs must satisfy 2R > T + S, got 2R={} T+S={}",
                2.0 * r,
                t + s
            )));
        }
        Ok(())
    }

    /// Friendliness at or below which an agent never cooperates with a lone
    /// cooperating partner: `(T-R)/(T-S)`.
    pub fn lower_threshold(&self) -> f64 {
        (self.temptation - self.reward) / (self.temptation - self.sucker)
    }

    /// Friendliness at or above which an agent cooperates with a lone
    /// defecting partner: `(P-S)/(T-S)`.
    pub fn upper_threshold(&self) -> f64 {
        (self.punishment - self.sucker) / (self.temptation - self.sucker)
    }

    /// Threshold for cooperating when all `n` neighbors cooperate, under
    /// summed own payoff and averaged neighbor payoff.
    pub fn all_cooperate_threshold(&self, n: usize) -> f64 {
        let n = n as f64;
        let gain = n * (self.temptation - self.reward);
        gain / (gain + (self.reward - self.sucker))
    }

    /// Threshold for cooperating when all `n` neighbors defect.
    pub fn all_defect_threshold(&self, n: usize) -> f64 {
        let n = n as f64;
        let loss = n * (self.punishment - self.sucker);
        loss / (loss + (self.temptation - self.punishment))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "C")]
    Cooperate,
    #[serde(rename = "D")]
    Defect,
}

impl Action {
    pub fn opposite(self) -> Action {
        match self {
            Action::Cooperate => Action::Defect,
            Action::Defect => Action::Cooperate,
        }
    }

    pub fn is_cooperate(self) -> bool {
        self == Action::Cooperate
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Cooperate => "C",
            Action::Defect => "D",
        })
    }
}

/// Weight an agent puts on its neighbors' average payoff. Always in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Friendliness(f64);

impl Friendliness {
    pub const ZERO: Friendliness = Friendliness(0.0);

    pub fn new(rho: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&rho) {
            Ok(Friendliness(rho))
        } else {
            Err(Error::InvalidArgument(format!(
                "friendliness must lie in [0, 1], got {rho}"
            )))
        }
    }

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn saturating(rho: f64) -> Self {
        if rho.is_nan() {
            Friendliness(0.0)
        } else {
            Friendliness(rho.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Friendliness {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Friendliness::new(v)
    }
}

impl From<Friendliness> for f64 {
    fn from(f: Friendliness) -> f64 {
        f.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentClass {
    SelfRegarding,
    ConditionalCooperator,
    Idealist,
}

pub fn pair_payoff(own: Action, other: Action, m: &PayoffMatrix) -> f64 {
    match (own, other) {
        (Action::Cooperate, Action::Cooperate) => m.reward,
        (Action::Cooperate, Action::Defect) => m.sucker,
        (Action::Defect, Action::Cooperate) => m.temptation,
        (Action::Defect, Action::Defect) => m.punishment,
    }
}

/// Sum of pairwise payoffs against every neighbor; 0 when there are none.
pub fn round_payoff<I>(own: Action, neighbors: I, m: &PayoffMatrix) -> f64
where
    I: IntoIterator<Item = Action>,
{
    neighbors
        .into_iter()
        .map(|other| pair_payoff(own, other, m))
        .sum()
}

pub fn utility(own_payoff: f64, neighbor_avg_payoff: f64, rho: Friendliness) -> f64 {
    let r = rho.value();
    (1.0 - r) * own_payoff + r * neighbor_avg_payoff
}

/// Utility gain of cooperating over defecting, given `cooperating` of
/// `neighbors` partners cooperate.
///
/// Only the games played with this agent change between the two branches, so
/// the neighbors' games with third parties cancel out.
pub fn cooperation_gain(
    cooperating: usize,
    neighbors: usize,
    rho: Friendliness,
    mat: &PayoffMatrix,
) -> f64 {
    let m = cooperating as f64;
    let d = (neighbors - cooperating) as f64;
    let n = neighbors as f64;
    let r = rho.value();
    let own = m * (mat.reward - mat.temptation) + d * (mat.sucker - mat.punishment);
    let others = m * (mat.reward - mat.sucker) + d * (mat.temptation - mat.punishment);
    (1.0 - r) * own + (r / n) * others
}

/// Strict best response; a zero gain resolves to defection.
pub fn best_response(
    cooperating: usize,
    neighbors: usize,
    rho: Friendliness,
    mat: &PayoffMatrix,
) -> Result<Action> {
    if neighbors == 0 {
        return Err(Error::InvalidArgument(
            "best response needs at least one neighbor".into(),
        ));
    }
    if cooperating > neighbors {
        return Err(Error::InvalidArgument(format!(
            "{cooperating} cooperating neighbors out of {neighbors}"
        )));
    }
    Ok(best_response_unchecked(cooperating, neighbors, rho, mat))
}

#[inline]
pub(crate) fn best_response_unchecked(
    cooperating: usize,
    neighbors: usize,
    rho: Friendliness,
    mat: &PayoffMatrix,
) -> Action {
    if cooperation_gain(cooperating, neighbors, rho, mat) > 0.0 {
        Action::Cooperate
    } else {
        Action::Defect
    }
}

pub fn classify(rho: Friendliness, mat: &PayoffMatrix) -> AgentClass {
    let r = rho.value();
    if r <= mat.lower_threshold() {
        AgentClass::SelfRegarding
    } else if r >= mat.upper_threshold() {
        AgentClass::Idealist
    } else {
        AgentClass::ConditionalCooperator
    }
}
