//! Daily pair-selection strategies.
//!
//! Every selector is a pure function of the inventory snapshot. Ties between
//! equally scored pairs are broken by lower mismatch, then lower combined
//! remaining wear capacity, then lower instance ids, so repeated calls on the
//! same inventory always return the same pair.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalogue::PairMetric;
use crate::environment::{AgentParams, SockInstance};
use crate::error::{Error, Result};

/// Slack for threshold comparisons; mismatch values are ratios like 1/3.
pub const THRESHOLD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Only pairs with mismatch at most `tau_eta`.
    Purist { tau_eta: f64 },
    Greedy,
    ThresholdMix { tau_xi: f64 },
    OrphanRescue { tau_xi: f64 },
    ExposureAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Purist,
    Greedy,
    ThresholdMix,
    OrphanRescue,
    ExposureAware,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Purist,
        PolicyKind::Greedy,
        PolicyKind::ThresholdMix,
        PolicyKind::OrphanRescue,
        PolicyKind::ExposureAware,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            PolicyKind::Purist => "purist",
            PolicyKind::Greedy => "greedy",
            PolicyKind::ThresholdMix => "threshold_mix",
            PolicyKind::OrphanRescue => "orphan_rescue",
            PolicyKind::ExposureAware => "exposure_aware",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Purist => "Purist",
            PolicyKind::Greedy => "Greedy",
            PolicyKind::ThresholdMix => "ThresholdMix",
            PolicyKind::OrphanRescue => "OrphanRescue",
            PolicyKind::ExposureAware => "ExposureAware",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.slug() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown policy `{s}` (expected purist|greedy|threshold_mix|orphan_rescue|exposure_aware)"
                ))
            })
    }
}

fn check_threshold(name: &str, value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::Config(format!("{name} = {value} outside [0, 1]")))
    }
}

impl Policy {
    /// Build a policy from its kind plus whichever thresholds it needs.
    /// A Purist without `tau_eta` accepts identical-looking pairs only.
    pub fn from_parts(kind: PolicyKind, tau_eta: Option<f64>, tau_xi: Option<f64>) -> Result<Self> {
        let need_xi = || {
            tau_xi
                .ok_or_else(|| Error::Config(format!("policy {kind} requires tau_xi")))
                .and_then(|t| check_threshold("tau_xi", t))
        };
        Ok(match kind {
            PolicyKind::Purist => Policy::Purist {
                tau_eta: check_threshold("tau_eta", tau_eta.unwrap_or(0.0))?,
            },
            PolicyKind::Greedy => Policy::Greedy,
            PolicyKind::ThresholdMix => Policy::ThresholdMix { tau_xi: need_xi()? },
            PolicyKind::OrphanRescue => Policy::OrphanRescue { tau_xi: need_xi()? },
            PolicyKind::ExposureAware => Policy::ExposureAware,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Purist { .. } => PolicyKind::Purist,
            Policy::Greedy => PolicyKind::Greedy,
            Policy::ThresholdMix { .. } => PolicyKind::ThresholdMix,
            Policy::OrphanRescue { .. } => PolicyKind::OrphanRescue,
            Policy::ExposureAware => PolicyKind::ExposureAware,
        }
    }

    pub fn tau_eta(&self) -> Option<f64> {
        match *self {
            Policy::Purist { tau_eta } => Some(tau_eta),
            _ => None,
        }
    }

    pub fn tau_xi(&self) -> Option<f64> {
        match *self {
            Policy::ThresholdMix { tau_xi } | Policy::OrphanRescue { tau_xi } => Some(tau_xi),
            _ => None,
        }
    }

    /// Whether a pair with mismatch `eta` counts as wearable under this
    /// policy's own constraint. Used for end-of-horizon stranding.
    pub fn acceptable(&self, eta: f64) -> bool {
        match *self {
            Policy::Purist { tau_eta } => eta <= tau_eta + THRESHOLD_EPS,
            Policy::ThresholdMix { tau_xi } | Policy::OrphanRescue { tau_xi } => {
                1.0 - eta >= tau_xi - THRESHOLD_EPS
            }
            Policy::Greedy | Policy::ExposureAware => true,
        }
    }

    pub fn select<M: PairMetric + ?Sized>(
        &self,
        inventory: &[SockInstance],
        metric: &M,
        agent: &AgentParams,
    ) -> PairChoice {
        match *self {
            Policy::Purist { tau_eta } => select_purist(inventory, metric, tau_eta),
            Policy::Greedy => select_greedy(inventory, metric),
            Policy::ThresholdMix { tau_xi } => select_threshold_mix(inventory, metric, tau_xi),
            Policy::OrphanRescue { tau_xi } => select_orphan_rescue(inventory, metric, tau_xi),
            Policy::ExposureAware => select_exposure_aware(inventory, metric, agent),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Policy::Purist { tau_eta } => write!(f, "purist(tau_eta={tau_eta})"),
            Policy::ThresholdMix { tau_xi } => write!(f, "threshold_mix(tau_xi={tau_xi})"),
            Policy::OrphanRescue { tau_xi } => write!(f, "orphan_rescue(tau_xi={tau_xi})"),
            other => f.write_str(other.kind().slug()),
        }
    }
}

/// A selected pair: positions in the inventory slice plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChosenPair {
    pub first: usize,
    pub second: usize,
    pub first_id: u64,
    pub second_id: u64,
    pub xi: f64,
    pub eta: f64,
}

pub type PairChoice = Option<ChosenPair>;

#[derive(Clone, Copy)]
struct Candidate {
    i: usize,
    j: usize,
    score: f64,
    eta: f64,
    remaining: u64,
    ids: (u64, u64),
}

impl Candidate {
    fn new<M: PairMetric + ?Sized>(socks: &[SockInstance], metric: &M, i: usize, j: usize, score: impl Fn(f64) -> f64) -> Self {
        let (a, b) = (&socks[i], &socks[j]);
        let eta = metric.eta(a.design, b.design);
        Candidate {
            i,
            j,
            score: score(eta),
            eta,
            remaining: a.remaining() + b.remaining(),
            ids: (a.id.min(b.id), a.id.max(b.id)),
        }
    }

    // `Greater` means `self` is the better pair.
    fn rank(&self, other: &Candidate) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.eta.total_cmp(&self.eta))
            .then(other.remaining.cmp(&self.remaining))
            .then(other.ids.cmp(&self.ids))
    }

    fn into_choice(self, socks: &[SockInstance]) -> ChosenPair {
        ChosenPair {
            first: self.i,
            second: self.j,
            first_id: socks[self.i].id,
            second_id: socks[self.j].id,
            xi: 1.0 - self.eta,
            eta: self.eta,
        }
    }
}

fn best_pair<M: PairMetric + ?Sized>(
    socks: &[SockInstance],
    metric: &M,
    allowed: impl Fn(f64) -> bool,
    score: impl Fn(f64) -> f64 + Copy,
) -> PairChoice {
    let mut best: Option<Candidate> = None;
    for i in 0..socks.len() {
        for j in (i + 1)..socks.len() {
            let cand = Candidate::new(socks, metric, i, j, score);
            if !allowed(cand.eta) {
                continue;
            }
            if best.is_none_or(|b| cand.rank(&b) == Ordering::Greater) {
                best = Some(cand);
            }
        }
    }
    best.map(|c| c.into_choice(socks))
}

fn xi_score(eta: f64) -> f64 {
    1.0 - eta
}

/// Most compatible pair among those with mismatch at most `tau_eta`.
pub fn select_purist<M: PairMetric + ?Sized>(socks: &[SockInstance], metric: &M, tau_eta: f64) -> PairChoice {
    best_pair(socks, metric, |eta| eta <= tau_eta + THRESHOLD_EPS, xi_score)
}

pub fn select_greedy<M: PairMetric + ?Sized>(socks: &[SockInstance], metric: &M) -> PairChoice {
    best_pair(socks, metric, |_| true, xi_score)
}

/// Best pair with compatibility at least `tau_xi` if one exists, otherwise
/// the best pair overall.
pub fn select_threshold_mix<M: PairMetric + ?Sized>(socks: &[SockInstance], metric: &M, tau_xi: f64) -> PairChoice {
    best_pair(socks, metric, |eta| 1.0 - eta >= tau_xi - THRESHOLD_EPS, xi_score)
        .or_else(|| select_greedy(socks, metric))
}

/// Pick the sock with the fewest acceptable partners (fewest remaining
/// wears, then lowest id on ties) and pair it with its most compatible
/// partner.
pub fn select_orphan_rescue<M: PairMetric + ?Sized>(socks: &[SockInstance], metric: &M, tau_xi: f64) -> PairChoice {
    if socks.len() < 2 {
        return None;
    }
    let mut degree = vec![0usize; socks.len()];
    for i in 0..socks.len() {
        for j in (i + 1)..socks.len() {
            if metric.xi(socks[i].design, socks[j].design) >= tau_xi - THRESHOLD_EPS {
                degree[i] += 1;
                degree[j] += 1;
            }
        }
    }
    let orphan = (0..socks.len())
        .min_by_key(|&i| (degree[i], socks[i].remaining(), socks[i].id))
        .expect("nonempty inventory");

    let mut best: Option<Candidate> = None;
    for partner in (0..socks.len()).filter(|&p| p != orphan) {
        let (i, j) = (orphan.min(partner), orphan.max(partner));
        let cand = Candidate::new(socks, metric, i, j, xi_score);
        if best.is_none_or(|b| cand.rank(&b) == Ordering::Greater) {
            best = Some(cand);
        }
    }
    best.map(|c| c.into_choice(socks))
}

/// Maximize `xi - rho * chi * eta^gamma`, the expected immediate utility with
/// the exposure indicator replaced by its mean.
pub fn select_exposure_aware<M: PairMetric + ?Sized>(socks: &[SockInstance], metric: &M, agent: &AgentParams) -> PairChoice {
    let weight = agent.rho * agent.chi;
    let gamma = agent.gamma;
    best_pair(socks, metric, |_| true, move |eta| (1.0 - eta) - weight * eta.powf(gamma))
}
