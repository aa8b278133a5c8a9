//! Per-day costs, run outcomes and replication summaries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::catalogue::PairMetric;
use crate::environment::{AgentParams, SockInstance};
use crate::policies::Policy;

/// One purchase event: two or more instances of a single design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Purchase {
    pub design: usize,
    pub instance_ids: Vec<u64>,
    pub spend: u64,
    pub eco: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day: u32,
    pub exposed: bool,
    pub feasible: bool,
    pub pair: Option<(u64, u64)>,
    pub eta: Option<f64>,
    pub social_cost: f64,
    pub purchases: Vec<Purchase>,
    pub washed: usize,
    pub lost: usize,
    /// Remaining wear capacity of the socks lost in today's wash.
    pub lost_capacity: f64,
    pub worn_out: usize,
}

impl DayRecord {
    pub fn purchase_spend(&self) -> u64 {
        self.purchases.iter().map(|p| p.spend).sum()
    }

    pub fn purchase_eco(&self) -> f64 {
        self.purchases.iter().map(|p| p.eco).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub socks_purchased: u64,
    pub money: f64,
    pub eco: f64,
    pub social: f64,
    pub infeasible_days: u32,
    pub stranded_loss: f64,
    pub stranded_terminal: f64,
    pub stranded: f64,
    pub total_wears: u64,
    pub reward_total: f64,
}

/// `Z * chi * eta^gamma`.
pub fn social_cost(eta: f64, chi: f64, exposed: bool, gamma: f64) -> f64 {
    if !exposed || eta == 0.0 {
        return 0.0;
    }
    chi * eta.powf(gamma)
}

/// Immediate utility of one day: purchases and social penalty, both negative.
pub fn day_reward(record: &DayRecord, agent: &AgentParams) -> f64 {
    let purchases: f64 = record
        .purchases
        .iter()
        .map(|p| p.spend as f64 + agent.lambda * p.eco)
        .sum();
    -purchases - record.social_cost
}

/// Shannon entropy (nats) of the design distribution in `socks`.
pub fn diversity(socks: &[SockInstance]) -> f64 {
    if socks.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in socks {
        *counts.entry(s.design).or_default() += 1;
    }
    let n = socks.len() as f64;
    let mut counts: Vec<usize> = counts.into_values().collect();
    counts.sort_unstable();
    counts
        .into_iter()
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .fold(0.0, |acc, x| acc + x)
}

/// Mean mismatch over all unordered sock pairs.
pub fn pairwise_dispersion<M: PairMetric + ?Sized>(socks: &[SockInstance], metric: &M) -> f64 {
    let n = socks.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += metric.eta(socks[i].design, socks[j].design);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMeasure {
    #[default]
    Shannon,
    PairwiseDispersion,
}

impl DiversityMeasure {
    pub fn evaluate<M: PairMetric + ?Sized>(self, socks: &[SockInstance], metric: &M) -> f64 {
        match self {
            DiversityMeasure::Shannon => diversity(socks),
            DiversityMeasure::PairwiseDispersion => pairwise_dispersion(socks, metric),
        }
    }
}

pub fn diversity_utility(socks: &[SockInstance], delta: f64) -> f64 {
    delta * diversity(socks)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StrandedCapacity {
    pub loss: f64,
    pub terminal: f64,
}

impl StrandedCapacity {
    pub fn total(&self) -> f64 {
        self.loss + self.terminal
    }
}

/// Remaining capacity of owned socks that have no partner the policy would
/// accept.
pub fn terminal_stranding<M: PairMetric + ?Sized>(owned: &[SockInstance], metric: &M, policy: &Policy) -> f64 {
    owned
        .iter()
        .enumerate()
        .filter(|&(i, s)| {
            !owned
                .iter()
                .enumerate()
                .any(|(j, o)| i != j && policy.acceptable(metric.eta(s.design, o.design)))
        })
        .map(|(_, s)| s.remaining() as f64)
        .fold(0.0, |a, b| a + b)
}

/// Stranded wear capacity of a finished run: capacity lost in the wash plus
/// capacity of end-of-horizon socks left without an acceptable partner.
pub fn stranded_capacity<M: PairMetric + ?Sized>(
    days: &[DayRecord],
    owned_at_end: &[SockInstance],
    metric: &M,
    policy: &Policy,
) -> StrandedCapacity {
    StrandedCapacity {
        loss: days.iter().map(|d| d.lost_capacity).fold(0.0, |a, b| a + b),
        terminal: terminal_stranding(owned_at_end, metric, policy),
    }
}

/// Normal-approximation z for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// `1.96 * s / sqrt(n)`; absent for a single replication.
    pub ci_half_width: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            n,
            mean: f64::NAN,
            ci_half_width: None,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ci_half_width = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Z_95 * var.sqrt() / (n as f64).sqrt()
    });
    Summary {
        n,
        mean,
        ci_half_width,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub socks_purchased: Summary,
    pub money: Summary,
    pub eco: Summary,
    pub social: Summary,
    pub infeasible_days: Summary,
    pub stranded: Summary,
    pub stranded_loss: Summary,
    pub stranded_terminal: Summary,
    pub total_wears: Summary,
    pub reward_total: Summary,
}

pub fn aggregate(runs: &[RunMetrics]) -> MetricsSummary {
    let field = |f: fn(&RunMetrics) -> f64| summarize(&runs.iter().map(f).collect::<Vec<_>>());
    MetricsSummary {
        socks_purchased: field(|r| r.socks_purchased as f64),
        money: field(|r| r.money),
        eco: field(|r| r.eco),
        social: field(|r| r.social),
        infeasible_days: field(|r| f64::from(r.infeasible_days)),
        stranded: field(|r| r.stranded),
        stranded_loss: field(|r| r.stranded_loss),
        stranded_terminal: field(|r| r.stranded_terminal),
        total_wears: field(|r| r.total_wears as f64),
        reward_total: field(|r| r.reward_total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalogue::{Catalogue, FeatureSpace, SockDesign};
    use proptest::prelude::*;

    fn sock(id: u64, design: usize, tau: u32, theta: u32) -> SockInstance {
        SockInstance {
            id,
            design,
            tau,
            theta,
            d: 0.0,
        }
    }

    fn record(purchases: Vec<Purchase>, social: f64) -> DayRecord {
        DayRecord {
            day: 1,
            exposed: social > 0.0,
            feasible: true,
            pair: None,
            eta: None,
            social_cost: social,
            purchases,
            washed: 0,
            lost: 0,
            lost_capacity: 0.0,
            worn_out: 0,
        }
    }

    #[test]
    fn social_cost_examples() {
        assert_eq!(social_cost(0.5, 7.0, false, 1.02), 0.0);
        assert_eq!(social_cost(0.0, 5.0, true, 1.02), 0.0);
        // 1.25 * 0.5^1.02 = 0.6163954403083...
        let v = social_cost(0.5, 1.25, true, 1.02);
        assert!((v - 0.616_395_440_308_35).abs() < 1e-12, "{v}");
    }

    #[test]
    fn day_reward_examples() {
        let agent = |lambda| AgentParams {
            lambda,
            ..AgentParams::reference()
        };
        assert_eq!(day_reward(&record(vec![], 0.0), &agent(0.0)), 0.0);
        let buy = Purchase {
            design: 0,
            instance_ids: vec![1, 2],
            spend: 10,
            eco: 10.0,
        };
        assert_eq!(day_reward(&record(vec![buy.clone()], 0.0), &agent(0.0)), -10.0);
        let r = day_reward(&record(vec![buy], 0.61641), &agent(0.5));
        assert!((r - (-15.61641)).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let one: Vec<_> = (0..10).map(|i| sock(i, 0, 0, 1)).collect();
        assert_eq!(diversity(&one), 0.0);
        let two: Vec<_> = (0..10).map(|i| sock(i, (i % 2) as usize, 0, 1)).collect();
        assert!((diversity(&two) - 2f64.ln()).abs() < 1e-15);
        let counts = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
        let three: Vec<_> = counts.iter().enumerate().map(|(i, &d)| sock(i as u64, d, 0, 1)).collect();
        // -(0.4 ln 0.4 + 2 * 0.3 ln 0.3)
        let expected = -(0.4f64 * 0.4f64.ln() + 2.0 * 0.3 * 0.3f64.ln());
        assert!((diversity(&three) - expected).abs() < 1e-15);
        assert!((expected - 1.0889).abs() < 1e-4);
        assert_eq!(diversity_utility(&three, 0.0), 0.0);
        assert!((diversity_utility(&two, 2.0) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((diversity_utility(&three, 1.753) - 1.9089).abs() < 1e-4);
        assert_eq!(diversity(&[]), 0.0);
    }

    fn three_way_catalogue() -> Catalogue {
        let designs = [[0u32, 0, 0], [1, 1, 1], [2, 2, 2]]
            .iter()
            .enumerate()
            .map(|(i, v)| SockDesign {
                design_id: format!("d{i}"),
                features: v.to_vec().into(),
                price: 5,
                eco: 5.0,
            })
            .collect();
        Catalogue::new(FeatureSpace::new(vec![3, 3, 3]).unwrap(), designs).unwrap()
    }

    #[test]
    fn stranded_capacity_examples() {
        let cat = three_way_catalogue();
        let purist = Policy::Purist { tau_eta: 0.0 };
        let pairable = [sock(1, 0, 3, 50), sock(2, 0, 4, 50)];
        let none = stranded_capacity(&[], &pairable, &cat, &purist);
        assert_eq!(none.total(), 0.0);

        let mut lossy = record(vec![], 0.0);
        lossy.lost = 1;
        lossy.lost_capacity = f64::from(50 - 10);
        let s = stranded_capacity(&[lossy], &pairable, &cat, &purist);
        assert_eq!(s.loss, 40.0);
        assert_eq!(s.terminal, 0.0);

        let orphans = [sock(1, 0, 30, 50), sock(2, 1, 30, 50), sock(3, 2, 30, 50)];
        let s = stranded_capacity(&[], &orphans, &cat, &purist);
        assert_eq!(s.terminal, 60.0);
        // Greedy accepts any partner.
        assert_eq!(stranded_capacity(&[], &orphans, &cat, &Policy::Greedy).terminal, 0.0);
    }

    #[test]
    fn summarize_examples() {
        let same = summarize(&[3.0; 5]);
        assert_eq!(same.mean, 3.0);
        assert_eq!(same.ci_half_width, Some(0.0));

        let s = summarize(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(s.mean, 0.5);
        // sample sd = sqrt(1/3)
        let expected = 1.96 * (1.0f64 / 3.0).sqrt() / 2.0;
        assert!((s.ci_half_width.unwrap() - expected).abs() < 1e-15);

        let single = summarize(&[4.0]);
        assert_eq!(single.mean, 4.0);
        assert_eq!(single.ci_half_width, None);
    }

    proptest! {
        #[test]
        fn social_cost_monotone_and_linear(a in 0.0f64..=1.0, b in 0.0f64..=1.0, chi in 0.0f64..10.0, c in 0.0f64..5.0, gamma in 1.0f64..3.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(social_cost(lo, chi, true, gamma) <= social_cost(hi, chi, true, gamma));
            let scaled = social_cost(a, c * chi, true, gamma);
            let expected = c * social_cost(a, chi, true, gamma);
            prop_assert!((scaled - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            prop_assert_eq!(social_cost(a, chi, false, gamma), 0.0);
        }
    }
}
