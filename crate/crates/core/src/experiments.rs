//! Experiment drivers: policy comparison at one configuration, the
//! loss-and-wear grid, and the tolerance sweep with knee and Pareto analysis.
//!
//! All policies within an experiment share the master seed, so replication
//! `r` sees the same initial purchase and exposure draws under every policy.
//! Replications run in parallel and are collected by index.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalogue::Assortment;
use crate::environment::{self, SimConfig};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, MetricsSummary, RunMetrics};
use crate::policies::{Policy, PolicyKind};

pub fn run_replications<A: Assortment + Sync + ?Sized>(config: &SimConfig, shop: &A, n_reps: usize) -> Result<Vec<RunMetrics>> {
    config.validate()?;
    (0..n_reps as u64)
        .into_par_iter()
        .map(|r| environment::run_replication(config, shop, r).map(|t| t.metrics))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyResult {
    pub policy: Policy,
    pub runs: Vec<RunMetrics>,
    pub summary: MetricsSummary,
}

pub fn experiment_reference<A: Assortment + Sync + ?Sized>(
    base: &SimConfig,
    shop: &A,
    policies: &[Policy],
    n_reps: usize,
) -> Result<Vec<PolicyResult>> {
    if n_reps == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    policies
        .iter()
        .map(|&policy| {
            let cfg = SimConfig { policy, ..base.clone() };
            let runs = run_replications(&cfg, shop, n_reps)?;
            let summary = aggregate(&runs);
            Ok(PolicyResult { policy, runs, summary })
        })
        .collect()
}

/// The four policies compared throughout the experiments.
pub fn standard_policies(tau_eta: f64, tau_xi: f64) -> Vec<Policy> {
    vec![
        Policy::Purist { tau_eta },
        Policy::Greedy,
        Policy::ThresholdMix { tau_xi },
        Policy::OrphanRescue { tau_xi },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d_values: Vec<f64>,
    pub theta_values: Vec<u32>,
    pub replications: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            d_values: vec![0.0, 0.03, 0.06, 0.09, 0.12, 0.15],
            theta_values: vec![15, 25, 40],
            replications: 60,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_values.is_empty() || self.theta_values.is_empty() {
            return Err(Error::Config("grid axes must be nonempty".into()));
        }
        if self.replications < 2 {
            return Err(Error::Config("grid cells need at least two replications".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub theta: u32,
    pub d: f64,
    pub policy: Policy,
    pub runs: Vec<RunMetrics>,
    pub summary: MetricsSummary,
}

/// One row per `(theta, d, policy)`, ordered by theta, then d, then policy.
pub fn experiment_grid<A: Assortment + Sync + ?Sized>(
    grid: &GridSpec,
    base: &SimConfig,
    shop: &A,
    policies: &[Policy],
) -> Result<Vec<GridCell>> {
    grid.validate()?;
    let mut keys = Vec::new();
    for &theta in &grid.theta_values {
        for &d in &grid.d_values {
            for &policy in policies {
                keys.push((theta, d, policy));
            }
        }
    }
    keys.into_par_iter()
        .map(|(theta, d, policy)| {
            let cfg = SimConfig {
                theta,
                d,
                policy,
                ..base.clone()
            };
            let runs = run_replications(&cfg, shop, grid.replications)?;
            let summary = aggregate(&runs);
            Ok(GridCell {
                theta,
                d,
                policy,
                runs,
                summary,
            })
        })
        .collect()
}

/// A wide table: one row per `(theta, d)`, one column per policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSeries {
    pub name: &'static str,
    pub policies: Vec<PolicyKind>,
    pub rows: Vec<(u32, f64, Vec<f64>)>,
}

/// Series for the three panels: socks purchased, infeasible days and
/// stranded capacity, each against `d` for every wear limit.
pub fn panel_series(cells: &[GridCell]) -> Vec<PanelSeries> {
    let mut policies: Vec<PolicyKind> = Vec::new();
    for c in cells {
        if !policies.contains(&c.policy.kind()) {
            policies.push(c.policy.kind());
        }
    }
    let mut strata: Vec<(u32, f64)> = Vec::new();
    for c in cells {
        if !strata.iter().any(|&(t, d)| t == c.theta && d == c.d) {
            strata.push((c.theta, c.d));
        }
    }
    let panel = |name: &'static str, f: fn(&MetricsSummary) -> f64| PanelSeries {
        name,
        policies: policies.clone(),
        rows: strata
            .iter()
            .map(|&(theta, d)| {
                let values = policies
                    .iter()
                    .map(|&k| {
                        cells
                            .iter()
                            .find(|c| c.theta == theta && c.d == d && c.policy.kind() == k)
                            .map_or(f64::NAN, |c| f(&c.summary))
                    })
                    .collect();
                (theta, d, values)
            })
            .collect(),
    };
    vec![
        panel("socks_purchased", |s| s.socks_purchased.mean),
        panel("infeasible_days", |s| s.infeasible_days.mean),
        panel("stranded", |s| s.stranded.mean),
    ]
}

/// Default tolerance sweep `1.00, 0.95, ..., 0.70`.
pub fn default_tau_grid() -> Vec<f64> {
    (0..7).map(|i| (100 - 5 * i) as f64 / 100.0).collect()
}

/// Differences against the Purist baseline on matched seeds; positive
/// `delta_soc` is added social cost, negative `delta_money` is a saving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeOffPoint {
    pub policy: PolicyKind,
    pub tau_xi: f64,
    pub delta_soc: f64,
    pub delta_money: f64,
    pub delta_eco: f64,
}

impl TradeOffPoint {
    pub fn savings(&self) -> f64 {
        0.0 - self.delta_money
    }
}

pub fn tradeoff_point(policy: PolicyKind, tau_xi: f64, runs: &[RunMetrics], baseline: &[RunMetrics]) -> TradeOffPoint {
    // Per-replication differences, then averaged: the pairing keeps the
    // shared draws from adding noise.
    let diff = |f: fn(&RunMetrics) -> f64| -> f64 {
        runs.iter().zip(baseline).map(|(a, b)| f(a) - f(b)).sum::<f64>() / runs.len() as f64
    };
    TradeOffPoint {
        policy,
        tau_xi,
        delta_soc: diff(|r| r.social),
        delta_money: diff(|r| r.money),
        delta_eco: diff(|r| r.eco),
    }
}

/// Sweep `tau_xi` for each tunable policy family against a Purist baseline.
pub fn experiment_tradeoff<A: Assortment + Sync + ?Sized>(
    taus: &[f64],
    base: &SimConfig,
    shop: &A,
    n_reps: usize,
    families: &[PolicyKind],
) -> Result<Vec<TradeOffPoint>> {
    if taus.is_empty() {
        return Err(Error::Config("tau_xi sweep must be nonempty".into()));
    }
    if n_reps == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    let tau_eta = base.policy.tau_eta().unwrap_or(0.0);
    let baseline_cfg = SimConfig {
        policy: Policy::Purist { tau_eta },
        ..base.clone()
    };
    let baseline = run_replications(&baseline_cfg, shop, n_reps)?;

    let mut points = Vec::new();
    for &family in families {
        for &tau in taus {
            let policy = Policy::from_parts(family, Some(tau_eta), Some(tau))?;
            let runs = run_replications(&SimConfig { policy, ..base.clone() }, shop, n_reps)?;
            points.push(tradeoff_point(family, tau, &runs, &baseline));
        }
    }
    Ok(points)
}

// Sorted indices by cost, stable on the original order.
fn by_cost(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
    order
}

/// Index of the point with the largest marginal savings per unit cost
/// between consecutive cost levels, for `(cost, savings)` pairs. Points that
/// share a cost are represented by the one with the largest savings. Ties go
/// to the cheaper point; `None` when fewer than two distinct costs exist.
pub fn knee_point(points: &[(f64, f64)]) -> Option<usize> {
    let mut levels: Vec<usize> = Vec::new();
    for i in by_cost(points) {
        match levels.last_mut() {
            Some(last) if points[*last].0 == points[i].0 => {
                if points[i].1 > points[*last].1 {
                    *last = i;
                }
            }
            _ => levels.push(i),
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for w in levels.windows(2) {
        let (a, b) = (points[w[0]], points[w[1]]);
        let ratio = (b.1 - a.1) / (b.0 - a.0);
        if best.is_none_or(|(_, r)| ratio.total_cmp(&r) == Ordering::Greater) {
            best = Some((w[1], ratio));
        }
    }
    best.map(|(i, _)| i)
}

/// Indices of points not dominated under (lower cost, higher savings),
/// ordered by cost.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut front = Vec::new();
    let mut best_savings = f64::NEG_INFINITY;
    let order = by_cost(points);
    let mut k = 0;
    while k < order.len() {
        // Points sharing a cost only compete on savings.
        let cost = points[order[k]].0;
        let mut end = k;
        while end < order.len() && points[order[end]].0 == cost {
            end += 1;
        }
        let group = &order[k..end];
        let top = group
            .iter()
            .map(|&i| points[i].1)
            .fold(f64::NEG_INFINITY, f64::max);
        if top > best_savings {
            front.extend(group.iter().copied().filter(|&i| points[i].1 == top));
            best_savings = top;
        }
        k = end;
    }
    front
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && v[order[end]] == v[order[k]] {
            end += 1;
        }
        let avg = (k + end - 1) as f64 / 2.0 + 1.0;
        for &i in &order[k..end] {
            out[i] = avg;
        }
        k = end;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
