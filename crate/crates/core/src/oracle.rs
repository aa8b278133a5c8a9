//! Exact solvers for tiny planning instances: the buy-and-pair decision
//! problem, 0-1 knapsack and its reduction to it, and budgeted coverage with
//! its partial-enumeration greedy.
//!
//! Plan dynamics here are the deterministic (`d = 0`) ones of the simulator
//! with the capacity-only laundry trigger. Compatibilities are exact
//! rationals so that threshold comparisons never round.

use std::collections::HashMap;

use num_rational::Rational64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalogue::{Assortment, PairMetric};
use crate::environment::{self, AgentParams, LaundryTrigger, SimConfig, SockInstance};
use crate::error::{Error, Result};
use crate::policies::Policy;
use crate::rng::StreamRng;

pub type Q = Rational64;

pub const MAX_PLAN_SOCKS: usize = 24;
pub const MAX_PLAN_HORIZON: u32 = 6;
pub const MAX_PLAN_CLASSES: usize = 16;
pub const MAX_KNAPSACK_ITEMS: usize = 20;
pub const MAX_COVERAGE_SETS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSock {
    pub label: String,
    pub price: u64,
    pub theta: u32,
    #[serde(default)]
    pub d: f64,
}

/// A catalogue of individual socks, each purchasable at most once.
#[derive(Debug, Clone, PartialEq)]
pub struct SockPlanInstance {
    pub socks: Vec<PlanSock>,
    /// Symmetric compatibility table; the diagonal is ignored.
    pub xi: Vec<Vec<Q>>,
    pub horizon: u32,
    pub kappa: usize,
    pub budget: u64,
    /// Decision threshold; `None` when undefined.
    pub threshold: Option<Q>,
}

impl SockPlanInstance {
    pub fn new(
        socks: Vec<PlanSock>,
        xi: Vec<Vec<Q>>,
        horizon: u32,
        kappa: usize,
        budget: u64,
        threshold: Option<Q>,
    ) -> Result<Self> {
        let n = socks.len();
        if xi.len() != n || xi.iter().any(|row| row.len() != n) {
            return Err(Error::invalid(format!("compatibility table must be {n}x{n}")));
        }
        let (zero, one) = (Q::from_integer(0), Q::from_integer(1));
        for i in 0..n {
            for j in 0..n {
                if i != j && (xi[i][j] != xi[j][i] || xi[i][j] < zero || xi[i][j] > one) {
                    return Err(Error::invalid(format!("compatibility ({i},{j}) must be symmetric and in [0,1]")));
                }
            }
        }
        if let Some(s) = socks.iter().find(|s| !(0.0..=1.0).contains(&s.d)) {
            return Err(Error::invalid(format!("loss probability of {} outside [0,1]", s.label)));
        }
        if kappa == 0 {
            return Err(Error::invalid("laundry capacity must be positive"));
        }
        Ok(SockPlanInstance {
            socks,
            xi,
            horizon,
            kappa,
            budget,
            threshold,
        })
    }

    fn xi_f64(&self, a: usize, b: usize) -> f64 {
        let q = self.xi[a][b];
        *q.numer() as f64 / *q.denom() as f64
    }
}

impl PairMetric for SockPlanInstance {
    fn eta(&self, a: usize, b: usize) -> f64 {
        if a == b {
            0.0
        } else {
            1.0 - self.xi_f64(a, b)
        }
    }
}

impl Assortment for SockPlanInstance {
    fn len(&self) -> usize {
        self.socks.len()
    }

    fn price(&self, design: usize) -> u64 {
        self.socks[design].price
    }

    fn eco(&self, design: usize) -> f64 {
        self.socks[design].price as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SockPlanSolution {
    pub value: Q,
    /// Indices of purchased socks, ascending.
    pub purchase: Vec<usize>,
    /// One entry per day; `None` for a day without a pair.
    pub schedule: Vec<Option<(usize, usize)>>,
}

// Interchangeable socks: same price and wear limit, identical
// compatibility with every outside sock, one common value inside.
#[derive(Debug)]
struct Class {
    members: Vec<usize>,
    price: u64,
    theta: u32,
    intra: Q,
}

fn classes(inst: &SockPlanInstance) -> Vec<Class> {
    let mut out: Vec<Class> = Vec::new();
    for j in 0..inst.socks.len() {
        let s = &inst.socks[j];
        let home = out.iter().position(|c| {
            let rep = c.members[0];
            if c.price != s.price || c.theta != s.theta {
                return false;
            }
            let intra = if c.members.len() == 1 { inst.xi[j][rep] } else { c.intra };
            c.members.iter().all(|&m| inst.xi[j][m] == intra)
                && (0..j).all(|k| c.members.contains(&k) || inst.xi[j][k] == inst.xi[rep][k])
                && (j + 1..inst.socks.len()).all(|k| inst.xi[j][k] == inst.xi[rep][k])
        });
        match home {
            Some(c) => {
                if out[c].members.len() == 1 {
                    out[c].intra = inst.xi[j][out[c].members[0]];
                }
                out[c].members.push(j);
            }
            None => {
                out.push(Class {
                    members: vec![j],
                    price: s.price,
                    theta: s.theta,
                    intra: Q::from_integer(0),
                });
            }
        }
    }
    out
}

// Per-class wear state: socks bought so far and the sorted wear counts of
// those in the drawer and in the basket. Worn-out socks are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ClassState {
    bought: u8,
    drawer: Vec<u8>,
    basket: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Drawer(u8),
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pick {
    class: usize,
    source: Source,
}

struct Search<'a> {
    inst: &'a SockPlanInstance,
    classes: Vec<Class>,
    cross: Vec<Vec<Q>>,
    memo: HashMap<(u32, Vec<ClassState>), Q>,
}

impl<'a> Search<'a> {
    fn new(inst: &'a SockPlanInstance) -> Self {
        let classes = classes(inst);
        let cross = classes
            .iter()
            .map(|a| {
                classes
                    .iter()
                    .map(|b| {
                        if std::ptr::eq(a, b) {
                            a.intra
                        } else {
                            inst.xi[a.members[0]][b.members[0]]
                        }
                    })
                    .collect()
            })
            .collect();
        Search {
            inst,
            classes,
            cross,
            memo: HashMap::new(),
        }
    }

    fn spent(&self, state: &[ClassState]) -> u64 {
        state
            .iter()
            .zip(&self.classes)
            .map(|(s, c)| u64::from(s.bought) * c.price)
            .sum()
    }

    // Feasible pairs in a fixed order.
    fn moves(&self, state: &[ClassState]) -> Vec<(Pick, Pick)> {
        let mut options: Vec<(Pick, usize)> = Vec::new();
        for (c, s) in state.iter().enumerate() {
            let mut taus = s.drawer.clone();
            taus.dedup();
            for tau in taus {
                let count = s.drawer.iter().filter(|&&t| t == tau).count();
                options.push((Pick { class: c, source: Source::Drawer(tau) }, count));
            }
            let left = self.classes[c].members.len() - s.bought as usize;
            if left > 0 {
                options.push((Pick { class: c, source: Source::New }, left));
            }
        }
        let spent = self.spent(state);
        let cost = |p: &Pick| if p.source == Source::New { self.classes[p.class].price } else { 0 };
        let mut out = Vec::new();
        for i in 0..options.len() {
            for j in i..options.len() {
                let (a, b) = (options[i].0, options[j].0);
                if i == j && options[i].1 < 2 {
                    continue;
                }
                if spent + cost(&a) + cost(&b) > self.inst.budget {
                    continue;
                }
                out.push((a, b));
            }
        }
        out
    }

    fn apply(&self, state: &[ClassState], (a, b): (Pick, Pick)) -> (Vec<ClassState>, Q) {
        let mut next = state.to_vec();
        for p in [a, b] {
            let s = &mut next[p.class];
            let tau = match p.source {
                Source::Drawer(t) => {
                    let at = s.drawer.iter().position(|&x| x == t).expect("sock in drawer");
                    s.drawer.remove(at);
                    t
                }
                Source::New => {
                    s.bought += 1;
                    0
                }
            };
            if u32::from(tau) < self.classes[p.class].theta {
                let at = s.basket.partition_point(|&x| x <= tau + 1);
                s.basket.insert(at, tau + 1);
            }
        }
        let in_basket: usize = next.iter().map(|s| s.basket.len()).sum();
        if in_basket >= self.inst.kappa {
            for s in &mut next {
                let washed = std::mem::take(&mut s.basket);
                s.drawer.extend(washed);
                s.drawer.sort_unstable();
            }
        }
        (next, self.cross[a.class][b.class])
    }

    fn best(&mut self, day: u32, state: Vec<ClassState>) -> Q {
        if day == self.inst.horizon {
            return Q::from_integer(0);
        }
        if let Some(&v) = self.memo.get(&(day, state.clone())) {
            return v;
        }
        // A day without a pair leaves the state unchanged.
        let mut best = self.best(day + 1, state.clone());
        for mv in self.moves(&state) {
            let (next, gain) = self.apply(&state, mv);
            let v = gain + self.best(day + 1, next);
            if v > best {
                best = v;
            }
        }
        self.memo.insert((day, state), best);
        best
    }
}

fn check_plan_guard(inst: &SockPlanInstance) -> Result<()> {
    if inst.socks.len() > MAX_PLAN_SOCKS || inst.horizon > MAX_PLAN_HORIZON {
        return Err(Error::GuardExceeded(format!(
            "{} socks over {} days; limits are {MAX_PLAN_SOCKS} socks and {MAX_PLAN_HORIZON} days",
            inst.socks.len(),
            inst.horizon
        )));
    }
    if inst.socks.iter().any(|s| s.d != 0.0) {
        return Err(Error::invalid("exact planning needs deterministic socks (d = 0)"));
    }
    if inst.socks.iter().any(|s| s.theta > 200) {
        return Err(Error::GuardExceeded("wear limits above 200".into()));
    }
    Ok(())
}

/// Exact maximum total compatibility over purchases within budget and
/// pairing schedules; days may be left without a pair.
pub fn brute_force_sockplan(inst: &SockPlanInstance) -> Result<SockPlanSolution> {
    check_plan_guard(inst)?;
    let mut search = Search::new(inst);
    if search.classes.len() > MAX_PLAN_CLASSES {
        return Err(Error::GuardExceeded(format!(
            "{} distinct sock classes; limit is {MAX_PLAN_CLASSES}",
            search.classes.len()
        )));
    }
    let start = vec![
        ClassState {
            bought: 0,
            drawer: Vec::new(),
            basket: Vec::new(),
        };
        search.classes.len()
    ];
    let value = search.best(0, start.clone());

    // Replay optimal choices on concrete socks.
    #[derive(Clone, Copy, PartialEq)]
    enum Loc {
        Shop,
        Drawer(u8),
        Basket(u8),
        Gone,
    }
    let mut loc = vec![Loc::Shop; inst.socks.len()];
    let mut state = start;
    let mut schedule = Vec::new();
    let mut remaining = value;
    for day in 0..inst.horizon {
        let idle = search.best(day + 1, state.clone());
        if idle == remaining {
            schedule.push(None);
            continue;
        }
        let mut chosen = None;
        for mv in search.moves(&state) {
            let (next, gain) = search.apply(&state, mv);
            if gain + search.best(day + 1, next.clone()) == remaining {
                chosen = Some((mv, next, gain));
                break;
            }
        }
        let ((a, b), next, gain) = chosen.expect("optimal move exists");
        let mut pair = Vec::new();
        for p in [a, b] {
            let members = &search.classes[p.class].members;
            let sock = *members
                .iter()
                .find(|&&m| {
                    !pair.contains(&m)
                        && match p.source {
                            Source::Drawer(t) => loc[m] == Loc::Drawer(t),
                            Source::New => loc[m] == Loc::Shop,
                        }
                })
                .expect("class member available");
            pair.push(sock);
        }
        for &m in &pair {
            let tau = match loc[m] {
                Loc::Drawer(t) => t,
                _ => 0,
            } + 1;
            loc[m] = if u32::from(tau) > inst.socks[m].theta { Loc::Gone } else { Loc::Basket(tau) };
        }
        if loc.iter().filter(|l| matches!(l, Loc::Basket(_))).count() >= inst.kappa {
            for l in &mut loc {
                if let Loc::Basket(t) = *l {
                    *l = Loc::Drawer(t);
                }
            }
        }
        schedule.push(Some((pair[0].min(pair[1]), pair[0].max(pair[1]))));
        remaining -= gain;
        state = next;
    }
    let mut purchase: Vec<usize> = (0..inst.socks.len()).filter(|&i| loc[i] != Loc::Shop).collect();
    purchase.sort_unstable();
    Ok(SockPlanSolution {
        value,
        purchase,
        schedule,
    })
}

/// Replay a plan under the deterministic dynamics and return its total
/// compatibility, or an error naming the first violated constraint.
pub fn evaluate_plan(inst: &SockPlanInstance, purchase: &[usize], schedule: &[Option<(usize, usize)>]) -> Result<Q> {
    let mut owned = vec![false; inst.socks.len()];
    let mut spend = 0u64;
    for &i in purchase {
        if i >= owned.len() || owned[i] {
            return Err(Error::invalid(format!("bad or repeated purchase {i}")));
        }
        owned[i] = true;
        spend += inst.socks[i].price;
    }
    if spend > inst.budget {
        return Err(Error::invalid(format!("spend {spend} exceeds budget {}", inst.budget)));
    }
    if schedule.len() as u32 > inst.horizon {
        return Err(Error::invalid("schedule longer than the horizon"));
    }
    let mut tau = vec![0u32; inst.socks.len()];
    let mut in_drawer = owned.clone();
    let mut basket: Vec<usize> = Vec::new();
    let mut total = Q::from_integer(0);
    for (day, entry) in schedule.iter().enumerate() {
        let Some((a, b)) = *entry else { continue };
        if a == b || !in_drawer.get(a).copied().unwrap_or(false) || !in_drawer.get(b).copied().unwrap_or(false) {
            return Err(Error::invalid(format!("day {}: pair ({a},{b}) not available", day + 1)));
        }
        total += inst.xi[a][b];
        for s in [a, b] {
            in_drawer[s] = false;
            tau[s] += 1;
            if tau[s] <= inst.socks[s].theta {
                basket.push(s);
            }
        }
        if basket.len() >= inst.kappa {
            for s in basket.drain(..) {
                in_drawer[s] = true;
            }
        }
    }
    Ok(total)
}

/// Total compatibility a pairing policy achieves on `inst` starting from
/// `purchase`, run through the simulator with matching dynamics.
pub fn policy_total_xi(inst: &SockPlanInstance, purchase: &[usize], policy: Policy) -> Result<f64> {
    let config = SimConfig {
        horizon: inst.horizon,
        kappa: inst.kappa,
        theta: 1,
        d: 0.0,
        agent: AgentParams {
            budget: 0,
            chi: 1.0,
            delta: 0.0,
            rho: 0.0,
            gamma: 1.0,
            lambda: 0.0,
        },
        policy,
        replenishment: false,
        laundry: LaundryTrigger::Capacity,
        ..SimConfig::reference(policy, 0)
    };
    let socks = purchase
        .iter()
        .map(|&i| SockInstance {
            id: 0,
            design: i,
            tau: 0,
            theta: inst.socks[i].theta,
            d: 0.0,
        })
        .collect();
    let trace = environment::run_from_socks(&config, inst, socks, 0)?;
    Ok(trace.days.iter().filter_map(|d| d.eta).map(|eta| 1.0 - eta).sum())
}

/// Random small instance with Hamming-style compatibilities over three
/// ternary features.
pub fn random_sockplan(rng: &mut StreamRng, max_socks: usize, max_horizon: u32) -> SockPlanInstance {
    let n = rng.random_range(2..=max_socks.max(2));
    let features: Vec<[u8; 3]> = (0..n).map(|_| [rng.random_range(0..3), rng.random_range(0..3), rng.random_range(0..3)]).collect();
    let socks: Vec<PlanSock> = (0..n)
        .map(|i| PlanSock {
            label: format!("s{i}"),
            price: rng.random_range(1..=4),
            theta: rng.random_range(1..=3),
            d: 0.0,
        })
        .collect();
    let xi = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let same = (0..3).filter(|&r| features[i][r] == features[j][r]).count();
                    Q::new(same as i64, 3)
                })
                .collect()
        })
        .collect();
    let total: u64 = socks.iter().map(|s| s.price).sum();
    SockPlanInstance {
        budget: rng.random_range(0..=total),
        horizon: rng.random_range(1..=max_horizon.max(1)),
        kappa: rng.random_range(2..=6),
        socks,
        xi,
        threshold: None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnapsackInstance {
    /// `(weight, value)` pairs.
    pub items: Vec<(u64, u64)>,
    pub capacity: u64,
    pub target: u64,
}

impl KnapsackInstance {
    pub fn total_value(&self) -> u64 {
        self.items.iter().map(|&(_, v)| v).sum()
    }
}

/// Exact optimum by dynamic programming over capacity.
pub fn solve_knapsack_exact(k: &KnapsackInstance) -> Result<u64> {
    if k.items.len() > MAX_KNAPSACK_ITEMS {
        return Err(Error::GuardExceeded(format!(
            "{} items; limit is {MAX_KNAPSACK_ITEMS}",
            k.items.len()
        )));
    }
    let total_w: u64 = k.items.iter().map(|&(w, _)| w).sum();
    let cap = k.capacity.min(total_w);
    if cap > 10_000_000 {
        return Err(Error::GuardExceeded(format!("effective capacity {cap} too large")));
    }
    let cap = cap as usize;
    let mut best = vec![0u64; cap + 1];
    for &(w, v) in &k.items {
        let w = w as usize;
        if w > cap {
            continue;
        }
        for c in (w..=cap).rev() {
            best[c] = best[c].max(best[c - w] + v);
        }
    }
    Ok(best[cap])
}

/// How filler socks are priced in the knapsack construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionVariant {
    /// Fillers cost 1 and the budget is `2W + 2n`. Skipping fillers frees
    /// `2n` for item socks, so the equivalence can fail.
    AsPublished,
    /// Fillers are free and the budget is `2W`.
    #[default]
    Repaired,
}

/// Item socks `L_i`, `R_i` priced `w_i` with compatibility `v_i / V_tot`,
/// `2n` fillers, `theta = 1`, `T = n`, `kappa = 2T + 1`, threshold
/// `V / V_tot` (undefined when every value is zero).
pub fn knapsack_to_sockplan(k: &KnapsackInstance, variant: ReductionVariant) -> Result<SockPlanInstance> {
    let n = k.items.len();
    let v_tot = k.total_value();
    let v_tot_i = i64::try_from(v_tot).map_err(|_| Error::invalid("total value too large"))?;
    let mut socks = Vec::with_capacity(4 * n);
    for (i, &(w, _)) in k.items.iter().enumerate() {
        for side in ["L", "R"] {
            socks.push(PlanSock {
                label: format!("{side}{}", i + 1),
                price: w,
                theta: 1,
                d: 0.0,
            });
        }
    }
    let filler_price = match variant {
        ReductionVariant::AsPublished => 1,
        ReductionVariant::Repaired => 0,
    };
    for j in 0..2 * n {
        socks.push(PlanSock {
            label: format!("f{}", j + 1),
            price: filler_price,
            theta: 1,
            d: 0.0,
        });
    }
    let m = socks.len();
    let mut xi = vec![vec![Q::from_integer(0); m]; m];
    if v_tot > 0 {
        for (i, &(_, v)) in k.items.iter().enumerate() {
            let q = Q::new(v as i64, v_tot_i);
            xi[2 * i][2 * i + 1] = q;
            xi[2 * i + 1][2 * i] = q;
        }
    }
    let budget = match variant {
        ReductionVariant::AsPublished => 2 * k.capacity + 2 * n as u64,
        ReductionVariant::Repaired => 2 * k.capacity,
    };
    let horizon = u32::try_from(n).map_err(|_| Error::invalid("too many items"))?;
    let threshold = (v_tot > 0).then(|| Q::new(k.target as i64, v_tot_i));
    SockPlanInstance::new(socks, xi, horizon, 2 * n + 1, budget, threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionCheck {
    pub knapsack_optimum: u64,
    pub knapsack_yes: bool,
    pub plan: SockPlanSolution,
    pub plan_yes: bool,
}

impl ReductionCheck {
    pub fn equivalent(&self) -> bool {
        self.knapsack_yes == self.plan_yes
    }
}

/// Solve both sides. With all values zero the threshold is undefined and
/// the plan side is taken as yes exactly when the target is zero.
pub fn check_reduction(k: &KnapsackInstance, variant: ReductionVariant) -> Result<ReductionCheck> {
    let knapsack_optimum = solve_knapsack_exact(k)?;
    let inst = knapsack_to_sockplan(k, variant)?;
    let plan = brute_force_sockplan(&inst)?;
    let plan_yes = match inst.threshold {
        Some(t) => plan.value >= t,
        None => k.target == 0,
    };
    Ok(ReductionCheck {
        knapsack_optimum,
        knapsack_yes: knapsack_optimum >= k.target,
        plan,
        plan_yes,
    })
}

pub fn verify_reduction(k: &KnapsackInstance, variant: ReductionVariant) -> Result<bool> {
    check_reduction(k, variant).map(|c| c.equivalent())
}

/// Random instance with `1..=max_items` items, weights and values in `1..=9`.
pub fn random_knapsack(rng: &mut StreamRng, max_items: usize) -> KnapsackInstance {
    let n = rng.random_range(1..=max_items.max(1));
    let items: Vec<(u64, u64)> = (0..n).map(|_| (rng.random_range(1..=9), rng.random_range(1..=9))).collect();
    let total_w: u64 = items.iter().map(|&(w, _)| w).sum();
    let total_v: u64 = items.iter().map(|&(_, v)| v).sum();
    KnapsackInstance {
        capacity: rng.random_range(0..=total_w),
        target: rng.random_range(0..=total_v + 1),
        items,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageInstance {
    pub weights: Vec<f64>,
    pub sets: Vec<Vec<usize>>,
    pub costs: Vec<u64>,
    pub budget: u64,
}

impl CoverageInstance {
    pub fn new(weights: Vec<f64>, sets: Vec<Vec<usize>>, costs: Vec<u64>, budget: u64) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("element weights must be finite and nonnegative"));
        }
        if costs.len() != sets.len() {
            return Err(Error::invalid("one cost per set"));
        }
        if costs.contains(&0) {
            return Err(Error::invalid("set costs must be at least 1"));
        }
        if sets.iter().flatten().any(|&u| u >= weights.len()) {
            return Err(Error::invalid("set element outside the universe"));
        }
        Ok(CoverageInstance {
            weights,
            sets,
            costs,
            budget,
        })
    }

    pub fn value(&self, selection: &[usize]) -> f64 {
        sock_design_value(selection, &self.sets, &self.weights)
    }

    fn cost(&self, selection: &[usize]) -> u64 {
        selection.iter().map(|&i| self.costs[i]).sum()
    }
}

/// Weight of the union of the selected feature sets.
pub fn sock_design_value(selection: &[usize], feature_sets: &[Vec<usize>], weights: &[f64]) -> f64 {
    let mut covered = vec![false; weights.len()];
    for &i in selection {
        for &u in &feature_sets[i] {
            covered[u] = true;
        }
    }
    covered
        .iter()
        .zip(weights)
        .filter(|(c, _)| **c)
        .map(|(_, w)| w)
        .fold(0.0, |a, b| a + b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageSolution {
    pub selection: Vec<usize>,
    pub value: f64,
}

pub fn brute_force_coverage(inst: &CoverageInstance) -> Result<CoverageSolution> {
    let m = inst.sets.len();
    if m > MAX_COVERAGE_SETS {
        return Err(Error::GuardExceeded(format!("{m} sets; limit is {MAX_COVERAGE_SETS}")));
    }
    let mut best = CoverageSolution {
        selection: Vec::new(),
        value: 0.0,
    };
    for mask in 0u32..(1 << m) {
        let selection: Vec<usize> = (0..m).filter(|&i| mask >> i & 1 == 1).collect();
        if inst.cost(&selection) > inst.budget {
            continue;
        }
        let value = inst.value(&selection);
        if value > best.value {
            best = CoverageSolution { selection, value };
        }
    }
    Ok(best)
}

// Add sets by marginal weight per unit cost; a set that no longer fits is
// dropped and the scan continues. Ties go to the lower index.
fn extend_by_ratio(inst: &CoverageInstance, seed: Vec<usize>) -> Vec<usize> {
    let mut chosen = seed;
    let mut spent = inst.cost(&chosen);
    let mut open: Vec<usize> = (0..inst.sets.len()).filter(|i| !chosen.contains(i)).collect();
    let mut covered = vec![false; inst.weights.len()];
    for &i in &chosen {
        for &u in &inst.sets[i] {
            covered[u] = true;
        }
    }
    while !open.is_empty() {
        let gain = |i: usize| -> f64 {
            let mut seen = Vec::new();
            inst.sets[i]
                .iter()
                .filter(|&&u| {
                    let fresh = !covered[u] && !seen.contains(&u);
                    seen.push(u);
                    fresh
                })
                .map(|&u| inst.weights[u])
                .fold(0.0, |a, b| a + b)
        };
        let (pos, _) = open
            .iter()
            .enumerate()
            .map(|(p, &i)| (p, gain(i) / inst.costs[i] as f64))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        let i = open.remove(pos);
        if spent + inst.costs[i] <= inst.budget {
            spent += inst.costs[i];
            for &u in &inst.sets[i] {
                covered[u] = true;
            }
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Ratio greedy from the empty set, or the best affordable single set if
/// that is worth more.
pub fn cost_benefit_greedy(inst: &CoverageInstance) -> CoverageSolution {
    let greedy = extend_by_ratio(inst, Vec::new());
    let mut best = CoverageSolution {
        value: inst.value(&greedy),
        selection: greedy,
    };
    for i in 0..inst.sets.len() {
        if inst.costs[i] <= inst.budget {
            let v = inst.value(&[i]);
            if v > best.value {
                best = CoverageSolution { selection: vec![i], value: v };
            }
        }
    }
    best
}

/// Partial enumeration: every affordable seed of at most three sets is
/// extended by the ratio greedy and the best result kept. This carries the
/// `1 - 1/e` guarantee.
pub fn sock_design_greedy(inst: &CoverageInstance) -> CoverageSolution {
    let m = inst.sets.len();
    let mut best = CoverageSolution {
        selection: Vec::new(),
        value: 0.0,
    };
    let mut consider = |selection: Vec<usize>| {
        let value = inst.value(&selection);
        if value > best.value {
            best = CoverageSolution { selection, value };
        }
    };
    for a in 0..m {
        for b in a + 1..m {
            for c in b + 1..m {
                let seed = vec![a, b, c];
                if inst.cost(&seed) <= inst.budget {
                    consider(extend_by_ratio(inst, seed));
                }
            }
        }
    }
    for a in 0..m {
        for b in a + 1..m {
            if inst.cost(&[a, b]) <= inst.budget {
                consider(vec![a, b]);
            }
        }
        if inst.costs[a] <= inst.budget {
            consider(vec![a]);
        }
    }
    consider(extend_by_ratio(inst, Vec::new()));
    best
}

/// Random instance with up to `max_sets` sets over up to `max_elems` elements.
pub fn random_coverage(rng: &mut StreamRng, max_sets: usize, max_elems: usize) -> CoverageInstance {
    let n_elems = rng.random_range(1..=max_elems.max(1));
    let n_sets = rng.random_range(1..=max_sets.max(1));
    let weights: Vec<f64> = (0..n_elems).map(|_| f64::from(rng.random_range(1..=10u32))).collect();
    let sets: Vec<Vec<usize>> = (0..n_sets)
        .map(|_| (0..n_elems).filter(|_| rng.random_bool(0.3)).collect())
        .collect();
    let costs: Vec<u64> = (0..n_sets).map(|_| rng.random_range(1..=6)).collect();
    let total: u64 = costs.iter().sum();
    CoverageInstance {
        budget: rng.random_range(1..=total),
        weights,
        sets,
        costs,
    }
}

/// Instance files: knapsack triples, explicit plan tables or coverage sets.
/// Compatibilities are written as `"n/d"` strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceFile {
    Knapsack {
        items: Vec<(u64, u64)>,
        capacity: u64,
        target: u64,
    },
    SockPlan {
        socks: Vec<PlanSock>,
        xi: Vec<Vec<String>>,
        horizon: u32,
        kappa: usize,
        budget: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<String>,
    },
    Coverage(CoverageInstance),
}

fn parse_q(s: &str) -> Result<Q> {
    s.trim()
        .parse::<Q>()
        .map_err(|_| Error::invalid(format!("`{s}` is not a rational like 2/3")))
}

impl InstanceFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("instance file: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn from_plan(inst: &SockPlanInstance) -> Self {
        InstanceFile::SockPlan {
            socks: inst.socks.clone(),
            xi: inst.xi.iter().map(|row| row.iter().map(|q| q.to_string()).collect()).collect(),
            horizon: inst.horizon,
            kappa: inst.kappa,
            budget: inst.budget,
            threshold: inst.threshold.map(|q| q.to_string()),
        }
    }

    pub fn plan(&self) -> Result<SockPlanInstance> {
        match self {
            InstanceFile::SockPlan {
                socks,
                xi,
                horizon,
                kappa,
                budget,
                threshold,
            } => {
                let table = xi
                    .iter()
                    .map(|row| row.iter().map(|s| parse_q(s)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                let threshold = threshold.as_deref().map(parse_q).transpose()?;
                SockPlanInstance::new(socks.clone(), table, *horizon, *kappa, *budget, threshold)
            }
            _ => Err(Error::invalid("not a sock_plan instance")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn q(n: i64, d: i64) -> Q {
        Q::new(n, d)
    }

    fn example() -> KnapsackInstance {
        KnapsackInstance {
            items: vec![(2, 3), (3, 4)],
            capacity: 3,
            target: 4,
        }
    }

    fn plain(socks: &[(u64, u32)], xi: Vec<Vec<Q>>, horizon: u32, kappa: usize, budget: u64) -> SockPlanInstance {
        let socks = socks
            .iter()
            .enumerate()
            .map(|(i, &(price, theta))| PlanSock {
                label: format!("s{i}"),
                price,
                theta,
                d: 0.0,
            })
            .collect();
        SockPlanInstance::new(socks, xi, horizon, kappa, budget, None).unwrap()
    }

    // Plain recursion over purchase subsets and every daily choice.
    fn naive_optimum(inst: &SockPlanInstance) -> Q {
        fn go(inst: &SockPlanInstance, day: u32, tau: &mut Vec<u32>, drawer: &mut Vec<bool>, basket: &mut Vec<usize>) -> Q {
            if day == inst.horizon {
                return Q::from_integer(0);
            }
            let mut best = go(inst, day + 1, tau, drawer, basket);
            let n = tau.len();
            for a in 0..n {
                for b in a + 1..n {
                    if !drawer[a] || !drawer[b] {
                        continue;
                    }
                    let (saved_tau, saved_drawer, saved_basket) = (tau.clone(), drawer.clone(), basket.clone());
                    for s in [a, b] {
                        drawer[s] = false;
                        tau[s] += 1;
                        if tau[s] <= inst.socks[s].theta {
                            basket.push(s);
                        }
                    }
                    if basket.len() >= inst.kappa {
                        for s in basket.drain(..) {
                            drawer[s] = true;
                        }
                    }
                    let v = inst.xi[a][b] + go(inst, day + 1, tau, drawer, basket);
                    if v > best {
                        best = v;
                    }
                    *tau = saved_tau;
                    *drawer = saved_drawer;
                    *basket = saved_basket;
                }
            }
            best
        }
        let n = inst.socks.len();
        let mut best = Q::from_integer(0);
        for mask in 0u32..(1 << n) {
            let cost: u64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| inst.socks[i].price).sum();
            if cost > inst.budget {
                continue;
            }
            let mut drawer: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let v = go(inst, 0, &mut vec![0; n], &mut drawer, &mut Vec::new());
            if v > best {
                best = v;
            }
        }
        best
    }

    #[test]
    fn plan_examples() {
        let one = vec![vec![q(0, 1), q(1, 1)], vec![q(1, 1), q(0, 1)]];
        let broke = plain(&[(1, 1), (1, 1)], one.clone(), 2, 5, 0);
        let sol = brute_force_sockplan(&broke).unwrap();
        assert_eq!(sol.value, q(0, 1));
        assert_eq!(sol.schedule, vec![None, None]);
        assert!(sol.purchase.is_empty());

        let free = plain(&[(0, 1), (0, 1)], one, 1, 3, 0);
        let sol = brute_force_sockplan(&free).unwrap();
        assert_eq!(sol.value, q(1, 1));
        assert_eq!(sol.schedule, vec![Some((0, 1))]);
    }

    #[test]
    fn knapsack_examples() {
        let none = KnapsackInstance {
            items: vec![],
            capacity: 5,
            target: 0,
        };
        assert_eq!(solve_knapsack_exact(&none).unwrap(), 0);
        let too_heavy = KnapsackInstance {
            items: vec![(2, 3)],
            capacity: 1,
            target: 1,
        };
        assert_eq!(solve_knapsack_exact(&too_heavy).unwrap(), 0);
        assert_eq!(solve_knapsack_exact(&example()).unwrap(), 4);
        let big = KnapsackInstance {
            items: vec![(1, 1); 21],
            capacity: 3,
            target: 1,
        };
        assert!(matches!(solve_knapsack_exact(&big), Err(Error::GuardExceeded(_))));
    }

    #[test]
    fn construction_examples() {
        let single = KnapsackInstance {
            items: vec![(1, 1)],
            capacity: 1,
            target: 1,
        };
        let inst = knapsack_to_sockplan(&single, ReductionVariant::AsPublished).unwrap();
        assert_eq!(inst.socks.len(), 4);
        assert_eq!(inst.threshold, Some(q(1, 1)));

        let inst = knapsack_to_sockplan(&example(), ReductionVariant::AsPublished).unwrap();
        assert_eq!((inst.budget, inst.threshold), (10, Some(q(4, 7))));
        assert_eq!((inst.horizon, inst.kappa), (2, 5));
        assert_eq!(inst.xi[0][1], q(3, 7));
        assert_eq!(inst.xi[2][3], q(4, 7));
        assert_eq!(inst.xi[0][2], q(0, 1));

        let empty = KnapsackInstance {
            items: vec![],
            capacity: 0,
            target: 0,
        };
        let inst = knapsack_to_sockplan(&empty, ReductionVariant::AsPublished).unwrap();
        assert!(inst.socks.is_empty() && inst.threshold.is_none());
    }

    #[test]
    fn repaired_reduction_on_example() {
        let check = check_reduction(&example(), ReductionVariant::Repaired).unwrap();
        assert_eq!(check.plan.value, q(4, 7));
        assert!(check.equivalent() && check.knapsack_yes);
        let out_of_reach = KnapsackInstance { target: 8, ..example() };
        let check = check_reduction(&out_of_reach, ReductionVariant::Repaired).unwrap();
        assert!(check.equivalent() && !check.plan_yes);
    }

    #[test]
    fn published_budget_admits_extra_items() {
        // Skipping the fillers frees enough budget for both item pairs.
        let check = check_reduction(&example(), ReductionVariant::AsPublished).unwrap();
        assert_eq!(check.plan.value, q(1, 1));
        assert!(check.equivalent());
        let counter = KnapsackInstance { target: 5, ..example() };
        let check = check_reduction(&counter, ReductionVariant::AsPublished).unwrap();
        assert!(!check.knapsack_yes && check.plan_yes && !check.equivalent());
    }

    #[test]
    fn positive_days_pair_matched_item_socks() {
        let mut rng = rng::stream(5, 0, "knapsack");
        for _ in 0..20 {
            let k = random_knapsack(&mut rng, 5);
            let check = check_reduction(&k, ReductionVariant::Repaired).unwrap();
            assert!(check.equivalent(), "{k:?}");
            let inst = knapsack_to_sockplan(&k, ReductionVariant::Repaired).unwrap();
            for &(a, b) in check.plan.schedule.iter().flatten() {
                if inst.xi[a][b] > q(0, 1) {
                    assert!(a % 2 == 0 && b == a + 1 && b < 2 * k.items.len());
                }
            }
            assert_eq!(evaluate_plan(&inst, &check.plan.purchase, &check.plan.schedule).unwrap(), check.plan.value);
            let matched: u64 = check
                .plan
                .schedule
                .iter()
                .flatten()
                .filter(|&&(a, b)| inst.xi[a][b] > q(0, 1))
                .map(|&(a, _)| k.items[a / 2].1)
                .sum();
            assert_eq!(check.knapsack_optimum, matched);
        }
    }

    #[test]
    fn class_search_matches_naive_search() {
        let mut rng = rng::stream(11, 0, "plans");
        for _ in 0..60 {
            let inst = random_sockplan(&mut rng, 6, 3);
            let sol = brute_force_sockplan(&inst).unwrap();
            assert_eq!(sol.value, naive_optimum(&inst), "{inst:?}");
            assert_eq!(evaluate_plan(&inst, &sol.purchase, &sol.schedule).unwrap(), sol.value);
        }
    }

    #[test]
    fn plan_guard_refuses_large_instances() {
        let n = MAX_PLAN_SOCKS + 1;
        let inst = plain(&vec![(1, 1); n], vec![vec![q(0, 1); n]; n], 2, 3, 5);
        assert!(matches!(brute_force_sockplan(&inst), Err(Error::GuardExceeded(_))));
        let long = plain(&[(1, 1), (1, 1)], vec![vec![q(0, 1); 2]; 2], MAX_PLAN_HORIZON + 1, 3, 5);
        assert!(matches!(brute_force_sockplan(&long), Err(Error::GuardExceeded(_))));
    }

    #[test]
    fn policies_never_beat_the_optimum() {
        let mut rng = rng::stream(3, 0, "policy_oracle");
        for _ in 0..15 {
            let inst = random_sockplan(&mut rng, 8, 4);
            let sol = brute_force_sockplan(&inst).unwrap();
            let opt = *sol.value.numer() as f64 / *sol.value.denom() as f64;
            for policy in [
                Policy::Purist { tau_eta: 0.0 },
                Policy::Greedy,
                Policy::ThresholdMix { tau_xi: 0.6 },
                Policy::OrphanRescue { tau_xi: 0.6 },
                Policy::ExposureAware,
            ] {
                let got = policy_total_xi(&inst, &sol.purchase, policy).unwrap();
                assert!(got <= opt + 1e-9, "{policy} {got} > {opt}");
            }
        }
    }

    #[test]
    fn coverage_examples() {
        let w = vec![1.0, 1.0, 1.0];
        let sets = vec![vec![0, 1], vec![1, 2], vec![0, 1]];
        assert_eq!(sock_design_value(&[], &sets, &w), 0.0);
        assert_eq!(sock_design_value(&[0, 2], &sets, &w), sock_design_value(&[0], &sets, &w));
        assert_eq!(sock_design_value(&[0, 1], &sets, &w), 3.0);

        let poor = CoverageInstance::new(w.clone(), sets.clone(), vec![5, 5, 5], 4).unwrap();
        assert_eq!(sock_design_greedy(&poor), CoverageSolution { selection: vec![], value: 0.0 });

        let disjoint = CoverageInstance::new(vec![2.0, 3.0, 4.0], vec![vec![0], vec![1], vec![2]], vec![1, 1, 1], 10).unwrap();
        let sol = sock_design_greedy(&disjoint);
        assert_eq!((sol.selection, sol.value), (vec![0, 1, 2], 9.0));
        assert!(CoverageInstance::new(w, sets, vec![0, 1, 1], 3).is_err());
    }

    #[test]
    fn greedy_ratio_on_random_instances() {
        let mut rng = rng::stream(8, 0, "coverage");
        let bound = 1.0 - (-1.0f64).exp();
        for _ in 0..200 {
            let inst = random_coverage(&mut rng, 10, 12);
            let opt = brute_force_coverage(&inst).unwrap().value;
            let got = sock_design_greedy(&inst);
            assert!(inst.cost(&got.selection) <= inst.budget);
            assert!(got.value >= bound * opt - 1e-9, "{inst:?}");
            assert!(got.value <= opt + 1e-9);
        }
    }

    #[test]
    fn coverage_matches_catalogue_categories() {
        use crate::catalogue::{generate_catalogue, CatalogueSpec};
        let cat = generate_catalogue(&CatalogueSpec {
            n_designs: 30,
            ..CatalogueSpec::reference(4)
        })
        .unwrap();
        let sizes = cat.space().sizes().to_vec();
        let offsets: Vec<usize> = sizes.iter().scan(0usize, |acc, &m| {
            let o = *acc;
            *acc += m as usize;
            Some(o)
        }).collect();
        let universe: usize = sizes.iter().map(|&m| m as usize).sum();
        let weight = |r: usize, v: u32| 1.0 + r as f64 + f64::from(v) / 10.0;
        let mut weights = vec![0.0; universe];
        for (r, &m) in sizes.iter().enumerate() {
            for v in 0..m {
                weights[offsets[r] + v as usize] = weight(r, v);
            }
        }
        let sets: Vec<Vec<usize>> = cat
            .designs()
            .iter()
            .map(|d| d.features.values().iter().enumerate().map(|(r, &v)| offsets[r] + v as usize).collect())
            .collect();
        let selection = [0, 3, 7, 12, 29];
        let a = sock_design_value(&selection, &sets, &weights);
        let b = cat.category_coverage(&selection, weight);
        assert!((a - b).abs() < 1e-9, "{a} {b}");
    }

    #[test]
    fn instance_files_round_trip() {
        let inst = knapsack_to_sockplan(&example(), ReductionVariant::Repaired).unwrap();
        let file = InstanceFile::from_plan(&inst);
        let back = InstanceFile::parse(&file.to_json()).unwrap().plan().unwrap();
        assert_eq!(back, inst);
        let k = InstanceFile::parse(r#"{"kind":"knapsack","items":[[2,3],[3,4]],"capacity":3,"target":4}"#).unwrap();
        assert_eq!(
            k,
            InstanceFile::Knapsack {
                items: vec![(2, 3), (3, 4)],
                capacity: 3,
                target: 4
            }
        );
        assert!(InstanceFile::parse(r#"{"kind":"knapsack","items":[]}"#).is_err());
    }
}
