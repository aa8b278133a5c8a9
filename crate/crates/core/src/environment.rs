//! Physical sock state and its stochastic dynamics.
//!
//! A run buys an initial inventory, then repeats the daily schedule:
//! exposure draw, (optional) replenishment and pair selection, wear update,
//! move to laundry, and a batch wash once the buffer reaches capacity.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalogue::Assortment;
use crate::error::{Error, Result};
use crate::metrics::{self, DayRecord, DiversityMeasure, Purchase, RunMetrics};
use crate::policies::Policy;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SockInstance {
    pub id: u64,
    pub design: usize,
    pub tau: u32,
    pub theta: u32,
    pub d: f64,
}

impl SockInstance {
    /// Remaining wears `theta - tau`.
    pub fn remaining(&self) -> u64 {
        u64::from(self.theta.saturating_sub(self.tau))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub budget: u64,
    pub chi: f64,
    pub delta: f64,
    pub rho: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl AgentParams {
    pub fn reference() -> Self {
        AgentParams {
            budget: 200,
            chi: 1.25,
            delta: 0.5,
            rho: 0.5,
            gamma: 1.02,
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(what.to_string()))
            }
        };
        check(self.chi >= 0.0 && self.chi.is_finite(), "chi must be >= 0")?;
        check(self.delta >= 0.0 && self.delta.is_finite(), "delta must be >= 0")?;
        check((0.0..=1.0).contains(&self.rho), "rho must lie in [0, 1]")?;
        check(self.gamma >= 1.0 && self.gamma.is_finite(), "gamma must be >= 1")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be >= 0")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    HalfEven,
    HalfUp,
    Floor,
}

impl Rounding {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Rounding::HalfEven => x.round_ties_even(),
            Rounding::HalfUp => x.round(),
            Rounding::Floor => x.floor(),
        }
    }
}

/// When the diversity bonus enters the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityTiming {
    #[default]
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: u32,
    pub kappa: usize,
    pub theta: u32,
    pub d: f64,
    pub agent: AgentParams,
    pub policy: Policy,
    pub replenishment: bool,
    pub seed: u64,
    #[serde(default)]
    pub rounding: Rounding,
    #[serde(default)]
    pub diversity: DiversityMeasure,
    #[serde(default)]
    pub diversity_at: DiversityTiming,
    #[serde(default)]
    pub laundry: LaundryTrigger,
}

impl SimConfig {
    /// Reference regime: one year, weekly-ish laundry, 2% loss per wash.
    pub fn reference(policy: Policy, seed: u64) -> Self {
        SimConfig {
            horizon: 365,
            kappa: 14,
            theta: 50,
            d: 0.02,
            agent: AgentParams::reference(),
            policy,
            replenishment: true,
            seed,
            rounding: Rounding::HalfEven,
            diversity: DiversityMeasure::Shannon,
            diversity_at: DiversityTiming::Start,
            laundry: LaundryTrigger::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon T must be >= 1".into()));
        }
        if self.kappa == 0 {
            return Err(Error::Config("laundry capacity kappa must be >= 1".into()));
        }
        if self.theta == 0 {
            return Err(Error::Config("wear limit theta must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.d) {
            return Err(Error::Config("disappearance probability d must lie in [0, 1]".into()));
        }
        self.agent.validate()
    }
}

/// `1 + round(delta * (n - 1))`, clamped to `[1, n]`.
pub fn active_subset_size(delta: f64, n_designs: usize, rounding: Rounding) -> usize {
    if n_designs == 0 {
        return 0;
    }
    let raw = rounding.apply(delta.clamp(0.0, 1.0) * (n_designs - 1) as f64);
    (1 + raw as usize).min(n_designs)
}

/// Mutable state of one run: inventory, laundry, budget and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub day: u32,
    pub inventory: Vec<SockInstance>,
    pub laundry: Vec<SockInstance>,
    pub budget_remaining: u64,
    pub next_id: u64,
    pub purchased: u64,
    pub worn_out: u64,
    pub lost: u64,
}

impl SimState {
    pub fn new(budget: u64) -> Self {
        SimState {
            day: 0,
            inventory: Vec::new(),
            laundry: Vec::new(),
            budget_remaining: budget,
            next_id: 1,
            purchased: 0,
            worn_out: 0,
            lost: 0,
        }
    }

    /// Inventory plus laundry.
    pub fn owned(&self) -> Vec<SockInstance> {
        self.inventory.iter().chain(&self.laundry).copied().collect()
    }

    fn buy_pair<A: Assortment + ?Sized>(&mut self, shop: &A, design: usize, theta: u32, d: f64) -> Purchase {
        let price = shop.price(design);
        debug_assert!(2 * price <= self.budget_remaining);
        self.budget_remaining -= 2 * price;
        let mut ids = Vec::with_capacity(2);
        for _ in 0..2 {
            let id = self.next_id;
            self.next_id += 1;
            self.inventory.push(SockInstance {
                id,
                design,
                tau: 0,
                theta,
                d,
            });
            ids.push(id);
        }
        self.purchased += 2;
        Purchase {
            design,
            instance_ids: ids,
            spend: 2 * price,
            eco: 2.0 * shop.eco(design),
        }
    }
}

/// Buy pairs of designs drawn from an active subset until no active design
/// is affordable. The active subset size grows with the diversity preference.
pub fn initial_purchase<A: Assortment + ?Sized>(
    state: &mut SimState,
    shop: &A,
    delta: f64,
    theta: u32,
    d: f64,
    rounding: Rounding,
    rng: &mut StreamRng,
) -> Vec<Purchase> {
    let n = shop.len();
    if n == 0 {
        return Vec::new();
    }
    let k = active_subset_size(delta, n, rounding);
    let active: Vec<usize> = index::sample(rng, n, k).into_vec();
    let mut purchases = Vec::new();
    loop {
        // Rejection sampling over the active subset, restricted up front.
        let affordable: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&j| 2 * shop.price(j) <= state.budget_remaining)
            .collect();
        if affordable.is_empty() {
            break;
        }
        let design = affordable[rng.random_range(0..affordable.len())];
        purchases.push(state.buy_pair(shop, design, theta, d));
    }
    purchases
}

/// Each sock independently survives the wash with probability `1 - d`.
pub fn wash(laundry: Vec<SockInstance>, rng: &mut StreamRng) -> (Vec<SockInstance>, Vec<SockInstance>) {
    let mut returned = Vec::with_capacity(laundry.len());
    let mut lost = Vec::new();
    for sock in laundry {
        if rng.random_bool(sock.d) {
            lost.push(sock);
        } else {
            returned.push(sock);
        }
    }
    (returned, lost)
}

/// Cheapest affordable design, preferring the one most compatible with what
/// is left in the drawer; buys two of it.
fn replenish<A: Assortment + ?Sized>(state: &mut SimState, shop: &A, theta: u32, d: f64) -> Option<Purchase> {
    let cheapest = (0..shop.len())
        .filter(|&j| 2 * shop.price(j) <= state.budget_remaining)
        .map(|j| shop.price(j))
        .min()?;
    let affinity = |j: usize| -> f64 { state.inventory.iter().map(|s| shop.xi(j, s.design)).sum() };
    let mut best: Option<(usize, f64)> = None;
    for j in (0..shop.len()).filter(|&j| shop.price(j) == cheapest) {
        let a = affinity(j);
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((j, a));
        }
    }
    let (design, _) = best?;
    Some(state.buy_pair(shop, design, theta, d))
}

/// Everything a day step needs besides the mutable state.
pub struct World<'a, A: Assortment + ?Sized> {
    pub shop: &'a A,
    pub config: &'a SimConfig,
}

pub struct Streams {
    pub exposure: StreamRng,
    pub wash: StreamRng,
    pub purchase: StreamRng,
}

impl Streams {
    pub fn new(seed: u64, replication: u64) -> Self {
        Streams {
            exposure: rng::stream(seed, replication, rng::EXPOSURE),
            wash: rng::stream(seed, replication, rng::WASH),
            purchase: rng::stream(seed, replication, rng::PURCHASE),
        }
    }
}

pub fn step_day<A: Assortment + ?Sized>(state: &mut SimState, world: &World<'_, A>, streams: &mut Streams) -> DayRecord {
    let cfg = world.config;
    state.day += 1;
    let exposed = streams.exposure.random_bool(cfg.agent.rho);

    let mut purchases = Vec::new();
    let mut choice = cfg.policy.select(&state.inventory, world.shop, &cfg.agent);
    if choice.is_none() && cfg.replenishment {
        if let Some(p) = replenish(state, world.shop, cfg.theta, cfg.d) {
            purchases.push(p);
            choice = cfg.policy.select(&state.inventory, world.shop, &cfg.agent);
        }
    }

    let mut record = DayRecord {
        day: state.day,
        exposed,
        feasible: choice.is_some(),
        pair: None,
        eta: None,
        social_cost: 0.0,
        purchases,
        washed: 0,
        lost: 0,
        lost_capacity: 0.0,
        worn_out: 0,
    };
    let Some(pair) = choice else {
        if cfg.laundry == LaundryTrigger::CapacityOrStockout && !state.laundry.is_empty() {
            do_wash(state, &mut record, &mut streams.wash);
        }
        return record;
    };

    record.pair = Some((pair.first_id, pair.second_id));
    record.eta = Some(pair.eta);
    record.social_cost = metrics::social_cost(pair.eta, cfg.agent.chi, exposed, cfg.agent.gamma);

    let (hi, lo) = (pair.first.max(pair.second), pair.first.min(pair.second));
    let worn = [state.inventory.remove(hi), state.inventory.remove(lo)];
    for mut sock in worn {
        sock.tau += 1;
        if sock.tau > sock.theta {
            state.worn_out += 1;
            record.worn_out += 1;
        } else {
            state.laundry.push(sock);
        }
    }

    if state.laundry.len() >= cfg.kappa {
        do_wash(state, &mut record, &mut streams.wash);
    }
    record
}

/// When the laundry buffer is washed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaundryTrigger {
    /// Only once the buffer holds `kappa` socks.
    Capacity,
    /// Also on a day with no wearable pair while the buffer is nonempty, so
    /// a wardrobe that shrinks below `kappa` is not locked in the basket.
    #[default]
    CapacityOrStockout,
}

fn do_wash(state: &mut SimState, record: &mut DayRecord, rng: &mut StreamRng) {
    let batch = std::mem::take(&mut state.laundry);
    record.washed = batch.len();
    let (returned, lost) = wash(batch, rng);
    record.lost = lost.len();
    record.lost_capacity = lost.iter().map(|s| s.remaining() as f64).sum();
    state.lost += lost.len() as u64;
    state.inventory.extend(returned);
}

/// Full record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub initial_purchases: Vec<Purchase>,
    pub initial_inventory: Vec<SockInstance>,
    pub days: Vec<DayRecord>,
    pub final_state: SimState,
    pub metrics: RunMetrics,
}

/// One replication: the streams are keyed by `(config.seed, replication)`.
pub fn run_replication<A: Assortment + ?Sized>(config: &SimConfig, shop: &A, replication: u64) -> Result<RunTrace> {
    config.validate()?;
    let mut streams = Streams::new(config.seed, replication);
    let mut state = SimState::new(config.agent.budget);
    let initial_purchases = initial_purchase(
        &mut state,
        shop,
        config.agent.delta,
        config.theta,
        config.d,
        config.rounding,
        &mut streams.purchase,
    );
    run_days(config, shop, state, streams, initial_purchases)
}

/// Run the horizon from a fixed starting wardrobe, one sock per entry of
/// `designs`, with no initial spend.
pub fn run_from_inventory<A: Assortment + ?Sized>(
    config: &SimConfig,
    shop: &A,
    designs: &[usize],
    replication: u64,
) -> Result<RunTrace> {
    let socks = designs
        .iter()
        .map(|&design| SockInstance {
            id: 0,
            design,
            tau: 0,
            theta: config.theta,
            d: config.d,
        })
        .collect();
    run_from_socks(config, shop, socks, replication)
}

/// Like [`run_from_inventory`] with per-sock wear state; ids are reassigned.
pub fn run_from_socks<A: Assortment + ?Sized>(
    config: &SimConfig,
    shop: &A,
    socks: Vec<SockInstance>,
    replication: u64,
) -> Result<RunTrace> {
    config.validate()?;
    if let Some(bad) = socks.iter().find(|s| s.design >= shop.len()) {
        return Err(Error::invalid(format!("design index {} outside a catalogue of {}", bad.design, shop.len())));
    }
    let mut state = SimState::new(config.agent.budget);
    for mut sock in socks {
        sock.id = state.next_id;
        state.next_id += 1;
        state.purchased += 1;
        state.inventory.push(sock);
    }
    run_days(config, shop, state, Streams::new(config.seed, replication), Vec::new())
}

fn run_days<A: Assortment + ?Sized>(
    config: &SimConfig,
    shop: &A,
    mut state: SimState,
    mut streams: Streams,
    initial_purchases: Vec<Purchase>,
) -> Result<RunTrace> {
    let initial_inventory = state.inventory.clone();
    let world = World { shop, config };

    let mut m = RunMetrics::default();
    let charge = |m: &mut RunMetrics, p: &Purchase| {
        m.socks_purchased += p.instance_ids.len() as u64;
        m.money += p.spend as f64;
        m.eco += p.eco;
        m.reward_total -= p.spend as f64 + config.agent.lambda * p.eco;
    };
    for p in &initial_purchases {
        charge(&mut m, p);
    }
    let diversity_bonus = |socks: &[SockInstance]| config.agent.delta * config.diversity.evaluate(socks, shop);
    if config.diversity_at == DiversityTiming::Start {
        m.reward_total += diversity_bonus(&state.inventory);
    }

    let mut days = Vec::with_capacity(config.horizon as usize);
    for _ in 0..config.horizon {
        let record = step_day(&mut state, &world, &mut streams);
        for p in &record.purchases {
            charge(&mut m, p);
        }
        if record.feasible {
            m.total_wears += 2;
        } else {
            m.infeasible_days += 1;
        }
        m.social += record.social_cost;
        m.reward_total -= record.social_cost;
        m.stranded_loss += record.lost_capacity;
        days.push(record);
    }
    if config.diversity_at == DiversityTiming::End {
        m.reward_total += diversity_bonus(&state.inventory);
    }
    m.stranded_terminal = metrics::terminal_stranding(&state.owned(), shop, &config.policy);
    m.stranded = m.stranded_loss + m.stranded_terminal;

    Ok(RunTrace {
        initial_purchases,
        initial_inventory,
        days,
        final_state: state,
        metrics: m,
    })
}

pub fn run<A: Assortment + ?Sized>(config: &SimConfig, shop: &A) -> Result<RunMetrics> {
    run_replication(config, shop, 0).map(|t| t.metrics)
}
