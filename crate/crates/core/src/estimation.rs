//! Maximum likelihood estimation of mismatch sensitivity from pairwise
//! comparisons and of diversity preference from bundle choices.
//!
//! Both log-likelihoods are concave in their single parameter, so each fit is
//! a bracketed root search on the analytic gradient over `[0, inf)`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalogue::{Assortment, Catalogue, FeatureSpace, SockDesign};
use crate::environment::{self, AgentParams, SimConfig};
use crate::error::{Error, Result};
use crate::experiments::pearson;
use crate::metrics;
use crate::policies::Policy;
use crate::rng::{self, StreamRng};

pub const DEFAULT_RIDGE: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-8;
const WIDTH_TOL: f64 = 1e-10;
const SEARCH_CAP: f64 = 1e8;

/// One forced choice between pair A and pair B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTrial {
    pub m_a: f64,
    pub m_b: f64,
    pub chose_a: bool,
}

impl ComparisonTrial {
    pub fn new(m_a: f64, m_b: f64, chose_a: bool) -> Result<Self> {
        for m in [m_a, m_b] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::invalid(format!("severity {m} outside [0, 1]")));
            }
        }
        Ok(ComparisonTrial { m_a, m_b, chose_a })
    }

    /// The same trial with the pairs presented the other way round.
    pub fn swapped(&self) -> Self {
        ComparisonTrial {
            m_a: self.m_b,
            m_b: self.m_a,
            chose_a: !self.chose_a,
        }
    }

    fn informative(&self) -> bool {
        self.m_a != self.m_b
    }
}

/// Mismatch severity of a pair with dissimilarity `eta`.
pub fn severity(eta: f64, gamma: f64) -> f64 {
    eta.powf(gamma)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// log(sigmoid(z)) without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Probability of choosing pair A.
pub fn choice_probability(chi: f64, trial: &ComparisonTrial) -> f64 {
    sigmoid(chi * (trial.m_b - trial.m_a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// No observation carries information about the parameter.
    Uninformative,
    /// The likelihood increases without bound; only a ridge makes it finite.
    Diverged,
    /// Iteration budget exhausted before the tolerance was met.
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub estimate: f64,
    /// Observed-information approximation; absent when the curvature vanishes.
    pub std_error: Option<f64>,
    /// Unpenalized log-likelihood at the estimate.
    pub log_likelihood: f64,
    pub converged: bool,
    pub ridge: f64,
    pub status: FitStatus,
}

// Value, gradient and curvature of a log-likelihood.
type Eval = (f64, f64, f64);

fn chi_loglik(trials: &[ComparisonTrial], chi: f64) -> Eval {
    let (mut v, mut g, mut h) = (0.0, 0.0, 0.0);
    for t in trials {
        let delta = t.m_b - t.m_a;
        let z = chi * delta;
        let p = sigmoid(z);
        let y = if t.chose_a { 1.0 } else { 0.0 };
        v += if t.chose_a { log_sigmoid(z) } else { log_sigmoid(-z) };
        g += delta * (y - p);
        h -= delta * delta * p * (1.0 - p);
    }
    (v, g, h)
}

/// Penalized objective `loglik - ridge * chi^2` maximized by [`fit_chi`].
pub fn chi_objective(trials: &[ComparisonTrial], chi: f64, ridge: f64) -> f64 {
    chi_loglik(trials, chi).0 - ridge * chi * chi
}

/// Maximize a concave penalized objective over `[0, cap]`. Returns the
/// argmax and whether the tolerance was met.
fn maximize(eval: impl Fn(f64) -> Eval, ridge: f64) -> (f64, bool) {
    let grad = |x: f64| eval(x).1 - 2.0 * ridge * x;
    if grad(0.0) <= 0.0 {
        return (0.0, true);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while grad(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > SEARCH_CAP {
            return (hi, false);
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..500 {
        let (_, g, h) = eval(x);
        let g = g - 2.0 * ridge * x;
        if g.abs() < GRAD_TOL || hi - lo < WIDTH_TOL {
            return (x, true);
        }
        if g > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let h = h - 2.0 * ridge;
        let newton = if h < 0.0 { x - g / h } else { f64::NAN };
        x = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    (x, false)
}

fn finish(eval: impl Fn(f64) -> Eval, x: f64, ridge: f64, status: FitStatus) -> EstimationResult {
    let (v, _, h) = eval(x);
    let curvature = h - 2.0 * ridge;
    EstimationResult {
        estimate: x,
        std_error: (curvature < 0.0).then(|| (-1.0 / curvature).sqrt()),
        log_likelihood: v,
        converged: status == FitStatus::Converged,
        ridge,
        status,
    }
}

fn check_ridge(ridge: f64) -> Result<()> {
    if ridge.is_finite() && ridge >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("ridge must be finite and nonnegative, got {ridge}")))
    }
}

pub fn fit_chi(trials: &[ComparisonTrial], ridge: f64) -> Result<EstimationResult> {
    check_ridge(ridge)?;
    if trials.is_empty() {
        return Err(Error::invalid("need at least one comparison trial"));
    }
    let eval = |chi: f64| chi_loglik(trials, chi);
    let informative: Vec<&ComparisonTrial> = trials.iter().filter(|t| t.informative()).collect();
    if informative.is_empty() {
        return Ok(finish(eval, 0.0, ridge, FitStatus::Uninformative));
    }
    // Every choice avoids the more severe pair: the likelihood keeps rising.
    let separated = informative.iter().all(|t| t.chose_a == (t.m_a < t.m_b));
    if separated && ridge == 0.0 {
        return Ok(EstimationResult {
            estimate: f64::INFINITY,
            std_error: None,
            log_likelihood: 0.0,
            converged: false,
            ridge,
            status: FitStatus::Diverged,
        });
    }
    let (x, ok) = maximize(eval, ridge);
    Ok(finish(eval, x, ridge, if ok { FitStatus::Converged } else { FitStatus::NotConverged }))
}

/// Per-bundle terms of the utility `delta * diversity - c_soc - c_rep`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundleTerms {
    pub diversity: f64,
    pub c_soc: f64,
    pub c_rep: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleChoiceSet {
    pub bundles: Vec<BundleTerms>,
    pub chosen: usize,
}

impl BundleChoiceSet {
    pub fn new(bundles: Vec<BundleTerms>, chosen: usize) -> Result<Self> {
        if bundles.len() < 2 {
            return Err(Error::invalid("a choice set needs at least two bundles"));
        }
        if chosen >= bundles.len() {
            return Err(Error::invalid(format!("chosen index {chosen} out of {} bundles", bundles.len())));
        }
        Ok(BundleChoiceSet { bundles, chosen })
    }

    /// Multinomial logit probabilities at `delta`.
    pub fn probabilities(&self, delta: f64) -> Vec<f64> {
        let u: Vec<f64> = self.bundles.iter().map(|b| delta * b.diversity - b.c_soc - b.c_rep).collect();
        let top = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = u.iter().map(|x| (x - top).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    fn informative(&self) -> bool {
        let d0 = self.bundles[0].diversity;
        self.bundles.iter().any(|b| b.diversity != d0)
    }
}

fn delta_loglik(sets: &[BundleChoiceSet], delta: f64) -> Eval {
    let (mut v, mut g, mut h) = (0.0, 0.0, 0.0);
    for set in sets {
        let u: Vec<f64> = set.bundles.iter().map(|b| delta * b.diversity - b.c_soc - b.c_rep).collect();
        let top = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = u.iter().map(|x| (x - top).exp()).collect();
        let z: f64 = w.iter().sum();
        v += u[set.chosen] - top - z.ln();
        let mean: f64 = set.bundles.iter().zip(&w).map(|(b, wi)| b.diversity * wi).sum::<f64>() / z;
        let var: f64 = set
            .bundles
            .iter()
            .zip(&w)
            .map(|(b, wi)| (b.diversity - mean).powi(2) * wi)
            .sum::<f64>()
            / z;
        g += set.bundles[set.chosen].diversity - mean;
        h -= var;
    }
    (v, g, h)
}

/// Penalized objective `loglik - ridge * delta^2` maximized by [`fit_delta`].
pub fn delta_objective(sets: &[BundleChoiceSet], delta: f64, ridge: f64) -> f64 {
    delta_loglik(sets, delta).0 - ridge * delta * delta
}

pub fn fit_delta(sets: &[BundleChoiceSet], ridge: f64) -> Result<EstimationResult> {
    check_ridge(ridge)?;
    if sets.is_empty() {
        return Err(Error::invalid("need at least one bundle choice set"));
    }
    for s in sets {
        if s.bundles.len() < 2 || s.chosen >= s.bundles.len() {
            return Err(Error::invalid("malformed bundle choice set"));
        }
    }
    let eval = |delta: f64| delta_loglik(sets, delta);
    let informative: Vec<&BundleChoiceSet> = sets.iter().filter(|s| s.informative()).collect();
    if informative.is_empty() {
        return Ok(finish(eval, 0.0, ridge, FitStatus::Uninformative));
    }
    let separated = informative.iter().all(|s| {
        let top = s.bundles.iter().map(|b| b.diversity).fold(f64::NEG_INFINITY, f64::max);
        s.bundles[s.chosen].diversity == top
    });
    if separated && ridge == 0.0 {
        return Ok(EstimationResult {
            estimate: f64::INFINITY,
            std_error: None,
            log_likelihood: 0.0,
            converged: false,
            ridge,
            status: FitStatus::Diverged,
        });
    }
    let (x, ok) = maximize(eval, ridge);
    Ok(finish(eval, x, ridge, if ok { FitStatus::Converged } else { FitStatus::NotConverged }))
}

/// True when the penalized objective at the estimate is no lower than at
/// `estimate ± eps` for each `eps` (only the upper side at the boundary).
pub fn is_local_maximum(objective: impl Fn(f64) -> f64, estimate: f64, eps: &[f64]) -> bool {
    if !estimate.is_finite() {
        return false;
    }
    let at = objective(estimate);
    eps.iter().all(|&e| {
        let above = objective(estimate + e) <= at;
        let below = estimate - e < 0.0 || objective(estimate - e) <= at;
        above && below
    })
}

/// Loss and horizon settings for costing bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRegime {
    pub horizon: u32,
    pub kappa: usize,
    pub theta: u32,
    pub d: f64,
    pub rho: f64,
    pub gamma: f64,
    pub replications: u64,
    pub seed: u64,
}

impl BundleRegime {
    /// A week of use at the reference exposure and loss rate.
    pub fn reference(seed: u64) -> Self {
        BundleRegime {
            horizon: 7,
            kappa: 4,
            theta: 50,
            d: 0.02,
            rho: 0.5,
            gamma: 1.02,
            replications: 32,
            seed,
        }
    }

    fn sim_config(&self, chi: f64) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            kappa: self.kappa,
            theta: self.theta,
            d: self.d,
            agent: AgentParams {
                budget: 0,
                chi,
                delta: 0.0,
                rho: self.rho,
                gamma: self.gamma,
                lambda: 0.0,
            },
            policy: Policy::Greedy,
            replenishment: false,
            ..SimConfig::reference(Policy::Greedy, self.seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundleCosts {
    pub c_soc: f64,
    pub c_rep: f64,
}

/// Mean social cost and mean stranded capacity of wearing only `bundle`
/// under Greedy pairing. Replications share streams across bundles.
pub fn simulate_bundle_costs<A: Assortment + ?Sized>(
    bundle: &[usize],
    shop: &A,
    regime: &BundleRegime,
    chi_hat: f64,
) -> Result<BundleCosts> {
    if regime.replications == 0 {
        return Err(Error::Config("bundle costing needs at least one replication".into()));
    }
    let cfg = regime.sim_config(chi_hat);
    let (mut soc, mut rep) = (0.0, 0.0);
    for r in 0..regime.replications {
        let trace = environment::run_from_inventory(&cfg, shop, bundle, r)?;
        soc += trace.metrics.social;
        rep += trace.metrics.stranded;
    }
    let n = regime.replications as f64;
    Ok(BundleCosts {
        c_soc: soc / n,
        c_rep: rep / n,
    })
}

/// Full-factorial stimulus catalogue: every combination of `levels` values
/// on `k` features, unit price.
pub fn stimulus_catalogue(k: usize, levels: u32) -> Result<Catalogue> {
    let space = FeatureSpace::new(vec![levels; k])?;
    let n = space
        .cardinality()
        .filter(|&n| n <= 1 << 16)
        .ok_or_else(|| Error::invalid("stimulus space too large"))?;
    let designs = (0..n)
        .map(|i| {
            let mut rest = i;
            let values: Vec<u32> = (0..k)
                .map(|_| {
                    let v = (rest % u64::from(levels)) as u32;
                    rest /= u64::from(levels);
                    v
                })
                .collect();
            Ok(SockDesign {
                design_id: format!("u{i:02}"),
                features: space.vector(values)?,
                price: 1,
                eco: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Catalogue::new(space, designs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ParamDist {
    Fixed(f64),
    LogNormal { mu: f64, sigma: f64 },
}

impl ParamDist {
    /// Log-normal with the given mean and median.
    pub fn from_mean_median(mean: f64, median: f64) -> Result<Self> {
        if !(median > 0.0 && mean >= median) {
            return Err(Error::invalid("log-normal needs 0 < median <= mean"));
        }
        Ok(ParamDist::LogNormal {
            mu: median.ln(),
            sigma: (2.0 * (mean / median).ln()).sqrt(),
        })
    }

    /// Log-normal with mean `mean` and log-scale spread `sigma`.
    pub fn around(mean: f64, sigma: f64) -> Self {
        ParamDist::LogNormal {
            mu: mean.ln() - sigma * sigma / 2.0,
            sigma,
        }
    }

    /// Sensitivity spread matching a mean of 1.120 and median of 0.968.
    pub fn study_chi() -> Self {
        Self::from_mean_median(1.120, 0.968).expect("valid moments")
    }

    /// Diversity preference spread matching a mean of 1.753 and median of 1.368.
    pub fn study_delta() -> Self {
        Self::from_mean_median(1.753, 1.368).expect("valid moments")
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match *self {
            ParamDist::Fixed(v) => v,
            ParamDist::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("finite sigma").sample(rng),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ParamDist::Fixed(v) => v.is_finite() && v >= 0.0,
            ParamDist::LogNormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad parameter distribution {self:?}")))
        }
    }
}

/// Pairwise task: each trial shows two pairs whose dissimilarities are
/// distinct draws from `eta_levels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDesign {
    pub eta_levels: Vec<f64>,
    pub gamma: f64,
    pub n_trials: usize,
}

impl TrialDesign {
    pub fn new(n_trials: usize) -> Self {
        TrialDesign {
            eta_levels: vec![0.0, 1.0],
            gamma: 1.02,
            n_trials,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledBundle {
    pub designs: Vec<usize>,
    pub diversity: f64,
    /// Social cost at unit sensitivity; costs scale linearly in sensitivity.
    pub unit_soc: f64,
    pub c_rep: f64,
}

/// Bundle task: each set offers one bundle from every diversity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleDesign {
    pub bundle_size: usize,
    /// Number of distinct designs per bundle, one entry per level.
    pub distinct_levels: Vec<usize>,
    pub pool_per_level: usize,
    pub n_sets: usize,
    pub regime: BundleRegime,
}

impl BundleDesign {
    pub fn new(n_sets: usize, seed: u64) -> Self {
        BundleDesign {
            bundle_size: 8,
            distinct_levels: vec![1, 2, 4, 8],
            pool_per_level: 25,
            n_sets,
            regime: BundleRegime::reference(seed),
        }
    }
}

/// Candidate bundles grouped by diversity level.
pub fn build_bundle_pool(design: &BundleDesign, stimuli: &Catalogue) -> Result<Vec<Vec<PooledBundle>>> {
    if design.distinct_levels.len() < 2 {
        return Err(Error::invalid("bundle task needs at least two diversity levels"));
    }
    for &c in &design.distinct_levels {
        if c == 0 || c > design.bundle_size || c > stimuli.len() {
            return Err(Error::invalid(format!("cannot fill a bundle of {} with {c} designs", design.bundle_size)));
        }
    }
    let mut rng = rng::stream(design.regime.seed, 0, "bundle_pool");
    let mut raw = Vec::new();
    for &c in &design.distinct_levels {
        for _ in 0..design.pool_per_level {
            let picked = rand::seq::index::sample(&mut rng, stimuli.len(), c).into_vec();
            let designs: Vec<usize> = (0..design.bundle_size).map(|i| picked[i % c]).collect();
            raw.push((c, designs));
        }
    }
    let costed: Vec<PooledBundle> = raw
        .par_iter()
        .map(|(_, designs)| {
            let costs = simulate_bundle_costs(designs, stimuli, &design.regime, 1.0)?;
            let socks: Vec<environment::SockInstance> = designs
                .iter()
                .map(|&j| environment::SockInstance {
                    id: 0,
                    design: j,
                    tau: 0,
                    theta: 0,
                    d: 0.0,
                })
                .collect();
            Ok(PooledBundle {
                designs: designs.clone(),
                diversity: metrics::diversity(&socks),
                unit_soc: costs.c_soc,
                c_rep: costs.c_rep,
            })
        })
        .collect::<Result<_>>()?;
    let mut levels = vec![Vec::new(); design.distinct_levels.len()];
    for (i, b) in costed.into_iter().enumerate() {
        levels[i / design.pool_per_level].push(b);
    }
    Ok(levels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RespondentData {
    pub id: String,
    pub chi_true: Option<f64>,
    pub delta_true: Option<f64>,
    pub trials: Vec<ComparisonTrial>,
    pub bundle_sets: Vec<BundleChoiceSet>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ChoiceData {
    pub respondents: Vec<RespondentData>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSpec {
    pub n: usize,
    pub chi: ParamDist,
    pub delta: ParamDist,
    pub trials: TrialDesign,
    pub bundles: Option<BundleDesign>,
    /// Ridge used for the sensitivity estimate that prices each bundle.
    pub ridge: f64,
    pub seed: u64,
}

/// Simulated respondents answering both tasks. Bundle social costs use each
/// respondent's fitted sensitivity, as they would for real participants.
pub fn synthesize_respondents(spec: &SynthesisSpec, stimuli: &Catalogue) -> Result<ChoiceData> {
    spec.chi.validate()?;
    spec.delta.validate()?;
    if spec.trials.eta_levels.len() < 2 {
        return Err(Error::invalid("trial design needs at least two dissimilarity levels"));
    }
    let pool = match &spec.bundles {
        Some(design) if spec.n > 0 => Some(build_bundle_pool(design, stimuli)?),
        _ => None,
    };
    let n_sets = spec.bundles.as_ref().map_or(0, |b| b.n_sets);
    let severities: Vec<f64> = spec.trials.eta_levels.iter().map(|&e| severity(e, spec.trials.gamma)).collect();

    let respondents = (0..spec.n as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(spec.seed, r, "respondent");
            let chi = spec.chi.sample(&mut rng);
            let delta = spec.delta.sample(&mut rng);
            let trials: Vec<ComparisonTrial> = (0..spec.trials.n_trials)
                .map(|_| {
                    let pick = rand::seq::index::sample(&mut rng, severities.len(), 2);
                    let (m_a, m_b) = (severities[pick.index(0)], severities[pick.index(1)]);
                    let p = sigmoid(chi * (m_b - m_a));
                    ComparisonTrial {
                        m_a,
                        m_b,
                        chose_a: rng.random_bool(p),
                    }
                })
                .collect();

            let mut bundle_sets = Vec::with_capacity(n_sets);
            if let Some(levels) = &pool {
                let chi_hat = fit_chi(&trials, spec.ridge)?.estimate;
                for _ in 0..n_sets {
                    let mut bundles: Vec<BundleTerms> = levels
                        .iter()
                        .map(|group| {
                            let b = &group[rng.random_range(0..group.len())];
                            BundleTerms {
                                diversity: b.diversity,
                                c_soc: chi_hat * b.unit_soc,
                                c_rep: b.c_rep,
                            }
                        })
                        .collect();
                    bundles.shuffle(&mut rng);
                    let set = BundleChoiceSet { bundles, chosen: 0 };
                    let probs = set.probabilities(delta);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut chosen = probs.len() - 1;
                    for (i, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            chosen = i;
                            break;
                        }
                    }
                    bundle_sets.push(BundleChoiceSet { chosen, ..set });
                }
            }
            Ok(RespondentData {
                id: format!("r{r:04}"),
                chi_true: Some(chi),
                delta_true: Some(delta),
                trials,
                bundle_sets,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChoiceData { respondents })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RespondentFit {
    pub id: String,
    pub chi: Option<EstimationResult>,
    pub delta: Option<EstimationResult>,
}

/// Fit both parameters for every respondent that has data for them.
pub fn fit_respondents(data: &ChoiceData, ridge: f64) -> Result<Vec<RespondentFit>> {
    data.respondents
        .par_iter()
        .map(|r| {
            let chi = if r.trials.is_empty() { None } else { Some(fit_chi(&r.trials, ridge)?) };
            let delta = if r.bundle_sets.is_empty() {
                None
            } else {
                Some(fit_delta(&r.bundle_sets, ridge)?)
            };
            Ok(RespondentFit { id: r.id.clone(), chi, delta })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryStats {
    pub n: usize,
    pub chi_mean: f64,
    pub chi_median: f64,
    pub delta_mean: f64,
    pub delta_median: f64,
    pub corr_chi_delta: f64,
    pub corr_chi_compliance: Option<f64>,
    pub corr_delta_compliance: Option<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn summary_statistics(chi_hat: &[f64], delta_hat: &[f64], compliance: Option<&[f64]>) -> Result<SummaryStats> {
    let n = chi_hat.len();
    if delta_hat.len() != n || compliance.is_some_and(|c| c.len() != n) {
        return Err(Error::invalid("estimate and compliance vectors must have equal length"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SummaryStats {
        n,
        chi_mean: mean(chi_hat),
        chi_median: median(chi_hat),
        delta_mean: mean(delta_hat),
        delta_median: median(delta_hat),
        corr_chi_delta: pearson(chi_hat, delta_hat),
        corr_chi_compliance: compliance.map(|c| pearson(chi_hat, c)),
        corr_delta_compliance: compliance.map(|c| pearson(delta_hat, c)),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialRow {
    respondent_id: String,
    m_a: f64,
    m_b: f64,
    choice: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleRow {
    respondent_id: String,
    set_id: u32,
    bundle_id: u32,
    diversity: f64,
    c_soc_hat: f64,
    c_rep_hat: f64,
    chosen: u8,
}

#[derive(Debug, Serialize)]
struct ResultRow<'a> {
    respondent_id: &'a str,
    chi_hat: Option<f64>,
    chi_se: Option<f64>,
    delta_hat: Option<f64>,
    delta_se: Option<f64>,
    converged: bool,
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R, path: &Path, header: &[&str]) -> Result<Vec<(usize, T)>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let found = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(parse_err(1, format!("expected header `{}`", header.join(","))));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row: T = record.deserialize(Some(&found)).map_err(|e| parse_err(line, e.to_string()))?;
        out.push((line, row));
    }
    Ok(out)
}

const TRIAL_HEADER: [&str; 4] = ["respondent_id", "m_a", "m_b", "choice"];
const BUNDLE_HEADER: [&str; 7] = ["respondent_id", "set_id", "bundle_id", "diversity", "c_soc_hat", "c_rep_hat", "chosen"];

impl ChoiceData {
    fn respondent_mut(&mut self, index: &mut HashMap<String, usize>, id: &str) -> &mut RespondentData {
        let i = *index.entry(id.to_string()).or_insert_with(|| {
            self.respondents.push(RespondentData {
                id: id.to_string(),
                chi_true: None,
                delta_true: None,
                trials: Vec::new(),
                bundle_sets: Vec::new(),
            });
            self.respondents.len() - 1
        });
        &mut self.respondents[i]
    }

    /// Assemble respondents from trial and bundle tables, in order of first
    /// appearance.
    pub fn read<R1: Read, R2: Read>(trials: Option<(R1, &Path)>, bundles: Option<(R2, &Path)>) -> Result<Self> {
        let mut data = ChoiceData::default();
        let mut index = HashMap::new();
        if let Some((reader, path)) = trials {
            for (line, row) in read_rows::<TrialRow, _>(reader, path, &TRIAL_HEADER)? {
                let bad = |message: String| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message,
                };
                let chose_a = match row.choice {
                    1 => true,
                    0 => false,
                    c => return Err(bad(format!("choice must be 0 or 1, found {c}"))),
                };
                let trial = ComparisonTrial::new(row.m_a, row.m_b, chose_a).map_err(|e| bad(e.to_string()))?;
                data.respondent_mut(&mut index, &row.respondent_id).trials.push(trial);
            }
        }
        if let Some((reader, path)) = bundles {
            // (respondent, set) -> (first line, bundles, chosen positions)
            let mut sets: Vec<(String, u32, usize, Vec<BundleTerms>, Vec<usize>)> = Vec::new();
            let mut set_index: HashMap<(String, u32), usize> = HashMap::new();
            for (line, row) in read_rows::<BundleRow, _>(reader, path, &BUNDLE_HEADER)? {
                let key = (row.respondent_id.clone(), row.set_id);
                let i = *set_index.entry(key).or_insert_with(|| {
                    sets.push((row.respondent_id.clone(), row.set_id, line, Vec::new(), Vec::new()));
                    sets.len() - 1
                });
                let entry = &mut sets[i];
                if row.chosen > 1 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: format!("chosen must be 0 or 1, found {}", row.chosen),
                    });
                }
                if row.chosen == 1 {
                    entry.4.push(entry.3.len());
                }
                entry.3.push(BundleTerms {
                    diversity: row.diversity,
                    c_soc: row.c_soc_hat,
                    c_rep: row.c_rep_hat,
                });
            }
            for (rid, set_id, line, bundles, chosen) in sets {
                let bad = |message: String| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("set {set_id} of {rid}: {message}"),
                };
                if chosen.len() != 1 {
                    return Err(bad(format!("exactly one bundle must be chosen, found {}", chosen.len())));
                }
                let set = BundleChoiceSet::new(bundles, chosen[0]).map_err(|e| bad(e.to_string()))?;
                data.respondent_mut(&mut index, &rid).bundle_sets.push(set);
            }
        }
        Ok(data)
    }

    pub fn write_trials<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.respondents {
            for t in &r.trials {
                w.serialize(TrialRow {
                    respondent_id: r.id.clone(),
                    m_a: t.m_a,
                    m_b: t.m_b,
                    choice: u8::from(t.chose_a),
                })?;
            }
        }
        w.flush().map_err(|e| Error::io("<trials>", e))
    }

    pub fn write_bundles<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.respondents {
            for (s, set) in r.bundle_sets.iter().enumerate() {
                for (b, terms) in set.bundles.iter().enumerate() {
                    w.serialize(BundleRow {
                        respondent_id: r.id.clone(),
                        set_id: s as u32,
                        bundle_id: b as u32,
                        diversity: terms.diversity,
                        c_soc_hat: terms.c_soc,
                        c_rep_hat: terms.c_rep,
                        chosen: u8::from(b == set.chosen),
                    })?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<bundles>", e))
    }
}

pub fn write_results<W: Write>(fits: &[RespondentFit], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for f in fits {
        w.serialize(ResultRow {
            respondent_id: &f.id,
            chi_hat: f.chi.map(|r| r.estimate),
            chi_se: f.chi.and_then(|r| r.std_error),
            delta_hat: f.delta.map(|r| r.estimate),
            delta_se: f.delta.and_then(|r| r.std_error),
            converged: f.chi.is_none_or(|r| r.converged) && f.delta.is_none_or(|r| r.converged),
        })?;
    }
    w.flush().map_err(|e| Error::io("<results>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trial(m_a: f64, m_b: f64, chose_a: bool) -> ComparisonTrial {
        ComparisonTrial::new(m_a, m_b, chose_a).unwrap()
    }

    #[test]
    fn choice_probability_examples() {
        assert_eq!(choice_probability(3.0, &trial(0.4, 0.4, true)), 0.5);
        assert_eq!(choice_probability(0.0, &trial(0.0, 1.0, true)), 0.5);
        assert!((choice_probability(2.0, &trial(0.0, 1.0, true)) - 0.8807970779778823).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn swap_complements(chi in 0.0f64..10.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let t = trial(a, b, true);
            let p = choice_probability(chi, &t);
            let q = choice_probability(chi, &t.swapped());
            prop_assert!((p + q - 1.0).abs() < 1e-15);
        }

        #[test]
        fn mnl_probabilities_sum_to_one(
            delta in 0.0f64..20.0,
            terms in proptest::collection::vec((0.0f64..3.0, 0.0f64..50.0, 0.0f64..50.0), 2..8),
        ) {
            let set = BundleChoiceSet::new(
                terms.iter().map(|&(diversity, c_soc, c_rep)| BundleTerms { diversity, c_soc, c_rep }).collect(),
                0,
            ).unwrap();
            let total: f64 = set.probabilities(delta).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indifferent_responses_give_zero() {
        let trials: Vec<_> = (0..40).map(|i| trial(0.0, 1.0, i % 2 == 0)).collect();
        let fit = fit_chi(&trials, DEFAULT_RIDGE).unwrap();
        assert!(fit.estimate.abs() < 1e-6, "{fit:?}");
        assert!(fit.converged);
    }

    #[test]
    fn separated_responses_diverge_without_ridge() {
        let trials: Vec<_> = (0..20).map(|i| if i % 2 == 0 { trial(0.0, 1.0, true) } else { trial(1.0, 0.0, false) }).collect();
        let free = fit_chi(&trials, 0.0).unwrap();
        assert_eq!(free.status, FitStatus::Diverged);
        assert!(!free.converged);
        let ridged = fit_chi(&trials, 0.01).unwrap();
        assert!(ridged.converged && ridged.estimate.is_finite() && ridged.estimate > 1.0);
    }

    #[test]
    fn uninformative_trials_are_flagged() {
        let trials = vec![trial(0.3, 0.3, true), trial(0.5, 0.5, false)];
        let fit = fit_chi(&trials, DEFAULT_RIDGE).unwrap();
        assert_eq!((fit.estimate, fit.status), (0.0, FitStatus::Uninformative));
        assert!(fit_chi(&[], DEFAULT_RIDGE).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let trials: Vec<_> = (0..30).map(|i| trial((i % 4) as f64 / 4.0, (i % 3) as f64 / 3.0, i % 5 < 3)).collect();
        for chi in [0.3, 1.0, 2.5] {
            let h = 1e-6;
            let fd = (chi_loglik(&trials, chi + h).0 - chi_loglik(&trials, chi - h).0) / (2.0 * h);
            assert!((fd - chi_loglik(&trials, chi).1).abs() < 1e-6);
        }
        let sets = vec![
            BundleChoiceSet::new(
                vec![
                    BundleTerms { diversity: 0.0, c_soc: 0.0, c_rep: 1.0 },
                    BundleTerms { diversity: 1.4, c_soc: 0.7, c_rep: 1.2 },
                    BundleTerms { diversity: 2.1, c_soc: 1.5, c_rep: 0.9 },
                ],
                1,
            )
            .unwrap(),
        ];
        for delta in [0.0, 0.8, 3.0] {
            let h = 1e-6;
            let fd = (delta_loglik(&sets, delta + h).0 - delta_loglik(&sets, delta - h).0) / (2.0 * h);
            assert!((fd - delta_loglik(&sets, delta).1).abs() < 1e-6);
        }
    }

    #[test]
    fn scaling_severities_rescales_chi() {
        let trials: Vec<_> = (0..60).map(|i| trial(0.0, 0.8, i % 3 != 0)).collect();
        let scaled: Vec<_> = trials.iter().map(|t| trial(t.m_a * 0.5, t.m_b * 0.5, t.chose_a)).collect();
        let a = fit_chi(&trials, 0.0).unwrap().estimate;
        let b = fit_chi(&scaled, 0.0).unwrap().estimate;
        assert!((b - 2.0 * a).abs() < 1e-6, "{a} {b}");
    }

    #[test]
    fn delta_examples() {
        let equal_cost = |d: &[f64], chosen| {
            BundleChoiceSet::new(
                d.iter().map(|&diversity| BundleTerms { diversity, c_soc: 0.0, c_rep: 0.0 }).collect(),
                chosen,
            )
            .unwrap()
        };
        let fit = fit_delta(&[equal_cost(&[0.0, 1.0, 2.0], 2)], DEFAULT_RIDGE).unwrap();
        assert!(fit.converged && fit.estimate > 3.0 && fit.estimate.is_finite(), "{fit:?}");
        assert_eq!(fit_delta(&[equal_cost(&[0.0, 1.0, 2.0], 2)], 0.0).unwrap().status, FitStatus::Diverged);

        let uniform: Vec<_> = (0..30).map(|i| equal_cost(&[0.0, 1.0, 2.0], i % 3)).collect();
        assert!(fit_delta(&uniform, DEFAULT_RIDGE).unwrap().estimate < 1e-6);

        let flat = fit_delta(&[equal_cost(&[1.0, 1.0], 0)], DEFAULT_RIDGE).unwrap();
        assert_eq!(flat.status, FitStatus::Uninformative);
        assert!(BundleChoiceSet::new(vec![BundleTerms { diversity: 0.0, c_soc: 0.0, c_rep: 0.0 }], 0).is_err());
    }

    #[test]
    fn local_maximum_check() {
        let trials: Vec<_> = (0..50).map(|i| trial(0.0, 1.0, i % 4 != 0)).collect();
        let fit = fit_chi(&trials, DEFAULT_RIDGE).unwrap();
        assert!(is_local_maximum(|c| chi_objective(&trials, c, DEFAULT_RIDGE), fit.estimate, &[1e-4, 1e-3]));
        assert!(!is_local_maximum(|c| chi_objective(&trials, c, DEFAULT_RIDGE), fit.estimate + 0.5, &[1e-4, 1e-3]));
        assert!(fit.std_error.unwrap() > 0.0);
    }

    #[test]
    fn bundle_costs() {
        let stimuli = stimulus_catalogue(3, 3).unwrap();
        assert_eq!(stimuli.len(), 27);
        let regime = BundleRegime::reference(3);
        let same = simulate_bundle_costs(&[5; 8], &stimuli, &regime, 1.3).unwrap();
        assert_eq!(same.c_soc, 0.0);

        let lossless = BundleRegime { d: 0.0, ..regime.clone() };
        let c = simulate_bundle_costs(&[0, 1, 2, 3, 4, 5, 6, 7], &stimuli, &lossless, 1.0).unwrap();
        assert_eq!(c.c_rep, 0.0);

        // Recompute from traces by hand.
        let mixed = [0, 0, 4, 4, 13, 26, 26, 9];
        let got = simulate_bundle_costs(&mixed, &stimuli, &regime, 1.5).unwrap();
        let cfg = regime.sim_config(1.5);
        let (mut soc, mut lost_cap) = (0.0, 0.0);
        for r in 0..regime.replications {
            let t = environment::run_from_inventory(&cfg, &stimuli, &mixed, r).unwrap();
            for day in &t.days {
                if let Some(eta) = day.eta {
                    if day.exposed {
                        soc += 1.5 * eta.powf(regime.gamma);
                    }
                }
                lost_cap += day.lost_capacity;
            }
            lost_cap += metrics::terminal_stranding(&t.final_state.owned(), &stimuli, &Policy::Greedy);
        }
        let n = regime.replications as f64;
        assert!((got.c_soc - soc / n).abs() < 1e-9);
        assert!((got.c_rep - lost_cap / n).abs() < 1e-9);
        // Linear in sensitivity.
        let unit = simulate_bundle_costs(&mixed, &stimuli, &regime, 1.0).unwrap();
        assert!((got.c_soc - 1.5 * unit.c_soc).abs() < 1e-9);
    }

    #[test]
    fn synthesis_basics() {
        let stimuli = stimulus_catalogue(3, 3).unwrap();
        let spec = SynthesisSpec {
            n: 0,
            chi: ParamDist::study_chi(),
            delta: ParamDist::study_delta(),
            trials: TrialDesign::new(10),
            bundles: Some(BundleDesign::new(5, 1)),
            ridge: DEFAULT_RIDGE,
            seed: 1,
        };
        assert!(synthesize_respondents(&spec, &stimuli).unwrap().respondents.is_empty());

        let flat = SynthesisSpec {
            n: 20,
            chi: ParamDist::Fixed(0.0),
            trials: TrialDesign::new(500),
            bundles: None,
            ..spec.clone()
        };
        let data = synthesize_respondents(&flat, &stimuli).unwrap();
        let (mut agree, mut total) = (0usize, 0usize);
        for r in &data.respondents {
            for t in &r.trials {
                total += 1;
                agree += usize::from(t.chose_a == (t.m_a < t.m_b));
            }
        }
        let rate = agree as f64 / total as f64;
        let sd = (0.25 / total as f64).sqrt();
        assert!((rate - 0.5).abs() < 4.0 * sd, "{rate}");
        assert_eq!(data, synthesize_respondents(&flat, &stimuli).unwrap());
    }

    #[test]
    fn study_distributions_match_moments() {
        let ParamDist::LogNormal { mu, sigma } = ParamDist::study_chi() else { panic!() };
        assert!((mu.exp() - 0.968).abs() < 1e-12);
        assert!(((mu + sigma * sigma / 2.0).exp() - 1.120).abs() < 1e-12);
        assert!((sigma - 0.540).abs() < 1e-3);
        let ParamDist::LogNormal { sigma, .. } = ParamDist::study_delta() else { panic!() };
        assert!((sigma - 0.704).abs() < 1e-3);
    }

    #[test]
    fn summary_statistics_examples() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let s = summary_statistics(&x, &x, Some(&neg)).unwrap();
        assert!((s.corr_chi_delta - 1.0).abs() < 1e-12);
        assert!((s.corr_chi_compliance.unwrap() + 1.0).abs() < 1e-12);
        assert_eq!((s.chi_mean, s.chi_median), (3.5, 3.0));
        assert!(matches!(summary_statistics(&x, &x[..2], None), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn csv_round_trip() {
        let stimuli = stimulus_catalogue(3, 3).unwrap();
        let spec = SynthesisSpec {
            n: 3,
            chi: ParamDist::Fixed(1.0),
            delta: ParamDist::Fixed(1.5),
            trials: TrialDesign::new(6),
            bundles: Some(BundleDesign {
                pool_per_level: 2,
                ..BundleDesign::new(4, 2)
            }),
            ridge: DEFAULT_RIDGE,
            seed: 9,
        };
        let data = synthesize_respondents(&spec, &stimuli).unwrap();
        let (mut t, mut b) = (Vec::new(), Vec::new());
        data.write_trials(&mut t).unwrap();
        data.write_bundles(&mut b).unwrap();
        let back = ChoiceData::read(Some((&t[..], Path::new("t.csv"))), Some((&b[..], Path::new("b.csv")))).unwrap();
        assert_eq!(back.respondents.len(), 3);
        for (a, b) in data.respondents.iter().zip(&back.respondents) {
            assert_eq!(a.trials, b.trials);
            assert_eq!(a.bundle_sets, b.bundle_sets);
        }

        let bad = b"respondent_id,m_a,m_b,choice\nr1,0.0,1.0,1\nr1,0.0,1.5,0\n";
        let err = ChoiceData::read(Some((&bad[..], Path::new("t.csv"))), None::<(&[u8], &Path)>).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let two_chosen = b"respondent_id,set_id,bundle_id,diversity,c_soc_hat,c_rep_hat,chosen\nr,0,0,0.0,0,0,1\nr,0,1,1.0,0,0,1\n";
        let err = ChoiceData::read(None::<(&[u8], &Path)>, Some((&two_chosen[..], Path::new("b.csv")))).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
