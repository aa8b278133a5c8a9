//! Flat run configuration files.
//!
//! Every key is optional in the file so that command-line flags can be
//! layered on top with [`RunConfig::merge`]; [`RunConfig::resolve`] fills the
//! gaps from the reference regime and validates the result.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalogue::{generate_catalogue, load_catalogue, Catalogue, CatalogueSpec, FeatureSampling, FeatureSpace};
use crate::environment::{AgentParams, DiversityTiming, LaundryTrigger, Rounding, SimConfig};
use crate::error::{Error, Result};
use crate::metrics::DiversityMeasure;
use crate::policies::{Policy, PolicyKind};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_xi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replenishment: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Catalogue CSV; relative paths are taken from the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalogue: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_designs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub price_min: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub price_max: Option<u64>,
    /// Seed for synthetic catalogues; defaults to `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalogue_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounding: Option<Rounding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<DiversityMeasure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity_at: Option<DiversityTiming>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub laundry: Option<LaundryTrigger>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),*) => {
        RunConfig { $($field: $top.$field.or($base.$field)),* }
    };
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        if let Some(cat) = &cfg.catalogue {
            if cat.is_relative() {
                if let Some(dir) = origin.parent() {
                    cfg.catalogue = Some(dir.join(cat));
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Keys set in `top` win.
    pub fn merge(self, top: RunConfig) -> RunConfig {
        let base = self;
        overlay!(base, top; horizon, kappa, b, theta, d, rho, chi, gamma, alpha, delta, lambda,
            policy, tau_eta, tau_xi, replenishment, seed, catalogue, n_designs, features,
            price_min, price_max, catalogue_seed, rounding, diversity, diversity_at, laundry)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let seed = self.seed.ok_or_else(|| Error::Config("a master seed is required".into()))?;
        let kind: PolicyKind = self.policy.as_deref().unwrap_or("purist").parse()?;
        let policy = Policy::from_parts(kind, self.tau_eta, self.tau_xi)?;
        let reference = SimConfig::reference(policy, seed);
        let agent = AgentParams {
            budget: self.b.unwrap_or(reference.agent.budget),
            chi: self.chi.unwrap_or(reference.agent.chi),
            delta: self.delta.unwrap_or(reference.agent.delta),
            rho: self.rho.unwrap_or(reference.agent.rho),
            gamma: self.gamma.unwrap_or(reference.agent.gamma),
            lambda: self.lambda.unwrap_or(reference.agent.lambda),
        };
        let sim = SimConfig {
            horizon: self.horizon.unwrap_or(reference.horizon),
            kappa: self.kappa.unwrap_or(reference.kappa),
            theta: self.theta.unwrap_or(reference.theta),
            d: self.d.unwrap_or(reference.d),
            agent,
            policy,
            replenishment: self.replenishment.unwrap_or(reference.replenishment),
            seed,
            rounding: self.rounding.unwrap_or_default(),
            diversity: self.diversity.unwrap_or_default(),
            diversity_at: self.diversity_at.unwrap_or_default(),
            laundry: self.laundry.unwrap_or_default(),
        };
        sim.validate()?;

        let defaults = CatalogueSpec::reference(seed);
        let alpha = self.alpha.unwrap_or(defaults.alpha);
        let space = FeatureSpace::new(self.features.clone().unwrap_or(defaults.feature_sizes.clone()))?;
        let source = match &self.catalogue {
            Some(path) => CatalogueSource::File {
                path: path.clone(),
                space,
                alpha,
            },
            None => CatalogueSource::Synthetic(CatalogueSpec {
                n_designs: self.n_designs.unwrap_or(defaults.n_designs),
                feature_sizes: space.sizes().to_vec(),
                price_min: self.price_min.unwrap_or(defaults.price_min),
                price_max: self.price_max.unwrap_or(defaults.price_max),
                alpha,
                seed: self.catalogue_seed.unwrap_or(seed),
                sampling: FeatureSampling::Auto,
            }),
        };
        Ok(Resolved { sim, source })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CatalogueSource {
    File { path: PathBuf, space: FeatureSpace, alpha: f64 },
    Synthetic(CatalogueSpec),
}

impl CatalogueSource {
    pub fn load(&self) -> Result<Catalogue> {
        match self {
            CatalogueSource::File { path, space, alpha } => load_catalogue(path, space, *alpha),
            CatalogueSource::Synthetic(spec) => generate_catalogue(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub sim: SimConfig,
    pub source: CatalogueSource,
}

impl Resolved {
    /// A fully populated config that resolves back to `self`.
    pub fn snapshot(&self) -> RunConfig {
        let s = &self.sim;
        let mut cfg = RunConfig {
            horizon: Some(s.horizon),
            kappa: Some(s.kappa),
            b: Some(s.agent.budget),
            theta: Some(s.theta),
            d: Some(s.d),
            rho: Some(s.agent.rho),
            chi: Some(s.agent.chi),
            gamma: Some(s.agent.gamma),
            delta: Some(s.agent.delta),
            lambda: Some(s.agent.lambda),
            policy: Some(s.policy.kind().slug().to_string()),
            tau_eta: s.policy.tau_eta(),
            tau_xi: s.policy.tau_xi(),
            replenishment: Some(s.replenishment),
            seed: Some(s.seed),
            rounding: Some(s.rounding),
            diversity: Some(s.diversity),
            diversity_at: Some(s.diversity_at),
            laundry: Some(s.laundry),
            ..RunConfig::default()
        };
        match &self.source {
            CatalogueSource::File { path, space, alpha } => {
                cfg.catalogue = Some(path.clone());
                cfg.features = Some(space.sizes().to_vec());
                cfg.alpha = Some(*alpha);
            }
            CatalogueSource::Synthetic(spec) => {
                cfg.n_designs = Some(spec.n_designs);
                cfg.features = Some(spec.feature_sizes.clone());
                cfg.price_min = Some(spec.price_min);
                cfg.price_max = Some(spec.price_max);
                cfg.alpha = Some(spec.alpha);
                cfg.catalogue_seed = Some(spec.seed);
            }
        }
        cfg
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }
}
