//! Experiment configuration files.
//!
//! Every scientific parameter must be stated; validation happens while
//! deserializing so errors carry the offending line and column.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use pstd::experiments::pricing::PricingConfig;
use pstd::experiments::rrpomdp::RrConfig;
use pstd::learners::Learner;
use pstd::stopping::{FeatureSet, MarketParams, StoppingLearner};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

/// Integer or real that must be strictly positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive<T>(pub T);

impl<'de, T> Deserialize<'de> for Positive<T>
where
    T: Deserialize<'de> + PartialOrd + Default + fmt::Display,
{
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = T::deserialize(d)?;
        if v > T::default() {
            Ok(Positive(v))
        } else {
            Err(de::Error::custom(format!("must be positive, got {v}")))
        }
    }
}

/// Discount factor in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discount(pub f64);

impl<'de> Deserialize<'de> for Discount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if (0.0..1.0).contains(&v) {
            Ok(Discount(v))
        } else {
            Err(de::Error::custom(format!("discount must lie in [0, 1), got {v}")))
        }
    }
}

/// Nonempty list without duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct Distinct<T>(pub Vec<T>);

impl<'de, T> Deserialize<'de> for Distinct<T>
where
    T: Deserialize<'de> + PartialEq + fmt::Debug,
{
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<T>::deserialize(d)?;
        if v.is_empty() {
            return Err(de::Error::custom("list must not be empty"));
        }
        for (i, x) in v.iter().enumerate() {
            if v[..i].contains(x) {
                return Err(de::Error::custom(format!("duplicate entry {x:?}")));
            }
        }
        Ok(Distinct(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExperimentId {
    RrPomdpA,
    RrPomdpB,
    RrPomdpC,
    Pricing,
    Equivalence,
    Oracles,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::RrPomdpA,
        ExperimentId::RrPomdpB,
        ExperimentId::RrPomdpC,
        ExperimentId::Pricing,
        ExperimentId::Equivalence,
        ExperimentId::Oracles,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::RrPomdpA => "rrpomdp_A",
            ExperimentId::RrPomdpB => "rrpomdp_B",
            ExperimentId::RrPomdpC => "rrpomdp_C",
            ExperimentId::Pricing => "pricing",
            ExperimentId::Equivalence => "equivalence",
            ExperimentId::Oracles => "oracles",
        }
    }

    pub fn is_rrpomdp(self) -> bool {
        matches!(self, ExperimentId::RrPomdpA | ExperimentId::RrPomdpB | ExperimentId::RrPomdpC)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| format!("unknown experiment `{s}`; expected one of {}", Self::ALL.map(|i| i.as_str()).join(", ")))
    }
}

impl<'de> Deserialize<'de> for ExperimentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

fn learner<'de, D: Deserializer<'de>>(d: D) -> Result<Learner, D::Error> {
    String::deserialize(d)?.parse().map_err(de::Error::custom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerName(pub Learner);

impl<'de> Deserialize<'de> for LearnerName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match learner(d)? {
            Learner::Tpsr => Err(de::Error::custom("`tpsr` is not a benchmark learner; use lstd, pstd or pstd2")),
            l => Ok(LearnerName(l)),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RrSection {
    pub steps: Positive<usize>,
    pub history_len: Positive<usize>,
    pub future_len: Positive<usize>,
    pub rbf_features: Positive<usize>,
    pub random_features: usize,
    /// Omitted means the median distance between centers.
    pub bandwidth: Option<Positive<f64>>,
    pub dim: Positive<usize>,
    pub learners: Distinct<LearnerName>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lo: Positive<f64>,
    pub hi: Positive<f64>,
    pub step: Positive<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureName {
    Canonical,
    Extended,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoppingLearnerName {
    Lstd,
    Pstd,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingLearner {
    pub learner: StoppingLearnerName,
    pub features: FeatureName,
    /// Required for `pstd`, rejected for `lstd`.
    pub dim: Option<Positive<usize>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingSection {
    pub sigma: Positive<f64>,
    pub rho: Positive<f64>,
    pub training_states: Positive<usize>,
    pub future_horizon: Positive<usize>,
    pub variance_factor: Positive<f64>,
    pub threshold_grid: Grid,
    pub eval_paths: Positive<usize>,
    pub eval_horizon: Positive<usize>,
    pub iterations: Positive<usize>,
    pub change_tolerance: Positive<f64>,
    pub learners: Distinct<PricingLearner>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceSection {
    pub datasets: Positive<usize>,
    pub samples: Positive<usize>,
    pub history_dim: Positive<usize>,
    pub future_dim: Positive<usize>,
    /// Latent dimensions cycle through `1..=max_latent_dim`.
    pub max_latent_dim: Positive<usize>,
    pub gamma: Discount,
    pub tolerance: Positive<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OraclesSection {
    pub history_len: Positive<usize>,
    pub future_len: Positive<usize>,
    pub dim: Positive<usize>,
    pub filter_steps: Positive<usize>,
    pub chain_small: Positive<usize>,
    pub chain_large: Positive<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: toml::Spanned<ExperimentId>,
    pub seeds: Distinct<u64>,
    pub output_dir: Option<PathBuf>,
    pub rrpomdp: Option<RrSection>,
    pub pricing: Option<PricingSection>,
    pub equivalence: Option<EquivalenceSection>,
    pub oracles: Option<OraclesSection>,
}

/// A validated configuration and the hash of its source text.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub sha256: String,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl ExperimentConfig {
    pub fn id(&self) -> ExperimentId {
        *self.experiment.get_ref()
    }

    /// Parses and validates; errors name the line and column of the problem.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let invalid = |message: String| ConfigError::Invalid { path: path.to_path_buf(), message };
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| line_col(text, s.start));
            match at {
                Some((line, col)) => invalid(format!("line {line}, column {col}: {}", e.message())),
                None => invalid(e.message().to_string()),
            }
        })?;
        let (line, col) = line_col(text, config.experiment.span().start);
        let at = |msg: String| invalid(format!("line {line}, column {col}: {msg}"));
        let id = config.id();
        let sections = [
            ("rrpomdp", config.rrpomdp.is_some(), id.is_rrpomdp()),
            ("pricing", config.pricing.is_some(), id == ExperimentId::Pricing),
            ("equivalence", config.equivalence.is_some(), id == ExperimentId::Equivalence),
            ("oracles", config.oracles.is_some(), id == ExperimentId::Oracles),
        ];
        for (name, present, wanted) in sections {
            if wanted && !present {
                return Err(at(format!("experiment `{id}` requires a [{name}] section")));
            }
            if present && !wanted {
                return Err(at(format!("section [{name}] does not belong to experiment `{id}`")));
            }
        }
        if let Some(p) = &config.pricing {
            let g = p.threshold_grid;
            if g.hi.0 < g.lo.0 {
                return Err(at(format!("threshold_grid.hi ({}) is below threshold_grid.lo ({})", g.hi.0, g.lo.0)));
            }
            for l in &p.learners.0 {
                match (l.learner, l.dim) {
                    (StoppingLearnerName::Pstd, None) => return Err(at("pricing learner `pstd` needs `dim`".into())),
                    (StoppingLearnerName::Lstd, Some(_)) => return Err(at("pricing learner `lstd` takes no `dim`".into())),
                    _ => {}
                }
            }
        }
        if let Some(e) = &config.equivalence {
            let n = e.max_latent_dim.0;
            if n > e.history_dim.0 || n > e.future_dim.0 {
                return Err(at(format!("max_latent_dim ({n}) exceeds the feature dimensions")));
            }
        }
        if let Some(o) = &config.oracles {
            if o.chain_small.0 >= o.chain_large.0 {
                return Err(at("oracles.chain_small must be below oracles.chain_large".into()));
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Loaded, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let config = Self::parse(&text, path)?;
        let sha256 = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(Loaded { config, sha256 })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds.0
    }
}

impl RrSection {
    pub fn to_config(&self) -> RrConfig {
        RrConfig {
            steps: self.steps.0,
            history_len: self.history_len.0,
            future_len: self.future_len.0,
            rbf_features: self.rbf_features.0,
            random_features: self.random_features,
            bandwidth: self.bandwidth.map(|b| b.0),
            dim: self.dim.0,
            learners: self.learners.0.iter().map(|l| l.0).collect(),
        }
    }
}

impl PricingSection {
    pub fn to_config(&self) -> PricingConfig {
        let g = self.threshold_grid;
        PricingConfig {
            market: MarketParams { sigma: self.sigma.0, rho: self.rho.0 },
            training_states: self.training_states.0,
            future_horizon: self.future_horizon.0,
            variance_factor: self.variance_factor.0,
            threshold_grid: PricingConfig::grid(g.lo.0, g.hi.0, g.step.0),
            eval_paths: self.eval_paths.0,
            eval_horizon: self.eval_horizon.0,
            iterations: self.iterations.0,
            change_tolerance: self.change_tolerance.0,
            learners: self
                .learners
                .0
                .iter()
                .map(|l| {
                    let features = match l.features {
                        FeatureName::Canonical => FeatureSet::Canonical,
                        FeatureName::Extended => FeatureSet::Extended,
                    };
                    let learner = match (l.learner, l.dim) {
                        (StoppingLearnerName::Pstd, Some(d)) => StoppingLearner::Pstd { dim: d.0 },
                        _ => StoppingLearner::Lstd,
                    };
                    (learner, features)
                })
                .collect(),
        }
    }
}
