//! Desk-scale pricing runs: baselines plus policy iteration per seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::market::{simulate_gbm_with, WINDOW};
use crate::error::Result;
use crate::stopping::{
    best_threshold, build_training_data, evaluate_policy, policy_iteration, Evaluation, FeatureSet, IterationRecord, MarketParams,
    PolicyIterationConfig, StoppingLearner, StoppingPolicy,
};

/// Stream reserved for the training path; evaluation uses streams `0..paths`.
pub const TRAINING_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct PricingConfig {
    pub market: MarketParams,
    pub training_states: usize,
    pub future_horizon: usize,
    /// Multiplier on the non-reward rows of the future features.
    pub variance_factor: f64,
    pub threshold_grid: Vec<f64>,
    pub eval_paths: usize,
    pub eval_horizon: usize,
    pub iterations: usize,
    pub change_tolerance: f64,
    /// One policy-iteration run per entry.
    pub learners: Vec<(StoppingLearner, FeatureSet)>,
}

impl PricingConfig {
    /// Threshold levels `lo, lo + step, ..., hi`.
    pub fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| lo + step * i as f64).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LearnerRun {
    pub learner: StoppingLearner,
    pub features: FeatureSet,
    pub result: std::result::Result<Vec<IterationRecord>, String>,
}

impl LearnerRun {
    pub fn label(&self) -> String {
        let f = match self.features {
            FeatureSet::Canonical => "canonical",
            FeatureSet::Extended => "extended",
        };
        match self.learner {
            StoppingLearner::Lstd => format!("lstd_{f}"),
            StoppingLearner::Pstd { dim } => format!("pstd{dim}_{f}"),
        }
    }

    pub fn final_evaluation(&self) -> Option<Evaluation> {
        self.result.as_ref().ok().and_then(|r| r.last()).map(|r| r.evaluation)
    }
}

#[derive(Clone, Debug)]
pub struct PricingSeedResult {
    pub seed: u64,
    pub stop_now: Evaluation,
    pub threshold_level: f64,
    pub threshold: Evaluation,
    pub runs: Vec<LearnerRun>,
}

/// Training payoffs come from one long path on the seed's reserved stream;
/// every policy is evaluated on the same seeded evaluation paths.
pub fn run_seed(config: &PricingConfig, seed: u64) -> Result<PricingSeedResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAINING_STREAM);
    let path = simulate_gbm_with(config.market.sigma, config.market.rho, config.training_states + WINDOW + config.future_horizon, &mut rng)?;
    let gamma = config.market.gamma();
    let evaluate = |p: &StoppingPolicy| evaluate_policy(p, config.market, config.eval_paths, config.eval_horizon, seed);
    let stop_now = evaluate(&StoppingPolicy::StopNow)?;
    let mut runs = Vec::new();
    let mut payoffs = None;
    for &(learner, features) in &config.learners {
        let data = build_training_data(&path, features, config.future_horizon, config.variance_factor)?;
        let pi = PolicyIterationConfig {
            learner,
            iterations: config.iterations,
            change_tolerance: config.change_tolerance,
            eval_paths: config.eval_paths,
            eval_horizon: config.eval_horizon,
            eval_seed: seed,
        };
        let result = policy_iteration(&data, config.market, &pi).map_err(|e| e.to_string());
        payoffs.get_or_insert(data.payoffs);
        runs.push(LearnerRun { learner, features, result });
    }
    let payoffs = match payoffs {
        Some(p) => p,
        None => build_training_data(&path, FeatureSet::Canonical, config.future_horizon, config.variance_factor)?.payoffs,
    };
    let (policy, _) = best_threshold(&payoffs, &config.threshold_grid, gamma)?;
    let threshold_level = match policy {
        StoppingPolicy::Threshold(level) => level,
        _ => unreachable!("best_threshold returns a threshold policy"),
    };
    let threshold = evaluate(&policy)?;
    Ok(PricingSeedResult { seed, stop_now, threshold_level, threshold, runs })
}
