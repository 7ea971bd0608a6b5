//! Policy iteration for the stop/continue contract on a simulated market.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compression::{predictive_subspace, value_directed_scale, Scaling};
use crate::covariance::{build_covariance_set, CovarianceSet, TransitionBatch};
use crate::envs::market::{canonical_basis, discount, extended_basis, payoff, simulate_gbm_with, MarketState, CANONICAL_DIM, EXTENDED_DIM, WINDOW};
use crate::error::{Error, Result};
use crate::features::{stack_future_features, Trajectory, VectorFeaturizer, WindowSpec};
use crate::learners::{lstd, pstd, ValueFunction};

/// Days skipped after an exercise before the contract restarts.
pub const RESTART_GAP: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarketParams {
    pub sigma: f64,
    pub rho: f64,
}

impl MarketParams {
    pub fn gamma(&self) -> f64 {
        discount(self.rho)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSet {
    /// The 16 hand-designed features.
    Canonical,
    /// All 220 features.
    Extended,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        match self {
            FeatureSet::Canonical => CANONICAL_DIM,
            FeatureSet::Extended => EXTENDED_DIM,
        }
    }

    pub fn features(&self, state: &MarketState) -> DVector<f64> {
        match self {
            FeatureSet::Canonical => DVector::from_column_slice(&canonical_basis(state)),
            FeatureSet::Extended => DVector::from_vec(extended_basis(state)),
        }
    }
}

#[derive(Clone, Debug)]
pub enum StoppingPolicy {
    /// Stop when the payoff is at least the estimated continuation value.
    Greedy { value: ValueFunction<f64>, features: FeatureSet },
    Threshold(f64),
    StopNow,
    NeverStop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Stop,
    Continue,
}

impl StoppingPolicy {
    pub fn greedy(value: ValueFunction<f64>, features: FeatureSet) -> Result<Self> {
        if value.input_dim() != features.dim() {
            return Err(Error::mismatch("greedy policy features", features.dim(), value.input_dim()));
        }
        Ok(StoppingPolicy::Greedy { value, features })
    }
}

/// Ties stop.
pub fn decide(policy: &StoppingPolicy, state: &MarketState) -> Decision {
    let g = payoff(state);
    let stop = match policy {
        StoppingPolicy::StopNow => true,
        StoppingPolicy::NeverStop => false,
        StoppingPolicy::Threshold(level) => g >= *level,
        StoppingPolicy::Greedy { value, features } => {
            let w = value.effective_weights();
            g >= w.dot(&features.features(state))
        }
    };
    if stop { Decision::Stop } else { Decision::Continue }
}

/// Features of every training state of one long price path.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub payoffs: Vec<f64>,
    /// One column per state.
    pub history: DMatrix<f64>,
    /// Stacked future features, one column per state.
    pub future: DMatrix<f64>,
    pub features: FeatureSet,
}

impl TrainingData {
    pub fn len(&self) -> usize {
        self.payoffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payoffs.is_empty()
    }
}

/// Reward rows of the stacked `[G, canonical]` future features.
pub fn future_reward_rows(horizon: usize) -> Vec<usize> {
    (0..horizon).map(|i| i * (CANONICAL_DIM + 1)).collect()
}

/// Builds training states `t = 100, 101, …` of `path`, keeping those with a
/// full future window. Future features stack `[G, canonical]` over the next
/// `future_horizon` states, with non-reward rows shrunk so their variance drops by `variance_factor`.
pub fn build_training_data(path: &[f64], features: FeatureSet, future_horizon: usize, variance_factor: f64) -> Result<TrainingData> {
    if path.len() < WINDOW + 1 {
        return Err(Error::invalid("price path shorter than one market state"));
    }
    let states: Vec<MarketState> = (WINDOW..path.len()).map(|t| MarketState::at(path, t)).collect::<Result<_>>()?;
    let per_state: Vec<DVector<f64>> = states
        .iter()
        .map(|s| {
            let mut v = DVector::zeros(CANONICAL_DIM + 1);
            v[0] = payoff(s);
            v.rows_mut(1, CANONICAL_DIM).copy_from_slice(&canonical_basis(s));
            v
        })
        .collect();
    let traj = Trajectory::new(per_state, vec![0.0; states.len()])?;
    let spec = WindowSpec::new(1, future_horizon)?;
    let fut = stack_future_features(&traj, VectorFeaturizer::new(CANONICAL_DIM + 1), spec)?;
    let fut = value_directed_scale(&fut, &future_reward_rows(future_horizon), variance_factor)?;
    let n = fut.len();
    let mut history = DMatrix::zeros(features.dim(), n);
    for (j, &t) in fut.indices.iter().enumerate() {
        history.set_column(j, &features.features(&states[t]));
    }
    let payoffs = fut.indices.iter().map(|&t| payoff(&states[t])).collect();
    Ok(TrainingData { payoffs, history, future: fut.values, features })
}

/// Training tuples produced by replaying a policy along the path.
#[derive(Clone, Debug, PartialEq)]
pub struct Relabelled {
    pub states: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Successor state, or `None` after a stop.
    pub next: Vec<Option<usize>>,
}

impl Relabelled {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn terminals(&self) -> usize {
        self.next.iter().filter(|n| n.is_none()).count()
    }
}

/// Continuing yields reward 0 and the next state; stopping yields `G` and a
/// zero successor, after which the walk resumes `RESTART_GAP` days later.
pub fn relabel(stop: &[bool], payoffs: &[f64]) -> Result<Relabelled> {
    let n = payoffs.len();
    if stop.len() != n {
        return Err(Error::mismatch("stop decisions", n, stop.len()));
    }
    if n < 2 * RESTART_GAP + 1 {
        return Err(Error::invalid(format!("relabelling needs at least {} states, got {n}", 2 * RESTART_GAP + 1)));
    }
    let mut out = Relabelled { states: Vec::new(), rewards: Vec::new(), next: Vec::new() };
    let mut t = 0;
    while t + 1 < n {
        out.states.push(t);
        if stop[t] {
            out.rewards.push(payoffs[t]);
            out.next.push(None);
            t += RESTART_GAP + 1;
        } else {
            out.rewards.push(0.0);
            out.next.push(Some(t + 1));
            t += 1;
        }
    }
    Ok(out)
}

/// Stop decisions of `policy` on every training state.
pub fn training_decisions(policy: &StoppingPolicy, data: &TrainingData) -> Result<Vec<bool>> {
    Ok(match policy {
        StoppingPolicy::StopNow => vec![true; data.len()],
        StoppingPolicy::NeverStop => vec![false; data.len()],
        StoppingPolicy::Threshold(level) => data.payoffs.iter().map(|g| g >= level).collect(),
        StoppingPolicy::Greedy { value, features } => {
            if *features != data.features {
                return Err(Error::invalid("greedy policy and training data use different features"));
            }
            let v = value.evaluate_columns(&data.history)?;
            data.payoffs.iter().zip(v.iter()).map(|(g, v)| g >= v).collect()
        }
    })
}

pub fn relabel_for_policy(data: &TrainingData, policy: &StoppingPolicy) -> Result<Relabelled> {
    relabel(&training_decisions(policy, data)?, &data.payoffs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoppingLearner {
    Lstd,
    Pstd { dim: usize },
}

/// Covariances of relabelled tuples; terminal successors have zero features.
pub fn tuple_covariances(data: &TrainingData, tuples: &Relabelled) -> Result<CovarianceSet<f64, usize>> {
    let d = data.history.nrows();
    let k = tuples.len();
    let history = DMatrix::from_fn(d, k, |r, c| data.history[(r, tuples.states[c])]);
    let next = DMatrix::from_fn(d, k, |r, c| tuples.next[c].map_or(0.0, |s| data.history[(r, s)]));
    let future = DMatrix::from_fn(data.future.nrows(), k, |r, c| data.future[(r, tuples.states[c])]);
    let batch = TransitionBatch::new(history, next, future, None, DVector::from_column_slice(&tuples.rewards), vec![0usize; k])?;
    build_covariance_set(&batch)
}

/// Fits the learner to relabelled tuples.
pub fn fit(data: &TrainingData, tuples: &Relabelled, learner: StoppingLearner, gamma: f64) -> Result<ValueFunction<f64>> {
    fit_covariances(&tuple_covariances(data, tuples)?, learner, gamma)
}

pub fn fit_covariances(cs: &CovarianceSet<f64, usize>, learner: StoppingLearner, gamma: f64) -> Result<ValueFunction<f64>> {
    match learner {
        StoppingLearner::Lstd => lstd(cs, gamma),
        StoppingLearner::Pstd { dim } => {
            let sub = predictive_subspace(&cs.th, &cs.hh, dim, Scaling::None)?;
            pstd(cs, &sub.v_hat, gamma)
        }
    }
}

/// Payoff statistics over simulated paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub mean: f64,
    pub stderr: f64,
    pub undiscounted_mean: f64,
    pub undiscounted_stderr: f64,
    /// Fraction of paths stopped before the forced exercise.
    pub stop_rate: f64,
    pub paths: usize,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Simulates `n_paths` fresh markets, each with its own random stream, and
/// exercises at the first stop decision or at day `horizon`.
pub fn evaluate_policy(policy: &StoppingPolicy, market: MarketParams, n_paths: usize, horizon: usize, seed: u64) -> Result<Evaluation> {
    if n_paths == 0 {
        return Err(Error::invalid("evaluation needs at least one path"));
    }
    let gamma = market.gamma();
    let weights = match policy {
        StoppingPolicy::Greedy { value, .. } => Some(value.effective_weights()),
        _ => None,
    };
    let mut discounted = Vec::with_capacity(n_paths);
    let mut raw = Vec::with_capacity(n_paths);
    let mut stopped = 0usize;
    for i in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let path = simulate_gbm_with(market.sigma, market.rho, WINDOW + horizon + 1, &mut rng)?;
        let mut tau = horizon;
        for day in 0..horizon {
            let state = MarketState::at(&path, WINDOW + day)?;
            let stop = match (policy, &weights) {
                (StoppingPolicy::Greedy { features, .. }, Some(w)) => payoff(&state) >= w.dot(&features.features(&state)),
                _ => decide(policy, &state) == Decision::Stop,
            };
            if stop {
                tau = day;
                stopped += 1;
                break;
            }
        }
        let g = payoff(&MarketState::at(&path, WINDOW + tau)?);
        raw.push(g);
        discounted.push(gamma.powi(tau as i32) * g);
    }
    let (mean, stderr) = mean_stderr(&discounted);
    let (undiscounted_mean, undiscounted_stderr) = mean_stderr(&raw);
    Ok(Evaluation { mean, stderr, undiscounted_mean, undiscounted_stderr, stop_rate: stopped as f64 / n_paths as f64, paths: n_paths })
}

/// Mean discounted payoff per contract when a threshold policy is replayed on
/// the training payoffs. Each contract starts at a restart and ends at its
/// first exercise; contracts still open at the end of the data are ignored.
pub fn threshold_training_payoff(payoffs: &[f64], level: f64, gamma: f64) -> Option<f64> {
    let n = payoffs.len();
    let (mut t, mut total, mut count) = (0usize, 0.0, 0usize);
    while t + 1 < n {
        let start = t;
        while t + 1 < n && payoffs[t] < level {
            t += 1;
        }
        if t + 1 >= n {
            break;
        }
        total += gamma.powi((t - start) as i32) * payoffs[t];
        count += 1;
        t += RESTART_GAP + 1;
    }
    (count > 0).then(|| total / count as f64)
}

/// Grid level with the best training payoff; ties keep the lowest level.
pub fn best_threshold(payoffs: &[f64], grid: &[f64], gamma: f64) -> Result<(StoppingPolicy, f64)> {
    if grid.is_empty() {
        return Err(Error::invalid("threshold grid is empty"));
    }
    let mut sorted = grid.to_vec();
    if sorted.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("threshold grid must be finite"));
    }
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &level in &sorted {
        let value = threshold_training_payoff(payoffs, level, gamma).unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| value > b) {
            best = Some((level, value));
        }
    }
    let (level, value) = best.expect("nonempty grid");
    Ok((StoppingPolicy::Threshold(level), value))
}

#[derive(Clone, Debug)]
pub struct PolicyIterationConfig {
    pub learner: StoppingLearner,
    pub iterations: usize,
    /// Stop once fewer than this fraction of training decisions change.
    pub change_tolerance: f64,
    pub eval_paths: usize,
    pub eval_horizon: usize,
    pub eval_seed: u64,
}

impl PolicyIterationConfig {
    pub const DEFAULT_ITERATIONS: usize = 15;
    pub const DEFAULT_CHANGE_TOLERANCE: f64 = 1e-3;
    pub const DEFAULT_EVAL_HORIZON: usize = 2000;
}

#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value_function: ValueFunction<f64>,
    pub evaluation: Evaluation,
    /// Fraction of training states where the new greedy policy stops.
    pub training_stop_rate: f64,
    /// Fraction of training decisions that changed in this round.
    pub changed_fraction: f64,
    /// Partition identity residual and scale of the covariances fitted this round.
    pub partition_residual: f64,
    pub partition_scale: f64,
}

/// Starts from always-continue labels; each round fits a value function,
/// forms its greedy policy, evaluates it and relabels the data with it.
pub fn policy_iteration(data: &TrainingData, market: MarketParams, config: &PolicyIterationConfig) -> Result<Vec<IterationRecord>> {
    if config.iterations == 0 {
        return Err(Error::invalid("policy iteration needs at least one iteration"));
    }
    let gamma = market.gamma();
    let mut decisions = vec![false; data.len()];
    let mut records = Vec::new();
    for iteration in 0..config.iterations {
        let wrap = |e: Error| Error::Iteration { iteration, source: Box::new(e) };
        let tuples = relabel(&decisions, &data.payoffs).map_err(wrap)?;
        let cs = tuple_covariances(data, &tuples).map_err(wrap)?;
        let vf = fit_covariances(&cs, config.learner, gamma).map_err(wrap)?;
        if vf.w.iter().any(|x| !x.is_finite()) {
            return Err(wrap(Error::invalid("learner produced non-finite weights")));
        }
        let policy = StoppingPolicy::greedy(vf.clone(), data.features).map_err(wrap)?;
        let next = training_decisions(&policy, data).map_err(wrap)?;
        let changed = next.iter().zip(&decisions).filter(|(a, b)| a != b).count() as f64 / data.len() as f64;
        let evaluation = evaluate_policy(&policy, market, config.eval_paths, config.eval_horizon, config.eval_seed).map_err(wrap)?;
        log::info!("iteration {iteration}: payoff {:.4} ± {:.4}, changed {:.4}", evaluation.mean, evaluation.stderr, changed);
        records.push(IterationRecord {
            iteration,
            value_function: vf,
            evaluation,
            training_stop_rate: next.iter().filter(|&&s| s).count() as f64 / data.len() as f64,
            changed_fraction: changed,
            partition_residual: cs.partition_residual(),
            partition_scale: cs.partition_scale(),
        });
        decisions = next;
        if changed < config.change_tolerance {
            break;
        }
    }
    Ok(records)
}

/// Appends `iteration,learner,payoff,stderr,undiscounted,undiscounted_stderr,stop_rate` rows.
pub fn write_iterations_csv<W: Write>(out: W, learner: &str, records: &[IterationRecord], header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record(["iteration", "learner", "payoff", "stderr", "undiscounted", "undiscounted_stderr", "stop_rate"])?;
    }
    for r in records {
        let e = &r.evaluation;
        w.write_record([
            r.iteration.to_string(),
            learner.to_string(),
            format!("{:e}", e.mean),
            format!("{:e}", e.stderr),
            format!("{:e}", e.undiscounted_mean),
            format!("{:e}", e.undiscounted_stderr),
            format!("{:e}", e.stop_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}
