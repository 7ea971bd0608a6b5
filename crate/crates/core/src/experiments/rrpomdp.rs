//! Value-estimation accuracy on the reduced-rank POMDP.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::compression::{predictive_subspace, Scaling};
use crate::covariance::{adjacent_pairs, build_covariance_set, CovarianceSet, TransitionBatch};
use crate::envs::pomdp::{history_true_value, rr_pomdp_spec, simulate_pomdp_with, PomdpSpec};
use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix};
use crate::features::{aligned_indices, window_features, FeatureMatrix, RbfFeaturizer, WindowKind, WindowSpec};
use crate::learners::{lstd, pstd, pstd2, Learner};
use crate::tpsr::learn_tpsr_correlated;

#[derive(Clone, Debug, PartialEq)]
pub struct RrConfig {
    pub steps: usize,
    pub history_len: usize,
    pub future_len: usize,
    /// RBF features in both the history and the future representation.
    pub rbf_features: usize,
    /// Extra Gaussian noise features appended to both representations.
    pub random_features: usize,
    /// `None` uses the median distance between centers.
    pub bandwidth: Option<f64>,
    pub dim: usize,
    pub learners: Vec<Learner>,
}

impl RrConfig {
    /// 10 RBF features.
    pub fn variant_a(steps: usize, dim: usize) -> Self {
        RrConfig { steps, history_len: 5, future_len: 5, rbf_features: 10, random_features: 0, bandwidth: None, dim, learners: vec![Learner::Lstd, Learner::Pstd, Learner::Pstd2] }
    }

    /// 10 RBF features padded with 490 noise features.
    pub fn variant_b(steps: usize, dim: usize) -> Self {
        RrConfig { random_features: 490, ..Self::variant_a(steps, dim) }
    }

    /// 500 RBF features.
    pub fn variant_c(steps: usize, dim: usize) -> Self {
        RrConfig { rbf_features: 500, ..Self::variant_a(steps, dim) }
    }
}

/// Per-learner mean squared error against the exact history values.
#[derive(Clone, Debug)]
pub struct RrSeedResult {
    pub seed: u64,
    pub samples: usize,
    pub mse: BTreeMap<Learner, std::result::Result<f64, String>>,
    pub partition_residual: f64,
    pub partition_scale: f64,
}

/// Inputs shared by every learner for one seed.
pub struct RrData {
    pub spec: PomdpSpec,
    pub cs: CovarianceSet<f64, usize>,
    /// History features of each transition, one column per transition.
    pub history: DMatrix<f64>,
    /// History window of each transition.
    pub windows: Vec<Vec<usize>>,
    pub truth: DVector<f64>,
}

fn append_noise(m: &FeatureMatrix<f64>, extra: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix<f64> {
    if extra == 0 {
        return m.clone();
    }
    let mut out = m.clone();
    let (d, k) = m.values.shape();
    let mut values = DMatrix::zeros(d + extra, k);
    values.rows_mut(0, d).copy_from(&m.values);
    for c in 0..k {
        for r in d..d + extra {
            values[(r, c)] = rng.sample(StandardNormal);
        }
    }
    out.values = values;
    out
}

/// Simulates one run and builds its features, covariances and ground truth.
///
/// Split `t` is paired with reward `R(s_{t+1})` and symbol `o_{t+1}`, so its
/// value is the expected return from the state whose observation comes next.
pub fn prepare(config: &RrConfig, seed: u64) -> Result<RrData> {
    if config.rbf_features == 0 {
        return Err(Error::invalid("at least one RBF feature is required"));
    }
    let spec = rr_pomdp_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = simulate_pomdp_with(&spec, config.steps, &mut rng)?;
    let traj = &run.trajectory;
    let win = WindowSpec::new(config.history_len, config.future_len)?;
    let splits = aligned_indices(traj, win)?;
    let obs = traj.observations();
    let window_at = |kind: WindowKind, t: usize| {
        let (lo, hi) = win.window(kind, t);
        obs[lo..hi].to_vec()
    };
    let mut centers = |kind: WindowKind| -> Vec<Vec<usize>> {
        (0..config.rbf_features).map(|_| window_at(kind, splits[rng.random_range(0..splits.len())])).collect()
    };
    let h_centers = centers(WindowKind::History);
    let t_centers = centers(WindowKind::Future);
    let (hf, tf) = match config.bandwidth {
        Some(bw) => (RbfFeaturizer::new(&h_centers, bw)?, RbfFeaturizer::new(&t_centers, bw)?),
        None => (RbfFeaturizer::with_median_bandwidth(&h_centers)?, RbfFeaturizer::with_median_bandwidth(&t_centers)?),
    };
    let history = append_noise(&window_features(traj, &hf, WindowKind::History, win)?, config.random_features, &mut rng);
    let future = append_noise(&window_features(traj, &tf, WindowKind::Future, win)?, config.random_features, &mut rng);
    let rewards: Vec<f64> = history.indices.iter().map(|&t| traj.rewards()[t + 1]).collect();
    let symbols: Vec<usize> = history.indices.iter().map(|&t| obs[t + 1]).collect();
    let batch = TransitionBatch::from_aligned(&history, &future, &rewards, &symbols)?;
    let cs = build_covariance_set(&batch)?;
    let windows: Vec<Vec<usize>> = adjacent_pairs(&history).iter().map(|&j| window_at(WindowKind::History, history.indices[j])).collect();
    let truth = DVector::from_iterator(windows.len(), windows.iter().map(|w| history_true_value(&spec, w)).collect::<Result<Vec<_>>>()?);
    Ok(RrData { spec, cs, history: batch.history, windows, truth })
}

/// Canonical description of everything that determines [`prepare`]'s output.
pub fn data_key(config: &RrConfig, seed: u64) -> String {
    format!(
        "rrpomdp-data 1;steps={};history_len={};future_len={};rbf={};random={};bandwidth={:?};seed={seed}",
        config.steps, config.history_len, config.future_len, config.rbf_features, config.random_features, config.bandwidth
    )
}

impl RrData {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.cs.save_dir(&dir.join("covariances"))?;
        write_matrix(&dir.join("history.txt"), &self.history)?;
        write_matrix(&dir.join("truth.txt"), &DMatrix::from_column_slice(self.truth.len(), 1, self.truth.as_slice()))?;
        let width = self.windows.first().map_or(0, Vec::len);
        let windows = DMatrix::from_fn(self.windows.len(), width, |r, c| self.windows[r][c] as f64);
        write_matrix(&dir.join("windows.txt"), &windows)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let cs = CovarianceSet::load_dir(&dir.join("covariances"))?;
        let history = read_matrix(&dir.join("history.txt"))?;
        let truth: DMatrix<f64> = read_matrix(&dir.join("truth.txt"))?;
        let windows: DMatrix<f64> = read_matrix(&dir.join("windows.txt"))?;
        let windows: Vec<Vec<usize>> = windows.row_iter().map(|r| r.iter().map(|&x| x as usize).collect()).collect();
        if history.ncols() != truth.nrows() || windows.len() != truth.nrows() || history.nrows() != cs.d_h() {
            return Err(Error::Parse(format!("{}: inconsistent cached data", dir.display())));
        }
        Ok(RrData { spec: rr_pomdp_spec(), cs, history, windows, truth: truth.column(0).into_owned() })
    }
}

fn mse(pred: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    (pred - truth).map(|e| e * e).mean()
}

/// MSE of one learner on prepared data.
///
/// PSTD2 values come from filtering each history window through the
/// correlated TPSR, starting at its initial state.
pub fn learner_mse(data: &RrData, learner: Learner, dim: usize) -> Result<f64> {
    let gamma = data.spec.gamma;
    let pred = match learner {
        Learner::Lstd => lstd(&data.cs, gamma)?.evaluate_columns(&data.history)?,
        Learner::Pstd => {
            let sub = predictive_subspace(&data.cs.th, &data.cs.hh, dim, Scaling::None)?;
            pstd(&data.cs, &sub.v_hat, gamma)?.evaluate_columns(&data.history)?
        }
        Learner::Pstd2 => {
            let sub = predictive_subspace(&data.cs.th, &data.cs.hh, dim, Scaling::None)?;
            let vf = pstd2(&data.cs, &sub.u_hat, gamma)?;
            let model = learn_tpsr_correlated(&data.cs, &sub.u_hat, gamma)?;
            let values = data
                .windows
                .iter()
                .map(|w| vf.evaluate_state(&model.filter_sequence(&model.b1, w)?))
                .collect::<Result<Vec<_>>>()?;
            DVector::from_vec(values)
        }
        Learner::Tpsr => return Err(Error::invalid("the TPSR value function is not a separate benchmark learner")),
    };
    let m = mse(&pred, &data.truth);
    if !m.is_finite() {
        return Err(Error::invalid(format!("{learner} produced non-finite values")));
    }
    Ok(m)
}

pub fn run_seed(config: &RrConfig, seed: u64) -> Result<RrSeedResult> {
    Ok(evaluate_learners(config, seed, &prepare(config, seed)?))
}

/// Runs every configured learner on prepared data; learner errors are recorded, not raised.
pub fn evaluate_learners(config: &RrConfig, seed: u64, data: &RrData) -> RrSeedResult {
    let mse = config
        .learners
        .iter()
        .map(|&l| (l, learner_mse(data, l, config.dim).map_err(|e| e.to_string())))
        .collect();
    RrSeedResult { seed, samples: data.truth.len(), mse, partition_residual: data.cs.partition_residual(), partition_scale: data.cs.partition_scale() }
}
