//! Checks against closed-form quantities of the benchmark models.

use std::collections::BTreeMap;

use nalgebra::{dmatrix, DMatrix, DVector, RowDVector};

use crate::compression::{predictive_subspace, weighted_spectrum, Scaling};
use crate::covariance::{build_covariance_set, CovarianceSet, RewardTiming, TransitionBatch};
use crate::envs::analytic::{one_hot_covariances, reset_belief_covariances, transition_range_basis};
use crate::envs::pomdp::{belief_update, observation_probabilities, rr_pomdp_spec, simulate_pomdp, stationary_distribution, true_value, PomdpSpec};
use crate::error::Result;
use crate::features::{window_features, OneHotFeaturizer, WindowKind, WindowSpec};
use crate::learners::lstd;
use crate::linalg::sorted_svd;
use crate::tpsr::{filter, learn_tpsr, learn_tpsr_correlated, TpsrModel};

/// Singular values of the exact future/history covariance of the benchmark
/// POMDP with one-hot windows, together with the whitened spectrum.
#[derive(Clone, Debug)]
pub struct RankSpectrum {
    pub singular_values: Vec<f64>,
    pub weighted: Vec<f64>,
}

impl RankSpectrum {
    /// `σ_{i+1} / σ_1`.
    pub fn ratio(&self, i: usize) -> f64 {
        self.singular_values[i] / self.singular_values[0]
    }
}

pub fn rank_spectrum(history_len: usize, future_len: usize) -> Result<RankSpectrum> {
    let cs = one_hot_covariances(&rr_pomdp_spec(), history_len, future_len)?;
    let svd = sorted_svd(&cs.th)?;
    let weighted = weighted_spectrum(&cs.th, &cs.hh, Scaling::None)?;
    Ok(RankSpectrum { singular_values: svd.singular_values.iter().copied().collect(), weighted })
}

/// Largest gap between a TPSR's one-step predictions and the exact belief
/// filter along a simulated run, for both TPSR constructions.
#[derive(Clone, Copy, Debug)]
pub struct FilterAgreement {
    /// Model learned from reset-belief covariances.
    pub belief_features: f64,
    /// Correlated model learned from sliding one-hot windows.
    pub one_hot_windows: f64,
}

/// Exact TPSRs of rank `dim` for the benchmark POMDP.
pub fn analytic_tpsrs(dim: usize, history_len: usize, future_len: usize) -> Result<(TpsrModel<f64, usize>, TpsrModel<f64, usize>)> {
    let spec = rr_pomdp_spec();
    let basis = transition_range_basis(&spec, dim)?;
    let reset = reset_belief_covariances(&spec, history_len, future_len, &basis)?;
    let sub = predictive_subspace(&reset.th, &reset.hh, dim, Scaling::None)?;
    let belief_model = learn_tpsr(&reset, &sub.u_hat, spec.gamma)?;
    let windows = one_hot_covariances(&spec, history_len, future_len)?;
    let sub = predictive_subspace(&windows.th, &windows.hh, dim, Scaling::None)?;
    let window_model = learn_tpsr_correlated(&windows, &sub.u_hat, spec.gamma)?;
    Ok((belief_model, window_model))
}

fn max_prediction_gap(spec: &PomdpSpec, model: &TpsrModel<f64, usize>, obs: &[usize]) -> Result<f64> {
    let mut b = model.b1.clone();
    let mut q = stationary_distribution(spec);
    let mut gap: f64 = 0.0;
    for &o in obs {
        let exact = observation_probabilities(spec, &q);
        for z in 0..spec.num_observations() {
            gap = gap.max((model.predict(&b, z)? - exact[z]).abs());
        }
        b = filter(model, &b, o)?;
        q = belief_update(spec, &q, o)?;
    }
    Ok(gap)
}

pub fn filter_agreement(models: &(TpsrModel<f64, usize>, TpsrModel<f64, usize>), steps: usize, seed: u64) -> Result<FilterAgreement> {
    let spec = rr_pomdp_spec();
    let run = simulate_pomdp(&spec, steps, seed)?;
    let obs = run.trajectory.observations();
    Ok(FilterAgreement { belief_features: max_prediction_gap(&spec, &models.0, obs)?, one_hot_windows: max_prediction_gap(&spec, &models.1, obs)? })
}

/// Fully observable four-state chain used for the LSTD consistency checks.
pub fn chain_spec() -> PomdpSpec {
    let t = dmatrix![0.5, 0.2, 0.0, 0.3; 0.5, 0.3, 0.4, 0.0; 0.0, 0.5, 0.2, 0.3; 0.0, 0.0, 0.4, 0.4];
    PomdpSpec::new(t, DMatrix::identity(4, 4), DVector::from_column_slice(&[1.0, 0.0, 2.0, -1.0]), 0.9).expect("valid chain")
}

/// Exact covariances of the chain with one-hot state features.
pub fn chain_covariances(spec: &PomdpSpec) -> CovarianceSet<f64, usize> {
    let m = spec.num_states();
    let pi = stationary_distribution(spec);
    let hh = DMatrix::from_diagonal(&pi);
    let hplus_h = &spec.t * &hh;
    let rh = RowDVector::from_iterator(m, (0..m).map(|s| pi[s] * spec.r[s]));
    // the next observation is the next state, so each symbol selects one row
    let h_o_h: BTreeMap<usize, DMatrix<f64>> = (0..m)
        .map(|o| (o, DMatrix::from_fn(m, m, |r, c| if r == o { hplus_h[(r, c)] } else { 0.0 })))
        .collect();
    CovarianceSet { th: hplus_h.clone(), tt: hh.clone(), hh, rh, hplus_h, h_o_h, t_o_h: None, history_mean: pi, k: 1 }
}

/// `max |w − J|` for LSTD on the exact chain covariances.
pub fn chain_analytic_error() -> Result<f64> {
    let spec = chain_spec();
    let vf = lstd(&chain_covariances(&spec), spec.gamma)?;
    Ok((vf.w - true_value(&spec)).amax())
}

/// Covariances of one sampled chain run with one-hot state features.
pub fn chain_sampled_covariances(steps: usize, seed: u64) -> Result<CovarianceSet<f64, usize>> {
    let spec = chain_spec();
    let run = simulate_pomdp(&spec, steps, seed)?;
    let traj = &run.trajectory;
    let win = WindowSpec::new(1, 1)?;
    let f = OneHotFeaturizer::new(spec.num_states(), 1)?;
    let history = window_features(traj, &f, WindowKind::History, win)?;
    let future = window_features(traj, &f, WindowKind::Future, win)?;
    build_covariance_set(&TransitionBatch::from_trajectory(traj, &history, &future, RewardTiming::AtSplit)?)
}

/// `max |w − J|` for LSTD on `steps` sampled transitions.
pub fn chain_sampled_error(steps: usize, seed: u64) -> Result<f64> {
    let spec = chain_spec();
    let vf = lstd(&chain_sampled_covariances(steps, seed)?, spec.gamma)?;
    Ok((vf.w - true_value(&spec)).amax())
}
