//! Finite POMDPs under a fixed policy, with exact belief filtering.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::Trajectory;
use crate::linalg::sorted_svd;

/// `t[(s', s)] = Pr[s' | s]`, `o[(z, s)] = Pr[z | s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PomdpSpec {
    pub t: DMatrix<f64>,
    pub o: DMatrix<f64>,
    pub r: DVector<f64>,
    pub gamma: f64,
}

fn check_stochastic(name: &str, m: &DMatrix<f64>) -> Result<()> {
    for (c, col) in m.column_iter().enumerate() {
        if col.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::invalid(format!("{name} column {c} has a negative entry")));
        }
        let s: f64 = col.sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("{name} column {c} sums to {s}")));
        }
    }
    Ok(())
}

impl PomdpSpec {
    pub fn new(t: DMatrix<f64>, o: DMatrix<f64>, r: DVector<f64>, gamma: f64) -> Result<Self> {
        let m = t.nrows();
        if m == 0 || !t.is_square() || o.ncols() != m || r.len() != m {
            return Err(Error::invalid("inconsistent POMDP dimensions"));
        }
        check_stochastic("transition", &t)?;
        check_stochastic("observation", &o)?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("discount must lie in [0, 1), got {gamma}")));
        }
        Ok(PomdpSpec { t, o, r, gamma })
    }

    pub fn num_states(&self) -> usize {
        self.t.nrows()
    }

    pub fn num_observations(&self) -> usize {
        self.o.nrows()
    }

    /// `T diag(O_z)`: joint emission of `z` followed by a transition.
    pub fn emit_then_step(&self, z: usize) -> DMatrix<f64> {
        let mut m = self.t.clone();
        for s in 0..self.num_states() {
            m.column_mut(s).scale_mut(self.o[(z, s)]);
        }
        m
    }
}

/// Transition matrix of the reduced-rank benchmark as printed (4 decimals).
pub const RR_POMDP_RAW_T: [[f64; 4]; 4] = [
    [0.7829, 0.1036, 0.0399, 0.0736],
    [0.1036, 0.4237, 0.4262, 0.0465],
    [0.0399, 0.4262, 0.4380, 0.0959],
    [0.0736, 0.0465, 0.0959, 0.7840],
];

pub fn rr_pomdp_raw_transition() -> DMatrix<f64> {
    DMatrix::from_fn(4, 4, |i, j| RR_POMDP_RAW_T[i][j])
}

/// The 4-state, 2-observation benchmark whose transition matrix has rank 3.
///
/// Each column of the printed matrix is renormalized to sum to one.
pub fn rr_pomdp_spec() -> PomdpSpec {
    let mut t = rr_pomdp_raw_transition();
    for mut col in t.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    let o = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    let r = DVector::from_column_slice(&[1.0, 0.0, 1.0, 0.0]);
    PomdpSpec::new(t, o, r, 0.9).expect("benchmark specification is valid")
}

/// Stationary distribution: the null vector of `T − I`, normalized to sum one.
pub fn stationary_distribution(spec: &PomdpSpec) -> DVector<f64> {
    let m = spec.num_states();
    let svd = sorted_svd(&(&spec.t - DMatrix::identity(m, m))).expect("finite transition matrix");
    let v = svd.v_t.row(m - 1).transpose();
    let mut pi = &v / v.sum();
    pi.iter_mut().for_each(|x| *x = x.max(0.0));
    let s = pi.sum();
    pi / s
}

/// `J = R + γ Tᵀ J`, i.e. `J(s) = R(s) + γ Σ_{s'} T[s'|s] J(s')`.
pub fn true_value(spec: &PomdpSpec) -> DVector<f64> {
    let m = spec.num_states();
    let a = DMatrix::identity(m, m) - spec.t.transpose() * spec.gamma;
    a.lu().solve(&spec.r).expect("I − γTᵀ is invertible for γ < 1")
}

/// A simulated run together with its latent states.
#[derive(Clone, Debug)]
pub struct PomdpRun {
    pub trajectory: Trajectory<usize>,
    pub states: Vec<usize>,
}

fn sample_column(m: &DMatrix<f64>, col: usize, u: f64) -> usize {
    let mut acc = 0.0;
    for r in 0..m.nrows() {
        acc += m[(r, col)];
        if u < acc {
            return r;
        }
    }
    // rounding can leave acc just below one
    (0..m.nrows()).rev().find(|&r| m[(r, col)] > 0.0).unwrap_or(m.nrows() - 1)
}

fn sample_vector(p: &DVector<f64>, u: f64) -> usize {
    sample_column(&DMatrix::from_column_slice(p.len(), 1, p.as_slice()), 0, u)
}

/// Runs the chain from its stationary distribution. Step `t` records the
/// observation emitted by `s_t` and the reward `R(s_t)`.
pub fn simulate_pomdp(spec: &PomdpSpec, steps: usize, seed: u64) -> Result<PomdpRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_pomdp_with(spec, steps, &mut rng)
}

pub fn simulate_pomdp_with<R: Rng>(spec: &PomdpSpec, steps: usize, rng: &mut R) -> Result<PomdpRun> {
    if steps == 0 {
        return Err(Error::invalid("simulation needs at least one step"));
    }
    let pi = stationary_distribution(spec);
    let mut s = sample_vector(&pi, rng.random());
    let (mut obs, mut rewards, mut states) = (Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::with_capacity(steps));
    for _ in 0..steps {
        states.push(s);
        obs.push(sample_column(&spec.o, s, rng.random()));
        rewards.push(spec.r[s]);
        s = sample_column(&spec.t, s, rng.random());
    }
    Ok(PomdpRun { trajectory: Trajectory::new(obs, rewards)?, states })
}

/// Conditions a predictive belief on `z` and propagates it one step.
pub fn belief_update(spec: &PomdpSpec, belief: &DVector<f64>, z: usize) -> Result<DVector<f64>> {
    if z >= spec.num_observations() {
        return Err(Error::UnknownObservation(z.to_string()));
    }
    let joint = DVector::from_fn(spec.num_states(), |s, _| belief[s] * spec.o[(z, s)]);
    let p = joint.sum();
    if !(p > 0.0) {
        return Err(Error::ZeroProbability);
    }
    Ok(&spec.t * joint / p)
}

/// `Pr[z | belief]` for every observation `z`.
pub fn observation_probabilities(spec: &PomdpSpec, belief: &DVector<f64>) -> DVector<f64> {
    &spec.o * belief
}

/// Belief over the state that emits the next observation after `window`,
/// starting from the stationary distribution.
pub fn predicted_belief(spec: &PomdpSpec, window: &[usize]) -> Result<DVector<f64>> {
    let mut b = stationary_distribution(spec);
    for &z in window {
        b = belief_update(spec, &b, z)?;
    }
    Ok(b)
}

pub fn belief_value(spec: &PomdpSpec, belief: &DVector<f64>) -> f64 {
    belief.dot(&true_value(spec))
}

/// Expected discounted return from the step after `window`:
/// `E[Σ_i γ^i R(s_{t+1+i}) | window]`.
pub fn history_true_value(spec: &PomdpSpec, window: &[usize]) -> Result<f64> {
    Ok(belief_value(spec, &predicted_belief(spec, window)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_specification() {
        assert_eq!(RR_POMDP_RAW_T[1][1], 0.4237);
        assert_eq!(RR_POMDP_RAW_T[0][0], 0.7829);
        let spec = rr_pomdp_spec();
        for c in 0..4 {
            assert!((spec.t.column(c).sum() - 1.0).abs() < 1e-15);
            for r in 0..4 {
                assert!((spec.t[(r, c)] - RR_POMDP_RAW_T[r][c]).abs() <= 1e-4);
            }
        }
        assert_eq!(spec.r.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(spec.gamma, 0.9);
    }

    #[test]
    fn value_examples() {
        let mut spec = rr_pomdp_spec();
        spec.gamma = 0.0;
        assert_eq!(true_value(&spec), spec.r);
        let uniform = PomdpSpec::new(DMatrix::from_element(3, 3, 1.0 / 3.0), DMatrix::from_element(1, 3, 1.0), DVector::from_element(3, 1.0), 0.75).unwrap();
        assert!(true_value(&uniform).iter().all(|&j| (j - 4.0).abs() < 1e-12));
    }

    #[test]
    fn value_satisfies_bellman() {
        let spec = rr_pomdp_spec();
        let j = true_value(&spec);
        for s in 0..4 {
            let backup = spec.r[s] + spec.gamma * (0..4).map(|n| spec.t[(n, s)] * j[n]).sum::<f64>();
            assert!((backup - j[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_is_fixed_point() {
        let spec = rr_pomdp_spec();
        let pi = stationary_distribution(&spec);
        assert!((&spec.t * &pi - &pi).amax() < 1e-14);
        assert!((pi.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn simulation_is_deterministic_and_consistent() {
        let spec = rr_pomdp_spec();
        let a = simulate_pomdp(&spec, 200, 7).unwrap();
        let b = simulate_pomdp(&spec, 200, 7).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        for (t, &s) in a.states.iter().enumerate() {
            assert_eq!(a.trajectory.observations()[t], s % 2);
            assert_eq!(a.trajectory.rewards()[t], spec.r[s]);
        }
        assert!(simulate_pomdp(&spec, 0, 1).is_err());
    }

    #[test]
    fn history_values() {
        let spec = rr_pomdp_spec();
        let j = true_value(&spec);
        let prior = history_true_value(&spec, &[]).unwrap();
        assert!((prior - stationary_distribution(&spec).dot(&j)).abs() < 1e-15);
        let mut e2 = DVector::zeros(4);
        e2[2] = 1.0;
        assert_eq!(belief_value(&spec, &e2), j[2]);
        let (lo, hi) = (j.min(), j.max());
        for w in 0..32usize {
            let window: Vec<usize> = (0..5).map(|i| (w >> i) & 1).collect();
            let v = history_true_value(&spec, &window).unwrap();
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            let b = predicted_belief(&spec, &window).unwrap();
            assert!(b.iter().all(|&x| x >= 0.0));
            assert!((b.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_probability_window() {
        let o = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let spec = PomdpSpec::new(DMatrix::identity(2, 2), o, DVector::zeros(2), 0.5).unwrap();
        assert!(matches!(history_true_value(&spec, &[1]), Err(Error::ZeroProbability)));
    }
}
