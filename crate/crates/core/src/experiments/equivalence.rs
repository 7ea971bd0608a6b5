//! Random linear systems on which PSTD and the TPSR Bellman solution coincide.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::compression::{predictive_subspace, Scaling, Subspace};
use crate::covariance::{build_covariance_set, CovarianceSet, TransitionBatch};
use crate::error::Result;
use crate::learners::pstd;
use crate::linalg::spectral_radius;
use crate::tpsr::{learn_tpsr, tpsr_value_function};

fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Samples from a latent linear system of dimension `n`.
///
/// Histories are an orthogonal mix of the latent state and noise; futures and
/// rewards are noise-free linear reads of the state; successors evolve the
/// state by one stable matrix regardless of the (random binary) symbol.
pub fn random_system_dataset(rng: &mut ChaCha8Rng, k: usize, d_h: usize, d_t: usize, n: usize) -> Result<CovarianceSet<f64, usize>> {
    assert!(n >= 1 && n <= d_h && n <= d_t, "latent dimension must fit the feature dimensions");
    let mut dynamics = normal(rng, n, n);
    let rho = spectral_radius(&dynamics)?;
    dynamics *= 0.8 / rho;
    let read_out = normal(rng, d_t, n);
    let eta = normal(rng, 1, n);
    let mix = normal(rng, d_h, d_h).qr().q();
    let s = normal(rng, n, k);
    let s_next = &dynamics * &s;
    let stack = |top: &DMatrix<f64>, noise: DMatrix<f64>| {
        let mut m = DMatrix::zeros(d_h, k);
        m.rows_mut(0, n).copy_from(top);
        m.rows_mut(n, d_h - n).copy_from(&noise);
        &mix * m
    };
    let history = stack(&s, normal(rng, d_h - n, k));
    let next_history = stack(&s_next, normal(rng, d_h - n, k));
    let future = &read_out * &s;
    let next_future = &read_out * &s_next;
    let rewards = (&eta * &s).row(0).transpose();
    let symbols = (0..k).map(|_| rng.random_range(0..2usize)).collect();
    build_covariance_set(&TransitionBatch::new(history, next_history, future, Some(next_future), rewards, symbols)?)
}

#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub subspace: Subspace<f64>,
    pub pstd_w: DVector<f64>,
    pub tpsr_w: DVector<f64>,
    pub max_abs_diff: f64,
}

/// PSTD weights versus TPSR Bellman weights, with the TPSR learned in the
/// state basis that makes both act on `V̂ φ^H`.
pub fn equivalence_gap(cs: &CovarianceSet<f64, usize>, n: usize, gamma: f64) -> Result<EquivalenceReport> {
    let subspace = predictive_subspace(&cs.th, &cs.hh, n, Scaling::None)?;
    let p = pstd(cs, &subspace.v_hat, gamma)?;
    let model = learn_tpsr(cs, &subspace.state_basis()?, gamma)?;
    let t = tpsr_value_function(&model)?;
    let max_abs_diff = (&p.w - &t.w).amax();
    Ok(EquivalenceReport { subspace, pstd_w: p.w, tpsr_w: t.w, max_abs_diff })
}

/// The `count` datasets used by the equivalence check, with `n` cycling through `1..=3`.
pub fn standard_datasets(seed: u64, count: usize) -> Result<Vec<(usize, CovarianceSet<f64, usize>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = i % 3 + 1;
            Ok((n, random_system_dataset(&mut rng, 200, 10, 12, n)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pstd_matches_tpsr_on_random_systems() {
        for (n, cs) in standard_datasets(17, 9).unwrap() {
            let r = equivalence_gap(&cs, n, 0.9).unwrap();
            assert!(r.max_abs_diff <= 1e-8, "n={n}: {}", r.max_abs_diff);
            assert!(cs.partition_residual() <= 1e-13);
        }
    }
}
