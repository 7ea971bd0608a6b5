//! Exact population covariances of a finite POMDP, by enumeration of
//! observation sequences.

use std::ops::AddAssign;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, RowDVector};

use super::pomdp::{stationary_distribution, PomdpSpec};
use crate::covariance::CovarianceSet;
use crate::error::{Error, Result};
use crate::linalg::sorted_svd;

/// Decodes window index `idx` (most significant symbol first).
pub fn decode_window(idx: usize, z: usize, len: usize) -> Vec<usize> {
    let mut w = vec![0; len];
    let mut rest = idx;
    for slot in w.iter_mut().rev() {
        *slot = rest % z;
        rest /= z;
    }
    w
}

pub fn encode_window(window: &[usize], z: usize) -> usize {
    window.iter().fold(0, |acc, &o| acc * z + o)
}

fn advance(ops: &[DMatrix<f64>], alpha: &DVector<f64>, seq: &[usize]) -> DVector<f64> {
    seq.iter().fold(alpha.clone(), |a, &o| &ops[o] * a)
}

fn check_lengths(lh: usize, lt: usize) -> Result<()> {
    if lh == 0 || lt == 0 {
        return Err(Error::invalid("window lengths must be positive"));
    }
    Ok(())
}

/// Probability of every observation window of length `len` from the stationary start.
pub fn window_probabilities(spec: &PomdpSpec, len: usize) -> Vec<f64> {
    let z = spec.num_observations();
    let ops: Vec<_> = (0..z).map(|o| spec.emit_then_step(o)).collect();
    let pi = stationary_distribution(spec);
    (0..z.pow(len as u32)).map(|i| advance(&ops, &pi, &decode_window(i, z, len)).sum()).collect()
}

/// Covariances of one-hot history and future windows over a stationary run.
///
/// Split `t` pairs history `o_{t−ℓ_H+1..=t}` with future `o_{t+1..=t+ℓ_T}`,
/// reward `R(s_{t+1})` and transition symbol `o_{t+1}`; the next history is the
/// window shifted by one. Window `w` occupies row [`encode_window`]`(w)`.
pub fn one_hot_covariances(spec: &PomdpSpec, lh: usize, lt: usize) -> Result<CovarianceSet<f64, usize>> {
    check_lengths(lh, lt)?;
    let z = spec.num_observations();
    let (dh, dt) = (z.pow(lh as u32), z.pow(lt as u32));
    let ops: Vec<_> = (0..z).map(|o| spec.emit_then_step(o)).collect();
    let pi = stationary_distribution(spec);

    let mut hh = DMatrix::zeros(dh, dh);
    let mut th = DMatrix::zeros(dt, dh);
    let mut tt = DMatrix::zeros(dt, dt);
    let mut rh = RowDVector::zeros(dh);
    let mut hplus_h = DMatrix::zeros(dh, dh);
    let mut h_o_h: BTreeMap<usize, DMatrix<f64>> = (0..z).map(|o| (o, DMatrix::zeros(dh, dh))).collect();
    let mut t_o_h: BTreeMap<usize, DMatrix<f64>> = (0..z).map(|o| (o, DMatrix::zeros(dt, dh))).collect();
    let mut mean = DVector::zeros(dh);

    for hi in 0..dh {
        let h = decode_window(hi, z, lh);
        let alpha = advance(&ops, &pi, &h);
        let ph = alpha.sum();
        hh[(hi, hi)] = ph;
        mean[hi] = ph;
        rh[hi] = spec.r.dot(&alpha);
        for ci in 0..z.pow(lt as u32 + 1) {
            let c = decode_window(ci, z, lt + 1);
            let p = advance(&ops, &alpha, &c).sum();
            let o = c[0];
            let f = encode_window(&c[..lt], z);
            let f_next = encode_window(&c[1..], z);
            let mut h_next = h[1..].to_vec();
            h_next.push(o);
            let hn = encode_window(&h_next, z);
            th[(f, hi)] += p;
            tt[(f, f)] += p;
            hplus_h[(hn, hi)] += p;
            h_o_h.get_mut(&o).expect("symbol")[(hn, hi)] += p;
            t_o_h.get_mut(&o).expect("symbol")[(f_next, hi)] += p;
        }
    }
    Ok(CovarianceSet { hh, th, tt, rh, hplus_h, h_o_h, t_o_h: Some(t_o_h), history_mean: mean, k: 1 })
}

/// Orthonormal basis of the column space of `T`, truncated to `rank` columns.
pub fn transition_range_basis(spec: &PomdpSpec, rank: usize) -> Result<DMatrix<f64>> {
    let svd = sorted_svd(&spec.t)?;
    if rank == 0 || rank > spec.num_states() {
        return Err(Error::invalid(format!("rank {rank} out of range")));
    }
    Ok(svd.u.columns(0, rank).into_owned())
}

/// Covariances when each history is a fresh window of length `ℓ_H` from the
/// stationary start and its successor extends it by one observation.
///
/// History features are `basisᵀ q(h)`, with `q(h)` the predictive belief after
/// `h`; future features are one-hot windows of length `ℓ_T`.
pub fn reset_belief_covariances(spec: &PomdpSpec, lh: usize, lt: usize, basis: &DMatrix<f64>) -> Result<CovarianceSet<f64, usize>> {
    check_lengths(lh, lt)?;
    let m = spec.num_states();
    if basis.nrows() != m {
        return Err(Error::mismatch("belief basis rows", m, basis.nrows()));
    }
    let z = spec.num_observations();
    let d = basis.ncols();
    let dt = z.pow(lt as u32);
    let ops: Vec<_> = (0..z).map(|o| spec.emit_then_step(o)).collect();
    let pi = stationary_distribution(spec);
    let bt = basis.transpose();

    let mut hh = DMatrix::zeros(d, d);
    let mut th = DMatrix::zeros(dt, d);
    let mut tt = DMatrix::zeros(dt, dt);
    let mut rh = RowDVector::zeros(d);
    let mut hplus_h = DMatrix::zeros(d, d);
    let mut h_o_h: BTreeMap<usize, DMatrix<f64>> = (0..z).map(|o| (o, DMatrix::zeros(d, d))).collect();
    let mut t_o_h: BTreeMap<usize, DMatrix<f64>> = (0..z).map(|o| (o, DMatrix::zeros(dt, d))).collect();
    let mut mean = DVector::zeros(d);

    for hi in 0..z.pow(lh as u32) {
        let h = decode_window(hi, z, lh);
        let alpha = advance(&ops, &pi, &h);
        let ph = alpha.sum();
        if ph <= 0.0 {
            continue;
        }
        let q = &alpha / ph;
        let phi = &bt * &q;
        hh.ger(ph, &phi, &phi, 1.0);
        mean.axpy(ph, &phi, 1.0);
        rh += phi.transpose() * (ph * spec.r.dot(&q));
        let next_phi: Vec<Option<DVector<f64>>> = (0..z)
            .map(|o| {
                let a = &ops[o] * &q;
                let po = a.sum();
                (po > 0.0).then(|| &bt * (a / po))
            })
            .collect();
        for ci in 0..z.pow(lt as u32 + 1) {
            let c = decode_window(ci, z, lt + 1);
            let p = ph * advance(&ops, &q, &c).sum();
            if p == 0.0 {
                continue;
            }
            let o = c[0];
            let f = encode_window(&c[..lt], z);
            let f_next = encode_window(&c[1..], z);
            let pn = next_phi[o].as_ref().expect("observed symbol has positive probability");
            th.row_mut(f).add_assign(phi.transpose() * p);
            tt[(f, f)] += p;
            hplus_h.ger(p, pn, &phi, 1.0);
            h_o_h.get_mut(&o).expect("symbol").ger(p, pn, &phi, 1.0);
            t_o_h.get_mut(&o).expect("symbol").row_mut(f_next).add_assign(phi.transpose() * p);
        }
    }
    Ok(CovarianceSet { hh, th, tt, rh, hplus_h, h_o_h, t_o_h: Some(t_o_h), history_mean: mean, k: 1 })
}
