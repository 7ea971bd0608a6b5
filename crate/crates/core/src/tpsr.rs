//! Transformed predictive state representations learned from covariances.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::compression::{cholesky_lower, JitterPolicy};
use crate::covariance::CovarianceSet;
use crate::error::{Error, Result};
use crate::io::Container;
use crate::learners::{check_gamma, Learner, ValueFunction};
use crate::linalg::{left_eigenvector_near, pseudo_inverse, spectral_radius};
use crate::scalar::Scalar;

/// Normalizers with magnitude below this abort filtering.
pub const FILTER_NORMALIZER_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TpsrModel<T: Scalar, O: Ord> {
    pub b1: DVector<T>,
    pub b_inf: DVector<T>,
    pub ops: BTreeMap<O, DMatrix<T>>,
    pub b_eta: DVector<T>,
    pub gamma: T,
    /// Maps history features to states: `Uᵀ Σ_TH Σ_HH⁻¹`.
    pub state_map: DMatrix<T>,
    /// Eigenvalue of `Σ_o B_o` that `b_inf` belongs to.
    pub normalizer_eigenvalue: f64,
}

struct Common<T: Scalar> {
    a_pinv: DMatrix<T>,
    state_map: DMatrix<T>,
}

fn common<T: Scalar, O: Ord>(cs: &CovarianceSet<T, O>, u: &DMatrix<T>, gamma: T) -> Result<Common<T>> {
    check_gamma(gamma)?;
    if u.nrows() != cs.d_t() || u.ncols() == 0 {
        return Err(Error::mismatch("TPSR up-map shape", format!("{} x n", cs.d_t()), format!("{}x{}", u.nrows(), u.ncols())));
    }
    let n = u.ncols();
    let a = u.transpose() * &cs.th;
    let p = pseudo_inverse(&a)?;
    if p.rank < n {
        let svd = crate::linalg::sorted_svd(&a)?;
        return Err(Error::RankDeficient { dim: n, spectrum: svd.singular_values.iter().map(|s| s.as_f64()).collect() });
    }
    let lh = cholesky_lower(&cs.hh, &JitterPolicy::default())?;
    let state_map = lh.solve_right(&a);
    Ok(Common { a_pinv: p.matrix, state_map })
}

fn assemble<T: Scalar, O: Ord + Copy>(cs: &CovarianceSet<T, O>, c: Common<T>, ops: BTreeMap<O, DMatrix<T>>, gamma: T) -> Result<TpsrModel<T, O>> {
    let n = c.state_map.nrows();
    let b_eta = (&cs.rh * &c.a_pinv).transpose();
    let b1 = &c.state_map * &cs.history_mean;
    let mut sum = DMatrix::zeros(n, n);
    for b in ops.values() {
        sum += b;
    }
    let (lambda, v) = left_eigenvector_near(&sum, 1.0)?;
    let scale = v.dot(&b1);
    if scale.abs().as_f64() < FILTER_NORMALIZER_FLOOR {
        return Err(Error::Singular("normalizer is orthogonal to the initial state".into()));
    }
    let b_inf = v / scale;
    Ok(TpsrModel { b1, b_inf, ops, b_eta, gamma, state_map: c.state_map, normalizer_eigenvalue: lambda })
}

/// `B_o = Uᵀ Σ_TH Σ_HH⁻¹ Σ_HoH (Uᵀ Σ_TH)^†`.
pub fn learn_tpsr<T: Scalar, O: Ord + Copy>(cs: &CovarianceSet<T, O>, u: &DMatrix<T>, gamma: T) -> Result<TpsrModel<T, O>> {
    let c = common(cs, u, gamma)?;
    let ops = cs.h_o_h.iter().map(|(o, m)| (*o, &c.state_map * m * &c.a_pinv)).collect();
    assemble(cs, c, ops, gamma)
}

/// `B_o = Uᵀ Σ_ToH (Uᵀ Σ_TH)^†`, for histories only correlated with state.
pub fn learn_tpsr_correlated<T: Scalar, O: Ord + Copy>(cs: &CovarianceSet<T, O>, u: &DMatrix<T>, gamma: T) -> Result<TpsrModel<T, O>> {
    let map = cs.t_o_h.as_ref().ok_or(Error::MissingCovariance("t_o_h"))?;
    let c = common(cs, u, gamma)?;
    let ut = u.transpose();
    let ops = map.iter().map(|(o, m)| (*o, &ut * m * &c.a_pinv)).collect();
    assemble(cs, c, ops, gamma)
}

impl<T: Scalar, O: Ord + Copy + Display> TpsrModel<T, O> {
    pub fn dim(&self) -> usize {
        self.b1.len()
    }

    fn op(&self, o: O) -> Result<&DMatrix<T>> {
        self.ops.get(&o).ok_or_else(|| Error::UnknownObservation(o.to_string()))
    }

    /// State of a history with features `phi`.
    pub fn state(&self, phi: &DVector<T>) -> Result<DVector<T>> {
        if phi.len() != self.state_map.ncols() {
            return Err(Error::mismatch("history feature dimension", self.state_map.ncols(), phi.len()));
        }
        Ok(&self.state_map * phi)
    }

    /// `Pr[o | b] = b_infᵀ B_o b`.
    pub fn predict(&self, b: &DVector<T>, o: O) -> Result<T> {
        Ok(self.b_inf.dot(&(self.op(o)? * b)))
    }

    /// `b_infᵀ B_{o_k} ⋯ B_{o_1} b`.
    pub fn sequence_probability(&self, b: &DVector<T>, seq: &[O]) -> Result<T> {
        let mut x = b.clone();
        for &o in seq {
            x = self.op(o)? * x;
        }
        Ok(self.b_inf.dot(&x))
    }

    pub fn filter_sequence(&self, b: &DVector<T>, seq: &[O]) -> Result<DVector<T>> {
        let mut x = b.clone();
        for &o in seq {
            x = filter(self, &x, o)?;
        }
        Ok(x)
    }
}

/// Bayes update `b' = B_o b / (b_infᵀ B_o b)`.
pub fn filter<T: Scalar, O: Ord + Copy + Display>(model: &TpsrModel<T, O>, b: &DVector<T>, o: O) -> Result<DVector<T>> {
    if b.len() != model.dim() {
        return Err(Error::mismatch("TPSR state dimension", model.dim(), b.len()));
    }
    let next = model.op(o)? * b;
    let z = model.b_inf.dot(&next);
    if !(z.abs().as_f64() >= FILTER_NORMALIZER_FLOOR) {
        return Err(Error::FilterDivergence { normalizer: z.as_f64() });
    }
    Ok(next / z)
}

/// Solves `wᵀ (I − γ Σ_o B_o) = b_ηᵀ`.
pub fn tpsr_value_function<T: Scalar, O: Ord>(model: &TpsrModel<T, O>) -> Result<ValueFunction<T>> {
    let n = model.b1.len();
    let mut sum = DMatrix::zeros(n, n);
    for b in model.ops.values() {
        sum += b;
    }
    let scaled = sum * model.gamma;
    let rho = spectral_radius(&scaled)?;
    if !(rho < 1.0) {
        return Err(Error::DivergentValue { spectral_radius: rho });
    }
    let a = (DMatrix::identity(n, n) - scaled).transpose();
    let w = a.lu().solve(&model.b_eta).ok_or_else(|| Error::Singular("TPSR Bellman system".into()))?;
    Ok(ValueFunction { w, compressor: Some(model.state_map.clone()), learner: Learner::Tpsr, gamma: model.gamma, singular: false })
}

impl<T: Scalar, O: Ord + Copy + Display + FromStr> TpsrModel<T, O> {
    pub fn to_container(&self) -> Container<T> {
        let col = |v: &DVector<T>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let mut c = Container::new("tpsr");
        c.scalar("gamma", self.gamma)
            .scalar("normalizer_eigenvalue", T::lit(self.normalizer_eigenvalue))
            .matrix("b1", col(&self.b1))
            .matrix("b_inf", col(&self.b_inf))
            .matrix("b_eta", col(&self.b_eta))
            .matrix("state_map", self.state_map.clone());
        for (o, m) in &self.ops {
            c.matrix(&format!("op.{o}"), m.clone());
        }
        c
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.kind != "tpsr" {
            return Err(Error::Parse(format!("expected a tpsr container, found `{}`", c.kind)));
        }
        let col = |key: &str| -> Result<DVector<T>> { Ok(c.get_matrix(key)?.column(0).into_owned()) };
        let mut ops = BTreeMap::new();
        for (sym, m) in c.matrices_with_prefix("op.") {
            let o = sym.parse::<O>().map_err(|_| Error::Parse(format!("bad observation `{sym}`")))?;
            ops.insert(o, m.clone());
        }
        Ok(TpsrModel {
            b1: col("b1")?,
            b_inf: col("b_inf")?,
            ops,
            b_eta: col("b_eta")?,
            gamma: c.get_scalar("gamma")?,
            state_map: c.get_matrix("state_map")?.clone(),
            normalizer_eigenvalue: c.get_scalar("normalizer_eigenvalue")?.as_f64(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{build_covariance_set, TransitionBatch};
    use nalgebra::{dmatrix, dvector, RowDVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(b: f64, b_eta: f64, gamma: f64) -> TpsrModel<f64, u8> {
        let mut ops = BTreeMap::new();
        ops.insert(0u8, dmatrix![b]);
        TpsrModel {
            b1: dvector![1.0],
            b_inf: dvector![1.0],
            ops,
            b_eta: dvector![b_eta],
            gamma,
            state_map: dmatrix![1.0],
            normalizer_eigenvalue: b,
        }
    }

    #[test]
    fn scalar_filter_and_value() {
        let m = scalar_model(0.5, 1.0, 0.9);
        assert_eq!(filter(&m, &dvector![1.0], 0).unwrap(), dvector![1.0]);
        let vf = tpsr_value_function(&m).unwrap();
        assert!((vf.w[0] - 1.0 / 0.55).abs() < 1e-12);
        let myopic = scalar_model(0.5, 1.7, 0.0);
        assert_eq!(tpsr_value_function(&myopic).unwrap().w[0], 1.7);
        assert!(matches!(filter(&m, &dvector![1.0], 3), Err(Error::UnknownObservation(_))));
    }

    #[test]
    fn divergence_errors() {
        let m = scalar_model(1.2, 1.0, 0.9);
        assert!(matches!(tpsr_value_function(&m), Err(Error::DivergentValue { .. })));
        let z = scalar_model(0.0, 1.0, 0.9);
        assert!(matches!(filter(&z, &dvector![1.0], 0), Err(Error::FilterDivergence { .. })));
    }

    #[test]
    fn scalar_system_from_analytic_covariances() {
        // φ = 1 always, next feature has expectation 0.5 under the single symbol
        let mut h_o_h = BTreeMap::new();
        h_o_h.insert(0u8, dmatrix![0.5]);
        let cs = CovarianceSet {
            hh: dmatrix![1.0],
            th: dmatrix![1.0],
            tt: dmatrix![1.0],
            rh: RowDVector::from_element(1, 1.0),
            hplus_h: dmatrix![0.5],
            h_o_h,
            t_o_h: None,
            history_mean: dvector![1.0],
            k: 1,
        };
        let m = learn_tpsr::<f64, u8>(&cs, &dmatrix![1.0], 0.9).unwrap();
        assert!((m.ops[&0][(0, 0)] - 0.5).abs() < 1e-8);
        assert!(learn_tpsr_correlated(&cs, &dmatrix![1.0], 0.9).is_err());
    }

    fn random_cs(seed: u64) -> CovarianceSet<f64, usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 300;
        let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(0.0..1.0));
        let h = m(5, k);
        let hn = m(5, k) * 0.8;
        let f = m(6, k);
        let fnext = m(6, k) * 0.8;
        let r = m(1, k);
        let symbols = (0..k).map(|t| (t * 7 % 3) % 2).collect();
        build_covariance_set(&TransitionBatch::new(h, hn, f, Some(fnext), r.row(0).transpose(), symbols).unwrap()).unwrap()
    }

    #[test]
    fn normalization_and_similarity_invariance() {
        let cs = random_cs(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let s = DMatrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { rng.random_range(-0.5..0.5) });
        for correlated in [false, true] {
            let learn = |u: &DMatrix<f64>| if correlated { learn_tpsr_correlated(&cs, u, 0.9) } else { learn_tpsr(&cs, u, 0.9) };
            let a = learn(&u).unwrap();
            let b = learn(&(&u * &s)).unwrap();
            assert!((a.b_inf.dot(&a.b1) - 1.0).abs() < 1e-10);
            let seq = [0usize, 1, 1, 0, 1];
            let pa = a.sequence_probability(&a.b1, &seq).unwrap();
            let pb = b.sequence_probability(&b.b1, &seq).unwrap();
            assert!((pa - pb).abs() < 1e-8, "{pa} vs {pb}");
            let mut x = a.b1.clone();
            for &o in &seq {
                x = filter(&a, &x, o).unwrap();
                assert!((a.b_inf.dot(&x) - 1.0).abs() < 1e-10);
            }
            let phi = cs.history_mean.clone() * 1.1;
            let va = tpsr_value_function(&a).unwrap();
            let vb = tpsr_value_function(&b).unwrap();
            let xa = va.evaluate_state(&a.state(&phi).unwrap()).unwrap();
            let xb = vb.evaluate_state(&b.state(&phi).unwrap()).unwrap();
            assert!((xa - xb).abs() < 1e-8);
        }
    }

    #[test]
    fn myopic_correlated_value_is_reward_parameter() {
        let cs = random_cs(3);
        let u = DMatrix::from_fn(6, 2, |i, j| ((i * 5 + j * 3) % 7) as f64 / 7.0);
        let m = learn_tpsr_correlated(&cs, &u, 0.0).unwrap();
        assert_eq!(tpsr_value_function(&m).unwrap().w, m.b_eta);
    }

    #[test]
    fn rank_deficient_up_map_is_rejected() {
        let cs = random_cs(4);
        let u = DMatrix::from_fn(6, 2, |i, _| i as f64);
        assert!(matches!(learn_tpsr(&cs, &u, 0.9), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn container_round_trip() {
        let cs = random_cs(5);
        let u = DMatrix::from_fn(6, 2, |i, j| ((i * 5 + j * 3) % 7) as f64 / 7.0);
        let m = learn_tpsr(&cs, &u, 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        m.save(&p).unwrap();
        assert_eq!(TpsrModel::<f64, usize>::load(&p).unwrap(), m);
    }
}
