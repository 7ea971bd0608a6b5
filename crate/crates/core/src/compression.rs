//! Predictive compression: whitening by the history Cholesky factor, a truncated
//! SVD of the weighted cross-covariance, and the least-squares compression operator.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::linalg::{mean_diagonal, relative_asymmetry, sorted_svd, JITTER_SCHEDULE, PINV_RELATIVE_CUTOFF};
use crate::scalar::Scalar;

/// Relative multiples of the mean diagonal tried in turn until a factorization succeeds.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterPolicy {
    pub schedule: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy { schedule: JITTER_SCHEDULE.to_vec() }
    }
}

/// Lower factor `L` with `L Lᵀ = S + jitter·I`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor<T: Scalar> {
    pub l: DMatrix<T>,
    /// Absolute amount added to the diagonal.
    pub jitter: T,
}

impl<T: Scalar> CholeskyFactor<T> {
    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.l.solve_lower_triangular(b).expect("factor has a nonzero diagonal")
    }

    /// `(L Lᵀ)⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let y = self.solve_lower(b);
        self.l.tr_solve_lower_triangular(&y).expect("factor has a nonzero diagonal")
    }

    /// `B (L Lᵀ)⁻¹` for symmetric `L Lᵀ`.
    pub fn solve_right(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.solve(&b.transpose()).transpose()
    }
}

/// Cholesky factor of a symmetric positive semidefinite matrix, escalating the
/// diagonal jitter until the factor is numerically nonsingular.
pub fn cholesky_lower<T: Scalar>(s: &DMatrix<T>, policy: &JitterPolicy) -> Result<CholeskyFactor<T>> {
    if !s.is_square() || s.nrows() == 0 {
        return Err(Error::mismatch("Cholesky input", "nonempty square matrix", format!("{}x{}", s.nrows(), s.ncols())));
    }
    let asym = relative_asymmetry(s);
    if asym > 1e-8 {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let d = s.nrows();
    let md = mean_diagonal(s);
    let max_jitter = policy.schedule.iter().copied().fold(0.0, f64::max) * md.as_f64();
    if !(md > T::zero()) || !md.is_finite_value() {
        return Err(Error::FactorizationFailed { max_jitter });
    }
    let floor = T::from_usize_lossy(d) * T::eps() * md;
    for &rel in &policy.schedule {
        let jitter = T::lit(rel) * md;
        let mut a = s.clone();
        for i in 0..d {
            a[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(a) {
            let l = ch.l();
            let min_pivot = l.diagonal().iter().fold(T::max_value().expect("bounded type"), |m, &x| m.min(x));
            if min_pivot * min_pivot > floor {
                if rel > 0.0 {
                    log::debug!("Cholesky succeeded with relative jitter {rel:e}");
                }
                return Ok(CholeskyFactor { l, jitter });
            }
        }
    }
    Err(Error::FactorizationFailed { max_jitter })
}

/// Row scaling applied to future features before the SVD.
#[derive(Clone, Copy, Debug)]
pub enum Scaling<'a, T: Scalar> {
    None,
    /// Non-reward rows divided by `sqrt(factor)`.
    ValueDirected { factor: f64, reward_rows: &'a [usize] },
    /// Whitening by the future-feature covariance.
    Cca { tt: &'a DMatrix<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScalingMode {
    None,
    ValueDirected { factor: f64, reward_rows: Vec<usize> },
    Cca,
}

fn value_directed_diagonal<T: Scalar>(d: usize, factor: f64, reward_rows: &[usize]) -> Result<DVector<T>> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("scaling factor must be positive, got {factor}")));
    }
    if let Some(&bad) = reward_rows.iter().find(|&&r| r >= d) {
        return Err(Error::invalid(format!("reward row {bad} out of range for {d} features")));
    }
    let s = T::lit(1.0 / factor.sqrt());
    let mut diag = DVector::from_element(d, s);
    for &r in reward_rows {
        diag[r] = T::one();
    }
    Ok(diag)
}

/// Left multiplier applied to `th`, or `None` for the identity.
fn future_map<T: Scalar>(d_t: usize, scaling: Scaling<'_, T>) -> Result<(Option<DMatrix<T>>, ScalingMode)> {
    match scaling {
        Scaling::None => Ok((None, ScalingMode::None)),
        Scaling::ValueDirected { factor, reward_rows } => {
            let diag = value_directed_diagonal(d_t, factor, reward_rows)?;
            Ok((
                Some(DMatrix::from_diagonal(&diag)),
                ScalingMode::ValueDirected { factor, reward_rows: reward_rows.to_vec() },
            ))
        }
        Scaling::Cca { tt } => {
            if tt.shape() != (d_t, d_t) {
                return Err(Error::mismatch("future covariance", format!("{d_t}x{d_t}"), format!("{}x{}", tt.nrows(), tt.ncols())));
            }
            let lt = cholesky_lower(tt, &JitterPolicy::default())?;
            Ok((Some(lt.solve_lower(&DMatrix::identity(d_t, d_t))), ScalingMode::Cca))
        }
    }
}

fn weighted_matrix<T: Scalar>(scaled_th: &DMatrix<T>, lh: &CholeskyFactor<T>) -> DMatrix<T> {
    // th L⁻ᵀ = (L⁻¹ thᵀ)ᵀ
    lh.solve_lower(&scaled_th.transpose()).transpose()
}

/// Compression pair `(Û, V̂)` with the retained singular values.
#[derive(Clone, Debug)]
pub struct Subspace<T: Scalar> {
    pub u_hat: DMatrix<T>,
    pub v_hat: DMatrix<T>,
    pub singular_values: DVector<T>,
    /// Every singular value of the weighted covariance.
    pub spectrum: Vec<f64>,
    pub scaling: ScalingMode,
    /// Left multiplier `S` applied to future features (`None` means identity).
    pub future_map: Option<DMatrix<T>>,
    pub hh_jitter: T,
}

impl<T: Scalar> Subspace<T> {
    pub fn dim(&self) -> usize {
        self.u_hat.ncols()
    }

    /// `Sᵀ Û`, so that `effective_u()ᵀ th` equals `Ûᵀ S th` on unscaled covariances.
    pub fn effective_u(&self) -> DMatrix<T> {
        match &self.future_map {
            Some(s) => s.transpose() * &self.u_hat,
            None => self.u_hat.clone(),
        }
    }

    /// Up-map whose induced state `Uᵀ th hh⁻¹ φ` is exactly `V̂ φ`.
    pub fn state_basis(&self) -> Result<DMatrix<T>> {
        let base = state_basis(&self.u_hat)?;
        Ok(match &self.future_map {
            Some(s) => s.transpose() * base,
            None => base,
        })
    }
}

/// All singular values of the weighted covariance `S th L_H⁻ᵀ`, nonincreasing.
pub fn weighted_spectrum<T: Scalar>(th: &DMatrix<T>, hh: &DMatrix<T>, scaling: Scaling<'_, T>) -> Result<Vec<f64>> {
    check_shapes(th, hh)?;
    let (map, _) = future_map(th.nrows(), scaling)?;
    let lh = cholesky_lower(hh, &JitterPolicy::default())?;
    let scaled = map.map_or_else(|| th.clone(), |s| s * th);
    let svd = sorted_svd(&weighted_matrix(&scaled, &lh))?;
    Ok(svd.singular_values.iter().map(|s| s.as_f64()).collect())
}

fn check_shapes<T: Scalar>(th: &DMatrix<T>, hh: &DMatrix<T>) -> Result<()> {
    if hh.nrows() != th.ncols() || !hh.is_square() {
        return Err(Error::mismatch("th/hh shapes", format!("hh {0}x{0}", th.ncols()), format!("hh {}x{}", hh.nrows(), hh.ncols())));
    }
    Ok(())
}

/// Truncated SVD of the weighted covariance and the compression operator it induces.
///
/// Each retained left singular vector has its largest-magnitude entry made
/// positive (lowest index on ties).
pub fn predictive_subspace<T: Scalar>(th: &DMatrix<T>, hh: &DMatrix<T>, dim: usize, scaling: Scaling<'_, T>) -> Result<Subspace<T>> {
    check_shapes(th, hh)?;
    let (d_t, d_h) = th.shape();
    if dim == 0 || dim > d_t.min(d_h) {
        return Err(Error::invalid(format!("subspace dimension {dim} outside 1..={}", d_t.min(d_h))));
    }
    let (map, mode) = future_map(d_t, scaling)?;
    let scaled = map.as_ref().map_or_else(|| th.clone(), |s| s * th);
    let lh = cholesky_lower(hh, &JitterPolicy::default())?;
    let svd = sorted_svd(&weighted_matrix(&scaled, &lh))?;
    let spectrum: Vec<f64> = svd.singular_values.iter().map(|s| s.as_f64()).collect();
    let cutoff = spectrum[0] * d_t.max(d_h) as f64 * PINV_RELATIVE_CUTOFF;
    if !(spectrum[dim - 1] > cutoff) {
        return Err(Error::RankDeficient { dim, spectrum });
    }
    let mut u = svd.u.columns(0, dim).into_owned();
    for c in 0..dim {
        let col = u.column(c);
        let mut best = 0;
        for r in 1..col.len() {
            if col[r].abs() > col[best].abs() {
                best = r;
            }
        }
        if col[best] < T::zero() {
            u.column_mut(c).neg_mut();
        }
    }
    let singular_values = svd.singular_values.rows(0, dim).into_owned();
    let u_hat = DMatrix::from_fn(d_t, dim, |r, c| u[(r, c)] * singular_values[c].sqrt());
    let v_hat = compression_operator_with(&u_hat, &scaled, &lh)?;
    Ok(Subspace {
        u_hat,
        v_hat,
        singular_values,
        spectrum,
        scaling: mode,
        future_map: map,
        hh_jitter: lh.jitter,
    })
}

fn gram_inverse<T: Scalar>(u_hat: &DMatrix<T>) -> Result<DMatrix<T>> {
    let g = u_hat.transpose() * u_hat;
    g.try_inverse().ok_or_else(|| Error::Singular("ÛᵀÛ is singular".into()))
}

fn compression_operator_with<T: Scalar>(u_hat: &DMatrix<T>, th: &DMatrix<T>, lh: &CholeskyFactor<T>) -> Result<DMatrix<T>> {
    let proj = gram_inverse(u_hat)? * u_hat.transpose() * th;
    Ok(lh.solve_right(&proj))
}

/// Minimizer over `V` of the per-sample loss `‖φ^T − Û V φ^H‖²`, namely
/// `(ÛᵀÛ)⁻¹ Ûᵀ th hh⁻¹`.
pub fn compression_operator<T: Scalar>(u_hat: &DMatrix<T>, th: &DMatrix<T>, hh: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_shapes(th, hh)?;
    if u_hat.nrows() != th.nrows() {
        return Err(Error::mismatch("Û rows", th.nrows(), u_hat.nrows()));
    }
    let lh = cholesky_lower(hh, &JitterPolicy::default())?;
    compression_operator_with(u_hat, th, &lh)
}

/// `Û (ÛᵀÛ)⁻¹`: the up-map whose induced state coincides with `V̂ φ^H`.
pub fn state_basis<T: Scalar>(u_hat: &DMatrix<T>) -> Result<DMatrix<T>> {
    Ok(u_hat * gram_inverse(u_hat)?)
}

/// Per-sample reduced-rank regression loss `tr(tt) − 2 tr(Vᵀ Ûᵀ th) + tr(ÛᵀÛ V hh Vᵀ)`.
pub fn rrr_loss<T: Scalar>(u_hat: &DMatrix<T>, v: &DMatrix<T>, th: &DMatrix<T>, hh: &DMatrix<T>, tt: &DMatrix<T>) -> T {
    let g = u_hat.transpose() * u_hat;
    tt.trace() - (v.transpose() * u_hat.transpose() * th).trace() * T::lit(2.0) + (g * v * hh * v.transpose()).trace()
}

/// Gradient of [`rrr_loss`] with respect to `V`: `2(ÛᵀÛ V hh − Ûᵀ th)`.
pub fn rrr_gradient<T: Scalar>(u_hat: &DMatrix<T>, v: &DMatrix<T>, th: &DMatrix<T>, hh: &DMatrix<T>) -> DMatrix<T> {
    (u_hat.transpose() * u_hat * v * hh - u_hat.transpose() * th) * T::lit(2.0)
}

/// Divides the variance of every non-reward row by `factor`.
pub fn value_directed_scale<T: Scalar>(futures: &FeatureMatrix<T>, reward_rows: &[usize], factor: f64) -> Result<FeatureMatrix<T>> {
    let diag = value_directed_diagonal::<T>(futures.dim(), factor, reward_rows)?;
    let mut out = futures.clone();
    for (r, s) in diag.iter().enumerate() {
        out.values.row_mut(r).scale_mut(*s);
    }
    Ok(out)
}

/// Writes `index,singular_value,relative` rows for a scree plot.
pub fn write_spectrum_csv<W: Write>(out: W, spectrum: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "singular_value", "relative"])?;
    let top = spectrum.first().copied().unwrap_or(0.0);
    for (i, s) in spectrum.iter().enumerate() {
        let rel = if top > 0.0 { s / top } else { 0.0 };
        w.write_record([(i + 1).to_string(), format!("{s:e}"), format!("{rel:e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{WindowKind, WindowSpec};
    use crate::linalg::max_abs_diff;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cholesky_examples() {
        let p = JitterPolicy::default();
        let l = cholesky_lower(&dmatrix![4.0, 0.0; 0.0, 9.0], &p).unwrap();
        assert_eq!(l.l, dmatrix![2.0, 0.0; 0.0, 3.0]);
        assert_eq!(l.jitter, 0.0);
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_eq!(cholesky_lower(&eye, &p).unwrap().l, eye);
        let s = dmatrix![2.0, 1.0; 1.0, 2.0];
        let l = cholesky_lower(&s, &p).unwrap().l;
        assert!(max_abs_diff(&(&l * l.transpose()), &s) < 1e-14);
        assert!((l[(1, 0)] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((l[(1, 1)] - 1.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_jitter_and_errors() {
        let p = JitterPolicy::default();
        // exactly singular: needs jitter, reported
        let s = dmatrix![1.0, 1.0; 1.0, 1.0];
        let f = cholesky_lower(&s, &p).unwrap();
        assert!(f.jitter > 0.0);
        let back = &f.l * f.l.transpose();
        let target = &s + DMatrix::identity(2, 2) * f.jitter;
        assert!(max_abs_diff(&back, &target) <= 1e-6 * 2.0);
        assert!(matches!(cholesky_lower(&dmatrix![1.0, 2.0; 0.0, 1.0], &p), Err(Error::NotSymmetric { .. })));
        assert!(matches!(cholesky_lower(&dmatrix![-1.0, 0.0; 0.0, -1.0], &p), Err(Error::FactorizationFailed { .. })));
    }

    #[test]
    fn identity_subspace() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let s = predictive_subspace(&eye, &eye, 2, Scaling::None).unwrap();
        assert_eq!(s.singular_values.as_slice(), &[1.0, 1.0]);
        assert!(max_abs_diff(&(s.u_hat.transpose() * &s.u_hat), &eye) < 1e-15);
        assert!(max_abs_diff(&s.v_hat, &eye) < 1e-15);
    }

    #[test]
    fn rank_one_is_rejected() {
        let th = dmatrix![1.0, 2.0; 2.0, 4.0];
        let hh = DMatrix::<f64>::identity(2, 2);
        let spec = weighted_spectrum(&th, &hh, Scaling::None).unwrap();
        assert!(spec[1] <= 1e-12 * spec[0]);
        assert!(matches!(predictive_subspace(&th, &hh, 2, Scaling::None), Err(Error::RankDeficient { dim: 2, .. })));
        assert!(predictive_subspace(&th, &hh, 1, Scaling::None).is_ok());
        assert!(predictive_subspace(&th, &hh, 3, Scaling::None).is_err());
    }

    #[test]
    fn u_hat_columns_are_scaled_orthogonal_with_sign_fix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 5, 40);
        let hh = &x * x.transpose() / 40.0;
        let th = random(&mut rng, 6, 5);
        let s = predictive_subspace(&th, &hh, 3, Scaling::None).unwrap();
        let g = s.u_hat.transpose() * &s.u_hat;
        let d = DMatrix::from_diagonal(&s.singular_values);
        assert!(max_abs_diff(&g, &d) < 1e-8);
        for c in 0..3 {
            let col = s.u_hat.column(c);
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
        }
        assert!(s.singular_values[0] >= s.singular_values[1] && s.singular_values[1] >= s.singular_values[2]);
    }

    #[test]
    fn compression_operator_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 30);
        let hh = &x * x.transpose() / 30.0;
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!(max_abs_diff(&compression_operator(&eye, &hh, &hh).unwrap(), &eye) < 1e-10);

        let q = random(&mut rng, 5, 2).qr().q();
        let w = random(&mut rng, 2, 3);
        let th = &q * &w * &hh;
        assert!(max_abs_diff(&compression_operator(&q, &th, &hh).unwrap(), &w) < 1e-10);
    }

    #[test]
    fn compression_operator_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 200;
        let h = random(&mut rng, 4, k);
        let f = random(&mut rng, 6, 4) * &h + random(&mut rng, 6, k) * 0.3;
        let hh = &h * h.transpose() / k as f64;
        let th = &f * h.transpose() / k as f64;
        let tt = &f * f.transpose() / k as f64;
        let s = predictive_subspace(&th, &hh, 2, Scaling::None).unwrap();
        let grad = rrr_gradient(&s.u_hat, &s.v_hat, &th, &hh);
        assert!(grad.norm() < 1e-10);
        let base = rrr_loss(&s.u_hat, &s.v_hat, &th, &hh, &tt);
        for _ in 0..100 {
            let mut delta = random(&mut rng, 2, 4);
            delta *= 1e-3 / delta.norm();
            assert!(base <= rrr_loss(&s.u_hat, &(&s.v_hat + delta), &th, &hh, &tt));
        }
    }

    #[test]
    fn loss_nonincreasing_in_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = random(&mut rng, 5, 100);
        let f = random(&mut rng, 6, 5) * &h + random(&mut rng, 6, 100) * 0.5;
        let hh = &h * h.transpose() / 100.0;
        let th = &f * h.transpose() / 100.0;
        let tt = &f * f.transpose() / 100.0;
        let mut prev = f64::INFINITY;
        for dim in 1..=5 {
            let s = predictive_subspace(&th, &hh, dim, Scaling::None).unwrap();
            let loss = rrr_loss(&s.u_hat, &s.v_hat, &th, &hh, &tt);
            assert!(loss <= prev + 1e-12);
            prev = loss;
        }
    }

    #[test]
    fn state_basis_reproduces_v_hat() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, 4, 30);
        let hh = &x * x.transpose() / 30.0;
        let th = random(&mut rng, 5, 4);
        let tt = DMatrix::<f64>::identity(5, 5) * 2.0;
        for scaling in [Scaling::None, Scaling::ValueDirected { factor: 100.0, reward_rows: &[0] }, Scaling::Cca { tt: &tt }] {
            let s = predictive_subspace(&th, &hh, 2, scaling).unwrap();
            let ub = s.state_basis().unwrap();
            let lh = cholesky_lower(&hh, &JitterPolicy::default()).unwrap();
            let induced = lh.solve_right(&(ub.transpose() * &th));
            assert!(max_abs_diff(&induced, &s.v_hat) < 1e-10);
        }
    }

    #[test]
    fn value_directed_scaling() {
        let f = FeatureMatrix {
            values: dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0],
            kind: WindowKind::Future,
            spec: WindowSpec::new(1, 1).unwrap(),
            indices: vec![0, 1],
        };
        let s = value_directed_scale(&f, &[1], 100.0).unwrap();
        assert!((s.values - dmatrix![0.1, 0.2; 3.0, 4.0; 0.5, 0.6]).amax() < 1e-15);
        assert_eq!(value_directed_scale(&f, &[], 1.0).unwrap().values, f.values);
        assert_eq!(value_directed_scale(&f, &[], 4.0).unwrap().values, &f.values * 0.5);
        assert!(value_directed_scale(&f, &[], 0.0).is_err());
        assert!(value_directed_scale(&f, &[3], 2.0).is_err());
    }

    #[test]
    fn spectrum_csv() {
        let mut buf = Vec::new();
        write_spectrum_csv(&mut buf, &[2.0, 1.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "2,1e0,5e-1");
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, 6, 50);
        let hh = &x * x.transpose() / 50.0;
        let th = random(&mut rng, 7, 6);
        let a = predictive_subspace(&th, &hh, 3, Scaling::None).unwrap();
        let b = predictive_subspace(&th, &hh, 3, Scaling::None).unwrap();
        assert_eq!(a.u_hat, b.u_hat);
        assert_eq!(a.v_hat, b.v_hat);
    }

    #[test]
    fn works_in_single_precision() {
        let th = dmatrix![1.0f32, 0.2; 0.1, 0.5; 0.3, 0.3];
        let hh = dmatrix![1.0f32, 0.1; 0.1, 1.0];
        let s = predictive_subspace(&th, &hh, 2, Scaling::None).unwrap();
        let g = rrr_gradient(&s.u_hat, &s.v_hat, &th, &hh);
        assert!(g.norm() < 1e-4);
    }
}
