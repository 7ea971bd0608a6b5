//! Dense linear-algebra helpers built on nalgebra's decompositions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative factor in the pseudo-inverse cutoff `max(rows, cols) * sigma_max * 1e-12`.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-12;

/// Multipliers of the mean diagonal tried, in order, when a factorization fails.
pub const JITTER_SCHEDULE: [f64; 6] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4];

/// Thin SVD with singular triples sorted in nonincreasing order.
#[derive(Clone, Debug)]
pub struct SortedSvd<T: Scalar> {
    pub u: DMatrix<T>,
    pub singular_values: DVector<T>,
    pub v_t: DMatrix<T>,
}

pub fn sorted_svd<T: Scalar>(a: &DMatrix<T>) -> Result<SortedSvd<T>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::invalid("SVD of an empty matrix"));
    }
    if a.iter().any(|x| !x.is_finite_value()) {
        return Err(Error::invalid("SVD input has non-finite entries"));
    }
    let svd = a
        .clone()
        .try_svd(true, true, T::eps(), 0)
        .ok_or_else(|| Error::Singular("SVD did not converge".into()))?;
    let (u, v_t) = (svd.u.expect("requested u"), svd.v_t.expect("requested v_t"));
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    // stable sort keeps equal values in their original order
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).expect("finite singular values"));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    let singular_values = DVector::from_iterator(order.len(), order.iter().map(|&i| s[i]));
    Ok(SortedSvd { u, singular_values, v_t })
}

/// Moore-Penrose pseudo-inverse and the numerical rank it used.
#[derive(Clone, Debug)]
pub struct PseudoInverse<T: Scalar> {
    pub matrix: DMatrix<T>,
    pub rank: usize,
    /// True when at least one singular value fell under the cutoff.
    pub truncated: bool,
}

pub fn pseudo_inverse<T: Scalar>(a: &DMatrix<T>) -> Result<PseudoInverse<T>> {
    let svd = sorted_svd(a)?;
    let smax = svd.singular_values[0];
    let cutoff = T::from_usize_lossy(a.nrows().max(a.ncols())) * smax * T::lit(PINV_RELATIVE_CUTOFF);
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let mut matrix = DMatrix::zeros(a.ncols(), a.nrows());
    for i in 0..rank {
        let inv = T::one() / svd.singular_values[i];
        let v = svd.v_t.row(i).transpose();
        let u = svd.u.column(i);
        matrix.ger(inv, &v, &u, T::one());
    }
    Ok(PseudoInverse {
        matrix,
        rank,
        truncated: rank < svd.singular_values.len(),
    })
}

/// Largest absolute difference between `s` and its transpose, relative to its largest entry.
pub fn relative_asymmetry<T: Scalar>(s: &DMatrix<T>) -> f64 {
    let scale = s.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for i in 0..s.nrows() {
        for j in (i + 1)..s.ncols() {
            worst = worst.max((s[(i, j)] - s[(j, i)]).as_f64().abs());
        }
    }
    worst / scale
}

pub fn mean_diagonal<T: Scalar>(s: &DMatrix<T>) -> T {
    let n = s.nrows().min(s.ncols());
    if n == 0 {
        return T::zero();
    }
    s.diagonal().sum() / T::from_usize_lossy(n)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius<T: Scalar>(m: &DMatrix<T>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::mismatch("spectral radius", "square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let eig = m.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.re.as_f64().hypot(z.im.as_f64())).fold(0.0, f64::max))
}

/// Left eigenvector of `m` whose eigenvalue lies closest to `target`.
///
/// The eigenvalue is located through the Schur form; the vector is the right
/// singular vector of `mᵀ - λI` with the smallest singular value.
pub fn left_eigenvector_near<T: Scalar>(m: &DMatrix<T>, target: f64) -> Result<(f64, DVector<T>)> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::invalid("left eigenvector of a non-square or empty matrix"));
    }
    let eig = m.complex_eigenvalues();
    let lambda = eig
        .iter()
        .min_by(|a, b| {
            let da = (a.re.as_f64() - target).hypot(a.im.as_f64());
            let db = (b.re.as_f64() - target).hypot(b.im.as_f64());
            da.partial_cmp(&db).expect("finite eigenvalues")
        })
        .map(|z| z.re)
        .expect("nonempty spectrum");
    let n = m.nrows();
    let shifted = m.transpose() - DMatrix::<T>::identity(n, n) * lambda;
    let svd = sorted_svd(&shifted)?;
    let v = svd.v_t.row(n - 1).transpose();
    Ok((lambda.as_f64(), v))
}

pub fn frobenius<T: Scalar>(m: &DMatrix<T>) -> f64 {
    m.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
}

pub fn max_abs_diff<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (*x - *y).as_f64().abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn svd_is_sorted_and_reconstructs() {
        let a = dmatrix![1.0, 0.0, 0.0; 0.0, 5.0, 0.0; 0.0, 0.0, 3.0; 1.0, 1.0, 1.0];
        let svd = sorted_svd(&a).unwrap();
        let s = &svd.singular_values;
        assert!(s[0] >= s[1] && s[1] >= s[2]);
        let back = &svd.u * DMatrix::from_diagonal(s) * &svd.v_t;
        assert!(max_abs_diff(&back, &a) < 1e-12);
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let a = dmatrix![2.0, 1.0; 1.0, 3.0];
        let p = pseudo_inverse(&a).unwrap();
        assert_eq!(p.rank, 2);
        assert!(!p.truncated);
        let eye = &a * &p.matrix;
        assert!(max_abs_diff(&eye, &DMatrix::identity(2, 2)) < 1e-14);
    }

    #[test]
    fn pinv_truncates_rank_deficient() {
        let a = dmatrix![1.0, 2.0; 2.0, 4.0];
        let p = pseudo_inverse(&a).unwrap();
        assert_eq!(p.rank, 1);
        assert!(p.truncated);
        // Penrose conditions
        let apa = &a * &p.matrix * &a;
        assert!(max_abs_diff(&apa, &a) < 1e-12);
        let pap = &p.matrix * &a * &p.matrix;
        assert!(max_abs_diff(&pap, &p.matrix) < 1e-12);
    }

    #[test]
    fn wide_pinv_is_right_inverse() {
        let a = dmatrix![1.0, 2.0, 0.5; -1.0, 0.0, 3.0];
        let p = pseudo_inverse(&a).unwrap();
        assert!(max_abs_diff(&(&a * &p.matrix), &DMatrix::identity(2, 2)) < 1e-13);
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let a = dmatrix![0.0, -0.5; 0.5, 0.0];
        assert!((spectral_radius(&a).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn left_eigenvector_of_stochastic_matrix() {
        // columns sum to one, so the all-ones row vector is a left eigenvector
        let t = dmatrix![0.9f64, 0.2; 0.1, 0.8];
        let (lambda, v) = left_eigenvector_near(&t, 1.0).unwrap();
        assert!((lambda - 1.0).abs() < 1e-12);
        assert!((v[0] / v[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn asymmetry_measure() {
        let s = dmatrix![1.0, 2.0; 2.0 + 1e-3, 1.0];
        assert!((relative_asymmetry(&s) - 1e-3 / 2.001).abs() < 1e-12);
    }
}
