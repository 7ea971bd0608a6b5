//! Linear value-function learners: LSTD, PSTD and PSTD2.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::covariance::CovarianceSet;
use crate::error::{Error, Result};
use crate::io::Container;
use crate::linalg::pseudo_inverse;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Learner {
    Lstd,
    Pstd,
    Pstd2,
    /// Weights from the Bellman equation of a learned TPSR.
    Tpsr,
}

impl Learner {
    pub fn as_str(&self) -> &'static str {
        match self {
            Learner::Lstd => "lstd",
            Learner::Pstd => "pstd",
            Learner::Pstd2 => "pstd2",
            Learner::Tpsr => "tpsr",
        }
    }
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Learner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstd" => Ok(Learner::Lstd),
            "pstd" => Ok(Learner::Pstd),
            "pstd2" => Ok(Learner::Pstd2),
            "tpsr" => Ok(Learner::Tpsr),
            other => Err(Error::Parse(format!("unknown learner `{other}`"))),
        }
    }
}

/// Weights `w`, plus the compressor that maps history features to the space `w` lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunction<T: Scalar> {
    pub w: DVector<T>,
    /// `V̂` for PSTD, the TPSR state map for TPSR; absent for LSTD and PSTD2.
    pub compressor: Option<DMatrix<T>>,
    pub learner: Learner,
    pub gamma: T,
    /// Set when the system matrix needed a truncated pseudo-inverse.
    pub singular: bool,
}

pub(crate) fn check_gamma<T: Scalar>(gamma: T) -> Result<()> {
    if !(gamma >= T::zero() && gamma < T::one()) {
        return Err(Error::invalid(format!("discount must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// `wᵀ = r A^†` and whether the pseudo-inverse truncated.
fn solve_row<T: Scalar>(r: &RowDVector<T>, a: &DMatrix<T>, learner: Learner) -> Result<(DVector<T>, bool)> {
    if a.nrows() == 0 {
        return Err(Error::invalid("empty system matrix"));
    }
    let p = pseudo_inverse(a)?;
    if p.truncated {
        log::warn!("{learner}: system matrix is numerically singular (rank {} of {}), using the pseudo-inverse", p.rank, a.nrows().min(a.ncols()));
    }
    Ok(((r * &p.matrix).transpose(), p.truncated))
}

fn check_nonempty<T: Scalar, O: Ord>(cs: &CovarianceSet<T, O>) -> Result<()> {
    if cs.k == 0 {
        return Err(Error::EmptySamples("covariance set built from zero samples".into()));
    }
    Ok(())
}

/// `wᵀ = Σ_RH (Σ_HH − γ Σ_H⁺H)⁻¹`, pseudo-inverted when singular.
pub fn lstd<T: Scalar, O: Ord>(cs: &CovarianceSet<T, O>, gamma: T) -> Result<ValueFunction<T>> {
    check_gamma(gamma)?;
    check_nonempty(cs)?;
    let a = &cs.hh - &cs.hplus_h * gamma;
    let (w, singular) = solve_row(&cs.rh, &a, Learner::Lstd)?;
    Ok(ValueFunction { w, compressor: None, learner: Learner::Lstd, gamma, singular })
}

/// `wᵀ = Σ_RH (V̂ Σ_HH − γ V̂ Σ_H⁺H)^†`.
pub fn pstd<T: Scalar, O: Ord>(cs: &CovarianceSet<T, O>, v_hat: &DMatrix<T>, gamma: T) -> Result<ValueFunction<T>> {
    check_gamma(gamma)?;
    check_nonempty(cs)?;
    if v_hat.nrows() == 0 || v_hat.ncols() != cs.d_h() {
        return Err(Error::mismatch("V̂ shape", format!("n x {}", cs.d_h()), format!("{}x{}", v_hat.nrows(), v_hat.ncols())));
    }
    let a = v_hat * (&cs.hh - &cs.hplus_h * gamma);
    let (w, singular) = solve_row(&cs.rh, &a, Learner::Pstd)?;
    Ok(ValueFunction { w, compressor: Some(v_hat.clone()), learner: Learner::Pstd, gamma, singular })
}

/// `wᵀ = Σ_RH (Ûᵀ Σ_TH − γ Σ_o Ûᵀ Σ_ToH)^†`; weights act on TPSR states.
pub fn pstd2<T: Scalar, O: Ord + Copy>(cs: &CovarianceSet<T, O>, u_hat: &DMatrix<T>, gamma: T) -> Result<ValueFunction<T>> {
    check_gamma(gamma)?;
    check_nonempty(cs)?;
    if u_hat.ncols() == 0 || u_hat.nrows() != cs.d_t() {
        return Err(Error::mismatch("Û shape", format!("{} x n", cs.d_t()), format!("{}x{}", u_hat.nrows(), u_hat.ncols())));
    }
    let next = cs.summed_t_o_h()?;
    let a = u_hat.transpose() * (&cs.th - next * gamma);
    let (w, singular) = solve_row(&cs.rh, &a, Learner::Pstd2)?;
    Ok(ValueFunction { w, compressor: None, learner: Learner::Pstd2, gamma, singular })
}

impl<T: Scalar> ValueFunction<T> {
    /// Input dimension expected by [`evaluate`].
    pub fn input_dim(&self) -> usize {
        self.compressor.as_ref().map_or(self.w.len(), |c| c.ncols())
    }

    /// Value of a state vector already in the weight space.
    pub fn evaluate_state(&self, state: &DVector<T>) -> Result<T> {
        if state.len() != self.w.len() {
            return Err(Error::mismatch("state dimension", self.w.len(), state.len()));
        }
        Ok(self.w.dot(state))
    }

    /// Values of many feature columns at once.
    pub fn evaluate_columns(&self, phi: &DMatrix<T>) -> Result<DVector<T>> {
        if phi.nrows() != self.input_dim() {
            return Err(Error::mismatch("feature dimension", self.input_dim(), phi.nrows()));
        }
        let wt = self.w.transpose();
        let row = match &self.compressor {
            Some(c) => (wt * c) * phi,
            None => wt * phi,
        };
        Ok(row.transpose())
    }

    /// Weights folded through the compressor, so that value = `effective_weights()ᵀ φ`.
    pub fn effective_weights(&self) -> DVector<T> {
        match &self.compressor {
            Some(c) => c.transpose() * &self.w,
            None => self.w.clone(),
        }
    }

    pub fn to_container(&self) -> Container<T> {
        let mut c = Container::new("value_function");
        c.text("learner", self.learner.as_str())
            .scalar("gamma", self.gamma)
            .text("singular", if self.singular { "true" } else { "false" })
            .matrix("w", DMatrix::from_column_slice(self.w.len(), 1, self.w.as_slice()));
        if let Some(v) = &self.compressor {
            c.matrix("compressor", v.clone());
        }
        c
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.kind != "value_function" {
            return Err(Error::Parse(format!("expected a value_function container, found `{}`", c.kind)));
        }
        let w = c.get_matrix("w")?;
        if w.ncols() != 1 {
            return Err(Error::Parse("weights must be a column".into()));
        }
        let vf = ValueFunction {
            w: w.column(0).into_owned(),
            compressor: if c.has("compressor") { Some(c.get_matrix("compressor")?.clone()) } else { None },
            learner: c.get_text("learner")?.parse()?,
            gamma: c.get_scalar("gamma")?,
            singular: c.get_text("singular")? == "true",
        };
        if let Some(v) = &vf.compressor {
            if v.nrows() != vf.w.len() {
                return Err(Error::mismatch("compressor rows", vf.w.len(), v.nrows()));
            }
        }
        Ok(vf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// `wᵀ φ` for uncompressed learners, `wᵀ V̂ φ` otherwise.
pub fn evaluate<T: Scalar>(vf: &ValueFunction<T>, phi: &DVector<T>) -> Result<T> {
    if phi.len() != vf.input_dim() {
        return Err(Error::mismatch("feature dimension", vf.input_dim(), phi.len()));
    }
    Ok(match &vf.compressor {
        Some(c) => vf.w.dot(&(c * phi)),
        None => vf.w.dot(phi),
    })
}
