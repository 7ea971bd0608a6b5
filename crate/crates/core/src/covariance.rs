//! Empirical covariances of history features, future features and rewards.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Trajectory};
use crate::io::{read_matrix, write_matrix};
use crate::linalg::relative_asymmetry;
use crate::scalar::Scalar;

/// `(1/k) X Yᵀ` for matrices with one column per sample.
pub fn cov<T: Scalar>(x: &DMatrix<T>, y: &DMatrix<T>) -> Result<DMatrix<T>> {
    if x.ncols() != y.ncols() {
        return Err(Error::mismatch("covariance sample count", x.ncols(), y.ncols()));
    }
    let k = x.ncols();
    if k == 0 {
        return Err(Error::EmptySamples("covariance of zero samples".into()));
    }
    Ok(x * y.transpose() / T::from_usize_lossy(k))
}

/// Column pairs `(j, j+1)` of a feature matrix whose split points are adjacent.
///
/// Adjacent retained splits always share an episode because their windows overlap.
pub fn adjacent_pairs<T: Scalar>(h: &FeatureMatrix<T>) -> Vec<usize> {
    h.indices.windows(2).enumerate().filter(|(_, w)| w[1] == w[0] + 1).map(|(j, _)| j).collect()
}

fn gather<T: Scalar>(m: &DMatrix<T>, cols: impl ExactSizeIterator<Item = usize>) -> DMatrix<T> {
    let cols: Vec<usize> = cols.collect();
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}

/// `(1/k) Σ φ_{t+1} φ_tᵀ` over adjacent split pairs inside one episode.
pub fn shifted_cov<T: Scalar>(h: &FeatureMatrix<T>) -> Result<DMatrix<T>> {
    let pairs = adjacent_pairs(h);
    if pairs.is_empty() {
        return Err(Error::EmptySamples("no adjacent split pairs for the shifted covariance".into()));
    }
    let cur = gather(&h.values, pairs.iter().copied());
    let next = gather(&h.values, pairs.iter().map(|j| j + 1));
    cov(&next, &cur)
}

/// `(1/k) Σ_t a_t 𝕀[o_t = o] h_tᵀ` for every symbol, sharing the divisor `k`.
pub fn indicator_cov<T: Scalar, O: Ord + Copy>(a: &DMatrix<T>, h: &DMatrix<T>, symbols: &[O]) -> Result<BTreeMap<O, DMatrix<T>>> {
    let k = h.ncols();
    if a.ncols() != k {
        return Err(Error::mismatch("indicator covariance sample count", k, a.ncols()));
    }
    if symbols.len() != k {
        return Err(Error::mismatch("indicator covariance symbol count", k, symbols.len()));
    }
    if k == 0 {
        return Err(Error::EmptySamples("indicator covariance of zero samples".into()));
    }
    let scale = T::one() / T::from_usize_lossy(k);
    let mut out: BTreeMap<O, DMatrix<T>> = BTreeMap::new();
    for (t, o) in symbols.iter().enumerate() {
        let acc = out.entry(*o).or_insert_with(|| DMatrix::zeros(a.nrows(), h.nrows()));
        acc.ger(scale, &a.column(t), &h.column(t), T::one());
    }
    Ok(out)
}

/// One column per transition `t → t+1`.
///
/// `next_history` is zero for terminal transitions. `symbols[t]` is the
/// observation that moves history `t` to history `t+1`.
#[derive(Clone, Debug)]
pub struct TransitionBatch<T: Scalar, O> {
    pub history: DMatrix<T>,
    pub next_history: DMatrix<T>,
    pub future: DMatrix<T>,
    pub next_future: Option<DMatrix<T>>,
    pub rewards: DVector<T>,
    pub symbols: Vec<O>,
}

/// Which reward a split point is paired with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardTiming {
    /// The reward recorded at the split step itself.
    AtSplit,
    /// The reward of the first future step.
    Next,
}

impl<T: Scalar, O: Copy> TransitionBatch<T, O> {
    pub fn new(
        history: DMatrix<T>,
        next_history: DMatrix<T>,
        future: DMatrix<T>,
        next_future: Option<DMatrix<T>>,
        rewards: DVector<T>,
        symbols: Vec<O>,
    ) -> Result<Self> {
        let k = history.ncols();
        if k == 0 {
            return Err(Error::EmptySamples("transition batch without samples".into()));
        }
        if next_history.shape() != history.shape() {
            return Err(Error::mismatch("next history shape", format!("{:?}", history.shape()), format!("{:?}", next_history.shape())));
        }
        if future.ncols() != k {
            return Err(Error::mismatch("future sample count", k, future.ncols()));
        }
        if let Some(nf) = &next_future {
            if nf.shape() != future.shape() {
                return Err(Error::mismatch("next future shape", format!("{:?}", future.shape()), format!("{:?}", nf.shape())));
            }
        }
        if rewards.len() != k {
            return Err(Error::mismatch("reward count", k, rewards.len()));
        }
        if symbols.len() != k {
            return Err(Error::mismatch("symbol count", k, symbols.len()));
        }
        Ok(TransitionBatch { history, next_history, future, next_future, rewards, symbols })
    }

    /// Builds transitions from aligned feature matrices. `rewards[j]` and
    /// `symbols[j]` belong to column `j`; only columns with an adjacent successor are kept.
    pub fn from_aligned(history: &FeatureMatrix<T>, future: &FeatureMatrix<T>, rewards: &[T], symbols: &[O]) -> Result<Self> {
        if history.indices != future.indices {
            return Err(Error::invalid("history and future features are not aligned"));
        }
        let n = history.len();
        if rewards.len() != n || symbols.len() != n {
            return Err(Error::mismatch("per-split rewards/symbols", n, format!("{}/{}", rewards.len(), symbols.len())));
        }
        let pairs = adjacent_pairs(history);
        if pairs.is_empty() {
            return Err(Error::EmptySamples("no adjacent split pairs".into()));
        }
        Self::new(
            gather(&history.values, pairs.iter().copied()),
            gather(&history.values, pairs.iter().map(|j| j + 1)),
            gather(&future.values, pairs.iter().copied()),
            Some(gather(&future.values, pairs.iter().map(|j| j + 1))),
            DVector::from_iterator(pairs.len(), pairs.iter().map(|&j| rewards[j])),
            pairs.iter().map(|&j| symbols[j]).collect(),
        )
    }

    /// Pairs each split `t` with symbol `obs[t+1]` and the reward selected by `timing`.
    pub fn from_trajectory(traj: &Trajectory<O, T>, history: &FeatureMatrix<T>, future: &FeatureMatrix<T>, timing: RewardTiming) -> Result<Self> {
        let obs = traj.observations();
        let r = traj.rewards();
        let symbols: Vec<O> = history.indices.iter().map(|&t| obs[t + 1]).collect();
        let rewards: Vec<T> = history
            .indices
            .iter()
            .map(|&t| match timing {
                RewardTiming::AtSplit => r[t],
                RewardTiming::Next => r[t + 1],
            })
            .collect();
        Self::from_aligned(history, future, &rewards, &symbols)
    }

    pub fn len(&self) -> usize {
        self.history.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.history.ncols() == 0
    }
}

/// Empirical covariances shared by every learner, all over the same `k` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceSet<T: Scalar, O: Ord> {
    pub hh: DMatrix<T>,
    pub th: DMatrix<T>,
    pub tt: DMatrix<T>,
    pub rh: RowDVector<T>,
    pub hplus_h: DMatrix<T>,
    pub h_o_h: BTreeMap<O, DMatrix<T>>,
    pub t_o_h: Option<BTreeMap<O, DMatrix<T>>>,
    pub history_mean: DVector<T>,
    pub k: usize,
}

pub fn build_covariance_set<T: Scalar, O: Ord + Copy>(batch: &TransitionBatch<T, O>) -> Result<CovarianceSet<T, O>> {
    let k = batch.len();
    let hh = cov(&batch.history, &batch.history)?;
    let th = cov(&batch.future, &batch.history)?;
    let tt = cov(&batch.future, &batch.future)?;
    let rh = cov(&DMatrix::from_row_slice(1, k, batch.rewards.as_slice()), &batch.history)?.row(0).into_owned();
    let hplus_h = cov(&batch.next_history, &batch.history)?;
    let h_o_h = indicator_cov(&batch.next_history, &batch.history, &batch.symbols)?;
    let t_o_h = match &batch.next_future {
        Some(nf) => Some(indicator_cov(nf, &batch.history, &batch.symbols)?),
        None => None,
    };
    let history_mean = batch.history.column_mean();
    let cs = CovarianceSet { hh, th, tt, rh, hplus_h, h_o_h, t_o_h, history_mean, k };
    cs.validate()?;
    Ok(cs)
}

/// Convenience wrapper: aligned features plus per-split rewards and symbols.
pub fn build_from_features<T: Scalar, O: Ord + Copy>(
    history: &FeatureMatrix<T>,
    future: &FeatureMatrix<T>,
    rewards: &[T],
    symbols: &[O],
) -> Result<CovarianceSet<T, O>> {
    build_covariance_set(&TransitionBatch::from_aligned(history, future, rewards, symbols)?)
}

impl<T: Scalar, O: Ord> CovarianceSet<T, O> {
    pub fn d_h(&self) -> usize {
        self.hh.nrows()
    }

    pub fn d_t(&self) -> usize {
        self.th.nrows()
    }
}

impl<T: Scalar, O: Ord + Copy> CovarianceSet<T, O> {
    /// Checks shapes, finiteness and the symmetry of `hh`.
    pub fn validate(&self) -> Result<()> {
        let (dh, dt) = (self.d_h(), self.d_t());
        let check = |name: &'static str, m: &DMatrix<T>, r: usize, c: usize| -> Result<()> {
            if m.shape() != (r, c) {
                return Err(Error::mismatch(name, format!("{r}x{c}"), format!("{}x{}", m.nrows(), m.ncols())));
            }
            if m.iter().any(|x| !x.is_finite_value()) {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        check("hh", &self.hh, dh, dh)?;
        check("th", &self.th, dt, dh)?;
        check("tt", &self.tt, dt, dt)?;
        check("hplus_h", &self.hplus_h, dh, dh)?;
        if self.rh.len() != dh || self.history_mean.len() != dh {
            return Err(Error::mismatch("rh/history_mean length", dh, format!("{}/{}", self.rh.len(), self.history_mean.len())));
        }
        for m in self.h_o_h.values() {
            check("h_o_h", m, dh, dh)?;
        }
        if let Some(map) = &self.t_o_h {
            for m in map.values() {
                check("t_o_h", m, dt, dh)?;
            }
        }
        let asym = relative_asymmetry(&self.hh);
        if asym > 1e-10 {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        Ok(())
    }

    /// Largest entry of `|Σ_o h_o_h − hplus_h|`.
    pub fn partition_residual(&self) -> f64 {
        let mut sum = DMatrix::zeros(self.d_h(), self.d_h());
        for m in self.h_o_h.values() {
            sum += m;
        }
        crate::linalg::max_abs_diff(&sum, &self.hplus_h)
    }

    /// Largest absolute entry among the matrices entering the partition identity.
    pub fn partition_scale(&self) -> f64 {
        self.hplus_h
            .iter()
            .chain(self.h_o_h.values().flat_map(|m| m.iter()))
            .fold(0.0f64, |m, x| m.max(x.as_f64().abs()))
    }

    /// `Σ_o t_o_h`, required by the correlated learners.
    pub fn summed_t_o_h(&self) -> Result<DMatrix<T>> {
        let map = self.t_o_h.as_ref().ok_or(Error::MissingCovariance("t_o_h"))?;
        let mut sum = DMatrix::zeros(self.d_t(), self.d_h());
        for m in map.values() {
            sum += m;
        }
        Ok(sum)
    }

    pub fn summed_h_o_h(&self) -> DMatrix<T> {
        let mut sum = DMatrix::zeros(self.d_h(), self.d_h());
        for m in self.h_o_h.values() {
            sum += m;
        }
        sum
    }
}

impl<T: Scalar, O: Ord + Copy + Display + FromStr> CovarianceSet<T, O> {
    /// Writes one matrix file per covariance plus a `meta.txt` index.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_matrix(&dir.join("hh.txt"), &self.hh)?;
        write_matrix(&dir.join("th.txt"), &self.th)?;
        write_matrix(&dir.join("tt.txt"), &self.tt)?;
        write_matrix(&dir.join("rh.txt"), &DMatrix::from_row_slice(1, self.rh.len(), self.rh.as_slice()))?;
        write_matrix(&dir.join("hplus_h.txt"), &self.hplus_h)?;
        write_matrix(&dir.join("history_mean.txt"), &DMatrix::from_column_slice(self.history_mean.len(), 1, self.history_mean.as_slice()))?;
        let symbols: Vec<String> = self.h_o_h.keys().map(|o| o.to_string()).collect();
        for (o, m) in &self.h_o_h {
            write_matrix(&dir.join(format!("h_o_h.{o}.txt")), m)?;
        }
        if let Some(map) = &self.t_o_h {
            for (o, m) in map {
                write_matrix(&dir.join(format!("t_o_h.{o}.txt")), m)?;
            }
        }
        let meta = format!(
            "k {}\nsymbols {}\nt_o_h {}\n",
            self.k,
            symbols.join(" "),
            if self.t_o_h.is_some() { "yes" } else { "no" }
        );
        fs::write(dir.join("meta.txt"), meta)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta = fs::read_to_string(dir.join("meta.txt"))?;
        let fields: BTreeMap<&str, &str> = meta
            .lines()
            .map(|l| l.split_once(' ').unwrap_or((l, "")))
            .collect();
        let field = |name: &str| -> Result<&str> {
            fields.get(name).copied().ok_or_else(|| Error::Parse(format!("meta.txt lacks `{name}`")))
        };
        let k: usize = field("k")?.trim().parse().map_err(|_| Error::Parse("bad sample count".into()))?;
        let symbols: Vec<O> = field("symbols")?
            .split_whitespace()
            .map(|s| s.parse::<O>().map_err(|_| Error::Parse(format!("bad symbol `{s}`"))))
            .collect::<Result<_>>()?;
        let has_toh = field("t_o_h")?.trim() == "yes";
        let mut h_o_h = BTreeMap::new();
        let mut t_o_h = BTreeMap::new();
        for o in &symbols {
            h_o_h.insert(*o, read_matrix(&dir.join(format!("h_o_h.{o}.txt")))?);
            if has_toh {
                t_o_h.insert(*o, read_matrix(&dir.join(format!("t_o_h.{o}.txt")))?);
            }
        }
        let rh: DMatrix<T> = read_matrix(&dir.join("rh.txt"))?;
        let mean: DMatrix<T> = read_matrix(&dir.join("history_mean.txt"))?;
        let cs = CovarianceSet {
            hh: read_matrix(&dir.join("hh.txt"))?,
            th: read_matrix(&dir.join("th.txt"))?,
            tt: read_matrix(&dir.join("tt.txt"))?,
            rh: rh.row(0).into_owned(),
            hplus_h: read_matrix(&dir.join("hplus_h.txt"))?,
            h_o_h,
            t_o_h: has_toh.then_some(t_o_h),
            history_mean: mean.column(0).into_owned(),
            k,
        };
        cs.validate()?;
        Ok(cs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{WindowKind, WindowSpec};
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn fm(values: DMatrix<f64>, indices: Vec<usize>) -> FeatureMatrix<f64> {
        FeatureMatrix { values, kind: WindowKind::History, spec: WindowSpec::new(1, 1).unwrap(), indices }
    }

    #[test]
    fn cov_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        assert_eq!(cov(&eye, &eye).unwrap(), dmatrix![0.5, 0.0; 0.0, 0.5]);
        let c = cov(&dmatrix![1.0, 2.0], &dmatrix![3.0, 4.0]).unwrap();
        assert_eq!(c[(0, 0)], 5.5);
        assert!(cov(&dmatrix![1.0, 2.0], &dmatrix![1.0]).is_err());
        assert!(cov(&DMatrix::<f64>::zeros(1, 0), &DMatrix::zeros(1, 0)).is_err());
    }

    #[test]
    fn shifted_cov_examples() {
        let ones = fm(DMatrix::from_element(1, 4, 1.0), vec![0, 1, 2, 3]);
        assert_eq!(shifted_cov(&ones).unwrap()[(0, 0)], 1.0);
        let ramp = fm(dmatrix![1.0, 2.0, 3.0], vec![0, 1, 2]);
        assert_eq!(shifted_cov(&ramp).unwrap()[(0, 0)], 4.0);
        // a dropped split between 1 and 2 leaves only the pair (0, 1)
        let broken = fm(dmatrix![1.0, 2.0, 3.0], vec![0, 1, 3]);
        assert_eq!(adjacent_pairs(&broken), vec![0]);
        assert_eq!(shifted_cov(&broken).unwrap()[(0, 0)], 2.0);
        assert!(shifted_cov(&fm(dmatrix![1.0, 2.0], vec![0, 2])).is_err());
    }

    #[test]
    fn indicator_cov_examples() {
        let h = DMatrix::from_element(1, 4, 1.0);
        let single = indicator_cov(&h, &h, &[7u8; 4]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[&7], cov(&h, &h).unwrap());
        let alt = indicator_cov(&h, &h, &[0u8, 1, 0, 1]).unwrap();
        assert_eq!(alt[&0][(0, 0)], 0.5);
        assert_eq!(alt[&1][(0, 0)], 0.5);
        assert!(indicator_cov(&h, &h, &[0u8, 1]).is_err());
    }

    #[test]
    fn constant_inputs() {
        let ones = fm(DMatrix::from_element(1, 5, 1.0), vec![0, 1, 2, 3, 4]);
        let cs = build_from_features(&ones, &ones, &[1.0; 5], &[0usize; 5]).unwrap();
        assert_eq!(cs.hh[(0, 0)], 1.0);
        assert_eq!(cs.k, 4);
        assert_eq!(cs.partition_residual(), 0.0);
    }

    #[test]
    fn directory_round_trip() {
        let h = fm(dmatrix![1.0, 2.0, 0.5, 3.0; 0.1, -1.0, 2.0, 0.0], vec![0, 1, 2, 3]);
        let cs = build_from_features(&h, &h, &[1.0, 0.0, 2.0, 1.0], &[0usize, 1, 1, 0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cs.save_dir(dir.path()).unwrap();
        let back = CovarianceSet::<f64, usize>::load_dir(dir.path()).unwrap();
        assert_eq!(back, cs);
    }

    proptest! {
        #[test]
        fn cov_transpose_and_psd(x in prop::collection::vec(-5.0f64..5.0, 12), y in prop::collection::vec(-5.0f64..5.0, 8)) {
            let x = DMatrix::from_vec(3, 4, x);
            let y = DMatrix::from_vec(2, 4, y);
            prop_assert_eq!(cov(&x, &y).unwrap(), cov(&y, &x).unwrap().transpose());
            let g = cov(&x, &x).unwrap();
            prop_assert!(crate::linalg::relative_asymmetry(&g) == 0.0);
            let eig = g.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|&l| l > -1e-10));
        }

        #[test]
        fn partition_identity(vals in prop::collection::vec(-3.0f64..3.0, 40), syms in prop::collection::vec(0usize..3, 10)) {
            let h = fm(DMatrix::from_vec(4, 10, vals), (0..10).collect());
            let cs = build_from_features(&h, &h, &[0.0; 10], &syms).unwrap();
            prop_assert!(cs.partition_residual() <= 16.0 * f64::EPSILON * cs.partition_scale().max(1.0));
        }
    }
}
