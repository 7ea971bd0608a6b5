//! Trajectories, featurizers and aligned history/future feature matrices.
//!
//! A split point `t` owns the history window `obs[t+1-ℓ_H ..= t]` and the future
//! window `obs[t+1 ..= t+ℓ_T]`. Split points whose combined window would leave
//! the episode containing `t` are dropped, never padded.

use std::io::{Read, Write};
use std::marker::PhantomData;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Observation types with a real-valued coordinate encoding.
///
/// Binary symbols map to `{0, 1}`, so a window of length ℓ encodes into `{0,1}^ℓ`.
pub trait Symbol: Copy + Send + Sync {
    fn coordinate(&self) -> f64;
}

impl Symbol for usize {
    fn coordinate(&self) -> f64 {
        *self as f64
    }
}

impl Symbol for u8 {
    fn coordinate(&self) -> f64 {
        f64::from(*self)
    }
}

impl Symbol for bool {
    fn coordinate(&self) -> f64 {
        if *self { 1.0 } else { 0.0 }
    }
}

impl Symbol for f64 {
    fn coordinate(&self) -> f64 {
        *self
    }
}

/// Text encoding of one observation inside a CSV cell.
pub trait CsvField: Sized {
    fn to_field(&self) -> String;
    fn from_field(field: &str) -> Result<Self>;
}

impl CsvField for usize {
    fn to_field(&self) -> String {
        self.to_string()
    }
    fn from_field(field: &str) -> Result<Self> {
        field.trim().parse().map_err(|_| Error::Parse(format!("bad symbol `{field}`")))
    }
}

impl CsvField for f64 {
    fn to_field(&self) -> String {
        format!("{self:e}")
    }
    fn from_field(field: &str) -> Result<Self> {
        field.trim().parse().map_err(|_| Error::Parse(format!("bad number `{field}`")))
    }
}

/// Vectors are stored `;`-separated in a single cell.
impl CsvField for Vec<f64> {
    fn to_field(&self) -> String {
        self.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(";")
    }
    fn from_field(field: &str) -> Result<Self> {
        if field.is_empty() {
            return Ok(Vec::new());
        }
        field.split(';').map(f64::from_field).collect()
    }
}

/// Observations and rewards of a fixed-policy run, split into episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<O, T: Scalar = f64> {
    observations: Vec<O>,
    rewards: Vec<T>,
    boundaries: Vec<usize>,
}

impl<O, T: Scalar> Trajectory<O, T> {
    pub fn new(observations: Vec<O>, rewards: Vec<T>) -> Result<Self> {
        Self::with_boundaries(observations, rewards, Vec::new())
    }

    /// `boundaries` lists the first step of each new episode.
    ///
    /// They must be strictly increasing within `[0, k]`; cuts at `0` and `k`
    /// separate nothing and are dropped so that serialization round-trips.
    pub fn with_boundaries(observations: Vec<O>, rewards: Vec<T>, boundaries: Vec<usize>) -> Result<Self> {
        let k = observations.len();
        if k == 0 {
            return Err(Error::invalid("trajectory must contain at least one step"));
        }
        if rewards.len() != k {
            return Err(Error::mismatch("trajectory rewards", k, rewards.len()));
        }
        if rewards.iter().any(|r| !r.is_finite_value()) {
            return Err(Error::invalid("trajectory rewards must be finite"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("episode boundaries must be strictly increasing"));
        }
        if boundaries.last().is_some_and(|&b| b > k) {
            return Err(Error::invalid(format!("episode boundary beyond trajectory length {k}")));
        }
        let boundaries = boundaries.into_iter().filter(|&b| b > 0 && b < k).collect();
        Ok(Trajectory { observations, rewards, boundaries })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[O] {
        &self.observations
    }

    pub fn rewards(&self) -> &[T] {
        &self.rewards
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Zero-based episode index of step `t`.
    pub fn episode_of(&self, t: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= t)
    }

    /// Whether steps `lo..=hi` all lie in one episode.
    pub fn same_episode(&self, lo: usize, hi: usize) -> bool {
        self.episode_of(lo) == self.episode_of(hi)
    }
}

impl<O: CsvField, T: Scalar> Trajectory<O, T> {
    /// Writes columns `step, observation, reward, episode_id`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "observation", "reward", "episode_id"])?;
        for t in 0..self.len() {
            w.write_record([
                t.to_string(),
                self.observations[t].to_field(),
                format!("{:e}", self.rewards[t]),
                self.episode_of(t).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["step", "observation", "reward", "episode_id"] {
            return Err(Error::Parse("trajectory CSV must have columns step,observation,reward,episode_id".into()));
        }
        let (mut obs, mut rewards, mut boundaries) = (Vec::new(), Vec::new(), Vec::new());
        let mut last_episode = None;
        for (t, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let step: usize = rec[0].parse().map_err(|_| Error::Parse(format!("bad step `{}`", &rec[0])))?;
            if step != t {
                return Err(Error::Parse(format!("expected step {t}, found {step}")));
            }
            obs.push(O::from_field(&rec[1])?);
            rewards.push(rec[2].trim().parse::<T>().map_err(|_| Error::Parse(format!("bad reward `{}`", &rec[2])))?);
            let episode: usize = rec[3].parse().map_err(|_| Error::Parse(format!("bad episode id `{}`", &rec[3])))?;
            match last_episode {
                Some(prev) if episode < prev => {
                    return Err(Error::Parse(format!("episode id decreases at step {t}")));
                }
                Some(prev) if episode > prev => boundaries.push(t),
                _ => {}
            }
            last_episode = Some(episode);
        }
        Self::with_boundaries(obs, rewards, boundaries)
    }
}

/// Maps a window of observations to a fixed-length real vector.
pub trait Featurizer<O, T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Window length this featurizer accepts, when it needs a specific one.
    fn window_len(&self) -> Option<usize> {
        None
    }

    /// Writes the features of `window` into `out` (length `dim()`).
    fn write(&self, window: &[O], out: &mut [T]);

    fn features(&self, window: &[O]) -> DVector<T> {
        let mut v = DVector::zeros(self.dim());
        self.write(window, v.as_mut_slice());
        v
    }
}

/// Encodes each observation of a fixed-length window as its coordinate.
#[derive(Clone, Copy, Debug)]
pub struct IdentityFeaturizer {
    len: usize,
}

impl IdentityFeaturizer {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("identity featurizer needs a positive window length"));
        }
        Ok(IdentityFeaturizer { len })
    }
}

impl<O: Symbol, T: Scalar> Featurizer<O, T> for IdentityFeaturizer {
    fn dim(&self) -> usize {
        self.len
    }
    fn window_len(&self) -> Option<usize> {
        Some(self.len)
    }
    fn write(&self, window: &[O], out: &mut [T]) {
        for (o, x) in window.iter().zip(out.iter_mut()) {
            *x = T::lit(o.coordinate());
        }
    }
}

/// Indicator of the whole window among the `alphabet^len` possible windows.
///
/// Windows are numbered with the first observation as the most significant digit.
#[derive(Clone, Copy, Debug)]
pub struct OneHotFeaturizer {
    alphabet: usize,
    len: usize,
}

impl OneHotFeaturizer {
    pub fn new(alphabet: usize, len: usize) -> Result<Self> {
        if alphabet == 0 || len == 0 {
            return Err(Error::invalid("one-hot featurizer needs a positive alphabet and window length"));
        }
        if alphabet.checked_pow(len as u32).is_none_or(|d| d > 1 << 24) {
            return Err(Error::invalid("one-hot feature dimension is too large"));
        }
        Ok(OneHotFeaturizer { alphabet, len })
    }
}

impl<T: Scalar> Featurizer<usize, T> for OneHotFeaturizer {
    fn dim(&self) -> usize {
        self.alphabet.pow(self.len as u32)
    }
    fn window_len(&self) -> Option<usize> {
        Some(self.len)
    }
    fn write(&self, window: &[usize], out: &mut [T]) {
        out.iter_mut().for_each(|x| *x = T::zero());
        let idx = window.iter().fold(0, |acc, &o| {
            assert!(o < self.alphabet, "observation {o} outside the one-hot alphabet");
            acc * self.alphabet + o
        });
        out[idx] = T::one();
    }
}

/// Passes through vector-valued observations of a fixed dimension.
///
/// Used per state inside [`Stacked`], e.g. for precomputed state features.
#[derive(Clone, Copy, Debug)]
pub struct VectorFeaturizer {
    dim: usize,
}

impl VectorFeaturizer {
    pub fn new(dim: usize) -> Self {
        VectorFeaturizer { dim }
    }
}

impl<T: Scalar> Featurizer<DVector<T>, T> for VectorFeaturizer {
    fn dim(&self) -> usize {
        self.dim
    }
    fn window_len(&self) -> Option<usize> {
        Some(1)
    }
    fn write(&self, window: &[DVector<T>], out: &mut [T]) {
        assert_eq!(window[0].len(), self.dim, "state vector dimension");
        out.copy_from_slice(window[0].as_slice());
    }
}

/// Gaussian radial basis functions centred on sampled observation windows.
#[derive(Clone, Debug)]
pub struct RbfFeaturizer<O> {
    centers: Vec<Vec<f64>>,
    bandwidth: f64,
    _obs: PhantomData<fn(&O)>,
}

fn encode<O: Symbol>(window: &[O]) -> Vec<f64> {
    window.iter().map(Symbol::coordinate).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl<O: Symbol> RbfFeaturizer<O> {
    pub fn new(centers: &[Vec<O>], bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("RBF bandwidth must be positive, got {bandwidth}")));
        }
        let first = centers.first().ok_or_else(|| Error::invalid("RBF featurizer needs at least one center"))?;
        if first.is_empty() {
            return Err(Error::invalid("RBF centers must be nonempty windows"));
        }
        if let Some(bad) = centers.iter().find(|c| c.len() != first.len()) {
            return Err(Error::mismatch("RBF center window length", first.len(), bad.len()));
        }
        Ok(RbfFeaturizer {
            centers: centers.iter().map(|c| encode(c)).collect(),
            bandwidth,
            _obs: PhantomData,
        })
    }

    /// Uses the median pairwise distance between centers as bandwidth,
    /// falling back to 1 when it is zero or there is a single center.
    pub fn with_median_bandwidth(centers: &[Vec<O>]) -> Result<Self> {
        let mut f = Self::new(centers, 1.0)?;
        f.bandwidth = median_pairwise_distance(&f.centers).filter(|&m| m > 0.0).unwrap_or(1.0);
        Ok(f)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }
}

fn median_pairwise_distance(points: &[Vec<f64>]) -> Option<f64> {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    Some(if d.len() % 2 == 1 { d[m] } else { 0.5 * (d[m - 1] + d[m]) })
}

impl<O: Symbol, T: Scalar> Featurizer<O, T> for RbfFeaturizer<O> {
    fn dim(&self) -> usize {
        self.centers.len()
    }
    fn window_len(&self) -> Option<usize> {
        Some(self.centers[0].len())
    }
    fn write(&self, window: &[O], out: &mut [T]) {
        let x = encode(window);
        let denom = 2.0 * self.bandwidth * self.bandwidth;
        for (c, slot) in self.centers.iter().zip(out.iter_mut()) {
            *slot = T::lit((-sq_dist(&x, c) / denom).exp());
        }
    }
}

/// Applies a per-state featurizer to every observation of a window and
/// concatenates the results.
#[derive(Clone, Debug)]
pub struct Stacked<F> {
    inner: F,
    horizon: usize,
}

impl<F> Stacked<F> {
    pub fn new(inner: F, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("stacking horizon must be positive"));
        }
        Ok(Stacked { inner, horizon })
    }
}

impl<O, T: Scalar, F: Featurizer<O, T>> Featurizer<O, T> for Stacked<F> {
    fn dim(&self) -> usize {
        self.horizon * self.inner.dim()
    }
    fn window_len(&self) -> Option<usize> {
        Some(self.horizon)
    }
    fn write(&self, window: &[O], out: &mut [T]) {
        let d = self.inner.dim();
        for (i, o) in window.iter().enumerate() {
            self.inner.write(std::slice::from_ref(o), &mut out[i * d..(i + 1) * d]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WindowKind {
    History,
    Future,
}

/// History and future horizons `(ℓ_H, ℓ_T)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub history: usize,
    pub future: usize,
}

impl WindowSpec {
    pub fn new(history: usize, future: usize) -> Result<Self> {
        if history == 0 || future == 0 {
            return Err(Error::invalid("window horizons must be positive"));
        }
        Ok(WindowSpec { history, future })
    }

    pub fn horizon(&self, kind: WindowKind) -> usize {
        match kind {
            WindowKind::History => self.history,
            WindowKind::Future => self.future,
        }
    }

    /// Index range `(start, end)` (end exclusive) of the window at split `t`.
    pub fn window(&self, kind: WindowKind, t: usize) -> (usize, usize) {
        match kind {
            WindowKind::History => (t + 1 - self.history, t + 1),
            WindowKind::Future => (t + 1, t + 1 + self.future),
        }
    }
}

/// Feature columns for the retained split points, one column per split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T: Scalar> {
    pub values: DMatrix<T>,
    pub kind: WindowKind,
    pub spec: WindowSpec,
    /// Split point of each column.
    pub indices: Vec<usize>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// Split points whose history and future windows both fit inside the episode of `t`.
pub fn aligned_indices<O, T: Scalar>(traj: &Trajectory<O, T>, spec: WindowSpec) -> Result<Vec<usize>> {
    let k = traj.len();
    let first = spec.history - 1;
    let mut out = Vec::new();
    let mut t = first;
    while t + spec.future < k {
        if traj.same_episode(t - first, t + spec.future) {
            out.push(t);
        }
        t += 1;
    }
    if out.is_empty() {
        return Err(Error::EmptySamples(format!(
            "trajectory of length {k} yields no complete window with horizons ({}, {})",
            spec.history, spec.future
        )));
    }
    Ok(out)
}

fn check_featurizer<O, T: Scalar, F: Featurizer<O, T> + ?Sized>(f: &F, horizon: usize) -> Result<()> {
    match f.window_len() {
        Some(len) if len != horizon => Err(Error::mismatch("featurizer window length", horizon, len)),
        _ => Ok(()),
    }
}

/// Features of the `kind` window at every retained split point.
pub fn window_features<O, T, F>(traj: &Trajectory<O, T>, featurizer: &F, kind: WindowKind, spec: WindowSpec) -> Result<FeatureMatrix<T>>
where
    T: Scalar,
    F: Featurizer<O, T> + ?Sized,
{
    check_featurizer(featurizer, spec.horizon(kind))?;
    let indices = aligned_indices(traj, spec)?;
    let d = featurizer.dim();
    let mut values = DMatrix::zeros(d, indices.len());
    let obs = traj.observations();
    for (j, &t) in indices.iter().enumerate() {
        let (lo, hi) = spec.window(kind, t);
        featurizer.write(&obs[lo..hi], values.column_mut(j).as_mut_slice());
    }
    if values.iter().any(|x| !x.is_finite_value()) {
        return Err(Error::invalid("featurizer produced non-finite values"));
    }
    Ok(FeatureMatrix { values, kind, spec, indices })
}

/// Future features built by concatenating a per-state featurizer over the
/// `spec.future` observations that follow each split point.
pub fn stack_future_features<O, T, F>(traj: &Trajectory<O, T>, per_state: F, spec: WindowSpec) -> Result<FeatureMatrix<T>>
where
    T: Scalar,
    F: Featurizer<O, T>,
{
    if let Some(len) = per_state.window_len() {
        if len != 1 {
            return Err(Error::mismatch("per-state featurizer window length", 1, len));
        }
    }
    let stacked = Stacked::new(per_state, spec.future)?;
    window_features(traj, &stacked, WindowKind::Future, spec)
}
