//! Geometric Brownian motion prices and the state features of the 100-day
//! stopping contract.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Days of price history in a market state.
pub const WINDOW: usize = 100;
pub const CANONICAL_DIM: usize = 16;
pub const EXTENDED_DIM: usize = 220;

/// Daily discount when the risk-free rate equals the growth rate `rho`.
pub fn discount(rho: f64) -> f64 {
    (-rho).exp()
}

/// Price path of length `steps` starting at 1, using exact log-normal daily steps.
pub fn simulate_gbm(sigma: f64, rho: f64, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_gbm_with(sigma, rho, steps, &mut rng)
}

pub fn simulate_gbm_with<R: Rng>(sigma: f64, rho: f64, steps: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) || !rho.is_finite() {
        return Err(Error::invalid(format!("invalid GBM parameters sigma={sigma}, rho={rho}")));
    }
    if steps < WINDOW + 1 {
        return Err(Error::invalid(format!("GBM path needs at least {} steps, got {steps}", WINDOW + 1)));
    }
    let drift = rho - 0.5 * sigma * sigma;
    let mut log_p = 0.0f64;
    let mut path = Vec::with_capacity(steps);
    path.push(1.0);
    for _ in 1..steps {
        let xi: f64 = rng.sample(StandardNormal);
        log_p += drift + sigma * xi;
        path.push(log_p.exp());
    }
    Ok(path)
}

/// Ratios `x(i) = p_{t−100+i} / p_{t−100}` for `i = 1..=100`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketState {
    pub x: [f64; WINDOW],
    pub price: f64,
}

impl MarketState {
    /// State at day `t ≥ 100` of a price path.
    pub fn at(path: &[f64], t: usize) -> Result<Self> {
        if t < WINDOW || t >= path.len() {
            return Err(Error::invalid(format!("market state needs {WINDOW} <= t < {}, got {t}", path.len())));
        }
        let base = path[t - WINDOW];
        let mut x = [0.0; WINDOW];
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = path[t - WINDOW + 1 + i] / base;
        }
        Ok(MarketState { x, price: path[t] })
    }

    pub fn from_ratios(x: [f64; WINDOW]) -> Self {
        MarketState { price: x[WINDOW - 1], x }
    }
}

/// Exercise value: the current price relative to the price 100 days earlier.
pub fn payoff(state: &MarketState) -> f64 {
    state.x[WINDOW - 1]
}

fn grid(i: usize) -> f64 {
    // i is 1-based
    i as f64 / 50.0 - 1.0
}

/// Scaled Legendre polynomial of the given degree at `j`.
fn legendre(degree: usize, j: f64) -> f64 {
    match degree {
        0 => 1.0 / 2f64.sqrt(),
        1 => (1.5f64).sqrt() * j,
        2 => (2.5f64).sqrt() * (3.0 * j * j - 1.0) / 2.0,
        3 => (3.5f64).sqrt() * (5.0 * j.powi(3) - 3.0 * j) / 2.0,
        4 => (4.5f64).sqrt() * (35.0 * j.powi(4) - 30.0 * j * j + 3.0) / 8.0,
        5 => (5.5f64).sqrt() * (63.0 * j.powi(5) - 70.0 * j.powi(3) + 15.0 * j) / 8.0,
        _ => unreachable!("degrees 0..=5 only"),
    }
}

/// Weights of the Legendre inner product of a given degree on the 100-day grid.
pub fn legendre_weights(degree: usize) -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    for (k, wk) in w.iter_mut().enumerate() {
        *wk = legendre(degree, grid(k + 1));
    }
    w
}

fn inner(x: &[f64; WINDOW], degree: usize) -> f64 {
    x.iter().enumerate().map(|(k, &xi)| xi * legendre(degree, grid(k + 1))).sum::<f64>() / WINDOW as f64
}

/// The 16 hand-designed features: constant, payoff, extremes and their
/// positions, Legendre shape summaries, and payoff products.
///
/// Positions are 1-based with ties resolved to the first index, so a flat path
/// has zero in both position features.
pub fn canonical_basis(state: &MarketState) -> [f64; CANONICAL_DIM] {
    let x = &state.x;
    let g = payoff(state);
    let (mut imin, mut imax) = (0, 0);
    for i in 1..WINDOW {
        if x[i] < x[imin] {
            imin = i;
        }
        if x[i] > x[imax] {
            imax = i;
        }
    }
    let f3 = x[imin] - 1.0;
    let f4 = x[imax] - 1.0;
    let f7 = x.iter().map(|&v| (v - 1.0) / 2f64.sqrt()).sum::<f64>() / WINDOW as f64;
    let f8 = inner(x, 1);
    let f9 = inner(x, 2);
    let f10 = inner(x, 3);
    [
        1.0,
        g,
        f3,
        f4,
        imin as f64, // (imin + 1) − 1
        imax as f64,
        f7,
        f8,
        f9,
        f10,
        g * f3,
        g * f4,
        g * f7,
        g * f8,
        g * f9,
        g * f10,
    ]
}

/// The canonical 16, degree-4 and degree-5 Legendre summaries with their
/// payoff products, the raw path and the squared path.
pub fn extended_basis(state: &MarketState) -> Vec<f64> {
    let mut out = Vec::with_capacity(EXTENDED_DIM);
    out.extend_from_slice(&canonical_basis(state));
    let g = payoff(state);
    let f17 = inner(&state.x, 4);
    let f18 = inner(&state.x, 5);
    out.extend_from_slice(&[f17, f18, g * f17, g * f18]);
    out.extend_from_slice(&state.x);
    out.extend(state.x.iter().map(|v| v * v));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat() -> MarketState {
        MarketState::from_ratios([1.0; WINDOW])
    }

    #[test]
    fn flat_path_values() {
        let f = canonical_basis(&flat());
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], 1.0);
        assert_eq!(&f[2..7], &[0.0; 5]);
        // Σ_{i=1..100} (i/50 − 1) = 1
        let sum_j: f64 = (1..=100).map(grid).sum();
        assert!((sum_j - 1.0).abs() < 1e-12);
        assert!((f[7] - 1.5f64.sqrt() / 100.0).abs() < 1e-15);
        let f9: f64 = (1..=100).map(|i| 2.5f64.sqrt() * (3.0 * grid(i).powi(2) - 1.0) / 2.0).sum::<f64>() / 100.0;
        let f10: f64 = (1..=100).map(|i| 3.5f64.sqrt() * (5.0 * grid(i).powi(3) - 3.0 * grid(i)) / 2.0).sum::<f64>() / 100.0;
        assert!((f[8] - f9).abs() < 1e-15);
        assert!((f[9] - f10).abs() < 1e-15);
        assert_eq!(payoff(&flat()), 1.0);
    }

    #[test]
    fn payoff_is_last_ratio() {
        let mut x = [1.0; WINDOW];
        x[WINDOW - 1] = 1.07;
        assert_eq!(payoff(&MarketState::from_ratios(x)), 1.07);
    }

    #[test]
    fn extremes_positions() {
        let mut x = [1.0; WINDOW];
        x[9] = 0.9;
        x[49] = 1.2;
        let f = canonical_basis(&MarketState::from_ratios(x));
        assert!((f[2] + 0.1).abs() < 1e-15);
        assert!((f[3] - 0.2).abs() < 1e-15);
        assert_eq!(f[4], 9.0);
        assert_eq!(f[5], 49.0);
    }

    #[test]
    fn extended_layout() {
        let mut x = [0.0; WINDOW];
        for (i, v) in x.iter_mut().enumerate() {
            *v = 1.0 + 0.001 * i as f64;
        }
        let s = MarketState::from_ratios(x);
        let e = extended_basis(&s);
        assert_eq!(e.len(), EXTENDED_DIM);
        assert_eq!(&e[..16], &canonical_basis(&s));
        assert_eq!(e[18], e[1] * e[16]);
        for i in 0..WINDOW {
            assert_eq!(e[20 + i], x[i]);
            assert_eq!(e[120 + i], x[i] * x[i]);
        }
    }

    #[test]
    fn deterministic_drift() {
        let p = simulate_gbm(0.0, 0.0004, 300, 1).unwrap();
        for (t, &v) in p.iter().enumerate() {
            assert!((v - (0.0004 * t as f64).exp()).abs() < 1e-12);
        }
        assert!(simulate_gbm(0.02, 0.0004, 100, 1).is_err());
        assert!(simulate_gbm(-0.1, 0.0004, 200, 1).is_err());
        assert_eq!(simulate_gbm(0.02, 0.0004, 200, 9).unwrap(), simulate_gbm(0.02, 0.0004, 200, 9).unwrap());
    }

    #[test]
    fn state_ratios() {
        let p: Vec<f64> = (0..150).map(|t| 1.0 + t as f64).collect();
        let s = MarketState::at(&p, 120).unwrap();
        assert_eq!(s.x[0], p[21] / p[20]);
        assert_eq!(s.x[99], p[120] / p[20]);
        assert_eq!(s.price, p[120]);
        assert!(MarketState::at(&p, 99).is_err());
    }
}
