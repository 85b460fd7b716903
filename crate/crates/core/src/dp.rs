//! Central differential privacy: L2 clipping and the Gaussian mechanism.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DpError {
    #[error("invalid DP parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    #[serde(default = "default_rounds")]
    pub rounds_budgeted: u64,
}

fn default_rounds() -> u64 {
    30
}

impl Default for DpParams {
    fn default() -> Self {
        Self { epsilon: 8.0, delta: 1e-5, clip_norm: 0.1, rounds_budgeted: default_rounds() }
    }
}

impl DpParams {
    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(DpError::InvalidParameter(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DpError::InvalidParameter(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(DpError::InvalidParameter(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }

    /// Basic composition over `rounds` releases.
    pub fn epsilon_spent(&self, rounds: u64) -> f64 {
        self.epsilon * rounds as f64
    }

    pub fn delta_spent(&self, rounds: u64) -> f64 {
        self.delta * rounds as f64
    }
}

pub fn l2_norm(w: &[f64]) -> f64 {
    w.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `w` by `min(1, c / |w|)`.
pub fn clip_to_norm(w: &[f64], c: f64) -> Vec<f64> {
    let norm = l2_norm(w);
    if norm <= c || norm == 0.0 {
        return w.to_vec();
    }
    let f = c / norm;
    w.iter().map(|x| x * f).collect()
}

/// Gaussian mechanism noise scale. The closed form is only proven for
/// epsilon <= 1; larger values are still computed but logged.
pub fn calibrate_sigma(params: &DpParams) -> Result<f64, DpError> {
    params.validate()?;
    if params.epsilon > 1.0 {
        warn!("epsilon = {} is outside the Gaussian mechanism's proven range (<= 1)", params.epsilon);
    }
    Ok(params.clip_norm * (2.0 * (1.25 / params.delta).ln()).sqrt() / params.epsilon)
}

/// Adds i.i.d. N(0, sigma^2) noise per coordinate. `sigma == 0` returns `w`
/// without touching the generator.
pub fn gaussian_perturb(w: &[f64], sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>, DpError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(DpError::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(w.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| DpError::InvalidParameter(e.to_string()))?;
    Ok(w.iter().map(|x| x + normal.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn params(epsilon: f64, delta: f64, clip_norm: f64) -> DpParams {
        DpParams { epsilon, delta, clip_norm, rounds_budgeted: 1 }
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_to_norm(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let c = clip_to_norm(&[3.0, 4.0], 2.5);
        assert!((c[0] - 1.5).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
        assert_eq!(clip_to_norm(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn sigma_closed_form() {
        let delta = 1.25 * (-2.0f64).exp();
        let s = calibrate_sigma(&params(1.0, delta, 3.0)).unwrap();
        assert!((s - 6.0).abs() < 1e-12);
        let base = calibrate_sigma(&params(0.5, 1e-5, 1.0)).unwrap();
        assert!((calibrate_sigma(&params(0.5, 1e-5, 2.0)).unwrap() - 2.0 * base).abs() < 1e-12);
        assert!((calibrate_sigma(&params(0.25, 1e-5, 1.0)).unwrap() - 2.0 * base).abs() < 1e-12);
        assert!(calibrate_sigma(&params(0.0, 1e-5, 1.0)).is_err());
        assert!(calibrate_sigma(&params(1.0, 1.0, 1.0)).is_err());
        assert!(calibrate_sigma(&params(8.0, 1e-5, 1.0)).is_ok());
    }

    #[test]
    fn zero_sigma_is_identity_and_draws_nothing() {
        let mut a = ChaCha20Rng::seed_from_u64(5);
        let b = a.clone();
        let w = vec![0.1, -2.5, 1e-9];
        assert_eq!(gaussian_perturb(&w, 0.0, &mut a).unwrap(), w);
        assert_eq!(a, b);
    }

    #[test]
    fn noise_moments() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let draws: Vec<Vec<f64>> = (0..10_000).map(|_| gaussian_perturb(&[0.0, 0.0], 1.0, &mut rng).unwrap()).collect();
        for k in 0..2 {
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / 10_000.0;
            assert!(mean.abs() < 4.0 / 100.0);
            let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / 9_999.0;
            assert!((var.sqrt() - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let w = vec![1.0; 8];
        let a = gaussian_perturb(&w, 0.7, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b = gaussian_perturb(&w, 0.7, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn budget_composes_linearly() {
        let p = params(8.0, 1e-5, 1.0);
        assert_eq!(p.epsilon_spent(30), 240.0);
    }
}
