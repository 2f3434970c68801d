use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rates to try: an explicit grid, or `trials` log-uniform draws
/// from `[low, high]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSpace {
    #[serde(default)]
    pub low: f64,
    #[serde(default)]
    pub high: f64,
    #[serde(default)]
    pub trials: usize,
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl LrSpace {
    pub fn log_uniform(low: f64, high: f64, trials: usize, seed: u64) -> Self {
        Self {
            low,
            high,
            trials,
            grid: None,
            seed,
        }
    }

    pub fn grid(lrs: Vec<f64>) -> Self {
        Self {
            low: 0.0,
            high: 0.0,
            trials: 0,
            grid: Some(lrs),
            seed: 0,
        }
    }

    pub fn candidates(&self) -> Result<Vec<f64>> {
        let lrs = match &self.grid {
            Some(g) => g.clone(),
            None => {
                if !(self.low > 0.0 && self.high >= self.low && self.high.is_finite()) {
                    return Err(Error::config(format!(
                        "learning-rate range [{}, {}] must satisfy 0 < low <= high",
                        self.low, self.high
                    )));
                }
                let (a, b) = (self.low.ln(), self.high.ln());
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..self.trials)
                    .map(|_| if a == b { self.low } else { rng.random_range(a..=b).exp() })
                    .collect()
            }
        };
        if lrs.is_empty() {
            return Err(Error::config("empty learning-rate search space"));
        }
        if let Some(bad) = lrs.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::config(format!("invalid learning rate {bad}")));
        }
        Ok(lrs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSearchResult {
    pub best_lr: f64,
    /// `(lr, dev metric)` per trial, in candidate order.
    pub trials: Vec<(f64, f64)>,
}

/// Runs `objective` once per candidate (in parallel) and returns the best
/// learning rate; ties go to the smaller rate and NaN scores lose.
pub fn lr_search<F>(space: &LrSpace, higher_is_better: bool, objective: F) -> Result<LrSearchResult>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let lrs = space.candidates()?;
    let scores: Vec<f64> = lrs.par_iter().map(|&lr| objective(lr)).collect::<Result<_>>()?;
    let key = |s: f64| match (s.is_nan(), higher_is_better) {
        (true, _) => f64::NEG_INFINITY,
        (false, true) => s,
        (false, false) => -s,
    };
    let mut best = 0;
    for i in 1..lrs.len() {
        let (ki, kb) = (key(scores[i]), key(scores[best]));
        if ki > kb || (ki == kb && lrs[i] < lrs[best]) {
            best = i;
        }
    }
    Ok(LrSearchResult {
        best_lr: lrs[best],
        trials: lrs.into_iter().zip(scores).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trial_returns_its_draw() {
        let space = LrSpace::log_uniform(5e-6, 5e-4, 1, 3);
        let c = space.candidates().unwrap();
        let r = lr_search(&space, true, |_| Ok(0.5)).unwrap();
        assert_eq!(r.best_lr, c[0]);
        assert!(c[0] >= 5e-6 && c[0] <= 5e-4);
    }

    #[test]
    fn same_seed_same_sequence() {
        let a = LrSpace::log_uniform(1e-7, 1e-5, 6, 9).candidates().unwrap();
        let b = LrSpace::log_uniform(1e-7, 1e-5, 6, 9).candidates().unwrap();
        let c = LrSpace::log_uniform(1e-7, 1e-5, 6, 10).candidates().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ties_prefer_smaller_and_direction_is_respected() {
        let space = LrSpace::grid(vec![1e-3, 1e-4, 1e-2]);
        assert_eq!(lr_search(&space, true, |_| Ok(1.0)).unwrap().best_lr, 1e-4);
        assert_eq!(lr_search(&space, true, Ok).unwrap().best_lr, 1e-2);
        assert_eq!(lr_search(&space, false, Ok).unwrap().best_lr, 1e-4);
        assert_eq!(lr_search(&space, true, |lr| Ok(if lr > 5e-3 { f64::NAN } else { lr })).unwrap().best_lr, 1e-3);
    }

    #[test]
    fn empty_space_is_config_error() {
        assert!(matches!(LrSpace::grid(vec![]).candidates(), Err(Error::Config(_))));
        assert!(matches!(LrSpace::log_uniform(1e-3, 1e-4, 3, 0).candidates(), Err(Error::Config(_))));
    }
}
