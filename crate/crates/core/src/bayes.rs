//! Monte Carlo dropout posterior of the rank score.
//!
//! A sample's rank score is the mean of `T` stochastic forward passes and
//! its uncertainty is the population variance of those passes. Each draw
//! uses an RNG keyed by `(seed, sample, draw)`, so posteriors are identical
//! whether computed sequentially or in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleId};
use crate::error::{Error, Result};
use crate::nn::{self, NetworkParams};
use crate::seed;

/// Default number of Monte Carlo draws.
pub const DEFAULT_DRAWS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePosterior {
    pub sample: SampleId,
    pub draws: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl ScorePosterior {
    /// Mean and population variance by the two-pass method. The mean is
    /// accumulated relative to the first draw, so identical draws give that
    /// value back exactly and a variance of exactly zero.
    pub fn from_draws(sample: SampleId, draws: Vec<f64>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Validation("posterior needs at least one draw".into()));
        }
        let n = draws.len() as f64;
        let shift = draws[0];
        let mean = shift + draws.iter().map(|d| d - shift).sum::<f64>() / n;
        let variance = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        Ok(ScorePosterior { sample, draws, mean, variance })
    }
}

/// Streaming mean and population variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMoments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

impl FromIterator<f64> for RunningMoments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = RunningMoments::default();
        iter.into_iter().for_each(|x| m.push(x));
        m
    }
}

/// Posterior for one sample from `draws` dropout-perturbed forward passes.
pub fn predict_posterior(
    params: &NetworkParams,
    sample: SampleId,
    features: &[f64],
    draws: usize,
    seed: u64,
) -> Result<ScorePosterior> {
    if draws == 0 {
        return Err(Error::Validation("number of Monte Carlo draws must be at least 1".into()));
    }
    let values = (0..draws)
        .map(|t| {
            let mut rng = seed::keyed_rng(seed, "mc-draw", &[sample.0 as u64, t as u64]);
            let masks = nn::sample_masks(params, &mut rng);
            nn::forward(params, features, Some(&masks))
        })
        .collect::<Result<Vec<f64>>>()?;
    ScorePosterior::from_draws(sample, values)
}

/// Posteriors for many samples, computed in parallel, returned in input order.
pub fn predict_all(
    params: &NetworkParams,
    dataset: &Dataset,
    ids: &[SampleId],
    draws: usize,
    seed: u64,
) -> Result<Vec<ScorePosterior>> {
    ids.par_iter()
        .map(|&id| predict_posterior(params, id, dataset.features(id), draws, seed))
        .collect()
}

/// Sample ids by variance, largest first; ties go to the lower id.
pub fn acquisition_rank(posteriors: &[ScorePosterior]) -> Vec<SampleId> {
    let mut order: Vec<(f64, SampleId)> = posteriors.iter().map(|p| (p.variance, p.sample)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, id)| id).collect()
}
