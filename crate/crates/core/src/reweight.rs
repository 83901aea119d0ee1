//! Global frequency to loss weight, and the weighted batch loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Digest, LocalDataset};
use crate::protocol::GlobalFrequencyVector;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReweightError {
    #[error("frequency at index {index} is {count}; every sample counts itself at least once")]
    ZeroCount { index: usize, count: u64 },
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("batch has {weights} weights but {losses} losses")]
    LengthMismatch { weights: usize, losses: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("weight at index {0} is not positive")]
    NonPositiveWeight(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub client_id: usize,
    pub weights: Vec<f64>,
    pub epsilon: f64,
}

/// `1 / (ln(count + 1) + epsilon)`.
pub fn weight_for_count(count: u64, epsilon: f64) -> f64 {
    1.0 / ((count as f64 + 1.0).ln() + epsilon)
}

pub fn weights_from_frequencies(g: &GlobalFrequencyVector, epsilon: f64) -> Result<WeightVector, ReweightError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ReweightError::BadEpsilon(epsilon));
    }
    let weights = g
        .counts
        .iter()
        .enumerate()
        .map(|(index, &count)| {
            if count == 0 {
                Err(ReweightError::ZeroCount { index, count })
            } else {
                Ok(weight_for_count(count, epsilon))
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(WeightVector {
        client_id: g.client_id,
        weights,
        epsilon,
    })
}

/// `sum(w_i * l_i) / sum(w_i)`.
pub fn weighted_batch_loss(weights: &[f64], losses: &[f64]) -> Result<f64, ReweightError> {
    if weights.len() != losses.len() {
        return Err(ReweightError::LengthMismatch {
            weights: weights.len(),
            losses: losses.len(),
        });
    }
    if weights.is_empty() {
        return Err(ReweightError::EmptyBatch);
    }
    if let Some(i) = weights.iter().position(|w| w.is_nan() || *w <= 0.0) {
        return Err(ReweightError::NonPositiveWeight(i));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().zip(losses).map(|(w, l)| w * l).sum::<f64>() / total)
}

/// `digest -> weight` map for export.
pub fn weight_map(ds: &LocalDataset, w: &WeightVector) -> BTreeMap<Digest, f64> {
    ds.digests().into_iter().zip(w.weights.iter().copied()).collect()
}
