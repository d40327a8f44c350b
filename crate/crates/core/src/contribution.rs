//! Layer contribution scoring: how much each layer changes the sentence-token
//! representation, measured as the cosine similarity between the CLS state
//! entering and leaving the layer, averaged over a dataset.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderError, EncoderModel, Scalar, TokenBatch};
use crate::strategies::{select_by_threshold, DropPlan, PlanError};

#[derive(Debug, thiserror::Error)]
pub enum ContributionError {
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cosine of a zero-norm vector is undefined")]
    ZeroNorm,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

pub type Result<T> = std::result::Result<T, ContributionError>;

/// Per-layer mean CLS cosine similarity; entry `i` is for layer `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub num_layers: usize,
    pub mean_similarity: Vec<f64>,
    pub n_examples: usize,
}

/// u·v / (|u||v|), clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ContributionError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let uu: f64 = u.iter().map(|a| a * a).sum();
    let vv: f64 = v.iter().map(|a| a * a).sum();
    if uu == 0.0 || vv == 0.0 {
        return Err(ContributionError::ZeroNorm);
    }
    // sqrt(uu * vv) rather than sqrt(uu) * sqrt(vv) so that cosine(v, v) is exactly 1
    Ok((dot / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// Exactly rounded sum of `values` (Shewchuk's partials algorithm). The
/// result does not depend on the order of the inputs.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    // Round the partials (non-overlapping, increasing magnitude) to nearest.
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Cosine similarity of each consecutive pair of taps for one example.
pub fn example_similarities<T: Scalar>(taps: &[Vec<T>]) -> Result<Vec<f64>> {
    let widened: Vec<Vec<f64>> = taps
        .iter()
        .map(|t| t.iter().map(|v| v.as_f64()).collect())
        .collect();
    widened
        .windows(2)
        .map(|pair| cosine(&pair[0], &pair[1]))
        .collect()
}

pub fn similarity_profile<T: Scalar>(m: &EncoderModel<T>, data: &[TokenBatch]) -> Result<SimilarityProfile> {
    let layers = m.num_layers();
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); layers];
    for batch in data {
        let out = m.forward(batch)?;
        for taps in &out.taps.cls_states {
            for (i, s) in example_similarities(taps)?.into_iter().enumerate() {
                per_layer[i].push(s);
            }
        }
    }
    let n = per_layer.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(ContributionError::EmptyDataset);
    }
    let mean_similarity = per_layer
        .into_iter()
        .map(|sims| (exact_sum(sims) / n as f64).clamp(-1.0, 1.0))
        .collect();
    Ok(SimilarityProfile {
        num_layers: layers,
        mean_similarity,
        n_examples: n,
    })
}

/// Profile the model and select every layer scoring above `tau`. A plan that
/// selects all layers is returned as-is; surgery refuses to apply it.
pub fn score_and_plan<T: Scalar>(
    m: &EncoderModel<T>,
    data: &[TokenBatch],
    tau: f64,
) -> Result<(SimilarityProfile, DropPlan)> {
    let profile = similarity_profile(m, data)?;
    let plan = select_by_threshold(&profile, tau)?;
    Ok((profile, plan))
}
