//! Mixed real and synthetic minibatches.

use rand::Rng;

use crate::dynamics::ModelBuffer;
use crate::error::{LabError, Result};
use crate::mdp::{OfflineDataset, Transition};

/// `ceil(f * batch_size)` rows from the dataset, the rest from the model buffer.
pub fn mixed_batch<R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    buffer: &ModelBuffer,
    batch_size: usize,
    real_ratio: f64,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    if !(0.0..=1.0).contains(&real_ratio) {
        return Err(LabError::Domain(format!("real data ratio must lie in [0, 1], got {real_ratio}")));
    }
    let n_real = ((real_ratio * batch_size as f64).ceil() as usize).min(batch_size);
    let n_model = batch_size - n_real;
    if n_real > 0 && dataset.is_empty() {
        return Err(LabError::EmptySource("offline dataset is empty".into()));
    }
    let mut out = dataset.batch(&dataset.sample_indices(n_real, rng));
    if n_model > 0 {
        out.extend(buffer.sample(n_model, rng)?);
    }
    Ok(out)
}
