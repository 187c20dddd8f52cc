//! Turning samples into model-ready batches, and batched prediction.
//!
//! Every stochastic transform draws from an rng derived from
//! `(seed, purpose, epoch, sample id)`, so any pass can be replayed exactly
//! regardless of batch composition or order.

use rand_chacha::ChaCha8Rng;

use crate::dataset::{Corpus, DatasetError, Sample};
use crate::model::{AgeModel, ModelError};
use crate::seed::{rng_for, tag};
use crate::tensor::Tensor;
use crate::transforms::{TransformError, TransformSpec};

pub fn sample_rng(seed: u64, purpose: &str, epoch: u64, id: &str) -> ChaCha8Rng {
    rng_for(seed, &[tag(purpose), epoch, tag(id)])
}

/// Where a pass draws its augmentation randomness from.
#[derive(Debug, Clone, Copy)]
pub struct PassKey<'a> {
    pub seed: u64,
    pub purpose: &'a str,
    pub epoch: u64,
}

pub fn build_batch<E>(
    corpus: &Corpus,
    samples: &[&Sample],
    transform: &TransformSpec,
    key: PassKey<'_>,
) -> Result<(Tensor, Vec<f64>), E>
where
    E: From<DatasetError> + From<TransformError> + From<ModelError>,
{
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let img = corpus.load_image(s)?;
        let mut rng = sample_rng(key.seed, key.purpose, key.epoch, &s.id);
        items.push(transform.apply(&img, &mut rng)?);
    }
    let batch = Tensor::stack(&items).map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
    Ok((batch, samples.iter().map(|s| s.age).collect()))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub targets: Vec<f64>,
    pub preds: Vec<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn mae(&self) -> f64 {
        if self.is_empty() {
            return f64::NAN;
        }
        self.preds
            .iter()
            .zip(&self.targets)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / self.len() as f64
    }
}

/// Runs the model over `samples` in its current mode, `batch_size` at a time.
pub fn predict<E>(
    model: &mut AgeModel,
    corpus: &Corpus,
    samples: &[&Sample],
    transform: &TransformSpec,
    key: PassKey<'_>,
    batch_size: usize,
) -> Result<Predictions, E>
where
    E: From<DatasetError> + From<TransformError> + From<ModelError>,
{
    let mut out = Predictions::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, targets) = build_batch::<E>(corpus, chunk, transform, key)?;
        let preds = model.forward(&x, None)?;
        out.ids.extend(chunk.iter().map(|s| s.id.clone()));
        out.targets.extend(targets);
        out.preds.extend(preds);
    }
    Ok(out)
}
