//! Synthetic-embedding generation from a trained decoder/generator:
//! sample a label, sample a standard-normal latent, decode.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::models::onehot_rows;
use crate::numerics::rng::{gaussian_sample, RngStream};
use crate::numerics::MlpStack;

/// A sampling distribution over class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn uniform(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Data("class distribution needs at least one class".into()));
        }
        Ok(Self { probs: vec![1.0 / num_classes as f64; num_classes] })
    }

    /// Explicit probabilities; must be non-negative and sum to 1 (within
    /// 1e-9, then renormalized exactly).
    pub fn explicit(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Data("class distribution needs at least one class".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Data(format!("class probabilities must be >= 0: {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("class probabilities sum to {sum}, expected 1")));
        }
        let probs = probs.iter().map(|p| p / sum).collect();
        Ok(Self { probs })
    }

    /// Empirical label frequencies of a local dataset.
    pub fn from_labels(labels: &[u32], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("cannot take label frequencies of an empty set".into()));
        }
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            if l as usize >= num_classes {
                return Err(Error::Data(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            counts[l as usize] += 1;
        }
        let n = labels.len() as f64;
        Ok(Self { probs: counts.into_iter().map(|c| c as f64 / n).collect() })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample(&self, rng: &mut RngStream) -> u32 {
        let u = rng.next_f64();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u <= acc {
                return i as u32;
            }
        }
        (self.probs.len() - 1) as u32
    }
}

/// Decode `n` synthetic embeddings: labels from `dist`, latents from
/// `N(0, I)`, rows = `decoder(concat(z, onehot(y)))`.
pub fn generate_embeddings(
    decoder: &MlpStack,
    n: usize,
    dist: &ClassDistribution,
    extractor_id: &str,
    rng: &mut RngStream,
) -> Result<EmbeddingDataset> {
    if n == 0 {
        return Err(Error::Data("generation needs n >= 1".into()));
    }
    let k = dist.num_classes();
    let in_dim = decoder.in_dim();
    if in_dim <= k {
        return Err(Error::Shape(format!(
            "decoder input width {in_dim} cannot hold a latent plus {k} label columns"
        )));
    }
    let latent = in_dim - k;
    let y: Vec<u32> = (0..n).map(|_| dist.sample(rng)).collect();
    let z = gaussian_sample(rng, n, latent);
    let x = decoder.forward(&z.hcat(&onehot_rows(&y, k)?)?)?;
    x.check_finite("generated embeddings")?;
    let meta = DatasetMeta {
        extractor_id: extractor_id.to_string(),
        source: "generated".into(),
        num_classes: k,
    };
    EmbeddingDataset::new(x, y, meta)
}
