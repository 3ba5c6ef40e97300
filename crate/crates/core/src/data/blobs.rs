//! Synthetic Gaussian-blob embeddings for desk-scale experiments.
//!
//! Class means sit on mutually orthonormal random directions scaled to
//! `s / sqrt(2)`, which puts every pair of means at distance exactly `s`.
//! Samples are unit-variance Gaussians around their class mean.

use crate::data::{DatasetMeta, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, l2_norm};
use crate::numerics::rng::RngStream;
use crate::numerics::Matrix;

pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<EmbeddingDataset> {
    if num_classes < 2 || dim < 2 {
        return Err(Error::Data(format!(
            "blobs need K >= 2 and d >= 2, got K={num_classes}, d={dim}"
        )));
    }
    if n_per_class < 1 {
        return Err(Error::Data("blobs need n_per_class >= 1".into()));
    }
    if num_classes > dim {
        return Err(Error::Data(format!(
            "blobs need K <= d for orthogonal means, got K={num_classes}, d={dim}"
        )));
    }
    if !(separation >= 0.0) {
        return Err(Error::Data(format!("separation must be >= 0, got {separation}")));
    }

    let directions = orthonormal_directions(num_classes, dim, rng);
    let scale = separation / std::f64::consts::SQRT_2;

    let n = num_classes * n_per_class;
    let mut x = Matrix::zeros(n, dim);
    let mut y = Vec::with_capacity(n);
    for c in 0..num_classes {
        for i in 0..n_per_class {
            let row = x.row_mut(c * n_per_class + i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = scale * directions[c][j] + rng.next_gaussian();
            }
            y.push(c as u32);
        }
    }

    let meta = DatasetMeta {
        extractor_id: "synthetic-blobs".into(),
        source: "blobs".into(),
        num_classes,
    };
    EmbeddingDataset::new(x, y, meta)
}

/// `k` orthonormal vectors in `R^dim` via Gram-Schmidt on Gaussian draws;
/// near-degenerate draws are rejected and redrawn.
fn orthonormal_directions(k: usize, dim: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while dirs.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        for u in &dirs {
            let proj = dot(&v, u);
            for (vi, &ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let norm = l2_norm(&v);
        if norm < 1e-8 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        dirs.push(v);
    }
    dirs
}
