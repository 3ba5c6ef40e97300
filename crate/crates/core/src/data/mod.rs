//! Embedding datasets: in-memory representation, file formats, synthetic
//! blob generation, client partitioning, and train/val/test splitting.

pub mod blobs;
pub mod csv;
pub mod femb;
pub mod partition;
pub mod split;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use blobs::synth_blobs;
pub use partition::{partition_dirichlet, partition_iid, PartitionPlan};
pub use split::{split_dataset, split_indices, SplitOutcome, SplitSpec};

/// Where a dataset came from and how many classes it has.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Identifier of the feature extractor that produced the embeddings.
    pub extractor_id: String,
    /// Short producer tag ("femb", "csv", "blobs", "generated").
    pub source: String,
    pub num_classes: usize,
}

/// A labeled embedding table: `n` rows of width `d`, labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    x: Matrix,
    y: Vec<u32>,
    pub meta: DatasetMeta,
}

impl EmbeddingDataset {
    pub fn new(x: Matrix, y: Vec<u32>, meta: DatasetMeta) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Data("dataset must contain at least one sample".into()));
        }
        if x.rows() != y.len() {
            return Err(Error::Data(format!(
                "dataset has {} rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if meta.num_classes == 0 {
            return Err(Error::Data("num_classes must be >= 1".into()));
        }
        if let Some(&bad) = y.iter().find(|&&l| l as usize >= meta.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                meta.num_classes
            )));
        }
        Ok(Self { x, y, meta })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[u32] {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn k(&self) -> usize {
        self.meta.num_classes
    }

    /// Row subset in the given index order; meta is carried over.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::Data(format!("subset index {bad} out of range for n={}", self.n())));
        }
        let x = self.x.select_rows(indices);
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Self::new(x, y, self.meta.clone())
    }

    /// Number of samples per class.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.meta.num_classes];
        for &l in &self.y {
            counts[l as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Femb,
    Csv,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("femb") => Ok(FileFormat::Femb),
            Some("csv") => Ok(FileFormat::Csv),
            other => Err(Error::Data(format!(
                "cannot infer file format from extension {other:?} (expected .femb or .csv)"
            ))),
        }
    }
}

pub fn load_dataset(path: &Path, format: FileFormat) -> Result<EmbeddingDataset> {
    match format {
        FileFormat::Femb => femb::load(path),
        FileFormat::Csv => csv::load(path),
    }
}

pub fn save_dataset(dataset: &EmbeddingDataset, path: &Path, format: FileFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    match format {
        FileFormat::Femb => femb::save(dataset, path),
        FileFormat::Csv => csv::save(dataset, path),
    }
}

#[cfg(test)]
pub(crate) fn toy_dataset() -> EmbeddingDataset {
    let x = Matrix::from_rows(&[
        vec![0.5, -0.5],
        vec![1.5, 2.5],
        vec![-1.0, 0.25],
        vec![3.0, -2.0],
    ])
    .unwrap();
    let meta = DatasetMeta {
        extractor_id: "toy".into(),
        source: "test".into(),
        num_classes: 3,
    };
    EmbeddingDataset::new(x, vec![0, 1, 2, 1], meta).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_label_out_of_range() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let meta = DatasetMeta { extractor_id: String::new(), source: "test".into(), num_classes: 2 };
        let err = EmbeddingDataset::new(x, vec![0, 2], meta).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let meta = DatasetMeta { extractor_id: String::new(), source: "test".into(), num_classes: 1 };
        assert!(EmbeddingDataset::new(Matrix::zeros(0, 3), vec![], meta.clone()).is_err());
        assert!(EmbeddingDataset::new(Matrix::zeros(2, 3), vec![0], meta).is_err());
    }

    #[test]
    fn subset_and_counts() {
        let ds = toy_dataset();
        assert_eq!(ds.label_counts(), vec![1, 2, 1]);
        let sub = ds.subset(&[3, 0]).unwrap();
        assert_eq!(sub.y(), &[1, 0]);
        assert_eq!(sub.x().row(0), &[3.0, -2.0]);
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(FileFormat::from_path(Path::new("a/b.femb")).unwrap(), FileFormat::Femb);
        assert_eq!(FileFormat::from_path(Path::new("x.csv")).unwrap(), FileFormat::Csv);
        assert!(FileFormat::from_path(Path::new("x.bin")).is_err());
    }
}
