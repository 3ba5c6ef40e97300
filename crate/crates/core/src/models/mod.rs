//! Generative models (conditional VAE and conditional GAN) and the linear
//! classifier used downstream, plus synthetic-embedding generation.

pub mod cgan;
pub mod cvae;
pub mod generate;
pub mod linear;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use cgan::{bce_with_logits, CganDims, CganParams, DiscBackward};
pub use cvae::{kl_to_standard_normal, CvaeBackward, CvaeDims, CvaeParams};
pub use generate::{generate_embeddings, ClassDistribution};
pub use linear::LinearParams;

/// One-hot label rows: `n x K` with a single 1 per row.
pub fn onehot_rows(labels: &[u32], num_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(Error::Data(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        m.row_mut(i)[l as usize] = 1.0;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn onehot_basics() {
        let m = onehot_rows(&[2, 0], 3).unwrap();
        assert_eq!(m.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(m.row(1), &[1.0, 0.0, 0.0]);
        assert!(onehot_rows(&[3], 3).is_err());
    }
}
