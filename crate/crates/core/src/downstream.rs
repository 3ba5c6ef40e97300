//! Personalized downstream classification: per-client linear classifiers
//! combined by validation-tuned probability interpolation.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::eval::balanced_accuracy;
use crate::models::linear::argmax;
use crate::models::LinearParams;
use crate::numerics::{adam_step, AdamParams, Matrix, OptimizerState};

/// The interpolation weight grid: exactly {0.0, 0.1, ..., 1.0}.
pub fn lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Downstream classifier training parameters. Defaults: Adam at 1e-3 for
/// 100 epochs, batch size 64.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 100, batch_size: 64, seed: 0 }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("downstream epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("downstream batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "downstream learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Train a softmax classifier with Adam on mean cross-entropy. Batches are
/// taken in dataset order (no shuffling), which makes training a pure
/// function of the dataset; the loss is a batch mean, so duplicating every
/// row while doubling the batch size leaves the trajectory unchanged.
pub fn train_linear(train: &EmbeddingDataset, spec: &TrainSpec) -> Result<(LinearParams, Vec<String>)> {
    spec.validate()?;
    let mut warnings = Vec::new();
    let present = train.label_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        warnings.push(format!(
            "training set contains {present} distinct class(es); classifier will be degenerate"
        ));
    }

    let mut params = LinearParams::zeros(train.d(), train.k());
    let hp = AdamParams { lr: spec.learning_rate, ..AdamParams::default() };
    let mut state = OptimizerState::new(params.param_count());
    let mut flat = params.flatten();
    let n = train.n();
    for _ in 0..spec.epochs {
        let mut start = 0;
        while start < n {
            let end = (start + spec.batch_size).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let xb = train.x().select_rows(&idx);
            let yb: Vec<u32> = idx.iter().map(|&i| train.y()[i]).collect();
            let (_, grad) = params.cross_entropy_and_grad(&xb, &yb)?;
            adam_step(&mut flat, &grad, &mut state, &hp);
            params.set_from_flat(&flat)?;
            start = end;
        }
    }
    Ok((params, warnings))
}

/// Personalized classifier: convex combination of local and global class
/// probabilities, `lambda * p_local + (1 - lambda) * p_global`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatedClassifier {
    pub local: LinearParams,
    pub global_: LinearParams,
    pub lambda: f64,
}

impl InterpolatedClassifier {
    pub fn new(local: LinearParams, global_: LinearParams, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must be in [0,1], got {lambda}")));
        }
        if local.d() != global_.d() || local.k() != global_.k() {
            return Err(Error::Shape(format!(
                "local ({par_l}x{k_l}) and global ({par_g}x{k_g}) classifiers disagree",
                par_l = local.d(),
                k_l = local.k(),
                par_g = global_.d(),
                k_g = global_.k()
            )));
        }
        Ok(Self { local, global_, lambda })
    }

    /// `lambda * P_local + (1 - lambda) * P_global`, rows summing to 1.
    pub fn interpolate_proba(&self, x: &Matrix) -> Result<Matrix> {
        let pl = self.local.predict_proba(x)?;
        let pg = self.global_.predict_proba(x)?;
        Ok(mix(&pl, &pg, self.lambda))
    }

    /// Argmax of the interpolated probabilities; ties go to the lowest
    /// class id.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<u32>> {
        let p = self.interpolate_proba(x)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i)) as u32).collect())
    }
}

fn mix(pl: &Matrix, pg: &Matrix, lambda: f64) -> Matrix {
    let mut out = pl.clone();
    for (o, &g) in out.data_mut().iter_mut().zip(pg.data()) {
        *o = lambda * *o + (1.0 - lambda) * g;
    }
    out
}

/// Pick the grid lambda maximizing validation balanced accuracy; ties break
/// toward larger lambda (prefer the local model when indifferent).
pub fn select_lambda(
    local: &LinearParams,
    global_: &LinearParams,
    val: &EmbeddingDataset,
) -> Result<f64> {
    if val.n() == 0 {
        return Err(Error::Data("lambda selection needs a non-empty validation set".into()));
    }
    let pl = local.predict_proba(val.x())?;
    let pg = global_.predict_proba(val.x())?;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for lambda in lambda_grid() {
        let p = mix(&pl, &pg, lambda);
        let pred: Vec<u32> = (0..p.rows()).map(|i| argmax(p.row(i)) as u32).collect();
        let score = balanced_accuracy(&pred, val.y(), val.k())?;
        if score >= best.0 {
            best = (score, lambda);
        }
    }
    Ok(best.1)
}
