//! Metrics: accuracy, balanced accuracy, average 1-D Wasserstein fidelity,
//! and cross-client/cross-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::matrix::l2_norm;
use crate::numerics::rng::RngStream;

/// Fraction of predictions equal to the truth.
pub fn accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "accuracy: got {} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[u32], truth: &[u32], num_classes: usize) -> Result<f64> {
    if truth.is_empty() || pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "balanced accuracy: got {} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut support = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t as usize >= num_classes || p as usize >= num_classes {
            return Err(Error::Data(format!(
                "balanced accuracy: label out of range for {num_classes} classes"
            )));
        }
        support[t as usize] += 1;
        if p == t {
            correct[t as usize] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if support[c] > 0 {
            sum += correct[c] as f64 / support[c] as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

/// Exact 1-D W1 between two empirical distributions (uniform weights),
/// via the quantile-function integral. Quantile breakpoints are compared
/// in integer units of `1/(n*m)`, so unequal sample counts are exact.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("wasserstein_1d: empty sample set".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("non-finite value in wasserstein input"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("non-finite value in wasserstein input"));
    let n = a.len() as u64;
    let m = b.len() as u64;
    let denom = (n * m) as f64;
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut cur: u64 = 0; // current quantile level in units of 1/(n*m)
    let mut total = 0.0;
    while ia < a.len() && ib < b.len() {
        let next_a = (ia as u64 + 1) * m;
        let next_b = (ib as u64 + 1) * n;
        let next = next_a.min(next_b);
        total += ((next - cur) as f64 / denom) * (a[ia] - b[ib]).abs();
        cur = next;
        if next_a == next {
            ia += 1;
        }
        if next_b == next {
            ib += 1;
        }
    }
    Ok(total)
}

/// Per-dimension 1-D W1 between the two datasets' marginals, averaged over
/// dimensions.
pub fn wasserstein_avg(real: &EmbeddingDataset, synth: &EmbeddingDataset) -> Result<f64> {
    if real.d() != synth.d() {
        return Err(Error::Shape(format!(
            "wasserstein_avg: dimension mismatch {} vs {}",
            real.d(),
            synth.d()
        )));
    }
    let d = real.d();
    let mut total = 0.0;
    let mut col_a = vec![0.0; real.n()];
    let mut col_b = vec![0.0; synth.n()];
    for j in 0..d {
        for i in 0..real.n() {
            col_a[i] = real.x().get(i, j);
        }
        for i in 0..synth.n() {
            col_b[i] = synth.x().get(i, j);
        }
        total += wasserstein_1d(&col_a, &col_b)?;
    }
    Ok(total / d as f64)
}

/// Sliced W1: average the 1-D W1 of both datasets projected onto
/// `projections` random unit directions.
pub fn sliced_wasserstein(
    real: &EmbeddingDataset,
    synth: &EmbeddingDataset,
    projections: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if real.d() != synth.d() {
        return Err(Error::Shape(format!(
            "sliced_wasserstein: dimension mismatch {} vs {}",
            real.d(),
            synth.d()
        )));
    }
    if projections == 0 {
        return Err(Error::Data("sliced_wasserstein: need at least one projection".into()));
    }
    let d = real.d();
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        let norm = l2_norm(&dir).max(1e-12);
        for v in dir.iter_mut() {
            *v /= norm;
        }
        let proj = |ds: &EmbeddingDataset| -> Vec<f64> {
            (0..ds.n())
                .map(|i| ds.x().row(i).iter().zip(&dir).map(|(a, b)| a * b).sum())
                .collect()
        };
        total += wasserstein_1d(&proj(real), &proj(synth))?;
    }
    Ok(total / projections as f64)
}

/// Per-seed, per-client metric values aggregated clients-first, then seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seeds: Vec<u64>,
    /// `values[s][c]` is the metric for client `c` under seed `s`.
    pub per_seed_client_values: Vec<Vec<f64>>,
    pub per_seed_means: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across the per-seed means.
    pub std: f64,
}

/// Mean over clients within each seed, then mean and population std over
/// seeds.
pub fn aggregate_report(seeds: &[u64], values: &[Vec<f64>]) -> Result<MetricReport> {
    if seeds.is_empty() || seeds.len() != values.len() {
        return Err(Error::Data(format!(
            "aggregate_report: {} seeds with {} value rows",
            seeds.len(),
            values.len()
        )));
    }
    let mut per_seed_means = Vec::with_capacity(seeds.len());
    for (s, clients) in values.iter().enumerate() {
        if clients.is_empty() {
            return Err(Error::Data(format!("aggregate_report: seed {} has no clients", seeds[s])));
        }
        per_seed_means.push(clients.iter().sum::<f64>() / clients.len() as f64);
    }
    let mean = per_seed_means.iter().sum::<f64>() / per_seed_means.len() as f64;
    let var = per_seed_means.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / per_seed_means.len() as f64;
    Ok(MetricReport {
        seeds: seeds.to_vec(),
        per_seed_client_values: values.to_vec(),
        per_seed_means,
        mean,
        std: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;
    use crate::numerics::rng::{Purpose, StreamId};
    use crate::numerics::Matrix;

    fn ds(cols: &[Vec<f64>]) -> EmbeddingDataset {
        let n = cols[0].len();
        let d = cols.len();
        let mut x = Matrix::zeros(n, d);
        for (j, col) in cols.iter().enumerate() {
            for i in 0..n {
                x.row_mut(i)[j] = col[i];
            }
        }
        let meta = DatasetMeta { extractor_id: String::new(), source: "test".into(), num_classes: 1 };
        EmbeddingDataset::new(x, vec![0; n], meta).unwrap()
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn balanced_accuracy_per_class_recall() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        // Balanced binary truth, constant prediction: recalls 1 and 0.
        assert_eq!(balanced_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.5);
        let v = balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 0, 1], 2).unwrap();
        assert!((v - 5.0 / 6.0).abs() < 1e-15);
        // Classes absent from truth are excluded from the mean.
        let w = balanced_accuracy(&[0, 0], &[0, 0], 5).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn balanced_equals_plain_on_equal_support() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 1, 1, 1, 2, 0];
        let a = accuracy(&pred, &truth).unwrap();
        let b = balanced_accuracy(&pred, &truth, 3).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_1d_reference_points() {
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[3.0, 1.0, 2.0], &[2.0, 3.0, 1.0]).unwrap(), 0.0);
        // Unequal counts: {0} vs {0,1} couples half the mass at distance 1.
        assert_eq!(wasserstein_1d(&[0.0], &[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn wasserstein_avg_identity_symmetry_translation() {
        let a = ds(&[vec![0.0, 1.0, 2.0], vec![5.0, 5.0, 6.0]]);
        let b = ds(&[vec![0.5, 1.5, 1.0, 2.0], vec![5.0, 6.0, 5.5, 5.5]]);
        assert_eq!(wasserstein_avg(&a, &a).unwrap(), 0.0);
        let ab = wasserstein_avg(&a, &b).unwrap();
        let ba = wasserstein_avg(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        // Shift both by the same vector: unchanged.
        let shift = |d0: f64, d1: f64, s: &EmbeddingDataset| {
            let mut x = s.x().clone();
            for i in 0..x.rows() {
                x.row_mut(i)[0] += d0;
                x.row_mut(i)[1] += d1;
            }
            EmbeddingDataset::new(x, s.y().to_vec(), s.meta.clone()).unwrap()
        };
        let ab2 = wasserstein_avg(&shift(2.0, -3.0, &a), &shift(2.0, -3.0, &b)).unwrap();
        assert!((ab - ab2).abs() < 1e-12);
        // Shift one set in one dimension by c, otherwise identical sets:
        // that dimension contributes exactly |c|.
        let c = 1.75;
        let shifted = shift(c, 0.0, &a);
        let w = wasserstein_avg(&a, &shifted).unwrap();
        assert!((w - c / 2.0).abs() < 1e-12, "w {w}");
    }

    #[test]
    fn sliced_matches_axis_aligned_on_one_dimension() {
        // With d=2 and data varying only in dimension 0, every projection u
        // sees distance |u_0| * c; sliced averages over directions, so it is
        // bounded by the axis-aligned value.
        let a = ds(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let b = ds(&[vec![2.0, 2.0], vec![1.0, 1.0]]);
        let mut rng = RngStream::new(5, StreamId::new(0, 0, Purpose::Latent));
        let s = sliced_wasserstein(&a, &b, 64, &mut rng).unwrap();
        let full = wasserstein_avg(&a, &b).unwrap();
        assert!(s > 0.0 && s <= 2.0 * full + 1e-9, "sliced {s} vs avg {full}");
    }

    #[test]
    fn aggregate_clients_then_seeds() {
        let r = aggregate_report(&[1], &[vec![0.42]]).unwrap();
        assert_eq!(r.mean, 0.42);
        assert_eq!(r.std, 0.0);

        let r = aggregate_report(
            &[1, 2, 3],
            &[vec![0.6, 0.8], vec![0.8, 0.8], vec![0.9, 0.9]],
        )
        .unwrap();
        assert!((r.mean - 0.8).abs() < 1e-15);
        assert!((r.std - 0.0816496580927726).abs() < 1e-12);

        // Permuting clients within a seed changes nothing.
        let p = aggregate_report(
            &[1, 2, 3],
            &[vec![0.8, 0.6], vec![0.8, 0.8], vec![0.9, 0.9]],
        )
        .unwrap();
        assert_eq!(p.mean, r.mean);
        assert_eq!(p.std, r.std);
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(aggregate_report(&[], &[]).is_err());
        assert!(aggregate_report(&[1], &[vec![]]).is_err());
    }
}
