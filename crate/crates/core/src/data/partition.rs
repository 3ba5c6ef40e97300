//! Assigning samples to federation clients: IID and Dirichlet non-IID.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

/// How many whole-plan redraws we attempt before repairing empty clients
/// by moving samples from the largest client.
const MAX_RESAMPLES: usize = 100;

/// A partition of sample indices across `client_count` clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub client_count: usize,
    /// Client id per sample, indexed by sample position.
    pub assignment: Vec<u32>,
    /// Samples per client; sums to `assignment.len()`.
    pub counts: Vec<usize>,
}

impl PartitionPlan {
    fn from_assignment(client_count: usize, assignment: Vec<u32>) -> Result<Self> {
        let mut counts = vec![0usize; client_count];
        for &c in &assignment {
            if c as usize >= client_count {
                return Err(Error::Data(format!("client id {c} out of range")));
            }
            counts[c as usize] += 1;
        }
        let plan = Self { client_count, assignment, counts };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.len() != self.client_count {
            return Err(Error::Data("partition counts do not match client count".into()));
        }
        if self.counts.iter().sum::<usize>() != self.assignment.len() {
            return Err(Error::Data("partition counts do not sum to sample count".into()));
        }
        if let Some(m) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("client {m} is empty")));
        }
        Ok(())
    }

    /// Indices owned by client `m`, in original sample order.
    pub fn client_indices(&self, m: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c as usize == m)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Random near-equal split: the first `n mod M` clients receive one extra
/// sample.
pub fn partition_iid(
    dataset: &EmbeddingDataset,
    clients: usize,
    rng: &mut RngStream,
) -> Result<PartitionPlan> {
    let n = dataset.n();
    if clients == 0 || clients > n {
        return Err(Error::Data(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    let perm = rng.permutation(n);
    let base = n / clients;
    let extra = n % clients;
    let mut assignment = vec![0u32; n];
    let mut cursor = 0usize;
    for m in 0..clients {
        let take = base + usize::from(m < extra);
        for &i in &perm[cursor..cursor + take] {
            assignment[i] = m as u32;
        }
        cursor += take;
    }
    PartitionPlan::from_assignment(clients, assignment)
}

/// Label-skewed split: for each class, client shares are drawn from
/// `Dir(alpha * 1_M)` and the class's samples assigned multinomially.
/// If a client ends empty the whole draw is retried a bounded number of
/// times; as a last resort one sample is moved from the largest client.
pub fn partition_dirichlet(
    dataset: &EmbeddingDataset,
    clients: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<PartitionPlan> {
    let n = dataset.n();
    if clients == 0 || clients > n {
        return Err(Error::Data(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Data(format!("dirichlet alpha must be > 0, got {alpha}")));
    }

    let k = dataset.k();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in dataset.y().iter().enumerate() {
        by_class[l as usize].push(i);
    }

    let mut assignment = vec![0u32; n];
    for attempt in 0..=MAX_RESAMPLES {
        let mut counts = vec![0usize; clients];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let props = dirichlet(alpha, clients, rng);
            for &i in class_indices {
                let m = sample_categorical(&props, rng);
                assignment[i] = m as u32;
                counts[m] += 1;
            }
        }
        if counts.iter().all(|&c| c > 0) {
            return PartitionPlan::from_assignment(clients, assignment);
        }
        if attempt == MAX_RESAMPLES {
            repair_empty_clients(&mut assignment, &mut counts, clients)?;
            return PartitionPlan::from_assignment(clients, assignment);
        }
    }
    unreachable!("loop always returns by the final attempt");
}

fn dirichlet(alpha: f64, m: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut gs: Vec<f64> = (0..m).map(|_| rng.next_gamma(alpha)).collect();
    let total: f64 = gs.iter().sum();
    if total <= 0.0 {
        // All gammas underflowed (tiny alpha): fall back to a single spike.
        let spike = rng.next_below(m);
        return (0..m).map(|i| if i == spike { 1.0 } else { 0.0 }).collect();
    }
    for g in gs.iter_mut() {
        *g /= total;
    }
    gs
}

fn sample_categorical(probs: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u <= acc {
            return i;
        }
    }
    probs.len() - 1
}

fn repair_empty_clients(
    assignment: &mut [u32],
    counts: &mut [usize],
    clients: usize,
) -> Result<()> {
    for m in 0..clients {
        while counts[m] == 0 {
            let largest = (0..clients).max_by_key(|&c| counts[c]).unwrap();
            if counts[largest] < 2 {
                return Err(Error::Data(format!(
                    "dirichlet partition retry bound exceeded with unfixable empty client \
                     ({} samples across {clients} clients)",
                    assignment.len()
                )));
            }
            // Move the last-indexed sample of the largest client.
            let i = assignment
                .iter()
                .rposition(|&c| c as usize == largest)
                .expect("largest client has samples");
            assignment[i] = m as u32;
            counts[largest] -= 1;
            counts[m] += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, DatasetMeta, EmbeddingDataset};
    use crate::numerics::rng::{Purpose, StreamId};
    use crate::numerics::Matrix;

    fn stream(seed: u64) -> RngStream {
        RngStream::new(seed, StreamId::new(0, 0, Purpose::Partition))
    }

    fn labeled(n: usize, k: usize) -> EmbeddingDataset {
        let x = Matrix::zeros(n, 2);
        let y = (0..n).map(|i| (i % k) as u32).collect();
        let meta =
            DatasetMeta { extractor_id: String::new(), source: "test".into(), num_classes: k };
        EmbeddingDataset::new(x, y, meta).unwrap()
    }

    #[test]
    fn iid_even_split() {
        let plan = partition_iid(&labeled(100, 2), 10, &mut stream(1)).unwrap();
        assert!(plan.counts.iter().all(|&c| c == 10));
    }

    #[test]
    fn iid_remainder_to_first_clients() {
        let plan = partition_iid(&labeled(101, 2), 10, &mut stream(2)).unwrap();
        let mut sizes = plan.counts.clone();
        assert_eq!(sizes.remove(0), 11);
        assert!(sizes.iter().all(|&c| c == 10));
    }

    #[test]
    fn iid_class_frequencies_near_global() {
        // n=1e4, M=10, K=2 balanced: per-client class-0 share within 3 sigma
        // of 0.5 (binomial envelope, which dominates the hypergeometric).
        let ds = labeled(10_000, 2);
        let plan = partition_iid(&ds, 10, &mut stream(3)).unwrap();
        let sigma = (0.25f64 / 1000.0).sqrt();
        for m in 0..10 {
            let idx = plan.client_indices(m);
            let zeros = idx.iter().filter(|&&i| ds.y()[i] == 0).count() as f64;
            let share = zeros / idx.len() as f64;
            assert!((share - 0.5).abs() <= 3.0 * sigma, "client {m}: share {share}");
        }
    }

    #[test]
    fn dirichlet_exactness_and_no_empty() {
        let ds = labeled(500, 3);
        let plan = partition_dirichlet(&ds, 7, 0.3, &mut stream(4)).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.assignment.len(), 500);
        let union: usize = (0..7).map(|m| plan.client_indices(m).len()).sum();
        assert_eq!(union, 500);
    }

    #[test]
    fn dirichlet_huge_alpha_is_near_uniform() {
        // At alpha=1e6 the Dirichlet weights are essentially uniform; with
        // n=1e4 over two clients the remaining multinomial noise keeps each
        // client's class share within 1% of 0.5 at this fixed seed.
        let ds = labeled(10_000, 2);
        let plan = partition_dirichlet(&ds, 2, 1e6, &mut stream(5)).unwrap();
        for m in 0..2 {
            let idx = plan.client_indices(m);
            let zeros = idx.iter().filter(|&&i| ds.y()[i] == 0).count() as f64;
            let share = zeros / idx.len() as f64;
            assert!((share - 0.5).abs() < 0.01, "client {m}: share {share}");
        }
    }

    #[test]
    fn dirichlet_tiny_alpha_concentrates() {
        // alpha=0.01, K=2, M=2: most trials give some client >= 95% purity.
        let ds = labeled(100, 2);
        let mut hits = 0;
        for seed in 0..100 {
            let plan = partition_dirichlet(&ds, 2, 0.01, &mut stream(100 + seed)).unwrap();
            let dominated = (0..2).any(|m| {
                let idx = plan.client_indices(m);
                let zeros = idx.iter().filter(|&&i| ds.y()[i] == 0).count() as f64;
                let share = zeros / idx.len() as f64;
                share >= 0.95 || share <= 0.05
            });
            hits += usize::from(dominated);
        }
        assert!(hits >= 50, "only {hits}/100 trials concentrated");
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = labeled(300, 3);
        let a = partition_dirichlet(&ds, 5, 0.3, &mut stream(9)).unwrap();
        let b = partition_dirichlet(&ds, 5, 0.3, &mut stream(9)).unwrap();
        assert_eq!(a, b);
        let c = partition_iid(&ds, 5, &mut stream(9)).unwrap();
        let d = partition_iid(&ds, 5, &mut stream(9)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_more_clients_than_samples() {
        let ds = labeled(4, 2);
        assert!(partition_iid(&ds, 5, &mut stream(0)).is_err());
        assert!(partition_dirichlet(&ds, 5, 0.3, &mut stream(0)).is_err());
    }

    #[test]
    fn blob_partition_round_trips_through_subset() {
        let mut rng = RngStream::new(1, StreamId::new(0, 0, Purpose::Blobs));
        let ds = synth_blobs(3, 8, 40, 6.0, &mut rng).unwrap();
        let plan = partition_dirichlet(&ds, 4, 0.3, &mut stream(11)).unwrap();
        let total: usize = (0..4)
            .map(|m| ds.subset(&plan.client_indices(m)).unwrap().n())
            .sum();
        assert_eq!(total, ds.n());
    }
}
