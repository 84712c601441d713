//! Synthetic tasks and client partitioning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fedmath::{ClientDataset, LossKind, LossSpec};
use crate::rng::{Purpose, Streams};

/// Labeled samples before they are split across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Result<ClientDataset> {
        ClientDataset::new(
            self.dim,
            idx.iter().map(|&i| self.rows[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// A planted-model task.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub pool: Pool,
    /// Ground-truth model the labels were generated from.
    pub planted: Vec<f64>,
}

/// Standard Gaussian features; ridge labels are `x.w + noise`, logistic
/// labels are the sign of the same quantity.
pub fn synth_task<R: Rng + ?Sized>(
    rng: &mut R,
    samples: usize,
    dim: usize,
    spec: &LossSpec,
    noise: f64,
) -> SyntheticTask {
    let planted: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut rows = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let z: f64 = rng.sample(StandardNormal);
        let score = x.iter().zip(&planted).map(|(a, b)| a * b).sum::<f64>() + noise * z;
        labels.push(match spec.kind() {
            LossKind::RidgeRegression => score,
            LossKind::L2RegularizedLogistic => {
                if score >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        });
        rows.push(x);
    }
    SyntheticTask {
        pool: Pool { dim, rows, labels },
        planted,
    }
}

/// Uniform random split into `n` equal pieces. Leftover samples (when the
/// pool size is not a multiple of `n`) are dropped.
pub fn partition_iid<R: Rng + ?Sized>(
    pool: &Pool,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ClientDataset>> {
    if n == 0 || pool.len() < n {
        return Err(Error::invalid(format!(
            "cannot split {} samples across {n} clients",
            pool.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    let per = pool.len() / n;
    idx.chunks_exact(per)
        .take(n)
        .map(|c| pool.subset(c))
        .collect()
}

/// Label-sorted shards: the pool is sorted by label, cut into
/// `n * shards_per_client` contiguous shards, and each client draws
/// `shards_per_client` of them without replacement.
///
/// The pool is truncated to a multiple of `n * shards_per_client` (the
/// highest-index samples are dropped before sorting).
pub fn partition_noniid<R: Rng + ?Sized>(
    pool: &Pool,
    n: usize,
    shards_per_client: usize,
    rng: &mut R,
) -> Result<Vec<ClientDataset>> {
    let shards = n * shards_per_client;
    if shards == 0 || pool.len() < shards {
        return Err(Error::invalid(format!(
            "cannot cut {} samples into {shards} shards",
            pool.len()
        )));
    }
    let usable = pool.len() - pool.len() % shards;
    let mut order: Vec<usize> = (0..usable).collect();
    order.sort_by(|&a, &b| pool.labels[a].total_cmp(&pool.labels[b]).then(a.cmp(&b)));
    let shard_len = usable / shards;

    let mut shard_ids: Vec<usize> = (0..shards).collect();
    shard_ids.shuffle(rng);
    shard_ids
        .chunks_exact(shards_per_client)
        .map(|mine| {
            let idx: Vec<usize> = mine
                .iter()
                .flat_map(|&s| order[s * shard_len..(s + 1) * shard_len].iter().copied())
                .collect();
            pool.subset(&idx)
        })
        .collect()
}

/// `n` equal IID client datasets from one seed.
pub fn synth_dataset(
    seed: u64,
    n: usize,
    dim: usize,
    samples_per_client: usize,
    spec: &LossSpec,
    noise: f64,
) -> Result<Vec<ClientDataset>> {
    let streams = Streams::new(seed);
    let task = synth_task(
        &mut streams.global(Purpose::Dataset),
        n * samples_per_client,
        dim,
        spec,
        noise,
    );
    partition_iid(&task.pool, n, &mut streams.global(Purpose::Partition))
}
