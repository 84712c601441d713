//! Configuration, synthetic data, CSV output and the checks run on
//! finished simulations.

pub mod analysis;
pub mod config;
pub mod data;
pub mod instance;
pub mod report;

use rayon::prelude::*;

use crate::channel::place_clients;
use crate::engine::{Federation, RoundTrace, Simulation};
use crate::error::{Error, Result};
use crate::fedmath::{data_weights, optimal_value, smoothness_constants};
use crate::rng::{Purpose, Streams};

use config::{EtaMode, PartitionMode, SimConfig};
use data::{partition_iid, partition_noniid, synth_task};

/// Builds the static side of a run: data, placements, constants, optimum.
///
/// The optimum is `None` when the centralized solver does not converge;
/// gap columns are then left empty.
pub fn build_federation(config: &SimConfig) -> Result<Federation> {
    config.validate()?;
    let streams = Streams::new(config.seed);
    let spec = config.loss_spec()?;
    let n = config.clients;

    let task = synth_task(
        &mut streams.global(Purpose::Dataset),
        n * config.samples_per_client,
        config.dim,
        &spec,
        config.label_noise,
    );
    let mut split_rng = streams.global(Purpose::Partition);
    let datasets = match config.partition {
        PartitionMode::Iid => partition_iid(&task.pool, n, &mut split_rng)?,
        PartitionMode::LabelShards => {
            partition_noniid(&task.pool, n, config.shards_per_client, &mut split_rng)?
        }
    };

    let constants = smoothness_constants(&datasets, &spec)?;
    let eta = match config.eta_mode {
        EtaMode::InverseL => 1.0 / constants.l,
        EtaMode::Explicit => config.eta.expect("validated"),
    };
    let optimum = match optimal_value(&datasets, &spec) {
        Ok(opt) => Some(opt),
        Err(Error::OracleFailure(_)) => None,
        Err(e) => return Err(e),
    };
    let distances = place_clients(
        &mut streams.global(Purpose::Placement),
        n,
        config.inner_radius_m,
        config.outer_radius_m,
    );

    Ok(Federation {
        weights: data_weights(&datasets),
        datasets,
        distances,
        spec,
        constants,
        eta,
        epochs: config.local_epochs,
        censor: config.censor(eta)?,
        budget: config.budget()?,
        channel: config.channel()?,
        outage_enabled: config.outage,
        algorithm: config.algorithm,
        aggregation: config.aggregation,
        optimum,
    })
}

pub fn build_simulation(config: &SimConfig) -> Result<Simulation> {
    Simulation::new(build_federation(config)?, Streams::new(config.seed))
}

/// `count` consecutive seeds starting at `config.seed`.
pub fn sweep_seeds(config: &SimConfig, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|k| config.seed.wrapping_add(k))
        .collect()
}

/// One independent run per seed, in parallel; results are in seed order.
pub fn run_sweep(config: &SimConfig, seeds: &[u64]) -> Result<Vec<Vec<RoundTrace>>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SimConfig {
                seed,
                ..config.clone()
            };
            crate::engine::run_simulation(&cfg)
        })
        .collect()
}

/// Runs a seed sweep and checks the seed-mean gap against the geometric
/// envelope built from each run's per-round contraction factors.
///
/// Fails with [`Error::OracleFailure`] when the optimum is unknown, since
/// there is no gap to check.
pub fn envelope_check(config: &SimConfig, seeds: &[u64]) -> Result<analysis::RateReport> {
    let runs = run_sweep(config, seeds)?;
    let rhos = seeds
        .iter()
        .zip(&runs)
        .map(|(&seed, run)| {
            let fed = build_federation(&SimConfig {
                seed,
                ..config.clone()
            })?;
            if fed.optimum.is_none() {
                return Err(Error::OracleFailure(format!(
                    "seed {seed}: optimum did not converge"
                )));
            }
            analysis::run_rhos(&fed.constants, &fed.weights, run)
        })
        .collect::<Result<Vec<_>>>()?;
    analysis::verify_envelope(&runs, &rhos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedmath::LossKind;

    #[test]
    fn planted_ridge_model_is_recovered() {
        let cfg = SimConfig {
            samples_per_client: 200,
            label_noise: 0.01,
            lambda: 1e-4,
            ..SimConfig::default()
        };
        let task = synth_task(
            &mut Streams::new(cfg.seed).global(Purpose::Dataset),
            cfg.clients * cfg.samples_per_client,
            cfg.dim,
            &cfg.loss_spec().unwrap(),
            cfg.label_noise,
        );
        let fed = build_federation(&cfg).unwrap();
        let opt = fed.optimum.unwrap();
        let err: f64 = opt
            .w_star
            .iter()
            .zip(&task.planted)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = task.planted.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err / norm < 5e-3, "relative error {}", err / norm);
    }

    #[test]
    fn federation_matches_config() {
        let cfg = SimConfig {
            loss: LossKind::L2RegularizedLogistic,
            partition: PartitionMode::LabelShards,
            samples_per_client: 8,
            ..SimConfig::default()
        };
        let fed = build_federation(&cfg).unwrap();
        assert_eq!(fed.clients(), 10);
        assert!(fed.datasets.iter().all(|d| d.count() == 8));
        assert!((fed.eta * fed.constants.l - 1.0).abs() < 1e-15);
        assert!(fed.distances.iter().all(|d| (10.0..=500.0).contains(d)));
        assert_eq!(fed.budget.packet_bits, 640.0);
    }

    #[test]
    fn sweep_is_in_seed_order() {
        let cfg = SimConfig {
            rounds: 3,
            ..SimConfig::default()
        };
        let seeds = sweep_seeds(&cfg, 3);
        let runs = run_sweep(&cfg, &seeds).unwrap();
        for (seed, run) in seeds.iter().zip(&runs) {
            let single = crate::engine::run_simulation(&SimConfig {
                seed: *seed,
                ..cfg.clone()
            })
            .unwrap();
            assert_eq!(&single, run);
        }
    }
}
