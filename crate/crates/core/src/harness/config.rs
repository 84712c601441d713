//! Simulation configuration.
//!
//! The file format is flat TOML. Keys carry their units (`bandwidth_hz`,
//! `pmax_dbm`, ...). dB quantities are converted to linear SI units once,
//! by the accessors on [`SimConfig`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::ResourceBudget;
use crate::channel::{dbm_to_watts, ChannelParams};
use crate::engine::{Algorithm, StaleAggregation, StopRule};
use crate::error::{Error, Result};
use crate::fedmath::{LossKind, LossSpec};
use crate::scheduler::{CensorConfig, DEFAULT_INTENSITY, DEFAULT_MAX_STALENESS, DEFAULT_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    Iid,
    LabelShards,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaMode {
    /// `eta = 1 / L` from the pooled data.
    InverseL,
    /// Use the `eta` key.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub clients: usize,
    pub dim: usize,
    pub samples_per_client: usize,
    pub loss: LossKind,
    pub lambda: f64,
    /// Standard deviation of the label noise in the synthetic task.
    pub label_noise: f64,
    pub partition: PartitionMode,
    pub shards_per_client: usize,
    pub eta_mode: EtaMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub local_epochs: usize,
    pub window_k: usize,
    /// Censoring intensity `xi`; weights are `xi / (K N^2)` unless `delta`
    /// is given.
    pub censor_xi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    pub staleness_t0: usize,
    pub bandwidth_hz: f64,
    pub pmin_dbm: f64,
    pub pmax_dbm: f64,
    pub deadline_s: f64,
    /// Defaults to 32 bits per model coordinate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub packet_bits: Option<f64>,
    pub carrier_hz: f64,
    pub pathloss_exponent: f64,
    pub noise_dbm_per_hz: f64,
    pub fading_variance: f64,
    pub inner_radius_m: f64,
    pub outer_radius_m: f64,
    /// Sample transmission failures; `false` makes every granted upload
    /// arrive.
    pub outage: bool,
    pub rounds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub algorithm: Algorithm,
    pub aggregation: StaleAggregation,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            clients: 10,
            dim: 20,
            samples_per_client: 5,
            loss: LossKind::RidgeRegression,
            lambda: 0.1,
            label_noise: 0.1,
            partition: PartitionMode::Iid,
            shards_per_client: 2,
            eta_mode: EtaMode::InverseL,
            eta: None,
            local_epochs: 1,
            window_k: DEFAULT_WINDOW,
            censor_xi: DEFAULT_INTENSITY,
            delta: None,
            staleness_t0: DEFAULT_MAX_STALENESS,
            bandwidth_hz: 20e6,
            pmin_dbm: 0.0,
            pmax_dbm: 20.0,
            deadline_s: 6e-5,
            packet_bits: None,
            carrier_hz: 3e9,
            pathloss_exponent: 2.9,
            noise_dbm_per_hz: -174.0,
            fading_variance: 1.0,
            inner_radius_m: 10.0,
            outer_radius_m: 500.0,
            outage: true,
            rounds: 200,
            epsilon: None,
            algorithm: Algorithm::Cefl,
            aggregation: StaleAggregation::StaleModels,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 || self.dim == 0 || self.samples_per_client == 0 {
            return bad("clients, dim and samples_per_client must be positive".into());
        }
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.label_noise >= 0.0) {
            return bad("label_noise must be >= 0".into());
        }
        if self.shards_per_client == 0 {
            return bad("shards_per_client must be positive".into());
        }
        if self.eta_mode == EtaMode::Explicit && !self.eta.is_some_and(|e| e > 0.0) {
            return bad("eta_mode = \"explicit\" needs a positive eta".into());
        }
        if self.local_epochs == 0 || self.window_k == 0 || self.staleness_t0 == 0 {
            return bad("local_epochs, window_k and staleness_t0 must be positive".into());
        }
        if !(self.censor_xi >= 0.0) {
            return bad("censor_xi must be >= 0".into());
        }
        if let Some(delta) = &self.delta {
            if delta.len() != self.window_k || delta.iter().any(|d| !(*d >= 0.0)) {
                return bad(format!("delta needs {} nonnegative entries", self.window_k));
            }
        }
        if !(self.bandwidth_hz >= 0.0) || !(self.deadline_s > 0.0) {
            return bad("bandwidth_hz must be >= 0 and deadline_s > 0".into());
        }
        if self.pmin_dbm > self.pmax_dbm {
            return bad("pmin_dbm exceeds pmax_dbm".into());
        }
        if self.packet_bits.is_some_and(|s| !(s > 0.0)) {
            return bad("packet_bits must be positive".into());
        }
        if !(self.inner_radius_m > 0.0 && self.inner_radius_m <= self.outer_radius_m) {
            return bad("need 0 < inner_radius_m <= outer_radius_m".into());
        }
        if self.epsilon.is_some_and(|e| !(e > 0.0)) {
            return bad("epsilon must be positive".into());
        }
        ChannelParams::new(
            self.carrier_hz,
            self.pathloss_exponent,
            dbm_to_watts(self.noise_dbm_per_hz),
            self.fading_variance,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        LossSpec::new(self.loss, self.lambda)
    }

    pub fn packet_bits(&self) -> f64 {
        self.packet_bits.unwrap_or(32.0 * self.dim as f64)
    }

    pub fn budget(&self) -> Result<ResourceBudget> {
        ResourceBudget::new(
            self.bandwidth_hz,
            dbm_to_watts(self.pmin_dbm),
            dbm_to_watts(self.pmax_dbm),
            self.deadline_s,
            self.packet_bits(),
        )
    }

    pub fn channel(&self) -> Result<ChannelParams> {
        ChannelParams::new(
            self.carrier_hz,
            self.pathloss_exponent,
            dbm_to_watts(self.noise_dbm_per_hz),
            self.fading_variance,
        )
    }

    pub fn censor(&self, eta: f64) -> Result<CensorConfig> {
        match &self.delta {
            Some(delta) => CensorConfig::new(delta.clone(), self.staleness_t0, self.clients, eta),
            None => CensorConfig::with_intensity(
                self.censor_xi,
                self.window_k,
                self.staleness_t0,
                self.clients,
                eta,
            ),
        }
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            max_rounds: self.rounds,
            target_gap: self.epsilon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = SimConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(SimConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn optional_keys_round_trip() {
        let cfg = SimConfig {
            eta_mode: EtaMode::Explicit,
            eta: Some(0.05),
            delta: Some(vec![0.1; 10]),
            packet_bits: Some(1234.0),
            epsilon: Some(1e-6),
            algorithm: Algorithm::CeflUniform,
            partition: PartitionMode::LabelShards,
            loss: LossKind::L2RegularizedLogistic,
            ..SimConfig::default()
        };
        assert_eq!(
            SimConfig::from_toml_str(&cfg.to_toml_string()).unwrap(),
            cfg
        );
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = SimConfig::from_toml_str("seed = 9\nalgorithm = \"fedavg-uniform\"\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.algorithm, Algorithm::FedavgUniform);
        assert_eq!(cfg.clients, 10);
        assert_eq!(cfg.packet_bits(), 640.0);
    }

    #[test]
    fn db_keys_convert_at_load() {
        let cfg = SimConfig::default();
        let b = cfg.budget().unwrap();
        assert!((b.p_max - 0.1).abs() < 1e-15);
        assert!((b.p_min - 1e-3).abs() < 1e-18);
        let ch = cfg.channel().unwrap();
        assert!((ch.noise_psd / 3.981_071_705_534_972e-21 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_files() {
        for text in [
            "clients = 0",
            "lambda = 0.0",
            "eta_mode = \"explicit\"",
            "unknown_key = 3",
            "partition = \"zipf\"",
            "delta = [0.1, 0.2]",
            "pmin_dbm = 30.0",
            "inner_radius_m = 600.0",
            "deadline_s = 0.0",
        ] {
            assert!(
                matches!(SimConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
