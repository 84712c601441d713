//! Single allocator instances read from TOML, for the `allocate` command.
//!
//! ```toml
//! bandwidth_hz = 20e6
//! pmin_dbm = 0.0
//! pmax_dbm = 20.0
//! deadline_s = 6e-5
//! packet_bits = 640.0
//! noise_dbm_per_hz = -174.0
//!
//! [[clients]]
//! id = 0
//! gain = 1e-10
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::ResourceBudget;
use crate::channel::{dbm_to_watts, ChannelRealization};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceClient {
    pub id: usize,
    /// Linear channel gain `|h|^2`.
    pub gain: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationInstance {
    pub bandwidth_hz: f64,
    pub pmin_dbm: f64,
    pub pmax_dbm: f64,
    pub deadline_s: f64,
    pub packet_bits: f64,
    pub noise_dbm_per_hz: f64,
    #[serde(default)]
    pub clients: Vec<InstanceClient>,
}

impl AllocationInstance {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let inst: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        inst.budget().map_err(|e| Error::Config(e.to_string()))?;
        let mut ids: Vec<usize> = inst.clients.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != inst.clients.len() {
            return Err(Error::Config("client ids must be unique".into()));
        }
        if inst
            .clients
            .iter()
            .any(|c| !(c.gain >= 0.0 && c.gain.is_finite()))
        {
            return Err(Error::Config("gains must be finite and nonnegative".into()));
        }
        Ok(inst)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn budget(&self) -> Result<ResourceBudget> {
        ResourceBudget::new(
            self.bandwidth_hz,
            dbm_to_watts(self.pmin_dbm),
            dbm_to_watts(self.pmax_dbm),
            self.deadline_s,
            self.packet_bits,
        )
    }

    pub fn noise_psd(&self) -> f64 {
        dbm_to_watts(self.noise_dbm_per_hz)
    }

    pub fn realizations(&self) -> Vec<ChannelRealization> {
        self.clients
            .iter()
            .map(|c| ChannelRealization {
                client_id: c.id,
                distance_m: c.distance_m.unwrap_or(f64::NAN),
                gain: c.gain,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::linear_search_allocate;

    const TEXT: &str = r#"
bandwidth_hz = 20e6
pmin_dbm = 0.0
pmax_dbm = 20.0
deadline_s = 6e-5
packet_bits = 640.0
noise_dbm_per_hz = -174.0

[[clients]]
id = 3
gain = 1e-10

[[clients]]
id = 7
gain = 1e-16
"#;

    #[test]
    fn parses_and_allocates() {
        let inst = AllocationInstance::from_toml_str(TEXT).unwrap();
        let plan = linear_search_allocate(
            &inst.realizations(),
            &inst.budget().unwrap(),
            inst.noise_psd(),
        );
        assert_eq!(plan.admitted_ids(), vec![3]);
    }

    #[test]
    fn rejects_duplicates_and_bad_budgets() {
        let dup = TEXT.replace("id = 7", "id = 3");
        assert!(matches!(
            AllocationInstance::from_toml_str(&dup),
            Err(Error::Config(_))
        ));
        let bad = TEXT.replace("deadline_s = 6e-5", "deadline_s = -1.0");
        assert!(matches!(
            AllocationInstance::from_toml_str(&bad),
            Err(Error::Config(_))
        ));
    }
}
