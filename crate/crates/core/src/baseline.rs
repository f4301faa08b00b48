//! Centralised Gibbs tracker on the pooled measurements of all sensors.

use crate::error::{Error, Result};
use crate::ep::moment_match;
use crate::gaussian::GaussianBelief;
use crate::gibbs::{run_gibbs, GibbsConfig, MeasurementItem};
use crate::model::{MeasurementSet, SensorModel};

/// All sensors' measurements, each tagged with its sensor id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PooledMeasurements {
    pub items: Vec<MeasurementItem>,
}

impl PooledMeasurements {
    /// Concatenates per-sensor sets in ascending sensor order.
    pub fn from_sets(sets: &[MeasurementSet]) -> Self {
        let items = sets
            .iter()
            .enumerate()
            .flat_map(|(sensor, set)| {
                set.points
                    .iter()
                    .map(move |&point| MeasurementItem { point, sensor })
            })
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Posterior of one step from pooled data, with the prior in place of a cavity.
pub fn centralized_gibbs_step(
    prior: &[GaussianBelief],
    pooled: &PooledMeasurements,
    sensors: &[SensorModel],
    cfg: &GibbsConfig,
) -> Result<Vec<GaussianBelief>> {
    if let Some(item) = pooled.items.iter().find(|i| i.sensor >= sensors.len()) {
        return Err(Error::DimensionMismatch {
            expected: sensors.len(),
            actual: item.sensor + 1,
        });
    }
    if pooled.is_empty() {
        return Ok(prior.to_vec());
    }
    let out = run_gibbs(prior, &pooled.items, sensors, cfg)?;
    moment_match(&out.mixture)
}
