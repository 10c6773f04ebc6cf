use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PerSampleGradStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilitySource {
    ProbingGradNorm,
    RunningLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientUtility {
    pub client_id: usize,
    pub utility: f64,
    pub source: UtilitySource,
}

/// `|B| * sqrt(mean(v^2))` over per-sample values `v`.
pub fn statistical_utility(size: usize, values: &[f64]) -> Result<f64> {
    if size != values.len() {
        return Err(Error::config(format!(
            "client reports {size} samples but {} per-sample values",
            values.len()
        )));
    }
    if size == 0 {
        return Ok(0.0);
    }
    let n = size as f64;
    let mean_square = values.iter().map(|v| v * v).sum::<f64>() / n;
    let u = n * mean_square.sqrt();
    if !u.is_finite() {
        return Err(Error::Numeric(format!("utility is not finite ({u})")));
    }
    Ok(u)
}

fn check_coverage<V>(sizes: &BTreeMap<usize, usize>, values: &BTreeMap<usize, V>) -> Result<()> {
    if let Some(missing) = sizes.keys().find(|id| !values.contains_key(id)) {
        return Err(Error::config(format!("no per-sample values for client {missing}")));
    }
    if let Some(extra) = values.keys().find(|id| !sizes.contains_key(id)) {
        return Err(Error::config(format!("client {extra} has values but no size")));
    }
    Ok(())
}

/// Utility from per-sample gradient norms gathered in the probing round.
pub fn probing_utility(
    sizes: &BTreeMap<usize, usize>,
    grad_stats: &BTreeMap<usize, PerSampleGradStats>,
) -> Result<Vec<ClientUtility>> {
    check_coverage(sizes, grad_stats)?;
    sizes
        .iter()
        .map(|(&client_id, &size)| {
            let stats = &grad_stats[&client_id];
            if stats.count != stats.norms.len() {
                return Err(Error::config(format!(
                    "client {client_id} gradient stats are inconsistent"
                )));
            }
            let utility = statistical_utility(size, &stats.norms)
                .map_err(|e| e.context(format!("client {client_id}")))?;
            Ok(ClientUtility {
                client_id,
                utility,
                source: UtilitySource::ProbingGradNorm,
            })
        })
        .collect()
}

/// Loss-based utility, the same aggregate applied to per-sample losses.
pub fn loss_utility(
    sizes: &BTreeMap<usize, usize>,
    per_sample_losses: &BTreeMap<usize, Vec<f64>>,
) -> Result<Vec<ClientUtility>> {
    check_coverage(sizes, per_sample_losses)?;
    sizes
        .iter()
        .map(|(&client_id, &size)| {
            let utility = statistical_utility(size, &per_sample_losses[&client_id])
                .map_err(|e| e.context(format!("client {client_id}")))?;
            Ok(ClientUtility {
                client_id,
                utility,
                source: UtilitySource::RunningLoss,
            })
        })
        .collect()
}

/// Keeps every client whose utility is at least `c` times the largest one.
pub fn threshold_filter(utilities: &[ClientUtility], c: f64) -> Result<BTreeSet<usize>> {
    if utilities.is_empty() {
        return Err(Error::config("threshold filter needs at least one utility"));
    }
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::config(format!("threshold coefficient must lie in [0, 1], got {c}")));
    }
    if let Some(bad) = utilities.iter().find(|u| !(u.utility.is_finite() && u.utility >= 0.0)) {
        return Err(Error::config(format!(
            "client {} has invalid utility {}",
            bad.client_id, bad.utility
        )));
    }
    let max = utilities.iter().map(|u| u.utility).fold(0.0, f64::max);
    let cutoff = c * max;
    Ok(utilities
        .iter()
        .filter(|u| u.utility >= cutoff)
        .map(|u| u.client_id)
        .collect())
}
