//! Duration thresholds separating short (inside) from long (outside) gaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ThresholdMode;
use crate::model::DeviceId;
use crate::store::RawEvent;

const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_low_s: f64,
    pub tau_high_s: f64,
    /// True when too few devices were available and defaults were used.
    pub from_defaults: bool,
}

/// `mu -/+ 1.96 sigma` of per-device mean inter-event durations (or of the
/// mean's standard error in `MeanCi` mode), floored at one second.
pub fn thresholds_from_means(means: &[f64], mode: ThresholdMode, defaults: (f64, f64)) -> Thresholds {
    if means.len() < 2 {
        return Thresholds {
            tau_low_s: defaults.0,
            tau_high_s: defaults.1,
            from_defaults: true,
        };
    }
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    let sigma = (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n).sqrt();
    let spread = match mode {
        ThresholdMode::Population => Z95 * sigma,
        ThresholdMode::MeanCi => Z95 * sigma / n.sqrt(),
    };
    Thresholds {
        tau_low_s: (mu - spread).max(1.0),
        tau_high_s: (mu + spread).max(1.0),
        from_defaults: false,
    }
}

/// Mean gap between consecutive events, per device with at least two events.
pub fn per_device_mean_intervals(events: &[RawEvent]) -> BTreeMap<DeviceId, f64> {
    let mut times: BTreeMap<&DeviceId, Vec<i64>> = BTreeMap::new();
    for e in events {
        times.entry(&e.device).or_default().push(e.t);
    }
    times
        .into_iter()
        .filter(|(_, ts)| ts.len() >= 2)
        .map(|(d, mut ts)| {
            ts.sort_unstable();
            let span = (ts[ts.len() - 1] - ts[0]) as f64;
            (d.clone(), span / (ts.len() - 1) as f64)
        })
        .collect()
}

pub fn estimate_thresholds(events: &[RawEvent], mode: ThresholdMode, defaults: (f64, f64)) -> Thresholds {
    let means: Vec<f64> = per_device_mean_intervals(events).into_values().collect();
    thresholds_from_means(&means, mode, defaults)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ApId;

    const DEFAULTS: (f64, f64) = (1200.0, 10_800.0);

    #[test]
    fn population_of_97_and_41_minutes() {
        // mean 97 min, sd 41 min over a symmetric two-point population
        let m = [56.0 * 60.0, 138.0 * 60.0];
        let t = thresholds_from_means(&m, ThresholdMode::Population, DEFAULTS);
        assert!((t.tau_low_s / 60.0 - (97.0 - 1.96 * 41.0)).abs() < 1e-9);
        assert!((t.tau_high_s / 60.0 - (97.0 + 1.96 * 41.0)).abs() < 1e-9);
    }

    #[test]
    fn identical_means_collapse_both_thresholds() {
        let t = thresholds_from_means(&[600.0; 5], ThresholdMode::Population, DEFAULTS);
        assert_eq!(t.tau_low_s, 600.0);
        assert_eq!(t.tau_high_s, 600.0);
    }

    #[test]
    fn too_few_devices_use_defaults() {
        let t = thresholds_from_means(&[600.0], ThresholdMode::Population, DEFAULTS);
        assert!(t.from_defaults);
        assert_eq!((t.tau_low_s, t.tau_high_s), DEFAULTS);
    }

    #[test]
    fn low_threshold_is_floored() {
        let t = thresholds_from_means(&[10.0, 5000.0], ThresholdMode::Population, DEFAULTS);
        assert_eq!(t.tau_low_s, 1.0);
    }

    #[test]
    fn mean_ci_is_narrower() {
        let m = [100.0, 200.0, 300.0, 400.0];
        let p = thresholds_from_means(&m, ThresholdMode::Population, DEFAULTS);
        let c = thresholds_from_means(&m, ThresholdMode::MeanCi, DEFAULTS);
        assert!(c.tau_high_s - c.tau_low_s < p.tau_high_s - p.tau_low_s);
    }

    #[test]
    fn per_device_means_from_events() {
        let ev = |d: &str, t| RawEvent {
            eid: format!("{d}{t}"),
            device: DeviceId::new(d),
            t,
            ap: ApId::new("w"),
        };
        let m = per_device_mean_intervals(&[ev("a", 0), ev("a", 100), ev("a", 300), ev("b", 5)]);
        assert_eq!(m.len(), 1);
        assert_eq!(m[&DeviceId::new("a")], 150.0);
    }
}
