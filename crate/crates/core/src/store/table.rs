//! Validity intervals and the semantic location table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::config::DeltaConfig;
use crate::error::{LocaterError, Result};
use crate::model::{DeviceId, Location, RegionId, SemanticLocationTuple, SpaceModel, Timestamp};
use crate::store::parse::RawEvent;

/// Median of consecutive intervals no longer than `cap_s`, clamped to
/// `[min_s, cap_s]`. Falls back to `default_s` with fewer than two events or
/// no short interval.
pub fn estimate_delta(times: &[Timestamp], cfg: &DeltaConfig) -> i64 {
    let mut sorted = times.to_vec();
    sorted.sort_unstable();
    let mut gaps: Vec<i64> = sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|&d| d <= cfg.cap_s)
        .collect();
    if gaps.is_empty() {
        return cfg.default_s.clamp(cfg.min_s, cfg.cap_s);
    }
    gaps.sort_unstable();
    let n = gaps.len();
    let median = if n % 2 == 1 {
        gaps[n / 2]
    } else {
        (gaps[n / 2 - 1] + gaps[n / 2] + 1) / 2
    };
    median.clamp(cfg.min_s, cfg.cap_s)
}

/// Validity interval `[st, et)` of each event of a sorted timestamp list.
/// Neighbors closer than `2 * delta` but further than `delta` meet at their
/// midpoint.
pub fn compute_validity_intervals(times: &[Timestamp], delta: i64) -> Vec<(Timestamp, Timestamp)> {
    let n = times.len();
    (0..n)
        .map(|i| {
            let t = times[i];
            let st = match i.checked_sub(1).map(|j| times[j]) {
                Some(prev) if t - prev <= delta => t,
                Some(prev) if t - prev < 2 * delta => prev + (t - prev) / 2,
                _ => t - delta,
            };
            let et = match times.get(i + 1) {
                Some(&next) if next - t <= delta => next,
                Some(&next) if next - t < 2 * delta => t + (next - t) / 2,
                _ => t + delta,
            };
            (st, et)
        })
        .collect()
}

/// Table L: per device, time-ordered disjoint tuples covering the device's
/// observed horizon.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocationTable {
    pub tuples: BTreeMap<DeviceId, Vec<SemanticLocationTuple>>,
    pub deltas: BTreeMap<DeviceId, i64>,
}

fn push_gap(
    out: &mut Vec<SemanticLocationTuple>,
    device: &DeviceId,
    clock: &Clock,
    st: Timestamp,
    et: Timestamp,
) {
    let mut cursor = st;
    loop {
        let midnight = clock.next_midnight(cursor);
        let end = midnight.min(et);
        out.push(SemanticLocationTuple {
            lid: 0,
            device: device.clone(),
            loc: Location::Null,
            st: cursor,
            et: end,
            derived: false,
        });
        if end >= et {
            break;
        }
        cursor = end;
    }
}

pub fn build_location_table(
    events: &[RawEvent],
    space: &SpaceModel,
    clock: &Clock,
    delta_cfg: &DeltaConfig,
) -> Result<LocationTable> {
    let mut by_device: BTreeMap<&DeviceId, Vec<(&RawEvent, RegionId)>> = BTreeMap::new();
    for ev in events {
        let region = space
            .region_of_ap(&ev.ap)
            .ok_or_else(|| LocaterError::UnknownAp(ev.ap.to_string()))?;
        by_device.entry(&ev.device).or_default().push((ev, region.clone()));
    }

    let mut table = LocationTable::default();
    let mut lid = 0u64;
    for (device, mut evs) in by_device {
        evs.sort_by(|a, b| (a.0.t, &a.0.eid).cmp(&(b.0.t, &b.0.eid)));
        let times: Vec<Timestamp> = evs.iter().map(|(e, _)| e.t).collect();
        let delta = space
            .delta_override(device)
            .unwrap_or_else(|| estimate_delta(&times, delta_cfg));
        let vis = compute_validity_intervals(&times, delta);

        let mut out: Vec<SemanticLocationTuple> = Vec::with_capacity(evs.len() * 2);
        for (i, ((_, region), &(st, et))) in evs.iter().zip(&vis).enumerate() {
            if i > 0 {
                let prev_et = vis[i - 1].1;
                if prev_et < st {
                    push_gap(&mut out, device, clock, prev_et, st);
                }
            }
            if st == et {
                continue;
            }
            out.push(SemanticLocationTuple {
                lid: 0,
                device: device.clone(),
                loc: Location::Region(region.clone()),
                st,
                et,
                derived: false,
            });
        }
        for t in &mut out {
            t.lid = lid;
            lid += 1;
        }
        table.deltas.insert(device.clone(), delta);
        table.tuples.insert(device.clone(), out);
    }
    Ok(table)
}

impl LocationTable {
    pub fn devices(&self) -> impl Iterator<Item = &DeviceId> {
        self.tuples.keys()
    }

    pub fn tuples(&self, device: &DeviceId) -> &[SemanticLocationTuple] {
        self.tuples.get(device).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn horizon(&self, device: &DeviceId) -> Option<(Timestamp, Timestamp)> {
        let ts = self.tuples.get(device)?;
        Some((ts.first()?.st, ts.last()?.et))
    }

    pub fn index_at(&self, device: &DeviceId, t: Timestamp) -> Option<usize> {
        let ts = self.tuples.get(device)?;
        let i = ts.partition_point(|x| x.et <= t);
        (i < ts.len() && ts[i].contains(t)).then_some(i)
    }

    /// The tuple whose `[st, et)` contains `t`.
    pub fn lookup_tuple(&self, device: &DeviceId, t: Timestamp) -> Result<&SemanticLocationTuple> {
        let ts = self
            .tuples
            .get(device)
            .ok_or_else(|| LocaterError::UnknownDevice(device.to_string()))?;
        self.index_at(device, t)
            .map(|i| &ts[i])
            .ok_or_else(|| LocaterError::OutOfHorizon {
                device: device.to_string(),
                time: t,
            })
    }

    /// Tuples of `device` overlapping `[st, et)`.
    pub fn window(&self, device: &DeviceId, st: Timestamp, et: Timestamp) -> &[SemanticLocationTuple] {
        let ts = self.tuples(device);
        let lo = ts.partition_point(|x| x.et <= st);
        let hi = ts.partition_point(|x| x.st < et);
        if lo >= hi {
            &[]
        } else {
            &ts[lo..hi]
        }
    }

    pub fn tuple_count(&self) -> usize {
        self.tuples.values().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ApId;
    use crate::store::parse::parse_space;
    use proptest::prelude::*;

    fn cfg() -> DeltaConfig {
        DeltaConfig::default()
    }

    #[test]
    fn single_event_interval() {
        assert_eq!(compute_validity_intervals(&[100], 60), vec![(40, 160)]);
    }

    #[test]
    fn close_events_share_a_boundary() {
        assert_eq!(compute_validity_intervals(&[100, 130], 60), vec![(40, 130), (130, 190)]);
    }

    #[test]
    fn distant_events_leave_a_gap() {
        assert_eq!(compute_validity_intervals(&[100, 400], 60), vec![(40, 160), (340, 460)]);
    }

    #[test]
    fn near_events_meet_at_midpoint() {
        assert_eq!(compute_validity_intervals(&[100, 190], 60), vec![(40, 145), (145, 250)]);
    }

    #[test]
    fn delta_ignores_long_intervals() {
        assert_eq!(estimate_delta(&[0, 60, 120, 180, 7380], &cfg()), 60);
    }

    #[test]
    fn delta_defaults_with_one_event() {
        assert_eq!(estimate_delta(&[5], &cfg()), 600);
        assert_eq!(estimate_delta(&[], &cfg()), 600);
    }

    #[test]
    fn delta_is_clamped() {
        assert_eq!(estimate_delta(&[0, 1, 2, 3], &cfg()), 10);
    }

    fn space() -> SpaceModel {
        parse_space(
            r#"{"regions": {"wap1": ["r1", "r2"], "wap2": ["r2", "r3"]},
                "rooms": {"r1": {"type": "private"}, "r2": {"type": "public"}, "r3": {"type": "public"}}}"#,
        )
        .unwrap()
    }

    fn ev(eid: &str, dev: &str, t: i64, ap: &str) -> RawEvent {
        RawEvent {
            eid: eid.into(),
            device: DeviceId::new(dev),
            t,
            ap: ApId::new(ap),
        }
    }

    #[test]
    fn gap_between_two_events_holds_the_query() {
        // Events at 13:04:35 and 13:18:11 with a one-minute delta.
        let mut s = space();
        s.devices.insert(
            DeviceId::new("7fbh"),
            crate::model::DeviceMeta {
                preferred_rooms: Default::default(),
                delta_seconds: Some(60),
            },
        );
        let e1 = 1_566_479_075;
        let e2 = e1 + 13 * 60 + 36;
        let table = build_location_table(
            &[ev("e1", "7fbh", e1, "wap1"), ev("e2", "7fbh", e2, "wap1")],
            &s,
            &Clock::default(),
            &cfg(),
        )
        .unwrap();
        let ts = table.tuples(&DeviceId::new("7fbh"));
        assert_eq!(ts.len(), 3);
        let q = e1 + 325; // 13:10:00
        let l2 = table.lookup_tuple(&DeviceId::new("7fbh"), q).unwrap();
        assert!(l2.is_gap());
        assert_eq!((l2.st, l2.et), (e1 + 60, e2 - 60));
    }

    #[test]
    fn overnight_gap_is_split_at_midnight() {
        let s = space();
        let day = 1_566_432_000; // 2019-08-22T00:00:00Z
        let a = day + 19 * 3600;
        let b = day + 86_400 + 5 * 3600;
        let mut evs = vec![];
        for (i, t) in [a, a + 300, b, b + 300].iter().enumerate() {
            evs.push(ev(&format!("e{i}"), "d", *t, "wap1"));
        }
        let table = build_location_table(&evs, &s, &Clock::default(), &cfg()).unwrap();
        let gaps: Vec<_> = table.tuples(&DeviceId::new("d")).iter().filter(|t| t.is_gap()).collect();
        assert_eq!(gaps.len(), 2);
        assert_eq!(gaps[0].et, day + 86_400);
        assert_eq!(gaps[1].st, day + 86_400);
    }

    #[test]
    fn repeated_timestamps_leave_no_empty_tuple() {
        let evs = [ev("a", "d", 1000, "wap1"), ev("b", "d", 1000, "wap1"), ev("c", "d", 1000, "wap2")];
        let table = build_location_table(&evs, &space(), &Clock::default(), &cfg()).unwrap();
        let ts = table.tuples(&DeviceId::new("d"));
        assert_eq!(ts.len(), 2);
        assert!(ts.iter().all(|t| t.st < t.et));
        assert_eq!(table.lookup_tuple(&DeviceId::new("d"), 1000).unwrap().loc, Location::Region(RegionId::new("wap2")));
    }

    #[test]
    fn unknown_ap_is_an_error() {
        let r = build_location_table(&[ev("e", "d", 1, "wap9")], &space(), &Clock::default(), &cfg());
        assert!(matches!(r, Err(LocaterError::UnknownAp(_))));
    }

    #[test]
    fn lookup_errors() {
        let table =
            build_location_table(&[ev("e", "d", 1000, "wap1")], &space(), &Clock::default(), &cfg())
                .unwrap();
        assert!(matches!(
            table.lookup_tuple(&DeviceId::new("x"), 1000),
            Err(LocaterError::UnknownDevice(_))
        ));
        assert!(matches!(
            table.lookup_tuple(&DeviceId::new("d"), 5000),
            Err(LocaterError::OutOfHorizon { .. })
        ));
        let t = table.lookup_tuple(&DeviceId::new("d"), 1000).unwrap();
        assert_eq!(t.loc, Location::Region(RegionId::new("wap1")));
    }

    proptest! {
        #[test]
        fn intervals_are_disjoint_and_bounded(
            mut times in prop::collection::vec(0i64..100_000, 1..60),
            delta in 1i64..2_000,
        ) {
            times.sort_unstable();
            let vis = compute_validity_intervals(&times, delta);
            for (i, &(st, et)) in vis.iter().enumerate() {
                prop_assert!(st <= times[i] && times[i] <= et);
                prop_assert!(et - st <= 2 * delta);
                if i > 0 {
                    prop_assert!(vis[i - 1].1 <= st);
                }
            }
        }

        #[test]
        fn table_covers_horizon_without_overlap(
            raw in prop::collection::vec((0usize..3, 0i64..400_000, 0usize..2), 1..80),
            dup in prop::collection::vec(0usize..80, 0..10),
            tz in prop::sample::select(vec!["UTC", "America/Los_Angeles", "Asia/Kolkata"]),
        ) {
            let mut events: Vec<RawEvent> = raw
                .iter()
                .enumerate()
                .map(|(i, (d, t, ap))| ev(&format!("e{i}"), &format!("d{d}"), 1_566_432_000 + t, ["wap1", "wap2"][*ap]))
                .collect();
            for (j, k) in dup.iter().enumerate() {
                let mut e = events[k % raw.len()].clone();
                e.eid = format!("dup{j}");
                events.push(e);
            }
            let clock = Clock::new(tz).unwrap();
            let table = build_location_table(&events, &space(), &clock, &cfg()).unwrap();
            for e in &events {
                prop_assert!(!table.lookup_tuple(&e.device, e.t).unwrap().is_gap());
            }
            for ts in table.tuples.values() {
                prop_assert!(ts.iter().all(|t| t.st < t.et));
                for w in ts.windows(2) {
                    prop_assert_eq!(w[0].et, w[1].st);
                    if w[0].is_gap() && w[1].is_gap() {
                        prop_assert_eq!(clock.day_start(w[1].st), w[1].st);
                    }
                }
                for t in ts.iter().filter(|t| t.is_gap()) {
                    prop_assert!(t.st < t.et);
                    prop_assert!(clock.next_midnight(t.st) >= t.et);
                }
            }
            let again = build_location_table(&events, &space(), &clock, &cfg()).unwrap();
            prop_assert_eq!(again, table);
        }
    }
}
