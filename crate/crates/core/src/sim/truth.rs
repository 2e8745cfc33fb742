//! Ground-truth records, their CSV form, and predictability buckets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LocaterError, Result};
use crate::model::{DeviceId, RoomId, Timestamp};
use crate::store::{format_timestamp, parse_timestamp};

/// `device` was in `room` during `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub device: DeviceId,
    pub room: RoomId,
    pub start: Timestamp,
    pub end: Timestamp,
}

pub fn write_truth(path: &Path, records: &[TruthRecord]) -> Result<()> {
    let map = |e: csv::Error| LocaterError::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    w.write_record(["device", "room", "start", "end"]).map_err(map)?;
    for r in records {
        w.write_record([
            r.device.as_str(),
            r.room.as_str(),
            &format_timestamp(r.start),
            &format_timestamp(r.end),
        ])
        .map_err(map)?;
    }
    w.flush().map_err(|e| LocaterError::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    let map = |e: csv::Error| LocaterError::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(map)?;
    let header: Vec<String> = r.headers().map_err(map)?.iter().map(str::to_string).collect();
    if header != ["device", "room", "start", "end"] {
        return Err(LocaterError::Format(format!(
            "{}: expected header device,room,start,end",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(map)?;
        let line = i + 2;
        let ts = |s: &str| {
            parse_timestamp(s)
                .ok_or_else(|| LocaterError::Format(format!("{}:{line}: bad timestamp `{s}`", path.display())))
        };
        let (start, end) = (ts(&rec[2])?, ts(&rec[3])?);
        if end <= start {
            return Err(LocaterError::Format(format!("{}:{line}: empty interval", path.display())));
        }
        out.push(TruthRecord {
            device: DeviceId::new(&rec[0]),
            room: RoomId::new(&rec[1]),
            start,
            end,
        });
    }
    Ok(out)
}

/// Per-device sorted truth intervals. Times not covered count as outside.
#[derive(Debug, Clone, Default)]
pub struct TruthIndex {
    by_device: BTreeMap<DeviceId, Vec<(Timestamp, Timestamp, RoomId)>>,
}

impl TruthIndex {
    pub fn new(records: &[TruthRecord]) -> Self {
        let mut by_device: BTreeMap<DeviceId, Vec<(Timestamp, Timestamp, RoomId)>> = BTreeMap::new();
        for r in records {
            by_device
                .entry(r.device.clone())
                .or_default()
                .push((r.start, r.end, r.room.clone()));
        }
        for v in by_device.values_mut() {
            v.sort();
        }
        TruthIndex { by_device }
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceId> {
        self.by_device.keys()
    }

    pub fn room_at(&self, device: &DeviceId, t: Timestamp) -> Option<&RoomId> {
        let v = self.by_device.get(device)?;
        let i = v.partition_point(|(s, _, _)| *s <= t);
        let (s, e, r) = v.get(i.checked_sub(1)?)?;
        (*s <= t && t < *e).then_some(r)
    }

    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        let lo = self.by_device.values().filter_map(|v| v.first().map(|x| x.0)).min()?;
        let hi = self.by_device.values().filter_map(|v| v.iter().map(|x| x.1).max()).max()?;
        Some((lo, hi))
    }
}

/// Share of in-building time spent in the most visited room, in percent.
pub fn predictability(records: &[TruthRecord], device: &DeviceId) -> Result<f64> {
    let mut per_room: BTreeMap<&RoomId, i64> = BTreeMap::new();
    for r in records.iter().filter(|r| &r.device == device) {
        *per_room.entry(&r.room).or_default() += r.end - r.start;
    }
    let total: i64 = per_room.values().sum();
    if total == 0 {
        return Err(LocaterError::UnknownDevice(device.to_string()));
    }
    Ok(100.0 * *per_room.values().max().expect("nonempty") as f64 / total as f64)
}

pub fn predictability_by_device(records: &[TruthRecord]) -> BTreeMap<DeviceId, f64> {
    let mut per: BTreeMap<&DeviceId, BTreeMap<&RoomId, i64>> = BTreeMap::new();
    for r in records {
        *per.entry(&r.device).or_default().entry(&r.room).or_default() += r.end - r.start;
    }
    per.into_iter()
        .filter_map(|(d, rooms)| {
            let total: i64 = rooms.values().sum();
            let top = *rooms.values().max()?;
            (total > 0).then(|| (d.clone(), 100.0 * top as f64 / total as f64))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Below40,
    From40,
    From55,
    From70,
    From85,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [Bucket::Below40, Bucket::From40, Bucket::From55, Bucket::From70, Bucket::From85];

    pub fn of(percent: f64) -> Bucket {
        match percent {
            p if p < 40.0 => Bucket::Below40,
            p if p < 55.0 => Bucket::From40,
            p if p < 70.0 => Bucket::From55,
            p if p < 85.0 => Bucket::From70,
            _ => Bucket::From85,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Below40 => "[0,40)",
            Bucket::From40 => "[40,55)",
            Bucket::From55 => "[55,70)",
            Bucket::From70 => "[70,85)",
            Bucket::From85 => "[85,100]",
        }
    }
}
