//! Space model and the shared value types: identifiers, semantic location
//! tuples, queries and answers.
//!
//! All identifier types are opaque strings ordered lexicographically. Device
//! identifiers are lowercased on construction so that `7FBH` and `7fbh` name
//! the same device.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LocaterError, Result};

/// Seconds since the Unix epoch.
pub type Timestamp = i64;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name::new(s)
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name::new(s)
            }
        }
    };
}

id_type!(
    /// Lowercased MAC-like device identifier.
    DeviceId
);
id_type!(ApId);
id_type!(RegionId);
id_type!(RoomId);

impl DeviceId {
    pub fn new(s: impl AsRef<str>) -> Self {
        DeviceId(s.as_ref().trim().to_lowercase())
    }
}

impl ApId {
    pub fn new(s: impl AsRef<str>) -> Self {
        ApId(s.as_ref().trim().to_string())
    }
}

impl RegionId {
    pub fn new(s: impl AsRef<str>) -> Self {
        RegionId(s.as_ref().trim().to_string())
    }
}

impl RoomId {
    pub fn new(s: impl AsRef<str>) -> Self {
        RoomId(s.as_ref().trim().to_string())
    }
}

// ----- Space model -----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoomKind {
    Public,
    Private,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub kind: RoomKind,
    pub owners: BTreeSet<DeviceId>,
}

/// Coverage area of one access point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub ap: ApId,
    pub rooms: BTreeSet<RoomId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceMeta {
    pub preferred_rooms: BTreeSet<RoomId>,
    pub delta_seconds: Option<i64>,
}

/// A single building: regions (one per access point), rooms and device
/// metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceModel {
    pub building: String,
    pub regions: BTreeMap<RegionId, Region>,
    pub rooms: BTreeMap<RoomId, Room>,
    pub devices: BTreeMap<DeviceId, DeviceMeta>,
    ap_index: BTreeMap<ApId, RegionId>,
}

/// One broken rule found by [`SpaceModel::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

impl SpaceModel {
    pub fn new(
        building: impl Into<String>,
        regions: BTreeMap<RegionId, Region>,
        rooms: BTreeMap<RoomId, Room>,
        devices: BTreeMap<DeviceId, DeviceMeta>,
    ) -> Self {
        let ap_index = regions
            .iter()
            .map(|(g, r)| (r.ap.clone(), g.clone()))
            .collect();
        SpaceModel {
            building: building.into(),
            regions,
            rooms,
            devices,
            ap_index,
        }
    }

    pub fn region_of_ap(&self, ap: &ApId) -> Option<&RegionId> {
        self.ap_index.get(ap)
    }

    pub fn rooms_of_region(&self, region: &RegionId) -> Result<&BTreeSet<RoomId>> {
        self.regions
            .get(region)
            .map(|r| &r.rooms)
            .ok_or_else(|| LocaterError::UnknownRegion(region.to_string()))
    }

    pub fn room(&self, room: &RoomId) -> Option<&Room> {
        self.rooms.get(room)
    }

    /// Declared preferred rooms plus every room the device owns.
    pub fn preferred_rooms(&self, device: &DeviceId) -> BTreeSet<RoomId> {
        let mut out: BTreeSet<RoomId> = self
            .devices
            .get(device)
            .map(|m| m.preferred_rooms.clone())
            .unwrap_or_default();
        for (id, room) in &self.rooms {
            if room.owners.contains(device) {
                out.insert(id.clone());
            }
        }
        out
    }

    pub fn delta_override(&self, device: &DeviceId) -> Option<i64> {
        self.devices.get(device).and_then(|m| m.delta_seconds)
    }

    pub fn regions_overlap(&self, a: &RegionId, b: &RegionId) -> bool {
        match (self.regions.get(a), self.regions.get(b)) {
            (Some(x), Some(y)) => !x.rooms.is_disjoint(&y.rooms),
            _ => false,
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |entity: String, rule: &str| {
            out.push(Violation {
                entity,
                rule: rule.to_string(),
            })
        };

        let mut seen_aps: BTreeMap<&ApId, &RegionId> = BTreeMap::new();
        let mut covered: BTreeSet<&RoomId> = BTreeSet::new();
        for (gid, region) in &self.regions {
            if let Some(other) = seen_aps.insert(&region.ap, gid) {
                push(
                    format!("region {gid}"),
                    &format!("access point {} already mapped to region {other}", region.ap),
                );
            }
            if region.rooms.is_empty() {
                push(format!("region {gid}"), "covers no rooms");
            }
            for room in &region.rooms {
                if !self.rooms.contains_key(room) {
                    push(format!("region {gid}"), &format!("unknown room {room}"));
                }
                covered.insert(room);
            }
        }
        for rid in self.rooms.keys() {
            if !covered.contains(rid) {
                push(format!("room {rid}"), "not covered by any region");
            }
        }
        for (did, meta) in &self.devices {
            for room in &meta.preferred_rooms {
                if !self.rooms.contains_key(room) {
                    push(format!("device {did}"), &format!("unknown preferred room {room}"));
                }
            }
            if let Some(d) = meta.delta_seconds {
                if d <= 0 {
                    push(format!("device {did}"), "delta_seconds must be positive");
                }
            }
        }
        out
    }

    /// Errors with every violation joined when the model is inconsistent.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            Err(LocaterError::InvalidSpace(msg.join("; ")))
        }
    }
}

// ----- Tuples, queries and answers -----

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Location {
    Region(RegionId),
    Room(RoomId),
    Outside,
    /// Unknown location of a gap tuple.
    Null,
}

/// `[st, et)` interval of a device at a location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticLocationTuple {
    pub lid: u64,
    pub device: DeviceId,
    pub loc: Location,
    pub st: Timestamp,
    pub et: Timestamp,
    #[serde(default)]
    pub derived: bool,
}

impl SemanticLocationTuple {
    pub fn is_gap(&self) -> bool {
        self.loc == Location::Null
    }

    pub fn region(&self) -> Option<&RegionId> {
        match &self.loc {
            Location::Region(g) => Some(g),
            _ => None,
        }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.st <= t && t < self.et
    }

    pub fn overlaps(&self, st: Timestamp, et: Timestamp) -> bool {
        self.st < et && st < self.et
    }

    pub fn duration(&self) -> i64 {
        self.et - self.st
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Fine,
}

impl std::str::FromStr for Granularity {
    type Err = LocaterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Granularity::Coarse),
            "fine" => Ok(Granularity::Fine),
            other => Err(LocaterError::InvalidConfig(format!(
                "granularity must be coarse or fine, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub device: DeviceId,
    pub t_q: Timestamp,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerLevel {
    Outside,
    Region,
    Room,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationAnswer {
    pub level: AnswerLevel,
    pub region: Option<RegionId>,
    pub room: Option<RoomId>,
    /// Posterior per candidate room; empty unless `level` is `Room`.
    pub distribution: BTreeMap<RoomId, f64>,
    pub processed_neighbors: usize,
}

impl LocationAnswer {
    pub fn outside() -> Self {
        LocationAnswer {
            level: AnswerLevel::Outside,
            region: None,
            room: None,
            distribution: BTreeMap::new(),
            processed_neighbors: 0,
        }
    }

    pub fn region(region: RegionId) -> Self {
        LocationAnswer {
            level: AnswerLevel::Region,
            region: Some(region),
            room: None,
            distribution: BTreeMap::new(),
            processed_neighbors: 0,
        }
    }

    pub fn probability(&self) -> Option<f64> {
        self.room
            .as_ref()
            .and_then(|r| self.distribution.get(r).copied())
    }

    /// Single-line record, e.g. `room 2061 p=0.500000 region=g3 processed=0`.
    pub fn to_record(&self) -> String {
        match self.level {
            AnswerLevel::Outside => "outside".to_string(),
            AnswerLevel::Region => format!(
                "region {}",
                self.region.as_ref().map(|g| g.as_str()).unwrap_or("-")
            ),
            AnswerLevel::Room => {
                let dist: Vec<String> = self
                    .distribution
                    .iter()
                    .map(|(r, p)| format!("{r}:{p:.6}"))
                    .collect();
                format!(
                    "room {} p={:.6} region={} processed={} dist={}",
                    self.room.as_ref().map(|r| r.as_str()).unwrap_or("-"),
                    self.probability().unwrap_or(0.0),
                    self.region.as_ref().map(|g| g.as_str()).unwrap_or("-"),
                    self.processed_neighbors,
                    dist.join(",")
                )
            }
        }
    }
}

/// Lexicographically smallest key holding the largest value. Values within
/// a relative 1e-9 of each other tie.
pub fn argmax<K: Ord + Clone>(map: &BTreeMap<K, f64>) -> Option<K> {
    let mut best: Option<(&K, f64)> = None;
    for (k, &v) in map {
        match best {
            Some((_, bv)) if v <= bv + 1e-9 * bv.abs() => {}
            _ => best = Some((k, v)),
        }
    }
    best.map(|(k, _)| k.clone())
}
