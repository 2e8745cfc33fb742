//! Room, device and group affinities.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::RoomWeights;
use crate::error::{LocaterError, Result};
use crate::model::{DeviceId, RegionId, RoomId, RoomKind, SpaceModel, Timestamp};
use crate::store::LocationTable;

/// Prior over the rooms of `region` for `device`: preferred rooms share
/// `pf`, other public rooms `pb`, other private rooms `pr`. Weight of an
/// empty class is spread proportionally over the present ones.
pub fn room_affinity(
    space: &SpaceModel,
    device: &DeviceId,
    region: &RegionId,
    weights: &RoomWeights,
) -> Result<BTreeMap<RoomId, f64>> {
    let rooms = space.rooms_of_region(region)?;
    if rooms.is_empty() {
        return Err(LocaterError::NoCandidateRooms(region.to_string()));
    }
    let preferred = space.preferred_rooms(device);
    let class_of = |r: &RoomId| {
        if preferred.contains(r) {
            0
        } else {
            match space.room(r).map(|x| x.kind) {
                Some(RoomKind::Private) => 2,
                _ => 1,
            }
        }
    };
    let mut counts = [0usize; 3];
    for r in rooms {
        counts[class_of(r)] += 1;
    }
    let w = [weights.pf, weights.pb, weights.pr];
    let total: f64 = (0..3).filter(|&c| counts[c] > 0).map(|c| w[c]).sum();
    Ok(rooms
        .iter()
        .map(|r| {
            let c = class_of(r);
            (r.clone(), w[c] / total / counts[c] as f64)
        })
        .collect())
}

/// Fraction of the members' tuples in `[st, et)` during which every other
/// member has an overlapping clean tuple in the same region. One for a
/// single device, zero when there are no tuples.
pub fn device_affinity(table: &LocationTable, devices: &[DeviceId], st: Timestamp, et: Timestamp) -> f64 {
    let members: BTreeSet<&DeviceId> = devices.iter().collect();
    if members.len() <= 1 {
        return 1.0;
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for &a in &members {
        let ts = table.window(a, st, et);
        total += ts.len();
        'tuple: for t in ts {
            let Some(g) = t.region() else { continue };
            for &b in &members {
                if b == a {
                    continue;
                }
                let co = table
                    .window(b, t.st, t.et)
                    .iter()
                    .any(|u| u.region() == Some(g) && u.overlaps(t.st, t.et));
                if !co {
                    continue 'tuple;
                }
            }
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// `alpha_d * prod_d a_d(room) / sum_{r in R_is} a_d(r)` over the
/// intersection `R_is` of the maps' rooms; zero outside it.
pub fn group_affinity(alpha_d: f64, maps: &[&BTreeMap<RoomId, f64>], room: &RoomId) -> f64 {
    if maps.is_empty() || maps.iter().any(|m| !m.contains_key(room)) {
        return 0.0;
    }
    let shared: Vec<&RoomId> = maps[0]
        .keys()
        .filter(|r| maps[1..].iter().all(|m| m.contains_key(*r)))
        .collect();
    let mut out = alpha_d;
    for m in maps {
        let denom: f64 = shared.iter().map(|r| m[*r]).sum();
        if denom <= 0.0 {
            log::warn!("zero affinity mass over shared rooms; group affinity set to 0");
            return 0.0;
        }
        out *= m[room] / denom;
    }
    out
}
