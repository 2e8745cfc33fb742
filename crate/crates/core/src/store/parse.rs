//! Parsers for connectivity events and the space model document.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{LocaterError, Result};
use crate::model::{ApId, DeviceId, DeviceMeta, Region, RegionId, Room, RoomId, RoomKind, SpaceModel, Timestamp};

pub const EVENTS_HEADER: [&str; 4] = ["eid", "device", "timestamp", "ap"];

/// One connectivity log record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub eid: String,
    pub device: DeviceId,
    pub t: Timestamp,
    pub ap: ApId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub events: Vec<RawEvent>,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Jsonl,
}

impl EventFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => EventFormat::Jsonl,
            _ => EventFormat::Csv,
        }
    }
}

/// Accepts `YYYY-MM-DDThh:mm:ssZ`, any RFC 3339 instant, or epoch seconds.
pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(n) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%SZ") {
        return Some(n.and_utc().timestamp());
    }
    DateTime::parse_from_rfc3339(s).ok().map(|d| d.timestamp())
}

pub fn format_timestamp(t: Timestamp) -> String {
    Utc.timestamp_opt(t, 0)
        .single()
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| t.to_string())
}

fn check_fields(eid: &str, device: &str, ap: &str) -> std::result::Result<(), String> {
    if eid.trim().is_empty() {
        return Err("empty eid".into());
    }
    if device.trim().is_empty() {
        return Err("empty device".into());
    }
    if ap.trim().is_empty() {
        return Err("empty ap".into());
    }
    Ok(())
}

fn accept(
    out: &mut ParseOutcome,
    seen: &mut HashSet<String>,
    line: u64,
    fields: std::result::Result<RawEvent, String>,
) {
    match fields {
        Ok(ev) => {
            if seen.insert(ev.eid.clone()) {
                out.events.push(ev);
            } else {
                out.rejects.push(Reject {
                    line,
                    reason: format!("duplicate eid {}", ev.eid),
                });
            }
        }
        Err(reason) => out.rejects.push(Reject { line, reason }),
    }
}

pub fn parse_events_str(text: &str, format: EventFormat) -> Result<ParseOutcome> {
    match format {
        EventFormat::Csv => parse_csv(text),
        EventFormat::Jsonl => Ok(parse_jsonl(text)),
    }
}

pub fn parse_events(path: &Path, format: EventFormat) -> Result<ParseOutcome> {
    let text = std::fs::read_to_string(path).map_err(|e| LocaterError::io(path, e))?;
    parse_events_str(&text, format)
}

fn parse_csv(text: &str) -> Result<ParseOutcome> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| LocaterError::Format(format!("unreadable header: {e}")))?
        .clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != EVENTS_HEADER {
        return Err(LocaterError::Format(format!(
            "header must be `{}`, got `{}`",
            EVENTS_HEADER.join(","),
            got.join(",")
        )));
    }

    let mut out = ParseOutcome::default();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let (line, fields) = match rec {
            Ok(r) => {
                let line = r.position().map(|p| p.line()).unwrap_or(0);
                let fields = if r.len() != 4 {
                    Err(format!("expected 4 fields, got {}", r.len()))
                } else {
                    check_fields(&r[0], &r[1], &r[3]).and_then(|_| {
                        let t = parse_timestamp(&r[2])
                            .ok_or_else(|| format!("bad timestamp `{}`", &r[2]))?;
                        Ok(RawEvent {
                            eid: r[0].trim().to_string(),
                            device: DeviceId::new(&r[1]),
                            t,
                            ap: ApId::new(&r[3]),
                        })
                    })
                };
                (line, fields)
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                (line, Err(format!("malformed row: {e}")))
            }
        };
        accept(&mut out, &mut seen, line, fields);
    }
    Ok(out)
}

fn parse_jsonl(text: &str) -> ParseOutcome {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        eid: serde_json::Value,
        device: String,
        timestamp: serde_json::Value,
        ap: String,
    }

    let mut out = ParseOutcome::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i as u64 + 1;
        let fields = serde_json::from_str::<Row>(raw)
            .map_err(|e| format!("malformed json: {e}"))
            .and_then(|row| {
                let eid = match &row.eid {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Number(n) => n.to_string(),
                    _ => return Err("eid must be a string or number".to_string()),
                };
                check_fields(&eid, &row.device, &row.ap)?;
                let t = match &row.timestamp {
                    serde_json::Value::Number(n) => n.as_i64(),
                    serde_json::Value::String(s) => parse_timestamp(s),
                    _ => None,
                }
                .ok_or_else(|| format!("bad timestamp {}", row.timestamp))?;
                Ok(RawEvent {
                    eid,
                    device: DeviceId::new(&row.device),
                    t,
                    ap: ApId::new(&row.ap),
                })
            });
        accept(&mut out, &mut seen, line, fields);
    }
    out
}

pub fn write_events_csv(path: &Path, events: &[RawEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| LocaterError::Format(format!("{}: {e}", path.display())))?;
    let map = |e: csv::Error| LocaterError::Format(format!("{}: {e}", path.display()));
    w.write_record(EVENTS_HEADER).map_err(map)?;
    for ev in events {
        w.write_record([
            ev.eid.as_str(),
            ev.device.as_str(),
            &format_timestamp(ev.t),
            ev.ap.as_str(),
        ])
        .map_err(map)?;
    }
    w.flush().map_err(|e| LocaterError::io(path, e))
}

pub fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| LocaterError::io(path, e))?;
    for r in rejects {
        writeln!(f, "{}\t{}", r.line, r.reason).map_err(|e| LocaterError::io(path, e))?;
    }
    Ok(())
}

// ----- Space document -----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpace {
    #[serde(default)]
    building: Option<String>,
    regions: BTreeMap<String, RawRegion>,
    rooms: BTreeMap<String, RawRoom>,
    #[serde(default)]
    devices: BTreeMap<String, RawDevice>,
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum RawRegion {
    Rooms(Vec<String>),
    Named(NamedRegion),
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct NamedRegion {
    region: String,
    rooms: Vec<String>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRoom {
    #[serde(rename = "type")]
    kind: RoomKind,
    #[serde(default)]
    owners: Vec<String>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawDevice {
    #[serde(default)]
    preferred_rooms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_seconds: Option<i64>,
}

/// Parses and validates a space document. Region keys are access point ids;
/// the region id defaults to the access point id.
pub fn parse_space(text: &str) -> Result<SpaceModel> {
    let raw: RawSpace =
        serde_json::from_str(text).map_err(|e| LocaterError::Format(format!("space document: {e}")))?;
    let mut regions = BTreeMap::new();
    for (ap, r) in raw.regions {
        let (gid, rooms) = match r {
            RawRegion::Rooms(rooms) => (ap.clone(), rooms),
            RawRegion::Named(n) => (n.region, n.rooms),
        };
        let gid = RegionId::new(gid);
        if regions.contains_key(&gid) {
            return Err(LocaterError::Format(format!("duplicate region id {gid}")));
        }
        regions.insert(
            gid,
            Region {
                ap: ApId::new(&ap),
                rooms: rooms.iter().map(RoomId::new).collect(),
            },
        );
    }
    let rooms = raw
        .rooms
        .into_iter()
        .map(|(id, r)| {
            (
                RoomId::new(id),
                Room {
                    kind: r.kind,
                    owners: r.owners.iter().map(DeviceId::new).collect::<BTreeSet<_>>(),
                },
            )
        })
        .collect();
    let devices = raw
        .devices
        .into_iter()
        .map(|(id, d)| {
            (
                DeviceId::new(id),
                DeviceMeta {
                    preferred_rooms: d.preferred_rooms.iter().map(RoomId::new).collect(),
                    delta_seconds: d.delta_seconds,
                },
            )
        })
        .collect();
    let space = SpaceModel::new(
        raw.building.unwrap_or_else(|| "building".to_string()),
        regions,
        rooms,
        devices,
    );
    space.ensure_valid()?;
    Ok(space)
}

pub fn load_space(path: &Path) -> Result<SpaceModel> {
    let text = std::fs::read_to_string(path).map_err(|e| LocaterError::io(path, e))?;
    parse_space(&text)
}

pub fn space_to_json(space: &SpaceModel) -> String {
    #[derive(Serialize)]
    struct Out<'a> {
        building: &'a str,
        regions: BTreeMap<&'a str, RawRegion>,
        rooms: BTreeMap<&'a str, RawRoom>,
        devices: BTreeMap<&'a str, RawDevice>,
    }
    let regions = space
        .regions
        .iter()
        .map(|(gid, r)| {
            let rooms: Vec<String> = r.rooms.iter().map(|x| x.to_string()).collect();
            let v = if gid.as_str() == r.ap.as_str() {
                RawRegion::Rooms(rooms)
            } else {
                RawRegion::Named(NamedRegion {
                    region: gid.to_string(),
                    rooms,
                })
            };
            (r.ap.as_str(), v)
        })
        .collect();
    let rooms = space
        .rooms
        .iter()
        .map(|(id, r)| {
            (
                id.as_str(),
                RawRoom {
                    kind: r.kind,
                    owners: r.owners.iter().map(|o| o.to_string()).collect(),
                },
            )
        })
        .collect();
    let devices = space
        .devices
        .iter()
        .map(|(id, d)| {
            (
                id.as_str(),
                RawDevice {
                    preferred_rooms: d.preferred_rooms.iter().map(|r| r.to_string()).collect(),
                    delta_seconds: d.delta_seconds,
                },
            )
        })
        .collect();
    serde_json::to_string_pretty(&Out {
        building: &space.building,
        regions,
        rooms,
        devices,
    })
    .expect("space serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iso_and_epoch_timestamps() {
        assert_eq!(parse_timestamp("2019-08-22T13:04:35Z"), Some(1_566_479_075));
        assert_eq!(parse_timestamp("1566479075"), Some(1_566_479_075));
        assert_eq!(parse_timestamp("yesterday"), None);
        assert_eq!(format_timestamp(1_566_479_075), "2019-08-22T13:04:35Z");
    }

    #[test]
    fn csv_with_one_bad_row() {
        let text = "eid,device,timestamp,ap\n\
                    e1,7FBH,2019-08-22T13:04:35Z,wap3\n\
                    e2,7fbh,not-a-time,wap3\n\
                    e3,7fbh,1566479891,wap3\n";
        let out = parse_events_str(text, EventFormat::Csv).unwrap();
        assert_eq!(out.events.len(), 2);
        assert_eq!(out.events[0].device.as_str(), "7fbh");
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].line, 3);
        assert!(out.rejects[0].reason.contains("timestamp"));
    }

    #[test]
    fn wrong_header_is_a_format_error() {
        let text = "id,device,time,ap\ne1,a,1,wap3\n";
        assert!(matches!(
            parse_events_str(text, EventFormat::Csv),
            Err(LocaterError::Format(_))
        ));
    }

    #[test]
    fn duplicate_eid_and_short_row_are_rejected() {
        let text = "eid,device,timestamp,ap\ne1,a,1,wap3\ne1,a,2,wap3\ne2,a,3\n";
        let out = parse_events_str(text, EventFormat::Csv).unwrap();
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.rejects.len(), 2);
        assert_eq!(out.rejects[1].line, 4);
    }

    #[test]
    fn jsonl_rows() {
        let text = "{\"eid\":\"e1\",\"device\":\"A\",\"timestamp\":100,\"ap\":\"wap1\"}\n\
                    \n\
                    {\"eid\":2,\"device\":\"a\",\"timestamp\":\"2019-08-22T13:04:35Z\",\"ap\":\"wap1\"}\n\
                    {\"eid\":\"e3\",\"device\":\"a\",\"timestamp\":1,\"ap\":\"wap1\",\"x\":1}\n";
        let out = parse_events_str(text, EventFormat::Jsonl).unwrap();
        assert_eq!(out.events.len(), 2);
        assert_eq!(out.events[1].eid, "2");
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].line, 4);
    }

    const SPACE: &str = r#"{
        "building": "hall",
        "regions": {
            "wap3": ["2059", "2061", "2065"],
            "wap4": {"region": "g4", "rooms": ["2065", "2070"]}
        },
        "rooms": {
            "2059": {"type": "private"},
            "2061": {"type": "private", "owners": ["7FBH"]},
            "2065": {"type": "public"},
            "2070": {"type": "public"}
        },
        "devices": {"7fbh": {"preferred_rooms": ["2061"], "delta_seconds": 60}}
    }"#;

    #[test]
    fn space_document_parses_and_round_trips() {
        let s = parse_space(SPACE).unwrap();
        assert_eq!(s.region_of_ap(&ApId::new("wap3")), Some(&RegionId::new("wap3")));
        assert_eq!(s.region_of_ap(&ApId::new("wap4")), Some(&RegionId::new("g4")));
        assert_eq!(s.delta_override(&DeviceId::new("7fbh")), Some(60));
        assert!(s.rooms[&RoomId::new("2061")].owners.contains(&DeviceId::new("7fbh")));
        let again = parse_space(&space_to_json(&s)).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn space_document_rejects_unknown_keys() {
        let bad = SPACE.replace("\"building\"", "\"floors\": 3, \"building\"");
        assert!(parse_space(&bad).is_err());
        let bad_room = SPACE.replace("{\"type\": \"public\"}", "{\"type\": \"public\", \"size\": 3}");
        assert!(parse_space(&bad_room).is_err());
    }

    #[test]
    fn space_document_with_uncovered_room_is_invalid() {
        let bad = SPACE.replace("\"2070\": {\"type\": \"public\"}", "\"2070\": {\"type\": \"public\"}, \"9999\": {\"type\": \"public\"}");
        assert!(matches!(parse_space(&bad), Err(LocaterError::InvalidSpace(_))));
    }
}
