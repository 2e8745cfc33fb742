//! Scenario simulator: synthetic trajectories (ground truth) and the
//! connectivity events they produce.
//!
//! A scenario declares rooms, AP regions, people profiles and a weekly
//! schedule of events. Each simulated minute a person is outside or in one
//! room; while inside, the device emits an event with the profile's
//! emission probability to a uniformly chosen AP covering the room.

mod truth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{NaiveDate, NaiveTime, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::DAY;
use crate::error::{LocaterError, Result};
use crate::model::{ApId, DeviceId, Region, RegionId, Room, RoomId, RoomKind, SpaceModel, Timestamp};
use crate::store::RawEvent;

pub use truth::{
    predictability, predictability_by_device, read_truth, write_truth, Bucket, TruthIndex, TruthRecord,
};

const MINUTES: usize = 1440;

/// Bundled scenarios by name.
pub const BUNDLED: [(&str, &str); 4] = [
    ("office", include_str!("../../scenarios/office.toml")),
    ("university", include_str!("../../scenarios/university.toml")),
    ("mall", include_str!("../../scenarios/mall.toml")),
    ("airport", include_str!("../../scenarios/airport.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreferredPolicy {
    /// One room of `preferred_rooms` per person, round robin.
    Office,
    /// Consecutive groups of `team_size` people share one room.
    Team,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub id: String,
    pub kind: RoomKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub id: String,
    pub ap: String,
    pub rooms: Vec<String>,
}

fn default_one() -> f64 {
    1.0
}

fn default_team() -> usize {
    1
}

fn default_workdays() -> Vec<u32> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub name: String,
    pub count: usize,
    pub preferred: PreferredPolicy,
    #[serde(default)]
    pub preferred_rooms: Vec<String>,
    #[serde(default = "default_team")]
    pub team_size: usize,
    /// Weekdays with possible presence, Monday = 0.
    #[serde(default = "default_workdays")]
    pub workdays: Vec<u32>,
    /// Probability of coming in on a workday.
    #[serde(default = "default_one")]
    pub presence: f64,
    pub arrival: String,
    #[serde(default)]
    pub arrival_jitter_min: u32,
    /// Fixed departure time; ignored when `stay_min` is set.
    #[serde(default)]
    pub departure: Option<String>,
    #[serde(default)]
    pub departure_jitter_min: u32,
    /// Length of stay after arrival.
    #[serde(default)]
    pub stay_min: Option<u32>,
    /// Probability that an idle block is spent in the preferred room.
    #[serde(default)]
    pub idle_preferred: f64,
    /// Rooms visited when not in the preferred room; all public rooms when empty.
    #[serde(default)]
    pub wander_rooms: Vec<String>,
    #[serde(default)]
    pub lunch_outside: f64,
    pub emission: f64,
    /// Chance per in-building hour of a silent stretch of 20 to 90 minutes.
    #[serde(default)]
    pub dropout_per_hour: f64,
    /// Attendance probability per event class.
    #[serde(default)]
    pub attendance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub name: String,
    pub class: String,
    pub room: String,
    pub days: Vec<u32>,
    pub start: String,
    pub duration_min: u32,
    pub capacity: usize,
    pub profiles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// First simulated day, `YYYY-MM-DD`, UTC.
    pub start: String,
    pub days: u32,
    /// Minutes per idle block.
    #[serde(default = "default_block")]
    pub block_min: u32,
    pub rooms: Vec<RoomSpec>,
    pub regions: Vec<RegionSpec>,
    pub profiles: Vec<ProfileSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

fn default_block() -> u32 {
    30
}

fn minute_of(s: &str) -> Result<usize> {
    let t = NaiveTime::parse_from_str(s, "%H:%M")
        .map_err(|_| LocaterError::InvalidConfig(format!("time of day `{s}` is not HH:MM")))?;
    Ok((t.hour() * 60 + t.minute()) as usize)
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(LocaterError::InvalidConfig(format!("{what} must lie in [0,1], got {p}")))
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(s).map_err(|e| LocaterError::InvalidConfig(format!("scenario: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A bundled scenario name or a path to a scenario document.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if let Some((_, text)) = BUNDLED.iter().find(|(n, _)| *n == name_or_path) {
            return Self::from_toml_str(text);
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|e| LocaterError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| LocaterError::InvalidConfig(format!("no bundled scenario `{name}`")))
            .and_then(|(_, t)| Self::from_toml_str(t))
    }

    pub fn start_ts(&self) -> Result<Timestamp> {
        let d = NaiveDate::parse_from_str(&self.start, "%Y-%m-%d")
            .map_err(|_| LocaterError::InvalidConfig(format!("start `{}` is not YYYY-MM-DD", self.start)))?;
        Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
    }

    pub fn validate(&self) -> Result<()> {
        let rooms: BTreeSet<&str> = self.rooms.iter().map(|r| r.id.as_str()).collect();
        let bad = |m: String| Err(LocaterError::InvalidConfig(m));
        self.start_ts()?;
        if self.days == 0 || self.block_min == 0 {
            return bad("days and block_min must be positive".into());
        }
        for g in &self.regions {
            if let Some(r) = g.rooms.iter().find(|r| !rooms.contains(r.as_str())) {
                return bad(format!("region {} lists unknown room {r}", g.id));
            }
        }
        let covered: BTreeSet<&str> = self.regions.iter().flat_map(|g| g.rooms.iter().map(String::as_str)).collect();
        if let Some(r) = rooms.iter().find(|r| !covered.contains(*r)) {
            return bad(format!("room {r} is covered by no AP"));
        }
        let mut names = BTreeSet::new();
        for p in &self.profiles {
            if !names.insert(p.name.as_str()) {
                return bad(format!("duplicate profile {}", p.name));
            }
            for (what, v) in [
                ("presence", p.presence),
                ("idle_preferred", p.idle_preferred),
                ("lunch_outside", p.lunch_outside),
                ("emission", p.emission),
                ("dropout_per_hour", p.dropout_per_hour),
            ] {
                check_probability(&format!("{}.{what}", p.name), v)?;
            }
            for (class, v) in &p.attendance {
                check_probability(&format!("{}.attendance.{class}", p.name), *v)?;
            }
            minute_of(&p.arrival)?;
            match (&p.departure, p.stay_min) {
                (_, Some(_)) => {}
                (Some(d), None) => {
                    minute_of(d)?;
                }
                (None, None) => return bad(format!("profile {} needs departure or stay_min", p.name)),
            }
            if p.preferred != PreferredPolicy::None && p.preferred_rooms.is_empty() {
                return bad(format!("profile {} has no preferred_rooms", p.name));
            }
            if p.team_size == 0 {
                return bad(format!("profile {} has team_size 0", p.name));
            }
            if let Some(r) = p.preferred_rooms.iter().chain(&p.wander_rooms).find(|r| !rooms.contains(r.as_str())) {
                return bad(format!("profile {} names unknown room {r}", p.name));
            }
        }
        for e in &self.events {
            if !rooms.contains(e.room.as_str()) {
                return bad(format!("event {} uses unknown room {}", e.name, e.room));
            }
            if e.capacity == 0 {
                return bad(format!("event {} has capacity 0", e.name));
            }
            let start = minute_of(&e.start)?;
            if start + e.duration_min as usize > MINUTES || e.duration_min == 0 {
                return bad(format!("event {} does not fit in a day", e.name));
            }
            if let Some(p) = e.profiles.iter().find(|p| !names.contains(p.as_str())) {
                return bad(format!("event {} names unknown profile {p}", e.name));
            }
            let demand: usize = self
                .profiles
                .iter()
                .filter(|p| e.profiles.contains(&p.name))
                .filter(|p| p.attendance.get(&e.class).copied() == Some(1.0))
                .map(|p| p.count)
                .sum();
            if demand > e.capacity {
                return Err(LocaterError::InfeasibleCapacity {
                    event: e.name.clone(),
                    demand,
                    capacity: e.capacity,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Person {
    pub device: DeviceId,
    pub profile: usize,
    pub preferred: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub space: SpaceModel,
    pub people: Vec<Person>,
    pub events: Vec<RawEvent>,
    pub truth: Vec<TruthRecord>,
}

impl Simulation {
    /// Profile name per device.
    pub fn profiles(&self, cfg: &ScenarioConfig) -> BTreeMap<DeviceId, String> {
        self.people
            .iter()
            .map(|p| (p.device.clone(), cfg.profiles[p.profile].name.clone()))
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| LocaterError::io(dir, e))?;
        crate::store::write_events_csv(&dir.join("events.csv"), &self.events)?;
        write_truth(&dir.join("truth.csv"), &self.truth)?;
        let space = dir.join("space.json");
        std::fs::write(&space, crate::store::space_to_json(&self.space)).map_err(|e| LocaterError::io(&space, e))
    }
}

fn build_people(cfg: &ScenarioConfig, room_ix: &BTreeMap<&str, usize>) -> Vec<Person> {
    let mut people = Vec::new();
    for (pi, p) in cfg.profiles.iter().enumerate() {
        for i in 0..p.count {
            let preferred = match p.preferred {
                PreferredPolicy::None => None,
                PreferredPolicy::Office => Some(&p.preferred_rooms[i % p.preferred_rooms.len()]),
                PreferredPolicy::Team => Some(&p.preferred_rooms[(i / p.team_size) % p.preferred_rooms.len()]),
            };
            people.push(Person {
                device: DeviceId::new(format!("{}-{:03}", p.name, i)),
                profile: pi,
                preferred: preferred.map(|r| room_ix[r.as_str()]),
            });
        }
    }
    people
}

fn build_space(cfg: &ScenarioConfig, people: &[Person]) -> SpaceModel {
    let mut rooms: BTreeMap<RoomId, Room> = cfg
        .rooms
        .iter()
        .map(|r| {
            (
                RoomId::new(&r.id),
                Room {
                    kind: r.kind,
                    owners: BTreeSet::new(),
                },
            )
        })
        .collect();
    for p in people {
        if let Some(r) = p.preferred {
            let room = rooms.get_mut(&RoomId::new(&cfg.rooms[r].id)).expect("validated room");
            room.owners.insert(p.device.clone());
        }
    }
    let regions = cfg
        .regions
        .iter()
        .map(|g| {
            (
                RegionId::new(&g.id),
                Region {
                    ap: ApId::new(&g.ap),
                    rooms: g.rooms.iter().map(RoomId::new).collect(),
                },
            )
        })
        .collect();
    SpaceModel::new(&cfg.name, regions, rooms, BTreeMap::new())
}

/// Simulates the scenario. The same configuration always yields the same
/// output.
pub fn generate(cfg: &ScenarioConfig) -> Result<Simulation> {
    cfg.validate()?;
    let start = cfg.start_ts()?;
    let room_ix: BTreeMap<&str, usize> = cfg.rooms.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let people = build_people(cfg, &room_ix);
    let space = build_space(cfg, &people);
    let public: Vec<usize> = cfg
        .rooms
        .iter()
        .enumerate()
        .filter(|(_, r)| r.kind == RoomKind::Public)
        .map(|(i, _)| i)
        .collect();
    let aps_of: Vec<Vec<ApId>> = cfg
        .rooms
        .iter()
        .map(|r| {
            cfg.regions
                .iter()
                .filter(|g| g.rooms.contains(&r.id))
                .map(|g| ApId::new(&g.ap))
                .collect()
        })
        .collect();
    let wander: Vec<Vec<usize>> = cfg
        .profiles
        .iter()
        .map(|p| {
            if p.wander_rooms.is_empty() {
                public.clone()
            } else {
                p.wander_rooms.iter().map(|r| room_ix[r.as_str()]).collect()
            }
        })
        .collect();
    let mut events_by_start: Vec<(usize, &EventSpec)> =
        cfg.events.iter().map(|e| (minute_of(&e.start).expect("validated"), e)).collect();
    events_by_start.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.name.cmp(&b.1.name)));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut raw = Vec::new();
    let mut truth = Vec::new();
    let block = cfg.block_min as usize;

    for day in 0..cfg.days as i64 {
        let day_start = start + day * DAY;
        let weekday = ((day_start.div_euclid(DAY) + 3).rem_euclid(7)) as u32;
        let mut plans: Vec<Vec<Option<usize>>> = vec![vec![None; MINUTES]; people.len()];

        for (pi, person) in people.iter().enumerate() {
            let prof = &cfg.profiles[person.profile];
            if !prof.workdays.contains(&weekday) || rng.gen::<f64>() >= prof.presence {
                continue;
            }
            let jitter = |rng: &mut ChaCha8Rng, j: u32| -> i64 {
                if j == 0 {
                    0
                } else {
                    rng.gen_range(-(j as i64)..=j as i64)
                }
            };
            let arrive = (minute_of(&prof.arrival).expect("validated") as i64 + jitter(&mut rng, prof.arrival_jitter_min))
                .clamp(0, MINUTES as i64 - 1);
            let leave = match (prof.stay_min, &prof.departure) {
                (Some(stay), _) => arrive + stay as i64 + jitter(&mut rng, prof.departure_jitter_min),
                (None, Some(d)) => minute_of(d).expect("validated") as i64 + jitter(&mut rng, prof.departure_jitter_min),
                (None, None) => unreachable!("validated"),
            }
            .clamp(arrive + 1, MINUTES as i64);
            let plan = &mut plans[pi];
            let mut m = arrive as usize;
            while m < leave as usize {
                let end = ((m / block + 1) * block).min(leave as usize);
                let room = match person.preferred {
                    Some(r) if rng.gen::<f64>() < prof.idle_preferred => r,
                    _ => {
                        let pool = &wander[person.profile];
                        match (pool.choose(&mut rng), person.preferred) {
                            (Some(r), _) => *r,
                            (None, Some(r)) => r,
                            (None, None) => room_ix[cfg.rooms[0].id.as_str()],
                        }
                    }
                };
                plan[m..end].iter_mut().for_each(|s| *s = Some(room));
                m = end;
            }
            if rng.gen::<f64>() < prof.lunch_outside {
                let lunch = 12 * 60 + rng.gen_range(0..45usize);
                let len = rng.gen_range(30..75usize);
                plan[lunch..(lunch + len).min(MINUTES)].iter_mut().for_each(|s| *s = None);
            }
        }

        for (s, ev) in &events_by_start {
            if !ev.days.contains(&weekday) {
                continue;
            }
            let room = room_ix[ev.room.as_str()];
            let span = *s..*s + ev.duration_min as usize;
            let mut eligible: Vec<usize> = people
                .iter()
                .enumerate()
                .filter(|(_, p)| ev.profiles.contains(&cfg.profiles[p.profile].name))
                .filter(|(i, _)| plans[*i][span.clone()].iter().all(Option::is_some))
                .map(|(i, _)| i)
                .collect();
            eligible.shuffle(&mut rng);
            let mut taken = 0;
            for i in eligible {
                if taken == ev.capacity {
                    break;
                }
                let p = cfg.profiles[people[i].profile].attendance.get(&ev.class).copied().unwrap_or(0.0);
                if rng.gen::<f64>() < p {
                    plans[i][span.clone()].iter_mut().for_each(|x| *x = Some(room));
                    taken += 1;
                }
            }
        }

        for (pi, person) in people.iter().enumerate() {
            let prof = &cfg.profiles[person.profile];
            let plan = &plans[pi];
            let mut silent = vec![false; MINUTES];
            let inside: Vec<usize> = (0..MINUTES).filter(|&m| plan[m].is_some()).collect();
            for hour in inside.chunks(60) {
                if rng.gen::<f64>() < prof.dropout_per_hour {
                    let from = hour[0];
                    let len = rng.gen_range(20..=90usize);
                    silent[from..(from + len).min(MINUTES)].iter_mut().for_each(|s| *s = true);
                }
            }
            let mut m = 0;
            while m < MINUTES {
                let Some(room) = plan[m] else {
                    m += 1;
                    continue;
                };
                let mut end = m;
                while end < MINUTES && plan[end] == Some(room) {
                    end += 1;
                }
                truth.push(TruthRecord {
                    device: person.device.clone(),
                    room: RoomId::new(&cfg.rooms[room].id),
                    start: day_start + m as i64 * 60,
                    end: day_start + end as i64 * 60,
                });
                for (minute, &quiet) in silent.iter().enumerate().take(end).skip(m) {
                    if quiet || rng.gen::<f64>() >= prof.emission {
                        continue;
                    }
                    let ap = aps_of[room].choose(&mut rng).expect("validated coverage").clone();
                    let t = day_start + minute as i64 * 60 + rng.gen_range(0..60);
                    raw.push(RawEvent {
                        eid: format!("e{}", raw.len()),
                        device: person.device.clone(),
                        t,
                        ap,
                    });
                }
                m = end;
            }
        }
    }
    Ok(Simulation {
        space,
        people,
        events: raw,
        truth,
    })
}
