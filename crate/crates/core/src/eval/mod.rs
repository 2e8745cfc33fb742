//! Query batches, accuracy metrics, baselines and comparison reports.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::AffinityCache;
use crate::config::{StopRule, Variant};
use crate::engine::Engine;
use crate::error::{LocaterError, Result};
use crate::fine::FineOptions;
use crate::model::{AnswerLevel, DeviceId, Granularity, LocationAnswer, RegionId, RoomId, SpaceModel, Timestamp};
use crate::sim::{Bucket, TruthIndex};
use crate::store::EventStore;

pub use report::{write_json, write_tsv, Comparison, SystemReport};

const OUTSIDE: &str = "outside";

/// Gaps at least this long are outside for the coarse baseline.
pub const BASELINE_GAP_S: i64 = 3600;

/// One evaluated query: the truth room (`None` for outside) and the answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub device: DeviceId,
    pub t: Timestamp,
    pub truth: Option<RoomId>,
    pub answer: LocationAnswer,
}

/// Share of queries per bucket for one distribution statistic.
pub type Histogram = [f64; 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub queries: usize,
    /// Highest probability, buckets `[0,.2) .. [.8,1]`.
    pub pr_h: Histogram,
    /// Highest minus second highest, buckets `[0,.1) .. [.4,1]`.
    pub delta_pr: Histogram,
    /// Sum beyond the top two, buckets `[0,.2) .. [.8,1]`.
    pub sigma_r: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub queries: usize,
    pub q_out: usize,
    pub q_region: usize,
    pub q_room: usize,
    pub a_c: f64,
    pub a_f: f64,
    pub a_o: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    /// Mean processed neighbors over room-level answers.
    pub mean_processed: f64,
    pub distribution: DistributionStats,
}

fn label(truth: &Option<RoomId>) -> String {
    truth.as_ref().map_or(OUTSIDE.to_string(), |r| r.to_string())
}

fn predicted_label(a: &LocationAnswer) -> String {
    match (a.level, &a.room, &a.region) {
        (AnswerLevel::Outside, _, _) => OUTSIDE.to_string(),
        (_, Some(r), _) => r.to_string(),
        (_, None, Some(g)) => format!("region:{g}"),
        (_, None, None) => "-".to_string(),
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn bucket_index(x: f64, width: f64) -> usize {
    ((x / width).floor().max(0.0) as usize).min(4)
}

pub fn distribution_stats(answers: &[&LocationAnswer]) -> DistributionStats {
    let mut pr_h = [0.0; 5];
    let mut delta_pr = [0.0; 5];
    let mut sigma_r = [0.0; 5];
    let mut n = 0;
    for a in answers {
        let total: f64 = a.distribution.values().sum();
        if a.level != AnswerLevel::Room || total <= 0.0 {
            continue;
        }
        let mut ps: Vec<f64> = a.distribution.values().map(|p| p / total).collect();
        ps.sort_by(|x, y| y.total_cmp(x));
        let top = ps[0];
        let second = ps.get(1).copied().unwrap_or(0.0);
        let rest: f64 = ps.iter().skip(2).sum();
        pr_h[bucket_index(top, 0.2)] += 1.0;
        delta_pr[bucket_index(top - second, 0.1)] += 1.0;
        sigma_r[bucket_index(rest, 0.2)] += 1.0;
        n += 1;
    }
    if n > 0 {
        for h in [&mut pr_h, &mut delta_pr, &mut sigma_r] {
            h.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    DistributionStats {
        queries: n,
        pr_h,
        delta_pr,
        sigma_r,
    }
}

/// Accuracy of `outcomes` against their truth labels. Macro metrics average
/// over the classes present in the truth; a class never predicted has
/// precision 0.
pub fn accuracy(outcomes: &[Outcome], space: &SpaceModel) -> Result<AccuracyReport> {
    if outcomes.is_empty() {
        return Err(LocaterError::EmptyQuerySet);
    }
    let (mut q_out, mut q_region, mut q_room) = (0, 0, 0);
    let mut tp: BTreeMap<String, usize> = BTreeMap::new();
    let mut truth_n: BTreeMap<String, usize> = BTreeMap::new();
    let mut pred_n: BTreeMap<String, usize> = BTreeMap::new();
    let (mut processed, mut rooms) = (0usize, 0usize);
    for o in outcomes {
        match (&o.truth, o.answer.level) {
            (None, AnswerLevel::Outside) => q_out += 1,
            (Some(r), AnswerLevel::Region | AnswerLevel::Room) => {
                let in_region = o
                    .answer
                    .region
                    .as_ref()
                    .and_then(|g| space.rooms_of_region(g).ok())
                    .is_some_and(|rs| rs.contains(r));
                if in_region {
                    q_region += 1;
                    if o.answer.room.as_ref() == Some(r) {
                        q_room += 1;
                    }
                }
            }
            _ => {}
        }
        if o.answer.level == AnswerLevel::Room {
            processed += o.answer.processed_neighbors;
            rooms += 1;
        }
        let (t, p) = (label(&o.truth), predicted_label(&o.answer));
        if t == p {
            *tp.entry(t.clone()).or_default() += 1;
        }
        *truth_n.entry(t).or_default() += 1;
        *pred_n.entry(p).or_default() += 1;
    }
    let q = outcomes.len();
    let classes = truth_n.len() as f64;
    let hits = |c: &String| tp.get(c).copied().unwrap_or(0);
    let macro_precision = truth_n
        .keys()
        .map(|c| ratio(hits(c), pred_n.get(c).copied().unwrap_or(0)))
        .sum::<f64>()
        / classes;
    let macro_recall = truth_n.iter().map(|(c, n)| ratio(hits(c), *n)).sum::<f64>() / classes;
    let correct: usize = tp.values().sum();
    let micro = ratio(correct, q);
    let answers: Vec<&LocationAnswer> = outcomes.iter().map(|o| &o.answer).collect();
    Ok(AccuracyReport {
        queries: q,
        q_out,
        q_region,
        q_room,
        a_c: ratio(q_out + q_region, q),
        a_f: ratio(q_room, q_region),
        a_o: ratio(q_room + q_out, q),
        macro_precision,
        macro_recall,
        macro_f1: harmonic(macro_precision, macro_recall),
        micro_precision: micro,
        micro_recall: micro,
        micro_f1: micro,
        mean_processed: ratio(processed, rooms),
        distribution: distribution_stats(&answers),
    })
}

/// Coarse baseline: clean tuples give their region, gaps of at least an
/// hour are outside, shorter gaps keep the last known region.
pub fn coarse_baseline(store: &EventStore, device: &DeviceId, t: Timestamp) -> Result<Option<RegionId>> {
    let tuple = store.table.lookup_tuple(device, t)?;
    if let Some(g) = tuple.region() {
        return Ok(Some(g.clone()));
    }
    if tuple.duration() >= BASELINE_GAP_S {
        return Ok(None);
    }
    let idx = store.table.index_at(device, t).expect("tuple exists");
    Ok(store.table.tuples(device)[..idx]
        .iter()
        .rev()
        .find_map(|x| x.region().cloned()))
}

/// Per-query seed derived from a batch seed.
pub fn query_seed(seed: u64, device: &DeviceId, t: Timestamp) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(device.as_str().as_bytes());
    h.update(t.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Uniform seeded choice among the rooms of `region`.
pub fn fine_baseline1(space: &SpaceModel, region: &RegionId, seed: u64) -> Result<RoomId> {
    let rooms: Vec<&RoomId> = space.rooms_of_region(region)?.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rooms[rng.gen_range(0..rooms.len())].clone())
}

/// The device's preferred room when it lies in `region`, else baseline1.
pub fn fine_baseline2(space: &SpaceModel, region: &RegionId, device: &DeviceId, seed: u64) -> Result<RoomId> {
    let rooms = space.rooms_of_region(region)?;
    match space.preferred_rooms(device).into_iter().find(|r| rooms.contains(r)) {
        Some(r) => Ok(r),
        None => fine_baseline1(space, region, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    Baseline1,
    Baseline2,
    ILocater,
    DLocater,
    ILocaterCache,
    DLocaterCache,
}

impl System {
    pub const ALL: [System; 6] = [
        System::Baseline1,
        System::Baseline2,
        System::ILocater,
        System::DLocater,
        System::ILocaterCache,
        System::DLocaterCache,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Baseline1 => "baseline1",
            System::Baseline2 => "baseline2",
            System::ILocater => "i-locater",
            System::DLocater => "d-locater",
            System::ILocaterCache => "i-locater+c",
            System::DLocaterCache => "d-locater+c",
        }
    }

    fn variant(self) -> Option<Variant> {
        match self {
            System::ILocater | System::ILocaterCache => Some(Variant::Independent),
            System::DLocater | System::DLocaterCache => Some(Variant::Dependent),
            _ => None,
        }
    }

    fn cached(self) -> bool {
        matches!(self, System::ILocaterCache | System::DLocaterCache)
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for System {
    type Err = LocaterError;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase();
        System::ALL
            .into_iter()
            .find(|x| x.name() == k)
            .ok_or_else(|| LocaterError::InvalidConfig(format!("unknown system `{s}`")))
    }
}

pub fn parse_systems(list: &str) -> Result<Vec<System>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// `n` seeded (device, time) queries. Devices are drawn uniformly among
/// those with both events and truth records; times uniformly within the
/// device's horizon once `warmup_days` of history exist.
pub fn sample_queries(
    store: &EventStore,
    truth: &TruthIndex,
    n: usize,
    seed: u64,
    warmup_days: i64,
) -> Result<Vec<(DeviceId, Timestamp)>> {
    let known: BTreeSet<&DeviceId> = truth.devices().collect();
    let start = store
        .table
        .devices()
        .filter_map(|d| store.table.horizon(d))
        .map(|h| h.0)
        .min()
        .ok_or(LocaterError::EmptyQuerySet)?;
    let earliest = store.clock.shift_days(store.clock.day_start(start), warmup_days);
    let windows: Vec<(DeviceId, Timestamp, Timestamp)> = store
        .table
        .devices()
        .filter(|d| known.contains(d))
        .filter_map(|d| {
            let (lo, hi) = store.table.horizon(d)?;
            let lo = lo.max(earliest);
            (lo < hi).then(|| (d.clone(), lo, hi))
        })
        .collect();
    if windows.is_empty() {
        return Err(LocaterError::EmptyQuerySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (d, lo, hi) = &windows[rng.gen_range(0..windows.len())];
            (d.clone(), rng.gen_range(*lo..*hi))
        })
        .collect())
}

/// Answers every query with `system`. Cached systems start from an empty
/// in-memory cache and process the queries in order.
pub fn run_system(
    engine: &Engine,
    system: System,
    queries: &[(DeviceId, Timestamp)],
    seed: u64,
) -> Result<Vec<LocationAnswer>> {
    let store = engine.store();
    let space = &store.space;
    match system.variant() {
        None => queries
            .iter()
            .map(|(d, t)| {
                let Some(g) = coarse_baseline(store, d, *t)? else {
                    return Ok(LocationAnswer::outside());
                };
                let s = query_seed(seed, d, *t);
                let room = match system {
                    System::Baseline1 => fine_baseline1(space, &g, s)?,
                    _ => fine_baseline2(space, &g, d, s)?,
                };
                let mut a = LocationAnswer::region(g);
                a.level = AnswerLevel::Room;
                a.distribution.insert(room.clone(), 1.0);
                a.room = Some(room);
                Ok(a)
            })
            .collect(),
        Some(variant) => {
            let opts = FineOptions {
                variant,
                ..*engine.fine_options()
            };
            let cache = system.cached().then(AffinityCache::in_memory);
            queries
                .iter()
                .map(|(d, t)| engine.answer_with(d, *t, Granularity::Fine, &opts, cache.as_ref()))
                .collect()
        }
    }
}

/// Fine options with an explicit stop rule, for exhaustive comparisons.
pub fn with_stop_rule(opts: &FineOptions, stop_rule: StopRule) -> FineOptions {
    FineOptions {
        stop_rule,
        ..*opts
    }
}

/// Runs `systems` over `queries` and reports overall and per-bucket
/// accuracy, bucketing devices by `predictability` (percent).
pub fn compare(
    engine: &Engine,
    truth: &TruthIndex,
    queries: &[(DeviceId, Timestamp)],
    systems: &[System],
    predictability: &BTreeMap<DeviceId, f64>,
    seed: u64,
) -> Result<Comparison> {
    let space = &engine.store().space;
    let mut rows = Vec::new();
    for &system in systems {
        let answers = run_system(engine, system, queries, seed)?;
        let outcomes: Vec<Outcome> = queries
            .iter()
            .zip(answers)
            .map(|((d, t), answer)| Outcome {
                device: d.clone(),
                t: *t,
                truth: truth.room_at(d, *t).cloned(),
                answer,
            })
            .collect();
        let overall = accuracy(&outcomes, space)?;
        let mut buckets = BTreeMap::new();
        for b in Bucket::ALL {
            let part: Vec<Outcome> = outcomes
                .iter()
                .filter(|o| predictability.get(&o.device).map(|p| Bucket::of(*p)) == Some(b))
                .cloned()
                .collect();
            if !part.is_empty() {
                buckets.insert(b, accuracy(&part, space)?);
            }
        }
        rows.push(SystemReport {
            system,
            overall,
            buckets,
        });
    }
    Ok(Comparison { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DeltaConfig;
    use crate::model::ApId;
    use crate::store::{parse_space, RawEvent};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn space() -> SpaceModel {
        parse_space(
            r#"{"regions": {"w1": {"region": "g1", "rooms": ["a", "b"]}, "w2": {"region": "g2", "rooms": ["b", "c", "d"]}},
                "rooms": {"a": {"type": "public"}, "b": {"type": "public"}, "c": {"type": "private", "owners": ["x"]},
                          "d": {"type": "public"}}}"#,
        )
        .unwrap()
    }

    fn room(level: AnswerLevel, region: Option<&str>, room: Option<&str>) -> LocationAnswer {
        LocationAnswer {
            level,
            region: region.map(RegionId::new),
            room: room.map(RoomId::new),
            distribution: room.map(|r| [(RoomId::new(r), 1.0)].into()).unwrap_or_default(),
            processed_neighbors: 0,
        }
    }

    fn outcome(truth: Option<&str>, answer: LocationAnswer) -> Outcome {
        Outcome {
            device: DeviceId::new("x"),
            t: 0,
            truth: truth.map(RoomId::new),
            answer,
        }
    }

    fn ten_queries() -> Vec<Outcome> {
        use AnswerLevel::*;
        let mut v = vec![
            outcome(None, room(Outside, None, None)),
            outcome(None, room(Outside, None, None)),
        ];
        for _ in 0..5 {
            v.push(outcome(Some("a"), room(Room, Some("g1"), Some("a"))));
        }
        v.push(outcome(Some("a"), room(Room, Some("g1"), Some("b"))));
        v.push(outcome(Some("a"), room(Room, Some("g2"), Some("b"))));
        v.push(outcome(Some("c"), room(Outside, None, None)));
        v
    }

    #[test]
    fn metric_definitions() {
        let r = accuracy(&ten_queries(), &space()).unwrap();
        assert_eq!((r.q_out, r.q_region, r.q_room), (2, 6, 5));
        assert_relative_eq!(r.a_c, 0.8);
        assert_relative_eq!(r.a_f, 5.0 / 6.0);
        assert_relative_eq!(r.a_o, 0.7);
        assert!(r.a_o <= r.a_c);
    }

    #[test]
    fn macro_metrics_match_hand_built_confusion() {
        // classes: outside (truth 3), a (truth 7), c (truth 1)
        // predicted: outside 3 (2 hits), a 5 (5 hits), b 2
        let r = accuracy(&ten_queries(), &space()).unwrap();
        let p = (2.0 / 3.0 + 5.0 / 5.0 + 0.0) / 3.0;
        let rc = (2.0 / 2.0 + 5.0 / 7.0 + 0.0) / 3.0;
        assert_relative_eq!(r.macro_precision, p, epsilon = 1e-12);
        assert_relative_eq!(r.macro_recall, rc, epsilon = 1e-12);
        assert_relative_eq!(r.macro_f1, 2.0 * p * rc / (p + rc), epsilon = 1e-12);
        assert_relative_eq!(r.micro_f1, 0.7);
    }

    #[test]
    fn all_correct_is_perfect() {
        let o = vec![
            outcome(Some("a"), room(AnswerLevel::Room, Some("g1"), Some("a"))),
            outcome(None, room(AnswerLevel::Outside, None, None)),
        ];
        let r = accuracy(&o, &space()).unwrap();
        assert_eq!((r.a_c, r.a_f, r.a_o), (1.0, 1.0, 1.0));
        assert_eq!((r.macro_precision, r.macro_recall), (1.0, 1.0));
    }

    #[test]
    fn empty_query_set_is_an_error() {
        assert!(matches!(accuracy(&[], &space()), Err(LocaterError::EmptyQuerySet)));
    }

    #[test]
    fn distribution_buckets() {
        let mut a = room(AnswerLevel::Room, Some("g2"), Some("b"));
        a.distribution = [(RoomId::new("b"), 0.5), (RoomId::new("c"), 0.25), (RoomId::new("d"), 0.25)].into();
        let s = distribution_stats(&[&a]);
        assert_eq!(s.pr_h, [0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.delta_pr, [0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.sigma_r, [0.0, 1.0, 0.0, 0.0, 0.0]);
        a.distribution = [(RoomId::new("b"), 1.0)].into();
        let s = distribution_stats(&[&a]);
        assert_eq!(s.pr_h[4], 1.0);
        assert_eq!(s.delta_pr[4], 1.0);
        assert_eq!(s.sigma_r[0], 1.0);
    }

    #[test]
    fn baselines() {
        let s = space();
        let g2 = RegionId::new("g2");
        assert_eq!(fine_baseline2(&s, &g2, &DeviceId::new("x"), 1).unwrap(), RoomId::new("c"));
        let g1 = RegionId::new("g1");
        assert_eq!(
            fine_baseline2(&s, &g1, &DeviceId::new("x"), 7).unwrap(),
            fine_baseline1(&s, &g1, 7).unwrap()
        );
        assert_eq!(fine_baseline1(&s, &g2, 42).unwrap(), fine_baseline1(&s, &g2, 42).unwrap());
        assert!(fine_baseline1(&s, &RegionId::new("nope"), 1).is_err());
    }

    #[test]
    fn baseline1_is_uniform() {
        let s = space();
        let g2 = RegionId::new("g2");
        let n = 3000;
        let hits = (0..n)
            .filter(|i| fine_baseline1(&s, &g2, query_seed(5, &DeviceId::new("x"), *i)).unwrap() == RoomId::new("c"))
            .count() as f64;
        let (p, sd) = (1.0 / 3.0, (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt());
        assert!((hits - p * n as f64).abs() < 3.0 * sd, "{hits}");
    }

    fn store(events: &[(i64, &str)]) -> EventStore {
        let events = events
            .iter()
            .enumerate()
            .map(|(i, (t, ap))| RawEvent {
                eid: i.to_string(),
                device: DeviceId::new("x"),
                t: *t,
                ap: ApId::new(ap),
            })
            .collect();
        EventStore::from_parts(events, space(), crate::clock::Clock::default(), DeltaConfig::default()).unwrap()
    }

    #[test]
    fn coarse_baseline_rules() {
        let t0 = 1_566_172_800 + 3600;
        let t1 = t0 + 600 + 59 * 60 + 600;
        let t2 = t1 + 600 + 61 * 60 + 600;
        let s = store(&[(t0, "w2"), (t1, "w1"), (t2, "w1")]);
        let x = DeviceId::new("x");
        assert_eq!(s.table.deltas[&x], 600);
        assert_eq!(coarse_baseline(&s, &x, t0).unwrap(), Some(RegionId::new("g2")));
        assert_eq!(coarse_baseline(&s, &x, t0 + 1200).unwrap(), Some(RegionId::new("g2")));
        assert_eq!(coarse_baseline(&s, &x, t1 + 1200).unwrap(), None);
        assert_eq!(coarse_baseline(&s, &x, t1).unwrap(), Some(RegionId::new("g1")));
    }

    #[test]
    fn system_names_round_trip() {
        for s in System::ALL {
            assert_eq!(s.name().parse::<System>().unwrap(), s);
        }
        assert_eq!(parse_systems("baseline1, d-locater+c").unwrap(), vec![System::Baseline1, System::DLocaterCache]);
        assert!(parse_systems("").unwrap().is_empty());
        assert!(parse_systems("x-locater").is_err());
    }

    proptest! {
        #[test]
        fn accuracy_is_order_invariant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut o = ten_queries();
            let a = accuracy(&o, &space()).unwrap();
            o.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(accuracy(&o, &space()).unwrap(), a);
        }
    }
}
