//! Fine localization: the room of a device inside a known region, inferred
//! from the rooms its neighbors could occupy.

pub mod affinity;
pub mod posterior;

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::config::{DependentFormula, EngineConfig, RoomWeights, StopRule, Variant};
use crate::error::{LocaterError, Result};
use crate::model::{AnswerLevel, DeviceId, LocationAnswer, RegionId, RoomId, SpaceModel, Timestamp};

pub use affinity::{device_affinity, group_affinity, room_affinity};
pub use posterior::{posterior_dependent, posterior_independent, should_stop, Bounds, Evidence};

/// Data fine localization reads besides the space model.
pub trait FineContext {
    fn space(&self) -> &SpaceModel;
    fn weights(&self) -> &RoomWeights;
    /// Every device other than `device` worth considering at `t`.
    fn others(&self, device: &DeviceId, t: Timestamp) -> Vec<DeviceId>;
    /// Region of `device` at `t` when it is online inside the building.
    fn region_at(&self, device: &DeviceId, t: Timestamp) -> Option<RegionId>;
    /// Co-location affinity of a set of devices over the window before `t`.
    fn device_affinity(&self, devices: &[DeviceId], t: Timestamp) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineOptions {
    pub variant: Variant,
    pub eq2_prior: bool,
    pub formula: DependentFormula,
    pub stop_rule: StopRule,
    pub max_neighbors: usize,
}

impl FineOptions {
    pub fn from_config(cfg: &EngineConfig) -> Self {
        FineOptions {
            variant: cfg.variant,
            eq2_prior: cfg.eq2_prior,
            formula: cfg.dependent_formula,
            stop_rule: cfg.stop_rule,
            max_neighbors: cfg.max_neighbors,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub device: DeviceId,
    pub region: RegionId,
    /// Device affinity with the query device.
    pub affinity: f64,
    pub room_affinity: BTreeMap<RoomId, f64>,
    /// Group affinity with the query device per candidate room.
    pub alphas: BTreeMap<RoomId, f64>,
}

#[derive(Debug, Clone)]
pub struct FineOutcome {
    pub answer: LocationAnswer,
    pub neighbors: Vec<Neighbor>,
    /// Neighbors in processing order; the first `answer.processed_neighbors`
    /// of them were used.
    pub order: Vec<usize>,
}

impl FineOutcome {
    pub fn processed(&self) -> impl Iterator<Item = &Neighbor> {
        self.order[..self.answer.processed_neighbors]
            .iter()
            .map(|&i| &self.neighbors[i])
    }
}

/// Devices online at `t` in a region sharing rooms with `region` and with a
/// positive group affinity for some candidate room, by decreasing device
/// affinity (ties by identifier), at most `max` of them.
pub fn find_neighbors<C: FineContext + ?Sized>(
    ctx: &C,
    device: &DeviceId,
    t: Timestamp,
    region: &RegionId,
    own: &BTreeMap<RoomId, f64>,
    max: usize,
) -> Result<Vec<Neighbor>> {
    let space = ctx.space();
    let mut out = Vec::new();
    for other in ctx.others(device, t) {
        if &other == device {
            continue;
        }
        let affinity = ctx.device_affinity(&[device.clone(), other.clone()], t);
        if affinity <= 0.0 {
            continue;
        }
        let Some(g) = ctx.region_at(&other, t) else { continue };
        if !space.regions_overlap(region, &g) {
            continue;
        }
        let theirs = room_affinity(space, &other, &g, ctx.weights())?;
        let alphas: BTreeMap<RoomId, f64> = own
            .keys()
            .map(|r| (r.clone(), group_affinity(affinity, &[own, &theirs], r)))
            .collect();
        if alphas.values().all(|a| *a <= 0.0) {
            continue;
        }
        out.push(Neighbor {
            device: other,
            region: g,
            affinity,
            room_affinity: theirs,
            alphas,
        });
    }
    out.sort_by(|a, b| b.affinity.total_cmp(&a.affinity).then_with(|| a.device.cmp(&b.device)));
    out.truncate(max);
    Ok(out)
}

/// Reorders neighbor identifiers before processing.
pub type Reorder<'a> = &'a dyn Fn(&[DeviceId]) -> Vec<DeviceId>;

/// Room of `device` at `t` given that it is in `region`. `reorder` may
/// change the processing order of the neighbor identifiers it is given.
pub fn fine_localize<C: FineContext + ?Sized>(
    ctx: &C,
    device: &DeviceId,
    t: Timestamp,
    region: &RegionId,
    opts: &FineOptions,
    reorder: Option<Reorder<'_>>,
) -> Result<FineOutcome> {
    let prior = room_affinity(ctx.space(), device, region, ctx.weights())?;
    let rooms: Vec<RoomId> = prior.keys().cloned().collect();
    let neighbors = if rooms.len() > 1 {
        find_neighbors(ctx, device, t, region, &prior, opts.max_neighbors)?
    } else {
        Vec::new()
    };
    let order: Vec<usize> = match reorder {
        Some(f) => {
            let ids: Vec<DeviceId> = neighbors.iter().map(|n| n.device.clone()).collect();
            let pos: HashMap<&DeviceId, usize> = ids.iter().enumerate().map(|(i, d)| (d, i)).collect();
            let mut seen = HashSet::new();
            let order: Vec<usize> = f(&ids)
                .iter()
                .filter_map(|d| pos.get(d).copied())
                .filter(|i| seen.insert(*i))
                .collect();
            if order.len() != ids.len() {
                return Err(LocaterError::Format("neighbor reordering lost devices".into()));
            }
            order
        }
        None => (0..neighbors.len()).collect(),
    };

    let prior_v: Vec<f64> = rooms.iter().map(|r| prior[r]).collect();
    let (post, processed) = match opts.variant {
        Variant::Independent => independent(&rooms, &prior_v, &neighbors, &order, opts),
        Variant::Dependent => (dependent(ctx, device, t, &rooms, &prior_v, &neighbors, opts), neighbors.len()),
    };

    let mut dist: BTreeMap<RoomId, f64> = rooms.iter().cloned().zip(post).collect();
    let total: f64 = dist.values().sum();
    if total <= 0.0 {
        dist = prior.clone();
    } else {
        dist.values_mut().for_each(|v| *v /= total);
    }
    let room = crate::model::argmax(&dist);
    Ok(FineOutcome {
        answer: LocationAnswer {
            level: AnswerLevel::Room,
            region: Some(region.clone()),
            room,
            distribution: dist,
            processed_neighbors: processed,
        },
        neighbors,
        order,
    })
}

fn placement(rooms: &[RoomId], n: &Neighbor) -> Vec<f64> {
    let raw: Vec<f64> = rooms.iter().map(|r| n.room_affinity.get(r).copied().unwrap_or(0.0)).collect();
    let s: f64 = raw.iter().sum();
    if s > 0.0 {
        raw.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / rooms.len() as f64; rooms.len()]
    }
}

fn independent(
    rooms: &[RoomId],
    prior: &[f64],
    neighbors: &[Neighbor],
    order: &[usize],
    opts: &FineOptions,
) -> (Vec<f64>, usize) {
    let alphas = |n: &Neighbor| rooms.iter().map(|r| n.alphas[r]).collect::<Vec<f64>>();
    let mut ev = Evidence {
        prior: prior.to_vec(),
        processed: Vec::new(),
        unprocessed: order.iter().map(|&i| alphas(&neighbors[i])).collect(),
        placement: order.iter().map(|&i| placement(rooms, &neighbors[i])).collect(),
        eq2_prior: opts.eq2_prior,
    };
    while !ev.unprocessed.is_empty() {
        ev.processed.push(ev.unprocessed.remove(0));
        ev.placement.remove(0);
        if opts.stop_rule != StopRule::Exhaustive && should_stop(&ev.posterior(), &ev.bounds(), opts.stop_rule) {
            break;
        }
    }
    (ev.posterior(), ev.processed.len())
}

/// Neighbors linked by a positive pairwise group affinity for a room form
/// a cluster; each cluster enters the posterior once.
fn dependent<C: FineContext + ?Sized>(
    ctx: &C,
    device: &DeviceId,
    t: Timestamp,
    rooms: &[RoomId],
    prior: &[f64],
    neighbors: &[Neighbor],
    opts: &FineOptions,
) -> Vec<f64> {
    let n = neighbors.len();
    let mut set_affinity: HashMap<Vec<DeviceId>, f64> = HashMap::new();
    let mut affinity_of = |members: Vec<DeviceId>| -> f64 {
        let mut key = members;
        key.sort();
        *set_affinity.entry(key.clone()).or_insert_with(|| ctx.device_affinity(&key, t))
    };
    let mut pair = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let a = affinity_of(vec![neighbors[i].device.clone(), neighbors[j].device.clone()]);
            pair[i][j] = a;
            pair[j][i] = a;
        }
    }
    let own_map = rooms_prior_map(rooms, prior);
    rooms
        .iter()
        .enumerate()
        .map(|(ri, r)| {
            let mut parent: Vec<usize> = (0..n).collect();
            fn find(p: &mut [usize], x: usize) -> usize {
                let mut x = x;
                while p[x] != x {
                    p[x] = p[p[x]];
                    x = p[x];
                }
                x
            }
            for i in 0..n {
                for j in i + 1..n {
                    if pair[i][j] > 0.0
                        && group_affinity(pair[i][j], &[&neighbors[i].room_affinity, &neighbors[j].room_affinity], r) > 0.0
                    {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
            let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in 0..n {
                let root = find(&mut parent, i);
                clusters.entry(root).or_default().push(i);
            }
            let values: Vec<f64> = clusters
                .values()
                .map(|members| {
                    if members.len() == 1 {
                        return neighbors[members[0]].alphas[r];
                    }
                    let mut ids: Vec<DeviceId> = members.iter().map(|&i| neighbors[i].device.clone()).collect();
                    ids.push(device.clone());
                    let a = affinity_of(ids);
                    let mut maps: Vec<&BTreeMap<RoomId, f64>> = vec![&own_map];
                    maps.extend(members.iter().map(|&i| &neighbors[i].room_affinity));
                    group_affinity(a, &maps, r)
                })
                .collect();
            posterior_dependent(prior[ri], &values, opts.formula, opts.eq2_prior)
        })
        .collect()
}

fn rooms_prior_map(rooms: &[RoomId], prior: &[f64]) -> BTreeMap<RoomId, f64> {
    rooms.iter().cloned().zip(prior.iter().copied()).collect()
}

/// Edge weights among the query device and the processed neighbors: the
/// pair's group affinity summed over candidate rooms, over their number.
pub fn local_graph<C: FineContext + ?Sized>(
    ctx: &C,
    device: &DeviceId,
    t: Timestamp,
    outcome: &FineOutcome,
) -> Vec<(DeviceId, DeviceId, f64)> {
    let rooms: Vec<&RoomId> = outcome.answer.distribution.keys().collect();
    if rooms.is_empty() {
        return Vec::new();
    }
    let m = rooms.len() as f64;
    let processed: Vec<&Neighbor> = outcome.processed().collect();
    let mut edges = Vec::new();
    for (i, a) in processed.iter().enumerate() {
        edges.push((device.clone(), a.device.clone(), a.alphas.values().sum::<f64>() / m));
        for b in &processed[i + 1..] {
            let alpha = ctx.device_affinity(&[a.device.clone(), b.device.clone()], t);
            let w: f64 = rooms
                .iter()
                .map(|r| group_affinity(alpha, &[&a.room_affinity, &b.room_affinity], r))
                .sum::<f64>()
                / m;
            edges.push((a.device.clone(), b.device.clone(), w));
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::parse_space;
    use approx::assert_relative_eq;

    struct Mock {
        space: SpaceModel,
        weights: RoomWeights,
        regions: BTreeMap<DeviceId, RegionId>,
        affinity: HashMap<Vec<DeviceId>, f64>,
    }

    impl FineContext for Mock {
        fn space(&self) -> &SpaceModel {
            &self.space
        }
        fn weights(&self) -> &RoomWeights {
            &self.weights
        }
        fn others(&self, device: &DeviceId, _t: Timestamp) -> Vec<DeviceId> {
            self.regions.keys().filter(|d| *d != device).cloned().collect()
        }
        fn region_at(&self, device: &DeviceId, _t: Timestamp) -> Option<RegionId> {
            self.regions.get(device).cloned()
        }
        fn device_affinity(&self, devices: &[DeviceId], _t: Timestamp) -> f64 {
            let mut k = devices.to_vec();
            k.sort();
            self.affinity.get(&k).copied().unwrap_or(0.0)
        }
    }

    fn d(s: &str) -> DeviceId {
        DeviceId::new(s)
    }

    fn mock() -> Mock {
        let space = parse_space(
            r#"{"regions": {"g1": ["a", "b", "c"], "g2": ["c", "e"], "g3": ["f"]},
                "rooms": {"a": {"type": "private", "owners": ["q"]}, "b": {"type": "public"},
                          "c": {"type": "public"}, "e": {"type": "private", "owners": ["n2"]},
                          "f": {"type": "public"}}}"#,
        )
        .unwrap();
        let regions = [("q", "g1"), ("n1", "g1"), ("n2", "g2"), ("n3", "g3"), ("n4", "g1")]
            .iter()
            .map(|(a, b)| (d(a), RegionId::new(b)))
            .collect();
        let mut affinity = HashMap::new();
        for (a, b, v) in [("n1", "q", 0.5), ("n2", "q", 0.4), ("n3", "q", 0.9), ("n1", "n2", 0.3)] {
            affinity.insert(vec![d(a), d(b)], v);
        }
        affinity.insert(vec![d("n1"), d("n2"), d("q")], 0.2);
        Mock {
            space,
            weights: RoomWeights::default(),
            regions,
            affinity,
        }
    }

    fn opts(variant: Variant, stop_rule: StopRule) -> FineOptions {
        FineOptions {
            variant,
            eq2_prior: false,
            formula: DependentFormula::Odds,
            stop_rule,
            max_neighbors: 32,
        }
    }

    #[test]
    fn neighbors_need_overlap_and_affinity() {
        let m = mock();
        let own = room_affinity(&m.space, &d("q"), &RegionId::new("g1"), &m.weights).unwrap();
        let n = find_neighbors(&m, &d("q"), 0, &RegionId::new("g1"), &own, 32).unwrap();
        let ids: Vec<&str> = n.iter().map(|x| x.device.as_str()).collect();
        assert_eq!(ids, vec!["n1", "n2"]);
        // n2 shares only room c with g1
        assert_eq!(n[1].alphas[&RoomId::new("a")], 0.0);
        assert_relative_eq!(n[1].alphas[&RoomId::new("c")], 0.4 * (0.2 / 0.2) * 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exhaustive_independent_matches_product_rule() {
        let m = mock();
        let out = fine_localize(&m, &d("q"), 0, &RegionId::new("g1"), &opts(Variant::Independent, StopRule::Exhaustive), None).unwrap();
        assert_eq!(out.answer.processed_neighbors, 2);
        let n = &out.neighbors;
        let raw: BTreeMap<&RoomId, f64> = out
            .answer
            .distribution
            .keys()
            .map(|r| (r, posterior_independent(0.0, &[n[0].alphas[r], n[1].alphas[r]], false)))
            .collect();
        let total: f64 = raw.values().sum();
        for (r, p) in &out.answer.distribution {
            assert_relative_eq!(*p, raw[r] / total, epsilon = 1e-12);
        }
        assert_eq!(out.answer.room, Some(RoomId::new("c")));
    }

    #[test]
    fn single_room_region_needs_no_neighbors() {
        let m = mock();
        let out = fine_localize(&m, &d("n3"), 0, &RegionId::new("g3"), &opts(Variant::Independent, StopRule::Loose), None).unwrap();
        assert_eq!(out.answer.room, Some(RoomId::new("f")));
        assert_eq!(out.answer.processed_neighbors, 0);
        assert_eq!(out.answer.probability(), Some(1.0));
    }

    #[test]
    fn no_neighbors_falls_back_to_prior() {
        let mut m = mock();
        m.affinity.clear();
        let out = fine_localize(&m, &d("q"), 0, &RegionId::new("g1"), &opts(Variant::Independent, StopRule::Loose), None).unwrap();
        assert_eq!(out.answer.room, Some(RoomId::new("a")));
        assert_relative_eq!(out.answer.probability().unwrap(), 0.6 / 0.9, epsilon = 1e-12);
    }

    #[test]
    fn dependent_merges_linked_neighbors() {
        let m = mock();
        let out = fine_localize(&m, &d("q"), 0, &RegionId::new("g1"), &opts(Variant::Dependent, StopRule::Loose), None).unwrap();
        // n1 and n2 are linked through room c only
        let own = room_affinity(&m.space, &d("q"), &RegionId::new("g1"), &m.weights).unwrap();
        let c = RoomId::new("c");
        let n = &out.neighbors;
        let cluster = group_affinity(0.2, &[&own, &n[0].room_affinity, &n[1].room_affinity], &c);
        assert!(posterior_independent(0.0, &[cluster], false) > 0.0);
        // a neighbor with zero affinity for a room rules that room out
        assert_relative_eq!(out.answer.distribution[&c], 1.0, epsilon = 1e-12);
        assert_eq!(out.answer.distribution[&RoomId::new("b")], 0.0);
    }

    #[test]
    fn distribution_is_normalized() {
        let m = mock();
        for variant in [Variant::Independent, Variant::Dependent] {
            for formula in [DependentFormula::Odds, DependentFormula::Verbatim] {
                let mut o = opts(variant, StopRule::Loose);
                o.formula = formula;
                let out = fine_localize(&m, &d("q"), 0, &RegionId::new("g1"), &o, None).unwrap();
                assert_relative_eq!(out.answer.distribution.values().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn reorder_changes_processing_order() {
        let m = mock();
        let rev = |ids: &[DeviceId]| ids.iter().rev().cloned().collect::<Vec<_>>();
        let out = fine_localize(&m, &d("q"), 0, &RegionId::new("g1"), &opts(Variant::Independent, StopRule::Exhaustive), Some(&rev)).unwrap();
        assert_eq!(out.order, vec![1, 0]);
    }

    #[test]
    fn local_graph_weights() {
        let m = mock();
        let out = fine_localize(&m, &d("q"), 0, &RegionId::new("g1"), &opts(Variant::Independent, StopRule::Exhaustive), None).unwrap();
        let edges = local_graph(&m, &d("q"), 0, &out);
        let n1 = &out.neighbors[0];
        let w = n1.alphas.values().sum::<f64>() / 3.0;
        assert!(edges.iter().any(|(a, b, x)| a == &d("q") && b == &d("n1") && (x - w).abs() < 1e-12));
        assert!(edges.iter().any(|(a, b, _)| a == &d("n1") && b == &d("n2")));
    }

    #[test]
    fn shared_public_room_gains_probability() {
        let space = parse_space(
            r#"{"regions": {"g3": ["2059", "2061", "2065", "2069", "2099"], "g4": ["2004", "2065", "2069", "2099"]},
                "rooms": {"2059": {"type": "private"}, "2061": {"type": "private", "owners": ["d1"]},
                          "2065": {"type": "public"}, "2069": {"type": "private"},
                          "2099": {"type": "private", "owners": ["d2"]}, "2004": {"type": "public"}}}"#,
        )
        .unwrap();
        let m = Mock {
            space,
            weights: RoomWeights { pf: 0.5, pb: 0.3, pr: 0.2 },
            regions: [(d("d1"), RegionId::new("g3")), (d("d2"), RegionId::new("g4"))].into(),
            affinity: [(vec![d("d1"), d("d2")], 0.4)].into(),
        };
        let out = fine_localize(&m, &d("d1"), 0, &RegionId::new("g3"), &opts(Variant::Independent, StopRule::Exhaustive), None).unwrap();
        assert_eq!(out.answer.processed_neighbors, 1);
        assert_eq!(out.answer.room, Some(RoomId::new("2065")));
        assert!(out.answer.distribution[&RoomId::new("2065")] > 0.3);
    }
}
