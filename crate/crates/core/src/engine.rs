//! Query-time cleaning: a clean tuple answers directly, a gap goes through
//! coarse localization, and fine queries inside the building continue with
//! fine localization.
//!
//! Trained coarse models, gap decisions and device affinities are memoized
//! per engine, so a batch of queries over one store shares that work.

use std::sync::Arc;

use dashmap::DashMap;

use crate::cache::{AffinityCache, LocalAffinityGraph};
use crate::coarse::{classify_gap, train_device_model, train_pooled_model, CoarseDecision, CoarseModel, CoarseParams};
use crate::config::{EngineConfig, RoomWeights};
use crate::error::{LocaterError, Result};
use crate::fine::{self, FineContext, FineOptions};
use crate::model::{
    DeviceId, Granularity, Location, LocationAnswer, RegionId, SemanticLocationTuple, SpaceModel, Timestamp,
};
use crate::store::EventStore;

pub struct Engine<'s> {
    store: &'s EventStore,
    cfg: EngineConfig,
    params: CoarseParams,
    fine: FineOptions,
    cache: Option<AffinityCache>,
    models: DashMap<(DeviceId, Timestamp), Arc<CoarseModel>>,
    pooled: DashMap<Timestamp, Arc<CoarseModel>>,
    gaps: DashMap<(DeviceId, usize), Option<RegionId>>,
    affinity: DashMap<(Vec<DeviceId>, Timestamp), f64>,
}

impl<'s> Engine<'s> {
    pub fn new(store: &'s EventStore, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Engine {
            store,
            params: CoarseParams::from_config(&cfg),
            fine: FineOptions::from_config(&cfg),
            cfg,
            cache: None,
            models: DashMap::new(),
            pooled: DashMap::new(),
            gaps: DashMap::new(),
            affinity: DashMap::new(),
        })
    }

    /// Uses `cache` for neighbor ordering when the config enables caching.
    pub fn with_cache(mut self, cache: AffinityCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &EventStore {
        self.store
    }

    pub fn cache(&self) -> Option<&AffinityCache> {
        self.cache.as_ref()
    }

    pub fn fine_options(&self) -> &FineOptions {
        &self.fine
    }

    fn model(&self, device: &DeviceId, day: Timestamp) -> Result<Arc<CoarseModel>> {
        if let Some(m) = self.models.get(&(device.clone(), day)) {
            return Ok(m.clone());
        }
        let m = Arc::new(train_device_model(self.store, device, day, &self.params)?);
        self.models.insert((device.clone(), day), m.clone());
        Ok(m)
    }

    fn pooled_model(&self, day: Timestamp) -> Result<Arc<CoarseModel>> {
        if let Some(m) = self.pooled.get(&day) {
            return Ok(m.clone());
        }
        let m = Arc::new(train_pooled_model(self.store, day, &self.params)?);
        self.pooled.insert(day, m.clone());
        Ok(m)
    }

    /// Region of gap `idx` of `device`, `None` when classified outside.
    pub fn classify_gap(&self, device: &DeviceId, idx: usize) -> Result<Option<RegionId>> {
        if let Some(g) = self.gaps.get(&(device.clone(), idx)) {
            return Ok(g.clone());
        }
        let gap = &self.store.table.tuples(device)[idx];
        let day = self.store.clock.day_start(gap.st);
        let own = self.model(device, day)?;
        let pooled = if own.needs_pooled(&self.params) {
            Some(self.pooled_model(day)?)
        } else {
            None
        };
        let out = match classify_gap(self.store, device, idx, &own, pooled.as_deref(), &self.params) {
            CoarseDecision::Outside => None,
            CoarseDecision::Inside(g) => Some(g.clone()),
        };
        self.gaps.insert((device.clone(), idx), out.clone());
        Ok(out)
    }

    /// Coarse location of `device` at `t`: `None` for outside.
    pub fn coarse(&self, device: &DeviceId, t: Timestamp) -> Result<Option<RegionId>> {
        let tuple = self.store.table.lookup_tuple(device, t)?;
        if let Some(g) = tuple.region() {
            return Ok(Some(g.clone()));
        }
        let idx = self.store.table.index_at(device, t).expect("tuple exists");
        self.classify_gap(device, idx)
    }

    fn with_context<T>(device: &DeviceId, t: Timestamp, r: Result<T>) -> Result<T> {
        r.map_err(|e| LocaterError::Query {
            device: device.to_string(),
            time: t,
            source: Box::new(e),
        })
    }

    /// Answers a query with the configured fine options and cache setting.
    pub fn answer_query(&self, device: &DeviceId, t: Timestamp, granularity: Granularity) -> Result<LocationAnswer> {
        let cache = self.cache.as_ref().filter(|_| self.cfg.cache.enabled);
        self.answer_with(device, t, granularity, &self.fine, cache)
    }

    /// Answers a query with explicit fine options, ordering neighbors by
    /// `cache` and recording the local graph into it when given.
    pub fn answer_with(
        &self,
        device: &DeviceId,
        t: Timestamp,
        granularity: Granularity,
        opts: &FineOptions,
        cache: Option<&AffinityCache>,
    ) -> Result<LocationAnswer> {
        let region = match Self::with_context(device, t, self.coarse(device, t))? {
            None => return Ok(LocationAnswer::outside()),
            Some(g) => g,
        };
        if granularity == Granularity::Coarse {
            return Ok(LocationAnswer::region(region));
        }
        let order = |ids: &[DeviceId]| match cache {
            Some(c) => c.ordered_neighbors(device, t, ids),
            None => ids.to_vec(),
        };
        let reorder: Option<fine::Reorder<'_>> = cache.map(|_| &order as _);
        let out = Self::with_context(device, t, fine::fine_localize(self, device, t, &region, opts, reorder))?;
        if let Some(c) = cache {
            let edges = fine::local_graph(self, device, t, &out);
            Self::with_context(device, t, c.record(&LocalAffinityGraph::new(t, edges)))?;
        }
        Ok(out.answer)
    }

    /// The cleaned tuple for a gap answered by `answer`; `None` when `t`
    /// falls in a clean tuple.
    pub fn derived_tuple(&self, device: &DeviceId, t: Timestamp, answer: &LocationAnswer) -> Result<Option<SemanticLocationTuple>> {
        let tuple = self.store.table.lookup_tuple(device, t)?;
        if !tuple.is_gap() {
            return Ok(None);
        }
        let loc = match (&answer.room, &answer.region) {
            (Some(r), _) => Location::Room(r.clone()),
            (None, Some(g)) => Location::Region(g.clone()),
            (None, None) => Location::Outside,
        };
        Ok(Some(SemanticLocationTuple {
            loc,
            derived: true,
            ..tuple.clone()
        }))
    }
}

impl FineContext for Engine<'_> {
    fn space(&self) -> &SpaceModel {
        &self.store.space
    }

    fn weights(&self) -> &RoomWeights {
        &self.cfg.weights
    }

    fn others(&self, device: &DeviceId, _t: Timestamp) -> Vec<DeviceId> {
        self.store.table.devices().filter(|d| *d != device).cloned().collect()
    }

    fn region_at(&self, device: &DeviceId, t: Timestamp) -> Option<RegionId> {
        match self.coarse(device, t) {
            Ok(g) => g,
            Err(LocaterError::OutOfHorizon { .. }) | Err(LocaterError::UnknownDevice(_)) => None,
            Err(e) => {
                log::warn!("treating {device} as offline at {t}: {e}");
                None
            }
        }
    }

    fn device_affinity(&self, devices: &[DeviceId], t: Timestamp) -> f64 {
        let clock = &self.store.clock;
        let day = clock.day_start(t);
        let mut key = devices.to_vec();
        key.sort();
        key.dedup();
        let k = (key, day);
        if let Some(v) = self.affinity.get(&k) {
            return *v;
        }
        let from = clock.shift_days(day, -self.cfg.affinity_window_days);
        let v = fine::device_affinity(&self.store.table, &k.0, from, day);
        self.affinity.insert(k, v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DeltaConfig;
    use crate::model::{AnswerLevel, ApId, RoomId};
    use crate::store::{parse_space, RawEvent};

    const DAY0: i64 = 1_566_172_800;

    fn store(events: Vec<(&str, i64, &str)>) -> EventStore {
        let space = parse_space(
            r#"{"regions": {"w1": {"region": "g1", "rooms": ["a"]}, "w2": {"region": "g2", "rooms": ["b", "c"]}},
                "rooms": {"a": {"type": "public"}, "b": {"type": "private", "owners": ["x"]}, "c": {"type": "public"}}}"#,
        )
        .unwrap();
        let events = events
            .into_iter()
            .enumerate()
            .map(|(i, (d, t, ap))| RawEvent {
                eid: i.to_string(),
                device: DeviceId::new(d),
                t,
                ap: ApId::new(ap),
            })
            .collect();
        EventStore::from_parts(events, space, crate::clock::Clock::default(), DeltaConfig::default()).unwrap()
    }

    #[test]
    fn clean_tuple_in_single_room_region() {
        let s = store(vec![("x", DAY0 + 3600, "w1"), ("x", DAY0 + 3700, "w1")]);
        let e = Engine::new(&s, EngineConfig::default()).unwrap();
        let a = e.answer_query(&DeviceId::new("x"), DAY0 + 3650, Granularity::Fine).unwrap();
        assert_eq!(a.room, Some(RoomId::new("a")));
        assert_eq!(a.processed_neighbors, 0);
        assert!(e.models.is_empty());
    }

    #[test]
    fn long_gap_is_outside() {
        let s = store(vec![("x", DAY0 + 3600, "w2"), ("x", DAY0 + 3600 * 8, "w2")]);
        let e = Engine::new(&s, EngineConfig::default()).unwrap();
        let a = e.answer_query(&DeviceId::new("x"), DAY0 + 3600 * 4, Granularity::Fine).unwrap();
        assert_eq!(a.level, AnswerLevel::Outside);
    }

    #[test]
    fn coarse_query_has_empty_distribution() {
        let s = store(vec![("x", DAY0 + 3600, "w2")]);
        let e = Engine::new(&s, EngineConfig::default()).unwrap();
        let a = e.answer_query(&DeviceId::new("x"), DAY0 + 3600, Granularity::Coarse).unwrap();
        assert_eq!(a.level, AnswerLevel::Region);
        assert!(a.distribution.is_empty());
        let f = e.answer_query(&DeviceId::new("x"), DAY0 + 3600, Granularity::Fine).unwrap();
        assert_eq!(f.room, Some(RoomId::new("b")));
    }

    #[test]
    fn out_of_horizon_carries_query_context() {
        let s = store(vec![("x", DAY0 + 3600, "w2")]);
        let e = Engine::new(&s, EngineConfig::default()).unwrap();
        let err = e.answer_query(&DeviceId::new("x"), DAY0 + 86_000, Granularity::Fine).unwrap_err();
        assert!(matches!(err, LocaterError::Query { .. }));
        assert!(!err.is_usage());
    }

    #[test]
    fn derived_tuples_only_for_gaps() {
        let s = store(vec![("x", DAY0 + 3600, "w2"), ("x", DAY0 + 3600 * 8, "w2")]);
        let e = Engine::new(&s, EngineConfig::default()).unwrap();
        let x = DeviceId::new("x");
        let a = e.answer_query(&x, DAY0 + 3600 * 4, Granularity::Fine).unwrap();
        let d = e.derived_tuple(&x, DAY0 + 3600 * 4, &a).unwrap().unwrap();
        assert!(d.derived);
        assert_eq!(d.loc, Location::Outside);
        assert!(e.derived_tuple(&x, DAY0 + 3600, &a).unwrap().is_none());
    }
}
