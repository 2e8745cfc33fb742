//! Coarse localization: decides whether a device was inside the building
//! during a gap and, if so, in which region.
//!
//! Gaps in the device's recent history are bootstrap-labeled by duration
//! (short gaps inside, long gaps outside). A building-level classifier is then
//! self-trained over the remaining gaps, and a region-level classifier over
//! the gaps labeled inside. Devices with too few labels use a classifier
//! pooled over every device.

pub mod logistic;
pub mod selftrain;
pub mod thresholds;

use std::collections::BTreeMap;

use crate::clock::{Clock, DAY};
use crate::config::EngineConfig;
use crate::error::Result;
use crate::model::{DeviceId, LocationAnswer, RegionId, SemanticLocationTuple, SpaceModel, Timestamp};
use crate::store::EventStore;

use logistic::{LogisticClassifier, TrainConfig};
use selftrain::{iterative_classify, Unlabeled};

pub const INSIDE: &str = "inside";
pub const OUTSIDE: &str = "outside";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseParams {
    pub tau_low_s: i64,
    pub tau_high_s: i64,
    pub history_days: i64,
    pub train: TrainConfig,
    pub min_device_labeled: usize,
    pub self_training_fraction: f64,
}

impl CoarseParams {
    pub fn from_config(cfg: &EngineConfig) -> Self {
        CoarseParams {
            tau_low_s: cfg.tau_low_s,
            tau_high_s: cfg.tau_high_s,
            history_days: cfg.history_days,
            train: TrainConfig {
                iterations: cfg.lr_iterations,
                warm_iterations: cfg.lr_warm_iterations,
                rate: cfg.lr_rate,
                l2: cfg.lr_l2,
            },
            min_device_labeled: cfg.min_device_labeled,
            self_training_fraction: cfg.self_training_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bootstrap {
    Inside,
    Outside,
    Unlabeled,
}

pub fn bootstrap_label(duration_s: i64, tau_low_s: i64, tau_high_s: i64) -> Bootstrap {
    if duration_s <= tau_low_s {
        Bootstrap::Inside
    } else if duration_s >= tau_high_s {
        Bootstrap::Outside
    } else {
        Bootstrap::Unlabeled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoarseDecision<'a> {
    Outside,
    Inside(&'a RegionId),
}

// ----- Features -----

#[derive(Debug, Clone, PartialEq)]
pub struct GapFeatures {
    pub start_tod_s: i64,
    pub end_tod_s: i64,
    pub duration_s: i64,
    pub start_dow: u32,
    pub end_dow: u32,
    pub prev: Option<RegionId>,
    pub next: Option<RegionId>,
    /// Mean clean tuples per history day overlapping the gap's time of day.
    pub density: f64,
    /// Clean tuples per region overlapping the gap's time of day in history.
    pub visits: BTreeMap<RegionId, usize>,
}

/// Clean tuples and day starts of a device's history window.
#[derive(Debug, Clone, Default)]
pub struct History {
    /// Index range of the device's tuples overlapping the window.
    pub range: (usize, usize),
    pub day_starts: Vec<Timestamp>,
}

impl History {
    pub fn build(store: &EventStore, device: &DeviceId, day_start: Timestamp, days: i64) -> Self {
        let clock = &store.clock;
        let tuples = store.table.tuples(device);
        let Some(first) = tuples.first() else {
            return History::default();
        };
        let from = clock.shift_days(day_start, -days).max(clock.day_start(first.st));
        let lo = tuples.partition_point(|t| t.et <= from);
        let hi = tuples.partition_point(|t| t.st < day_start);
        let mut day_starts = Vec::new();
        let mut d = from;
        while d < day_start {
            day_starts.push(d);
            d = clock.next_midnight(d);
        }
        History {
            range: (lo, hi.max(lo)),
            day_starts,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.range.0 >= self.range.1
    }

    /// Gap tuples lying entirely inside the window.
    pub fn gaps<'a>(&self, tuples: &'a [SemanticLocationTuple]) -> impl Iterator<Item = (usize, &'a SemanticLocationTuple)> {
        let first_day = self.day_starts.first().copied().unwrap_or(Timestamp::MAX);
        (self.range.0..self.range.1)
            .map(move |i| (i, &tuples[i]))
            .filter(move |(_, t)| t.is_gap() && t.st >= first_day)
    }
}

fn neighbor_region(tuples: &[SemanticLocationTuple], idx: usize, forward: bool) -> Option<RegionId> {
    let mut i = idx;
    loop {
        if forward {
            i += 1;
            if i >= tuples.len() {
                return None;
            }
        } else {
            if i == 0 {
                return None;
            }
            i -= 1;
        }
        if let Some(g) = tuples[i].region() {
            return Some(g.clone());
        }
    }
}

pub fn gap_features(
    tuples: &[SemanticLocationTuple],
    idx: usize,
    hist: &History,
    clock: &Clock,
) -> GapFeatures {
    let gap = &tuples[idx];
    let start_tod = clock.seconds_of_day(gap.st);
    let duration = gap.duration();
    let end_tod = (start_tod + duration).min(DAY);

    let clean = &tuples[hist.range.0..hist.range.1];
    let mut count = 0usize;
    let mut visits: BTreeMap<RegionId, usize> = BTreeMap::new();
    for &d in &hist.day_starts {
        let (ws, we) = (d + start_tod, d + end_tod);
        let lo = clean.partition_point(|t| t.et <= ws);
        for t in &clean[lo..] {
            if t.st >= we {
                break;
            }
            if let Some(g) = t.region() {
                if t.overlaps(ws, we) {
                    count += 1;
                    *visits.entry(g.clone()).or_default() += 1;
                }
            }
        }
    }
    let density = if hist.day_starts.is_empty() {
        0.0
    } else {
        count as f64 / hist.day_starts.len() as f64
    };

    GapFeatures {
        start_tod_s: start_tod,
        end_tod_s: end_tod,
        duration_s: duration,
        start_dow: clock.weekday(gap.st),
        end_dow: clock.weekday((gap.et - 1).max(gap.st)),
        prev: neighbor_region(tuples, idx, false),
        next: neighbor_region(tuples, idx, true),
        density,
        visits,
    }
}

/// Inside region for a gap: the shared neighbor region when both sides
/// agree, else the most visited region in the same time-of-day window.
pub fn heuristic_region(f: &GapFeatures) -> Option<RegionId> {
    if let (Some(p), Some(n)) = (&f.prev, &f.next) {
        if p == n {
            return Some(p.clone());
        }
    }
    let mut best: Option<(&RegionId, usize)> = None;
    for (g, &c) in &f.visits {
        if best.is_none_or(|b| c > b.1) {
            best = Some((g, c));
        }
    }
    best.map(|b| b.0.clone()).or_else(|| f.prev.clone()).or_else(|| f.next.clone())
}

/// Dense encoding: four numeric columns, two weekday one-hots and two
/// region one-hots with a trailing "none" slot.
pub fn encode(f: &GapFeatures, vocab: &[RegionId]) -> Vec<f64> {
    let g = vocab.len() + 1;
    let mut x = vec![0.0; 4 + 14 + 2 * g];
    x[0] = f.start_tod_s as f64 / 3600.0;
    x[1] = f.end_tod_s as f64 / 3600.0;
    x[2] = f.duration_s as f64 / 3600.0;
    x[3] = f.density;
    x[4 + f.start_dow as usize] = 1.0;
    x[11 + f.end_dow as usize] = 1.0;
    let slot = |r: &Option<RegionId>| match r {
        Some(id) => vocab.binary_search(id).unwrap_or(vocab.len()),
        None => vocab.len(),
    };
    x[18 + slot(&f.prev)] = 1.0;
    x[18 + g + slot(&f.next)] = 1.0;
    x
}

pub fn region_vocab(space: &SpaceModel) -> Vec<RegionId> {
    space.regions.keys().cloned().collect()
}

// ----- Models -----

#[derive(Debug, Clone, Default)]
pub struct CoarseModel {
    pub building: Option<LogisticClassifier>,
    pub region: Option<LogisticClassifier>,
    pub building_rounds: usize,
    pub region_rounds: usize,
    /// Bootstrap-labeled gaps at building level.
    pub labeled: usize,
    pub history: History,
}

impl CoarseModel {
    /// True when the device lacks enough labels for its own classifiers.
    pub fn needs_pooled(&self, params: &CoarseParams) -> bool {
        self.building.is_none() || self.labeled < params.min_device_labeled
    }
}

fn rounds(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

/// Trains the device's classifiers on gaps from the `history_days` days
/// before `day_start`.
pub fn train_device_model(
    store: &EventStore,
    device: &DeviceId,
    day_start: Timestamp,
    params: &CoarseParams,
) -> Result<CoarseModel> {
    let tuples = store.table.tuples(device);
    let history = History::build(store, device, day_start, params.history_days);
    let vocab = region_vocab(&store.space);

    let mut labeled_b: Vec<(Vec<f64>, String)> = Vec::new();
    let mut labeled_r: Vec<(Vec<f64>, String)> = Vec::new();
    let mut unlabeled: Vec<Unlabeled> = Vec::new();
    for (idx, gap) in history.gaps(tuples) {
        let f = gap_features(tuples, idx, &history, &store.clock);
        let x = encode(&f, &vocab);
        match bootstrap_label(gap.duration(), params.tau_low_s, params.tau_high_s) {
            Bootstrap::Inside => {
                if let Some(g) = heuristic_region(&f) {
                    labeled_r.push((x.clone(), g.to_string()));
                }
                labeled_b.push((x, INSIDE.to_string()));
            }
            Bootstrap::Outside => labeled_b.push((x, OUTSIDE.to_string())),
            Bootstrap::Unlabeled => unlabeled.push(Unlabeled { id: gap.lid, x }),
        }
    }

    let mut model = CoarseModel {
        labeled: labeled_b.len(),
        history,
        ..CoarseModel::default()
    };
    if labeled_b.len() < params.min_device_labeled.max(1) {
        return Ok(model);
    }

    let n_b = rounds(params.self_training_fraction, unlabeled.len());
    let out_b = iterative_classify(&labeled_b, &unlabeled, &params.train, Some(n_b))?;
    model.building = Some(out_b.classifier);
    model.building_rounds = out_b.iterations;

    if !labeled_r.is_empty() {
        let promoted_inside: Vec<Unlabeled> = out_b
            .promoted
            .iter()
            .filter(|(_, l)| l == INSIDE)
            .filter_map(|(id, _)| unlabeled.iter().find(|u| u.id == *id).cloned())
            .collect();
        let n_r = rounds(params.self_training_fraction, promoted_inside.len());
        let out_r = iterative_classify(&labeled_r, &promoted_inside, &params.train, Some(n_r))?;
        model.region = Some(out_r.classifier);
        model.region_rounds = out_r.iterations;
    }
    Ok(model)
}

/// Classifiers trained on every device's bootstrap labels, without
/// self-training.
pub fn train_pooled_model(store: &EventStore, day_start: Timestamp, params: &CoarseParams) -> Result<CoarseModel> {
    let vocab = region_vocab(&store.space);
    let mut xb: Vec<Vec<f64>> = Vec::new();
    let mut yb: Vec<&str> = Vec::new();
    let mut xr: Vec<Vec<f64>> = Vec::new();
    let mut yr: Vec<String> = Vec::new();
    for device in store.table.devices() {
        let tuples = store.table.tuples(device);
        let hist = History::build(store, device, day_start, params.history_days);
        for (idx, gap) in hist.gaps(tuples) {
            let b = bootstrap_label(gap.duration(), params.tau_low_s, params.tau_high_s);
            if b == Bootstrap::Unlabeled {
                continue;
            }
            let f = gap_features(tuples, idx, &hist, &store.clock);
            let x = encode(&f, &vocab);
            if b == Bootstrap::Inside {
                if let Some(g) = heuristic_region(&f) {
                    xr.push(x.clone());
                    yr.push(g.to_string());
                }
                yb.push(INSIDE);
            } else {
                yb.push(OUTSIDE);
            }
            xb.push(x);
        }
    }
    let mut model = CoarseModel {
        labeled: xb.len(),
        ..CoarseModel::default()
    };
    if !xb.is_empty() {
        let refs: Vec<&[f64]> = xb.iter().map(|r| r.as_slice()).collect();
        model.building = Some(LogisticClassifier::train(&refs, &yb, &params.train)?);
    }
    if !xr.is_empty() {
        let refs: Vec<&[f64]> = xr.iter().map(|r| r.as_slice()).collect();
        let labels: Vec<&str> = yr.iter().map(String::as_str).collect();
        model.region = Some(LogisticClassifier::train(&refs, &labels, &params.train)?);
    }
    Ok(model)
}

/// Classifies gap `idx` of `device`. `own` holds the device's history; the
/// pooled model replaces its classifiers when the device lacks labels.
pub fn classify_gap<'s>(
    store: &'s EventStore,
    device: &DeviceId,
    idx: usize,
    own: &CoarseModel,
    pooled: Option<&CoarseModel>,
    params: &CoarseParams,
) -> CoarseDecision<'s> {
    let tuples = store.table.tuples(device);
    let gap = &tuples[idx];
    let f = gap_features(tuples, idx, &own.history, &store.clock);
    let resolve = |g: Option<RegionId>| -> CoarseDecision<'s> {
        match g.and_then(|g| store.space.regions.get_key_value(&g)) {
            Some((k, _)) => CoarseDecision::Inside(k),
            None => CoarseDecision::Outside,
        }
    };

    let use_pooled = own.needs_pooled(params);
    let pick = |own_c: &'_ Option<LogisticClassifier>, pooled_c: Option<&'_ Option<LogisticClassifier>>| {
        if use_pooled {
            pooled_c.and_then(|p| p.clone())
        } else {
            own_c.clone()
        }
    };

    let region = match bootstrap_label(gap.duration(), params.tau_low_s, params.tau_high_s) {
        Bootstrap::Inside => return resolve(heuristic_region(&f)),
        Bootstrap::Outside => return CoarseDecision::Outside,
        Bootstrap::Unlabeled => {
            let vocab = region_vocab(&store.space);
            let x = encode(&f, &vocab);
            let building = pick(&own.building, pooled.map(|p| &p.building));
            let inside = match &building {
                Some(c) => c.predict(&x).label == INSIDE,
                None => 2 * gap.duration() <= params.tau_low_s + params.tau_high_s,
            };
            if !inside {
                return CoarseDecision::Outside;
            }
            let region = pick(&own.region, pooled.map(|p| &p.region));
            match region {
                Some(c) => Some(RegionId::new(c.predict(&x).label)),
                None => heuristic_region(&f),
            }
        }
    };
    resolve(region.or_else(|| heuristic_region(&f)))
}

/// Standalone coarse answer, training whatever models the query needs.
pub fn coarse_localize(
    store: &EventStore,
    device: &DeviceId,
    t: Timestamp,
    params: &CoarseParams,
) -> Result<LocationAnswer> {
    let tuple = store.table.lookup_tuple(device, t)?;
    if let Some(g) = tuple.region() {
        return Ok(LocationAnswer::region(g.clone()));
    }
    let idx = store.table.index_at(device, t).expect("tuple found above");
    let day = store.clock.day_start(tuple.st);
    let own = train_device_model(store, device, day, params)?;
    let pooled = if own.needs_pooled(params) {
        Some(train_pooled_model(store, day, params)?)
    } else {
        None
    };
    Ok(match classify_gap(store, device, idx, &own, pooled.as_ref(), params) {
        CoarseDecision::Outside => LocationAnswer::outside(),
        CoarseDecision::Inside(g) => LocationAnswer::region(g.clone()),
    })
}
