//! Affinity graph cache: per-query local graphs merged into a time-stamped
//! global graph that orders neighbor processing for later queries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::clock::DAY;
use crate::error::{LocaterError, Result};
use crate::model::{DeviceId, Timestamp};

type Pair = (DeviceId, DeviceId);

fn pair(a: &DeviceId, b: &DeviceId) -> Pair {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Edge weight from the per-room group affinities of a pair.
pub fn local_edge_weight(alphas: &[f64], rooms: usize) -> f64 {
    if rooms == 0 {
        return 0.0;
    }
    (alphas.iter().sum::<f64>() / rooms as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalAffinityGraph {
    pub t: Timestamp,
    pub edges: BTreeMap<Pair, f64>,
}

impl LocalAffinityGraph {
    pub fn new(t: Timestamp, edges: impl IntoIterator<Item = (DeviceId, DeviceId, f64)>) -> Self {
        LocalAffinityGraph {
            t,
            edges: edges
                .into_iter()
                .filter(|(a, b, _)| a != b)
                .map(|(a, b, w)| (pair(&a, &b), w.clamp(0.0, 1.0)))
                .collect(),
        }
    }
}

/// Gaussian-weighted mean of `(weight, time)` entries around `t`, with time
/// measured in days.
pub fn time_weighted_affinity(entries: &[(f64, Timestamp)], t: Timestamp) -> f64 {
    if entries.is_empty() {
        return 0.0;
    }
    let logs: Vec<f64> = entries
        .iter()
        .map(|(_, ti)| {
            let z = (ti - t) as f64 / DAY as f64;
            -0.5 * z * z
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale: f64 = logs.iter().map(|l| (l - top).exp()).sum();
    entries
        .iter()
        .zip(&logs)
        .map(|((w, _), l)| w * (l - top).exp() / scale)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub nodes: usize,
    pub edges: usize,
    pub entries: usize,
    pub oldest: Option<Timestamp>,
}

impl std::fmt::Display for CacheStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "nodes={} edges={} entries={} oldest={}",
            self.nodes,
            self.edges,
            self.entries,
            self.oldest.map_or("-".to_string(), |t| t.to_string())
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalAffinityGraph {
    edges: BTreeMap<Pair, Vec<(f64, Timestamp)>>,
}

impl GlobalAffinityGraph {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edge(&self, a: &DeviceId, b: &DeviceId) -> &[(f64, Timestamp)] {
        self.edges.get(&pair(a, b)).map_or(&[], Vec::as_slice)
    }

    fn insert(&mut self, key: Pair, w: f64, t: Timestamp) {
        let v = self.edges.entry(key).or_default();
        if v.iter().any(|&(w0, t0)| t0 == t && w0 == w) {
            return;
        }
        let at = v.partition_point(|&(_, t0)| t0 <= t);
        v.insert(at, (w, t));
    }

    /// Appends each local edge as `(weight, t)`; repeated entries are kept once.
    pub fn merge(&mut self, local: &LocalAffinityGraph) {
        for (k, &w) in &local.edges {
            self.insert(k.clone(), w, local.t);
        }
    }

    pub fn affinity(&self, a: &DeviceId, b: &DeviceId, t: Timestamp) -> Option<f64> {
        self.edges
            .get(&pair(a, b))
            .map(|v| time_weighted_affinity(v, t))
    }

    /// `candidates` by decreasing cached affinity with `device`; devices
    /// without an edge follow in identifier order.
    pub fn ordered_neighbors(&self, device: &DeviceId, t: Timestamp, candidates: &[DeviceId]) -> Vec<DeviceId> {
        if self.is_empty() {
            return candidates.to_vec();
        }
        let mut keyed: Vec<(Option<f64>, &DeviceId)> =
            candidates.iter().map(|d| (self.affinity(device, d, t), d)).collect();
        keyed.sort_by(|(wa, a), (wb, b)| match (wa, wb) {
            (Some(x), Some(y)) => y.total_cmp(x).then_with(|| a.cmp(b)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.cmp(b),
        });
        keyed.into_iter().map(|(_, d)| d.clone()).collect()
    }

    /// Drops entries older than `now - ts`, then empty edges.
    pub fn prune(&mut self, now: Timestamp, ts: i64) {
        for v in self.edges.values_mut() {
            v.retain(|&(_, t)| now - t <= ts);
        }
        self.edges.retain(|_, v| !v.is_empty());
    }

    pub fn stats(&self) -> CacheStats {
        let nodes: BTreeSet<&DeviceId> = self.edges.keys().flat_map(|(a, b)| [a, b]).collect();
        CacheStats {
            nodes: nodes.len(),
            edges: self.edges.len(),
            entries: self.edges.values().map(Vec::len).sum(),
            oldest: self.edges.values().filter_map(|v| v.first().map(|e| e.1)).min(),
        }
    }

    fn records(&self) -> impl Iterator<Item = LogRecord> + '_ {
        self.edges.iter().flat_map(|((a, b), v)| {
            v.iter().map(move |&(w, t)| LogRecord {
                a: a.clone(),
                b: b.clone(),
                w,
                t,
            })
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRecord {
    a: DeviceId,
    b: DeviceId,
    w: f64,
    t: Timestamp,
}

/// Global graph shared by concurrent queries, optionally persisted as an
/// append-only JSON-lines log.
#[derive(Debug, Default)]
pub struct AffinityCache {
    graph: RwLock<GlobalAffinityGraph>,
    log: Option<PathBuf>,
}

impl AffinityCache {
    pub fn in_memory() -> Self {
        AffinityCache::default()
    }

    /// Replays the log at `path` when it exists.
    pub fn open(path: &Path) -> Result<Self> {
        let mut graph = GlobalAffinityGraph::default();
        if path.exists() {
            let f = File::open(path).map_err(|e| LocaterError::io(path, e))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| LocaterError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: LogRecord = serde_json::from_str(&line)
                    .map_err(|e| LocaterError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
                graph.insert(pair(&r.a, &r.b), r.w, r.t);
            }
        }
        Ok(AffinityCache {
            graph: RwLock::new(graph),
            log: Some(path.to_path_buf()),
        })
    }

    pub fn snapshot(&self) -> GlobalAffinityGraph {
        self.graph.read().expect("cache lock").clone()
    }

    pub fn ordered_neighbors(&self, device: &DeviceId, t: Timestamp, candidates: &[DeviceId]) -> Vec<DeviceId> {
        self.graph
            .read()
            .expect("cache lock")
            .ordered_neighbors(device, t, candidates)
    }

    pub fn stats(&self) -> CacheStats {
        self.graph.read().expect("cache lock").stats()
    }

    pub fn record(&self, local: &LocalAffinityGraph) -> Result<()> {
        let mut g = self.graph.write().expect("cache lock");
        g.merge(local);
        if let Some(path) = &self.log {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| LocaterError::io(path, e))?;
            f.lock().map_err(|e| LocaterError::io(path, e))?;
            let mut buf = String::new();
            for ((a, b), &w) in &local.edges {
                let r = LogRecord {
                    a: a.clone(),
                    b: b.clone(),
                    w,
                    t: local.t,
                };
                buf.push_str(&serde_json::to_string(&r).expect("record serializes"));
                buf.push('\n');
            }
            f.write_all(buf.as_bytes()).map_err(|e| LocaterError::io(path, e))?;
            f.unlock().map_err(|e| LocaterError::io(path, e))?;
        }
        Ok(())
    }

    /// Prunes stale entries and rewrites the log with what remains.
    pub fn compact(&self, now: Timestamp, ts: i64) -> Result<()> {
        let mut g = self.graph.write().expect("cache lock");
        g.prune(now, ts);
        if let Some(path) = &self.log {
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(false)
                .open(path)
                .map_err(|e| LocaterError::io(path, e))?;
            f.lock().map_err(|e| LocaterError::io(path, e))?;
            f.set_len(0).map_err(|e| LocaterError::io(path, e))?;
            let mut buf = String::new();
            for r in g.records() {
                buf.push_str(&serde_json::to_string(&r).expect("record serializes"));
                buf.push('\n');
            }
            f.write_all(buf.as_bytes()).map_err(|e| LocaterError::io(path, e))?;
            f.unlock().map_err(|e| LocaterError::io(path, e))?;
        }
        Ok(())
    }
}
