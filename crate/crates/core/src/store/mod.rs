//! Event ingestion and the location table store.
//!
//! A store directory holds the normalized raw log (`events.csv`, append-only),
//! the space document (`space.json`), a `meta.json` with the timezone and
//! delta settings used to build table L, a rebuildable `table.json` snapshot,
//! `derived.jsonl` with cleaned results, and the affinity cache log.

mod parse;
mod table;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use parse::{
    format_timestamp, load_space, parse_events, parse_events_str, parse_space, parse_timestamp,
    space_to_json, write_events_csv, write_rejects, EventFormat, ParseOutcome, RawEvent, Reject,
    EVENTS_HEADER,
};
pub use table::{build_location_table, compute_validity_intervals, estimate_delta, LocationTable};

use crate::clock::Clock;
use crate::config::{DeltaConfig, EngineConfig};
use crate::error::{LocaterError, Result};
use crate::model::{SemanticLocationTuple, SpaceModel};

pub const EVENTS_FILE: &str = "events.csv";
pub const SPACE_FILE: &str = "space.json";
pub const META_FILE: &str = "meta.json";
pub const TABLE_FILE: &str = "table.json";
pub const DERIVED_FILE: &str = "derived.jsonl";
pub const REJECTS_FILE: &str = "rejects.tsv";
pub const CACHE_FILE: &str = "affinity.log";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreMeta {
    timezone: String,
    delta: DeltaConfig,
}

/// Immutable snapshot of raw events, the space model and table L.
#[derive(Debug, Clone)]
pub struct EventStore {
    pub space: SpaceModel,
    pub events: Vec<RawEvent>,
    pub table: LocationTable,
    pub clock: Clock,
    pub delta_cfg: DeltaConfig,
    dir: Option<PathBuf>,
}

impl EventStore {
    pub fn from_parts(
        events: Vec<RawEvent>,
        space: SpaceModel,
        clock: Clock,
        delta_cfg: DeltaConfig,
    ) -> Result<Self> {
        space.ensure_valid()?;
        let table = build_location_table(&events, &space, &clock, &delta_cfg)?;
        Ok(EventStore {
            space,
            events,
            table,
            clock,
            delta_cfg,
            dir: None,
        })
    }

    /// New snapshot with extra events; the current snapshot is untouched.
    pub fn with_appended(&self, more: &[RawEvent]) -> Result<Self> {
        let mut events = self.events.clone();
        events.extend_from_slice(more);
        let mut next = Self::from_parts(events, self.space.clone(), self.clock, self.delta_cfg)?;
        next.dir = self.dir.clone();
        Ok(next)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Parses the inputs, builds table L and writes a store directory.
    /// Rejected lines are returned and written to `rejects.tsv`.
    pub fn ingest(
        events_path: &Path,
        space_path: &Path,
        out_dir: &Path,
        cfg: &EngineConfig,
    ) -> Result<(Self, Vec<Reject>)> {
        let parsed = parse_events(events_path, EventFormat::from_path(events_path))?;
        let space = load_space(space_path)?;
        let mut store = Self::from_parts(parsed.events, space, cfg.clock()?, cfg.delta)?;
        std::fs::create_dir_all(out_dir).map_err(|e| LocaterError::io(out_dir, e))?;
        store.dir = Some(out_dir.to_path_buf());
        store.save()?;
        write_rejects(&out_dir.join(REJECTS_FILE), &parsed.rejects)?;
        Ok((store, parsed.rejects))
    }

    fn save(&self) -> Result<()> {
        let dir = self.dir.as_ref().expect("store has a directory");
        write_events_csv(&dir.join(EVENTS_FILE), &self.events)?;
        write_text(&dir.join(SPACE_FILE), &space_to_json(&self.space))?;
        let meta = StoreMeta {
            timezone: self.clock.name().to_string(),
            delta: self.delta_cfg,
        };
        write_text(&dir.join(META_FILE), &serde_json::to_string_pretty(&meta).expect("meta"))?;
        write_text(
            &dir.join(TABLE_FILE),
            &serde_json::to_string(&self.table).expect("table serializes"),
        )
    }

    /// Reopens a store directory and rebuilds table L from the raw log.
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| LocaterError::io(&meta_path, e))?;
        let meta: StoreMeta = serde_json::from_str(&text)
            .map_err(|e| LocaterError::Format(format!("{}: {e}", meta_path.display())))?;
        let parsed = parse_events(&dir.join(EVENTS_FILE), EventFormat::Csv)?;
        if let Some(r) = parsed.rejects.first() {
            return Err(LocaterError::Format(format!(
                "stored log line {}: {}",
                r.line, r.reason
            )));
        }
        let space = load_space(&dir.join(SPACE_FILE))?;
        let mut store = Self::from_parts(parsed.events, space, Clock::new(&meta.timezone)?, meta.delta)?;
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    /// Reads the table snapshot written at ingest time.
    pub fn load_table_snapshot(dir: &Path) -> Result<LocationTable> {
        let p = dir.join(TABLE_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| LocaterError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| LocaterError::Format(format!("{}: {e}", p.display())))
    }

    /// Appends cleaned tuples, tagged derived, to `derived.jsonl`.
    pub fn append_derived(&self, tuples: &[SemanticLocationTuple]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(DERIVED_FILE);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| LocaterError::io(&path, e))?;
        for t in tuples {
            let mut t = t.clone();
            t.derived = true;
            let line = serde_json::to_string(&t).expect("tuple serializes");
            writeln!(f, "{line}").map_err(|e| LocaterError::io(&path, e))?;
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LocaterError::io(path, e))
}
