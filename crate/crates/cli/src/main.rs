//! `locater` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use locater_core::cache::AffinityCache;
use locater_core::coarse::thresholds::estimate_thresholds;
use locater_core::config::EngineConfig;
use locater_core::engine::Engine;
use locater_core::eval::{compare, parse_systems, sample_queries, write_json, write_tsv};
use locater_core::model::{DeviceId, Granularity, Timestamp};
use locater_core::sim::{generate, predictability_by_device, read_truth, ScenarioConfig, TruthIndex};
use locater_core::store::{parse_timestamp, EventStore, CACHE_FILE};
use locater_core::LocaterError;

#[derive(Debug, Parser)]
#[command(name = "locater", version, about = "Clean WiFi connectivity logs into semantic locations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Parse an event log and a space document into a store directory.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the coarse thresholds and per-device validity periods.
    EstimateParams {
        #[arg(long)]
        store: PathBuf,
    },
    /// Answer one location query, or clean every gap with --clean-all.
    Query {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, required_unless_present = "clean_all")]
        device: Option<String>,
        /// Epoch seconds or RFC 3339.
        #[arg(long, required_unless_present = "clean_all")]
        time: Option<String>,
        #[arg(long, default_value = "fine")]
        granularity: String,
        /// Answer every gap of every device (or of --device) in turn.
        #[arg(long)]
        clean_all: bool,
    },
    /// Compare systems on sampled queries against a ground-truth file.
    Evaluate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value = "baseline1,baseline2,i-locater,d-locater")]
        systems: String,
        /// Days of history before the first sampled query.
        #[arg(long, default_value_t = 7)]
        warmup_days: i64,
        /// Defaults to the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic scenario: events.csv, truth.csv and space.json.
    Simulate {
        /// Bundled scenario name or path to a scenario file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the affinity cache of a store.
    CacheStats {
        #[arg(long)]
        store: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<LocaterError>().is_some_and(LocaterError::is_usage);
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    let cfg = EngineConfig::from_env()?;
    match cmd {
        Cmd::Ingest { events, space, out } => {
            let (store, rejects) = EventStore::ingest(&events, &space, &out, &cfg)?;
            println!(
                "ingested events={} devices={} tuples={} rejected={}",
                store.events.len(),
                store.table.devices().count(),
                store.table.tuple_count(),
                rejects.len()
            );
            for r in rejects.iter().take(10) {
                eprintln!("rejected line {}: {}", r.line, r.reason);
            }
        }
        Cmd::EstimateParams { store } => {
            let store = EventStore::open(&store)?;
            let th = estimate_thresholds(
                &store.events,
                cfg.threshold_mode,
                (cfg.tau_low_s as f64, cfg.tau_high_s as f64),
            );
            println!(
                "thresholds tau_low_s={:.1} tau_high_s={:.1} source={}",
                th.tau_low_s,
                th.tau_high_s,
                if th.from_defaults { "defaults" } else { "estimated" }
            );
            for (d, delta) in &store.table.deltas {
                println!("delta device={d} seconds={delta}");
            }
        }
        Cmd::Query {
            store,
            device,
            time,
            granularity,
            clean_all,
        } => {
            let granularity: Granularity = granularity.parse()?;
            let store = EventStore::open(&store)?;
            let engine = engine_for(&store, cfg)?;
            let device = device.map(DeviceId::new);
            if clean_all {
                clean_all_gaps(&engine, device.as_ref(), granularity)?;
            } else {
                let device = device.expect("required by clap");
                let t = parse_time(time.as_deref().expect("required by clap"))?;
                let answer = engine.answer_query(&device, t, granularity)?;
                println!("{}", answer.to_record());
                if let Some(tuple) = engine.derived_tuple(&device, t, &answer)? {
                    store.append_derived(&[tuple])?;
                }
            }
        }
        Cmd::Evaluate {
            store,
            truth,
            queries,
            systems,
            warmup_days,
            seed,
            json,
        } => {
            let systems = parse_systems(&systems)?;
            let seed = seed.unwrap_or(cfg.seed);
            let store = EventStore::open(&store)?;
            let records = read_truth(&truth)?;
            let index = TruthIndex::new(&records);
            let engine = Engine::new(&store, cfg)?;
            let qs = sample_queries(&store, &index, queries, seed, warmup_days)?;
            let pred = predictability_by_device(&records);
            let report = compare(&engine, &index, &qs, &systems, &pred, seed)?;
            print!("{}", write_tsv(&report));
            if let Some(path) = json {
                let text = format!("{:#}\n", write_json(&report));
                std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Cmd::Simulate { scenario, out } => {
            let sc = ScenarioConfig::load(&scenario)?;
            let sim = generate(&sc)?;
            sim.write(&out)?;
            println!(
                "simulated scenario={} devices={} events={} truth={}",
                sc.name,
                sim.people.len(),
                sim.events.len(),
                sim.truth.len()
            );
        }
        Cmd::CacheStats { store } => {
            let cache = AffinityCache::open(&cache_path(&store))?;
            println!("{}", cache.stats());
        }
    }
    Ok(())
}

fn cache_path(store: &Path) -> PathBuf {
    store.join(CACHE_FILE)
}

fn parse_time(s: &str) -> Result<Timestamp> {
    parse_timestamp(s).ok_or_else(|| LocaterError::InvalidConfig(format!("bad timestamp `{s}`")).into())
}

fn engine_for(store: &EventStore, cfg: EngineConfig) -> Result<Engine<'_>> {
    let cached = cfg.cache.enabled;
    let engine = Engine::new(store, cfg)?;
    Ok(match (cached, store.dir()) {
        (true, Some(dir)) => engine.with_cache(AffinityCache::open(&cache_path(dir))?),
        _ => engine,
    })
}

/// Naive iteration: one query at the midpoint of every gap, written back
/// as derived tuples.
fn clean_all_gaps(engine: &Engine, only: Option<&DeviceId>, granularity: Granularity) -> Result<()> {
    let store = engine.store();
    let devices: Vec<DeviceId> = match only {
        Some(d) => vec![d.clone()],
        None => store.table.devices().cloned().collect(),
    };
    let mut derived = Vec::new();
    for d in &devices {
        for tuple in store.table.tuples(d).iter().filter(|x| x.is_gap()) {
            let t = tuple.st + tuple.duration() / 2;
            let answer = engine.answer_query(d, t, granularity)?;
            derived.extend(engine.derived_tuple(d, t, &answer)?);
        }
    }
    store.append_derived(&derived)?;
    println!("cleaned gaps={} devices={}", derived.len(), devices.len());
    Ok(())
}
